"""Structure evaluation: features, self-similarity, fusion, corpus statistics.

Pipeline for one track::

    audio -> {chroma, mfcc} -> 200 frames each -> SSM per view
          -> similarity network fusion -> cosine normalisation -> 5 x 5 mean pool

For a corpus the 5 x 5 matrices are averaged (Fig.-1 style mean/variance
maps) and their strict upper triangles are summarised by a Gaussian, so
two corpora can be compared with the Frechet distance.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.fft import dct
from scipy.spatial.distance import pdist, squareform

from .synth import AudioBuffer

N_FFT = 2048
HOP = 512
N_MELS = 64
N_MFCC = 20
N_TARGET = 200
SSM_KAPPA = 10
SSM_EPS = 1e-12
SNF_K = 20
SNF_ITERATIONS = 20
GRID = 5
PSD_TOL = 1e-8

PITCH_CLASSES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")


class EvalError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    kind: str
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 2 or self.frames.shape[0] < 2:
            raise EvalError("a feature matrix needs at least 2 frames")
        if not np.all(np.isfinite(self.frames)):
            raise EvalError("feature matrix has non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class SSMatrix:
    values: np.ndarray


@dataclass
class FusedSSM:
    values: np.ndarray
    iterations_used: int


@dataclass
class SSMStats:
    mean: np.ndarray
    variance: np.ndarray
    count: int


@dataclass
class GaussianSummary:
    mu: np.ndarray
    cov: np.ndarray


def _values(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m), dtype=float)


# --------------------------------------------------------------------------- #
# features

def stft_magnitude(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Hann-windowed magnitude spectrogram, frames x (n_fft // 2 + 1), no padding."""
    x = np.asarray(samples, dtype=float)
    n_frames = 1 + (x.size - n_fft) // hop if x.size >= n_fft else 0
    if n_frames < 2:
        raise EvalError(f"audio too short: {x.size} samples gives {max(n_frames, 0)} analysis windows, need 2")
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:n_frames]
    return np.abs(np.fft.rfft(frames * np.hanning(n_fft + 1)[:-1], axis=1))


def chroma_map(sample_rate: int, n_fft: int = N_FFT, fmin: float = 27.5) -> np.ndarray:
    """Pitch class of each FFT bin (A440 reference, C = 0), -1 for unused bins."""
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    classes = np.full(freqs.size, -1)
    ok = freqs >= fmin
    midi = 69.0 + 12.0 * np.log2(freqs[ok] / 440.0)
    classes[ok] = np.round(midi).astype(int) % 12
    return classes


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int = N_FFT, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1)."""
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def extract_features(audio: AudioBuffer, kind: str) -> FeatureMatrix:
    mag = stft_magnitude(audio.samples)
    power = mag ** 2
    if kind == "chroma":
        classes = chroma_map(audio.sample_rate)
        chroma = np.zeros((power.shape[0], 12))
        for pc in range(12):
            chroma[:, pc] = power[:, classes == pc].sum(axis=1)
        peak = chroma.max(axis=1, keepdims=True)
        chroma = np.divide(chroma, peak, out=np.zeros_like(chroma), where=peak > 0)
        return FeatureMatrix("chroma", chroma)
    if kind == "mfcc":
        mel = power @ mel_filterbank(audio.sample_rate).T
        coeffs = dct(np.log(mel + 1e-10), type=2, norm="ortho", axis=1)
        return FeatureMatrix("mfcc", coeffs[:, 1:N_MFCC + 1])
    raise EvalError(f"unknown feature kind {kind!r}")


def bin_edges(n: int, bins: int) -> np.ndarray:
    """``round(i * n / bins)`` (half up) for i = 0..bins, in exact integer arithmetic."""
    i = np.arange(bins + 1)
    return (2 * i * n + bins) // (2 * bins)


def resample_frames(f: FeatureMatrix, n_target: int = N_TARGET) -> FeatureMatrix:
    """Mean-aggregate frames into ``n_target`` contiguous bins.

    With fewer frames than bins each bin takes the frame under its centre.
    """
    if n_target < 2:
        raise EvalError("n_target must be >= 2")
    n = f.n_frames
    if n >= n_target:
        edges = bin_edges(n, n_target)
        sums = np.add.reduceat(f.frames, edges[:-1], axis=0)
        out = sums / np.diff(edges)[:, None]
    else:
        idx = np.minimum(((np.arange(n_target) + 0.5) * n / n_target).astype(int), n - 1)
        out = f.frames[idx]
    return FeatureMatrix(f.kind, out)


# --------------------------------------------------------------------------- #
# self-similarity and fusion

def pairwise_distances(x: np.ndarray) -> np.ndarray:
    # explicit differences: the Gram-matrix shortcut leaves ~1e-17 residue that
    # the tiny eps in the affinity denominator would magnify
    return squareform(pdist(np.asarray(x, dtype=float)))


def compute_ssm(f: FeatureMatrix, kappa: int = SSM_KAPPA) -> SSMatrix:
    """Adaptive Gaussian affinity ``exp(-d_ij^2 / (sigma_i sigma_j + eps))``.

    ``sigma_i`` is the mean distance from frame i to its ``kappa`` nearest
    other frames.
    """
    d = pairwise_distances(f.frames)
    n = d.shape[0]
    k = min(kappa, n - 1)
    others = np.sort(d + np.diag(np.full(n, np.inf)), axis=1)[:, :k]
    sigma = others.mean(axis=1)
    w = np.exp(-(d ** 2) / (np.outer(sigma, sigma) + SSM_EPS))
    w = 0.5 * (w + w.T)
    np.fill_diagonal(w, 1.0)
    return SSMatrix(w)


def full_transition(w: np.ndarray) -> np.ndarray:
    """Half the row mass on the diagonal, the other half spread over the row."""
    off = w.copy()
    np.fill_diagonal(off, 0.0)
    rows = off.sum(axis=1, keepdims=True)
    rows[rows == 0] = 1.0
    return 0.5 * np.eye(w.shape[0]) + 0.5 * off / rows


def knn_transition(w: np.ndarray, k: int) -> np.ndarray:
    """Row-normalised affinity restricted to each row's k largest entries (self included)."""
    n = w.shape[0]
    order = np.argsort(-w, axis=1, kind="stable")[:, :k]
    rows = np.arange(n)[:, None]
    s = np.zeros_like(w)
    s[rows, order] = w[rows, order]
    norm = s.sum(axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return s / norm


def fuse_ssms(ssms: Sequence, k: int = SNF_K, iterations: int = SNF_ITERATIONS) -> FusedSSM:
    """Similarity network fusion by cross diffusion over all views."""
    ws = [_values(m) for m in ssms]
    if len(ws) < 2:
        raise EvalError("fusion needs at least two views")
    n = ws[0].shape[0]
    if any(w.shape != (n, n) for w in ws):
        raise EvalError(f"size mismatch: {[w.shape for w in ws]}")
    if not 1 <= k < n:
        raise EvalError(f"k must satisfy 1 <= k < n, got k={k}, n={n}")
    ps = [full_transition(w) for w in ws]
    ss = [knn_transition(w, k) for w in ws]
    nv = len(ws)
    for _ in range(iterations):
        total = sum(ps)
        nxt = []
        for v in range(nv):
            others = (total - ps[v]) / (nv - 1)
            p = ss[v] @ others @ ss[v].T
            nxt.append(0.5 * (p + p.T))
        ps = nxt
    return FusedSSM(sum(ps) / nv, iterations)


def normalize_fused(m) -> np.ndarray:
    """Cosine-normalise a fused matrix: ``v_ij / sqrt(v_ii v_jj)``, clipped to [0, 1].

    Fused values scale like 1/n and a few tight clusters carry outsized
    mass, so a global max would squash everything else toward 0.
    """
    v = _values(m)
    d = np.sqrt(np.clip(np.diag(v), 0.0, None))
    denom = np.outer(d, d)
    out = np.divide(v, denom, out=np.zeros_like(v), where=denom > 0)
    out = np.clip(0.5 * (out + out.T), 0.0, 1.0)
    np.fill_diagonal(out, 1.0)
    return out


def downsample_ssm(m, grid: int = GRID) -> np.ndarray:
    v = _values(m)
    n = v.shape[0]
    if n < grid:
        raise EvalError(f"matrix of size {n} is smaller than the {grid} x {grid} grid")
    e = bin_edges(n, grid)
    out = np.empty((grid, grid))
    for i in range(grid):
        for j in range(grid):
            out[i, j] = v[e[i]:e[i + 1], e[j]:e[j + 1]].mean()
    return out


def structure_matrices(audio: AudioBuffer, n_target: int = N_TARGET, kinds=("chroma", "mfcc"),
                       k: int = SNF_K, iterations: int = SNF_ITERATIONS):
    """Fused, [0, 1]-scaled SSM of one track and its 5 x 5 downsampling."""
    ssms = [compute_ssm(resample_frames(extract_features(audio, kind), n_target)) for kind in kinds]
    fused = normalize_fused(fuse_ssms(ssms, k=k, iterations=iterations))
    return fused, downsample_ssm(fused)


# --------------------------------------------------------------------------- #
# corpus statistics

def corpus_stats(mats: Sequence) -> SSMStats:
    if len(mats) == 0:
        raise EvalError("corpus_stats needs at least one matrix")
    stack = np.stack([_values(m) for m in mats])
    return SSMStats(stack.mean(axis=0), stack.var(axis=0), len(mats))


def upper_triangle_vec(m) -> np.ndarray:
    """Strict upper triangle, row-major: (0,1), (0,2), ..., (3,4)."""
    v = _values(m)
    if v.shape != (GRID, GRID):
        raise EvalError(f"expected a {GRID} x {GRID} matrix, got {v.shape}")
    return v[np.triu_indices(GRID, k=1)]


def gaussian_summary(vectors: Sequence) -> GaussianSummary:
    x = np.asarray(vectors, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise EvalError("gaussian_summary needs at least two vectors")
    mu = x.mean(axis=0)
    c = x - mu
    cov = c.T @ c / (x.shape[0] - 1)
    return GaussianSummary(mu, 0.5 * (cov + cov.T))


def _check_cov(cov: np.ndarray, name: str) -> None:
    if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-9:
        raise EvalError(f"{name} covariance is not symmetric")
    lowest = np.linalg.eigvalsh(cov).min() if cov.size else 0.0
    if lowest < -PSD_TOL:
        raise EvalError(f"{name} covariance is not positive semidefinite (eigenvalue {lowest:.3g})")


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """Squared Frechet distance between two Gaussians.

    ``tr sqrt(A B)`` is computed as ``tr sqrt(sqrt(A) B sqrt(A))``, which
    stays symmetric and lets negative round-off eigenvalues be clamped.
    """
    mu_a, mu_b = np.atleast_1d(a.mu).astype(float), np.atleast_1d(b.mu).astype(float)
    ca, cb = np.atleast_2d(a.cov).astype(float), np.atleast_2d(b.cov).astype(float)
    if mu_a.shape != mu_b.shape or ca.shape != cb.shape or ca.shape != (mu_a.size, mu_a.size):
        raise EvalError(f"dimension mismatch: {mu_a.shape}/{ca.shape} vs {mu_b.shape}/{cb.shape}")
    _check_cov(ca, "first")
    _check_cov(cb, "second")
    ra = psd_sqrt(ca)
    inner = np.linalg.eigvalsh(0.5 * ((ra @ cb @ ra) + (ra @ cb @ ra).T))
    tr_sqrt = np.sqrt(np.clip(inner, 0.0, None)).sum()
    diff = mu_a - mu_b
    d = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * tr_sqrt)
    return max(d, 0.0)


# --------------------------------------------------------------------------- #
# export

def write_matrix_csv(m, path) -> None:
    v = np.atleast_2d(_values(m))
    with open(path, "w") as fh:
        for row in v:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_pgm(m, path) -> None:
    """8-bit binary PGM; 0 maps to black and the matrix maximum to white."""
    v = _values(m)
    peak = v.max()
    img = np.zeros_like(v) if peak <= 0 else np.clip(v / peak, 0.0, 1.0)
    pixels = np.round(img * 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
