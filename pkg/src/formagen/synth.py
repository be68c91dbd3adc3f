"""Audio side: toy additive renderer, 16-bit WAV I/O, remote generation client."""

from __future__ import annotations

import base64
import io
import json
import socket
import threading
import urllib.error
import urllib.request
import wave
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sampler import TokenSequence

DEFAULT_SAMPLE_RATE = 22050
BASE_FREQ_HZ = 220.0
FUNDAMENTAL_GAIN = 0.6
OCTAVE_GAIN_DB = -12.0
CROSSFADE_S = 0.005
PCM_SCALE = 32767.0


class AudioFormatError(ValueError):
    pass


class BackendError(RuntimeError):
    pass


class BackendTimeout(BackendError):
    pass


class BackendHTTPError(BackendError):
    def __init__(self, status: int, detail: str = ""):
        self.status = status
        super().__init__(f"backend returned HTTP {status}" + (f": {detail}" if detail else ""))


class BackendResponseError(BackendError):
    """The backend answered 2xx but the body is not a WAV file."""


@dataclass
class AudioBuffer:
    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).reshape(-1)
        if self.sample_rate <= 0:
            raise AudioFormatError("sample_rate must be positive")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self):
        return int(self.samples.size)


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str = "toy"
    endpoint: Optional[str] = None
    timeout_s: float = 120.0
    max_connections: int = 4

    def __post_init__(self):
        if self.kind not in ("toy", "remote"):
            raise ValueError(f"backend kind must be 'toy' or 'remote', got {self.kind!r}")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote backend requires an endpoint")


# --------------------------------------------------------------------------- #
# rendering

def token_frequency(token: int) -> float:
    return BASE_FREQ_HZ * 2.0 ** (token / 12.0)


def frame_boundaries(n_frames: int, sample_rate: int, frame_rate: float) -> np.ndarray:
    """Cumulative-exact sample offsets of each frame start (plus the end)."""
    k = np.arange(n_frames + 1)
    return np.floor(k * sample_rate / frame_rate + 0.5).astype(np.int64)


def render_tokens(seq: TokenSequence, sample_rate: int = DEFAULT_SAMPLE_RATE) -> AudioBuffer:
    """One sine frame per token, octave partial at -12 dB, 5 ms linear crossfades.

    Phase is taken from absolute time, so a held token renders as one
    continuous tone. Partials at or above Nyquist are dropped.
    """
    if len(seq) == 0:
        raise AudioFormatError("cannot render an empty token sequence")
    bounds = frame_boundaries(len(seq), sample_rate, seq.frame_rate)
    total = int(bounds[-1])
    out = np.zeros(total)
    min_frame = int(np.diff(bounds).min())
    xf = max(0, min(int(round(CROSSFADE_S * sample_rate)), min_frame))
    octave_gain = FUNDAMENTAL_GAIN * 10.0 ** (OCTAVE_GAIN_DB / 20.0)
    nyquist = sample_rate / 2.0
    fade_in = (np.arange(xf) + 0.5) / xf if xf else np.zeros(0)
    fade_out = 1.0 - fade_in

    for k, tok in enumerate(seq.tokens):
        start = int(bounds[k])
        stop = int(bounds[k + 1])
        last = k == len(seq) - 1
        end = stop if last else min(stop + xf, total)
        t = np.arange(start, end) / sample_rate
        f = token_frequency(int(tok))
        x = FUNDAMENTAL_GAIN * np.sin(2 * np.pi * f * t)
        if 2 * f < nyquist:
            x += octave_gain * np.sin(2 * np.pi * 2 * f * t)
        if k > 0 and xf:
            x[:xf] *= fade_in
        if not last and xf:
            x[stop - start:] *= fade_out[: end - stop]
        out[start:end] += x

    peak = np.abs(out).max()
    if peak > 1.0:
        raise AssertionError(f"renderer exceeded full scale ({peak:.4f})")
    return AudioBuffer(sample_rate, out)


# --------------------------------------------------------------------------- #
# WAV

def wav_bytes(buf: AudioBuffer) -> bytes:
    pcm = np.clip(np.round(np.clip(buf.samples, -1.0, 1.0) * PCM_SCALE), -32768, 32767).astype("<i2")
    bio = io.BytesIO()
    with wave.open(bio, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(buf.sample_rate))
        w.writeframes(pcm.tobytes())
    return bio.getvalue()


def buffer_from_wav_bytes(data: bytes) -> AudioBuffer:
    try:
        with wave.open(io.BytesIO(data), "rb") as w:
            channels, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            if channels != 1:
                raise AudioFormatError(f"mono required; file has {channels} channels")
            if width != 2:
                raise AudioFormatError(f"16-bit PCM required; file has {8 * width}-bit samples")
            raw = w.readframes(n)
    except wave.Error as exc:
        raise AudioFormatError(f"unsupported WAV ({exc}); 16-bit PCM mono required") from exc
    except EOFError as exc:
        raise AudioFormatError("truncated WAV file") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(float) / PCM_SCALE
    return AudioBuffer(rate, np.clip(samples, -1.0, 1.0))


def write_wav(buf: AudioBuffer, path) -> None:
    with open(path, "wb") as fh:
        fh.write(wav_bytes(buf))


def read_wav(path) -> AudioBuffer:
    with open(path, "rb") as fh:
        return buffer_from_wav_bytes(fh.read())


# --------------------------------------------------------------------------- #
# remote backend

_limiters: dict[tuple[str, int], threading.BoundedSemaphore] = {}
_limiters_lock = threading.Lock()


def _limiter(backend: BackendDescriptor) -> threading.BoundedSemaphore:
    key = (backend.endpoint, backend.max_connections)
    with _limiters_lock:
        if key not in _limiters:
            _limiters[key] = threading.BoundedSemaphore(backend.max_connections)
        return _limiters[key]


def remote_request_body(prompt: str, duration_s: float, continuation: Optional[AudioBuffer] = None) -> dict:
    body = {"prompt": prompt, "duration_s": float(duration_s)}
    if continuation is not None:
        body["continuation_wav_b64"] = base64.b64encode(wav_bytes(continuation)).decode("ascii")
    return body


def remote_generate(
    backend: BackendDescriptor,
    prompt: str,
    duration_s: float,
    continuation: Optional[AudioBuffer] = None,
) -> AudioBuffer:
    """POST a generation request; the response body must be a WAV file."""
    if backend.kind != "remote":
        raise BackendError(f"remote_generate needs a remote backend, got {backend.kind!r}")
    payload = json.dumps(remote_request_body(prompt, duration_s, continuation)).encode("utf-8")
    req = urllib.request.Request(
        backend.endpoint,
        data=payload,
        method="POST",
        headers={"Content-Type": "application/json", "Accept": "audio/wav"},
    )
    with _limiter(backend):
        try:
            with urllib.request.urlopen(req, timeout=backend.timeout_s) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            detail = exc.read()[:200].decode("utf-8", "replace")
            raise BackendHTTPError(exc.code, detail) from exc
        except (socket.timeout, TimeoutError) as exc:
            raise BackendTimeout(f"no response from {backend.endpoint} within {backend.timeout_s:g} s") from exc
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                raise BackendTimeout(
                    f"no response from {backend.endpoint} within {backend.timeout_s:g} s"
                ) from exc
            raise BackendError(f"cannot reach {backend.endpoint}: {exc.reason}") from exc
    if body[:4] != b"RIFF" or body[8:12] != b"WAVE":
        raise BackendResponseError(f"expected a WAV body, got {body[:16]!r}")
    try:
        return buffer_from_wav_bytes(body)
    except AudioFormatError as exc:
        raise BackendResponseError(str(exc)) from exc
