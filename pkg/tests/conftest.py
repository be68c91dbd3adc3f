import json
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("ci")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def toy_model():
    from formagen.sampler import ToyBigramModel

    return ToyBigramModel()


class StubServer:
    """Tiny HTTP server whose responses are set per test; records request bodies."""

    def __init__(self):
        self.requests = []
        self.status = 200
        self.body = b""
        self.content_type = "application/octet-stream"
        self.delay_s = 0.0
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                stub.requests.append(json.loads(self.rfile.read(length) or b"null"))
                if stub.delay_s:
                    threading.Event().wait(stub.delay_s)
                body = stub.body(stub.requests[-1]) if callable(stub.body) else stub.body
                try:
                    self.send_response(stub.status)
                    self.send_header("Content-Type", stub.content_type)
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    server = StubServer()
    yield server
    server.close()


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record (and print) one PASS/FAIL line per acceptance criterion, then assert it."""

    def report(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
