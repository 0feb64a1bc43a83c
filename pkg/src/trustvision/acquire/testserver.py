"""Local HTTP file server with injected faults, for exercising the downloader.

Each request for a known path fails with 503 at ``fault_rate``, but never
more than ``max_consecutive_faults`` times in a row for the same path.
Paths listed in ``corrupt`` always serve altered bytes.  The server keeps
per-Host concurrency and a log of bytes sent.
"""

from __future__ import annotations

import random
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "_Server"

    def log_message(self, *args):  # keep test output quiet
        pass

    def do_GET(self):
        fs: FaultServer = self.server.owner
        host = self.headers.get("Host", "")
        path = self.path.split("?", 1)[0]
        fs._enter(host)
        try:
            if fs.latency:
                time.sleep(fs.latency)
            body = fs.files.get(path)
            if body is None:
                self._reply(404, b"not found")
                return
            if fs._should_fail(path):
                self._reply(503, b"try again")
                return
            if path in fs.corrupt:
                body = bytes(b ^ 0xFF for b in body[:16]) + body[16:]
            self.send_response(200)
            self.send_header("Content-Type", "application/octet-stream")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            for start in range(0, len(body), fs.chunk):
                piece = body[start:start + fs.chunk]
                self.wfile.write(piece)
                fs._sent(len(piece))
        finally:
            fs._leave(host)

    def _reply(self, code: int, body: bytes):
        self.send_response(code)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    owner: "FaultServer"


class FaultServer:
    def __init__(self, files: dict[str, bytes], *, fault_rate: float = 0.25, max_consecutive_faults: int = 3,
                 corrupt=(), latency: float = 0.0, seed: int = 0, chunk: int = 16384):
        self.files = dict(files)
        self.fault_rate, self.max_consecutive = fault_rate, max_consecutive_faults
        self.corrupt, self.latency, self.chunk = set(corrupt), latency, chunk
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._streak: dict[str, int] = {}
        self.requests: dict[str, int] = {}
        self.faults = 0
        self.active: dict[str, int] = {}
        self.max_active: dict[str, int] = {}
        self.sent_log: list[tuple[float, int]] = []
        self._httpd: _Server | None = None
        self._thread: threading.Thread | None = None

    # accounting ----------------------------------------------------------

    def _enter(self, host):
        with self._lock:
            self.active[host] = self.active.get(host, 0) + 1
            self.max_active[host] = max(self.max_active.get(host, 0), self.active[host])

    def _leave(self, host):
        with self._lock:
            self.active[host] -= 1

    def _should_fail(self, path) -> bool:
        with self._lock:
            self.requests[path] = self.requests.get(path, 0) + 1
            streak = self._streak.get(path, 0)
            if streak < self.max_consecutive and self._rng.random() < self.fault_rate:
                self._streak[path] = streak + 1
                self.faults += 1
                return True
            self._streak[path] = 0
            return False

    def _sent(self, n):
        with self._lock:
            self.sent_log.append((time.monotonic(), n))

    # lifecycle -----------------------------------------------------------

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    def url(self, path: str, host: str = "127.0.0.1") -> str:
        return f"http://{host}:{self.port}{path}"

    def start(self) -> "FaultServer":
        self._httpd = _Server(("127.0.0.1", 0), _Handler)
        self._httpd.owner = self
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
