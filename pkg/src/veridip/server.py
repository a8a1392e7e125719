"""Minimal JSON-over-HTTP prediction endpoint for a single immutable model."""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import nn
from .errors import VeridipError

log = logging.getLogger(__name__)

MAX_BODY = 64 * 1024 * 1024


class StartupError(VeridipError, OSError):
    pass


def _handler_for(model: nn.MlpModel):
    width = model.input_dim

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, code: int, payload, content_type="application/json"):
            body = payload.encode() if isinstance(payload, str) else payload
            self.send_response(code)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _error(self, code: int, msg: str):
            self._send(code, json.dumps({"error": msg}))

        def do_GET(self):
            if self.path == "/health":
                self._send(200, "ok", "text/plain; charset=utf-8")
            else:
                self._error(404, f"no such endpoint: {self.path}")

        def do_POST(self):
            if self.path != "/predict":
                self._error(404, f"no such endpoint: {self.path}")
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
            except ValueError:
                self._error(400, "bad Content-Length")
                return
            if length > MAX_BODY:
                self._error(413, f"request body over {MAX_BODY} bytes")
                return
            try:
                req = json.loads(self.rfile.read(length).decode("utf-8"))
                x = np.asarray(req["features"], dtype=np.float64)
            except (ValueError, KeyError, TypeError, UnicodeDecodeError):
                self._error(400, 'body must be JSON {"features": [[...], ...]} with numeric rows')
                return
            if x.ndim != 2 or x.shape[1] != width:
                self._error(400, f"features must have shape (n, {width}); got {list(x.shape)}")
                return
            if not np.all(np.isfinite(x)):
                self._error(400, "features must be finite")
                return
            probs = nn.forward_proba(model, x)
            self._send(200, json.dumps({"probs": probs.tolist()}))

    return Handler


class ModelServer:
    """Threaded server; ``port=0`` picks a free port. Usable as a context manager."""

    def __init__(self, model: nn.MlpModel, port: int = 8000, host: str = "127.0.0.1"):
        try:
            self.httpd = ThreadingHTTPServer((host, port), _handler_for(model))
        except OSError as exc:
            raise StartupError(f"cannot bind {host}:{port}: {exc.strerror or exc}") from None
        self.httpd.daemon_threads = True
        self._thread = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ModelServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def shutdown(self) -> None:
        if self._thread is not None:
            self.httpd.shutdown()
            self._thread.join()
            self._thread = None
        self.httpd.server_close()

    def __enter__(self):
        return self.start() if self._thread is None else self

    def __exit__(self, *exc):
        self.shutdown()


def serve_model(model, port: int = 8000, host: str = "127.0.0.1") -> ModelServer:
    """Start serving ``model`` (an MlpModel or a model file path) in a background thread."""
    if not isinstance(model, nn.MlpModel):
        model = nn.load_model(model)
    return ModelServer(model, port, host).start()
