"""Line-delimited JSON query service around a ``VictimOracle`` and its client.

Wire format, one UTF-8 JSON object per ``\\n``-terminated line:

    request   {"id":<int>,"inputs":[[...],...]}
    success   {"id":<int>,"labels":[[...],...],"remaining":<int>}
    error     {"id":<int|null>,"error":{"code":<string>,"remaining":<int?>}}

Hard-label oracles send class indices instead of vectors.  Floats are
written with Python's shortest round-trip repr, so values cross the wire
bit-exactly.  A request with an empty ``inputs`` list is free and reports
the remaining budget.
"""

from __future__ import annotations

import itertools
import json
import socket
import socketserver
import threading
import time

import numpy as np

from .errors import BudgetExhausted, ContractViolation, ProtocolError, StartupError, TransportError
from .victim import HARD, SOFT

MAX_BATCH = 256
MAX_LINE_BYTES = 1 << 22
BAD_REQUEST = "bad_request"
BUDGET_EXHAUSTED = "budget_exhausted"


def encode(obj) -> bytes:
    return (json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n").encode("utf-8")


def _reject_constant(name):
    raise ValueError(f"non-finite number {name}")


def decode(line: bytes):
    return json.loads(line.decode("utf-8"), parse_constant=_reject_constant)


def _error(req_id, code: str, remaining: int | None = None) -> dict:
    err = {"code": code}
    if remaining is not None:
        err["remaining"] = remaining
    return {"id": req_id, "error": err}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def handle_request(oracle, line: bytes) -> dict:
    """Turn one request line into a response object; never raises for client mistakes."""
    try:
        req = decode(line)
    except (ValueError, UnicodeDecodeError):
        return _error(None, BAD_REQUEST)
    if not isinstance(req, dict) or not _is_int(req.get("id")):
        return _error(req.get("id") if isinstance(req, dict) and _is_int(req.get("id")) else None,
                      BAD_REQUEST)
    req_id, inputs = req["id"], req.get("inputs")
    d = oracle.input_dim
    if (not isinstance(inputs, list) or len(inputs) > MAX_BATCH
            or not all(isinstance(row, list) and len(row) == d
                       and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in row)
                       for row in inputs)):
        return _error(req_id, BAD_REQUEST)
    x = np.array(inputs, dtype=np.float64).reshape(len(inputs), d)
    if not np.all(np.isfinite(x)):
        return _error(req_id, BAD_REQUEST)
    try:
        answers = oracle.query(x)
    except BudgetExhausted as exc:
        return _error(req_id, BUDGET_EXHAUSTED, exc.remaining)
    if oracle.label_mode == HARD:
        labels = [int(c) for c in np.argmax(answers, axis=1)]
    else:
        labels = answers.tolist()
    return {"id": req_id, "labels": labels, "remaining": oracle.remaining}


class _Handler(socketserver.StreamRequestHandler):
    def setup(self):
        super().setup()
        with self.server.conn_lock:
            self.server.connections.add(self.connection)

    def finish(self):
        with self.server.conn_lock:
            self.server.connections.discard(self.connection)
        super().finish()

    def handle(self):
        while True:
            line = self.rfile.readline(MAX_LINE_BYTES + 1)
            if not line:
                return
            if len(line) > MAX_LINE_BYTES and not line.endswith(b"\n"):
                self.wfile.write(encode(_error(None, BAD_REQUEST)))
                self.rfile.readline()  # discard the rest of the oversized line
                continue
            if not line.strip():
                continue
            self.wfile.write(encode(handle_request(self.server.oracle, line)))
            self.wfile.flush()


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = False
    block_on_close = True
    allow_reuse_address = True

    def __init__(self, address, handler, oracle):
        self.oracle = oracle
        self.connections: set[socket.socket] = set()
        self.conn_lock = threading.Lock()
        super().__init__(address, handler)

    def stop_reading(self) -> None:
        """Half-close every open connection: in-flight requests still get their answer."""
        with self.conn_lock:
            for conn in self.connections:
                try:
                    conn.shutdown(socket.SHUT_RD)
                except OSError:
                    pass


class ServerHandle:
    """A running service; stop it with ``close()`` or use it as a context manager."""

    def __init__(self, server: _Server, thread: threading.Thread):
        self._server = server
        self._thread = thread

    @property
    def oracle(self):
        return self._server.oracle

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._server.server_address[:2]
        return host, port

    def close(self) -> None:
        """Stop accepting, let in-flight batches finish, then drop every connection."""
        self._server.shutdown()
        self._server.stop_reading()
        self._server.server_close()
        self._thread.join()

    def wait(self) -> None:
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(oracle, address: tuple[str, int] = ("127.0.0.1", 0)) -> ServerHandle:
    """Start serving ``oracle`` on ``address`` in a background thread (port 0 picks a free port)."""
    try:
        server = _Server(address, _Handler, oracle)
    except OSError as exc:
        raise StartupError(f"cannot bind {address[0]}:{address[1]}: {exc}") from exc
    thread = threading.Thread(target=server.serve_forever, name="loralab-service", daemon=True)
    thread.start()
    return ServerHandle(server, thread)


class RemoteOracle:
    """Client with the same ``query``/``remaining`` contract as a local ``VictimOracle``.

    A failed exchange is retried on a fresh connection only when no byte of
    the response had arrived; anything later surfaces as ``TransportError``.
    Hard-label answers are expanded back to one-hot rows, which needs
    ``num_classes``.
    """

    def __init__(self, address: tuple[str, int], label_mode: str = SOFT, num_classes: int | None = None,
                 timeout: float = 30.0, retries: int = 2, backoff: float = 0.05):
        if label_mode not in (SOFT, HARD):
            raise ContractViolation(f"unknown label mode {label_mode!r}")
        self.address = (address[0], int(address[1]))
        self.label_mode = label_mode
        self.num_classes = num_classes
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._ids = itertools.count(1)
        self._sock: socket.socket | None = None
        self._reader = None
        self._lock = threading.Lock()

    def close(self) -> None:
        if self._reader is not None:
            self._reader.close()
        if self._sock is not None:
            self._sock.close()
        self._sock = self._reader = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _connect(self) -> None:
        if self._sock is None:
            self._sock = socket.create_connection(self.address, timeout=self.timeout)
            self._reader = self._sock.makefile("rb")

    def _exchange(self, payload: dict) -> dict:
        line = encode(payload)
        for attempt in range(self.retries + 1):
            got_bytes = False
            try:
                self._connect()
                self._sock.sendall(line)
                first = self._reader.read(1)
                if not first:
                    raise ConnectionError("connection closed before a response")
                got_bytes = True
                rest = self._reader.readline(MAX_LINE_BYTES)
                if not rest.endswith(b"\n"):
                    raise ConnectionError("connection closed mid-response")
                return decode(first + rest)
            except (OSError, ValueError) as exc:
                self.close()
                if isinstance(exc, ValueError) and got_bytes:
                    raise ProtocolError(f"unparseable response: {exc}") from exc
                if got_bytes or attempt == self.retries:
                    raise TransportError(f"remote oracle at {self.address[0]}:{self.address[1]}: {exc}") from exc
                time.sleep(self.backoff * (attempt + 1))
        raise AssertionError("unreachable")

    def _call(self, inputs: list) -> dict:
        with self._lock:
            req_id = next(self._ids)
            resp = self._exchange({"id": req_id, "inputs": inputs})
        if not isinstance(resp, dict) or resp.get("id") != req_id:
            raise ProtocolError(f"response id {resp.get('id') if isinstance(resp, dict) else None!r} "
                                f"does not echo request id {req_id}")
        if "error" in resp:
            err = resp["error"]
            if err.get("code") == BUDGET_EXHAUSTED:
                raise BudgetExhausted(err.get("remaining", 0), len(inputs))
            raise ProtocolError(f"server rejected the request: {err.get('code')}")
        if not isinstance(resp.get("labels"), list) or len(resp["labels"]) != len(inputs):
            raise ProtocolError("response label count does not match the request")
        return resp

    @property
    def remaining(self) -> int:
        return int(self._call([])["remaining"])

    def query(self, x) -> np.ndarray:
        X = np.asarray(x, dtype=np.float64)
        if X.ndim != 2:
            raise ContractViolation("queries must be a 2-D batch")
        if len(X) > MAX_BATCH:
            raise ContractViolation(f"remote batches are capped at {MAX_BATCH} rows")
        if not np.all(np.isfinite(X)):
            raise ContractViolation("queries must be finite")
        labels = self._call(X.tolist())["labels"]
        if self.label_mode == HARD:
            if self.num_classes is None:
                raise ContractViolation("hard-label remote oracle needs num_classes")
            if not all(_is_int(c) and 0 <= c < self.num_classes for c in labels):
                raise ProtocolError("hard-label response must carry class indices")
            out = np.zeros((len(labels), self.num_classes))
            out[np.arange(len(labels)), labels] = 1.0
            return out
        if len(labels) == 0:
            return np.empty((0, self.num_classes or 0))
        if not all(isinstance(row, list) for row in labels):
            raise ProtocolError("soft-label response must carry probability vectors")
        out = np.array(labels, dtype=np.float64)
        if out.ndim != 2 or (self.num_classes is not None and out.shape[1] != self.num_classes):
            raise ProtocolError("malformed probability vectors")
        self.num_classes = out.shape[1]
        return out


def remote_oracle(address: tuple[str, int], label_mode: str = SOFT, num_classes: int | None = None,
                  **kwargs) -> RemoteOracle:
    return RemoteOracle(address, label_mode, num_classes, **kwargs)


def parse_address(text: str) -> tuple[str, int]:
    """``host:port`` to a tuple; a bare port binds localhost."""
    host, _, port = text.rpartition(":")
    try:
        return (host or "127.0.0.1", int(port))
    except ValueError:
        raise ContractViolation(f"address must look like host:port, got {text!r}") from None
