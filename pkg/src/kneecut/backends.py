"""Pluggable sources of per-step logits.

All backends expose ``query(request, observation) -> PolicyResponse``. The
observation is only consulted by the scripted oracle; real policies see the
serialized prefix in the request.

Wire protocol (``tcp://host:port``): each message is a 4-byte big-endian
length followed by UTF-8 JSON. The same JSON bodies travel over
``http://host:port/path`` as a POST. Request::

    {"schema_version": 1, "episode_id": 3, "step": 17, "vocab_size": 3987,
     "prefix": [...], "generated": [...]}

Response (logits preferred; ``token`` skips harness masking)::

    {"schema_version": 1, "step": 17, "vocab_size": 3987, "logits": [...]}
    {"schema_version": 1, "step": 17, "vocab_size": 3987, "token": 42}
"""

from __future__ import annotations

import http.client
import json
import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Mapping, Protocol
from urllib.parse import urlparse

import numpy as np

from .decoding import PlaneStatus
from .grammar import (
    PRIMITIVE_SLOTS, ActionCommand, GrammarConfig, Primitive, encode_command, make_align, make_cut,
    make_move,
)

log = logging.getLogger(__name__)

WIRE_VERSION = 1


class BackendError(RuntimeError):
    """The backend could not produce a usable response; the episode aborts."""

    retries = 0


class MalformedResponse(BackendError):
    pass


class BackendUnavailable(BackendError):
    def __init__(self, message: str, retries: int):
        super().__init__(message)
        self.retries = retries


@dataclass(frozen=True)
class PolicyRequest:
    prefix: tuple[int, ...]  # serialized Z_t
    generated: tuple[int, ...]  # tokens of the command being emitted
    vocab_size: int
    episode_id: int
    step: int

    def to_wire(self) -> dict[str, Any]:
        return {"schema_version": WIRE_VERSION, "episode_id": self.episode_id, "step": self.step,
                "vocab_size": self.vocab_size, "prefix": list(self.prefix), "generated": list(self.generated)}


@dataclass(frozen=True, eq=False)
class PolicyResponse:
    logits: np.ndarray | None = None
    token: int | None = None
    retries: int = 0

    @classmethod
    def from_wire(cls, body: Mapping[str, Any], request: PolicyRequest, retries: int = 0) -> "PolicyResponse":
        if not isinstance(body, Mapping):
            raise MalformedResponse("response is not a JSON object")
        if body.get("vocab_size") != request.vocab_size:
            raise MalformedResponse(
                f"vocab size mismatch: expected {request.vocab_size}, server says {body.get('vocab_size')}")
        if "step" in body and body["step"] != request.step:
            raise MalformedResponse(f"step mismatch: expected {request.step}, got {body['step']}")
        if body.get("token") is not None:
            tok = body["token"]
            if not isinstance(tok, int) or not 0 <= tok < request.vocab_size:
                raise MalformedResponse(f"token {tok!r} outside vocabulary of {request.vocab_size}")
            return cls(token=tok, retries=retries)
        resp = cls(logits=body.get("logits"), retries=retries)
        resp.check(request.vocab_size)
        return resp

    def check(self, vocab_size: int) -> None:
        if self.token is not None:
            return
        try:
            logits = np.asarray(self.logits, dtype=float)
        except (TypeError, ValueError) as exc:
            raise MalformedResponse(f"logits are not numeric: {exc}") from exc
        if logits.shape != (vocab_size,):
            got = logits.shape[0] if logits.ndim == 1 else logits.shape
            raise MalformedResponse(f"expected {vocab_size} logits, got {got}")
        if not np.all(np.isfinite(logits)):
            raise MalformedResponse("logits contain non-finite values")
        object.__setattr__(self, "logits", logits)


class PolicyBackend(Protocol):
    name: str

    def query(self, request: PolicyRequest, observation: Any) -> PolicyResponse: ...


# ---------------------------------------------------------------------------
# oracle

@dataclass
class OraclePlan:
    """Scripted reference sequence, one (MOVE, ALIGN, CUT) triple per plane in plan order."""

    commands: list[ActionCommand]
    beta: float = 20.0

    @classmethod
    def from_model(cls, model, grammar: GrammarConfig, beta: float = 20.0) -> "OraclePlan":
        from .sim import oracle_commands
        return cls(oracle_commands(model, grammar), beta)

    def tokens(self, grammar: GrammarConfig) -> list[int]:
        out = []
        for c in self.commands:
            out += encode_command(c, grammar.vocab)
        return out + [grammar.vocab.control("EOS")]


class OracleBackend:
    """Closed-loop scripted expert.

    Picks the first uncut plane in plan order and emits MOVE to its entry
    bin, then ALIGN, then CUT. A failed ALIGN (noise pushed the pose out of
    tolerance) or lost tracking leads to another ALIGN. Once a command is
    chosen, its parameter tokens are emitted slot by slot. Logits are
    ``beta`` on the chosen token and 0 elsewhere.
    """

    name = "oracle"

    def __init__(self, grammar: GrammarConfig, beta: float = 20.0):
        self.grammar = grammar
        self.beta = beta
        self._intent: dict[int, ActionCommand] = {}

    def reset(self, episode_id: int) -> None:
        self._intent.pop(episode_id, None)

    def next_command(self, observation) -> ActionCommand | None:
        state, model = observation.state, observation.model
        plan = model.plan
        pending = [m for m in plan.order if state.statuses[m] != PlaneStatus.CUT]
        if not pending:
            return None
        m = pending[0]
        move = make_move(self.grammar, plan.planes[m].entry_point)
        if state.statuses[m] == PlaneStatus.ALIGNED and observation.tracking_ok:
            return make_cut(self.grammar, model.cut_speed)
        last = state.last_command
        if last is not None and (last == move or (last.primitive == Primitive.ALIGN and last.bins[0] == m)):
            return make_align(self.grammar, m)
        return move

    def next_token(self, request: PolicyRequest, observation) -> int:
        vocab = self.grammar.vocab
        g = observation.grammar_state
        if g.phase == "terminal":
            return vocab.control("EOS")
        if g.phase == "primitive":
            cmd = self.next_command(observation)
            if cmd is None:
                self._intent.pop(request.episode_id, None)
                return vocab.control("EOS")
            self._intent[request.episode_id] = cmd
            return vocab.primitive_token(cmd.primitive)
        cmd = self._intent.get(request.episode_id)
        slot = PRIMITIVE_SLOTS[g.primitive][g.slot]
        if cmd is None or cmd.primitive != g.primitive:
            # decoder overrode the intended primitive; fall back to mid-range bins
            start, stop = vocab.range(slot)
            return (start + stop) // 2
        return vocab.bin_token(slot, cmd.bins[g.slot])

    def query(self, request: PolicyRequest, observation) -> PolicyResponse:
        logits = np.zeros(request.vocab_size)
        logits[self.next_token(request, observation)] = self.beta
        return PolicyResponse(logits=logits)


class RandomBackend:
    """I.i.d. standard-normal logits, reproducible per (seed, episode)."""

    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rngs: dict[int, np.random.Generator] = {}

    def reset(self, episode_id: int) -> None:
        self._rngs[episode_id] = np.random.default_rng(np.random.SeedSequence([self.seed, episode_id, 7]))

    def query(self, request: PolicyRequest, observation=None) -> PolicyResponse:
        rng = self._rngs.get(request.episode_id)
        if rng is None:
            self.reset(request.episode_id)
            rng = self._rngs[request.episode_id]
        return PolicyResponse(logits=rng.standard_normal(request.vocab_size))


# ---------------------------------------------------------------------------
# remote

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-message")
        buf += chunk
    return bytes(buf)


def send_message(sock: socket.socket, body: Any) -> None:
    data = json.dumps(body, separators=(",", ":")).encode()
    sock.sendall(struct.pack(">I", len(data)) + data)


def recv_message(sock: socket.socket) -> Any:
    (n,) = struct.unpack(">I", _recv_exact(sock, 4))
    return json.loads(_recv_exact(sock, n).decode())


class RemoteBackend:
    """Client for an external inference server.

    One request per call (so at most one in flight per episode); at most
    ``max_in_flight`` concurrent requests across episodes. Timeouts and
    connection errors are retried with exponential backoff; malformed
    responses are not.
    """

    name = "remote"

    def __init__(self, endpoint: str, timeout_s: float = 5.0, retries: int = 3,
                 backoff_s: float = 0.05, max_in_flight: int = 4):
        url = urlparse(endpoint)
        if url.scheme not in ("tcp", "http"):
            raise ValueError(f"endpoint must be tcp://host:port or http://host:port/path, got {endpoint!r}")
        if not url.hostname or not url.port:
            raise ValueError(f"endpoint needs host and port: {endpoint!r}")
        self.endpoint = endpoint
        self._url = url
        self.timeout_s = timeout_s
        self.retries = retries
        self.backoff_s = backoff_s
        self.max_in_flight = max_in_flight
        self._sem: threading.BoundedSemaphore | None = None

    def __getstate__(self):
        d = self.__dict__.copy()
        d["_sem"] = None
        return d

    def _roundtrip(self, body: dict) -> Any:
        host, port = self._url.hostname, self._url.port
        if self._url.scheme == "tcp":
            with socket.create_connection((host, port), timeout=self.timeout_s) as sock:
                sock.settimeout(self.timeout_s)
                send_message(sock, body)
                return recv_message(sock)
        conn = http.client.HTTPConnection(host, port, timeout=self.timeout_s)
        try:
            conn.request("POST", self._url.path or "/", json.dumps(body),
                         {"Content-Type": "application/json"})
            resp = conn.getresponse()
            data = resp.read()
            if resp.status != 200:
                raise ConnectionError(f"HTTP {resp.status}")
            return json.loads(data)
        finally:
            conn.close()

    def query(self, request: PolicyRequest, observation=None) -> PolicyResponse:
        if self._sem is None:
            self._sem = threading.BoundedSemaphore(self.max_in_flight)
        body = request.to_wire()
        attempt = 0
        with self._sem:
            while True:
                try:
                    raw = self._roundtrip(body)
                    break
                except (OSError, ConnectionError, socket.timeout, json.JSONDecodeError) as exc:
                    if attempt >= self.retries:
                        raise BackendUnavailable(
                            f"{self.endpoint}: {type(exc).__name__}: {exc} after {attempt} retries", attempt
                        ) from exc
                    delay = self.backoff_s * (2 ** attempt)
                    log.warning("episode %d step %d: %s (%s); retry %d in %.3fs", request.episode_id,
                                request.step, self.endpoint, exc, attempt + 1, delay)
                    attempt += 1
                    time.sleep(delay)
        return PolicyResponse.from_wire(raw, request, attempt)


class PolicyServer:
    """Minimal threaded server speaking the wire protocol, for tests and demos.

    ``handler`` maps a request dict to a response dict. Use as a context
    manager; ``endpoint`` is filled once the socket is bound.
    """

    def __init__(self, handler: Callable[[dict], dict], protocol: str = "tcp",
                 host: str = "127.0.0.1", port: int = 0):
        self.handler = handler
        self.protocol = protocol
        outer = self
        if protocol == "tcp":
            class _Handler(socketserver.BaseRequestHandler):
                def handle(self):
                    try:
                        req = recv_message(self.request)
                    except (ConnectionError, ValueError):
                        return
                    reply = outer.handler(req)
                    if reply is not None:
                        send_message(self.request, reply)

            self._server = socketserver.ThreadingTCPServer((host, port), _Handler)
        elif protocol == "http":
            class _HTTPHandler(BaseHTTPRequestHandler):
                def do_POST(self):
                    n = int(self.headers.get("Content-Length", 0))
                    reply = outer.handler(json.loads(self.rfile.read(n)))
                    data = json.dumps(reply).encode()
                    self.send_response(200)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)

                def log_message(self, *args):
                    pass

            self._server = ThreadingHTTPServer((host, port), _HTTPHandler)
        else:
            raise ValueError(f"unknown protocol {protocol!r}")
        self._server.daemon_threads = True
        h, p = self._server.server_address[:2]
        self.endpoint = f"{protocol}://{h}:{p}/" if protocol == "http" else f"tcp://{h}:{p}"
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def __enter__(self) -> "PolicyServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()


def uniform_handler(request: dict) -> dict:
    """Echo-style handler returning all-zero logits."""
    return {"schema_version": WIRE_VERSION, "step": request["step"], "vocab_size": request["vocab_size"],
            "logits": [0.0] * request["vocab_size"]}


def make_backend(kind: str, grammar: GrammarConfig, seed: int = 0, endpoint: str | None = None,
                 timeout_s: float = 5.0, retries: int = 3) -> PolicyBackend:
    if kind == "oracle":
        return OracleBackend(grammar)
    if kind == "random":
        return RandomBackend(seed)
    if kind == "remote":
        if not endpoint:
            raise ValueError("remote backend needs an endpoint")
        return RemoteBackend(endpoint, timeout_s, retries)
    raise ValueError(f"unknown backend {kind!r}")
