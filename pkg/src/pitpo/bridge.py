"""NDJSON bridge to external program-proposal services (protocol "pitpo/1").

The search engine can delegate program generation to an out-of-process
adapter (an LLM wrapper, a remote sampler, a replay harness) over newline-
delimited JSON, either on a child process's stdio or a TCP socket. The
engine stays the owner of evaluation and reward shaping: only programs and
per-token advantages cross the boundary, never datasets or raw rewards.

Message types
  generate_request   engine -> adapter   asks for ``group_size`` programs
  generate_response  adapter -> engine   the sampled programs
  update             engine -> adapter   token-level advantages per group
  ack                adapter -> engine   update received
  error              either direction    carries ``message``

Every request carries a fresh ``request_id`` the reply must echo; replies
with foreign ids are skipped. Unknown fields are ignored everywhere. A
request left unanswered for ``timeout`` seconds raises BridgeTimeout, which
the search loop treats as "use the built-in policy for this iteration".
"""

from __future__ import annotations

import json
import logging
import queue
import re
import shlex
import socket
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass

import numpy as np

from . import PROTOCOL_VERSION
from .expr import ExprSyntaxError
from .policy import SampledProgram, program_from_text

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 120.0

_HOST_PORT_RE = re.compile(r"^(?P<host>[A-Za-z0-9_.\-]+):(?P<port>\d+)$")


class BridgeError(RuntimeError):
    pass


class BridgeTimeout(BridgeError):
    pass


def encode_message(msg: dict) -> str:
    return json.dumps(msg, separators=(",", ":"), sort_keys=True) + "\n"


def decode_line(line: str) -> dict | None:
    line = line.strip()
    if not line:
        return None
    try:
        msg = json.loads(line)
    except json.JSONDecodeError:
        log.warning("bridge: skipping malformed line %r", line[:80])
        return None
    if not isinstance(msg, dict):
        log.warning("bridge: skipping non-object message")
        return None
    return msg


def spec_kind(spec: str) -> str:
    """Classify a bridge endpoint spec: "tcp" for host:port, "cmd" otherwise."""
    return "tcp" if _HOST_PORT_RE.match(spec) else "cmd"


def open_transport(spec: str):
    if spec_kind(spec) == "tcp":
        m = _HOST_PORT_RE.match(spec)
        return TcpTransport(m.group("host"), int(m.group("port")))
    return SubprocessTransport(spec)


_EOF = object()


class _LineReader:
    """Background reader pushing decoded messages onto a queue.

    ``get`` returns a message dict, None on timeout, or the _EOF sentinel
    once the stream is exhausted.
    """

    def __init__(self, stream):
        self._queue: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._run, args=(stream,), daemon=True)
        self._thread.start()

    def _run(self, stream):
        try:
            for line in stream:
                msg = decode_line(line)
                if msg is not None:
                    self._queue.put(msg)
        except (OSError, ValueError):
            pass
        self._queue.put(_EOF)

    def get(self, timeout: float):
        try:
            return self._queue.get(timeout=max(timeout, 0.0))
        except queue.Empty:
            return None


class SubprocessTransport:
    """Adapter as a child process speaking NDJSON on stdin/stdout."""

    def __init__(self, command: str):
        self.command = command
        self.proc = subprocess.Popen(
            shlex.split(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._reader = _LineReader(self.proc.stdout)

    def send(self, msg: dict) -> None:
        try:
            self.proc.stdin.write(encode_message(msg))
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BridgeError(f"adapter process is gone: {exc}") from exc

    def recv(self, timeout: float):
        return self._reader.get(timeout)

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()


class TcpTransport:
    """Adapter behind a TCP endpoint speaking NDJSON."""

    def __init__(self, host: str, port: int, connect_timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=connect_timeout)
        self.sock.settimeout(None)
        self._reader = _LineReader(self.sock.makefile("r", encoding="utf-8"))

    def send(self, msg: dict) -> None:
        try:
            self.sock.sendall(encode_message(msg).encode("utf-8"))
        except OSError as exc:
            raise BridgeError(f"adapter connection lost: {exc}") from exc

    def recv(self, timeout: float):
        return self._reader.get(timeout)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class BridgeClient:
    """Request/update exchange with id correlation and timeouts."""

    def __init__(self, transport, timeout: float = DEFAULT_TIMEOUT):
        self.transport = transport
        self.timeout = timeout

    def _await(self, request_id: str, want_type: str, timeout: float) -> dict:
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BridgeTimeout(f"no {want_type} within {timeout:.0f}s")
            msg = self.transport.recv(remaining)
            if msg is None:
                continue  # timed out this slice; the deadline check decides
            if msg is _EOF:
                raise BridgeError("adapter closed the connection")
            if msg.get("request_id") != request_id:
                log.warning("bridge: skipping message with foreign request_id")
                continue
            kind = msg.get("type")
            if kind == "error":
                raise BridgeError(f"adapter error: {msg.get('message', '?')}")
            if kind != want_type:
                log.warning("bridge: expected %s, got %r; skipping", want_type, kind)
                continue
            proto = msg.get("protocol")
            if proto is not None and proto != PROTOCOL_VERSION:
                raise BridgeError(f"protocol mismatch: {proto!r}")
            return msg

    def request_programs(
        self,
        group_size: int,
        context: dict,
        constraints: dict,
        iteration: int | None = None,
        extra: dict | None = None,
    ) -> list[dict]:
        request_id = uuid.uuid4().hex
        msg = {
            "type": "generate_request",
            "protocol": PROTOCOL_VERSION,
            "request_id": request_id,
            "group_size": group_size,
            "context": context,
            "constraints": constraints,
        }
        if iteration is not None:
            msg["iteration"] = iteration
        if extra:
            msg.update(extra)
        self.transport.send(msg)
        reply = self._await(request_id, "generate_response", self.timeout)
        programs = reply.get("programs")
        if not isinstance(programs, list):
            raise BridgeError("generate_response carries no program list")
        return programs

    def send_update(self, groups: list[dict]) -> bool:
        """Ship token-level advantages; returns whether the adapter acked."""
        request_id = uuid.uuid4().hex
        msg = {
            "type": "update",
            "protocol": PROTOCOL_VERSION,
            "request_id": request_id,
            "groups": groups,
        }
        self.transport.send(msg)
        try:
            self._await(request_id, "ack", self.timeout)
            return True
        except BridgeTimeout:
            log.warning("bridge: update not acknowledged; continuing")
            return False

    def close(self) -> None:
        self.transport.close()


def validate_program_entry(
    entry, variables: tuple[str, ...] | None
) -> SampledProgram | None:
    """Turn one generate_response entry into a SampledProgram.

    Returns None when the entry is unusable (no text, or text outside the
    DSL); the caller keeps the group slot with an infinite-error candidate.
    Logprobs of the wrong shape are dropped, not fatal.
    """
    if not isinstance(entry, dict) or not isinstance(entry.get("text"), str):
        return None
    try:
        program = program_from_text(entry["text"], variables=variables)
    except (ExprSyntaxError, ValueError):
        return None
    logprobs = entry.get("logprobs")
    if isinstance(logprobs, list) and len(logprobs) == len(program.tokens):
        try:
            program.logprobs = np.asarray([float(v) for v in logprobs])
        except (TypeError, ValueError):
            log.warning("bridge: non-numeric logprobs dropped")
    elif logprobs is not None:
        log.warning("bridge: logprob length mismatch dropped")
    return program


# -- conformance --------------------------------------------------------------


@dataclass(frozen=True)
class ConformanceCheck:
    name: str
    passed: bool
    detail: str = ""


def run_conformance(
    client: BridgeClient, variables: tuple[str, ...] = ("x", "v")
) -> list[ConformanceCheck]:
    """Scripted protocol exchange; each check reports pass/fail."""
    from .policy import GrammarPolicy, export_automaton

    constraints = export_automaton(GrammarPolicy(variables))
    context = {
        "bucket": "-",
        "elites": [
            {"program": "c0*x", "reward": 1.0},
            {"program": "c0*sin(x) + c1", "reward": 0.5},
        ],
    }
    checks: list[ConformanceCheck] = []

    def record(name: str, passed: bool, detail: str = ""):
        checks.append(ConformanceCheck(name, passed, detail))
        return passed

    try:
        programs = client.request_programs(4, context, constraints, iteration=0)
        record("responds_with_correlated_id", True)
    except BridgeError as exc:
        record("responds_with_correlated_id", False, str(exc))
        return checks

    record(
        "honors_group_size",
        len(programs) == 4,
        f"asked 4, got {len(programs)}",
    )
    parsed = [validate_program_entry(p, variables) for p in programs]
    bad = sum(1 for p in parsed if p is None)
    record("programs_parse_in_dsl", bad == 0, f"{bad} unparseable")
    shape_ok = all(
        not isinstance(p, dict)
        or "tokens" not in p
        or (isinstance(p["tokens"], list) and q is not None and len(p["tokens"]) == len(q.tokens))
        for p, q in zip(programs, parsed)
    )
    record("token_streams_match_text", shape_ok)

    groups = [
        {
            "context": context,
            "programs": [p.get("text", "") for p in programs if isinstance(p, dict)],
            "advantages": [
                [0.0] * (len(q.tokens) if q is not None else 0) for q in parsed
            ],
        }
    ]
    record("acknowledges_update", client.send_update(groups))

    try:
        again = client.request_programs(
            2, context, constraints, extra={"x_conformance_probe": True}
        )
        record("ignores_unknown_fields", len(again) == 2)
    except BridgeError as exc:
        record("ignores_unknown_fields", False, str(exc))
    return checks
