"""Reference bridge adapter: deterministically echoes context elites.

Run as ``python3 -m pitpo.echo_adapter``. It speaks protocol "pitpo/1" on
stdin/stdout: a generate_request is answered by cycling the elite programs
found in the request's context (falling back to the constant program "c0"
when the context is cold), an update is acknowledged, anything else gets an
error reply. There is no randomness and no clock, so replaying the same
request bytes produces the same response bytes; that makes this adapter the
fixture for transport and replay tests, and a template for real adapters.
"""

from __future__ import annotations

import json
import sys

PROTOCOL = "pitpo/1"


def handle_message(msg: dict) -> dict:
    """Pure request -> response mapping shared by the stdio and test servers."""
    request_id = msg.get("request_id")
    kind = msg.get("type")
    if kind == "generate_request":
        elites = msg.get("context", {}).get("elites", [])
        texts = [
            e.get("program")
            for e in elites
            if isinstance(e, dict) and isinstance(e.get("program"), str)
        ]
        group = msg.get("group_size", 1)
        if not isinstance(group, int) or group < 1:
            return {
                "type": "error",
                "protocol": PROTOCOL,
                "request_id": request_id,
                "message": "group_size must be a positive integer",
            }
        if texts:
            programs = [{"text": texts[i % len(texts)]} for i in range(group)]
        else:
            programs = [{"text": "c0"} for _ in range(group)]
        return {
            "type": "generate_response",
            "protocol": PROTOCOL,
            "request_id": request_id,
            "programs": programs,
        }
    if kind == "update":
        return {"type": "ack", "protocol": PROTOCOL, "request_id": request_id}
    return {
        "type": "error",
        "protocol": PROTOCOL,
        "request_id": request_id,
        "message": f"unsupported message type {kind!r}",
    }


def main(stdin=None, stdout=None) -> int:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            reply = {
                "type": "error",
                "protocol": PROTOCOL,
                "request_id": None,
                "message": "malformed JSON line",
            }
        else:
            if isinstance(msg, dict):
                reply = handle_message(msg)
            else:
                reply = {
                    "type": "error",
                    "protocol": PROTOCOL,
                    "request_id": None,
                    "message": "message must be a JSON object",
                }
        stdout.write(json.dumps(reply, separators=(",", ":"), sort_keys=True) + "\n")
        stdout.flush()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
