"""Wire protocol shared by the remote client and reference server.

Transport is newline-delimited JSON over a byte stream: one request line
produces exactly one reply line.  Request types: ``hello``, ``encode``,
``init_latents``, ``evaluate``, ``decode``, ``close``.  Replies carry
``"ok": true`` plus payload fields named exactly like the corresponding
output types, or ``"ok": false`` with an ``error`` string.  Float arrays
travel as JSON number arrays; the precision loss at this boundary is
accepted.
"""

from __future__ import annotations

import importlib.resources
import json
from typing import Any, BinaryIO

__all__ = [
    "PROTOCOL_VERSION",
    "REQUEST_TYPES",
    "dump_line",
    "read_message",
    "write_message",
    "load_wire_schema",
    "WireError",
]

PROTOCOL_VERSION = 1

REQUEST_TYPES = ("hello", "encode", "init_latents", "evaluate", "decode", "close")

HELLO_REPLY_FIELDS = ("latent_dim", "vocab_size", "latent_end_id", "max_contexts")
ENCODE_REPLY_FIELDS = ("n_visual", "visual_index_set", "query_index_set", "seq_len", "latent_dim")
EVALUATE_REPLY_FIELDS = (
    "latent_logits",
    "qv_attention",
    "visual_embeddings",
    "latent_end_logit_per_position",
)
DECODE_REPLY_FIELDS = ("token_ids", "attention_share_latent", "attention_share_visual")


class WireError(RuntimeError):
    """Malformed message or error reply on the wire."""


def dump_line(message: dict[str, Any]) -> bytes:
    return json.dumps(message, separators=(",", ":")).encode("utf-8") + b"\n"


def write_message(stream: BinaryIO, message: dict[str, Any]) -> None:
    stream.write(dump_line(message))
    stream.flush()


def read_message(stream: BinaryIO) -> dict[str, Any] | None:
    """Read one message; None signals a closed peer."""
    line = stream.readline()
    if not line:
        return None
    try:
        message = json.loads(line)
    except json.JSONDecodeError as exc:
        raise WireError(f"malformed JSON on the wire: {exc}") from exc
    if not isinstance(message, dict):
        raise WireError("wire messages must be JSON objects")
    return message


def load_wire_schema() -> dict[str, Any]:
    """JSON schema describing every request and reply shape."""
    path = importlib.resources.files(__package__).joinpath("wire_schema.json")
    return json.loads(path.read_text(encoding="utf-8"))
