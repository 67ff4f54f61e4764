"""Client-side backend speaking the wire protocol to an external server."""

from __future__ import annotations

import hashlib
import logging
import socket

import numpy as np

from .base import ModelBackend
from .types import (
    BackendContext,
    DecodeOutput,
    EvalOutput,
    QueryTokens,
    VisualSpec,
    ensure_latents,
)
from .wire import PROTOCOL_VERSION, WireError, read_message, write_message

__all__ = ["RemoteBackend", "probe_server"]

log = logging.getLogger("latentforge.backend")


def _parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ValueError(f"endpoint must look like HOST:PORT, got {endpoint!r}")
    return host, int(port)


class RemoteBackend(ModelBackend):
    """Drives a protocol-speaking model server over TCP.

    The handshake fixes the capability fields; contexts live on the server
    keyed by client-chosen ids and die with the connection.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0):
        host, port = _parse_endpoint(endpoint)
        self.endpoint = endpoint
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._stream = self._sock.makefile("rwb")
        caps = self._call({"type": "hello", "version": PROTOCOL_VERSION})
        self._latent_dim = int(caps["latent_dim"])
        self._vocab_size = int(caps["vocab_size"])
        self._latent_end_id = int(caps["latent_end_id"])
        self._max_contexts = int(caps["max_contexts"])
        log.info("connected to %s (latent_dim=%d, vocab=%d)", endpoint, self._latent_dim,
                 self._vocab_size)

    # -- capability surface -------------------------------------------------

    @property
    def latent_dim(self) -> int:
        return self._latent_dim

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    @property
    def latent_end_id(self) -> int:
        return self._latent_end_id

    @property
    def max_contexts(self) -> int | None:
        return self._max_contexts

    # -- wiring ---------------------------------------------------------------

    def _call(self, request: dict) -> dict:
        write_message(self._stream, request)
        reply = read_message(self._stream)
        if reply is None:
            raise WireError("server closed the connection mid-request")
        if not reply.get("ok", False):
            raise WireError(f"server error for {request.get('type')}: {reply.get('error')}")
        return reply

    def shutdown(self) -> None:
        try:
            self._stream.close()
        finally:
            self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()

    # -- operations ----------------------------------------------------------

    def encode(self, visual: VisualSpec, query: QueryTokens) -> BackendContext:
        digest = hashlib.sha256()
        digest.update(visual.patches.tobytes())
        digest.update(bytes(query.ids))
        instance_id = digest.hexdigest()[:16]
        reply = self._call({
            "type": "encode",
            "id": instance_id,
            "patches": visual.patches.tolist(),
            "query": list(query.ids),
        })
        return BackendContext(
            instance_id=instance_id,
            n_visual=int(reply["n_visual"]),
            visual_index_set=tuple(int(i) for i in reply["visual_index_set"]),
            query_index_set=tuple(int(i) for i in reply["query_index_set"]),
            seq_len=int(reply["seq_len"]),
            latent_dim=int(reply["latent_dim"]),
        )

    def initial_latents(self, ctx: BackendContext, k: int) -> np.ndarray:
        if k < 1:
            raise ValueError("need at least one latent")
        reply = self._call({"type": "init_latents", "id": ctx.instance_id, "k": int(k)})
        return ensure_latents(np.asarray(reply["latents"], dtype=np.float64), dim=self._latent_dim)

    def evaluate(self, ctx: BackendContext, latents: np.ndarray) -> EvalOutput:
        latents = ensure_latents(latents, dim=self._latent_dim)
        reply = self._call({
            "type": "evaluate",
            "id": ctx.instance_id,
            "latents": latents.tolist(),
        })
        return EvalOutput(
            latent_logits=np.asarray(reply["latent_logits"], dtype=np.float64),
            qv_attention=np.asarray(reply["qv_attention"], dtype=np.float64),
            visual_embeddings=np.asarray(reply["visual_embeddings"], dtype=np.float64),
            latent_end_logit_per_position=np.asarray(
                reply["latent_end_logit_per_position"], dtype=np.float64
            ),
        )

    def decode_answer(self, ctx: BackendContext, latents: np.ndarray, max_len: int) -> DecodeOutput:
        if max_len < 1:
            raise ValueError("max_len must be at least 1")
        latents = ensure_latents(latents, dim=self._latent_dim)
        reply = self._call({
            "type": "decode",
            "id": ctx.instance_id,
            "latents": latents.tolist(),
            "max_len": int(max_len),
        })
        return DecodeOutput(
            token_ids=tuple(int(t) for t in reply["token_ids"]),
            attention_share_latent=float(reply["attention_share_latent"]),
            attention_share_visual=float(reply["attention_share_visual"]),
        )

    def close(self, ctx: BackendContext) -> None:
        self._call({"type": "close", "id": ctx.instance_id})


def probe_server(endpoint: str, timeout: float = 10.0) -> dict:
    """One-shot handshake check; returns the declared capabilities."""
    host, port = _parse_endpoint(endpoint)
    with socket.create_connection((host, port), timeout=timeout) as sock:
        stream = sock.makefile("rwb")
        write_message(stream, {"type": "hello", "version": PROTOCOL_VERSION})
        reply = read_message(stream)
    if reply is None or not reply.get("ok", False):
        raise WireError(f"handshake with {endpoint} failed: {reply}")
    return {
        "latent_dim": int(reply["latent_dim"]),
        "vocab_size": int(reply["vocab_size"]),
        "latent_end_id": int(reply["latent_end_id"]),
        "max_contexts": int(reply["max_contexts"]),
    }
