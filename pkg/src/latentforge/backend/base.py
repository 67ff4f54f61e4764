"""Abstract model-backend contract consumed by the optimizer."""

from __future__ import annotations

import abc

import numpy as np

from .types import BackendContext, DecodeOutput, EvalOutput, QueryTokens, VisualSpec

__all__ = ["ModelBackend"]


class ModelBackend(abc.ABC):
    """Everything the latent optimizer needs from a model.

    Implementations must keep ``evaluate`` and ``decode_answer`` pure:
    for a fixed backend state, identical inputs yield identical outputs.
    A context is confined to one worker at a time.
    """

    @property
    @abc.abstractmethod
    def latent_dim(self) -> int: ...

    @property
    @abc.abstractmethod
    def vocab_size(self) -> int: ...

    @property
    @abc.abstractmethod
    def latent_end_id(self) -> int: ...

    @property
    @abc.abstractmethod
    def max_contexts(self) -> int | None:
        """Maximum simultaneously open contexts; None means unbounded."""

    @abc.abstractmethod
    def encode(self, visual: VisualSpec, query: QueryTokens) -> BackendContext: ...

    @abc.abstractmethod
    def initial_latents(self, ctx: BackendContext, k: int) -> np.ndarray: ...

    @abc.abstractmethod
    def evaluate(self, ctx: BackendContext, latents: np.ndarray) -> EvalOutput: ...

    @abc.abstractmethod
    def decode_answer(
        self, ctx: BackendContext, latents: np.ndarray, max_len: int
    ) -> DecodeOutput: ...

    @abc.abstractmethod
    def close(self, ctx: BackendContext) -> None: ...
