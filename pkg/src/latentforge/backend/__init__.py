"""Model backends: the contract, a deterministic toy transformer, and a
remote-protocol client."""

from .base import ModelBackend
from .remote import RemoteBackend, probe_server
from .task import (
    EOS_ID,
    LATENT_END_ID,
    LATENT_START_ID,
    VOCAB_SIZE,
    ToyTaskInstance,
    clue_latents,
    split_relevant_groups,
    toy_task_sample,
)
from .toy import TinyMultimodalLM, ToyBackend, pretrain_backbone, task_accuracy
from .types import (
    BackendContext,
    DecodeOutput,
    EvalOutput,
    QueryTokens,
    VisualSpec,
    ensure_latents,
)

__all__ = [
    "ModelBackend",
    "ToyBackend",
    "TinyMultimodalLM",
    "RemoteBackend",
    "probe_server",
    "pretrain_backbone",
    "task_accuracy",
    "toy_task_sample",
    "ToyTaskInstance",
    "clue_latents",
    "split_relevant_groups",
    "VisualSpec",
    "QueryTokens",
    "BackendContext",
    "EvalOutput",
    "DecodeOutput",
    "ensure_latents",
    "VOCAB_SIZE",
    "LATENT_START_ID",
    "LATENT_END_ID",
    "EOS_ID",
]
