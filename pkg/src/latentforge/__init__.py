"""latentforge: inference-time optimization of continuous visual-latent
reasoning states over a frozen model backend.

The optimizer runs in two stages.  Stage I warms the latent state up by
gradient descent on a query-guided contrastive objective built from the
backend's own attention.  Stage II perturbs the state with decaying
Gaussian noise, scores candidates with a confidence-progression reward
over the latent span's next-token entropies, folds the reward back
through a single-sample NES update, and keeps the best state seen.
A deterministic toy multimodal transformer ships for desk-scale
verification; a newline-delimited JSON protocol drives external models.
"""

__version__ = "0.1.0"

from .backend import (
    BackendContext,
    DecodeOutput,
    EvalOutput,
    ModelBackend,
    QueryTokens,
    RemoteBackend,
    TinyMultimodalLM,
    ToyBackend,
    VisualSpec,
    clue_latents,
    probe_server,
    task_accuracy,
    toy_task_sample,
)
from .diagnostics import (
    JointTrainConfig,
    SilencingReport,
    attention_share,
    donated_accuracy_spearman,
    efficiency_ratio,
    joint_loss,
    run_silencing_arms,
    silencing_demo,
)
from .pipeline import (
    DatasetInstance,
    InstanceResult,
    RunConfig,
    RunManifest,
    config_hash,
    evaluate_dataset,
    make_backend,
    optimize_instance,
    read_manifest,
    read_results,
    toy_dataset,
    write_manifest,
    write_results,
)
from .reinforce import (
    ReinforceConfig,
    RewardTrace,
    entropy_profile,
    nes_step,
    progression_reward,
    progression_reward_from_entropies,
    reinforce_run,
    sigma_at,
    topk_entropy,
)
from .relevance import (
    ChunkAssignment,
    RelevanceRanking,
    assign_chunks,
    rank_descending,
    rank_visual_tokens,
    relevance_scores,
)
from .seeding import derive_seed
from .warmup import (
    WarmupConfig,
    WarmupTrace,
    contrastive_grad,
    contrastive_loss,
    cosine_sim,
    warmup_run,
)

__all__ = [
    "__version__",
    # backends
    "ModelBackend", "ToyBackend", "TinyMultimodalLM", "RemoteBackend", "probe_server",
    "VisualSpec", "QueryTokens", "BackendContext", "EvalOutput", "DecodeOutput",
    "toy_task_sample", "clue_latents", "task_accuracy",
    # relevance
    "relevance_scores", "rank_descending", "assign_chunks", "rank_visual_tokens",
    "RelevanceRanking", "ChunkAssignment",
    # stage I
    "WarmupConfig", "WarmupTrace", "cosine_sim", "contrastive_loss",
    "contrastive_grad", "warmup_run",
    # stage II
    "ReinforceConfig", "RewardTrace", "topk_entropy", "entropy_profile",
    "progression_reward", "progression_reward_from_entropies", "sigma_at",
    "nes_step", "reinforce_run",
    # pipeline
    "RunConfig", "InstanceResult", "RunManifest", "DatasetInstance", "toy_dataset",
    "make_backend", "optimize_instance", "evaluate_dataset", "config_hash",
    "write_results", "read_results", "write_manifest", "read_manifest",
    # diagnostics
    "JointTrainConfig", "SilencingReport", "joint_loss", "attention_share",
    "efficiency_ratio", "silencing_demo", "run_silencing_arms",
    "donated_accuracy_spearman",
    # seeding
    "derive_seed",
]
