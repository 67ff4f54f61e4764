"""Toy-scale reproduction of the failure mode the optimizer exists to fix.

``silencing_demo`` trains a copy of the task-trained toy backbone under
the joint objective - latent-to-clue alignment plus a weighted
answer-autoregression NLL - while probing checkpoints for the telltale
signatures: rising ``<latent_end>`` logits at the latent positions,
answer-time attention drifting between the latent span and the raw
visual tokens, and the donated-latents probe (checkpoint latents plugged
into the frozen initial model) improving even when the jointly trained
model itself does not.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats

from .backend.task import (
    EOS_ID,
    LATENT_END_ID,
    LATENT_START_ID,
    clue_latents,
    toy_task_sample,
)
from .backend.toy import TinyMultimodalLM, ToyBackend
from .backend.types import DecodeOutput
from .seeding import derive_seed

__all__ = [
    "JointTrainConfig",
    "SilencingReport",
    "joint_loss",
    "attention_share",
    "efficiency_ratio",
    "silencing_demo",
    "run_silencing_arms",
    "donated_accuracy_spearman",
]

log = logging.getLogger("latentforge.diagnostics")

_JOINT_BATCH = 16
_TRAIN_POOL = 256
_EVAL_INSTANCES = 48
_K_LATENTS = 4
_DECODE_LEN = 4
_SPAN_CYCLE = (4, 2, 5, 3, 6)


@dataclass(frozen=True)
class JointTrainConfig:
    lam: float = 1.0
    steps: int = 240
    learning_rate: float = 1e-3
    checkpoint_every: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be at least 1")


@dataclass(frozen=True)
class SilencingReport:
    """Per-checkpoint series recorded during one joint-training run."""

    seed: int
    lam: float
    checkpoint_steps: tuple[int, ...]
    alignment_loss: tuple[float, ...]
    answer_nll: tuple[float, ...]
    latent_end_logit: tuple[float, ...]
    attention_share_latent: tuple[float, ...]
    attention_share_visual: tuple[float, ...]
    donated_latents_accuracy: tuple[float, ...]
    joint_model_accuracy: tuple[float, ...]

    def __post_init__(self):
        n = len(self.checkpoint_steps)
        series = (
            self.alignment_loss,
            self.answer_nll,
            self.latent_end_logit,
            self.attention_share_latent,
            self.attention_share_visual,
            self.donated_latents_accuracy,
            self.joint_model_accuracy,
        )
        if any(len(s) != n for s in series):
            raise ValueError("all report series must cover every checkpoint")
        for share in (*self.attention_share_latent, *self.attention_share_visual):
            if not 0.0 <= share <= 1.0:
                raise ValueError("attention shares must lie in [0, 1]")
        for acc in (*self.donated_latents_accuracy, *self.joint_model_accuracy):
            if not 0.0 <= acc <= 1.0:
                raise ValueError("accuracies must lie in [0, 1]")


def joint_loss(latents: np.ndarray, clues: np.ndarray, answer_nll: float, lam: float) -> float:
    """Mean squared latent-to-clue distance plus the weighted answer NLL.

    ``answer_nll`` is passed as a positive quantity (a negative
    log-probability).
    """
    latents = np.asarray(latents, dtype=np.float64)
    clues = np.asarray(clues, dtype=np.float64)
    if latents.shape != clues.shape:
        raise ValueError(f"latents {latents.shape} and clues {clues.shape} disagree")
    if answer_nll < 0:
        raise ValueError("answer_nll must be non-negative")
    alignment = float(np.mean(np.sum((latents - clues) ** 2, axis=1)))
    return alignment + lam * answer_nll


def attention_share(decode_output: DecodeOutput) -> tuple[float, float]:
    """Extract (latent, visual) attention shares with range checks."""
    lat = decode_output.attention_share_latent
    vis = decode_output.attention_share_visual
    if not (0.0 <= lat <= 1.0 and 0.0 <= vis <= 1.0):
        raise ValueError("attention shares must lie in [0, 1]")
    return lat, vis


def efficiency_ratio(mean_gain: float, mean_output_tokens: float) -> float:
    """Accuracy points gained per output token, scaled by 10 for readability."""
    if mean_output_tokens <= 0:
        raise ValueError("mean output token count must be positive")
    return (mean_gain / mean_output_tokens) * 10.0


# -- joint training ------------------------------------------------------------


class _InstanceTensors:
    """Pre-assembled prompt pieces for one task instance."""

    def __init__(self, inst, model_0: TinyMultimodalLM):
        self.inst = inst
        self.patches = torch.from_numpy(inst.visual.patches)
        self.query_ids = torch.tensor(inst.query.ids, dtype=torch.long)
        self.gold = inst.gold_answer_ids[0]
        with torch.no_grad():
            self._frozen_embeds = model_0.visual_proj(self.patches).numpy()
        self._clue_cache: dict[int, torch.Tensor] = {}

    def clues_for(self, k: int) -> torch.Tensor:
        """Alignment targets from the frozen initial encoder, k groups."""
        if k not in self._clue_cache:
            self._clue_cache[k] = torch.from_numpy(
                clue_latents(self._frozen_embeds, self.inst.relevant_patches, k)
            )
        return self._clue_cache[k]


def _prompt_content(model: TinyMultimodalLM, batch: list[_InstanceTensors]) -> torch.Tensor:
    parts = []
    start = model.wte(torch.tensor([LATENT_START_ID]))
    for item in batch:
        patch_embeds = model.visual_proj(item.patches)
        query = model.wte(item.query_ids)
        parts.append(torch.cat([patch_embeds, query, start]))
    return torch.stack(parts)


def _rollout(model: TinyMultimodalLM, prompt: torch.Tensor, k: int):
    """Differentiable k-step hidden-state rollout; returns (content, latents)."""
    content = prompt
    latents = []
    for _ in range(k):
        hidden, _, _ = model(content)
        step = hidden[:, -1, :]
        latents.append(step)
        content = torch.cat([content, step.unsqueeze(1)], dim=1)
    return content, torch.stack(latents, dim=1)


def _joint_terms(model: TinyMultimodalLM, batch: list[_InstanceTensors], k: int = _K_LATENTS):
    """Alignment MSE and answer-continuation NLL for one batch.

    ``k`` is the latent span length for this pass; clues are re-grouped to
    match.  Training with varying spans keeps the transition-token
    pressure from collapsing onto one fixed position.
    """
    prompt = _prompt_content(model, batch)
    p = prompt.shape[1]
    content, latents = _rollout(model, prompt, k)
    end = model.wte(torch.tensor([LATENT_END_ID])).expand(len(batch), 1, -1)
    gold = torch.tensor([item.gold for item in batch], dtype=torch.long)
    ans = model.wte(gold).unsqueeze(1)
    content = torch.cat([content, end, ans], dim=1)
    _, logits, attn = model(content)

    clues = torch.stack([item.clues_for(k) for item in batch])
    alignment = ((latents - clues) ** 2).sum(dim=2).mean()
    le = torch.full((len(batch),), LATENT_END_ID, dtype=torch.long)
    eos = torch.full((len(batch),), EOS_ID, dtype=torch.long)
    nll = (
        torch.nn.functional.cross_entropy(logits[:, p + k - 1], le)
        + torch.nn.functional.cross_entropy(logits[:, p + k], gold)
        + torch.nn.functional.cross_entropy(logits[:, p + k + 1], eos)
    ) / 3
    first_latent_end_logit = logits[:, p, LATENT_END_ID].mean()
    return alignment, nll, first_latent_end_logit, content, attn, latents


def _batched_decode(model: TinyMultimodalLM, prompt: torch.Tensor, latents: torch.Tensor):
    """Greedy decode for a batch; returns answers and mean attention shares."""
    b, p, _ = prompt.shape
    k = latents.shape[1]
    end = model.wte(torch.tensor([LATENT_END_ID])).expand(b, 1, -1)
    content = torch.cat([prompt, latents, end], dim=1)
    answers: list[list[int]] = [[] for _ in range(b)]
    finished = [False] * b
    attn = None
    for _ in range(_DECODE_LEN):
        _, logits, attn = model(content)
        nxt = logits[:, -1].argmax(dim=1)
        for i in range(b):
            if finished[i]:
                continue
            if int(nxt[i]) == EOS_ID:
                finished[i] = True
            else:
                answers[i].append(int(nxt[i]))
        if all(finished):
            break
        content = torch.cat([content, model.wte(nxt).unsqueeze(1)], dim=1)

    mean_attn = attn.mean(dim=(1, 2))
    n_visual = prompt.shape[1] - 4  # query (3) + <latent_start>
    lat_shares, vis_shares = [], []
    first_answer = p + k + 1
    for i in range(b):
        n_tok = len(answers[i])
        if n_tok == 0 or first_answer >= mean_attn.shape[1]:
            continue
        rows = mean_attn[i, first_answer : first_answer + n_tok]
        lat_shares.append(float(rows[:, p : p + k].sum(dim=1).mean()))
        vis_shares.append(float(rows[:, :n_visual].sum(dim=1).mean()))
    share_latent = float(np.mean(lat_shares)) if lat_shares else 0.0
    share_visual = float(np.mean(vis_shares)) if vis_shares else 0.0
    return [tuple(a) for a in answers], share_latent, share_visual


def _probe_checkpoint(
    model: TinyMultimodalLM,
    model_0: TinyMultimodalLM,
    eval_batch: list[_InstanceTensors],
):
    """All report quantities for the current weights, on the eval set."""
    with torch.no_grad():
        alignment, nll, le_logit, _, _, latents = _joint_terms(model, eval_batch)
        prompt = _prompt_content(model, eval_batch)
        answers, share_lat, share_vis = _batched_decode(model, prompt, latents)
        joint_acc = float(
            np.mean([a == (item.gold,) for a, item in zip(answers, eval_batch)])
        )
        # Donated-latents probe: frozen initial model, this checkpoint's latents.
        prompt_0 = _prompt_content(model_0, eval_batch)
        donated, _, _ = _batched_decode(model_0, prompt_0, latents)
        donated_acc = float(
            np.mean([a == (item.gold,) for a, item in zip(donated, eval_batch)])
        )
    return {
        "alignment_loss": float(alignment),
        "answer_nll": float(nll),
        "latent_end_logit": float(le_logit),
        "attention_share_latent": share_lat,
        "attention_share_visual": share_vis,
        "donated_latents_accuracy": donated_acc,
        "joint_model_accuracy": joint_acc,
    }


def silencing_demo(config: JointTrainConfig) -> SilencingReport:
    """Jointly train a backbone copy and record the silencing signatures.

    The starting point is the task-trained toy backbone; its frozen copy
    serves both as the donated-latents host and as the source of the
    alignment clues.  Checkpoint 0 is the untouched initial model.
    """
    base = ToyBackend.pretrained(seed=config.seed)
    model_0 = base.model
    model = copy.deepcopy(model_0)

    eval_batch = [
        _InstanceTensors(toy_task_sample(derive_seed(config.seed, "joint-eval", i)), model_0)
        for i in range(_EVAL_INSTANCES)
    ]
    pool = [
        _InstanceTensors(toy_task_sample(derive_seed(config.seed, "joint", i)), model_0)
        for i in range(_TRAIN_POOL)
    ]

    records = {"steps": [0]}
    for key, value in _probe_checkpoint(model, model_0, eval_batch).items():
        records[key] = [value]

    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    model.train()
    for step in range(1, config.steps + 1):
        # Linear decay to a tenth of the base rate keeps the late
        # checkpoints on a smooth approach instead of a noisy plateau.
        frac = (step - 1) / max(config.steps - 1, 1)
        for group in opt.param_groups:
            group["lr"] = config.learning_rate * (1.0 - 0.9 * frac)
        lo = ((step - 1) * _JOINT_BATCH) % len(pool)
        batch = pool[lo : lo + _JOINT_BATCH]
        if len(batch) < _JOINT_BATCH:
            batch = batch + pool[: _JOINT_BATCH - len(batch)]
        # Span lengths cycle so the transition token is not nailed to one
        # position; every checkpoint interval sees the same mixture.
        k = _SPAN_CYCLE[(step - 1) % len(_SPAN_CYCLE)]
        alignment, nll, _, _, _, _ = _joint_terms(model, batch, k)
        loss = alignment + config.lam * nll
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        if step % config.checkpoint_every == 0 or step == config.steps:
            model.eval()
            probe = _probe_checkpoint(model, model_0, eval_batch)
            model.train()
            records["steps"].append(step)
            for key, value in probe.items():
                records[key].append(value)
            log.debug(
                "joint step %d: align %.4f nll %.4f le-logit %.3f donated %.3f",
                step, probe["alignment_loss"], probe["answer_nll"],
                probe["latent_end_logit"], probe["donated_latents_accuracy"],
            )
    model.eval()

    return SilencingReport(
        seed=config.seed,
        lam=config.lam,
        checkpoint_steps=tuple(records["steps"]),
        alignment_loss=tuple(records["alignment_loss"]),
        answer_nll=tuple(records["answer_nll"]),
        latent_end_logit=tuple(records["latent_end_logit"]),
        attention_share_latent=tuple(records["attention_share_latent"]),
        attention_share_visual=tuple(records["attention_share_visual"]),
        donated_latents_accuracy=tuple(records["donated_latents_accuracy"]),
        joint_model_accuracy=tuple(records["joint_model_accuracy"]),
    )


def run_silencing_arms(
    seeds: list[int], base: JointTrainConfig | None = None
) -> tuple[list[SilencingReport], list[SilencingReport]]:
    """Run the demo per seed at the configured weight and at half weight."""
    base = base or JointTrainConfig()
    full, half = [], []
    for seed in seeds:
        cfg = JointTrainConfig(
            lam=base.lam, steps=base.steps, learning_rate=base.learning_rate,
            checkpoint_every=base.checkpoint_every, seed=seed,
        )
        full.append(silencing_demo(cfg))
        half.append(
            silencing_demo(
                JointTrainConfig(
                    lam=base.lam / 2, steps=base.steps, learning_rate=base.learning_rate,
                    checkpoint_every=base.checkpoint_every, seed=seed,
                )
            )
        )
        log.info("silencing arms done for seed %d", seed)
    return full, half


def donated_accuracy_spearman(reports: list[SilencingReport]) -> float:
    """Spearman correlation of checkpoint index vs seed-averaged donated accuracy."""
    donated = np.mean([r.donated_latents_accuracy for r in reports], axis=0)
    corr = stats.spearmanr(np.arange(len(donated)), donated).statistic
    return float(corr)
