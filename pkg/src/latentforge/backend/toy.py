"""Deterministic toy multimodal transformer backend.

A 2-layer, 4-head, 32-dim causal transformer over a prompt laid out as

    [visual patches | query tokens | <latent_start> | latents | <latent_end> | answer...]

Everything runs in double precision on CPU with seeded initialization, so
repeated evaluation of the same (context, latents) pair is bit-identical.
The backbone is small enough for sub-second evaluation but large enough
that supervised training on the synthetic quadrant task produces usable
query-to-visual attention and latent-conditioned answers.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..seeding import derive_seed
from .base import ModelBackend
from .task import (
    EOS_ID,
    LATENT_END_ID,
    LATENT_START_ID,
    PATCH_DIM,
    UNKNOWN_ID,
    VOCAB_SIZE,
    quadrant_colors,
    quadrant_indices,
    toy_task_sample,
)
from .types import (
    BackendContext,
    DecodeOutput,
    EvalOutput,
    QueryTokens,
    VisualSpec,
    ensure_latents,
)

__all__ = ["TinyMultimodalLM", "ToyBackend", "pretrain_backbone", "task_accuracy"]

log = logging.getLogger("latentforge.backend")

_DTYPE = torch.float64


class _SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must divide evenly into heads")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model, dtype=_DTYPE)
        self.proj = nn.Linear(d_model, d_model, dtype=_DTYPE)

    def forward(self, x: torch.Tensor, causal_bias: torch.Tensor):
        b, t, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)
        q = q.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / self.head_dim**0.5 + causal_bias[:t, :t]
        probs = torch.softmax(scores, dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out), probs


class _Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model, dtype=_DTYPE)
        self.attn = _SelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model, dtype=_DTYPE)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model, dtype=_DTYPE),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model, dtype=_DTYPE),
        )

    def forward(self, x: torch.Tensor, causal_bias: torch.Tensor):
        attn_out, probs = self.attn(self.ln1(x), causal_bias)
        x = x + attn_out
        x = x + self.mlp(self.ln2(x))
        return x, probs


class TinyMultimodalLM(nn.Module):
    """Causal transformer with a patch projector in front.

    ``forward`` takes content embeddings (positions are added internally)
    and returns the post-norm hidden states, vocabulary logits, and the
    per-layer, per-head attention probabilities.
    """

    def __init__(
        self,
        *,
        vocab_size: int = VOCAB_SIZE,
        d_model: int = 32,
        n_layers: int = 2,
        n_heads: int = 4,
        patch_dim: int = PATCH_DIM,
        max_seq: int = 160,
        seed: int = 0,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.patch_dim = patch_dim
        self.max_seq = max_seq
        self.wte = nn.Embedding(vocab_size, d_model, dtype=_DTYPE)
        self.wpe = nn.Embedding(max_seq, d_model, dtype=_DTYPE)
        self.visual_proj = nn.Linear(patch_dim, d_model, bias=False, dtype=_DTYPE)
        self.blocks = nn.ModuleList(_Block(d_model, n_heads) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(d_model, dtype=_DTYPE)
        self.lm_head = nn.Linear(d_model, vocab_size, bias=False, dtype=_DTYPE)
        bias = torch.full((max_seq, max_seq), float("-inf"), dtype=_DTYPE).triu(1)
        self.register_buffer("causal_bias", bias, persistent=False)
        self._seeded_init(seed)

    def _seeded_init(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Linear, nn.Embedding)):
                    module.weight.normal_(0.0, 0.02, generator=gen)
                    if getattr(module, "bias", None) is not None:
                        module.bias.zero_()

    def forward(self, content: torch.Tensor):
        b, t, _ = content.shape
        if t > self.max_seq:
            raise ValueError(f"sequence length {t} exceeds max {self.max_seq}")
        pos = self.wpe(torch.arange(t))
        x = content + pos
        attn_all = []
        for block in self.blocks:
            x, probs = block(x, self.causal_bias)
            attn_all.append(probs)
        hidden = self.ln_f(x)
        logits = self.lm_head(hidden)
        # [B, layers, heads, T, T]
        return hidden, logits, torch.stack(attn_all, dim=1)


@dataclass
class _ContextState:
    patch_embeds: torch.Tensor  # N x d, projected, no positions
    query_ids: tuple[int, ...]


class ToyBackend(ModelBackend):
    """In-process backend wrapping a :class:`TinyMultimodalLM`.

    Contexts are cheap and unbounded; evaluation is a pure function of the
    wrapped weights, the context inputs, and the latents.
    """

    def __init__(self, seed: int = 0, model: TinyMultimodalLM | None = None):
        self.seed = seed
        self.model = model if model is not None else TinyMultimodalLM(seed=seed)
        self.model.eval()
        self._contexts: dict[str, _ContextState] = {}
        with torch.no_grad():
            head = self.model.wte.weight[:4].numpy().tobytes()
        self._fingerprint = hashlib.sha256(head).hexdigest()[:12]

    # -- capability surface -------------------------------------------------

    @property
    def latent_dim(self) -> int:
        return self.model.d_model

    @property
    def vocab_size(self) -> int:
        return self.model.vocab_size

    @property
    def latent_end_id(self) -> int:
        return LATENT_END_ID

    @property
    def max_contexts(self) -> int | None:
        return None  # evaluation is pure; contexts are unbounded

    # -- operations ----------------------------------------------------------

    def encode(self, visual: VisualSpec, query: QueryTokens) -> BackendContext:
        if visual.patches.shape[1] != self.model.patch_dim:
            raise ValueError(
                f"patch feature dim {visual.patches.shape[1]} does not match "
                f"backend patch dim {self.model.patch_dim}"
            )
        if any(i >= self.vocab_size for i in query.ids):
            raise ValueError("query token id outside backend vocabulary")
        n = visual.n_patches
        q = len(query)
        digest = hashlib.sha256()
        digest.update(visual.patches.tobytes())
        digest.update(bytes(query.ids))
        digest.update(self._fingerprint.encode())
        instance_id = digest.hexdigest()[:16]
        with torch.no_grad():
            patch_embeds = self.model.visual_proj(
                torch.from_numpy(np.ascontiguousarray(visual.patches))
            )
        self._contexts[instance_id] = _ContextState(patch_embeds, query.ids)
        return BackendContext(
            instance_id=instance_id,
            n_visual=n,
            visual_index_set=tuple(range(n)),
            query_index_set=tuple(range(n, n + q)),
            seq_len=n + q,
            latent_dim=self.model.d_model,
        )

    def _state(self, ctx: BackendContext) -> _ContextState:
        try:
            return self._contexts[ctx.instance_id]
        except KeyError:
            raise KeyError(f"unknown context {ctx.instance_id!r}") from None

    def _prompt_content(self, state: _ContextState) -> torch.Tensor:
        query = self.model.wte(torch.tensor(state.query_ids, dtype=torch.long))
        start = self.model.wte(torch.tensor([LATENT_START_ID]))
        return torch.cat([state.patch_embeds, query, start], dim=0)

    def _content_with_latents(
        self,
        state: _ContextState,
        latents: np.ndarray,
        answer_ids: tuple[int, ...] = (),
    ) -> torch.Tensor:
        parts = [
            self._prompt_content(state),
            torch.from_numpy(np.ascontiguousarray(latents)),
            self.model.wte(torch.tensor([LATENT_END_ID])),
        ]
        if answer_ids:
            parts.append(self.model.wte(torch.tensor(answer_ids, dtype=torch.long)))
        return torch.cat(parts, dim=0)

    def initial_latents(self, ctx: BackendContext, k: int) -> np.ndarray:
        """Autoregressive hidden-state rollout of length k.

        Starting from the prompt ending in ``<latent_start>``, the final
        hidden state at the last position is fed back as the next input
        embedding; the k hidden states collected this way form the initial
        latent state.
        """
        if k < 1:
            raise ValueError("need at least one latent")
        state = self._state(ctx)
        with torch.no_grad():
            content = self._prompt_content(state).unsqueeze(0)
            latents = []
            for _ in range(k):
                hidden, _, _ = self.model(content)
                step = hidden[:, -1, :]
                latents.append(step[0])
                content = torch.cat([content, step.unsqueeze(1)], dim=1)
        return torch.stack(latents).numpy().copy()

    def evaluate(self, ctx: BackendContext, latents: np.ndarray) -> EvalOutput:
        state = self._state(ctx)
        latents = ensure_latents(latents, dim=self.latent_dim)
        k = latents.shape[0]
        m = ctx.seq_len
        with torch.no_grad():
            content = self._content_with_latents(state, latents).unsqueeze(0)
            _, logits, attn = self.model(content)
            mean_attn = attn.mean(dim=(1, 2))[0]
        latent_positions = list(range(m + 1, m + 1 + k))
        latent_logits = logits[0, latent_positions].numpy().copy()
        q_rows = list(ctx.query_index_set)
        v_cols = list(ctx.visual_index_set)
        qv = mean_attn[q_rows][:, v_cols].numpy().copy()
        return EvalOutput(
            latent_logits=latent_logits,
            qv_attention=qv,
            visual_embeddings=state.patch_embeds.numpy().copy(),
            latent_end_logit_per_position=latent_logits[:, LATENT_END_ID].copy(),
        )

    def decode_answer(self, ctx: BackendContext, latents: np.ndarray, max_len: int) -> DecodeOutput:
        if max_len < 1:
            raise ValueError("max_len must be at least 1")
        state = self._state(ctx)
        latents = ensure_latents(latents, dim=self.latent_dim)
        k = latents.shape[0]
        m = ctx.seq_len
        answer: list[int] = []
        with torch.no_grad():
            while len(answer) < max_len:
                content = self._content_with_latents(state, latents, tuple(answer))
                _, logits, _ = self.model(content.unsqueeze(0))
                nxt = int(torch.argmax(logits[0, -1]))
                if nxt == EOS_ID:
                    break
                answer.append(nxt)
            if answer:
                content = self._content_with_latents(state, latents, tuple(answer))
                _, _, attn = self.model(content.unsqueeze(0))
                mean_attn = attn.mean(dim=(1, 2))[0]
                first = m + k + 2
                rows = mean_attn[first : first + len(answer)]
                latent_cols = rows[:, m + 1 : m + 1 + k].sum(dim=1)
                visual_cols = rows[:, list(ctx.visual_index_set)].sum(dim=1)
                share_latent = float(latent_cols.mean())
                share_visual = float(visual_cols.mean())
            else:
                share_latent = share_visual = 0.0
        return DecodeOutput(
            token_ids=tuple(answer),
            attention_share_latent=share_latent,
            attention_share_visual=share_visual,
        )

    def close(self, ctx: BackendContext) -> None:
        if ctx.instance_id not in self._contexts:
            raise KeyError(f"unknown context {ctx.instance_id!r}")
        del self._contexts[ctx.instance_id]

    def visual_embeddings(self, ctx: BackendContext) -> np.ndarray:
        """Projected visual token vectors for this context (N x d)."""
        return self._state(ctx).patch_embeds.numpy().copy()

    # -- trained variants ----------------------------------------------------

    @classmethod
    def pretrained(cls, seed: int = 0, **train_kwargs) -> "ToyBackend":
        """Backend whose weights were trained on the synthetic quadrant task.

        Training is deterministic per seed and cached in-process, so
        repeated calls are cheap.
        """
        key = (seed, tuple(sorted(train_kwargs.items())))
        state = _PRETRAINED_CACHE.get(key)
        model = TinyMultimodalLM(seed=seed)
        if state is None:
            pretrain_backbone(model, seed=seed, **train_kwargs)
            _PRETRAINED_CACHE[key] = {
                name: tensor.detach().clone() for name, tensor in model.state_dict().items()
            }
        else:
            model.load_state_dict(state)
        return cls(seed=seed, model=model)


_PRETRAINED_CACHE: dict[tuple, dict[str, torch.Tensor]] = {}


def _batch_instances(seed: int, step: int, batch_size: int):
    return [
        toy_task_sample(derive_seed(seed, "pretrain", step, j)) for j in range(batch_size)
    ]


def pretrain_backbone(
    model: TinyMultimodalLM,
    seed: int,
    *,
    steps: int = 600,
    batch_size: int = 32,
    lr: float = 2e-3,
    k_latents: int = 4,
    noise_prob: float = 0.2,
    queried_prob: float = 0.2,
    clue_size: int = 2,
    attn_weight: float = 1.0,
) -> list[float]:
    """Supervised training on the synthetic quadrant task, in place.

    Each example inserts a latent span before the answer, and the answer
    target is a function of the latent content alone, so the model cannot
    learn a vision-only shortcut around the span: latents built from a
    quadrant's patch embeddings (randomly rescaled, so the reading path
    cannot latch onto magnitude) map to that quadrant's color, Gaussian
    noise latents map to the reserved unknown token.  The quadrant is the
    queried one with probability ``queried_prob`` and uniform otherwise.
    A guidance term pushes the averaged query-row attention onto the
    queried quadrant's patches so the query-to-visual relevance ranking
    carries task signal.

    Returns the per-step total loss history.
    """
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "pretrain-mix")))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    history: list[float] = []

    def _unit(vec: np.ndarray) -> np.ndarray:
        return vec / np.linalg.norm(vec)

    for step in range(steps):
        batch = _batch_instances(seed, step, batch_size)
        contents = []
        golds = []
        relevant_cols = []
        for inst in batch:
            patches = torch.from_numpy(inst.visual.patches)
            patch_embeds = model.visual_proj(patches)
            colors = quadrant_colors(inst.visual)
            with torch.no_grad():
                emb = patch_embeds.detach().numpy()
                base = float(np.linalg.norm(emb, axis=1).mean())
                # Magnitudes span clue scale up to well past the rollout-hidden
                # scale so the reading path keys on direction, never on norm.
                mags = base * np.exp(rng.uniform(np.log(0.5), np.log(400.0), size=k_latents))
                draw = rng.random()
                if draw < noise_prob:
                    dirs = [_unit(rng.normal(0.0, 1.0, model.d_model)) for _ in range(k_latents)]
                    target = UNKNOWN_ID
                else:
                    if draw < noise_prob + queried_prob:
                        quadrant = int(np.argmax([
                            set(quadrant_indices(q)) == set(inst.relevant_patches)
                            for q in range(4)
                        ]))
                    else:
                        quadrant = int(rng.integers(0, 4))
                    source = list(quadrant_indices(quadrant))
                    dirs = []
                    for _ in range(k_latents):
                        picks = rng.choice(len(source), size=clue_size, replace=False)
                        mean_dir = _unit(emb[[source[p] for p in picks]].mean(axis=0))
                        # Partial alignment: contaminate the clue direction so
                        # blends of warm-up progress still read as the color.
                        noise_dir = _unit(rng.normal(0.0, 1.0, model.d_model))
                        c = rng.uniform(0.3, 1.0)
                        dirs.append(_unit(c * mean_dir + np.sqrt(1 - c * c) * noise_dir))
                    target = colors[quadrant]
                latents = torch.from_numpy(np.stack(dirs) * mags[:, None])
            query = model.wte(torch.tensor(inst.query.ids, dtype=torch.long))
            start = model.wte(torch.tensor([LATENT_START_ID]))
            end = model.wte(torch.tensor([LATENT_END_ID]))
            ans = model.wte(torch.tensor([target], dtype=torch.long))
            contents.append(torch.cat([patch_embeds, query, start, latents, end, ans]))
            golds.append(target)
            relevant_cols.append(list(inst.relevant_patches))

        content = torch.stack(contents)
        _, logits, attn = model(content)
        b = len(batch)
        n = batch[0].visual.n_patches
        q = len(batch[0].query)
        pos_end = n + q + 1 + k_latents  # <latent_end> position, predicts the answer
        pos_ans = pos_end + 1  # answer position, predicts <eos>
        gold_t = torch.tensor(golds, dtype=torch.long)
        eos_t = torch.full((b,), EOS_ID, dtype=torch.long)
        ce = 0.5 * (
            torch.nn.functional.cross_entropy(logits[:, pos_end], gold_t)
            + torch.nn.functional.cross_entropy(logits[:, pos_ans], eos_t)
        )
        mean_attn = attn.mean(dim=(1, 2))
        rel_mass = torch.stack(
            [mean_attn[i, n : n + q, cols].sum(dim=-1) for i, cols in enumerate(relevant_cols)]
        )
        attn_loss = -(rel_mass + 1e-9).log().mean()
        loss = ce + attn_weight * attn_loss
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if step % 100 == 0:
            log.debug("pretrain step %d loss %.4f (ce %.4f attn %.4f)",
                      step, history[-1], float(ce.detach()), float(attn_loss.detach()))
    model.eval()
    return history


def task_accuracy(
    backend: ToyBackend,
    instance_seeds: list[int],
    *,
    latent_mode: str = "rollout",
    k: int = 4,
    max_len: int = 8,
) -> float:
    """Greedy-decoding accuracy on task instances.

    ``latent_mode`` selects the latent span: ``"rollout"`` uses the
    backend's own initial latents, ``"clue"`` uses the ground-truth
    relevant-patch group means (the trainer's convergence check).
    """
    from .task import clue_latents

    hits = 0
    for s in instance_seeds:
        inst = toy_task_sample(s)
        ctx = backend.encode(inst.visual, inst.query)
        if latent_mode == "clue":
            latents = clue_latents(backend.visual_embeddings(ctx), inst.relevant_patches, k)
        elif latent_mode == "rollout":
            latents = backend.initial_latents(ctx, k)
        else:
            raise ValueError(f"unknown latent mode {latent_mode!r}")
        out = backend.decode_answer(ctx, latents, max_len)
        hits += out.token_ids == inst.gold_answer_ids
        backend.close(ctx)
    return hits / len(instance_seeds)
