"""Regenerate the recorded fixed-seed outputs used by the test suite.

Run from the repository root after any intentional change to the toy
backend, task generator, or pipeline serialization:

    python3 tests/goldens/regen.py
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from latentforge.backend.task import toy_task_sample
from latentforge.backend.toy import ToyBackend
from latentforge.backend.types import QueryTokens, VisualSpec
from latentforge.pipeline import RunConfig, optimize_instance, toy_dataset
from latentforge.pipeline import _result_to_line

OUT = Path(__file__).parent


def small_grid_inputs():
    """A 4x4 grid with a 3-token query, for the encode golden."""
    rng = np.random.default_rng(424242)
    visual = VisualSpec(patches=rng.normal(0, 1, size=(16, 8)), grid_shape=(4, 4))
    query = QueryTokens(ids=(16, 17, 21))
    return visual, query


def main():
    backend = ToyBackend(seed=0)
    record = {}
    arrays = {}

    visual, query = small_grid_inputs()
    ctx = backend.encode(visual, query)
    record["encode_small_grid"] = {
        "n_visual": ctx.n_visual,
        "visual_index_set": list(ctx.visual_index_set),
        "query_index_set": list(ctx.query_index_set),
        "seq_len": ctx.seq_len,
        "latent_dim": ctx.latent_dim,
    }
    backend.close(ctx)

    inst = toy_task_sample(0)
    record["task_seed0"] = {
        "query_ids": list(inst.query.ids),
        "gold_answer_ids": list(inst.gold_answer_ids),
        "relevant_patches": list(inst.relevant_patches),
        "grid_shape": list(inst.visual.grid_shape),
    }
    arrays["task_seed0_patches"] = inst.visual.patches

    golds = [toy_task_sample(s).gold_answer_ids for s in range(100)]
    record["consecutive_gold_differs_fraction"] = float(
        np.mean([golds[i] != golds[i + 1] for i in range(99)])
    )

    ctx = backend.encode(inst.visual, inst.query)
    h0 = backend.initial_latents(ctx, 4)
    arrays["initial_latents_seed0_k4"] = h0
    out = backend.evaluate(ctx, h0)
    arrays["latent_logits_seed0"] = out.latent_logits
    arrays["qv_attention_seed0"] = out.qv_attention
    backend.close(ctx)

    trained = ToyBackend.pretrained(seed=0)
    ctx = trained.encode(inst.visual, inst.query)
    h0t = trained.initial_latents(ctx, 4)
    decoded = trained.decode_answer(ctx, h0t, 8)
    record["trained_decode_seed0"] = {
        "token_ids": list(decoded.token_ids),
        "attention_share_latent": decoded.attention_share_latent,
        "attention_share_visual": decoded.attention_share_visual,
    }
    trained.close(ctx)

    config = RunConfig(seed=0)
    data = toy_dataset(1, 0)[0]
    result = optimize_instance(
        trained, data.visual, data.query, config,
        instance_id=data.instance_id, gold_answer_ids=data.gold_answer_ids,
    )
    record["optimize_seed0_digest"] = hashlib.sha256(_result_to_line(result)).hexdigest()
    record["optimize_seed0_answer"] = list(result.answer_ids)
    record["optimize_seed0_gold_match"] = result.gold_match

    (OUT / "golden.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    np.savez(OUT / "golden_arrays.npz", **arrays)
    print(f"wrote {OUT / 'golden.json'} and {OUT / 'golden_arrays.npz'}")


if __name__ == "__main__":
    main()
