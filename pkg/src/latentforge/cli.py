"""Command-line front end.

Subcommands: ``optimize`` (one instance), ``eval`` (dataset run),
``silencing-demo`` (joint-training diagnostic), ``probe-server``
(protocol handshake check).  The ``LATENTFORGE_LOG`` environment
variable sets the log level.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .diagnostics import (
    JointTrainConfig,
    donated_accuracy_spearman,
    run_silencing_arms,
)
from .pipeline import (
    RunConfig,
    evaluate_dataset,
    make_backend,
    optimize_instance,
    toy_dataset,
    _result_to_dict,
)
from .seeding import derive_seed


def _setup_logging() -> None:
    level = os.environ.get("LATENTFORGE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _load_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        config = RunConfig.from_dict(data)
    else:
        config = RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.backend is not None:
        overrides["backend_kind"] = args.backend
    if args.endpoint is not None:
        overrides["backend_endpoint"] = args.endpoint
    if overrides:
        config = dataclasses.replace(config, **overrides)
    return config


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file mirroring the run config fields")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--backend", choices=["toy", "remote"], default=None)
    parser.add_argument("--endpoint", help="HOST:PORT of a remote model server")


def _cmd_optimize(args: argparse.Namespace) -> int:
    config = _load_config(args)
    backend = make_backend(config)
    instance = toy_dataset(1, config.seed)[0]
    result = optimize_instance(
        backend,
        instance.visual,
        instance.query,
        config,
        instance_id=instance.instance_id,
        gold_answer_ids=instance.gold_answer_ids,
    )
    print(json.dumps(_result_to_dict(result), sort_keys=True))
    return 0 if result.error is None else 1


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    backend = make_backend(config)
    instances = toy_dataset(args.n_instances, config.seed)
    manifest = evaluate_dataset(
        backend,
        instances,
        config,
        out_dir=args.out,
        n_workers=args.workers,
        trajectories=args.trajectories,
    )
    print(f"accuracy {manifest.aggregate_accuracy:.4f} over {len(manifest.instance_ids)} "
          f"instances ({manifest.n_errors} errors) -> {args.out}")
    return 1 if manifest.n_errors else 0


def _cmd_silencing_demo(args: argparse.Namespace) -> int:
    base = JointTrainConfig(steps=args.steps, checkpoint_every=args.checkpoint_every)
    seeds = [derive_seed("silencing", s) if args.hash_seeds else s for s in range(args.seeds)]
    full, half = run_silencing_arms(seeds, base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "silencing_report.jsonl", "w", encoding="utf-8") as fh:
        for report in (*full, *half):
            fh.write(json.dumps(dataclasses.asdict(report), sort_keys=True) + "\n")
    with open(out / "silencing_series.csv", "w", encoding="utf-8") as fh:
        fh.write("seed,lam,checkpoint,step,alignment_loss,answer_nll,latent_end_logit,"
                 "attention_share_latent,attention_share_visual,"
                 "donated_latents_accuracy,joint_model_accuracy\n")
        for report in (*full, *half):
            for i, step in enumerate(report.checkpoint_steps):
                fh.write(
                    f"{report.seed},{report.lam},{i},{step},"
                    f"{report.alignment_loss[i]!r},{report.answer_nll[i]!r},"
                    f"{report.latent_end_logit[i]!r},{report.attention_share_latent[i]!r},"
                    f"{report.attention_share_visual[i]!r},"
                    f"{report.donated_latents_accuracy[i]!r},"
                    f"{report.joint_model_accuracy[i]!r}\n"
                )
    print(f"wrote {len(full) + len(half)} reports to {out}")
    print(f"donated-latents spearman (full weight): {donated_accuracy_spearman(full):.3f}")
    return 0


def _cmd_probe_server(args: argparse.Namespace) -> int:
    from .backend.remote import probe_server

    caps = probe_server(args.endpoint)
    print(json.dumps(caps, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(prog="latentforge")
    sub = parser.add_subparsers(dest="command", required=True)

    p_opt = sub.add_parser("optimize", help="optimize one toy instance and print the result")
    _add_run_flags(p_opt)
    p_opt.set_defaults(func=_cmd_optimize)

    p_eval = sub.add_parser("eval", help="run a dataset and persist results")
    _add_run_flags(p_eval)
    p_eval.add_argument("--n-instances", type=int, default=100)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--workers", type=int, default=1)
    p_eval.add_argument("--trajectories", action="store_true",
                        help="also write a plot-ready trajectories.csv")
    p_eval.set_defaults(func=_cmd_eval)

    p_sil = sub.add_parser("silencing-demo", help="joint-training diagnostic over seeds")
    p_sil.add_argument("--seeds", type=int, default=5)
    p_sil.add_argument("--out", required=True)
    p_sil.add_argument("--steps", type=int, default=240)
    p_sil.add_argument("--checkpoint-every", type=int, default=40)
    p_sil.add_argument("--hash-seeds", action="store_true",
                       help="derive seeds instead of using 0..N-1")
    p_sil.set_defaults(func=_cmd_silencing_demo)

    p_probe = sub.add_parser("probe-server", help="handshake check against a model server")
    p_probe.add_argument("--endpoint", required=True)
    p_probe.set_defaults(func=_cmd_probe_server)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
