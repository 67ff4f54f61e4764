"""End-to-end per-instance optimization, dataset runs, and persistence.

A run's seed fans out to per-instance seeds through a stable digest, so
results do not depend on execution order.  Result lines are canonical
JSON (sorted keys, no volatile fields), which makes serial runs with the
same config and seed byte-identical.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .backend.base import ModelBackend
from .backend.task import toy_task_sample
from .backend.toy import ToyBackend
from .backend.types import QueryTokens, VisualSpec
from .reinforce import ReinforceConfig, RewardTrace, reinforce_run
from .seeding import derive_seed
from .warmup import WarmupConfig, WarmupTrace, warmup_run

__all__ = [
    "RunConfig",
    "InstanceResult",
    "RunManifest",
    "DatasetInstance",
    "toy_dataset",
    "make_backend",
    "optimize_instance",
    "evaluate_dataset",
    "write_results",
    "read_results",
    "write_manifest",
    "read_manifest",
    "write_trajectories",
    "config_hash",
    "ResultsParseError",
    "VersionMismatchError",
]

log = logging.getLogger("latentforge.pipeline")

RESULTS_FILENAME = "results.jsonl"
MANIFEST_FILENAME = "manifest.json"
TRAJECTORIES_FILENAME = "trajectories.csv"


class ResultsParseError(ValueError):
    """Raised for malformed result files; carries the failing byte offset."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class VersionMismatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    K: int = 4
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    reinforce: ReinforceConfig = field(default_factory=ReinforceConfig)
    backend_kind: str = "toy"
    backend_endpoint: str | None = None
    max_decode_len: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.backend_kind not in ("toy", "remote"):
            raise ValueError(f"unknown backend kind {self.backend_kind!r}")
        if self.backend_kind == "remote" and not self.backend_endpoint:
            raise ValueError("remote backend requires an endpoint")
        if self.max_decode_len < 1:
            raise ValueError("max_decode_len must be at least 1")

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "warmup": dataclasses.asdict(self.warmup),
            "reinforce": dataclasses.asdict(self.reinforce),
            "backend_kind": self.backend_kind,
            "backend_endpoint": self.backend_endpoint,
            "max_decode_len": self.max_decode_len,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "warmup" in data:
            data["warmup"] = WarmupConfig(**data["warmup"])
        if "reinforce" in data:
            data["reinforce"] = ReinforceConfig(**data["reinforce"])
        return cls(**data)


def config_hash(config: RunConfig) -> str:
    """Stable digest of the canonicalized config."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class InstanceResult:
    instance_id: str
    warmup_trace: WarmupTrace | None
    reward_trace: RewardTrace | None
    answer_ids: tuple[int, ...]
    gold_match: bool | None
    output_token_count: int
    wall_time_ms: float = field(compare=False, default=0.0)
    error: str | None = None


@dataclass(frozen=True)
class RunManifest:
    config: RunConfig
    config_hash: str
    seed: int
    instance_ids: tuple[str, ...]
    aggregate_accuracy: float
    library_version: str
    n_errors: int

    def __post_init__(self):
        if len(set(self.instance_ids)) != len(self.instance_ids):
            raise ValueError("duplicate instance ids in manifest")


@dataclass(frozen=True)
class DatasetInstance:
    instance_id: str
    visual: VisualSpec
    query: QueryTokens
    gold_answer_ids: tuple[int, ...] | None = None
    relevant_patches: tuple[int, ...] | None = None


def toy_dataset(n_instances: int, seed: int) -> list[DatasetInstance]:
    """Deterministic list of synthetic task instances for a run seed."""
    if n_instances < 1:
        raise ValueError("need at least one instance")
    out = []
    for i in range(n_instances):
        sample = toy_task_sample(derive_seed(seed, "task", i))
        out.append(
            DatasetInstance(
                instance_id=f"toy-{i:04d}",
                visual=sample.visual,
                query=sample.query,
                gold_answer_ids=sample.gold_answer_ids,
                relevant_patches=sample.relevant_patches,
            )
        )
    return out


def make_backend(config: RunConfig) -> ModelBackend:
    """Backend for a run: a task-trained toy model, or a protocol client."""
    if config.backend_kind == "toy":
        return ToyBackend.pretrained(seed=config.seed)
    from .backend.remote import RemoteBackend

    return RemoteBackend(config.backend_endpoint)


def optimize_instance(
    backend: ModelBackend,
    visual: VisualSpec,
    query: QueryTokens,
    config: RunConfig,
    *,
    instance_id: str = "instance-0",
    gold_answer_ids: tuple[int, ...] | None = None,
) -> InstanceResult:
    """Run both optimization stages on one instance and decode the answer."""
    start = time.perf_counter()
    ctx = backend.encode(visual, query)
    try:
        h0 = backend.initial_latents(ctx, config.K)
        h_sft, warmup_trace = warmup_run(backend, ctx, h0, config.warmup)
        rng_seed = derive_seed(config.seed, instance_id)
        h_star, reward_trace = reinforce_run(backend, ctx, h_sft, config.reinforce, rng_seed)
        decoded = backend.decode_answer(ctx, h_star, config.max_decode_len)
    finally:
        backend.close(ctx)
    gold_match = None
    if gold_answer_ids is not None:
        gold_match = decoded.token_ids == tuple(gold_answer_ids)
    return InstanceResult(
        instance_id=instance_id,
        warmup_trace=warmup_trace,
        reward_trace=reward_trace,
        answer_ids=decoded.token_ids,
        gold_match=gold_match,
        output_token_count=len(decoded.token_ids) + config.K + 2,
        wall_time_ms=(time.perf_counter() - start) * 1e3,
    )


def _failed_result(instance_id: str, exc: Exception) -> InstanceResult:
    return InstanceResult(
        instance_id=instance_id,
        warmup_trace=None,
        reward_trace=None,
        answer_ids=(),
        gold_match=None,
        output_token_count=0,
        error=f"{type(exc).__name__}: {exc}",
    )


def evaluate_dataset(
    backend: ModelBackend,
    instances: list[DatasetInstance],
    config: RunConfig,
    *,
    out_dir: str | Path | None = None,
    n_workers: int = 1,
    trajectories: bool = False,
) -> RunManifest:
    """Optimize every instance, streaming results to disk as they complete.

    Instance failures are recorded in their result line rather than
    aborting the run.  With ``n_workers > 1`` instances run on a thread
    pool (each worker opens its own context); file order then follows
    completion order, so byte-stable output requires serial execution.
    """
    if not instances:
        raise ValueError("instance list is empty")
    ids = [inst.instance_id for inst in instances]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate instance ids in dataset")

    def _run_one(inst: DatasetInstance) -> InstanceResult:
        try:
            return optimize_instance(
                backend,
                inst.visual,
                inst.query,
                config,
                instance_id=inst.instance_id,
                gold_answer_ids=inst.gold_answer_ids,
            )
        except Exception as exc:  # recorded, not fatal
            log.warning("instance %s failed: %s", inst.instance_id, exc)
            return _failed_result(inst.instance_id, exc)

    results: list[InstanceResult] = []
    writer = _ResultWriter(Path(out_dir) / RESULTS_FILENAME) if out_dir else None
    try:
        if n_workers <= 1:
            for inst in instances:
                result = _run_one(inst)
                results.append(result)
                if writer:
                    writer.write(result)
        else:
            with concurrent.futures.ThreadPoolExecutor(max_workers=n_workers) as pool:
                futures = [pool.submit(_run_one, inst) for inst in instances]
                for fut in concurrent.futures.as_completed(futures):
                    result = fut.result()
                    results.append(result)
                    if writer:
                        writer.write(result)
    finally:
        if writer:
            writer.close()

    matched = sum(1 for r in results if r.gold_match)
    manifest = RunManifest(
        config=config,
        config_hash=config_hash(config),
        seed=config.seed,
        instance_ids=tuple(r.instance_id for r in results),
        aggregate_accuracy=matched / len(results),
        library_version=__version__,
        n_errors=sum(1 for r in results if r.error is not None),
    )
    if out_dir:
        out = Path(out_dir)
        write_manifest(manifest, out / MANIFEST_FILENAME)
        if trajectories:
            write_trajectories(results, out / TRAJECTORIES_FILENAME)
    return manifest


class _ResultWriter:
    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "wb")

    def write(self, result: InstanceResult) -> None:
        self._fh.write(_result_to_line(result))

    def close(self) -> None:
        self._fh.close()


# -- serialization ------------------------------------------------------------


def _result_to_dict(result: InstanceResult) -> dict:
    return {
        "instance_id": result.instance_id,
        "answer_ids": list(result.answer_ids),
        "gold_match": result.gold_match,
        "output_token_count": result.output_token_count,
        "error": result.error,
        "warmup_trace": None
        if result.warmup_trace is None
        else {
            "loss_per_step": result.warmup_trace.loss_per_step.tolist(),
            "grad_norm_per_step": result.warmup_trace.grad_norm_per_step.tolist(),
        },
        "reward_trace": None
        if result.reward_trace is None
        else {
            "reward_per_step": result.reward_trace.reward_per_step.tolist(),
            "best_reward_per_step": result.reward_trace.best_reward_per_step.tolist(),
            "entropy_profiles": result.reward_trace.entropy_profiles.tolist(),
        },
    }


def _result_to_line(result: InstanceResult) -> bytes:
    # Timings are deliberately left out so a rerun is byte-identical.
    return (
        json.dumps(_result_to_dict(result), sort_keys=True, separators=(",", ":")).encode("utf-8")
        + b"\n"
    )


def _result_from_dict(data: dict) -> InstanceResult:
    warmup_trace = None
    if data["warmup_trace"] is not None:
        warmup_trace = WarmupTrace(
            loss_per_step=np.asarray(data["warmup_trace"]["loss_per_step"]),
            grad_norm_per_step=np.asarray(data["warmup_trace"]["grad_norm_per_step"]),
        )
    reward_trace = None
    if data["reward_trace"] is not None:
        profiles = np.asarray(data["reward_trace"]["entropy_profiles"], dtype=np.float64)
        if profiles.size == 0:
            profiles = profiles.reshape(0, 0)
        reward_trace = RewardTrace(
            reward_per_step=np.asarray(data["reward_trace"]["reward_per_step"]),
            best_reward_per_step=np.asarray(data["reward_trace"]["best_reward_per_step"]),
            entropy_profiles=profiles,
        )
    return InstanceResult(
        instance_id=data["instance_id"],
        warmup_trace=warmup_trace,
        reward_trace=reward_trace,
        answer_ids=tuple(data["answer_ids"]),
        gold_match=data["gold_match"],
        output_token_count=data["output_token_count"],
        error=data["error"],
    )


def write_results(results: list[InstanceResult], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        for result in results:
            fh.write(_result_to_line(result))


def read_results(path: str | Path) -> list[InstanceResult]:
    results = []
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            if not raw.endswith(b"\n"):
                raise ResultsParseError("truncated result line", offset + len(raw))
            try:
                data = json.loads(raw)
                results.append(_result_from_dict(data))
            except json.JSONDecodeError as exc:
                raise ResultsParseError(f"malformed result line: {exc.msg}",
                                        offset + exc.pos) from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise ResultsParseError(f"invalid result record: {exc}", offset) from exc
            offset += len(raw)
    return results


def write_manifest(manifest: RunManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "library_version": manifest.library_version,
        "config": manifest.config.to_dict(),
        "config_hash": manifest.config_hash,
        "seed": manifest.seed,
        "instance_ids": list(manifest.instance_ids),
        "aggregate_accuracy": manifest.aggregate_accuracy,
        "n_errors": manifest.n_errors,
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _version_tuple(version: str) -> tuple[int, ...]:
    return tuple(int(p) for p in version.split("."))


def read_manifest(path: str | Path) -> RunManifest:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ResultsParseError(f"malformed manifest: {exc.msg}", exc.pos) from exc
    stored = data["library_version"]
    if _version_tuple(stored) > _version_tuple(__version__):
        raise VersionMismatchError(
            f"manifest written by library {stored}, this is {__version__}"
        )
    return RunManifest(
        config=RunConfig.from_dict(data["config"]),
        config_hash=data["config_hash"],
        seed=data["seed"],
        instance_ids=tuple(data["instance_ids"]),
        aggregate_accuracy=data["aggregate_accuracy"],
        library_version=stored,
        n_errors=data["n_errors"],
    )


def write_trajectories(results: list[InstanceResult], path: str | Path) -> None:
    """Plot-ready long-format CSV of per-step losses, rewards, and entropies."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["instance_id", "stage", "step", "loss", "reward", "best_reward", "mean_entropy"]
        )
        for result in results:
            if result.warmup_trace is not None:
                for step, loss in enumerate(result.warmup_trace.loss_per_step):
                    writer.writerow(
                        [result.instance_id, "warmup", step, repr(float(loss)), "", "", ""]
                    )
            if result.reward_trace is not None:
                trace = result.reward_trace
                for step in range(trace.reward_per_step.shape[0]):
                    writer.writerow(
                        [
                            result.instance_id,
                            "reinforce",
                            step,
                            "",
                            repr(float(trace.reward_per_step[step])),
                            repr(float(trace.best_reward_per_step[step])),
                            repr(float(trace.entropy_profiles[step].mean())),
                        ]
                    )
