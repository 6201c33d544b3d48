"""Experiment orchestration: build the field, target, reward and search from a
config, run it under a forward-call budget, and write the run artifacts.

A run directory holds ``manifest.json``, ``successes.jsonl``, ``curve.csv`` and,
when enabled, one PDB file per accepted binder. Manifests are never
overwritten unless the caller asks for it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

import binderflow
from binderflow.denoiser.codec import ToyCodec, geometry_code
from binderflow.denoiser.data import TaskSpec, gen_toy_binder_dataset, latent_code, residue_labels
from binderflow.denoiser.field import AnalyticGaussianField, FieldArch, MLPField, TargetContext
from binderflow.denoiser.train import TrainConfig, load_checkpoint, train_field
from binderflow.flowcore import LENGTH_SCALE, ForwardCounter, SamplerSettings, ScheduleSpec, stream
from binderflow.geomcore import Complex, PointChain, greedy_cluster
from binderflow.datapipe import write_structure
from binderflow.reward import ExternalScorer, RewardSpec, RewardTerm, evaluate_reward, label_agreement
from binderflow.search.algorithms import (
    beam_search,
    best_of_n,
    fk_steering,
    mcts_search,
    mutation_refine,
    pass_cost,
    run_with_budget,
)
from binderflow.search.common import (
    FlowGenerator,
    RewardScorer,
    SearchConfig,
    SearchResult,
    SuccessCriterion,
    SuccessSet,
    make_record,
)
from binderflow.bench.config import ConfigError, load_config, validate

log = logging.getLogger(__name__)

COMPUTE_UNIT = "forward_calls"
MANIFEST_VERSION = 1
WALL_CLOCK_FIELDS = ("wall_clock_seconds",)
TAG_DATA = 20
TAG_MODEL_INIT = 21


@dataclass(frozen=True)
class RunManifest:
    name: str
    algorithm: str
    seed: int
    config: dict
    evaluations: int
    passes: int
    truncated: bool
    success_count: int
    success_sha256: str
    unique_successes: int
    cluster_threshold: float
    reward_stats: dict
    curve: list
    compute_unit: str = COMPUTE_UNIT
    wall_clock_seconds: float = 0.0
    version: str = binderflow.__version__
    manifest_version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        if d.get("manifest_version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('manifest_version')!r}")
        return cls(**d)

    def comparable(self) -> dict:
        """Manifest fields with wall-clock measurements removed."""
        d = dataclasses.asdict(self)
        for k in WALL_CLOCK_FIELDS:
            d.pop(k)
        return d

    @property
    def label(self) -> str:
        return self.name or self.algorithm


def atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def count_unique_successes(success: SuccessSet, threshold: float = 0.5) -> int:
    structures = success.structures()
    if not structures:
        return 0
    return greedy_cluster(structures, threshold).n_clusters


def summarize_successes(success: SuccessSet, threshold: float = 0.5) -> dict:
    """Every success-derived manifest number, recomputed from the records alone."""
    records = list(success)
    stats = {"count": len(records)}
    if records:
        rewards = np.array([r.reward for r in records])
        stats.update(reward_mean=float(rewards.mean()), reward_min=float(rewards.min()), reward_max=float(rewards.max()))
        for name in sorted({k for r in records for k, _ in r.raw}):
            vals = [dict(r.raw)[name] for r in records if name in dict(r.raw)]
            stats[f"{name}_mean"] = float(np.mean(vals))
    return {
        "success_count": len(records),
        "success_sha256": hashlib.sha256(success.to_jsonl().encode()).hexdigest(),
        "unique_successes": count_unique_successes(success, threshold),
        "reward_stats": stats,
    }


# ----------------------------------------------------------------------------
# building blocks


def task_spec(cfg: dict) -> TaskSpec:
    try:
        return TaskSpec.from_dict(cfg["task"]["spec"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"task.spec: {exc}") from None


def build_target(cfg: dict):
    """``(TaskSpec, TargetContext)``: the unrotated toy target with one patch flagged."""
    spec = task_spec(cfg)
    patches = spec.hotspot_patches()
    k = cfg["task"]["patch"]
    if k >= len(patches):
        raise ConfigError(f"task.patch: {k} is out of range for {len(patches)} patches")
    flags = np.isin(np.arange(spec.n_target), patches[k])
    ctx = TargetContext(spec.target_points(), flags).translated(cfg["task"]["target_shift"])
    return spec, ctx


def analytic_field(cfg: dict, spec: TaskSpec):
    """Gaussian field centred on the patch's arc template, with matching latent means."""
    m = cfg["model"]
    k = cfg["task"]["patch"]
    template = spec.arc_template(k)
    hot = spec.target_points()[spec.hotspot_patches()[k]]
    labels = residue_labels(template, hot, spec.label_radius)
    mu_z = latent_code(labels, geometry_code(template), spec.d_z)
    return AnalyticGaussianField(template / LENGTH_SCALE, m["sigma_x"], mu_z, m["sigma_z"], c_d=cfg["sampler"]["c_d"])


def train_config(cfg: dict, steps: Optional[int] = None) -> TrainConfig:
    t = cfg["model"]["train"]
    return TrainConfig(
        lr=t["lr"], steps=t["steps"] if steps is None else steps, batch=t["batch"], c_d=t["c_d"],
        seed=cfg["seed"], lr_final=t["lr_final"],
    )


def train_mlp(cfg: dict, spec: Optional[TaskSpec] = None):
    """Train a field on freshly generated toy data; returns ``(field, LossTrace)``."""
    spec = spec or task_spec(cfg)
    m = cfg["model"]
    data = gen_toy_binder_dataset(stream((cfg["seed"], TAG_DATA)), spec, m["n_train"])
    a = m["arch"]
    arch = FieldArch(
        d_z=spec.d_z, hidden=tuple(a["hidden"]), time_freqs=a["time_freqs"], pos_freqs=a["pos_freqs"],
        embed_dim=a["embed_dim"], activation=a["activation"],
    )
    field = MLPField.init(arch, stream((cfg["seed"], TAG_MODEL_INIT)))
    return train_field(field, data, config=train_config(cfg))


def build_field(cfg: dict, spec: TaskSpec):
    m = cfg["model"]
    if m["kind"] == "analytic":
        return analytic_field(cfg, spec)
    if m["checkpoint"]:
        model = load_checkpoint(m["checkpoint"])
        if not isinstance(model, MLPField):
            raise ConfigError(f"model.checkpoint: {m['checkpoint']} does not hold a field")
        return model
    field, trace = train_mlp(cfg, spec)
    log.info("trained field: final loss %.4f", trace.tail_mean())
    return field


def build_settings(cfg: dict) -> SamplerSettings:
    s = cfg["sampler"]
    schedule = ScheduleSpec(s["steps"], s["kind_x"], s["kind_z"], s["gamma_x"])
    return SamplerSettings(
        schedule=schedule, eta_x=s["eta_x"], eta_z=s["eta_z"], c_d=s["c_d"], beta_clamp=s["beta_clamp"],
        use_score=s["use_score"],
    )


def build_reward(cfg: dict):
    """``(RewardSpec, custom scorer or None)``."""
    r = cfg["reward"]
    try:
        terms = tuple(RewardTerm(t["name"], t.get("weight", 1.0), t.get("normalizer", 1.0)) for t in r["terms"])
    except ValueError as exc:
        raise ConfigError(f"reward.terms: {exc}") from None
    spec = RewardSpec(terms, r["contact_radius"], r["ipae_rho"])
    custom = None
    if "custom_command" in r:
        custom = ExternalScorer(r["custom_command"])
    elif r.get("custom") == "label_agreement":
        custom = label_agreement
    if any(t.name == "custom" for t in terms) and custom is None:
        raise ConfigError("reward.terms: a 'custom' term needs reward.custom or reward.custom_command")
    return spec, custom


def build_criterion(cfg: dict) -> SuccessCriterion:
    s = cfg["success"]
    return SuccessCriterion.toy_default(s["ipae_max"], s["min_contacts"])


def search_config(cfg: dict) -> SearchConfig:
    s = {k: v for k, v in cfg["search"].items() if k != "algorithm"}
    try:
        return SearchConfig(**s)
    except ValueError as exc:
        raise ConfigError(f"search: {exc}") from None


def codec_for(spec: TaskSpec) -> ToyCodec:
    return ToyCodec.identity(spec.d_z)


# ----------------------------------------------------------------------------
# running


@dataclass
class SearchRun:
    results: list
    truncated: bool
    counter: ForwardCounter
    success: SuccessSet
    curve: list


def _refine_pass(gen, scorer, reward_fn, scfg: SearchConfig, seed: int, pass_index: int) -> SearchResult:
    """Generate ``n_samples`` trajectories, then refine each one's labels."""
    anything = RewardScorer(scorer.ctx, scorer.spec, SuccessCriterion.anything(), scorer.custom)
    base = best_of_n(gen, anything, scfg.n_samples, seed=seed, pass_index=pass_index)
    success = SuccessSet()
    final = []
    for i, rec in enumerate(base.success):
        coords = rec.coords_array
        out = mutation_refine(coords, rec.labels, reward_fn, scfg.refine_iterations, seed=(seed, pass_index, i))
        scored = scorer(coords, out.labels, {})
        final.append((coords, out.labels, scored, out))
        if scored.passed:
            success.add(make_record(coords, out.labels, scored, "refine", pass_index, 0, i, "refined"))
    return SearchResult("refine", success, final, base.evaluations, rounds=1, extra={"base": base})


def run_search(
    cfg: dict, field=None, counter: Optional[ForwardCounter] = None, criterion: Optional[SuccessCriterion] = None
) -> SearchRun:
    """Run the configured algorithm for as many whole passes as the budget allows.

    ``criterion`` replaces the configured success predicates when given.
    """
    spec, ctx = build_target(cfg)
    field = build_field(cfg, spec) if field is None else field
    settings = build_settings(cfg)
    rspec, custom = build_reward(cfg)
    scorer = RewardScorer(ctx, rspec, criterion or build_criterion(cfg), custom)
    scfg = search_config(cfg)
    algo = cfg["search"]["algorithm"]
    seed = cfg["seed"]
    counter = counter if counter is not None else ForwardCounter()
    gen = FlowGenerator(field, ctx, settings, spec.binder_len, spec.d_z, codec_for(spec), counter)

    def reward_fn(coords, labels):
        return evaluate_reward(coords, labels, ctx, rspec, custom)[0]

    runners = {
        "bon": lambda p: best_of_n(gen, scorer, scfg.n_samples, seed=seed, pass_index=p),
        "beam": lambda p: beam_search(gen, scorer, scfg, seed=seed, pass_index=p),
        "fks": lambda p: fk_steering(gen, scorer, scfg, seed=seed, pass_index=p),
        "mcts": lambda p: mcts_search(gen, scorer, scfg, seed=seed, pass_index=p),
        "refine": lambda p: _refine_pass(gen, scorer, reward_fn, scfg, seed, p),
    }
    steps = settings.schedule.steps
    cost = pass_cost("bon" if algo == "refine" else algo, scfg, steps)
    if scfg.budget_evaluations is None:
        results, truncated = [runners[algo](0)], False
    else:
        results, truncated = run_with_budget(runners[algo], cost, scfg.budget_evaluations, scfg.budget_seconds)

    threshold = cfg["success"]["cluster_threshold"]
    success = SuccessSet()
    curve = []
    used = 0
    for res in results:
        success.extend(res.success)
        used += res.evaluations
        curve.append([used, count_unique_successes(success, threshold)])
    if used != counter.calls:
        raise RuntimeError(f"evaluation accounting mismatch: passes report {used}, counter saw {counter.calls}")
    return SearchRun(results, truncated, counter, success, curve)


def curve_csv(label: str, curve) -> str:
    lines = ["label,compute_unit,compute,unique_successes"]
    lines += [f"{label},{COMPUTE_UNIT},{c},{u}" for c, u in curve]
    return "\n".join(lines) + "\n"


def dump_pdbs(out: Path, success: SuccessSet, ctx: TargetContext) -> None:
    pdb_dir = out / "pdb"
    pdb_dir.mkdir(exist_ok=True)
    target = PointChain.from_coords(ctx.points, chain_id=1)
    for i, rec in enumerate(success):
        cx = Complex((PointChain.from_coords(rec.coords_array), target), binder_index=0)
        atomic_write(pdb_dir / f"success_{i:05d}.pdb", write_structure(cx))


def run_experiment(config, out_dir=None, force: bool = False, field=None) -> RunManifest:
    """Run one experiment from a config path or validated dict.

    When ``out_dir`` is given the manifest, success records and curve are
    written there; an existing manifest is an error unless ``force``.
    """
    cfg = load_config(config) if isinstance(config, (str, os.PathLike)) else validate(config)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if (out / "manifest.json").exists() and not force:
            raise FileExistsError(f"{out / 'manifest.json'} exists; manifests are not overwritten")
    t0 = time.perf_counter()
    run = run_search(cfg, field=field)
    wall = time.perf_counter() - t0
    threshold = cfg["success"]["cluster_threshold"]
    manifest = RunManifest(
        name=cfg["name"],
        algorithm=cfg["search"]["algorithm"],
        seed=cfg["seed"],
        config=cfg,
        evaluations=run.counter.calls,
        passes=len(run.results),
        truncated=run.truncated,
        cluster_threshold=threshold,
        curve=run.curve,
        wall_clock_seconds=wall,
        **summarize_successes(run.success, threshold),
    )
    if out is not None:
        atomic_write(out / "successes.jsonl", run.success.to_jsonl())
        atomic_write(out / "curve.csv", curve_csv(manifest.label, run.curve))
        if cfg["output"]["dump_pdb"]:
            dump_pdbs(out, run.success, build_target(cfg)[1])
        atomic_write(out / "manifest.json", manifest.to_json())
    return manifest
