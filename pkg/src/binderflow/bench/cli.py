"""Command-line entry point: ``binderflow <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from binderflow.bench.config import ConfigError, load_config, validate, with_overrides
from binderflow.search.common import ALGORITHMS

log = logging.getLogger("binderflow")


def _config(args) -> dict:
    cfg = load_config(args.config) if args.config else validate({})
    if getattr(args, "seed", None) is not None:
        cfg = with_overrides(cfg, seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    from binderflow.bench.runner import train_mlp
    from binderflow.denoiser.train import save_checkpoint

    cfg = with_overrides(_config(args), model={"kind": "mlp"})
    if args.steps is not None:
        cfg = with_overrides(cfg, model={"train": {"steps": args.steps}})
    field, trace = train_mlp(cfg)
    save_checkpoint(args.out, field)
    print(json.dumps({"checkpoint": str(args.out), "steps": len(trace.losses), "final_loss": trace.tail_mean()}))
    return 0


def cmd_sample(args) -> int:
    from binderflow.bench.runner import atomic_write, build_target, dump_pdbs, run_search
    from binderflow.search.common import SuccessCriterion

    cfg = with_overrides(_config(args), search={"algorithm": "bon", "n_samples": args.n})
    run = run_search(cfg, criterion=SuccessCriterion.anything())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "samples.jsonl", run.success.to_jsonl())
    if args.pdb:
        dump_pdbs(out, run.success, build_target(cfg)[1])
    print(json.dumps({"samples": len(run.success), "evaluations": run.counter.calls}))
    return 0


def cmd_search(args) -> int:
    from binderflow.bench.runner import run_experiment

    cfg = _config(args)
    search = {"algorithm": args.algo}
    if args.budget is not None:
        search["budget_evaluations"] = args.budget
    cfg = with_overrides(cfg, search=search)
    if args.dump_pdb:
        cfg = with_overrides(cfg, output={"dump_pdb": True})
    m = run_experiment(cfg, args.out, force=args.force)
    print(
        json.dumps(
            {
                "algorithm": m.algorithm,
                "evaluations": m.evaluations,
                "passes": m.passes,
                "successes": m.success_count,
                "unique_successes": m.unique_successes,
                "truncated": m.truncated,
            }
        )
    )
    return 0


def cmd_pipeline(args) -> int:
    from binderflow.bench.pipeline import PipelineParams, run_pipeline, synthetic_inputs

    params = PipelineParams(args.contact_dist, args.min_contacts, args.max_binder, args.max_total, args.seed)
    if args.input:
        inputs = [(Path(p).stem, Path(p).read_text()) for p in args.input]
    else:
        inputs = synthetic_inputs(args.seed, args.synthetic)
    manifest = run_pipeline(inputs, args.out, params, force=args.force)
    print(json.dumps({"dimers": manifest["dimers"], "crops": manifest["crops"]}))
    return 0


def cmd_bench(args) -> int:
    from binderflow.bench.curves import emit_curves
    from binderflow.bench.runner import run_experiment

    cfg = load_config(args.config)
    sweep = cfg.pop("sweep", {})
    algorithms = sweep.get("algorithms", [cfg["search"]["algorithm"]])
    seeds = sweep.get("seeds", [cfg["seed"]])
    out = Path(args.out)
    manifests = []
    for algo in algorithms:
        for seed in seeds:
            run_cfg = with_overrides(cfg, seed=seed, search={"algorithm": algo})
            m = run_experiment(run_cfg, out / f"{algo}-seed{seed}", force=args.force)
            log.info("%s seed %d: %d unique successes in %d evaluations", algo, seed, m.unique_successes, m.evaluations)
            manifests.append(m)
    csv_path, svg_path = emit_curves(manifests, out)
    print(json.dumps({"runs": len(manifests), "csv": str(csv_path), "svg": str(svg_path)}))
    return 0


def _manifest_paths(paths):
    for p in map(Path, paths):
        if p.is_dir():
            yield from sorted(p.rglob("manifest.json"))
        else:
            yield p


def cmd_plot(args) -> int:
    from binderflow.bench.curves import emit_curves
    from binderflow.bench.runner import RunManifest

    manifests = [RunManifest.from_json(p.read_text()) for p in _manifest_paths(args.manifests)]
    csv_path, svg_path = emit_curves(manifests, args.out, stem=args.stem)
    print(json.dumps({"curves": len(manifests), "csv": str(csv_path), "svg": str(svg_path)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    from binderflow.datapipe import DIMER_CONTACT_DIST, DIMER_MIN_CONTACTS, MAX_BINDER, MAX_TOTAL

    p = argparse.ArgumentParser(prog="binderflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", type=Path, help="TOML experiment config (defaults used when omitted)")
        sp.add_argument("--seed", type=int)
        return sp

    sp = with_config(sub.add_parser("train", help="train a field on toy data and save a checkpoint"))
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("sample", help="draw unsteered samples"))
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--pdb", action="store_true", help="also write one PDB file per sample")
    sp.set_defaults(func=cmd_sample)

    sp = with_config(sub.add_parser("search", help="run one search algorithm under a budget"))
    sp.add_argument("--algo", choices=ALGORITHMS, required=True)
    sp.add_argument("--budget", type=int, help="forward-call budget; one pass when omitted")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--dump-pdb", action="store_true")
    sp.add_argument("--force", action="store_true", help="overwrite an existing manifest")
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("pipeline", help="extract dimers and crop interfaces")
    sp.add_argument("--input", nargs="*", help="PDB files; random synthetic complexes when omitted")
    sp.add_argument("--synthetic", type=int, default=10, help="number of synthetic complexes")
    sp.add_argument("--contact-dist", type=float, default=DIMER_CONTACT_DIST)
    sp.add_argument("--min-contacts", type=int, default=DIMER_MIN_CONTACTS)
    sp.add_argument("--max-binder", type=int, default=MAX_BINDER)
    sp.add_argument("--max-total", type=int, default=MAX_TOTAL)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("bench", help="sweep algorithms and seeds, then plot scaling curves")
    sp.add_argument("--config", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("plot", help="render curves from run manifests")
    sp.add_argument("manifests", nargs="+", help="manifest files or directories searched recursively")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--stem", default="curves")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileExistsError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
