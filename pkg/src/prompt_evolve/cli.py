"""Command-line entry point: ``prompt-evolve <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from typing import Sequence

from . import analysis
from .detector import ConfigurationError, Detection, TaskSpec, default_task_specs, heatmap_csv, pseudo_label
from .incremental import NonFiniteLossError, TrainingConfig, make_context, run_incremental
from .params import AlignmentError, CheckpointError, FusionConfig, atomic_write_text, fuse, load_checkpoint, \
    save_checkpoint
from .tensor import NonFiniteEvaluation, gradcheck_suite

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("prompt_evolve")


class ConfigError(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# manifest


MANIFEST_KEYS = {"training", "tasks"}


def parse_manifest(text: str, source: str = "<config>") -> tuple[TrainingConfig, list[TaskSpec]]:
    """Parse a run manifest ``{"training": {...}, "tasks": [...]}``; both keys optional."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    unknown = set(doc) - MANIFEST_KEYS
    if unknown:
        raise ConfigError(f"{source}: unknown field(s) {sorted(unknown)}")
    try:
        cfg = TrainingConfig.from_dict(doc.get("training", {}))
    except (TypeError, ValueError, ConfigurationError) as e:
        raise ConfigError(f"{source}: training: {e}") from None
    tasks_doc = doc.get("tasks")
    if tasks_doc is None:
        return cfg, default_task_specs()
    tasks = []
    for i, t in enumerate(tasks_doc):
        try:
            tasks.append(TaskSpec.from_dict(t))
        except KeyError as e:
            raise ConfigError(f"{source}: tasks[{i}]: missing field {e.args[0]!r}") from None
        except (TypeError, ValueError, ConfigurationError) as e:
            raise ConfigError(f"{source}: tasks[{i}]: {e}") from None
    if not tasks:
        raise ConfigError(f"{source}: tasks must not be empty")
    return cfg, tasks


def manifest_json(cfg: TrainingConfig, tasks: Sequence[TaskSpec]) -> str:
    return json.dumps({"training": cfg.to_dict(), "tasks": [t.to_dict() for t in tasks]}, indent=2, sort_keys=True) + "\n"


def load_manifest(path: str | None) -> tuple[TrainingConfig, list[TaskSpec]]:
    if path is None:
        return TrainingConfig(), default_task_specs()
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh.read(), path)


def apply_overrides(cfg: TrainingConfig, args) -> TrainingConfig:
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "tau", None) is not None:
        kw["tau_pseudo"] = args.tau
    if getattr(args, "lam", None) is not None:
        kw["lambda_sparse"] = args.lam
    top_k, top_l = getattr(args, "top_k", None), getattr(args, "top_l", None)
    if top_k is not None or top_l is not None:
        base = cfg.fusion or FusionConfig()
        kw["fusion"] = FusionConfig(base.top_k if top_k is None else top_k, base.top_l if top_l is None else top_l)
    try:
        return cfg.replace(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------------------
# output helpers


def _check_target(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


def _write(path: str, text: str, force: bool) -> None:
    _check_target(path, force)
    atomic_write_text(path, text)


class _StagedDir:
    """Build a directory next to its destination and rename it into place on success."""

    def __init__(self, dest: str, force: bool):
        self.dest = os.path.abspath(dest)
        _check_target(self.dest, force)
        parent = os.path.dirname(self.dest)
        os.makedirs(parent, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=".staging-", dir=parent)

    def __enter__(self) -> str:
        return self.tmp

    def __exit__(self, exc_type, *exc) -> None:
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return
        if os.path.exists(self.dest):
            shutil.rmtree(self.dest)
        os.replace(self.tmp, self.dest)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg, tasks = load_manifest(args.config)
    cfg = apply_overrides(cfg, args)
    with _StagedDir(args.out, args.force) as tmp:
        atomic_write_text(os.path.join(tmp, "config.json"), manifest_json(cfg, tasks))
        run_incremental(tasks, cfg, out_dir=tmp)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    prev, _, _ = load_checkpoint(args.prev)
    curr, task_id, _ = load_checkpoint(args.current)
    init, _, _ = load_checkpoint(args.init)
    try:
        cfg = FusionConfig(args.top_k, args.top_l)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    fused, audit = fuse(curr, prev, init, cfg)
    audit_path = args.audit or os.path.splitext(args.out)[0] + ".audit.json"
    _check_target(args.out, args.force)
    _check_target(audit_path, args.force)
    save_checkpoint(args.out, fused, task_id, "fused")
    atomic_write_text(audit_path, json.dumps(audit.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: v for k, v in audit.to_dict().items() if k in
                      ("preserved_prev", "preserved_curr", "averaged", "fallback", "total")}, sort_keys=True))
    return EXIT_OK


SWEEP_GRIDS = {
    "table7": ("fusion", None, "table7_fusion.csv"),
    "table8": ("lambda_sparse", analysis.LAMBDA_GRID, "table8_lambda.csv"),
    "fig3": ("hidden_dim", analysis.HIDDEN_DIM_GRID, "fig3_dim_sweep.csv"),
}


def _parse_values(parameter: str, raw: str) -> list:
    vals = []
    for tok in raw.split(","):
        tok = tok.strip()
        try:
            if parameter == "hidden_dim":
                vals.append(int(tok))
            elif parameter == "fusion":
                vals.append(None if tok == "none" else tuple(float(x) for x in tok.split("/")))
            else:
                vals.append(float(tok))
        except ValueError:
            raise ConfigError(f"bad value {tok!r} for {parameter}") from None
    return vals


def cmd_sweep(args) -> int:
    cfg, tasks = load_manifest(args.config)
    cfg = apply_overrides(cfg, args)
    if args.grid:
        parameter, values, fname = SWEEP_GRIDS[args.grid]
        spec = analysis.table7_sweep(cfg, tasks) if values is None else analysis.SweepSpec(parameter, values, cfg, tasks)
    else:
        if not (args.parameter and args.values):
            raise ConfigError("sweep needs --grid or both --parameter and --values")
        try:
            spec = analysis.SweepSpec(args.parameter, _parse_values(args.parameter, args.values), cfg, tasks)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        fname = f"sweep_{args.parameter}.csv"
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, fname)
    _check_target(path, args.force)
    rows = analysis.run_sweep(spec)
    atomic_write_text(path, analysis.sweep_csv(rows))
    print(f"wrote {path} ({len(rows)} rows)")
    return EXIT_OK


def _load_run(run_dir: str):
    cfg, tasks = load_manifest(os.path.join(run_dir, "config.json"))
    ctx = make_context(tasks, cfg)
    last = tasks[-1].task_id
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    path = os.path.join(ckpt_dir, f"task{last}_fused.json")
    if not os.path.exists(path):
        path = os.path.join(ckpt_dir, f"task{last}_trained.json")
    pv, _, _ = load_checkpoint(path)
    ctx.detector.load_prompt_params(pv)
    return ctx


def cmd_analyze(args) -> int:
    run_dir = args.ammd or args.heatmap
    if not run_dir:
        raise ConfigError("analyze needs --ammd RUN_DIR and/or --heatmap RUN_DIR")
    out = args.out or run_dir
    os.makedirs(out, exist_ok=True)
    ctx = _load_run(run_dir)
    if args.ammd:
        path = os.path.join(out, "fig6_ammd.csv")
        _write(path, analysis.ammd_csv(analysis.ammd_per_layer(ctx)), args.force)
        print(f"wrote {path}")
    if args.heatmap:
        path = os.path.join(out, "fig1_heatmap.csv")
        _write(path, heatmap_csv(analysis.run_heatmap(ctx)), args.force)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = gradcheck_suite(seed=args.seed or 0, tol=args.tol)
    failing = []
    for name, rep in reports.items():
        print(f"{name:16s} max_rel_error={rep.max_rel_error:.3e} {'ok' if rep.passed else 'FAIL'}")
        if not rep.passed:
            failing.append(name)
    if failing:
        raise NumericFailure(f"gradient check failed for: {', '.join(failing)}")
    return EXIT_OK


def _detections_from_json(items) -> list[Detection]:
    out = []
    for i, d in enumerate(items):
        try:
            out.append(Detection(float(d["score"]), int(d["class_id"]), tuple(float(x) for x in d["box"])))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"detection {i}: {e!r}") from None
    return out


def cmd_pseudo_label(args) -> int:
    with open(args.detections, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.detections}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    tau = 0.65 if args.tau is None else args.tau
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    nested = bool(doc) and isinstance(doc[0], list)
    scenes = doc if nested else [doc]
    labels = [[{"class_id": p.class_id, "box": list(p.box), "score": p.score}
               for p in pseudo_label(_detections_from_json(s), tau)] for s in scenes]
    text = json.dumps(labels if nested else labels[0], indent=2) + "\n"
    if args.out:
        _write(args.out, text, args.force)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prompt-evolve", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON run manifest")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    def knobs(sp):
        sp.add_argument("--top-k", type=float, dest="top_k")
        sp.add_argument("--top-l", type=float, dest="top_l")
        sp.add_argument("--tau", type=float)
        sp.add_argument("--lambda", type=float, dest="lam")

    sp = sub.add_parser("train", help="run the incremental protocol")
    common(sp)
    knobs(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("fuse", help="fuse two prompt checkpoints")
    sp.add_argument("--prev", required=True)
    sp.add_argument("--current", required=True)
    sp.add_argument("--init", required=True)
    sp.add_argument("--top-k", type=float, dest="top_k", default=0.7)
    sp.add_argument("--top-l", type=float, dest="top_l", default=0.3)
    sp.add_argument("--out", required=True)
    sp.add_argument("--audit", help="audit JSON path (default: next to --out)")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("sweep", help="hyperparameter sweep")
    common(sp)
    knobs(sp)
    sp.add_argument("--grid", choices=sorted(SWEEP_GRIDS))
    sp.add_argument("--parameter", choices=analysis.SWEEP_PARAMETERS)
    sp.add_argument("--values", help="comma-separated; fusion values as k/l or none")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("analyze", help="prompt diversity analyses of a finished run")
    sp.add_argument("--ammd", metavar="RUN_DIR")
    sp.add_argument("--heatmap", metavar="RUN_DIR")
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("pseudo-label", help="filter a detections JSON by score")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_pseudo_label)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLossError, NonFiniteEvaluation, NumericFailure, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ConfigurationError, AlignmentError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
