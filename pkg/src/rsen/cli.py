"""Command-line entry point: ``rsen synth|train|eval|map|gradcheck``.

Exit codes: 0 ok, 2 input or configuration error, 3 numerical divergence,
4 gradient check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import basenet, data, ensemble, evaluation
from .basenet import CheckpointError
from .ensemble import TrainConfig

logger = logging.getLogger("rsen")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 2, 3, 4
GRADCHECK_TOLERANCE = 1e-4

# keys a run config accepts besides the TrainConfig fields
RUN_DEFAULTS = {
    "cube": None,
    "labels": None,
    "out": "rsen-out",
    "checkpoint": "checkpoint.rsen",
    "repetitions": 1,
    "eval_every": 0,
}
_OPTIONAL_INT = {"fixed_q", "iters_per_epoch"}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------


def default_run_config() -> dict:
    cfg = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    cfg.update(RUN_DEFAULTS)
    return cfg


def _coerce(key: str, raw: str, default):
    text = raw.strip()
    try:
        if key in _OPTIONAL_INT or key in ("cube", "labels"):
            if text.lower() in ("", "none"):
                return None
            return int(text) if key in _OPTIONAL_INT else text
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def parse_assignments(lines, cfg: dict, source: str) -> dict:
    """Apply ``key = value`` lines (``#`` starts a comment) onto ``cfg``."""
    defaults = default_run_config()
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        cfg[key] = _coerce(key, value, defaults[key])
    return cfg


def load_run_config(path=None, overrides=()) -> dict:
    cfg = default_run_config()
    if path is not None:
        text = Path(path).read_text()
        parse_assignments(text.splitlines(), cfg, str(path))
    parse_assignments(overrides, cfg, "--set")
    return cfg


def format_run_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        lines.append(f"{key} = {'none' if value is None else str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**{name: cfg[name] for name in TrainConfig.field_names()})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cube, labels = data.generate_synthetic(args.rows, args.cols, args.bands, args.k, args.seed,
                                           noise_std=args.noise, separation=args.separation)
    prefix = Path(args.out)
    if prefix.parent != Path("."):
        prefix.parent.mkdir(parents=True, exist_ok=True)
    data.save_cube(cube, f"{prefix}.hsc")
    data.save_labels(labels, f"{prefix}.labels")
    print(f"wrote {prefix}.hsc ({cube.rows}x{cube.cols}x{cube.bands}) and {prefix}.labels (k={args.k})")
    return EXIT_OK


def _load_scene(cube_path, labels_path):
    if cube_path is None or labels_path is None:
        raise ConfigError("cube and labels paths are required")
    cube = data.load_cube(cube_path)
    labels = data.load_labels(labels_path)
    if labels.shape != (cube.rows, cube.cols):
        raise ConfigError(f"label map {labels.shape} does not match cube {cube.rows}x{cube.cols}")
    return cube, labels


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    for flag, key in (("epochs", "epochs"), ("unlabeled", "n_unlabeled"),
                      ("repetitions", "repetitions"), ("seed", "seed"),
                      ("cube", "cube"), ("labels", "labels"), ("out", "out")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key} = {value}")
    if args.no_filter:
        overrides.append("use_filter = false")
    cfg = load_run_config(args.config, overrides)
    config = train_config(cfg)
    if cfg["repetitions"] < 1:
        raise ConfigError("repetitions must be >= 1")

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(format_run_config(cfg))

    cube, labels = _load_scene(cfg["cube"], cfg["labels"])
    k = int(labels.max())
    features, transform = data.prepare_scene(cube, config.p, config.w)
    R = cfg["repetitions"]

    def suffix(r):
        return "" if R == 1 else f"_rep{r}"

    def save(r, result):
        ckpt = Path(cfg["checkpoint"])
        ckpt = out / (ckpt.stem + suffix(r) + ckpt.suffix)
        basenet.save_checkpoint(ckpt, result.state.student, result.state.teacher, transform)
        (out / f"history{suffix(r)}.csv").write_text(result.history.to_csv())
        print(f"run {r} seed {result.seed}: OA {result.report.oa:.4f} kappa {result.report.kappa:.4f} "
              f"AA {result.report.aa:.4f} ({result.report.runtime:.1f}s)")

    try:
        agg = _repeat(config, features, labels, k, R, cfg["eval_every"], save)
    except ensemble.DivergenceError as exc:
        diag = out / "divergence.json"
        snapshot = {key: _jsonable(v) for key, v in exc.snapshot.items()}
        snapshot["repetition"] = getattr(exc, "repetition", None)
        diag.write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
        print(f"error: {exc}; diagnostics in {diag}", file=sys.stderr)
        return EXIT_DIVERGED
    evaluation.write_metrics(agg, out / "metrics.csv")
    if R > 1:
        print(f"mean OA {agg.mean['oa']:.4f} +- {agg.std['oa']:.4f} over {R} runs")
    return EXIT_OK


def _repeat(config, features, labels, k, R, eval_every, on_run):
    # repeat_experiment without per-epoch evaluation; run_once directly when it is requested
    if not eval_every:
        return evaluation.repeat_experiment(config, features, labels, k, R, config.seed, on_run=on_run)
    reports, seeds = [], []
    for r in range(R):
        try:
            result = evaluation.run_once(config, features, labels, k, config.seed + r, eval_every=eval_every)
        except Exception as exc:
            exc.repetition = r
            raise
        on_run(r, result)
        reports.append(result.report)
        seeds.append(result.seed)
    return evaluation.aggregate(reports, seeds)


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _checkpoint_features(ckpt_path, cube):
    dims, _, teacher, transform = basenet.load_checkpoint(ckpt_path)
    if transform is None:
        raise ConfigError(f"{ckpt_path} carries no preprocessing transform")
    if cube.bands != dims.n:
        raise ConfigError(f"checkpoint expects {dims.n} bands but the cube has {cube.bands}")
    return dims, teacher, data.apply_transform(cube, transform, dims.w)


def cmd_eval(args) -> int:
    cube, labels = _load_scene(args.cube, args.labels)
    dims, teacher, features = _checkpoint_features(args.checkpoint, cube)
    flat = labels.reshape(-1)
    if flat.max() > dims.k:
        raise ConfigError(f"label map has class {flat.max()} but the checkpoint has {dims.k} classes")
    idx = np.flatnonzero(flat > 0)
    pred = ensemble.predict_all(teacher, features, idx)
    report = evaluation.metrics(evaluation.confusion(pred, flat[idx], dims.k))
    agg = evaluation.aggregate([report], [""])
    if args.out:
        evaluation.write_metrics(agg, args.out)
    print(f"OA {report.oa:.4f} kappa {report.kappa:.4f} AA {report.aa:.4f} on {idx.size} pixels")
    return EXIT_OK


def cmd_map(args) -> int:
    cube = data.load_cube(args.cube)
    dims, teacher, features = _checkpoint_features(args.checkpoint, cube)
    if args.labels:
        labels = data.load_labels(args.labels)
        if labels.shape != (cube.rows, cube.cols):
            raise ConfigError(f"label map {labels.shape} does not match cube {cube.rows}x{cube.cols}")
    else:
        labels = np.ones((cube.rows, cube.cols), dtype=np.int64)
    pred = ensemble.predict_all(teacher, features, np.arange(cube.rows * cube.cols))
    evaluation.render_map(pred.reshape(cube.rows, cube.cols), labels, args.out,
                          mask_background=not args.no_mask and bool(args.labels))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck

    worst = 0.0
    for seed in range(args.seed, args.seed + args.seeds):
        report = gradcheck(seed, corrupt=args.corrupt_gradient)
        print(report.format())
        worst = max(worst, report.max_error)
    ok = worst <= GRADCHECK_TOLERANCE
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_GRADCHECK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled scene")
    p.add_argument("--rows", type=int, default=64)
    p.add_argument("--cols", type=int, default=64)
    p.add_argument("--bands", type=int, default=16)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--separation", type=float, default=data.DEFAULT_SEPARATION)
    p.add_argument("--out", default="scene", help="output prefix; writes PREFIX.hsc and PREFIX.labels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and evaluate on a labeled scene")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--cube")
    p.add_argument("--labels")
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--unlabeled", type=int, help="size of the unlabeled pool (0 = supervised only)")
    p.add_argument("--no-filter", action="store_true", help="keep every unlabeled sample in the consistency loss")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint's teacher on a labeled scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("map", help="render a classification map as PPM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", help="reference labels; unlabeled pixels are drawn black")
    p.add_argument("--no-mask", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("gradcheck", help="finite-difference check of backprop")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    p.add_argument("--corrupt-gradient", action="store_true", help="perturb the analytic gradient (negative control)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    raw = os.environ.get("RSEN_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RSEN_THREADS must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(n, 1))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, data.FormatError, data.ParameterError, evaluation.InputError,
            CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
