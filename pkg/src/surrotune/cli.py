"""Command line: ``surrotune {gen,run,eval,echo-blackbox}``.

Settings come from defaults, then a JSON ``--config`` file, then flags (the
last wins).  Exit codes: 0 success, 2 configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import data as datamod
from . import nn
from . import pipelines as pl
from .blackbox.external import ExternalBlackBox, serve_echo
from .blackbox.simbm3d import SimBM3D
from .blackbox.space import ParamSpace, bm3d_space
from .report import write_outputs

log = logging.getLogger("surrotune")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3

PRESETS = {
    "benchmark": {"count": 260, "height": 64, "width": 64, "test_count": 60, "noise_levels": [0.05, 0.15], "seed": 0},
    "smoke": {"count": 20, "height": 32, "width": 32, "test_count": 5, "noise_levels": [0.05, 0.15], "seed": 0},
}
# training overrides that make the smoke preset finish in seconds
SMOKE_TRAIN = {"epochs": 5, "surrogate_epochs": 3, "param_epochs": 2, "warmup_min": 2, "warmup_max": 5, "gate_images": 2}

DEFAULTS = {
    "method": "algo2",
    "seed": 0,
    "out": None,
    "blackbox": "sim",
    "external_cmd": None,
    "external_timeout": 60.0,
    "dataset": {"preset": "benchmark"},
    "train": {},
}


class ConfigError(Exception):
    def __init__(self, problems):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


# -- config ---------------------------------------------------------------------

def _load_file(path) -> dict:
    if not path:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return obj


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(args) -> dict:
    """Defaults, then the config file, then command-line flags."""
    cfg = _merge(DEFAULTS, _load_file(args.config))
    flags = {"method": args.method, "seed": args.seed, "out": args.out, "blackbox": args.blackbox,
             "external_cmd": args.external_cmd}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    train = dict(cfg.get("train") or {})
    if args.epochs is not None:
        train["epochs"] = args.epochs
    if args.batch is not None:
        train["batch_size"] = args.batch
    cfg["train"] = train
    if getattr(args, "data", None):
        cfg["dataset"] = {"path": args.data}
    elif getattr(args, "preset", None):
        cfg["dataset"] = {"preset": args.preset}
    return cfg


def train_config(cfg: dict) -> pl.TrainConfig:
    known = {f.name: f for f in fields(pl.TrainConfig)}
    train = cfg.get("train") or {}
    if not isinstance(train, dict):
        raise ConfigError("train must be an object")
    ds = cfg.get("dataset") or {}
    base = dict(SMOKE_TRAIN) if ds.get("preset") == "smoke" else {}
    problems = [f"unknown train key {k!r}" for k in train if k not in known]
    kw = {}
    for k, v in {**base, **train}.items():
        if k not in known:
            continue
        default = getattr(pl.TrainConfig, k, None)
        try:
            if isinstance(default, tuple):
                kw[k] = tuple(int(x) for x in v)
            elif isinstance(default, bool) or isinstance(default, str):
                kw[k] = v
            elif isinstance(default, int):
                if isinstance(v, bool) or int(v) != v:
                    raise ValueError
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        except (TypeError, ValueError):
            problems.append(f"train.{k}: bad value {v!r}")
    kw["seed"] = cfg.get("seed", 0)
    tc = pl.TrainConfig(**kw)
    problems += tc.validate()
    if problems:
        raise ConfigError(problems)
    return tc


def validate_run_config(cfg: dict, need_method: bool = True) -> None:
    problems = []
    if need_method and cfg.get("method") not in pl.METHODS:
        problems.append(f"method must be one of {', '.join(pl.METHODS)}")
    seed = cfg.get("seed")
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        problems.append("seed must be an unsigned 64-bit integer")
    if not cfg.get("out"):
        problems.append("an output directory (--out) is required")
    if cfg.get("blackbox") not in ("sim", "external"):
        problems.append("blackbox must be 'sim' or 'external'")
    if cfg.get("blackbox") == "external" and not cfg.get("external_cmd"):
        problems.append("external black box requires --external-cmd")
    ds = cfg.get("dataset") or {}
    if "path" in ds:
        if not (Path(ds["path"]) / datamod.MANIFEST).is_file():
            problems.append(f"dataset directory {ds['path']} has no {datamod.MANIFEST}")
    elif ds.get("preset") not in PRESETS:
        problems.append(f"dataset needs a path or a preset in {sorted(PRESETS)}")
    try:
        train_config(cfg)
    except ConfigError as exc:
        problems += exc.problems
    if problems:
        raise ConfigError(problems)


def gen_spec(cfg: dict) -> dict:
    ds = cfg.get("dataset") or {}
    spec = dict(PRESETS[ds.get("preset", "benchmark")]) if ds.get("preset", "benchmark") in PRESETS else {}
    spec.update({k: v for k, v in ds.items() if k != "preset"})
    return spec


def validate_gen_spec(spec: dict) -> list:
    problems = []
    for key in ("count", "height", "width", "test_count", "seed"):
        v = spec.get(key)
        if isinstance(v, bool) or not isinstance(v, int) or v < 0:
            problems.append(f"{key} must be a non-negative integer")
    for key in ("height", "width"):
        v = spec.get(key)
        if isinstance(v, int) and (v <= 0 or v % 4):
            problems.append(f"{key} must be a positive multiple of 4, got {v}")
    levels = spec.get("noise_levels")
    if not isinstance(levels, list) or not levels or not all(isinstance(s, (int, float)) and s >= 0 for s in levels):
        problems.append("noise_levels must be a non-empty list of non-negative numbers")
    c, t = spec.get("count"), spec.get("test_count")
    if isinstance(c, int) and isinstance(t, int) and not 0 < t < c:
        problems.append("need 0 < test_count < count")
    if spec.get("image_format", "f32t") not in ("f32t", "ppm"):
        problems.append("image_format must be 'f32t' or 'ppm'")
    return problems


def build_dataset(spec: dict) -> datamod.Dataset:
    ds = datamod.gen_synthetic(spec["count"], spec["height"], spec["width"], tuple(spec["noise_levels"]), spec["seed"])
    return datamod.split(ds, test_fraction=spec["test_count"] / spec["count"])


def load_data(cfg: dict) -> datamod.Dataset:
    ds = cfg.get("dataset") or {}
    if "path" in ds:
        return datamod.load_dataset(ds["path"])
    return build_dataset(gen_spec(cfg))


def make_blackbox(cfg: dict):
    if cfg["blackbox"] == "external":
        return ExternalBlackBox(cfg["external_cmd"], bm3d_space(), float(cfg.get("external_timeout", 60.0)))
    return SimBM3D()


# -- commands ----------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _merge(DEFAULTS, _load_file(args.config))
    ds = dict(cfg.get("dataset") or {})
    if args.preset:
        ds = {"preset": args.preset}
    for key in ("count", "height", "width", "test_count"):
        if getattr(args, key) is not None:
            ds[key] = getattr(args, key)
    if args.seed is not None:
        ds["seed"] = args.seed
    if args.image_format:
        ds["image_format"] = args.image_format
    cfg["dataset"] = ds
    spec = gen_spec(cfg)
    problems = validate_gen_spec(spec)
    out = args.out or cfg.get("out")
    if not out:
        problems.append("an output directory (--out) is required")
    if problems:
        raise ConfigError(problems)
    dataset = build_dataset(spec)
    try:
        datamod.save_dataset(dataset, out, spec.get("image_format", "f32t"))
    except OSError as exc:
        raise ConfigError(f"cannot write dataset to {out}: {exc.strerror or exc}") from None
    counts = dataset.counts()
    print(f"wrote {len(dataset)} pairs ({counts['train']} train / {counts['val']} val / {counts['test']} test) "
          f"{spec['height']}x{spec['width']}x3 sigma={spec['noise_levels']} seed={spec['seed']} to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    validate_run_config(cfg)
    tc = train_config(cfg)
    dataset = load_data(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    bb = make_blackbox(cfg)
    try:
        artifacts, report = pl.run_method(cfg["method"], dataset, bb, tc)
    except pl.TrainingAborted as exc:
        if exc.report is not None:
            write_outputs(out, exc.report, cfg, status="aborted", error=str(exc))
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    finally:
        bb.close()
    for name, net in artifacts.items():
        nn.save_model(net, out / f"{name}.mdl")
    write_outputs(out, report, cfg)
    agg = report.aggregates
    print(f"{report.method}: test PSNR {agg.get('test_psnr', float('nan')):.3f} dB, "
          f"SSIM {agg.get('test_ssim', float('nan')):.4f}, black-box calls {sum(report.bb_calls.values())}, "
          f"{report.wall_clock:.1f}s -> {out}")
    return EXIT_OK


def parse_params(text: str, space: ParamSpace) -> tuple:
    """``cff=10.5,n1=8,...`` or bare values in declaration order."""
    items = [t.strip() for t in text.split(",") if t.strip()]
    if items and all("=" in t for t in items):
        named = dict(t.split("=", 1) for t in items)
        unknown = sorted(set(named) - set(space.names))
        if unknown or len(named) != space.P:
            raise ValueError("parameter space mismatch")
        items = [named[n] for n in space.names]
    if len(items) != space.P:
        raise ValueError("parameter space mismatch")
    return tuple(float(v) if d.values is None else _as_value(v, d.values) for v, d in zip(items, space.dims))


def _as_value(text: str, values) -> object:
    v = float(text)
    return int(v) if v == int(v) and all(isinstance(x, int) for x in values) else v


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    cfg["method"] = "eval"
    validate_run_config(cfg, need_method=False)
    if bool(args.model) == bool(args.params):
        raise ConfigError("give exactly one of --model or --params")
    tc = train_config(cfg)
    dataset = load_data(cfg)
    bb = make_blackbox(cfg)
    try:
        if args.model:
            try:
                artifact = nn.load_model(args.model, expect={"kind": nn.ParamLearnerNet.kind})
            except (OSError, nn.ModelFormatError) as exc:
                raise ConfigError(f"cannot load {args.model}: {exc}") from None
        else:
            try:
                artifact = parse_params(args.params, bb.space)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        t0 = time.perf_counter()
        report = pl.RunReport(method="eval", seed=tc.seed, space=bb.space.describe(), config=asdict(tc),
                              ssim_mode=tc.ssim_config().mode)
        pairs = dataset.subset("train") + dataset.subset("test")
        try:
            report.rows, report.aggregates = pl.evaluate(artifact, pairs, bb, tc.ssim_config(), report)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not isinstance(artifact, nn.ParamLearnerNet):
            report.params = list(artifact)
        report.wall_clock = time.perf_counter() - t0
    finally:
        bb.close()
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_outputs(out, report, cfg)
    print(f"eval: test PSNR {report.aggregates.get('test_psnr', float('nan')):.3f} dB -> {out}")
    return EXIT_OK


def cmd_echo(args) -> int:
    return serve_echo()


# -- entry point ---------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surrotune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    _common(g)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--count", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--test-count", dest="test_count", type=int)
    g.add_argument("--image-format", dest="image_format", choices=("f32t", "ppm"))
    g.set_defaults(func=cmd_gen)

    for name, func, helptext in (("run", cmd_run, "optimise parameters with one method"),
                                 ("eval", cmd_eval, "evaluate saved parameters or a learner")):
        r = sub.add_parser(name, help=helptext)
        _common(r)
        r.add_argument("--method", choices=pl.METHODS) if name == "run" else None
        r.add_argument("--blackbox", choices=("sim", "external"))
        r.add_argument("--external-cmd", dest="external_cmd")
        r.add_argument("--epochs", type=int)
        r.add_argument("--batch", type=int)
        r.add_argument("--data", help="dataset directory written by gen")
        r.add_argument("--preset", choices=sorted(PRESETS), help="generate the dataset in memory")
        if name == "eval":
            r.add_argument("--model", help="parameter learner bundle (.mdl)")
            r.add_argument("--params", help="concrete parameters, e.g. cff=10.5,n1=8,cspace=1,wtransform=0,neighborhood=7")
            r.set_defaults(method=None)
        r.set_defaults(func=func)

    e = sub.add_parser("echo-blackbox", help="loopback server speaking the black-box protocol on stdin/stdout")
    e.set_defaults(func=cmd_echo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except datamod.DatasetError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, TimeoutError, OSError) as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
