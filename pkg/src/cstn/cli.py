"""Command line front end: ``cstn <command> ...``.

Every stage reads and writes files, so the pipeline can run step by step::

    cstn phantom --count 4 --out data/hr
    cstn downsample --in data/hr --target 256 --out data/lr
    cstn infer --ckpt run/best.cstck --in data/lr --out data/sr
    cstn smwi --in data/sr --out data/smwi
    cstn eval --ckpt run/best.cstck --data data/hr --protocol 256

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
``CSTN_THREADS`` caps the BLAS thread pool (default: all cores).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path


from . import cst
from .model import CheckpointError, CSTNConfig, config_text, enhance, load_checkpoint, parse_config_text
from .mri import (export_png, generate_phantom, load_volume, save_volume, simulate_lowres, volume_stems)
from .smwi import SMWIParams, reconstruct_smwi
from .tensor import ShapeError
from .train import NumericError, TrainConfig, phantom_seed, run_dir_name

log = logging.getLogger("cstn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

NOT_FROM_PAPER = "not from paper"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config

def _eval_items(protocol=256, metrics=("mse", "mae", "ssim")):
    return [("eval.protocol", str(protocol)), ("eval.metrics", ",".join(metrics))]


def default_items() -> dict:
    items = {}
    for group in (CSTNConfig().to_items(), TrainConfig().to_items(), SMWIParams().to_items(), _eval_items()):
        items.update(dict(group))
    return items


KNOWN_KEYS = frozenset(default_items())


def merge_config(path=None, overrides=()) -> dict:
    """Defaults <- config file <- ``key=value`` overrides; unknown keys are rejected."""
    items = default_items()
    given = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            given.update(parse_config_text(text))
        except ValueError as exc:
            raise UsageError(f"{path}: {exc}") from exc
    for ov in overrides:
        key, sep, value = ov.partition("=")
        if not sep:
            raise UsageError(f"override {ov!r} is not key=value")
        given[key.strip()] = value.strip()
    unknown = sorted(set(given) - KNOWN_KEYS)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    items.update(given)
    return items


def configs_from(items: dict):
    try:
        return (CSTNConfig.from_items(items), TrainConfig.from_items(items), SMWIParams.from_items(items))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config value: {exc}") from exc


def effective_text(items: dict) -> str:
    return config_text(sorted(items.items()))


# ---------------------------------------------------------------- helpers

def _inputs(path) -> list:
    """Volume stems named by ``path``: a directory of volumes or one stem."""
    p = Path(path)
    if p.is_dir():
        stems = volume_stems(p)
        if not stems:
            raise FileNotFoundError(f"no volumes (*.hdr) in {p}")
        return stems
    stem = str(p)
    for suffix in (".mag.cst", ".phase.cst", ".hdr"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    if not Path(stem + ".hdr").exists():
        raise FileNotFoundError(f"no volume at {stem} (expected {stem}.hdr)")
    return [stem]


def _outputs(src: str, stems: list, out) -> list:
    """Pair each input stem with an output stem; directories map name to name."""
    out = Path(out)
    if Path(src).is_dir() or len(stems) > 1:
        out.mkdir(parents=True, exist_ok=True)
        return [str(out / Path(s).name) for s in stems]
    out.parent.mkdir(parents=True, exist_ok=True)
    return [str(out)]


def _tes(text) -> tuple:
    try:
        tes = tuple(float(t) for t in str(text).split(",") if t.strip())
    except ValueError as exc:
        raise UsageError(f"--tes expects comma separated numbers, got {text!r}") from exc
    if not tes:
        raise UsageError("--tes needs at least one echo time")
    return tes


def _defaults_help(pairs) -> str:
    lines = [f"  {k} = {v} ({NOT_FROM_PAPER})" for k, v in pairs]
    return "defaults:\n" + "\n".join(lines)


# ---------------------------------------------------------------- commands

def cmd_phantom(args) -> int:
    tes = _tes(args.tes)
    if args.count < 1 or args.size < 32:
        raise UsageError("--count must be >= 1 and --size >= 32")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        vol, maps = generate_phantom(phantom_seed(args.seed, i), args.size, args.size, tes, noise_std=args.noise)
        stem = out / f"phantom_{i:03d}"
        save_volume(stem, vol)
        for name, arr in maps.items():
            cst.save(f"{stem}.{name}.cst", arr)
        log.info("wrote %s", stem)
    return EXIT_OK


def _target(text) -> int:
    try:
        n = int(text)
    except ValueError as exc:
        raise UsageError(f"--target expects an integer size, got {text!r}") from exc
    if n < 1:
        raise UsageError("--target must be positive")
    return n


def cmd_downsample(args) -> int:
    n = _target(args.target)
    stems = _inputs(args.input)
    for src, dst in zip(stems, _outputs(args.input, stems, args.out)):
        vol = load_volume(src)
        if n > min(vol.shape):
            raise ShapeError(f"{src}: target {n} exceeds image size {vol.shape}")
        save_volume(dst, simulate_lowres(vol, n, n))
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg, weights = load_checkpoint(args.ckpt)
    stems = _inputs(args.input)
    for src, dst in zip(stems, _outputs(args.input, stems, args.out)):
        vol = load_volume(src)
        if vol.num_echoes != cfg.in_echoes:
            raise ShapeError(f"{src}: volume has {vol.num_echoes} echoes, checkpoint expects {cfg.in_echoes}")
        save_volume(dst, enhance(vol, cfg, weights))
    return EXIT_OK


def cmd_smwi(args) -> int:
    overrides = [f"smwi.{k}={v}" for k, v in (("kernel", args.kernel), ("cutoff", args.cutoff),
                                             ("power", args.power), ("combine", args.combine),
                                             ("sign", args.sign)) if v is not None]
    items = merge_config(args.config, overrides + list(args.set or ()))
    params = configs_from(items)[2]
    stems = _inputs(args.input)
    for src, dst in zip(stems, _outputs(args.input, stems, args.out)):
        img = reconstruct_smwi(load_volume(src), params)
        cst.save(dst + ".smwi.cst", img.data)
        with open(dst + ".smwi.txt", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(config_text(params.to_items()))
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    items = merge_config(args.config, args.set or ())
    model_cfg, train_cfg, _ = configs_from(items)
    run_dir = Path(args.out) if args.out else Path(args.runs) / run_dir_name(train_cfg.seed)
    try:
        run_dir.mkdir(parents=True, exist_ok=False)
    except FileExistsError as exc:
        raise FileExistsError(f"run directory {run_dir} already exists") from exc
    (run_dir / "config.txt").write_text(effective_text(items), encoding="utf-8")
    result = train(train_cfg, model_cfg, run_dir)
    print(f"run directory: {run_dir}")
    if result.losses:
        print(f"final loss {result.losses[-1]:.6f}  best validation {result.best_val:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import EvalConfig, evaluate

    items = merge_config(args.config, args.set or ())
    if args.protocol is not None:
        items["eval.protocol"] = str(args.protocol)
    try:
        protocol = int(items["eval.protocol"])
        eval_cfg = EvalConfig(protocol=protocol, scans=_inputs(args.data), smwi=configs_from(items)[2],
                              metrics=tuple(m for m in items["eval.metrics"].split(",") if m))
    except ValueError as exc:
        if isinstance(exc, ShapeError):
            raise
        raise UsageError(str(exc)) from exc
    bad = set(eval_cfg.metrics) - {"mse", "mae", "ssim"}
    if bad:
        raise UsageError(f"unknown metric(s): {', '.join(sorted(bad))}")
    result = evaluate(args.ckpt, eval_cfg)
    table = result.table()
    print(table, end="")
    if args.out:
        from .metrics import reports_csv
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(table, encoding="utf-8")
        (out / "cstn.csv").write_text(reports_csv(list(result.cstn.values())), encoding="utf-8")
        (out / "bicubic.csv").write_text(reports_csv(list(result.baseline.values())), encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed=args.seed, network=not args.ops_only,
                        progress=lambda r: print(r.line(), flush=True))
    worst = max(r.max_rel_err for r in results)
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results)} checks, worst max_rel_err {worst:.3e}")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_export_png(args) -> int:
    src = str(args.input)
    if src.endswith(".cst"):
        img = cst.load(src)
        if img.ndim == 3:
            img = img[args.echo - 1]
    else:
        vol = load_volume(_inputs(src)[0])
        if not 1 <= args.echo <= vol.num_echoes:
            raise UsageError(f"--echo must lie in 1..{vol.num_echoes}")
        e = vol.echoes[args.echo - 1]
        img = e.phase if args.phase else e.magnitude
    if img.ndim != 2:
        raise ShapeError(f"cannot export an array of shape {img.shape} as an image")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    lo, hi = export_png(img, args.out)
    print(f"window min={lo!r} max={hi!r}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="cstn", description="Multi-echo MRI enhancement with a complex Swin transformer network.",
                formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate seeded multi-echo head phantoms", formatter_class=fmt,
                       epilog=_defaults_help([("--seed", 0), ("--count", 1), ("--noise", 0.0)])
                       + "\n  --size = 384 (matrix size of the reference data)"
                       + "\n  --tes = 14,27,40 (echo times in ms of the reference protocol)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--size", type=int, default=384)
    s.add_argument("--tes", default="14,27,40", help="comma separated echo times in ms")
    s.add_argument("--noise", type=float, default=0.0, help="complex Gaussian noise std")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("downsample", help="simulate a low-resolution scan by k-space truncation",
                       formatter_class=fmt, epilog="no defaults; --target 192 and 256 are the two protocol points")
    s.add_argument("--in", dest="input", required=True, help="volume stem or directory")
    s.add_argument("--target", required=True, help="target matrix size (192, 256 or any N)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_downsample)

    s = sub.add_parser("infer", help="enhance low-resolution volumes with a checkpoint", formatter_class=fmt,
                       epilog="output size comes from the checkpoint's model.target_size")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("smwi", help="susceptibility map-weighted image of each volume", formatter_class=fmt,
                       epilog=_defaults_help(SMWIParams().to_items()))
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="key=value file; smwi.* keys are used")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--kernel", type=int)
    s.add_argument("--cutoff", type=float)
    s.add_argument("--power", type=int)
    s.add_argument("--combine", choices=("average", "rss"))
    s.add_argument("--sign", type=int, choices=(1, -1))
    s.set_defaults(func=cmd_smwi)

    s = sub.add_parser("train", help="train on generated phantom pairs", formatter_class=fmt,
                       epilog=_defaults_help(CSTNConfig().to_items() + TrainConfig().to_items()))
    s.add_argument("--config", help="key=value file with model.* and train.* keys")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--out", help="run directory (must not exist)")
    s.add_argument("--runs", default="runs", help="parent of timestamped run directories")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint and the bicubic baseline", formatter_class=fmt,
                       epilog=_defaults_help(_eval_items() + SMWIParams().to_items()))
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help="directory (or stem) of full-resolution volumes")
    s.add_argument("--protocol", type=int, choices=(192, 256))
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--out", help="directory for table.txt, cstn.csv, bicubic.csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op",
                       formatter_class=fmt, epilog=_defaults_help([("--seed", 0), ("eps", 1e-3), ("tolerance", 1e-3)]))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ops-only", action="store_true", help="skip the whole-network check")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("export-png", help="8-bit PNG with min-max windowing", formatter_class=fmt,
                       epilog=_defaults_help([("--echo", 1)]))
    s.add_argument("--in", dest="input", required=True, help=".cst image or volume stem")
    s.add_argument("--out", required=True)
    s.add_argument("--echo", type=int, default=1)
    s.add_argument("--phase", action="store_true", help="export the phase instead of the magnitude")
    s.set_defaults(func=cmd_export_png)
    return p


def _thread_limit():
    raw = os.environ.get("CSTN_THREADS", "").strip()
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"CSTN_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise UsageError(f"CSTN_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("cstn: a command is required (see cstn --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        threads = _thread_limit()
        if threads is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, cst.FormatError, CheckpointError, ShapeError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
