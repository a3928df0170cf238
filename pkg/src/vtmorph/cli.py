"""``vtmorph`` command line: train, register, evaluate, synth, gradcheck, faces, config-reference.

Exit codes: 0 success, 1 verification failure, 2 invalid input, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as vdata
from . import faces
from . import gradsuite
from . import metrics as vmetrics
from .training import TrainConfig, TrainingAborted, register_batch, train

log = logging.getLogger("vtmorph")

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_ABORT = 0, 1, 2, 3


class InputError(Exception):
    """Bad flags, config or input files; maps to exit code 2."""


# config resolution -------------------------------------------------------------------------------

SYNTH_DEFAULTS = {"warp_range": vdata.WarpRange().format(), "test_fraction": 0.2}


def _fields():
    """Every config key with its type tag and default, in reference order."""
    out = {}
    for f in dataclasses.fields(TrainConfig):
        out[f.name] = ("train", str(f.type), f.default)
    for f in dataclasses.fields(vmetrics.MetricConfig):
        out[f.name] = ("metric", str(f.type), f.default)
    out["warp_range"] = ("synth", "str", SYNTH_DEFAULTS["warp_range"])
    out["test_fraction"] = ("synth", "float", SYNTH_DEFAULTS["test_fraction"])
    return out


def _coerce(key: str, text: str, type_tag: str):
    text = text.strip()
    try:
        if type_tag == "bool":
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if type_tag == "int":
            return int(text)
        if type_tag == "float":
            return float(text)
        if type_tag == "float | None":
            return None if text.lower() in ("", "none") else float(text)
        if type_tag == "tuple":
            return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise InputError(f"config key {key!r}: cannot parse {text!r} as {type_tag}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment. Unknown or repeated keys are rejected."""
    fields = _fields()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise InputError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise InputError(f"{source}:{lineno}: key {key!r} given twice")
        out[key] = _coerce(key, value, fields[key][1])
    return out


def resolve_config(config_path=None, overrides=()) -> dict:
    """Defaults, then the config file, then ``--set key=value`` overrides."""
    fields = _fields()
    resolved = {k: v[2] for k, v in fields.items()}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        resolved.update(parse_config_text(path.read_text(), str(path)))
    resolved.update(parse_config_text("\n".join(overrides), "--set"))
    return resolved


def split_config(resolved: dict) -> tuple[TrainConfig, vmetrics.MetricConfig, dict]:
    fields = _fields()
    groups = {"train": {}, "metric": {}, "synth": {}}
    for k, v in resolved.items():
        groups[fields[k][0]][k] = v
    try:
        return TrainConfig(**groups["train"]), vmetrics.MetricConfig(**groups["metric"]), groups["synth"]
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from exc


def format_config(resolved: dict) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        if isinstance(v, bool):
            return "true" if v else "false"
        return "none" if v is None else str(v)

    return "\n".join(f"{k} = {fmt(v)}" for k, v in resolved.items()) + "\n"


def config_reference() -> str:
    lines = ["# vtmorph config keys (key = default). Sections: train, metric, synth."]
    section = None
    for key, (group, tag, default) in _fields().items():
        if group != section:
            lines.append(f"\n# [{group}]")
            section = group
        lines.append(f"{format_config({key: default}).strip():40s} # {tag}")
    return "\n".join(lines) + "\n"


def _log_config(resolved: dict, out_dir: Path | None = None) -> None:
    text = format_config(resolved)
    log.info("resolved config:\n%s", text.rstrip())
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.txt").write_text(text)


# commands ---------------------------------------------------------------------------------------


def _load_manifest(path):
    if not Path(path).is_file():
        raise InputError(f"manifest not found: {path}")
    try:
        return vdata.load_manifest(path)
    except vdata.ManifestError as exc:
        raise InputError(str(exc)) from exc


def cmd_train(args) -> int:
    resolved = resolve_config(args.config, args.set)
    if args.seed is not None:
        resolved["seed"] = args.seed
    if args.steps is not None:
        resolved["steps"] = args.steps
    cfg, _, _ = split_config(resolved)
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    _log_config(resolved, out)
    try:
        ckpt = train(manifest, cfg, out, resume_from=args.resume, log_every=args.log_every)
    except TrainingAborted as exc:
        log.error("%s", exc)
        return EXIT_ABORT
    except (vdata.ManifestError, ad.CheckpointError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    print(f"checkpoint: {ckpt}")
    print(f"loss log: {out / 'losses.csv'}")
    return EXIT_OK


def cmd_register(args) -> int:
    resolved = resolve_config(args.config, args.set)
    _, metric_cfg, _ = split_config(resolved)
    if not Path(args.checkpoint).is_file():
        raise InputError(f"checkpoint not found: {args.checkpoint}")
    manifest = _load_manifest(args.manifest)
    pairs = manifest.pairs if args.split == "all" else manifest.subset(args.split).pairs
    if not pairs:
        raise InputError(f"manifest has no pairs in split {args.split!r}")
    out = Path(args.out)
    _log_config(resolved, out)
    try:
        results = register_batch(args.checkpoint, pairs, out, batch_size=args.batch_size,
                                 continue_on_error=args.continue_on_error, metric_config=metric_cfg,
                                 write_generated=not args.no_generated)
    except ad.CheckpointError as exc:
        raise InputError(f"bad checkpoint {args.checkpoint}: {exc}") from exc
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    failed = [r for r in results if r.error]
    print(f"registered {len(results) - len(failed)} of {len(results)} pairs -> {out / 'results.csv'}")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_evaluate(args) -> int:
    resolved = resolve_config(args.config, args.set)
    _, metric_cfg, _ = split_config(resolved)
    for d in (args.before, args.after):
        if not Path(d).is_dir():
            raise InputError(f"not a directory: {d}")
    _log_config(resolved)
    report = vmetrics.evaluate_pairs(args.before, args.after, metric_cfg)
    if report.unmatched:
        raise InputError(f"{len(report.unmatched)} unmatched pair(s): {', '.join(report.unmatched)}")
    if not report.pair_ids:
        raise InputError(f"no pairs found in {args.before} and {args.after}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    table = report.table()
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_synth(args) -> int:
    resolved = resolve_config(args.config, args.set)
    if args.seed is not None:
        resolved["seed"] = args.seed
    if args.warp_range is not None:
        resolved["warp_range"] = args.warp_range
    _, _, synth = split_config(resolved)
    try:
        warp_range = vdata.WarpRange.parse(synth["warp_range"])
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.n < 1:
        raise InputError(f"--n must be positive, got {args.n}")
    base_dir = Path(args.base_dir)
    if not base_dir.is_dir():
        raise InputError(f"base directory not found: {base_dir}")
    bases = vdata.load_base_dir(base_dir)
    if not bases:
        raise InputError(f"no PNG base images in {base_dir}")
    _log_config(resolved)
    try:
        manifest = vdata.synth_corpus(bases, args.n, args.out, warp_range, seed=resolved["seed"],
                                      test_fraction=synth["test_fraction"])
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    print(f"wrote {len(manifest)} pairs -> {Path(args.out) / 'manifest.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = args.ops or None
    try:
        if args.corrupt:
            if args.corrupt not in gradsuite.REGISTRY:
                raise InputError(f"unknown op {args.corrupt!r}; choose from {sorted(gradsuite.REGISTRY)}")
            with ad.corrupt_gradient(gradsuite.TAPE_OP[args.corrupt]):
                result = gradsuite.run_suite(args.seeds, ops, args.threshold)
        else:
            result = gradsuite.run_suite(args.seeds, ops, args.threshold)
    except KeyError as exc:
        raise InputError(str(exc)) from exc
    for name, err in result.worst.items():
        print(f"{'PASS' if err < result.threshold else 'FAIL'} {name:18s} max rel err {err:.3e}")
    op, err = result.worst_op
    print(f"worst op: {op} ({err:.3e}); {len(result.worst)} ops x {result.seeds} seeds in {result.seconds:.1f}s")
    if not result.passed:
        print(f"FAILED: {', '.join(result.failures)}")
        return EXIT_VERIFY
    return EXIT_OK


def cmd_faces(args) -> int:
    if args.subjects < 1 or args.frames < 1:
        raise InputError("--subjects and --frames must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for subject, frame, img in faces.render_subjects(args.subjects, args.frames, args.size, args.seed):
        vdata.write_image(out / f"{subject}_{frame:03d}.png", img)
        n += 1
    print(f"wrote {n} base faces -> {out}")
    return EXIT_OK


def cmd_config_reference(args) -> int:
    print(config_reference(), end="")
    return EXIT_OK


# parser -----------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vtmorph", description="Visible/thermal face registration.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("train", help="train the GANs and spatial transformer")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--log-every", type=int, default=50)
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("register", help="register every manifest pair with a trained checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=("all", "train", "test"), default="all")
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--continue-on-error", action="store_true")
    sp.add_argument("--no-generated", action="store_true", help="skip writing V2T images")
    with_config(sp)
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("evaluate", help="score pairs before and after registration")
    sp.add_argument("--before", required=True)
    sp.add_argument("--after", required=True)
    sp.add_argument("--out", required=True)
    with_config(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("synth", help="build a synthetic misaligned corpus from base images")
    sp.add_argument("--base-dir", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--warp-range", help='"0" or translation,rotation_deg,scale_lo,scale_hi,shear')
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    with_config(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--ops", nargs="*")
    sp.add_argument("--threshold", type=float, default=gradsuite.THRESHOLD)
    sp.add_argument("--corrupt", metavar="OP", help="test hook: scale OP's backward by 1.5")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("faces", help="render procedural base faces (<subject>_<frame>.png)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--subjects", type=int, default=50)
    sp.add_argument("--frames", type=int, default=5)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_faces)

    sp = sub.add_parser("config-reference", help="print every config key with its default")
    sp.set_defaults(func=cmd_config_reference)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FloatingPointError as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
