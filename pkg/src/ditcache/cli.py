"""``ditcache`` command line: train-toy, calibrate, schedule, infer, bench, compare.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import tensor as T
from .bench import MissingProfileError, bench_sweep, compare_cache_vs_reduced
from .calibration import CalibrationConfig, CalibrationError, CaptureBranch, calibrate
from .executor import cached_infer
from .model import CacheMissError, ModelConfig, load_checkpoint, save_checkpoint
from .sampler import SamplerConfig
from .schedule import (DEFAULT_CAP, CacheSchedule, DegenerateDenominatorError, ErrorProfile, Granularity,
                       ScheduleError, Strategy, alpha_for_fraction, apply_strategy, schedule_stats)
from .toy import ToyTaskConfig, TrainingDiverged, build_and_train, make_eval_samples, write_loss_curve

log = logging.getLogger("ditcache")

DOMAIN_ERRORS = (ValueError, ArithmeticError, LookupError, RuntimeError, OSError)

# Disjoint seed streams per use.
CALIB_PURPOSE = "calibration"
EVAL_PURPOSE = "eval"
INFER_PURPOSE = "infer"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_atomic(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def write_json(path, obj) -> None:
    write_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def provenance(**inputs) -> dict:
    return {"tool": "ditcache", "tool_version": __version__, "rng": T.RNG_ALGORITHM,
            "inputs": {k: v for k, v in inputs.items() if v is not None}}


def _weights_checksum(path) -> str:
    path = Path(path)
    return sha256_file(path / "manifest.json" if path.is_dir() else path)


def _sampler(args, nfe=None) -> SamplerConfig:
    return SamplerConfig(nfe=nfe if nfe is not None else args.nfe, cfg_strength=args.cfg,
                         sway_coeff=args.sway, seed=args.seed)


def _echo(args) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    print(json.dumps({"command": args.command, "config": resolved}, default=str, sort_keys=True), file=sys.stderr)


# -- subcommands ---------------------------------------------------------------------


def cmd_train_toy(args) -> int:
    cfg = ModelConfig(args.depth, args.width, args.heads, args.ffn_mult, args.seq_len, args.in_dim)
    lr = args.lr if args.lr is not None else (0.1 if args.optimizer == "sgd" else 2e-3)
    task = ToyTaskConfig(train_steps=args.steps, batch=args.batch, lr=lr, seed=args.seed,
                         optimizer=args.optimizer)
    try:
        result = build_and_train(cfg, task)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return 1
    out = Path(args.out)
    write_loss_curve(out / "loss_curve.csv", result.curve, header={"tool_version": __version__, "seed": task.seed})
    save_checkpoint(result.model, out, extra={
        "provenance": provenance(),
        "task": asdict(task),
        "heldout_loss_before": result.heldout_before,
        "heldout_loss_after": result.heldout_after,
    })
    print(f"trained {task.train_steps} steps: held-out loss {result.heldout_before:.4f} -> "
          f"{result.heldout_after:.4f}; checkpoint in {out}")
    return 0


def _shape_check(profile: ErrorProfile) -> dict:
    """Whether the first transition out-errs the mid-trajectory median (transitions 8-24)."""
    lo, hi = 8, min(24, profile.nfe - 2)
    if hi < lo:
        return {"applicable": False}
    hits = [bool(e[0] > np.median(e[lo:hi + 1])) for e in profile.errors.values()]
    frac = sum(hits) / len(hits)
    return {"applicable": True, "first_exceeds_mid_median_fraction": frac, "meets_expected_shape": frac >= 0.6}


def cmd_calibrate(args) -> int:
    model = load_checkpoint(args.weights)
    samples = make_eval_samples(model.config, args.samples, args.seed, CALIB_PURPOSE)
    config = CalibrationConfig(args.samples, _sampler(args), CaptureBranch(args.capture))
    profile = calibrate(model, samples, config)
    data = profile.to_json()
    shape = _shape_check(profile)
    if shape.get("applicable") and not shape["meets_expected_shape"]:
        log.warning("error curve shape flag: first transition exceeds mid-trajectory median for only "
                    "%.0f%% of layers", 100 * shape["first_exceeds_mid_median_fraction"])
    data["shape_check"] = shape
    data["provenance"] = provenance(weights=_weights_checksum(args.weights))
    data["provenance"].update(model_checksum=model.checksum(), sampler=asdict(config.sampler),
                              capture_branch=config.capture_branch.value,
                              seeds={"seed": args.seed, "purpose": CALIB_PURPOSE,
                                     "indices": list(range(args.samples))})
    write_json(args.out, data)
    print(f"profile over {args.samples} samples at nfe={args.nfe} -> {args.out}")
    return 0


def cmd_schedule(args) -> int:
    profile = ErrorProfile.from_json(json.loads(Path(args.profile).read_text()))
    if (args.alpha is None) == (args.target_fraction is None):
        raise ValueError("give exactly one of --alpha or --target-fraction")
    alpha = args.alpha
    if alpha is None:
        alpha = alpha_for_fraction(profile, args.target_fraction, args.cap, args.strategy, args.granularity)
    sch = apply_strategy(profile, alpha, args.cap, Strategy(args.strategy), Granularity(args.granularity))
    sch.provenance = provenance(profile=sha256_file(args.profile))
    if args.target_fraction is not None:
        sch.provenance["target_fraction"] = args.target_fraction
    write_json(args.out, sch.to_json())
    st = schedule_stats(sch)
    print(f"alpha={alpha:.6g} cached fraction {st['cached_fraction']:.3f} -> {args.out}")
    return 0


def _load_schedule(path) -> CacheSchedule:
    return CacheSchedule.from_json(json.loads(Path(path).read_text()))


def cmd_infer(args) -> int:
    model = load_checkpoint(args.weights)
    schedule = _load_schedule(args.schedule) if args.schedule else None
    if schedule is not None and schedule.nfe != args.nfe:
        raise ScheduleError(f"schedule nfe {schedule.nfe} does not match --nfe {args.nfe}")
    noise, cond = make_eval_samples(model.config, 1, args.seed, INFER_PURPOSE)[0]
    if args.noise:
        noise = T.load_dten(args.noise)
    if args.cond:
        cond = T.load_dten(args.cond)
    x, stats = cached_infer(model, noise, cond, _sampler(args), schedule)
    payload = T.encode_dten(x)
    write_atomic(args.out, payload)
    if args.stats:
        data = stats.to_json()
        data["provenance"] = provenance(weights=_weights_checksum(args.weights),
                                        schedule=sha256_file(args.schedule) if args.schedule else None)
        data["provenance"]["output_sha256"] = hashlib.sha256(payload).hexdigest()
        write_json(args.stats, data)
    print(f"nfe={stats.nfe} computes={stats.sublayer_computes} hits={stats.cache_hits} "
          f"wall={stats.wall_ms:.1f}ms -> {args.out}")
    return 0


def _input_header(args, profiles=()) -> dict:
    prov = provenance(weights=_weights_checksum(args.weights))
    prov["inputs"].update({Path(p).name: sha256_file(p) for p in profiles})
    return {"tool_version": __version__, "inputs": json.dumps(prov["inputs"], sort_keys=True)}


def cmd_bench(args) -> int:
    model = load_checkpoint(args.weights)
    profiles = {}
    for path in args.profile:
        prof = ErrorProfile.from_json(json.loads(Path(path).read_text()))
        profiles[prof.nfe] = prof
    nfe_list = args.nfe or sorted(profiles, reverse=True)
    for nfe in nfe_list:
        if nfe not in profiles:
            raise MissingProfileError(f"no calibration profile for nfe={nfe}; run calibrate at that nfe first")
    if (args.alpha is None) == (args.target_fraction is None):
        raise ValueError("give exactly one of --alpha or --target-fraction")
    if args.alpha is not None:
        alphas = args.alpha
    else:
        alphas = {nfe: [alpha_for_fraction(profiles[nfe], f, args.cap, args.strategy, args.granularity)
                        for f in args.target_fraction] for nfe in nfe_list}
    samples = make_eval_samples(model.config, args.samples, args.seed, EVAL_PURPOSE)
    report = bench_sweep(model, samples, nfe_list, alphas, Strategy(args.strategy), profiles,
                         _sampler(args, nfe_list[0]), args.cap, Granularity(args.granularity))
    report.header.update(_input_header(args, args.profile))
    report.header["eval_seeds"] = f"seed={args.seed} purpose={EVAL_PURPOSE} n={args.samples}"
    write_atomic(args.out, report.to_csv())
    print(report.to_table())
    return 0


def cmd_compare(args) -> int:
    model = load_checkpoint(args.weights)
    samples = make_eval_samples(model.config, args.samples, args.seed, EVAL_PURPOSE)
    reports = []
    for path in args.schedule:
        sch = _load_schedule(path)
        rep = compare_cache_vs_reduced(model, samples, sch.nfe, sch, _sampler(args, sch.nfe))
        rep.header.update(_input_header(args, [path]))
        reports.append(rep)
        print(rep.to_table())
        print()
    write_atomic(args.out, "\n".join(r.to_csv() for r in reports))
    if args.json:
        write_json(args.json, {"reports": [r.to_json() for r in reports]})
    return 0 if all(r.compute_parity for r in reports) else 1


# -- parser --------------------------------------------------------------------------


def _add_sampler_flags(p, nfe_default=32):
    p.add_argument("--nfe", type=int, default=nfe_default)
    p.add_argument("--cfg", type=float, default=2.0, help="CFG strength")
    p.add_argument("--sway", type=float, default=-1.0, help="sway sampling coefficient")
    p.add_argument("--seed", type=int, default=0)


def _add_schedule_flags(p):
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=Strategy.UNIFIED_ATTN.value)
    p.add_argument("--cap", type=int, default=DEFAULT_CAP, help="max consecutive cached steps per layer")
    p.add_argument("--granularity", choices=[g.value for g in Granularity], default=Granularity.TYPE.value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ditcache", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="train the toy DiT with flow matching")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, help="learning rate (default 0.1 for sgd, 2e-3 for adam)")
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    d = ModelConfig()
    for name in ("depth", "width", "heads", "ffn_mult", "seq_len", "in_dim"):
        p.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(d, name))
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("calibrate", help="measure per-layer transition errors")
    p.add_argument("--weights", required=True)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--capture", choices=[c.value for c in CaptureBranch], default=CaptureBranch.COND.value)
    p.add_argument("--out", required=True)
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("schedule", help="build a cache schedule from a profile")
    p.add_argument("--profile", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--target-fraction", type=float, help="pick alpha to cache this fraction of steps")
    p.add_argument("--out", required=True)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("infer", help="sample once, optionally under a cache schedule")
    p.add_argument("--weights", required=True)
    p.add_argument("--schedule")
    p.add_argument("--noise", help="DTEN noise tensor (default: drawn from --seed)")
    p.add_argument("--cond", help="DTEN condition tensor (default: drawn from --seed)")
    p.add_argument("--out", required=True, help="output DTEN")
    p.add_argument("--stats", help="RunStats JSON")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="threshold sweep against uncached baselines")
    p.add_argument("--weights", required=True)
    p.add_argument("--profile", nargs="+", required=True, help="one profile per NFE")
    p.add_argument("--nfe", type=int, nargs="*", help="NFE values (default: every profile)")
    p.add_argument("--alpha", type=float, nargs="+")
    p.add_argument("--target-fraction", type=float, nargs="+")
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--cfg", type=float, default=2.0)
    p.add_argument("--sway", type=float, default=-1.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True, help="CSV report")
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("compare", help="cached run vs fewer uncached steps at equal compute")
    p.add_argument("--weights", required=True)
    p.add_argument("--schedule", nargs="+", required=True)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--cfg", type=float, default=2.0)
    p.add_argument("--sway", type=float, default=-1.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True, help="CSV report")
    p.add_argument("--json", help="also write the reports as JSON")
    p.set_defaults(func=cmd_compare)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _echo(args)
    try:
        if args.threads:
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (ScheduleError, CacheMissError, CalibrationError, DegenerateDenominatorError, MissingProfileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DOMAIN_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())
