"""Threshold sweeps and the cached-vs-fewer-steps comparison.

Quality is measured as divergence of the generated tensor from the uncached
run at the same step count. That is an output-space proxy only; it says
nothing about perceptual quality.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from threadpoolctl import threadpool_limits

from .executor import cached_infer, divergence
from .model import DiT
from .sampler import SamplerConfig
from .schedule import (DEFAULT_CAP, CacheSchedule, ErrorProfile, Granularity, ScheduleError, Strategy,
                       apply_strategy, schedule_stats)

PROXY_NOTE = "divergence = output-space distance to the same-NFE uncached run (proxy, not perceptual quality)"

Samples = Sequence[tuple[np.ndarray, np.ndarray]]


class MissingProfileError(LookupError):
    pass


@dataclass
class SweepRow:
    nfe: int
    label: str
    alpha: Optional[float]
    cached_fraction: float
    compute_fraction: float
    mean_wall_ms: float
    speedup: float
    rel_l2: float
    rel_l1: float
    max_abs: float


@dataclass
class SweepReport:
    header: dict
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in self.header.items():
            buf.write(f"# {k}: {v}\n")
        w = csv.writer(buf)
        names = [f.name for f in fields(SweepRow)]
        w.writerow(names)
        for row in self.rows:
            w.writerow([_fmt(getattr(row, n)) for n in names])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"# {k}: {v}" for k, v in self.header.items()]
        lines.append(f"{'NFE':>4} {'schedule':<16} {'cached':>7} {'wall ms':>9} {'speedup':>8} {'rel_l2':>9} {'max_abs':>9}")
        for r in self.rows:
            lines.append(f"{r.nfe:>4} {r.label:<16} {r.cached_fraction:>7.3f} {r.mean_wall_ms:>9.2f} "
                         f"{r.speedup:>7.2f}x {r.rel_l2:>9.5f} {r.max_abs:>9.5f}")
        return "\n".join(lines)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def _run_arm(model: DiT, samples: Samples, sampler: SamplerConfig, schedule: Optional[CacheSchedule],
             refs: Optional[list] = None, warmup: bool = True):
    """Run every sample once (after a discarded warm-up); returns outputs, stats and mean divergence."""
    with threadpool_limits(limits=1):
        if warmup:
            cached_infer(model, *samples[0], sampler, schedule)
        outs, stats = [], []
        for noise, cond in samples:
            x, st = cached_infer(model, noise, cond, sampler, schedule)
            outs.append(x)
            stats.append(st)
    if refs is None:
        div = {"rel_l2": 0.0, "rel_l1": 0.0, "max_abs": 0.0}
    else:
        per = [divergence(x, r) for x, r in zip(outs, refs)]
        div = {k: float(np.mean([d[k] for d in per])) for k in per[0]}
    return outs, stats, div


def bench_sweep(
    model: DiT,
    eval_samples: Samples,
    nfe_list: Sequence[int],
    alphas: Union[Sequence[float], Mapping[int, Sequence[float]]],
    strategy: Strategy,
    profiles: Mapping[int, ErrorProfile],
    sampler: SamplerConfig = SamplerConfig(),
    cap: int = DEFAULT_CAP,
    granularity: Granularity = Granularity.TYPE,
) -> SweepReport:
    """Baseline plus one cached row per ``(nfe, alpha)``.

    ``alphas`` is either one list used for every NFE or a per-NFE mapping.
    """
    for nfe in nfe_list:
        if nfe not in profiles:
            raise MissingProfileError(f"no calibration profile for nfe={nfe}; run calibrate at that nfe first")
    report = SweepReport(header={
        "strategy": Strategy(strategy).value,
        "cap": cap,
        "granularity": Granularity(granularity).value,
        "cfg_strength": sampler.cfg_strength,
        "sway_coeff": sampler.sway_coeff,
        "samples": len(eval_samples),
        "note": PROXY_NOTE,
    })
    for nfe in nfe_list:
        cfg = SamplerConfig(nfe, sampler.cfg_strength, sampler.sway_coeff, sampler.seed)
        refs, base_stats, base_div = _run_arm(model, eval_samples, cfg, None)
        base_ms = float(np.mean([s.wall_ms for s in base_stats]))
        report.rows.append(SweepRow(nfe, "no-cache", None, 0.0, 1.0, base_ms, 1.0, **base_div))
        nfe_alphas = alphas[nfe] if isinstance(alphas, Mapping) else alphas
        for alpha in nfe_alphas:
            sch = apply_strategy(profiles[nfe], alpha, cap, strategy, granularity)
            st = schedule_stats(sch)
            _, stats, div = _run_arm(model, eval_samples, cfg, sch, refs)
            ms = float(np.mean([s.wall_ms for s in stats]))
            report.rows.append(SweepRow(nfe, f"alpha={alpha:.4g}", float(alpha), st["cached_fraction"],
                                        st["compute_fraction"], ms, base_ms / ms, **div))
    report.rows.sort(key=lambda r: (-r.nfe, r.cached_fraction, r.alpha or 0.0))
    return report


@dataclass
class CompareArm:
    name: str
    nfe: int
    cached: bool
    compute_steps_per_layer: dict
    sublayer_computes: float
    mean_wall_ms: float
    rel_l2: float
    rel_l1: float
    max_abs: float


@dataclass
class CompareReport:
    nfe: int
    cached_per_layer: int
    reduced_nfe: int
    compute_parity: bool
    arms: list
    header: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in {**self.header, "compute_parity": self.compute_parity}.items():
            buf.write(f"# {k}: {v}\n")
        w = csv.writer(buf)
        w.writerow(["arm", "nfe", "cached", "compute_steps_per_layer", "sublayer_computes", "mean_wall_ms",
                    "rel_l2", "rel_l1", "max_abs"])
        for a in self.arms:
            steps = sorted(set(a.compute_steps_per_layer.values()))
            w.writerow([a.name, a.nfe, a.cached, "/".join(map(str, steps)), _fmt(a.sublayer_computes),
                        _fmt(a.mean_wall_ms), _fmt(a.rel_l2), _fmt(a.rel_l1), _fmt(a.max_abs)])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"# {k}: {v}" for k, v in self.header.items()]
        lines.append(f"# compute parity: {'yes' if self.compute_parity else 'NO'}")
        lines.append(f"{'arm':<22} {'NFE':>4} {'steps/layer':>11} {'wall ms':>9} {'rel_l2':>9} {'max_abs':>9}")
        for a in self.arms:
            steps = "/".join(map(str, sorted(set(a.compute_steps_per_layer.values()))))
            lines.append(f"{a.name:<22} {a.nfe:>4} {steps:>11} {a.mean_wall_ms:>9.2f} {a.rel_l2:>9.5f} {a.max_abs:>9.5f}")
        return "\n".join(lines)


def compare_cache_vs_reduced(model: DiT, eval_samples: Samples, nfe: int, schedule: CacheSchedule,
                             sampler: SamplerConfig = SamplerConfig()) -> CompareReport:
    """Cached run at ``nfe`` vs an uncached run at ``nfe - c``, both scored against uncached ``nfe``."""
    if schedule.nfe != nfe:
        raise ScheduleError(f"schedule nfe {schedule.nfe} != requested nfe {nfe}")
    counts = set(schedule_stats(schedule)["cached_per_layer"].values())
    if len(counts) != 1:
        raise ScheduleError(f"cached step counts differ across layers {sorted(counts)}; comparison is ill-defined")
    c = counts.pop()
    if c >= nfe:
        raise ScheduleError("schedule caches every step")
    full = SamplerConfig(nfe, sampler.cfg_strength, sampler.sway_coeff, sampler.seed)
    reduced = SamplerConfig(nfe - c, sampler.cfg_strength, sampler.sway_coeff, sampler.seed)
    refs, _, _ = _run_arm(model, eval_samples, full, None, warmup=False)
    arms = []
    for name, cfg, sch in ((f"{nfe} NFE cached", full, schedule), (f"{nfe - c} NFE no-cache", reduced, None)):
        _, stats, div = _run_arm(model, eval_samples, cfg, sch, refs)
        arms.append(CompareArm(
            name=name, nfe=cfg.nfe, cached=sch is not None,
            compute_steps_per_layer=stats[0].compute_steps_per_layer,
            sublayer_computes=float(np.mean([s.sublayer_computes for s in stats])),
            mean_wall_ms=float(np.mean([s.wall_ms for s in stats])),
            **div,
        ))
    parity = arms[0].compute_steps_per_layer == arms[1].compute_steps_per_layer \
        and arms[0].sublayer_computes == arms[1].sublayer_computes
    header = {"alpha": schedule.alpha, "strategy": schedule.strategy.value, "cfg_strength": sampler.cfg_strength,
              "sway_coeff": sampler.sway_coeff, "samples": len(eval_samples), "note": PROXY_NOTE}
    return CompareReport(nfe, c, nfe - c, parity, arms, header)
