"""Cached inference runs and output-space divergence against the uncached reference."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .model import CacheState, DiT
from .sampler import RunStats, SamplerConfig, euler_integrate
from .schedule import CacheSchedule, DegenerateDenominatorError, ScheduleError


def cached_infer(model: DiT, noise: np.ndarray, cond: np.ndarray, sampler_config: SamplerConfig,
                 schedule: Optional[CacheSchedule]) -> tuple[np.ndarray, RunStats]:
    """Sample under ``schedule`` with a fresh cache owned by this call."""
    if schedule is not None and schedule.nfe != sampler_config.nfe:
        raise ScheduleError(f"schedule nfe {schedule.nfe} does not match sampler nfe {sampler_config.nfe}")
    return euler_integrate(model, noise, cond, sampler_config, schedule, CacheState())


def divergence(x_cached: np.ndarray, x_ref: np.ndarray) -> dict:
    """Relative L2/L1 distance and max abs difference; a proxy for output quality loss."""
    if x_cached.shape != x_ref.shape:
        raise ValueError(f"shape mismatch: {x_cached.shape} vs {x_ref.shape}")
    ref = np.asarray(x_ref, dtype=np.float64)
    diff = np.asarray(x_cached, dtype=np.float64) - ref
    l2, l1 = np.linalg.norm(ref), np.abs(ref).sum()
    if l2 < 1e-12:
        raise DegenerateDenominatorError("reference output has zero norm")
    return {
        "rel_l2": float(np.linalg.norm(diff) / l2),
        "rel_l1": float(np.abs(diff).sum() / l1),
        "max_abs": float(np.abs(diff).max()),
    }
