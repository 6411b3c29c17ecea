"""Flow-matching Euler sampler with sway-warped timesteps and classifier-free guidance."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .model import Branch, CacheState, DiT, StepCachePolicy, Tap, layer_ids, model_forward, reference_forward
from .schedule import CacheSchedule, ScheduleError

CFG_FORM = "v_uncond + w * (v_cond - v_uncond)"


@dataclass(frozen=True)
class SamplerConfig:
    nfe: int = 32
    cfg_strength: float = 2.0
    sway_coeff: float = -1.0
    seed: int = 0

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError(f"nfe must be >= 1, got {self.nfe}")


@dataclass
class RunStats:
    nfe: int
    seed: int
    cfg_strength: float
    sway_coeff: float
    sublayer_computes: int = 0
    cache_hits: int = 0
    cached_steps_per_layer: dict = field(default_factory=dict)
    compute_steps_per_layer: dict = field(default_factory=dict)
    wall_ms: float = 0.0
    schedule_fingerprint: Optional[str] = None
    cfg_form: str = CFG_FORM
    rng_algorithm: str = T.RNG_ALGORITHM

    def to_json(self) -> dict:
        return asdict(self)


def sway_timesteps(nfe: int, s: float) -> np.ndarray:
    """nfe + 1 times in [0, 1]: t = u + s * (cos(pi u / 2) - 1 + u) over a uniform grid u."""
    if nfe < 1:
        raise ValueError(f"nfe must be >= 1, got {nfe}")
    if not -1.0 <= s <= 1.0:
        raise T.DomainError(f"sway coefficient must lie in [-1, 1], got {s}")
    u = np.arange(nfe + 1, dtype=np.float64) / nfe
    t = u + s * (np.cos(math.pi / 2 * u) - 1.0 + u)
    t[0], t[-1] = 0.0, 1.0
    return t


def cfg_velocity(v_cond: np.ndarray, v_uncond: np.ndarray, w: float) -> np.ndarray:
    if v_cond.shape != v_uncond.shape:
        raise T.ShapeError(f"cfg branch shapes differ: {v_cond.shape} vs {v_uncond.shape}")
    # Algebraically v_uncond + w * (v_cond - v_uncond); this arrangement is exact at w in {0, 1}.
    return T.F32(w) * v_cond + T.F32(1.0 - w) * v_uncond


def euler_integrate(
    model: DiT,
    x0_noise: np.ndarray,
    cond: np.ndarray,
    config: SamplerConfig,
    schedule: Optional[CacheSchedule] = None,
    cache: Optional[CacheState] = None,
    tap: Optional[Tap] = None,
) -> tuple[np.ndarray, RunStats]:
    """Integrate dx/dt = v from noise at t=0 to data at t=1 over the sway grid."""
    if schedule is not None:
        if schedule.nfe != config.nfe:
            raise ScheduleError(f"schedule has {schedule.nfe} steps but sampler nfe is {config.nfe}")
        if schedule.depth != model.config.depth:
            raise ScheduleError(f"schedule depth {schedule.depth} != model depth {model.config.depth}")
    cache = CacheState() if cache is None else cache
    ts = sway_timesteps(config.nfe, config.sway_coeff)
    x = np.asarray(x0_noise, dtype=T.F32)
    start = time.perf_counter()
    for i in range(config.nfe):
        policy = schedule.policy(i) if schedule is not None else StepCachePolicy.compute_all(i)
        v_c = model_forward(model, x, ts[i], cond, Branch.COND, policy, cache, tap)
        v_u = model_forward(model, x, ts[i], cond, Branch.UNCOND, policy, cache, tap)
        v = cfg_velocity(v_c, v_u, config.cfg_strength)
        x = x + T.F32(ts[i + 1] - ts[i]) * v
    wall_ms = (time.perf_counter() - start) * 1e3
    layers = layer_ids(model.config.depth)
    stats = RunStats(
        nfe=config.nfe,
        seed=config.seed,
        cfg_strength=config.cfg_strength,
        sway_coeff=config.sway_coeff,
        sublayer_computes=cache.total_computes,
        cache_hits=cache.total_hits,
        cached_steps_per_layer={l.key: cache.hits.get(l, 0) // 2 for l in layers},
        compute_steps_per_layer={l.key: cache.computes.get(l, 0) // 2 for l in layers},
        wall_ms=wall_ms,
        schedule_fingerprint=schedule.fingerprint() if schedule is not None else None,
    )
    return x, stats


def reference_integrate(model: DiT, x0_noise: np.ndarray, cond: np.ndarray, config: SamplerConfig) -> np.ndarray:
    """Euler loop over ``reference_forward``: no policy, no cache, no bookkeeping."""
    ts = sway_timesteps(config.nfe, config.sway_coeff)
    x = np.asarray(x0_noise, dtype=T.F32)
    for i in range(config.nfe):
        v_c = reference_forward(model, x, ts[i], cond, Branch.COND)
        v_u = reference_forward(model, x, ts[i], cond, Branch.UNCOND)
        x = x + T.F32(ts[i + 1] - ts[i]) * cfg_velocity(v_c, v_u, config.cfg_strength)
    return x
