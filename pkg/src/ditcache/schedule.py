"""Calibration error profiles and the cache schedules derived from them."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import Kind, LayerId, StepCachePolicy, layer_ids

SCHEDULE_VERSION = 1
DEFAULT_CAP = 3
DEGENERATE_NORM = 1e-12


class DegenerateDenominatorError(ArithmeticError):
    pass


class ScheduleError(ValueError):
    pass


class Strategy(str, enum.Enum):
    INDEPENDENT = "independent"
    ATTN_ONLY = "attn-only"
    FFN_ONLY = "ffn-only"
    UNIFIED_ATTN = "unified-attn"
    UNIFIED_FFN = "unified-ffn"


class Granularity(str, enum.Enum):
    # one mask per LayerId from that layer's own curve
    LAYER = "layer"
    # one mask per sublayer kind from the depth-averaged curve, shared by every block
    TYPE = "type"


def l1_relative_error(h_curr: np.ndarray, h_prev: np.ndarray) -> float:
    """sum|h_curr - h_prev| / sum|h_prev|, accumulated in float64."""
    if h_curr.shape != h_prev.shape:
        raise ValueError(f"shape mismatch: {h_curr.shape} vs {h_prev.shape}")
    prev = np.asarray(h_prev, dtype=np.float64)
    denom = np.abs(prev).sum()
    if denom < DEGENERATE_NORM:
        raise DegenerateDenominatorError(f"reference activation has L1 norm {denom:.3e}")
    return float(np.abs(np.asarray(h_curr, dtype=np.float64) - prev).sum() / denom)


@dataclass
class ErrorProfile:
    nfe: int
    sample_count: int
    errors: dict  # LayerId -> float64 array of length nfe - 1

    def __post_init__(self):
        self.errors = {k: np.asarray(v, dtype=np.float64) for k, v in self.errors.items()}
        blocks = {layer.block for layer in self.errors}
        if set(self.errors) != set(layer_ids(len(blocks))):
            raise ValueError("profile must hold an Attn and an Ffn curve for every block 0..depth-1")
        for layer, e in self.errors.items():
            if e.shape != (self.nfe - 1,):
                raise ValueError(f"{layer.key}: expected {self.nfe - 1} transitions, got {e.shape}")
            if not np.isfinite(e).all() or (e < 0).any():
                raise ValueError(f"{layer.key}: errors must be finite and nonnegative")

    @property
    def depth(self) -> int:
        return len(self.errors) // 2

    def kind_mean(self, kind: Kind) -> np.ndarray:
        return np.mean([self.errors[LayerId(b, kind)] for b in range(self.depth)], axis=0)

    def to_json(self) -> dict:
        return {
            "nfe": self.nfe,
            "sample_count": self.sample_count,
            "errors": {layer.key: [float(v) for v in e] for layer, e in sorted(self.errors.items())},
        }

    @classmethod
    def from_json(cls, data: dict) -> "ErrorProfile":
        return cls(
            nfe=int(data["nfe"]),
            sample_count=int(data["sample_count"]),
            errors={LayerId.parse(k): v for k, v in data["errors"].items()},
        )


def build_layer_mask(errors: Sequence[float], alpha: float, max_consecutive: int = DEFAULT_CAP) -> np.ndarray:
    """Boolean mask over ``len(errors) + 1`` steps; True means reuse the cached output.

    ``errors[j]`` is the change from step j to j+1, so it gates step j+1. Candidates
    are accepted left to right; after ``max_consecutive`` cached steps in a row the
    next step is forced to compute.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("need at least one transition error")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if max_consecutive < 1:
        raise ValueError(f"max_consecutive must be >= 1, got {max_consecutive}")
    mask = np.zeros(errors.size + 1, dtype=bool)
    run = 0
    for j, err in enumerate(errors):
        if err < alpha and run < max_consecutive:
            mask[j + 1] = True
            run += 1
        else:
            run = 0
    return mask


@dataclass
class CacheSchedule:
    nfe: int
    masks: dict  # LayerId -> bool array of length nfe
    alpha: Optional[float] = None
    strategy: Strategy = Strategy.UNIFIED_ATTN
    max_consecutive: int = DEFAULT_CAP
    granularity: Granularity = Granularity.LAYER
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.masks = {k: np.asarray(v, dtype=bool) for k, v in self.masks.items()}
        self.strategy = Strategy(self.strategy)
        self.granularity = Granularity(self.granularity)
        self.validate()

    @property
    def depth(self) -> int:
        return len(self.masks) // 2

    def validate(self) -> None:
        if self.nfe < 1:
            raise ScheduleError(f"nfe must be >= 1, got {self.nfe}")
        if set(self.masks) != set(layer_ids(self.depth)):
            raise ScheduleError("schedule must hold an Attn and an Ffn mask for every block")
        for layer, m in self.masks.items():
            if m.shape != (self.nfe,):
                raise ScheduleError(f"{layer.key}: mask length {m.shape} != nfe {self.nfe}")
            if m[0]:
                raise ScheduleError(f"{layer.key}: step 0 must compute")
            if longest_run(m) > self.max_consecutive:
                raise ScheduleError(f"{layer.key}: cached run exceeds cap {self.max_consecutive}")
        base = {Strategy.UNIFIED_ATTN: Kind.ATTN, Strategy.UNIFIED_FFN: Kind.FFN}.get(self.strategy)
        if base is not None:
            for b in range(self.depth):
                if not np.array_equal(self.masks[LayerId(b, Kind.ATTN)], self.masks[LayerId(b, Kind.FFN)]):
                    raise ScheduleError(f"block {b}: unified schedule needs identical Attn/Ffn masks")

    def policy(self, step: int) -> StepCachePolicy:
        return StepCachePolicy(step, frozenset(layer for layer, m in self.masks.items() if m[step]))

    def cached_steps(self, layer: LayerId) -> set[int]:
        return set(np.flatnonzero(self.masks[layer]).tolist())

    def to_json(self) -> dict:
        data = {
            "version": SCHEDULE_VERSION,
            "nfe": self.nfe,
            "alpha": self.alpha,
            "strategy": self.strategy.value,
            "max_consecutive": self.max_consecutive,
            "granularity": self.granularity.value,
            "masks": {layer.key: [int(v) for v in m] for layer, m in sorted(self.masks.items())},
        }
        if self.provenance:
            data["provenance"] = self.provenance
        return data

    @classmethod
    def from_json(cls, data: dict) -> "CacheSchedule":
        if data.get("version", SCHEDULE_VERSION) != SCHEDULE_VERSION:
            raise ScheduleError(f"unsupported schedule version {data['version']}")
        return cls(
            nfe=int(data["nfe"]),
            masks={LayerId.parse(k): v for k, v in data["masks"].items()},
            alpha=data.get("alpha"),
            strategy=data.get("strategy", Strategy.UNIFIED_ATTN.value),
            max_consecutive=int(data.get("max_consecutive", DEFAULT_CAP)),
            granularity=data.get("granularity", Granularity.LAYER.value),
            provenance=data.get("provenance", {}),
        )

    def fingerprint(self) -> str:
        body = {k: v for k, v in self.to_json().items() if k != "provenance"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def longest_run(mask: Iterable[bool]) -> int:
    best = run = 0
    for v in mask:
        run = run + 1 if v else 0
        best = max(best, run)
    return best


def compute_all_schedule(depth: int, nfe: int) -> CacheSchedule:
    return CacheSchedule(nfe, {layer: np.zeros(nfe, bool) for layer in layer_ids(depth)}, alpha=None,
                         strategy=Strategy.INDEPENDENT)


def unified_schedule(depth: int, mask: Sequence[bool], strategy: Strategy = Strategy.UNIFIED_ATTN,
                     max_consecutive: int = DEFAULT_CAP, alpha: Optional[float] = None) -> CacheSchedule:
    """Apply one base mask to every layer of every block."""
    mask = np.asarray(mask, dtype=bool)
    return CacheSchedule(mask.size, {layer: mask.copy() for layer in layer_ids(depth)}, alpha=alpha,
                         strategy=strategy, max_consecutive=max_consecutive, granularity=Granularity.TYPE)


def apply_strategy(profile: ErrorProfile, alpha: float, cap: int = DEFAULT_CAP,
                   strategy: Strategy = Strategy.UNIFIED_ATTN,
                   granularity: Granularity = Granularity.LAYER) -> CacheSchedule:
    strategy, granularity = Strategy(strategy), Granularity(granularity)

    def curve(layer: LayerId) -> np.ndarray:
        if granularity is Granularity.TYPE:
            return profile.kind_mean(layer.kind)
        return profile.errors[layer]

    def own(layer: LayerId) -> np.ndarray:
        return build_layer_mask(curve(layer), alpha, cap)

    never = np.zeros(profile.nfe, dtype=bool)
    masks = {}
    for b in range(profile.depth):
        attn, ffn = LayerId(b, Kind.ATTN), LayerId(b, Kind.FFN)
        if strategy is Strategy.INDEPENDENT:
            masks[attn], masks[ffn] = own(attn), own(ffn)
        elif strategy is Strategy.ATTN_ONLY:
            masks[attn], masks[ffn] = own(attn), never.copy()
        elif strategy is Strategy.FFN_ONLY:
            masks[attn], masks[ffn] = never.copy(), own(ffn)
        elif strategy is Strategy.UNIFIED_ATTN:
            masks[attn] = own(attn)
            masks[ffn] = masks[attn].copy()
        else:
            masks[ffn] = own(ffn)
            masks[attn] = masks[ffn].copy()
    return CacheSchedule(profile.nfe, masks, alpha=float(alpha), strategy=strategy,
                         max_consecutive=cap, granularity=granularity)


def schedule_stats(schedule: CacheSchedule) -> dict:
    cached = {layer.key: int(m.sum()) for layer, m in sorted(schedule.masks.items())}
    total = schedule.nfe * len(schedule.masks)
    n_cached = sum(cached.values())
    return {
        "cached_per_layer": cached,
        "compute_per_layer": {k: schedule.nfe - v for k, v in cached.items()},
        "cached_fraction": n_cached / total,
        "compute_fraction": (total - n_cached) / total,
    }


def alpha_for_fraction(profile: ErrorProfile, target: float, cap: int = DEFAULT_CAP,
                       strategy: Strategy = Strategy.UNIFIED_ATTN,
                       granularity: Granularity = Granularity.TYPE) -> float:
    """Threshold whose schedule's cached fraction lands closest to ``target``.

    Only thresholds just above an observed error change the schedule, so those are
    the candidates; ties go to the smaller threshold.
    """
    values = np.unique(np.concatenate([e for e in profile.errors.values()]
                                      + [profile.kind_mean(k) for k in Kind]))
    candidates = np.nextafter(values, np.inf)
    best, best_gap = float(candidates[0]), np.inf
    for alpha in candidates:
        frac = schedule_stats(apply_strategy(profile, alpha, cap, strategy, granularity))["cached_fraction"]
        gap = abs(frac - target)
        if gap < best_gap - 1e-12:
            best, best_gap = float(alpha), gap
    return best
