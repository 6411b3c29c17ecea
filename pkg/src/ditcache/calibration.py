"""Calibration: uncached sampling runs reduced to per-layer transition errors."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import Branch, DiT, LayerId, layer_ids
from .sampler import SamplerConfig, euler_integrate
from .schedule import DegenerateDenominatorError, ErrorProfile, l1_relative_error


class CaptureBranch(str, enum.Enum):
    COND = "cond"
    UNCOND = "uncond"
    BOTH = "both"


@dataclass(frozen=True)
class CalibrationConfig:
    sample_count: int = 10
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    capture_branch: CaptureBranch = CaptureBranch.COND

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")


class CalibrationError(RuntimeError):
    pass


class _TransitionTap:
    """Streaming reducer: keeps only the previous step's output per (layer, branch)."""

    def __init__(self, branches: set[Branch], sample: int):
        self.branches = branches
        self.sample = sample
        self.prev: dict = {}
        self.steps: dict = {}
        self.errors: dict = {}

    def __call__(self, layer: LayerId, branch: Branch, out: np.ndarray) -> None:
        if branch not in self.branches:
            return
        key = (layer, branch)
        step = self.steps.get(key, 0)
        if key in self.prev:
            try:
                err = l1_relative_error(out, self.prev[key])
            except DegenerateDenominatorError as exc:
                raise CalibrationError(
                    f"sample {self.sample}, layer {layer.key} ({branch.value}), "
                    f"transition {step - 1}->{step}: {exc}"
                ) from exc
            self.errors.setdefault(key, []).append(err)
        self.prev[key] = out.copy()
        self.steps[key] = step + 1


def calibrate(model: DiT, samples: Sequence[tuple[np.ndarray, np.ndarray]], config: CalibrationConfig) -> ErrorProfile:
    """Average the L1 relative error between consecutive steps' sublayer outputs over samples.

    ``samples`` are ``(noise, cond)`` pairs; each is run through the full uncached
    sampler. Per-transition values are sorted before summing, which makes the
    profile exactly invariant to sample order.
    """
    if not samples:
        raise ValueError("calibration needs at least one sample")
    nfe = config.sampler.nfe
    if nfe < 2:
        raise ValueError("calibration needs nfe >= 2 to observe a transition")
    capture = CaptureBranch(config.capture_branch)
    branches = {Branch.COND, Branch.UNCOND} if capture is CaptureBranch.BOTH else {Branch(capture.value)}
    layers = layer_ids(model.config.depth)
    per_sample = []
    for i, (noise, cond) in enumerate(samples):
        tap = _TransitionTap(branches, i)
        euler_integrate(model, noise, cond, config.sampler, tap=tap)
        per_sample.append({
            layer: np.mean([np.asarray(tap.errors[(layer, b)]) for b in sorted(branches)], axis=0)
            for layer in layers
        })
    errors = {}
    for layer in layers:
        stacked = np.sort(np.stack([s[layer] for s in per_sample]), axis=0)
        errors[layer] = stacked.sum(axis=0) / len(per_sample)
    return ErrorProfile(nfe=nfe, sample_count=len(samples), errors=errors)
