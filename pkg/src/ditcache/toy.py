"""Synthetic denoising task and conditional flow matching training.

Training runs a batched numpy re-implementation of the network with a
hand-derived backward pass. It matches ``model.model_forward`` to float32
rounding (BLAS matmul instead of the fixed-order kernel) and is
dtype-generic so gradients can be checked in float64.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .model import (LN_EPS, Branch, CacheState, DiT, ModelConfig, StepCachePolicy, init_params, model_forward,
                    sinusoid)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToyTaskConfig:
    train_steps: int = 2000
    batch: int = 16
    lr: float = 0.1
    seed: int = 0
    max_components: int = 3
    amp_low: float = 0.5
    amp_high: float = 1.5
    max_cycles: float = 3.0
    heldout_size: int = 64
    optimizer: str = "sgd"
    log_every: int = 100

    def __post_init__(self):
        if self.train_steps < 1:
            raise ValueError(f"train_steps must be >= 1, got {self.train_steps}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class SignalParams:
    """Per-channel sinusoid parameters; arrays are (in_dim, max_components), unused slots zero."""

    counts: np.ndarray
    amps: np.ndarray
    cycles: np.ndarray
    phases: np.ndarray


def sample_signal_params(rng: np.random.Generator, in_dim: int, task: ToyTaskConfig = ToyTaskConfig()) -> SignalParams:
    k = task.max_components
    counts = rng.integers(1, k + 1, size=in_dim)
    amps = rng.uniform(task.amp_low, task.amp_high, size=(in_dim, k))
    cycles = rng.uniform(0.5, task.max_cycles, size=(in_dim, k))
    phases = rng.uniform(0.0, 2 * math.pi, size=(in_dim, k))
    unused = np.arange(k)[None, :] >= counts[:, None]
    amps[unused] = 0.0
    return SignalParams(counts, amps, cycles, phases)


def synthesize(params: SignalParams, seq_len: int) -> np.ndarray:
    pos = np.arange(seq_len, dtype=np.float64)[:, None, None] / seq_len
    waves = params.amps * np.sin(2 * math.pi * params.cycles * pos + params.phases)
    return waves.sum(axis=-1).astype(T.F32)


def gen_sample(rng: np.random.Generator, cfg: ModelConfig, task: ToyTaskConfig = ToyTaskConfig()):
    """Return ``(x1, cond)``: a multi-sinusoid signal and the same signal with its second half zeroed."""
    x1 = synthesize(sample_signal_params(rng, cfg.in_dim, task), cfg.seq_len)
    cond = x1.copy()
    cond[cfg.seq_len // 2:] = 0.0
    return x1, cond


def make_eval_samples(cfg: ModelConfig, count: int, seed: int, purpose: str = "eval",
                      task: ToyTaskConfig = ToyTaskConfig()) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(noise, cond)`` pairs for sampling; ``purpose`` keeps seed streams disjoint."""
    out = []
    for i in range(count):
        rng = T.substream(seed, purpose, i)
        _, cond = gen_sample(rng, cfg, task)
        out.append((T.randn(rng, (cfg.seq_len, cfg.in_dim)), cond))
    return out


def cfm_loss(model, x1: np.ndarray, cond: np.ndarray, rng: np.random.Generator) -> float:
    """Single-sample flow matching loss through the inference network.

    ``model`` may also be a plain callable ``(xt, t, cond, x0, x1) -> v``, handy for probing the loss itself.
    """
    t = float(rng.uniform(0.0, 1.0))
    x0 = T.randn(rng, x1.shape)
    xt = (T.F32(1.0 - t) * x0 + T.F32(t) * x1).astype(T.F32)
    if isinstance(model, DiT):
        v = model_forward(model, xt, t, cond, Branch.COND, StepCachePolicy.compute_all(), CacheState())
    else:
        v = model(xt, t, cond, x0, x1)
    return float(np.mean((v.astype(np.float64) - (x1 - x0)) ** 2))


# -- batched forward / backward -------------------------------------------------------


def _ln(x, eps=LN_EPS):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    return xc * rstd, rstd


def _ln_back(dxhat, xhat, rstd):
    return rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))


_GC = math.sqrt(2.0 / math.pi)


def _gelu(z):
    th = np.tanh(_GC * (z + 0.044715 * z ** 3))
    return 0.5 * z * (1.0 + th), th


def _gelu_back(z, th):
    return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * _GC * (1.0 + 3 * 0.044715 * z * z)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def forward_batch(params: dict, cfg: ModelConfig, xt, t, cond):
    """Batched velocity prediction; returns ``(v, tape)``. ``xt``/``cond``: (B, S, D), ``t``: (B,)."""
    dt = xt.dtype
    B, S, _ = xt.shape
    W, H = cfg.width, cfg.heads
    dh = W // H
    tape = {}
    sin_emb = np.stack([sinusoid(tt, W) for tt in t]).astype(dt)
    pre_t = sin_emb @ params["time.w"] + params["time.b"]
    temb = pre_t * _sigmoid(pre_t)
    tape.update(sin_emb=sin_emb, pre_t=pre_t, temb=temb)
    inp = np.concatenate([xt, cond], axis=-1)
    x = inp @ params["in.w"] + params["in.b"] + params["pos"]
    tape["inp"] = inp
    blocks = []
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        rec = {}
        mod = temb @ params[p + "mod.w"] + params[p + "mod.b"]
        sa, ca, ga, sf, cf, gf = (m[:, None, :] for m in np.split(mod, 6, axis=-1))
        rec["mod"] = (sa, ca, ga, sf, cf, gf)
        xhat, rstd = _ln(x)
        ha = xhat * (1.0 + ca) + sa
        qkv = ha @ params[p + "attn.qkv.w"] + params[p + "attn.qkv.b"]
        q, k, v = (a.reshape(B, S, H, dh).transpose(0, 2, 1, 3) for a in np.split(qkv, 3, axis=-1))
        scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(dh)
        scores = scores - scores.max(-1, keepdims=True)
        e = np.exp(scores)
        prob = e / e.sum(-1, keepdims=True)
        o = (prob @ v).transpose(0, 2, 1, 3).reshape(B, S, W)
        a = o @ params[p + "attn.out.w"] + params[p + "attn.out.b"]
        rec.update(xhat_a=xhat, rstd_a=rstd, ha=ha, q=q, k=k, v=v, prob=prob, o=o, a=a)
        x = x + ga * a
        xhat2, rstd2 = _ln(x)
        hf = xhat2 * (1.0 + cf) + sf
        z1 = hf @ params[p + "ffn.w1"] + params[p + "ffn.b1"]
        g, th = _gelu(z1)
        f = g @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
        rec.update(xhat_f=xhat2, rstd_f=rstd2, hf=hf, z1=z1, th=th, g=g, f=f)
        x = x + gf * f
        blocks.append(rec)
    tape["blocks"] = blocks
    xhat, rstd = _ln(x)
    y = xhat * params["final.gamma"] + params["final.beta"]
    out = y @ params["out.w"] + params["out.b"]
    tape.update(xhat_out=xhat, rstd_out=rstd, y=y)
    return out, tape


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def backward_batch(params: dict, cfg: ModelConfig, tape: dict, dout) -> dict:
    B, S, _ = dout.shape
    W, H = cfg.width, cfg.heads
    dh = W // H
    grads = {}
    y = tape["y"]
    grads["out.w"] = _flat(y).T @ _flat(dout)
    grads["out.b"] = dout.sum((0, 1))
    dy = dout @ params["out.w"].T
    grads["final.gamma"] = (dy * tape["xhat_out"]).sum((0, 1))
    grads["final.beta"] = dy.sum((0, 1))
    dx = _ln_back(dy * params["final.gamma"], tape["xhat_out"], tape["rstd_out"])
    dtemb = np.zeros_like(tape["temb"])
    for i in reversed(range(cfg.depth)):
        p = f"blocks.{i}."
        rec = tape["blocks"][i]
        sa, ca, ga, sf, cf, gf = rec["mod"]
        # FFN branch
        dgf = (dx * rec["f"]).sum(1)
        df = dx * gf
        grads[p + "ffn.w2"] = _flat(rec["g"]).T @ _flat(df)
        grads[p + "ffn.b2"] = df.sum((0, 1))
        dz1 = (df @ params[p + "ffn.w2"].T) * _gelu_back(rec["z1"], rec["th"])
        grads[p + "ffn.w1"] = _flat(rec["hf"]).T @ _flat(dz1)
        grads[p + "ffn.b1"] = dz1.sum((0, 1))
        dhf = dz1 @ params[p + "ffn.w1"].T
        dcf = (dhf * rec["xhat_f"]).sum(1)
        dsf = dhf.sum(1)
        dx = dx + _ln_back(dhf * (1.0 + cf), rec["xhat_f"], rec["rstd_f"])
        # attention branch
        dga = (dx * rec["a"]).sum(1)
        da = dx * ga
        grads[p + "attn.out.w"] = _flat(rec["o"]).T @ _flat(da)
        grads[p + "attn.out.b"] = da.sum((0, 1))
        do = (da @ params[p + "attn.out.w"].T).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        prob, q, k, v = rec["prob"], rec["q"], rec["k"], rec["v"]
        dprob = do @ v.transpose(0, 1, 3, 2)
        dv = prob.transpose(0, 1, 3, 2) @ do
        ds = prob * (dprob - (dprob * prob).sum(-1, keepdims=True)) / math.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([a.transpose(0, 2, 1, 3).reshape(B, S, W) for a in (dq, dk, dv)], axis=-1)
        grads[p + "attn.qkv.w"] = _flat(rec["ha"]).T @ _flat(dqkv)
        grads[p + "attn.qkv.b"] = dqkv.sum((0, 1))
        dha = dqkv @ params[p + "attn.qkv.w"].T
        dca = (dha * rec["xhat_a"]).sum(1)
        dsa = dha.sum(1)
        dx = dx + _ln_back(dha * (1.0 + ca), rec["xhat_a"], rec["rstd_a"])
        dmod = np.concatenate([dsa, dca, dga, dsf, dcf, dgf], axis=-1)
        grads[p + "mod.w"] = tape["temb"].T @ dmod
        grads[p + "mod.b"] = dmod.sum(0)
        dtemb = dtemb + dmod @ params[p + "mod.w"].T
    grads["pos"] = dx.sum(0)
    grads["in.w"] = _flat(tape["inp"]).T @ _flat(dx)
    grads["in.b"] = dx.sum((0, 1))
    pre = tape["pre_t"]
    sig = _sigmoid(pre)
    dpre = dtemb * sig * (1.0 + pre * (1.0 - sig))
    grads["time.w"] = tape["sin_emb"].T @ dpre
    grads["time.b"] = dpre.sum(0)
    return grads


def loss_and_grads(params: dict, cfg: ModelConfig, xt, t, cond, target):
    v, tape = forward_batch(params, cfg, xt, t, cond)
    diff = v - target
    loss = float(np.mean(diff * diff))
    return loss, backward_batch(params, cfg, tape, 2.0 * diff / diff.size)


def batch_loss(params: dict, cfg: ModelConfig, xt, t, cond, target) -> float:
    v, _ = forward_batch(params, cfg, xt, t, cond)
    return float(np.mean((v - target) ** 2))


def draw_cfm_batch(rng: np.random.Generator, cfg: ModelConfig, size: int, task: ToyTaskConfig):
    """One flow-matching batch: ``(xt, t, cond, target)`` with target = x1 - x0."""
    x1, cond = zip(*(gen_sample(rng, cfg, task) for _ in range(size)))
    x1, cond = np.stack(x1), np.stack(cond)
    t = rng.uniform(0.0, 1.0, size=size)
    x0 = T.randn(rng, x1.shape)
    tt = t[:, None, None].astype(T.F32)
    xt = (1 - tt) * x0 + tt * x1
    return xt, t, cond, (x1 - x0).astype(T.F32)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, params: dict, curve: list):
        super().__init__(f"loss became non-finite at step {step}; last good weights retained")
        self.step, self.params, self.curve = step, params, curve


@dataclass
class TrainResult:
    model: DiT
    curve: list  # (step, train_loss)
    heldout_before: float
    heldout_after: float


def train(model: DiT, task: ToyTaskConfig) -> TrainResult:
    """Fit ``model`` to the toy task; returns a new model, the loss curve and held-out losses."""
    cfg = model.config
    params = {k: v.copy() for k, v in model.params.items()}
    heldout = draw_cfm_batch(T.substream(task.seed, "heldout"), cfg, task.heldout_size, task)
    before = batch_loss(params, cfg, *heldout)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    s = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    curve = []
    good = dict(params)
    for step in range(1, task.train_steps + 1):
        batch = draw_cfm_batch(T.substream(task.seed, "train", step), cfg, task.batch, task)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = loss_and_grads(params, cfg, *batch)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, good, curve)
        good = dict(params)  # these weights produced a finite loss
        curve.append((step, loss))
        for name, g in grads.items():
            g = g.astype(T.F32)
            if task.optimizer == "sgd":
                params[name] = params[name] - T.F32(task.lr) * g
                continue
            m[name] = b1 * m[name] + (1 - b1) * g
            s[name] = b2 * s[name] + (1 - b2) * g * g
            mhat = m[name] / (1 - b1 ** step)
            shat = s[name] / (1 - b2 ** step)
            params[name] = (params[name] - task.lr * mhat / (np.sqrt(shat) + eps)).astype(T.F32)
        if task.log_every and step % task.log_every == 0:
            log.info("step %d loss %.4f", step, loss)
    after = batch_loss(params, cfg, *heldout)
    return TrainResult(DiT(cfg, params, seed=model.seed), curve, before, after)


def build_and_train(cfg: ModelConfig, task: ToyTaskConfig) -> TrainResult:
    return train(DiT(cfg, init_params(cfg, task.seed), seed=task.seed), task)


def write_loss_curve(path, curve: list, header: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh)
        w.writerow(["step", "train_loss"])
        w.writerows((step, f"{loss:.6f}") for step, loss in curve)
    tmp.replace(path)
