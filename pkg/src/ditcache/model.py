"""Compact Diffusion Transformer with cache hooks at the residual boundaries.

Each block runs two sublayers, self-attention then FFN. Before each sublayer
the stream is layer-normalised and modulated by a per-block scale/shift taken
from the timestep embedding, and the sublayer result is multiplied by a gate.
That gated tensor is what the residual adds back, and it is also the unit of
caching: on a cached step the block skips the sublayer and adds the stored
tensor instead.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import tensor as T
from .tensor import F32

LN_EPS = 1e-6
TIME_SCALE = 1000.0


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    width: int = 64
    heads: int = 4
    ffn_mult: int = 4
    seq_len: int = 32
    in_dim: int = 8

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {value}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def hidden(self) -> int:
        return self.width * self.ffn_mult


class Kind(str, enum.Enum):
    ATTN = "attn"
    FFN = "ffn"


class Branch(str, enum.Enum):
    COND = "cond"
    UNCOND = "uncond"


class LayerId(NamedTuple):
    block: int
    kind: Kind

    @property
    def key(self) -> str:
        return f"{self.block}.{self.kind.value}"

    @classmethod
    def parse(cls, key: str) -> "LayerId":
        block, kind = key.split(".")
        return cls(int(block), Kind(kind))


def layer_ids(depth: int) -> list[LayerId]:
    return [LayerId(b, k) for b in range(depth) for k in (Kind.ATTN, Kind.FFN)]


class CacheMissError(RuntimeError):
    def __init__(self, layer: LayerId, branch: Branch, step: int):
        super().__init__(
            f"cache miss: block={layer.block} kind={layer.kind.value} "
            f"branch={branch.value} step={step} was marked cached but never computed"
        )
        self.layer, self.branch, self.step = layer, branch, step


@dataclass(frozen=True)
class StepCachePolicy:
    """Which layers reuse their cached output at one sampler step."""

    step: int = 0
    cached: frozenset = frozenset()

    @classmethod
    def compute_all(cls, step: int = 0) -> "StepCachePolicy":
        return cls(step, frozenset())

    def is_cached(self, layer: LayerId) -> bool:
        return layer in self.cached


@dataclass
class CacheState:
    """Last computed sublayer output per ``(layer, branch)``, owned by one run."""

    entries: dict = field(default_factory=dict)
    hits: dict = field(default_factory=dict)
    computes: dict = field(default_factory=dict)

    def lookup(self, layer: LayerId, branch: Branch, step: int) -> np.ndarray:
        try:
            out = self.entries[(layer, branch)]
        except KeyError:
            raise CacheMissError(layer, branch, step) from None
        self.hits[layer] = self.hits.get(layer, 0) + 1
        return out

    def store(self, layer: LayerId, branch: Branch, out: np.ndarray) -> None:
        self.entries[(layer, branch)] = out
        self.computes[layer] = self.computes.get(layer, 0) + 1

    @property
    def total_hits(self) -> int:
        return sum(self.hits.values())

    @property
    def total_computes(self) -> int:
        return sum(self.computes.values())


# Called with every freshly computed sublayer output (calibration capture point).
Tap = Callable[[LayerId, Branch, np.ndarray], None]


class DiT:
    """Weights plus config; immutable once built or loaded."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], seed: Optional[int] = None):
        self.config = config
        self.params = {k: np.ascontiguousarray(v, dtype=F32) for k, v in params.items()}
        for v in self.params.values():
            v.flags.writeable = False
        self.seed = seed
        check_param_shapes(config, self.params)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].tobytes())
        return h.hexdigest()[:16]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    w, d = cfg.width, cfg.in_dim
    shapes = {
        "time.w": (w, w),
        "time.b": (w,),
        "in.w": (2 * d, w),
        "in.b": (w,),
        "pos": (cfg.seq_len, w),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "mod.w": (w, 6 * w),
            p + "mod.b": (6 * w,),
            p + "attn.qkv.w": (w, 3 * w),
            p + "attn.qkv.b": (3 * w,),
            p + "attn.out.w": (w, w),
            p + "attn.out.b": (w,),
            p + "ffn.w1": (w, cfg.hidden),
            p + "ffn.b1": (cfg.hidden,),
            p + "ffn.w2": (cfg.hidden, w),
            p + "ffn.b2": (w,),
        })
    shapes.update({
        "final.gamma": (w,),
        "final.beta": (w,),
        "out.w": (w, d),
        "out.b": (d,),
    })
    return shapes


def check_param_shapes(cfg: ModelConfig, params: dict[str, np.ndarray]) -> None:
    expected = param_shapes(cfg)
    missing = expected.keys() - params.keys()
    extra = params.keys() - expected.keys()
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise T.ShapeError(f"{name}: expected {shape}, got {params[name].shape}")


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Random init: fan-in scaled weights, unit gates, residual outputs shrunk by depth."""
    params = {}
    resid_scale = 1.0 / math.sqrt(2 * cfg.depth)
    for index, (name, shape) in enumerate(sorted(param_shapes(cfg).items())):
        rng = T.substream(seed, "init/" + name, index)
        if name.endswith((".b", ".b1", ".b2", "final.beta")):
            arr = np.zeros(shape, F32)
        elif name == "final.gamma":
            arr = np.ones(shape, F32)
        elif name == "pos":
            arr = T.randn(rng, shape, 0.02)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if name.endswith(("attn.out.w", "ffn.w2")):
                std *= resid_scale
            elif name.endswith("mod.w"):
                std *= 0.5
            arr = T.randn(rng, shape, std)
        params[name] = arr
    w = cfg.width
    for i in range(cfg.depth):
        b = params[f"blocks.{i}.mod.b"]
        # chunk layout: shift_a, scale_a, gate_a, shift_f, scale_f, gate_f
        b[2 * w:3 * w] = 1.0
        b[5 * w:6 * w] = 1.0
    return params


def build_model(cfg: ModelConfig, seed: int = 0) -> DiT:
    return DiT(cfg, init_params(cfg, seed), seed=seed)


# -- sublayers -------------------------------------------------------------------


def sinusoid(t: float, width: int) -> np.ndarray:
    """Sinusoidal features of ``t`` at geometrically spaced frequencies (sin half, cos half)."""
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    args = TIME_SCALE * float(t) * freqs
    emb = np.concatenate([np.sin(args), np.cos(args), np.zeros(width - 2 * half)])
    return emb.astype(F32)


def timestep_embed(model: DiT, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise T.DomainError(f"timestep must lie in [0, 1], got {t}")
    s = sinusoid(t, model.config.width)[None, :]
    return T.silu(T.linear(s, model["time.w"], model["time.b"]))[0]


def attn_sublayer(h: np.ndarray, qkv_w, qkv_b, out_w, out_b, heads: int) -> np.ndarray:
    """Multi-head self-attention on ``h`` (seq x width); returns the output projection."""
    seq, width = h.shape
    dh = width // heads
    qkv = T.linear(h, qkv_w, qkv_b)
    q, k, v = qkv[:, :width], qkv[:, width:2 * width], qkv[:, 2 * width:]
    inv = F32(1.0 / math.sqrt(dh))
    heads_out = []
    for i in range(heads):
        sl = slice(i * dh, (i + 1) * dh)
        scores = T.matmul(q[:, sl], k[:, sl].T) * inv
        heads_out.append(T.matmul(T.softmax(scores, axis=-1), v[:, sl]))
    return T.linear(np.concatenate(heads_out, axis=1), out_w, out_b)


def ffn_sublayer(h: np.ndarray, w1, b1, w2, b2) -> np.ndarray:
    return T.linear(T.gelu(T.linear(h, w1, b1)), w2, b2)


def modulation(model: DiT, t_embed: np.ndarray, block: int) -> list[np.ndarray]:
    p = f"blocks.{block}."
    mod = T.linear(t_embed[None, :], model[p + "mod.w"], model[p + "mod.b"])[0]
    return np.split(mod, 6)


def branch_output(model: DiT, x: np.ndarray, mod: list[np.ndarray], layer: LayerId) -> np.ndarray:
    """Gated sublayer output for ``layer``: the exact tensor the residual adds (and the cache stores)."""
    p = f"blocks.{layer.block}."
    off = 0 if layer.kind is Kind.ATTN else 3
    shift, scl, gate = mod[off], mod[off + 1], mod[off + 2]
    h = T.layer_norm(x, F32(1.0) + scl, shift, LN_EPS)
    if layer.kind is Kind.ATTN:
        out = attn_sublayer(h, model[p + "attn.qkv.w"], model[p + "attn.qkv.b"],
                            model[p + "attn.out.w"], model[p + "attn.out.b"], model.config.heads)
    else:
        out = ffn_sublayer(h, model[p + "ffn.w1"], model[p + "ffn.b1"], model[p + "ffn.w2"], model[p + "ffn.b2"])
    return out * gate


def block_forward(
    model: DiT,
    x: np.ndarray,
    t_embed: np.ndarray,
    block: int,
    branch: Branch,
    policy: StepCachePolicy,
    cache: CacheState,
    tap: Optional[Tap] = None,
) -> np.ndarray:
    mod = modulation(model, t_embed, block)
    for kind in (Kind.ATTN, Kind.FFN):
        layer = LayerId(block, kind)
        if policy.is_cached(layer):
            out = cache.lookup(layer, branch, policy.step)
        else:
            out = branch_output(model, x, mod, layer)
            cache.store(layer, branch, out)
            if tap is not None:
                tap(layer, branch, out)
        x = x + out
    return x


def _embed_input(model: DiT, x: np.ndarray, cond: np.ndarray, branch: Branch) -> np.ndarray:
    cfg = model.config
    if x.shape != (cfg.seq_len, cfg.in_dim) or cond.shape != x.shape:
        raise T.ShapeError(f"expected x and cond of shape {(cfg.seq_len, cfg.in_dim)}, got {x.shape} / {cond.shape}")
    if branch is Branch.UNCOND:
        cond = np.zeros_like(x)
    inp = np.concatenate([x, cond], axis=1)
    return T.linear(inp, model["in.w"], model["in.b"]) + model["pos"]


def _project_output(model: DiT, x: np.ndarray) -> np.ndarray:
    y = T.layer_norm(x, model["final.gamma"], model["final.beta"], LN_EPS)
    return T.linear(y, model["out.w"], model["out.b"])


def model_forward(
    model: DiT,
    x: np.ndarray,
    t: float,
    cond: np.ndarray,
    branch: Branch,
    policy: StepCachePolicy,
    cache: CacheState,
    tap: Optional[Tap] = None,
) -> np.ndarray:
    """Velocity field v(x, t, cond) for one CFG branch under a cache policy."""
    h = _embed_input(model, x, cond, branch)
    temb = timestep_embed(model, t)
    for block in range(model.config.depth):
        h = block_forward(model, h, temb, block, branch, policy, cache, tap)
    return _project_output(model, h)


def reference_forward(model: DiT, x: np.ndarray, t: float, cond: np.ndarray, branch: Branch) -> np.ndarray:
    """Same network with no cache code path at all; the transparency baseline."""
    h = _embed_input(model, x, cond, branch)
    temb = timestep_embed(model, t)
    for block in range(model.config.depth):
        mod = modulation(model, temb, block)
        h = h + branch_output(model, h, mod, LayerId(block, Kind.ATTN))
        h = h + branch_output(model, h, mod, LayerId(block, Kind.FFN))
    return _project_output(model, h)


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(model: DiT, directory, extra: Optional[dict] = None) -> Path:
    """Write one DTEN file per parameter plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in sorted(model.params.items()):
        fname = name.replace(".", "_") + ".dten"
        T.save_dten(directory / fname, arr)
        files[name] = fname
    manifest = {
        "format": "ditcache-checkpoint",
        "config": asdict(model.config),
        "seed": model.seed,
        "checksum": model.checksum(),
        "params": files,
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> DiT:
    """Load from a manifest path or the directory holding ``manifest.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    cfg = ModelConfig(**manifest["config"])
    params = {name: T.load_dten(path.parent / fname) for name, fname in manifest["params"].items()}
    model = DiT(cfg, params, seed=manifest.get("seed"))
    if manifest.get("checksum") and manifest["checksum"] != model.checksum():
        raise ValueError(f"checkpoint checksum mismatch in {path}")
    return model
