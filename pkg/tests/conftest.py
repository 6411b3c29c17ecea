import os
import subprocess
import sys
import time

import numpy as np
import pytest

from ditcache import tensor as T
from ditcache.model import ModelConfig, build_model, init_params, load_checkpoint
from ditcache.toy import ToyTaskConfig, draw_cfm_batch, batch_loss, loss_and_grads, make_eval_samples

SMALL = ModelConfig(depth=2, width=16, heads=2, ffn_mult=2, seq_len=6, in_dim=3)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def small_model():
    return build_model(SMALL, seed=7)


@pytest.fixture
def small_sample():
    return make_eval_samples(SMALL, 1, seed=3, purpose="test")[0]


def grad_check(cfg=ModelConfig(depth=1, width=8, heads=2, ffn_mult=2, seq_len=4, in_dim=2), seed=0, h=1e-6):
    """Per-tensor relative error between analytic and central-difference gradients (float64 throughout)."""
    params = {k: v.astype(np.float64) for k, v in init_params(cfg, seed).items()}
    rng = np.random.default_rng(seed)
    for k in params:  # random perturbation so gates, biases etc. are not at special values
        params[k] = params[k] + rng.standard_normal(params[k].shape) * 0.1
    xt, t, cond, target = (a.astype(np.float64) for a in draw_cfm_batch(T.substream(seed, "gradcheck"), cfg, 3,
                                                                          ToyTaskConfig()))
    _, grads = loss_and_grads(params, cfg, xt, t, cond, target)
    out = {}
    for name, p in params.items():
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = batch_loss(params, cfg, xt, t, cond, target)
            p[idx] = old - h
            down = batch_loss(params, cfg, xt, t, cond, target)
            p[idx] = old
            fd[idx] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(fd) + np.linalg.norm(grads[name]), 1e-12)
        out[name] = float(np.linalg.norm(fd - grads[name]) / denom)
    return out


def run_cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "ditcache", *map(str, args)], capture_output=True, text=True,
                          cwd=cwd, env={**os.environ, "PYTHONHASHSEED": "0"})


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Default end-to-end pipeline via the CLI; later acceptance checks reuse its artifacts."""
    work = tmp_path_factory.mktemp("pipeline")
    steps = [
        ("train-toy", "--out", work / "ckpt"),
        ("calibrate", "--weights", work / "ckpt", "--samples", 10, "--nfe", 32, "--out", work / "p32.json"),
        ("calibrate", "--weights", work / "ckpt", "--samples", 10, "--nfe", 16, "--out", work / "p16.json"),
        ("schedule", "--profile", work / "p32.json", "--target-fraction", 0.25, "--out", work / "s32_q.json"),
        ("schedule", "--profile", work / "p32.json", "--target-fraction", 0.5, "--out", work / "s32_h.json"),
        ("schedule", "--profile", work / "p16.json", "--target-fraction", 0.25, "--out", work / "s16_q.json"),
        ("schedule", "--profile", work / "p16.json", "--target-fraction", 0.5, "--out", work / "s16_h.json"),
        ("bench", "--weights", work / "ckpt", "--profile", work / "p32.json", work / "p16.json",
         "--target-fraction", 0.25, 0.5, "--out", work / "bench.csv"),
        ("compare", "--weights", work / "ckpt", "--schedule", work / "s32_q.json", work / "s16_q.json",
         "--out", work / "compare.csv", "--json", work / "compare.json"),
    ]
    start = time.perf_counter()
    results = []
    for step in steps:
        proc = run_cli(*step)
        results.append((step[0], proc.returncode, proc.stdout, proc.stderr))
        if proc.returncode != 0:
            break
    elapsed = time.perf_counter() - start
    return {"dir": work, "results": results, "elapsed_s": elapsed, "complete": len(results) == len(steps)}


@pytest.fixture(scope="session")
def trained_model(pipeline):
    if not pipeline["complete"]:
        pytest.fail("pipeline did not complete; see acceptance criterion 10")
    return load_checkpoint(pipeline["dir"] / "ckpt")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(items):
    for item in items:
        if {"pipeline", "trained_model"} & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)
