"""Acceptance criteria 1-10, each checked at its stated tolerance.

Every test appends one PASS/FAIL line to the "acceptance criteria" section of the
terminal summary. Criteria 2 and 7-10 reuse the default CLI pipeline run once per session.
"""

import json
import time

import numpy as np
from threadpoolctl import threadpool_limits

from ditcache.executor import cached_infer
from ditcache.model import Kind, LayerId, ModelConfig, build_model, layer_ids
from ditcache.sampler import SamplerConfig, reference_integrate
from ditcache.schedule import (CacheSchedule, ErrorProfile, Strategy, apply_strategy, build_layer_mask,
                               compute_all_schedule, longest_run)
from ditcache.toy import make_eval_samples

from conftest import ACCEPTANCE_LINES, grad_check
from test_schedule import brute_force_mask


def record(n, title, ok, detail=""):
    status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
    line = f"[{status}] criterion {n}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def load_schedule(path):
    return CacheSchedule.from_json(json.loads(path.read_text()))


def test_c01_null_cache_transparency():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatches = []
    for i in range(20):
        seed, nfe = int(rng.integers(0, 2**31)), int(rng.choice([8, 16, 32]))
        model = build_model(ModelConfig(), seed=seed)
        noise, cond = make_eval_samples(model.config, 1, seed, "acceptance")[0]
        cfg = SamplerConfig(nfe=nfe, seed=seed)
        x, _ = cached_infer(model, noise, cond, cfg, compute_all_schedule(model.config.depth, nfe))
        if x.tobytes() != reference_integrate(model, noise, cond, cfg).tobytes():
            mismatches.append((seed, nfe))
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 60
    record(1, "null-cache transparency", ok, f"20 runs, {len(mismatches)} mismatches, {elapsed:.1f}s")
    assert not mismatches
    assert elapsed < 60


def test_c02_compute_step_accounting(pipeline, trained_model):
    noise, cond = make_eval_samples(trained_model.config, 1, 0, "acceptance")[0]
    found = {}
    for name, nfe, c, expect in (("s32_q", 32, 8, 24), ("s16_q", 16, 4, 12)):
        sch = load_schedule(pipeline["dir"] / f"{name}.json")
        cached_counts = {int(m.sum()) for m in sch.masks.values()}
        _, stats = cached_infer(trained_model, noise, cond, SamplerConfig(nfe=nfe), sch)
        found[nfe] = (cached_counts, set(stats.compute_steps_per_layer.values()), expect, c)
    ok = all(cached == {c} and computes == {expect} for cached, computes, expect, c in found.values())
    detail = ", ".join(f"nfe {n}: cached {sorted(v[0])} -> compute {sorted(v[1])}" for n, v in found.items())
    record(2, "compute-step accounting 24 @ 32 / 12 @ 16", ok, detail)
    assert ok


def test_c03_schedule_builder_oracle():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        errors = rng.uniform(0, 0.5, n)
        alpha = float(rng.uniform(0.01, 0.5))
        mask = build_layer_mask(errors, alpha, 3)
        if (mask != brute_force_mask(errors, alpha, 3)).any() or mask[0] or longest_run(mask) > 3:
            bad += 1
    elapsed = time.perf_counter() - start
    record(3, "mask builder == brute force, cap and step 0 hold", bad == 0, f"1000 trials, {bad} bad, {elapsed:.1f}s")
    assert bad == 0


def test_c04_alpha_monotonicity():
    # Implemented as stated. The greedy rule is not monotone in alpha, so this is expected to fail;
    # see test_schedule.test_greedy_rule_is_not_alpha_monotone for a minimal counterexample.
    rng = np.random.default_rng(4)
    oracle_bad, violations, example = 0, 0, None
    alphas = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4]
    for _ in range(500):
        n = int(rng.integers(1, 12))
        errors = rng.uniform(0, 0.45, n)
        masks = [build_layer_mask(errors, a, 3) for a in alphas]
        oracle_bad += sum(int((m != brute_force_mask(errors, a, 3)).any()) for m, a in zip(masks, alphas))
        for lo, hi, a_lo, a_hi in zip(masks, masks[1:], alphas, alphas[1:]):
            if (lo & ~hi).any():
                violations += 1
                if example is None:
                    example = (np.round(errors, 3).tolist(), a_lo, a_hi)
                break
    ok = oracle_bad == 0 and violations == 0
    detail = f"500 profiles, oracle mismatches {oracle_bad}, non-nested profiles {violations}"
    if example:
        detail += f"; e.g. errors={example[0]} alpha {example[1]}->{example[2]}"
    record(4, "cached sets nested as alpha grows", ok, detail)
    assert oracle_bad == 0
    assert violations == 0, detail


def test_c05_strategy_identities():
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(100):
        depth, nfe = int(rng.integers(1, 6)), int(rng.integers(2, 40))
        prof = ErrorProfile(nfe, 1, {l: rng.uniform(0, 0.4, nfe - 1) for l in layer_ids(depth)})
        alpha = float(rng.uniform(0.05, 0.4))
        unified = apply_strategy(prof, alpha, 3, Strategy.UNIFIED_ATTN)
        attn_only = apply_strategy(prof, alpha, 3, Strategy.ATTN_ONLY)
        for b in range(depth):
            a, f = LayerId(b, Kind.ATTN), LayerId(b, Kind.FFN)
            if (unified.masks[f] != unified.masks[a]).any() or attn_only.masks[f].any():
                bad += 1
    record(5, "unified-attn ffn==attn, attn-only ffn all compute", bad == 0, f"100 profiles, {bad} bad")
    assert bad == 0


def test_c06_gradient_check():
    start = time.perf_counter()
    errs = grad_check()
    worst = max(errs, key=errs.get)
    elapsed = time.perf_counter() - start
    ok = errs[worst] < 1e-3 and elapsed < 60
    record(6, "analytic vs finite-difference gradients", ok,
           f"{len(errs)} tensors, worst {worst} rel err {errs[worst]:.2e}, {elapsed:.1f}s")
    assert errs[worst] < 1e-3
    assert elapsed < 60


def test_c07_calibration_shape_soft_gate(pipeline):
    profile = json.loads((pipeline["dir"] / "p32.json").read_text())
    shape = profile["shape_check"]
    frac = shape["first_exceeds_mid_median_fraction"]
    calib_stderr = next(r[3] for r in pipeline["results"] if r[0] == "calibrate")
    if shape["meets_expected_shape"]:
        record(7, "first-transition error > mid median for >= 60% of layers", True, f"fraction {frac:.2f}")
        return
    flagged = "shape flag" in calib_stderr and shape["meets_expected_shape"] is False
    record(7, "first-transition error > mid median for >= 60% of layers",
           "SOFT-FAIL (flagged)" if flagged else "FAIL", f"fraction {frac:.2f}; report flag present: {flagged}")
    assert flagged, "shape criterion unmet and not flagged in the calibration report"


def test_c08_speedup(pipeline, trained_model):
    sch = load_schedule(pipeline["dir"] / "s32_h.json")
    cfg = SamplerConfig(nfe=32)
    samples = make_eval_samples(trained_model.config, 16, 1, "eval")
    frac = np.mean([m.mean() for m in sch.masks.values()])
    base_ms, cache_ms = [], []
    with threadpool_limits(1):
        cached_infer(trained_model, *samples[0], cfg, None)
        cached_infer(trained_model, *samples[0], cfg, sch)
        for noise, cond in samples:
            base_ms.append(cached_infer(trained_model, noise, cond, cfg, None)[1].wall_ms)
            cache_ms.append(cached_infer(trained_model, noise, cond, cfg, sch)[1].wall_ms)
    speedup = np.mean(base_ms) / np.mean(cache_ms)
    record(8, "speedup >= 1.3x caching ~half the steps at NFE 32", speedup >= 1.3,
           f"cached fraction {frac:.3f}, {np.mean(base_ms):.1f} ms -> {np.mean(cache_ms):.1f} ms, {speedup:.2f}x")
    assert speedup >= 1.3


def test_c09_compute_parity_ablation(pipeline):
    reports = {r["nfe"]: r for r in json.loads((pipeline["dir"] / "compare.json").read_text())["reports"]}
    parts, ok = [], True
    for nfe, c in ((32, 8), (16, 4)):
        r = reports.get(nfe)
        good = (r is not None and r["cached_per_layer"] == c and r["compute_parity"]
                and all(isinstance(a["rel_l2"], float) for a in r["arms"]) and len(r["arms"]) == 2
                and set(r["arms"][0]["compute_steps_per_layer"].values()) == {nfe - c})
        ok &= bool(good)
        if r is not None:
            a, b = r["arms"]
            parts.append(f"nfe {nfe} c={r['cached_per_layer']}: cached rel_l2 {a['rel_l2']:.4f} "
                         f"vs {b['nfe']}-NFE {b['rel_l2']:.4f}")
    record(9, "compare parity at (32, 8) and (16, 4)", ok, "; ".join(parts))
    assert ok


def test_c10_end_to_end_pipeline(pipeline):
    codes = [(name, rc) for name, rc, _, _ in pipeline["results"]]
    ok = pipeline["complete"] and all(rc == 0 for _, rc in codes) and pipeline["elapsed_s"] < 600
    record(10, "train-toy -> calibrate -> schedule -> bench -> compare", ok,
           f"{len(codes)} steps, elapsed {pipeline['elapsed_s']:.0f}s, exit codes {[rc for _, rc in codes]}")
    assert ok, [(n, rc, err[-500:]) for n, rc, _, err in pipeline["results"] if rc]
