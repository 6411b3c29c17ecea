import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ditcache.model import Kind, LayerId, layer_ids
from ditcache.schedule import (CacheSchedule, DegenerateDenominatorError, ErrorProfile, Granularity, ScheduleError,
                               Strategy, alpha_for_fraction, apply_strategy, build_layer_mask,
                               compute_all_schedule, l1_relative_error, longest_run, schedule_stats,
                               unified_schedule)

C, X = False, True


def brute_force_mask(errors, alpha, cap):
    """Lexicographically greatest feasible mask (cached=1, step 0 most significant).

    Feasible: step 0 computes, only candidate steps (errors[j-1] < alpha) cache,
    no cached run longer than cap. Caching at the earliest opportunity is exactly
    the documented greedy rule, so this enumeration is an independent check of it.
    """
    n = len(errors) + 1
    best = None
    for bits in itertools.product((0, 1), repeat=n):
        if bits[0]:
            continue
        if any(b and not errors[j - 1] < alpha for j, b in enumerate(bits) if j):
            continue
        if longest_run(bits) > cap:
            continue
        best = bits  # product() yields in increasing lexicographic order
    return np.array(best, dtype=bool)


def random_profile(rng, depth, nfe, scale=1.0):
    return ErrorProfile(nfe, 1, {layer: rng.uniform(0, scale, nfe - 1) for layer in layer_ids(depth)})


def test_l1_relative_error_examples():
    h = np.array([1.0, -1.0, 2.0], np.float32)
    assert l1_relative_error(h, h) == 0.0
    assert l1_relative_error(np.array([1.5, -1.0, 1.0], np.float32), h) == pytest.approx(0.375, abs=1e-12)
    with pytest.raises(DegenerateDenominatorError):
        l1_relative_error(np.array([1.0, 2.0]), np.array([0.0, 0.0]))
    with pytest.raises(ValueError):
        l1_relative_error(np.zeros(2), np.ones(3))


def test_mask_documented_example():
    mask = build_layer_mask([0.5, 0.1, 0.05, 0.08, 0.09, 0.12, 0.4], 0.15, 3)
    assert mask.tolist() == [C, C, X, X, X, C, X, C]
    np.testing.assert_array_equal(mask, brute_force_mask([0.5, 0.1, 0.05, 0.08, 0.09, 0.12, 0.4], 0.15, 3))


def test_mask_nothing_below_alpha():
    assert not build_layer_mask([0.3, 0.2, 0.5], 0.15, 3).any()


def test_mask_everything_below_alpha():
    assert build_layer_mask([0.01] * 7, 0.15, 3).tolist() == [C, X, X, X, C, X, X, X]


def test_mask_threshold_is_strict():
    assert build_layer_mask([0.15], 0.15, 3).tolist() == [C, C]


def test_mask_argument_errors():
    with pytest.raises(ValueError):
        build_layer_mask([], 0.1, 3)
    with pytest.raises(ValueError):
        build_layer_mask([0.1], 0.0, 3)
    with pytest.raises(ValueError):
        build_layer_mask([0.1], 0.1, 0)


def test_mask_matches_brute_force_small():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 10))
        errors = rng.uniform(0, 1, n)
        alpha = float(rng.uniform(0.05, 1))
        cap = int(rng.integers(1, 4))
        np.testing.assert_array_equal(build_layer_mask(errors, alpha, cap), brute_force_mask(errors, alpha, cap))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0.01, 1.0), st.integers(1, 5))
def test_mask_constraints_hold(errors, alpha, cap):
    mask = build_layer_mask(errors, alpha, cap)
    assert len(mask) == len(errors) + 1
    assert not mask[0]
    assert longest_run(mask) <= cap
    for j, cached in enumerate(mask[1:]):
        if cached:
            assert errors[j] < alpha


def test_greedy_rule_is_not_alpha_monotone():
    # Documented limitation: widening the candidate set can shift where the forced compute lands.
    errors = [0.2, 0.1, 0.1, 0.1, 0.1]
    low = set(np.flatnonzero(build_layer_mask(errors, 0.15, 3)))
    high = set(np.flatnonzero(build_layer_mask(errors, 0.25, 3)))
    assert low == {2, 3, 4}
    assert high == {1, 2, 3, 5}
    assert not low <= high


def test_unified_attn_copies_per_block():
    prof = random_profile(np.random.default_rng(1), 3, 12, 0.4)
    sch = apply_strategy(prof, 0.2, 3, Strategy.UNIFIED_ATTN)
    for b in range(3):
        np.testing.assert_array_equal(sch.masks[LayerId(b, Kind.FFN)], sch.masks[LayerId(b, Kind.ATTN)])
        np.testing.assert_array_equal(sch.masks[LayerId(b, Kind.ATTN)],
                                      build_layer_mask(prof.errors[LayerId(b, Kind.ATTN)], 0.2, 3))


def test_unified_ffn_copies_per_block():
    prof = random_profile(np.random.default_rng(2), 2, 10, 0.4)
    sch = apply_strategy(prof, 0.2, 3, Strategy.UNIFIED_FFN)
    for b in range(2):
        np.testing.assert_array_equal(sch.masks[LayerId(b, Kind.ATTN)],
                                      build_layer_mask(prof.errors[LayerId(b, Kind.FFN)], 0.2, 3))


def test_single_kind_strategies():
    prof = random_profile(np.random.default_rng(3), 2, 10, 0.3)
    attn_only = apply_strategy(prof, 0.2, 3, Strategy.ATTN_ONLY)
    ffn_only = apply_strategy(prof, 0.2, 3, Strategy.FFN_ONLY)
    for b in range(2):
        assert not attn_only.masks[LayerId(b, Kind.FFN)].any()
        assert not ffn_only.masks[LayerId(b, Kind.ATTN)].any()


def test_independent_caches_more_ffn_when_ffn_errors_lower():
    rng = np.random.default_rng(4)
    nfe, depth = 20, 3
    errors = {}
    for b in range(depth):
        attn = rng.uniform(0.1, 0.5, nfe - 1)
        errors[LayerId(b, Kind.ATTN)] = attn
        errors[LayerId(b, Kind.FFN)] = attn * 0.5
    sch = apply_strategy(ErrorProfile(nfe, 1, errors), 0.2, 3, Strategy.INDEPENDENT)
    for b in range(depth):
        assert sch.masks[LayerId(b, Kind.FFN)].sum() >= sch.masks[LayerId(b, Kind.ATTN)].sum()


def test_unified_attn_equals_attn_only_on_attn_layers():
    rng = np.random.default_rng(5)
    for _ in range(50):
        prof = random_profile(rng, 2, 16, 0.5)
        u = apply_strategy(prof, 0.25, 3, Strategy.UNIFIED_ATTN)
        a = apply_strategy(prof, 0.25, 3, Strategy.ATTN_ONLY)
        for b in range(2):
            np.testing.assert_array_equal(u.masks[LayerId(b, Kind.ATTN)], a.masks[LayerId(b, Kind.ATTN)])


def test_type_granularity_shares_one_mask():
    prof = random_profile(np.random.default_rng(6), 4, 32, 0.3)
    sch = apply_strategy(prof, 0.15, 3, Strategy.UNIFIED_ATTN, Granularity.TYPE)
    expected = build_layer_mask(prof.kind_mean(Kind.ATTN), 0.15, 3)
    for mask in sch.masks.values():
        np.testing.assert_array_equal(mask, expected)


def test_schedule_stats_reference_counts():
    mask32 = np.zeros(32, bool)
    mask32[[1, 2, 3, 5, 6, 7, 9, 10]] = True
    st32 = schedule_stats(unified_schedule(4, mask32))
    assert set(st32["compute_per_layer"].values()) == {24}
    assert set(st32["cached_per_layer"].values()) == {8}
    mask16 = np.zeros(16, bool)
    mask16[[2, 3, 4, 6]] = True
    assert set(schedule_stats(unified_schedule(4, mask16))["compute_per_layer"].values()) == {12}
    assert schedule_stats(compute_all_schedule(4, 32))["compute_fraction"] == 1.0


def test_schedule_validation():
    bad0 = np.zeros(8, bool)
    bad0[0] = True
    with pytest.raises(ScheduleError, match="step 0"):
        unified_schedule(2, bad0)
    long_run = np.array([0, 1, 1, 1, 1, 0, 0, 0], bool)
    with pytest.raises(ScheduleError, match="cap"):
        unified_schedule(2, long_run)
    masks = {layer: np.zeros(6, bool) for layer in layer_ids(2)}
    masks[LayerId(1, Kind.FFN)][2] = True
    with pytest.raises(ScheduleError, match="unified"):
        CacheSchedule(6, masks, strategy=Strategy.UNIFIED_ATTN)
    CacheSchedule(6, masks, strategy=Strategy.INDEPENDENT)


def test_schedule_json_round_trip():
    prof = random_profile(np.random.default_rng(7), 3, 12, 0.4)
    sch = apply_strategy(prof, 0.2, 2, Strategy.INDEPENDENT)
    data = json.loads(json.dumps(sch.to_json()))
    assert set(data) >= {"version", "nfe", "alpha", "strategy", "max_consecutive", "masks"}
    assert set(data["masks"]) == {l.key for l in layer_ids(3)}
    back = CacheSchedule.from_json(data)
    assert back.to_json() == sch.to_json()
    assert back.fingerprint() == sch.fingerprint()


def test_profile_json_round_trip():
    prof = random_profile(np.random.default_rng(8), 2, 9)
    data = json.loads(json.dumps(prof.to_json()))
    back = ErrorProfile.from_json(data)
    assert back.nfe == 9 and back.sample_count == 1
    for layer, e in prof.errors.items():
        assert back.errors[layer].tobytes() == e.tobytes()


def test_profile_validation():
    with pytest.raises(ValueError):
        ErrorProfile(4, 1, {layer: np.zeros(2) for layer in layer_ids(1)})
    with pytest.raises(ValueError):
        ErrorProfile(3, 1, {layer: np.array([-0.1, 0.2]) for layer in layer_ids(1)})
    with pytest.raises(ValueError):
        ErrorProfile(3, 1, {LayerId(0, Kind.ATTN): np.zeros(2)})


def test_alpha_for_fraction_hits_targets():
    prof = random_profile(np.random.default_rng(9), 4, 32, 0.3)
    for target in (0.25, 0.5):
        alpha = alpha_for_fraction(prof, target)
        frac = schedule_stats(apply_strategy(prof, alpha, 3, Strategy.UNIFIED_ATTN, Granularity.TYPE))["cached_fraction"]
        assert abs(frac - target) <= 1 / 32
