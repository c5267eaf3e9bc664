"""Class-coverage statistics: counting and sorted-interpolation oracles plus
serialization round trips."""

import numpy as np
import pytest

from segadapt import IGNORE_LABEL
from segadapt.stats import (ClassStats, StatsFormatError, compute_stats,
                            coverage, load_stats, save_stats)


def percentile_reference(values, q):
    """Sorted linear-interpolation percentile, independent of numpy."""
    v = sorted(values)
    if len(v) == 1:
        return v[0]
    pos = q / 100.0 * (len(v) - 1)
    lo = int(pos)
    frac = pos - lo
    if lo + 1 >= len(v):
        return v[-1]
    return v[lo] * (1 - frac) + v[lo + 1] * frac


def test_coverage_matches_pixel_count_oracle():
    rng = np.random.default_rng(30)
    for _ in range(50):
        n = int(rng.integers(2, 7))
        lm = rng.integers(0, n, size=(9, 9))
        lm[rng.uniform(size=lm.shape) < 0.15] = IGNORE_LABEL
        if np.all(lm == IGNORE_LABEL):
            continue
        d = coverage(lm, n)
        valid = lm[lm != IGNORE_LABEL]
        for c in range(n):
            assert d[c] == np.count_nonzero(valid == c) / valid.size
        assert abs(d.sum() - 1.0) < 1e-12


def test_coverage_errors():
    with pytest.raises(ValueError):
        coverage(np.full((3, 3), IGNORE_LABEL), 4)
    with pytest.raises(ValueError):
        coverage(np.full((3, 3), 5), 4)


def test_compute_stats_matches_sorted_interpolation_reference():
    rng = np.random.default_rng(31)
    for _ in range(50):
        n = int(rng.integers(2, 6))
        maps = [rng.integers(0, n, size=(8, 8)) for _ in range(int(rng.integers(2, 10)))]
        stats = compute_stats(maps, n)
        per_class = [[] for _ in range(n)]
        for lm in maps:
            d = coverage(lm, n)
            for c in range(n):
                if d[c] > 0:
                    per_class[c].append(d[c])
        for c in range(n):
            if not per_class[c]:
                assert stats.n[c] == 0 and not stats.usable(c)
                continue
            assert stats.n[c] == len(per_class[c])
            assert abs(stats.alpha[c] - percentile_reference(per_class[c], 10)) < 1e-12
            assert abs(stats.delta[c] - np.mean(per_class[c])) < 1e-12
            assert abs(stats.gamma[c] - percentile_reference(per_class[c], 90)) < 1e-12


def test_compute_stats_is_order_invariant():
    rng = np.random.default_rng(5)
    maps = [rng.integers(0, 4, size=(6, 6)) for _ in range(7)]
    a = compute_stats(maps, 4)
    b = compute_stats(maps[::-1], 4)
    assert np.array_equal(a.alpha, b.alpha)
    assert np.allclose(a.delta, b.delta, rtol=0, atol=1e-15)
    assert np.array_equal(a.gamma, b.gamma)


def test_hand_authored_fixture():
    # class 1 covers 1/4, 1/2, 3/4 of three 2x2 maps; class 0 fills the rest
    maps = [np.array([[0, 0], [0, 1]]),
            np.array([[0, 0], [1, 1]]),
            np.array([[0, 1], [1, 1]])]
    stats = compute_stats(maps, 2)
    assert stats.n[1] == 3
    assert abs(stats.delta[1] - 0.5) < 1e-12
    # percentiles of (0.25, 0.5, 0.75): 10th -> 0.3, 90th -> 0.7
    assert abs(stats.alpha[1] - 0.30) < 1e-12
    assert abs(stats.gamma[1] - 0.70) < 1e-12


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    maps = [rng.integers(0, 5, size=(8, 8)) for _ in range(9)]
    stats = compute_stats(maps, 5, class_names=list("abcde"))
    path = tmp_path / "stats.json"
    save_stats(stats, path)
    back = load_stats(path)
    assert back.num_classes == 5
    assert back.class_names == list("abcde")
    assert np.allclose(back.alpha, stats.alpha)
    assert np.allclose(back.delta, stats.delta)
    assert np.allclose(back.gamma, stats.gamma)
    assert np.array_equal(back.n, stats.n)


def test_load_rejects_bad_schema_and_inverted_bounds(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"schema": "something-else"}')
    with pytest.raises(StatsFormatError):
        load_stats(path)

    stats = ClassStats(1, np.array([0.5]), np.array([0.4]), np.array([0.2]),
                       np.array([3]))
    save_stats(stats, path)
    with pytest.raises(StatsFormatError):
        load_stats(path)   # alpha > gamma
