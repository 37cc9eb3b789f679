from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reachaudit.core import RatingsDataset
from reachaudit.errors import DomainError
from reachaudit.metrics import (
    CSV_COLUMNS,
    PairMetrics,
    aggregate,
    availability,
    average_ranks,
    bias_tables,
    discovery,
    lift,
    quartile_bins,
    rank_gain,
    read_pairs_csv,
    spearman,
    write_pairs_csv,
)


def row(user, item, rho_star, rho_0, beta="1.0", error=""):
    return PairMetrics(user, item, beta, rho_star, rho_0, lift(rho_star, rho_0)[0], 0, True, 3, 1e-9, error)


class TestDiscovery:
    def test_one_strict_exceedance(self):
        assert discovery([0.5, 0.3, 0.2], 1 / 3) == pytest.approx(1 / 3)

    def test_uniform_is_zero(self):
        assert discovery([0.25] * 4) == 0.0

    def test_all_one(self):
        assert discovery([1.0, 1.0, 1.0]) == 1.0

    def test_empty(self):
        with pytest.raises(DomainError):
            discovery([])


class TestAvailability:
    def test_mean(self):
        assert availability([0.2, 0.4]) == pytest.approx(0.3)

    def test_single_user(self):
        assert availability([0.37]) == 0.37

    def test_zero_zero_one(self):
        assert availability([0.0, 0.0, 1.0]) == pytest.approx(1 / 3)

    def test_no_users_is_flagged(self):
        assert availability([]) is None


class TestLiftAndRankGain:
    def test_equal(self):
        assert lift(0.3, 0.3) == (1.0, 0.0)

    def test_ratio(self):
        lam, log_lam = lift(0.2, 0.05)
        assert lam == pytest.approx(4.0)
        assert log_lam == pytest.approx(math.log(4.0))

    def test_zero_baseline_sentinel(self):
        assert lift(0.1, 0.0) == (math.inf, math.inf)

    def test_rank_gain(self):
        assert rank_gain(7, 2) == 5
        assert rank_gain(1, 1) == 0


class TestSpearman:
    def test_increasing(self):
        assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0

    def test_reversed(self):
        assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0

    def test_hand_case(self):
        assert abs(spearman([1, 2, 3, 4], [1, 3, 2, 4]) - 0.8) <= 1e-12

    def test_constant_is_missing(self):
        assert spearman([1, 2, 3], [5, 5, 5]) is None

    def test_too_short_is_missing(self):
        assert spearman([1, 2], [2, 1]) is None

    def test_average_ranks_with_ties(self):
        np.testing.assert_array_equal(average_ranks([10, 20, 20, 5]), [2.0, 3.5, 3.5, 1.0])

    def test_matches_scipy(self):
        from scipy.stats import spearmanr

        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.integers(0, 5, 12).astype(float)
            y = x + rng.integers(0, 4, 12)
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                continue
            assert spearman(x, y) == pytest.approx(spearmanr(x, y).statistic, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=20, unique=True))
    def test_strictly_monotone_transform_gives_one(self, xs):
        x = np.array(xs)
        # cube of the position in sorted order: strictly increasing in x even in floating point
        y = np.argsort(np.argsort(x)).astype(float) ** 3
        assert spearman(x, y) == pytest.approx(1.0)


class TestCsv:
    def test_round_trip_is_exact(self, tmp_path):
        rows = [row(0, 1, 0.123456789012345678, 0.1), row(0, 2, 1 / 3, 0.0, error=""), row(1, 4, math.nan, math.nan, error="numeric")]
        write_pairs_csv(rows, tmp_path / "p.csv")
        back = read_pairs_csv(tmp_path / "p.csv")
        assert back[0] == rows[0]
        assert back[1].lift == math.inf
        assert back[2].error_code == "numeric" and math.isnan(back[2].rho_star)
        assert (tmp_path / "p.csv").read_text().splitlines()[0] == ",".join(CSV_COLUMNS)

    def test_bad_header(self, tmp_path):
        (tmp_path / "p.csv").write_text("a,b\n")
        with pytest.raises(DomainError):
            read_pairs_csv(tmp_path / "p.csv")


class TestAggregate:
    def rows(self):
        return [
            row(0, 1, 0.6, 0.2),
            row(0, 2, 0.3, 0.5),
            row(0, 3, 0.1, 0.3),
            row(1, 1, 0.4, 0.4),
            row(1, 2, 0.2, 0.1),
            row(1, 3, 0.9, 0.5, error="numeric"),
        ]

    def test_discovery_per_user(self):
        rep = aggregate(self.rows())
        d0 = rep.discovery["1.0"][0]
        assert d0["threshold"] == pytest.approx(1 / 3)
        assert d0["best"] == pytest.approx(1 / 3)
        assert d0["baseline"] == pytest.approx(1 / 3)
        # errored pair counts toward the target total but not the exceedances
        d1 = rep.discovery["1.0"][1]
        assert d1["n_targets"] == 3
        assert d1["best"] == pytest.approx(0.5)

    def test_availability_per_item(self):
        rep = aggregate(self.rows())
        a1 = rep.availability["1.0"][1]
        assert a1["best"] == pytest.approx(0.5)
        assert a1["baseline"] == pytest.approx(0.3)
        assert rep.availability["1.0"][3]["n_users"] == 1
        assert rep.n_errors == 1 and rep.n_pairs == 6

    def test_bias_tables_monotone(self):
        # item popularity (mean rating) increasing with id, availability too
        users, items, vals = [], [], []
        for i in range(6):
            for u in range(3):
                users.append(u)
                items.append(i)
                vals.append(1.0 + 0.5 * i + 0.1 * u)
        data = RatingsDataset(3, 6, users, items, vals, (1, 5))
        rows = [row(u, i, 0.1 * i + 0.01, 0.05 * i + 0.01) for u in range(3) for i in range(6)]
        rep = bias_tables(aggregate(rows), data)
        corr = rep.correlations["1.0"]
        assert corr["popularity_vs_baseline_availability"] == pytest.approx(1.0)
        assert corr["popularity_vs_max_availability"] == pytest.approx(1.0)
        assert len(rep.bins["1.0"]["popularity"]) == 4

    def test_constant_availability_is_missing(self):
        data = RatingsDataset(2, 4, [0, 0, 1, 1], [0, 1, 2, 3], [1.0, 2.0, 3.0, 4.0], (1, 5))
        rows = [row(u, i, 0.25, 0.25) for u in range(2) for i in range(4)]
        rep = bias_tables(aggregate(rows), data)
        assert rep.correlations["1.0"]["popularity_vs_baseline_availability"] is None

    def test_quartile_bins_equal_counts(self):
        labels = quartile_bins(np.arange(8.0)[::-1])
        np.testing.assert_array_equal(np.bincount(labels), [2, 2, 2, 2])
        assert labels[0] == 3 and labels[-1] == 0
