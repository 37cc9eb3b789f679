from __future__ import annotations

import json

import numpy as np
import pytest

from reachaudit.audit import (
    AuditConfig,
    audit_user,
    build_action_space,
    build_target_set,
    load_config,
    run_audit,
    write_report,
)
from reachaudit.core import ActionKind, RatingsDataset
from reachaudit.errors import DataError, DomainError
from reachaudit.ingest import write_ratings
from reachaudit.metrics import read_pairs_csv
from reachaudit.models import FactorModel, affine_update, predict_scores, train_mf_sgd
from reachaudit.solver import ReachProblem, max_reachability
from reachaudit.synthetic import planted_popularity


def five_by_six():
    users = [0, 0, 1, 1, 2, 3, 3, 4]
    items = [0, 1, 1, 2, 3, 4, 5, 0]
    vals = [5.0, 3.0, 4.0, 2.0, 1.0, 5.0, 4.0, 2.0]
    return RatingsDataset(5, 6, users, items, vals, (1, 5))


def hand_factor_model():
    P = np.array([[1.0, 0.5], [-0.5, 1.0], [0.2, -0.3], [0.8, 0.8], [-1.0, 0.1]])
    Q = np.array([[0.5, 0.1], [0.3, -0.4], [-0.2, 0.6], [0.9, 0.2], [-0.4, -0.4], [0.1, 0.7]])
    return FactorModel(P, Q, np.array([0.1, -0.2, 0.0, 0.3, 0.1]), np.linspace(-0.5, 0.5, 6), 3.0)


def cfg(tmp_path, **kw):
    base = dict(dataset_path="unused.csv", out_dir=str(tmp_path / "out"), action_kind="future", action_k=2)
    base.update(kw)
    return AuditConfig(**base)


class TestConfig:
    def test_unknown_key_is_an_error(self):
        with pytest.raises(DomainError, match="unknown config keys: colour"):
            AuditConfig.from_mapping({"dataset_path": "x", "colour": "red"})

    def test_missing_dataset(self):
        with pytest.raises(DomainError):
            AuditConfig.from_mapping({})

    def test_invariants(self):
        with pytest.raises(DomainError):
            AuditConfig("x", action_k=0)
        with pytest.raises(DomainError):
            AuditConfig("x", betas=[1.0, -2.0])
        with pytest.raises(DomainError):
            AuditConfig("x", n_targets=0)
        with pytest.raises(ValueError):
            AuditConfig("x", action_kind="sideways")

    def test_load_resolves_relative_paths(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"dataset_path": "r.csv", "betas": [1, 4]}))
        c = load_config(tmp_path / "c.json")
        assert c.resolve(c.dataset_path) == tmp_path / "r.csv"
        assert c.betas == (1.0, 4.0)

    def test_round_trip_through_dict(self):
        c = AuditConfig("x", betas=(2.0,), n_users=3)
        assert AuditConfig.from_mapping(c.to_dict()) == c


class TestActionSpace:
    def test_history_all_rated(self):
        d = five_by_six()
        rng = np.random.default_rng(0)
        space = build_action_space(d, 0, "history", 2, np.zeros(6), rng)
        assert sorted(space.items) == [0, 1]
        assert space.kind is ActionKind.HISTORY

    def test_next_one_is_top_unseen(self):
        d = five_by_six()
        scores = np.array([9.0, 8.0, 1.0, 7.0, 7.0, 0.0])
        space = build_action_space(d, 0, "next", 1, scores, np.random.default_rng(0))
        assert space.items == (3,)

    def test_future_is_seeded(self):
        d = five_by_six()
        a = build_action_space(d, 2, "future", 3, np.zeros(6), np.random.default_rng([5, 2]))
        b = build_action_space(d, 2, "future", 3, np.zeros(6), np.random.default_rng([5, 2]))
        assert a == b
        assert not set(a.items) & {3}

    def test_insufficient_items(self):
        d = five_by_six()
        with pytest.raises(DataError):
            build_action_space(d, 2, "history", 2, np.zeros(6), np.random.default_rng(0))
        with pytest.raises(DataError):
            build_action_space(d, 0, "future", 5, np.zeros(6), np.random.default_rng(0))

    def test_box_is_rating_range(self):
        space = build_action_space(five_by_six(), 0, "next", 2, np.zeros(6), np.random.default_rng(0))
        assert space.bounds == (1.0, 5.0)


class TestTargetSet:
    def test_repeatable(self):
        d = five_by_six()
        space = build_action_space(d, 0, "future", 2, np.zeros(6), np.random.default_rng(0))
        targets = build_target_set(d, 0, space, repeatable=True)
        assert len(targets) == 6 - 2
        assert not set(targets.items) & set(space.items)

    def test_non_repeatable(self):
        d = five_by_six()
        space = build_action_space(d, 0, "future", 2, np.zeros(6), np.random.default_rng(0))
        targets = build_target_set(d, 0, space, repeatable=False)
        assert len(targets) == 6 - len(set(d.observed(0)) | set(space.items))

    def test_sample_exact_and_seeded(self):
        data = RatingsDataset(1, 3000, [0], [0], [3.0], (1, 5))
        space = build_action_space(data, 0, "future", 5, np.zeros(3000), np.random.default_rng(1))
        a = build_target_set(data, 0, space, False, 500, np.random.default_rng(9))
        b = build_target_set(data, 0, space, False, 500, np.random.default_rng(9))
        assert len(a) == 500 and a == b

    def test_too_few_targets(self):
        d = RatingsDataset(1, 3, [0], [0], [3.0], (1, 5))
        space = build_action_space(d, 0, "future", 1, np.zeros(3), np.random.default_rng(0))
        with pytest.raises(DataError):
            build_target_set(d, 0, space, repeatable=False)


class TestRunAudit:
    def test_no_agency_model_has_unit_lift(self, tmp_path):
        d = five_by_six()
        m = FactorModel(np.ones((5, 2)), np.zeros((6, 2)), np.zeros(5), np.linspace(0, 1, 6), 3.0)
        res = run_audit(cfg(tmp_path, n_users=1, n_targets=2, betas=[1.0]), d, m)
        assert len(res.rows) == 2
        assert all(r.lift == 1.0 and r.rank_gain == 0 for r in res.rows)

    def test_rows_match_standalone_solver_bit_exactly(self, tmp_path):
        d, m = five_by_six(), hand_factor_model()
        c = cfg(tmp_path, betas=[1.0, 4.0], repeatable=True)
        res = run_audit(c, d, m)
        assert res.rows
        for r in res.rows:
            space = build_action_space(d, r.user, "future", 2, predict_scores(m, r.user), np.random.default_rng([0, 2, r.user]))
            targets = build_target_set(d, r.user, space, True, None, np.random.default_rng([0, 2, r.user]))
            upd = affine_update(m, space, c.update_config, d)
            solo = max_reachability(ReachProblem.from_update(upd, targets, r.item, float(r.beta)))
            assert r.rho_star == solo.rho
            assert r.iters == solo.iterations

    def test_row_count_and_flags(self, tmp_path):
        d, m = five_by_six(), hand_factor_model()
        res = run_audit(cfg(tmp_path, betas=[1.0, 2.0, 10.0], n_targets=3, repeatable=True), d, m)
        per_user = {}
        for r in res.rows:
            per_user.setdefault(r.user, set()).add(r.item)
        assert len(res.rows) == sum(len(v) for v in per_user.values()) * 3
        assert all(r.converged in (True, False) and r.iters >= 0 for r in res.rows)
        assert all(r.rho_star >= r.rho_0 - 1e-12 or r.rho_0 > 0 for r in res.rows)

    def test_skipped_users_are_recorded(self, tmp_path):
        d, m = five_by_six(), hand_factor_model()
        res = run_audit(cfg(tmp_path, action_kind="history", action_k=2), d, m)
        assert set(res.skipped) == {2, 4}
        meta = json.loads((tmp_path / "out" / "aggregate.json").read_text())["meta"]
        assert meta["n_users_skipped"] == 2

    def test_json_aggregates_match_csv_recomputation(self, tmp_path):
        d, m = five_by_six(), hand_factor_model()
        run_audit(cfg(tmp_path, repeatable=True), d, m)
        rows = read_pairs_csv(tmp_path / "out" / "pairs.csv")
        write_report(rows, d, tmp_path / "again")
        first = json.loads((tmp_path / "out" / "aggregate.json").read_text())
        again = json.loads((tmp_path / "again" / "aggregate.json").read_text())
        for key in ("discovery", "availability", "n_pairs", "n_errors"):
            assert first[key] == again[key]
        assert (tmp_path / "out" / "bias_tables.json").read_text() == (tmp_path / "again" / "bias_tables.json").read_text()

    def test_repeat_and_worker_invariance(self, tmp_path):
        data, _ = planted_popularity(12, 40, seed=1)
        m = train_mf_sgd(data, dim=3, epochs=5, seed=0)
        outs = []
        for k, workers in enumerate((1, 1, 3)):
            c = cfg(tmp_path / str(k), workers=workers, n_targets=5, betas=[1.0, 10.0])
            run_audit(c, data, m)
            outs.append((tmp_path / str(k) / "out" / "pairs.csv").read_bytes())
        assert outs[0].count(b"\n") > 50
        assert outs[0] == outs[1] == outs[2]

    def test_epsilon_greedy_rows(self, tmp_path):
        d, m = five_by_six(), hand_factor_model()
        c = cfg(tmp_path, rule="epsilon_greedy", epsilon=0.1, repeatable=True)
        rows, reason = audit_user(c, d, m, 0)
        assert reason is None
        n = len(rows)
        for r in rows:
            assert r.beta == ""
            assert r.rho_star in (pytest.approx(0.9), pytest.approx(0.1 / (n - 1)))

    def test_end_to_end_from_file(self, tmp_path):
        data, _ = planted_popularity(10, 40, seed=2)
        write_ratings(data, tmp_path / "r.csv")
        c = AuditConfig(
            "r.csv",
            rating_min=1,
            rating_max=5,
            model="knn",
            knn_neighbors=5,
            action_k=2,
            repeatable=True,
            n_targets=4,
            base_dir=str(tmp_path),
        )
        res = run_audit(c)
        assert (tmp_path / "audit_out" / "pairs.csv").exists()
        assert res.report.n_pairs == len(res.rows) > 0
