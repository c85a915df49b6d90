import json

import numpy as np
import pytest

from zigprune.config import build_layers
from zigprune.data import generate_group_lasso
from zigprune.errors import NumericalFailureError, ParameterError
from zigprune.hspg import (
    OptimizerState,
    TrainConfig,
    compute_index_sets,
    half_space_project,
    hspg_step,
    prox_sg_step,
    sgd_step,
    train,
)
from zigprune.model import ModelGraph
from zigprune.oracle import bcd_oracle, least_squares_objective
from zigprune.regularizer import group_prox, sparsity_metrics, subgradient
from zigprune.zig import GroupPartition


def two_group_partition():
    return GroupPartition.from_indices(4, [[0, 1], [2, 3]])


QUAD_CENTER = np.array([0.01, 0.0, 1.0, 1.0], dtype=np.float32)


def quad_grad(x):
    return (x - QUAD_CENTER).astype(np.float32)


class TestIndexSets:
    def test_all_zero(self):
        p = two_group_partition()
        s = compute_index_sets(np.zeros(4, dtype=np.float32), p)
        assert list(s.zero) == [0, 1] and list(s.nonzero) == []

    def test_mixed(self):
        p = two_group_partition()
        s = compute_index_sets(np.array([0, 0, 1, 2], dtype=np.float32), p)
        assert list(s.zero) == [0] and list(s.nonzero) == [1]

    def test_exact_partition_on_random_vectors(self):
        rng = np.random.default_rng(0)
        p = GroupPartition.from_indices(9, [[0, 1, 2], [3, 4, 5], [6, 7, 8]])
        for _ in range(50):
            x = rng.standard_normal(9).astype(np.float32)
            x[rng.random(9) < 0.4] = 0.0
            s = compute_index_sets(x, p)
            both = sorted(list(s.zero) + list(s.nonzero))
            assert both == [0, 1, 2]
            for g in s.zero:
                assert np.all(x[p.groups[g].indices] == 0.0)
            for g in s.nonzero:
                assert np.any(x[p.groups[g].indices] != 0.0)


class TestHalfSpaceProject:
    def test_positive_alignment_kept(self):
        p = GroupPartition.from_indices(2, [[0, 1]])
        x = np.array([1.0, 0.0], dtype=np.float32)
        z = np.array([0.5, 0.2], dtype=np.float32)
        assert np.array_equal(half_space_project(z, x, p, 0.0), z)

    def test_negative_alignment_zeroed(self):
        p = GroupPartition.from_indices(2, [[0, 1]])
        x = np.array([1.0, 0.0], dtype=np.float32)
        z = np.array([-0.1, 0.3], dtype=np.float32)
        assert np.array_equal(
            half_space_project(z, x, p, 0.0), np.zeros(2, dtype=np.float32)
        )

    def test_aggressive_epsilon_threshold(self):
        p = GroupPartition.from_indices(2, [[0, 1]])
        x = np.array([1.0, 0.0], dtype=np.float32)
        z = np.array([0.4, 0.0], dtype=np.float32)
        assert np.array_equal(
            half_space_project(z, x, p, 0.5), np.zeros(2, dtype=np.float32)
        )

    def test_zero_groups_untouched(self):
        p = two_group_partition()
        x = np.array([0.0, 0.0, 1.0, 1.0], dtype=np.float32)
        z = np.array([0.3, 0.3, 1.0, 1.0], dtype=np.float32)
        out = half_space_project(z, x, p, 0.0)
        assert np.array_equal(out, z)  # group 0 is zero at x: left as given

    def test_identity_when_all_aligned_and_epsilon_zero(self):
        rng = np.random.default_rng(1)
        p = two_group_partition()
        for _ in range(20):
            x = rng.standard_normal(4).astype(np.float32)
            z = x * rng.uniform(0.5, 1.5)  # positively aligned per group
            assert np.array_equal(half_space_project(z.copy(), x, p, 0.0), z)

    def test_epsilon_range_validated(self):
        p = two_group_partition()
        with pytest.raises(ParameterError):
            half_space_project(np.zeros(4, np.float32), np.zeros(4, np.float32), p, 1.0)


class TestSteps:
    def test_subgradient_stage_zero_direction_keeps_x(self):
        p = two_group_partition()
        st = OptimizerState(x=QUAD_CENTER.copy(), alpha=0.1, lam=0.1, switch_iteration=50)
        info = hspg_step(st, np.zeros(4, dtype=np.float32), p)
        assert info["stage"] == "subgradient"
        assert np.array_equal(st.x, QUAD_CENTER)
        assert st.k == 1

    def test_zero_group_stays_zero_after_switch(self):
        p = two_group_partition()
        x0 = np.array([0.0, 0.0, 1.0, 1.0], dtype=np.float32)
        st = OptimizerState(x=x0, alpha=0.1, lam=0.1, switch_iteration=1, k=5)
        nu = np.array([5.0, -3.0, 0.1, 0.1], dtype=np.float32)
        info = hspg_step(st, nu, p)
        assert info["stage"] == "half_space"
        assert np.all(st.x[:2] == 0.0)  # frozen despite a nonzero direction

    def test_monotone_sparsity_over_run(self):
        p = two_group_partition()
        st = OptimizerState(x=QUAD_CENTER.copy(), alpha=0.1, lam=0.1, switch_iteration=10)
        prev_zero: set = set()
        for _ in range(200):
            nu = quad_grad(st.x) + subgradient(st.x, p, st.lam)
            hspg_step(st, nu, p)
            if st.k > st.switch_iteration:
                now_zero = set(compute_index_sets(st.x, p).zero.tolist())
                assert prev_zero <= now_zero
                prev_zero = now_zero

    def test_quadratic_support_matches_prox_oracle(self):
        # oracle solution of min 1/2||x-c||^2 + lam r(x) is the prox at c
        p = two_group_partition()
        lam = 0.1
        oracle = group_prox(QUAD_CENTER.copy(), p, lam)
        assert np.all(oracle[:2] == 0.0) and np.all(oracle[2:] != 0.0)

        st = OptimizerState(x=QUAD_CENTER.copy(), alpha=0.1, lam=lam, switch_iteration=50)
        for _ in range(2000):
            nu = quad_grad(st.x) + subgradient(st.x, p, lam)
            hspg_step(st, nu, p)
        assert np.all(st.x[:2] == 0.0)  # exact zeros, not small values
        assert np.all(st.x[2:] != 0.0)
        assert np.abs(st.x - oracle).max() <= 1e-3

    def test_prox_sg_zeroes_group_inside_ball(self):
        p = two_group_partition()
        st = OptimizerState(
            x=np.array([0.001, 0.001, 1, 1], dtype=np.float32), alpha=0.1, lam=0.5
        )
        prox_sg_step(st, np.zeros(4, dtype=np.float32), p)
        assert np.all(st.x[:2] == 0.0)

    def test_prox_sg_with_zero_lambda_is_sgd(self):
        p = two_group_partition()
        rng = np.random.default_rng(2)
        x0 = rng.standard_normal(4).astype(np.float32)
        g = rng.standard_normal(4).astype(np.float32)
        st1 = OptimizerState(x=x0.copy(), alpha=0.05, lam=0.0)
        st2 = OptimizerState(x=x0.copy(), alpha=0.05, lam=0.0)
        prox_sg_step(st1, g, p)
        sgd_step(st2, g)
        assert np.array_equal(st1.x, st2.x)

    def test_prox_sg_quadratic_support(self):
        p = two_group_partition()
        st = OptimizerState(x=QUAD_CENTER.copy(), alpha=0.1, lam=0.1, switch_iteration=1)
        for _ in range(2000):
            prox_sg_step(st, quad_grad(st.x), p)
        assert np.all(st.x[:2] == 0.0) and np.all(st.x[2:] != 0.0)

    def test_mechanism_gap_at_small_steps_under_noise(self):
        # with a deep-learning-scale step the prox zero region (radius
        # alpha*lam) is unreachable under gradient noise, while the
        # half-space projection still produces exact zeros
        p = two_group_partition()
        lam, alpha, iters = 0.1, 1e-4, 10_000

        def noisy_grad(x, rng):
            return (quad_grad(x) + 0.5 * rng.standard_normal(4)).astype(np.float32)

        rng = np.random.default_rng(0)
        st_h = OptimizerState(x=QUAD_CENTER.copy(), alpha=alpha, lam=lam, switch_iteration=1000)
        for _ in range(iters):
            nu = noisy_grad(st_h.x, rng) + subgradient(st_h.x, p, lam)
            hspg_step(st_h, nu, p)
        rng = np.random.default_rng(0)
        st_p = OptimizerState(x=QUAD_CENTER.copy(), alpha=alpha, lam=lam, switch_iteration=1)
        for _ in range(iters):
            prox_sg_step(st_p, noisy_grad(st_p.x, rng), p)

        assert np.all(st_h.x[:2] == 0.0)  # half-space: exact zeros
        assert np.any(st_p.x[:2] != 0.0)  # prox: hovers, never exactly zero
        assert np.all(st_h.x[2:] != 0.0) and np.all(st_p.x[2:] != 0.0)

    def test_non_finite_direction_raises_with_iteration(self):
        p = two_group_partition()
        st = OptimizerState(x=QUAD_CENTER.copy(), alpha=0.1, lam=0.1, k=7)
        bad = np.array([1.0, np.nan, 0.0, 0.0], dtype=np.float32)
        with pytest.raises(NumericalFailureError) as err:
            hspg_step(st, bad, p)
        assert err.value.iteration == 7
        with pytest.raises(NumericalFailureError):
            prox_sg_step(st, bad, p)
        with pytest.raises(NumericalFailureError):
            sgd_step(st, bad)

    def test_state_validation(self):
        with pytest.raises(ParameterError):
            OptimizerState(x=np.zeros(2), alpha=0.1, lam=0.0, epsilon=1.0)
        with pytest.raises(ParameterError):
            OptimizerState(x=np.zeros(2), alpha=0.0, lam=0.0)
        with pytest.raises(ParameterError):
            OptimizerState(x=np.zeros(2), alpha=0.1, lam=-1.0)
        with pytest.raises(ParameterError):
            OptimizerState(x=np.zeros(2), alpha=0.1, lam=0.0, switch_iteration=0)

    def test_alpha_decay_schedule(self):
        p = two_group_partition()
        st = OptimizerState(
            x=QUAD_CENTER.copy(), alpha=1.0, lam=0.0, decay=0.5, steps_per_epoch=2
        )
        for _ in range(4):
            sgd_step(st, np.zeros(4, dtype=np.float32))
        assert st.alpha == pytest.approx(0.25)


class TestProjectionGeometry:
    def test_kept_groups_satisfy_half_space_membership(self):
        # after a projection step every kept group satisfies
        # <x_{k+1}, x_k> >= eps ||x_k||^2 and every zeroed group satisfied
        # the descent inequality at the moment it was zeroed
        for eps in (0.0, 0.1):
            p = two_group_partition()
            st = OptimizerState(
                x=QUAD_CENTER.copy(), alpha=0.1, lam=0.1, epsilon=eps, switch_iteration=5
            )
            rng = np.random.default_rng(3)
            for _ in range(300):
                x_prev = st.x.copy()
                alpha_step = st.alpha
                nu = (
                    quad_grad(st.x)
                    + 0.05 * rng.standard_normal(4).astype(np.float32)
                    + subgradient(st.x, p, st.lam)
                )
                info = hspg_step(st, nu, p)
                if info["stage"] != "half_space":
                    continue
                s = p.pen_sqnorms(x_prev)
                d_new = p.pen_dots(st.x, x_prev)
                was_nonzero = p.pen_nonzero_counts(x_prev) > 0
                now_nonzero = p.pen_nonzero_counts(st.x) > 0
                kept = was_nonzero & now_nonzero
                assert np.all(d_new[kept] >= eps * s[kept])
                for g in info["zeroed"]:
                    xg = x_prev[p.groups[g].indices].astype(np.float64)
                    ng = nu[p.groups[g].indices].astype(np.float64)
                    assert xg @ ng > (1 - eps) * (xg @ xg) / alpha_step

    def test_ball_is_inside_the_projection_half_space(self):
        # any point of the ell2 ball of radius alpha*lam lands in the zeroing
        # region x_k^T v < (alpha lam + eps ||x_k||) ||x_k||
        rng = np.random.default_rng(4)
        for _ in range(50):
            n = int(rng.integers(2, 8))
            x = rng.standard_normal(n)
            alpha, lam, eps = rng.uniform(1e-4, 0.1), rng.uniform(0.01, 1.0), 0.1
            v = rng.standard_normal((1000, n))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            v *= alpha * lam * rng.uniform(0, 1, size=(1000, 1))
            lhs = v @ x
            bound = (alpha * lam + eps * np.linalg.norm(x)) * np.linalg.norm(x)
            assert np.all(lhs < bound)


def glasso_model(n_features):
    layers = build_layers(["linear:1"], (n_features,), "mse", "zeros", 0)
    return ModelGraph(layers, (n_features,))


class TestTrain:
    def make_problem(self, groups=10, size=4, support=3, samples=120, seed=6):
        ds, _ = generate_group_lasso(groups, size, support, samples, 0.01, seed)
        model = glasso_model(groups * size)
        lists = [np.arange(g * size, (g + 1) * size) for g in range(groups)]
        part = GroupPartition.from_indices(
            model.n_flat, lists + [[groups * size]], [True] * groups + [False]
        )
        return ds, model, part, lists

    def test_zero_epochs_returns_initial_state(self):
        ds, model, part, _ = self.make_problem()
        x0 = model.get_flat()
        cfg = TrainConfig(optimizer="hspg", alpha0=0.1, lam=0.1, epochs=0)
        x, trace = train(model, part, ds, cfg)
        assert trace == []
        assert np.array_equal(x, x0)

    def test_deterministic_replay_is_bitwise(self):
        ds, model, part, _ = self.make_problem()
        cfg = TrainConfig(
            optimizer="hspg", alpha0=0.05, lam=0.2, np_epochs=2, batch_size=16,
            epochs=6, seed=11,
        )
        x1, t1 = train(model.clone(), part, ds, cfg)
        x2, t2 = train(model.clone(), part, ds, cfg)
        assert np.array_equal(x1, x2)
        assert json.dumps(t1, sort_keys=True) == json.dumps(t2, sort_keys=True)

    def test_trace_schema(self):
        ds, model, part, _ = self.make_problem()
        cfg = TrainConfig(optimizer="hspg", alpha0=0.05, lam=0.2, np_epochs=1,
                          batch_size=32, epochs=3, seed=0)
        _, trace = train(model, part, ds, cfg)
        assert len(trace) == 3
        for entry in trace:
            assert set(entry) == {
                "epoch", "loss", "objective", "group_sparsity", "zero_groups",
                "alpha", "stage",
            }
        assert trace[0]["stage"] == "subgradient"
        assert trace[-1]["stage"] == "half_space"

    def test_reaches_bcd_oracle_objective(self):
        ds, model, part, lists = self.make_problem()
        lam = 0.3
        cfg = TrainConfig(
            optimizer="hspg", alpha0=0.05, lam=lam, np_epochs=40,
            batch_size=120, epochs=200, seed=1,
        )
        x, _ = train(model, part, ds, cfg)
        aug = np.hstack([ds.inputs.astype(np.float64), np.ones((ds.n, 1))])
        y64 = ds.targets.astype(np.float64)
        xo = bcd_oracle(aug, y64, lists, lam, tol=1e-10, free=[len(lists) * 4])
        psi_o = least_squares_objective(aug, y64, xo, lists, lam)
        psi_h = least_squares_objective(aug, y64, x.astype(np.float64), lists, lam)
        assert psi_h <= 1.01 * psi_o
        sup_o = {g for g, idx in enumerate(lists) if np.any(xo[idx] != 0)}
        sup_h = {g for g, idx in enumerate(lists) if np.any(x[idx] != 0)}
        assert sup_h == sup_o

    def test_sgd_baseline_ignores_regularizer(self):
        ds, model, part, _ = self.make_problem()
        cfg = TrainConfig(optimizer="sgd", alpha0=0.05, lam=0.0, batch_size=32,
                          epochs=10, seed=2)
        x, trace = train(model, part, ds, cfg)
        assert trace[-1]["loss"] < trace[0]["loss"]
        assert sparsity_metrics(x, part).zero_groups == 0

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_numerical_failure_carries_epoch_and_step(self):
        ds, model, part, _ = self.make_problem()
        cfg = TrainConfig(optimizer="sgd", alpha0=1e6, lam=0.0, batch_size=32,
                          epochs=50, seed=3)
        with pytest.raises(NumericalFailureError, match="epoch"):
            train(model, part, ds, cfg)

    def test_callback_sees_every_step(self):
        ds, model, part, _ = self.make_problem()
        seen = []
        cfg = TrainConfig(optimizer="hspg", alpha0=0.01, lam=0.1, np_epochs=1,
                          batch_size=40, epochs=2, seed=4)
        train(model, part, ds, cfg, callback=lambda st, info: seen.append(info["k"]))
        assert seen == list(range(6))
