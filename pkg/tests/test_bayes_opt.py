"""Tests for core/bayes_opt.py"""
import math
import os

import numpy as np
import pytest
from scipy.stats import norm, qmc

from core.bayes_opt import (
    BUG_BIN, GAP_LOWER, GAP_UPPER, BayesOptError, BoSettings, CoverageObjective, EiState,
    GpHyperparams, NegativeSigma, ParameterSpace, SimulatorError, SingularKernel,
    default_n_init, expected_improvement, gp_fit, gp_predict, history_rows, random_search,
    run_optimization, search_extremes, suggest_next,
)
from core.bins import Bin, BinGrid
from core.coverage_engine import RANGE, CoverPoint
from core.coverage_space import CoverageDatabase
from core.coverpoint_spec import load_coverpoint_spec
from core.model_library import load_model, make_simulator

SPECS_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "resources", "specs")

OUT_RANGE = CoverPoint("y", RANGE, signal="output")
# small candidate sets keep the loops quick
FAST = BoSettings(n_candidates=256, n_restarts=3)


def forrester(x):
    return (6 * x - 2) ** 2 * np.sin(12 * x - 4)


@pytest.fixture(scope="module")
def forrester_sim():
    return make_simulator(load_model("forrester"))


@pytest.fixture(scope="module")
def unit_space():
    return ParameterSpace(((0.0, 1.0),), ("x",))


class TestExpectedImprovement:
    def test_zero_sigma_is_exact(self):
        assert expected_improvement(1.0, 0.0, 3.0) == 2.0
        assert expected_improvement(3.0, 0.0, 1.0) == 0.0

    def test_closed_form(self):
        mu, sigma, f_star = 0.3, 0.5, 0.1
        z = (f_star - mu) / sigma
        expected = (f_star - mu) * norm.cdf(z) + sigma * norm.pdf(z)
        assert expected_improvement(mu, sigma, f_star) == pytest.approx(expected)

    def test_negative_sigma(self):
        with pytest.raises(NegativeSigma):
            expected_improvement(0.0, -1e-3, 1.0)

    def test_vectorized(self):
        ei = expected_improvement(np.array([0.0, 1.0]), np.array([1.0, 0.0]), 0.5)
        assert ei.shape == (2,)
        assert ei[1] == 0.0
        assert np.all(ei >= 0)

    def test_monotone_in_incumbent(self):
        values = [expected_improvement(0.0, 1.0, f) for f in np.linspace(-3, 3, 25)]
        assert np.all(np.diff(values) > 0)

    def test_at_incumbent_is_pdf_at_zero(self):
        assert expected_improvement(0.7, 1.0, 0.7) == pytest.approx(0.39894, abs=1e-5)
        assert expected_improvement(1.5, 0.0, 0.5) == 0.0

    @pytest.mark.parametrize("mu, f_star", [(1.0, 0.5), (0.0, 0.0), (2.0, 0.0)])
    def test_nondecreasing_in_sigma_without_mean_improvement(self, mu, f_star):
        values = expected_improvement(np.full(301, mu), np.linspace(0.0, 3.0, 301), f_star)
        assert np.all(np.diff(values) >= 0)

    @pytest.mark.parametrize("mu, f_star", [(1.0, 0.0), (0.0, 1.0), (0.25, 0.25)])
    def test_small_sigma_limit(self, mu, f_star):
        assert expected_improvement(mu, 1e-12, f_star) == pytest.approx(max(f_star - mu, 0.0), abs=1e-11)

    def test_monte_carlo_reference_case(self):
        draws = np.maximum(1.0 - np.random.default_rng(0).standard_normal(1_000_000), 0.0)
        se = draws.std(ddof=1) / math.sqrt(draws.size)
        assert abs(draws.mean() - expected_improvement(0.0, 1.0, 1.0)) <= 3 * se

    def test_matches_sampled_expectation(self):
        # scrambled-Sobol normal draws, shared across triples
        u = qmc.Sobol(d=1, scramble=True, seed=5).random_base2(m=16)[:, 0]
        z = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
        rng = np.random.default_rng(12)
        for _ in range(1000):
            mu, sigma = rng.normal(), rng.uniform(0.05, 2.0)
            f_star = mu + sigma * rng.uniform(-3.0, 3.0)
            draws = np.maximum(f_star - (mu + sigma * z), 0.0)
            se = draws.std(ddof=1) / math.sqrt(draws.size)
            assert abs(draws.mean() - expected_improvement(mu, sigma, f_star)) <= 3 * se + 1e-12


class TestGaussianProcess:
    def test_single_point(self):
        mean, _ = gp_predict(gp_fit([[0.0]], [5.0]), [0.0])
        assert mean == pytest.approx(5.0, abs=1e-6)

    def test_two_points(self):
        p = gp_fit([[0.0], [1.0]], [0.0, 1.0])
        mean, sd = p.predict([[0.0], [1.0]])
        assert mean == pytest.approx([0.0, 1.0], abs=1e-6)
        assert sd[0] <= 1e-3

    def test_interpolates_training_data(self):
        X = np.linspace(0.0, 1.0, 6)
        y = np.sin(6 * X)
        hp = GpHyperparams(lengthscales=(0.2,), signal_variance=1.0, jitter=1e-10)
        p = gp_fit(X, y, hyperparams=hp)
        mean, sd = p.predict(X[:, None])
        assert p.jitter <= 1e-8
        assert mean == pytest.approx(y, abs=1e-6)
        assert np.all(sd < 1e-3)

    @pytest.mark.parametrize("lengthscale, n", [(0.05, 20), (0.1, 30), (0.3, 40), (0.1, 50)])
    def test_matches_dense_solve(self, lengthscale, n):
        rng = np.random.default_rng(n)
        X = rng.random((n, 1))
        y = np.sin(2 * np.pi * X[:, 0]) + 0.5 * X[:, 0] ** 2
        hp = GpHyperparams(lengthscales=(lengthscale,), signal_variance=1.7, prior_mean=0.3)
        p = gp_fit(X, y, hyperparams=hp)

        Xs = np.linspace(0.0, 1.0, 201)[:, None]
        K = np.exp(-0.5 * ((X - X.T) / lengthscale) ** 2) + p.jitter * np.eye(n)
        Ks = np.exp(-0.5 * ((Xs - X.T) / lengthscale) ** 2)
        expected_mean = 0.3 + Ks @ np.linalg.solve(K, y - 0.3)
        expected_var = 1.7 * (1.0 - np.sum(Ks * np.linalg.solve(K, Ks.T).T, axis=1))

        mean, sd = p.predict(Xs)
        assert np.max(np.abs(mean - expected_mean)) <= 1e-8
        assert np.max(np.abs(sd ** 2 - np.clip(expected_var, 0.0, None))) <= 1e-8

    def test_midpoint_matches_direct_inverse(self):
        hp = GpHyperparams(lengthscales=(1.0,), signal_variance=1.0, prior_mean=0.0)
        p = gp_fit([[0.0], [1.0]], [0.0, 1.0], hyperparams=hp)
        K = np.array([[1.0, math.exp(-0.5)], [math.exp(-0.5), 1.0]]) + p.jitter * np.eye(2)
        k = np.array([math.exp(-0.125), math.exp(-0.125)])
        mean, _ = gp_predict(p, [0.5])
        assert mean == pytest.approx(float(k @ np.linalg.inv(K) @ np.array([0.0, 1.0])), abs=1e-12)

    def test_uncertainty_grows_away_from_data(self):
        p = gp_fit([[0.0], [0.1], [0.2]], [0.0, 0.5, 0.2])
        _, near = gp_predict(p, [0.1])
        _, far = gp_predict(p, [0.9])
        assert far > near

    def test_fixed_hyperparams_revert_to_prior(self):
        hp = GpHyperparams(lengthscales=(0.2,), signal_variance=1.0, prior_mean=0.0)
        p = gp_fit([[0.0], [0.5]], [1.0, -1.0], hyperparams=hp)
        mean, sd = gp_predict(p, [100.0])
        assert mean == pytest.approx(0.0)
        assert sd == pytest.approx(1.0)

    def test_prior_mean_defaults_to_data_mean(self):
        p = gp_fit([[0.0], [1.0]], [2.0, 4.0], hyperparams=GpHyperparams((0.1,), 1.0))
        assert p.prior_mean == pytest.approx(3.0)

    def test_zero_prior_mean_on_request(self):
        X, y = [[0.0], [0.1]], [10.0, 12.0]
        far = [[5.0]]
        default, _ = gp_fit(X, y, hyperparams=GpHyperparams((0.1,), 1.0)).predict(far)
        zero, _ = gp_fit(X, y, hyperparams=GpHyperparams((0.1,), 1.0, prior_mean=0.0)).predict(far)
        assert default[0] == pytest.approx(11.0, abs=1e-6)
        assert zero[0] == pytest.approx(0.0, abs=1e-6)

    def test_duplicates_need_jitter(self):
        with pytest.raises(SingularKernel):
            gp_fit([[0.5], [0.5]], [1.0, 2.0], jitter=0.0, max_jitter=0.0)

    def test_duplicates_recover_with_jitter(self):
        p = gp_fit([[0.5], [0.5], [0.9]], [1.0, 1.0, 2.0])
        assert p.jitter > 0
        assert math.isfinite(p.log_marginal_likelihood())

    def test_two_dimensional(self):
        rng = np.random.default_rng(3)
        X = rng.random((12, 2))
        y = X[:, 0] ** 2 + np.cos(3 * X[:, 1])
        p = gp_fit(X, y)
        assert p.lengthscales.shape == (2,)
        mean, _ = p.predict(X)
        assert mean == pytest.approx(y, abs=1e-3)

    def test_shape_mismatch(self):
        with pytest.raises(BayesOptError):
            gp_fit([[0.0], [1.0]], [1.0])


class TestParameterSpace:
    def test_unit_mapping(self):
        space = ParameterSpace(((0.0, 0.5), (-1.0, 1.0)))
        assert space.names == ("x0", "x1")
        assert space.to_unit([0.25, 0.0]) == pytest.approx([0.5, 0.5])
        assert space.from_unit([1.5, -0.5]) == pytest.approx([0.5, -1.0])
        assert space.contains([0.5, 1.0])
        assert not space.contains([0.6, 0.0])

    def test_from_bin(self):
        space = ParameterSpace.from_bin(Bin.closed(1.2, 3.3), name="vdd")
        assert space.k == 1
        assert space.bounds == ((1.2, 3.3),)
        assert space.names == ("vdd",)

    def test_zero_width_dimension(self):
        space = ParameterSpace(((2.0, 2.0),))
        assert space.to_unit([2.0]) == pytest.approx([0.0])
        assert space.from_unit([0.7]) == pytest.approx([2.0])

    @pytest.mark.parametrize("bounds", [(), ((1.0, 0.0),), ((0.0, math.inf),)])
    def test_invalid(self, bounds):
        with pytest.raises(BayesOptError):
            ParameterSpace(bounds)

    def test_name_count(self):
        with pytest.raises(BayesOptError):
            ParameterSpace(((0.0, 1.0),), ("a", "b"))

    def test_default_n_init(self):
        assert default_n_init(ParameterSpace(((0.0, 1.0),))) == 2
        assert default_n_init(ParameterSpace(((0.0, 1.0),) * 3)) == 6


class TestObjective:
    def test_validation(self, forrester_sim):
        with pytest.raises(BayesOptError):
            CoverageObjective("maximize", OUT_RANGE, forrester_sim, bound=0.0)
        with pytest.raises(BayesOptError):
            CoverageObjective(GAP_LOWER, OUT_RANGE, forrester_sim)
        with pytest.raises(BayesOptError):
            CoverageObjective(BUG_BIN, OUT_RANGE, forrester_sim, illegal=Bin.point(1.0))

    def test_extract(self, forrester_sim):
        output = [Bin.closed(1.0, 3.0)]
        assert CoverageObjective(GAP_LOWER, OUT_RANGE, forrester_sim, bound=0.0).extract(output) == 1.0
        assert CoverageObjective(GAP_UPPER, OUT_RANGE, forrester_sim, bound=0.0).extract(output) == 3.0
        bug = CoverageObjective(BUG_BIN, OUT_RANGE, forrester_sim, illegal=Bin.closed(4.0, 6.0))
        assert bug.extract(output) == 3.0
        assert bug.scalarize(3.0) == pytest.approx(2.0)

    def test_observe(self, forrester_sim):
        obj = CoverageObjective(GAP_LOWER, OUT_RANGE, forrester_sim, bound=-6.0)
        obs = obj.observe([0.5])
        assert obs.y_c == pytest.approx(forrester(0.5))
        assert obs.value == pytest.approx(forrester(0.5) + 6.0)
        assert not obs.bug_hit


class TestSuggestNext:
    def test_stays_in_bounds(self):
        space = ParameterSpace(((10.0, 20.0),))
        U = np.array([[0.1], [0.4], [0.9]])
        p = gp_fit(U, forrester(U[:, 0]))
        x = suggest_next(EiState.from_posterior(p), space, FAST, seed=1)
        assert space.contains(x)

    def test_incumbent_is_best_seen(self):
        p = gp_fit([[0.1], [0.5], [0.9]], [3.0, -1.0, 2.0])
        assert EiState.from_posterior(p).incumbent == -1.0

    def test_certain_posterior_falls_back_to_farthest_candidate(self, unit_space):
        hp = GpHyperparams(lengthscales=(0.1,), signal_variance=1e-40, prior_mean=1.0)
        p = gp_fit([[0.2], [0.5]], [1.0, 1.0], hyperparams=hp)
        state = EiState.from_posterior(p)
        candidates = qmc.Sobol(d=1, scramble=True, seed=4).random_base2(m=8)
        assert np.max(state.ei(candidates)) <= 1e-16

        x = suggest_next(state, unit_space, FAST, seed=4)
        distance = np.min(np.abs(candidates - np.array([0.2, 0.5])), axis=1)
        assert x[0] == pytest.approx(candidates[int(np.argmax(distance)), 0])
        assert x[0] > 0.9

    def test_single_point_is_not_suggested_again(self, unit_space):
        p = gp_fit([[0.3]], [1.0])
        x = suggest_next(EiState.from_posterior(p), unit_space, FAST, seed=0)
        assert abs(x[0] - 0.3) > 1e-6

    def test_matches_dense_grid_argmax(self, unit_space):
        hp = GpHyperparams(lengthscales=(0.2,), signal_variance=1.0, prior_mean=0.0)
        p = gp_fit([[0.2], [0.5], [0.8]], [2.0, 1.0, 0.0], hyperparams=hp)
        state = EiState.from_posterior(p)
        grid = np.linspace(0.0, 1.0, 100_001)[:, None]
        ei = state.ei(grid)
        best = float(grid[int(np.argmax(ei)), 0])

        x = suggest_next(state, unit_space, seed=0)
        assert abs(x[0] - best) <= 1e-3
        assert float(state.ei(x[None, :])[0]) >= float(np.max(ei)) - 1e-9


FORRESTER_MIN = float(np.min(forrester(np.linspace(0.0, 1.0, 100_001))))
TOLERANCE = 0.05
SEEDS = range(20)


class TestForresterEfficacy:
    @pytest.fixture(scope="class")
    def objective(self, forrester_sim):
        return CoverageObjective(GAP_LOWER, OUT_RANGE, forrester_sim, bound=0.0)

    @pytest.fixture(scope="class")
    def bo_runs(self, objective, unit_space):
        return [run_optimization(objective, unit_space, budget=20, seed=s) for s in SEEDS]

    @pytest.fixture(scope="class")
    def random_runs(self, objective, unit_space):
        return [random_search(objective, unit_space, budget=20, seed=s) for s in SEEDS]

    def test_true_minimum(self):
        assert FORRESTER_MIN == pytest.approx(-6.0207, abs=1e-4)

    def test_finds_minimum_in_most_seeds(self, bo_runs):
        assert all(len(h) == 20 for h in bo_runs)
        wins = sum(h.best.y_c <= FORRESTER_MIN + TOLERANCE for h in bo_runs)
        assert wins >= 18

    def test_running_minimum_nonincreasing(self, bo_runs):
        for h in bo_runs:
            running = h.running_minimum()
            assert all(b <= a for a, b in zip(running, running[1:]))

    def test_beats_random_search_on_paired_seeds(self, bo_runs, random_runs):
        def needed(h):
            n = h.evaluations_to(TOLERANCE, target=FORRESTER_MIN)
            return len(h) + 1 if n is None else n

        bo = [needed(h) for h in bo_runs]
        rnd = [needed(h) for h in random_runs]
        assert np.median(bo) < np.median(rnd)


class TestLdoExtremum:
    def test_gap_lower_reaches_domain_boundary(self):
        config = load_model("ldo")
        spec = load_coverpoint_spec(os.path.join(SPECS_DIR, "ldo_cover.json"))
        obj = CoverageObjective(GAP_LOWER, spec.get("vout_range"), make_simulator(config), bound=1.7)
        space = ParameterSpace.from_bin(config.model.domain)

        xs = np.linspace(space.lower[0], space.upper[0], 100_001)
        argmin = float(xs[int(np.argmin([config.model(x) for x in xs]))])
        assert argmin == pytest.approx(0.5)

        history = run_optimization(obj, space, budget=20, seed=0)
        running = history.running_minimum()
        assert all(b <= a for a, b in zip(running, running[1:]))
        assert abs(history.best.x[0] - argmin) <= 1e-3
        assert history.best.y_c == pytest.approx(config.model(argmin), abs=1e-4)


class TestRunOptimization:
    def test_history_bookkeeping(self, forrester_sim, unit_space):
        obj = CoverageObjective(GAP_UPPER, OUT_RANGE, forrester_sim, bound=16.0)
        history = run_optimization(obj, unit_space, budget=8, n_init=3, seed=2, settings=FAST)
        assert [e.phase for e in history.entries] == ["init"] * 3 + ["ei"] * 5
        assert [e.iteration for e in history.entries] == list(range(1, 9))
        assert all(e.ei is None for e in history.entries[:3])
        assert all(e.ei is not None and e.ei >= 0 for e in history.entries[3:])
        running = history.running_minimum()
        assert running == sorted(running, reverse=True)
        assert running[-1] == history.best.value
        for e in history.entries:
            assert unit_space.contains(e.x)

        summary = history.summary()
        assert summary["evaluations"] == 8
        assert summary["objective"] == GAP_UPPER
        assert summary["settings"]["n_candidates"] == FAST.n_candidates
        assert set(summary["best_x"]) == {"x"}

        rows = history_rows(history)
        assert rows[0]["phase"] == "init"
        assert rows[0]["ei"] == ""
        assert "x" in rows[0]

    def test_deterministic(self, forrester_sim, unit_space):
        obj = CoverageObjective(GAP_LOWER, OUT_RANGE, forrester_sim, bound=0.0)
        a = run_optimization(obj, unit_space, budget=7, n_init=3, seed=5, settings=FAST)
        b = run_optimization(obj, unit_space, budget=7, n_init=3, seed=5, settings=FAST)
        assert a.suggestions == b.suggestions

    def test_budget_checks(self, forrester_sim, unit_space):
        obj = CoverageObjective(GAP_LOWER, OUT_RANGE, forrester_sim, bound=0.0)
        with pytest.raises(BayesOptError):
            run_optimization(obj, unit_space, budget=3, n_init=4)
        with pytest.raises(BayesOptError):
            run_optimization(obj, unit_space, budget=3, n_init=1)

    def test_budget_must_exceed_design(self, forrester_sim, unit_space):
        obj = CoverageObjective(GAP_LOWER, OUT_RANGE, forrester_sim, bound=0.0)
        with pytest.raises(BayesOptError, match="exceed"):
            run_optimization(obj, unit_space, budget=4, n_init=4)

    def test_stops_on_first_bug(self, forrester_sim, unit_space):
        obj = CoverageObjective(BUG_BIN, OUT_RANGE, forrester_sim, illegal=Bin.closed(-10.0, 20.0))
        history = run_optimization(obj, unit_space, budget=10, n_init=4, seed=0)
        assert len(history) == 1
        assert history.bug_found
        assert history.evaluations_to_bug() == 1

    def test_simulator_failure_keeps_history(self, forrester_sim, unit_space):
        calls = []

        def flaky(x):
            calls.append(x)
            if len(calls) == 3:
                raise RuntimeError("solver diverged")
            return forrester_sim(x)

        obj = CoverageObjective(GAP_LOWER, OUT_RANGE, flaky, bound=0.0)
        with pytest.raises(SimulatorError, match="solver diverged") as exc:
            run_optimization(obj, unit_space, budget=6, n_init=4, seed=0)
        assert len(exc.value.history) == 2

    def test_accumulates_into_database(self, forrester_sim, unit_space):
        db = CoverageDatabase(["y"])
        grid = BinGrid.over(Bin.closed(-7.0, 16.0), 0.5)
        obj = CoverageObjective(GAP_LOWER, OUT_RANGE, forrester_sim, bound=0.0)
        history = run_optimization(obj, unit_space, budget=5, n_init=3, seed=0, settings=FAST, db=db, grid=grid)
        assert [e["test_id"] for e in db.test_log] == [f"bo-{i}" for i in range(1, 6)]
        assert db.test_log[0]["inputs"] == {"x": history.entries[0].x[0]}
        assert not db.covered("y").is_empty


class TestLdoBugSearch:
    @pytest.fixture(scope="class")
    def level_objective(self):
        spec = load_coverpoint_spec(os.path.join(SPECS_DIR, "ldo_cover.json"))
        target = spec.targets["vout_level"]
        return CoverageObjective(
            BUG_BIN, spec.get("vout_level"), make_simulator(load_model("ldo")),
            illegal=target.illegal.bins[0],
        )

    def test_bayes_opt_hits_illegal_level(self, level_objective):
        space = ParameterSpace.from_bin(load_model("ldo").model.domain)
        history = run_optimization(level_objective, space, budget=25, n_init=4, seed=0, settings=FAST)
        assert history.bug_found
        hit = history.entries[-1]
        assert hit.bug_hit
        # output in [1.729, 1.734] V maps to load currents of roughly 108-133 mA
        assert 0.105 <= hit.x[0] <= 0.136
        assert 1.729 <= hit.y_c <= 1.734

    def test_random_baseline(self, level_objective):
        space = ParameterSpace.from_bin(load_model("ldo").model.domain)
        history = random_search(level_objective, space, budget=6, seed=3)
        assert 1 <= len(history) <= 6
        assert {e.phase for e in history.entries} == {"random"}
        again = random_search(level_objective, space, budget=6, seed=3)
        assert again.suggestions == history.suggestions
        if not history.bug_found:
            assert len(history) == 6

    def test_random_budget(self, level_objective):
        with pytest.raises(BayesOptError):
            random_search(level_objective, ParameterSpace(((0.0, 0.5),)), budget=0)


class TestSearchExtremes:
    def test_reached_range(self, forrester_sim, unit_space):
        lower = CoverageObjective(GAP_LOWER, OUT_RANGE, forrester_sim, bound=-6.0)
        upper = CoverageObjective(GAP_UPPER, OUT_RANGE, forrester_sim, bound=16.0)
        result = search_extremes(lower, upper, unit_space, budget=10, n_init=3, seed=1, settings=FAST)
        reached = result.reached
        assert reached.lower < 0.0 < reached.upper
        assert len(result.lower) == len(result.upper) == 10

    def test_kinds_checked(self, forrester_sim, unit_space):
        upper = CoverageObjective(GAP_UPPER, OUT_RANGE, forrester_sim, bound=16.0)
        with pytest.raises(BayesOptError):
            search_extremes(upper, upper, unit_space, budget=4)
