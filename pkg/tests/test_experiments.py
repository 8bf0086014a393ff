import math

import numpy as np
import pytest

from gmoe.em import EmSettings
from gmoe.experiments import (
    ExperimentConfig,
    SweepRow,
    SweepResult,
    fit_loglog,
    fit_rate,
    log_spaced_n,
    model_presets,
    profile_grid,
    results_to_csv,
    run_sweep,
    summarize,
    summary_to_csv,
    tv_distance,
    tv_grid,
    tv_mc,
)
from gmoe.model import Component, InvalidParameterError, MixingMeasure


class TestPresets:
    def test_model1_exact_published_values(self):
        G0, d = model_presets("model1")
        assert d == 1
        assert np.array_equal(G0.weights, [0.3, 0.4, 0.3])
        atoms = [
            (-0.1, 0.04, 0.40, 0.34, 0.01),
            (0.1, 0.02, -0.71, -0.33, 0.03),
            (0.5, 0.01, 0.0, 0.2, 0.02),
        ]
        for comp, (c, g, a, b, nu) in zip(G0.components, atoms):
            assert comp.c[0] == c and comp.Gamma[0, 0] == g
            assert comp.a[0] == a and comp.b == b and comp.nu == nu

    def test_model2_only_changes_first_gate_location_and_intercept(self):
        G1, _ = model_presets("model1")
        G2, _ = model_presets("model2")
        assert G2.components[0].c[0] == 0.0
        assert G2.components[0].b == 0.3
        assert G2.components[0].Gamma[0, 0] == G1.components[0].Gamma[0, 0]
        assert G2.components[0].a[0] == G1.components[0].a[0]
        assert G2.components[0].nu == G1.components[0].nu
        for a, b in zip(G1.components[1:], G2.components[1:]):
            assert a.distance(b) == 0.0

    def test_model3_vector_structure(self):
        G3, d = model_presets("model3")
        assert d == 2
        comp = G3.components[0]
        assert np.array_equal(comp.c, [-0.1, -0.1])
        assert np.array_equal(comp.Gamma, 0.04 * np.eye(2))
        assert np.array_equal(comp.a, [0.4, 0.4])
        assert comp.b == 0.34 and comp.nu == 0.01
        assert np.array_equal(G3.components[2].a, [0.0, 0.0])

    def test_model4_zeroes_first_gate_location(self):
        G4, d = model_presets("model4")
        assert d == 2
        assert np.array_equal(G4.components[0].c, [0.0, 0.0])
        assert G4.components[0].b == 0.3

    def test_unknown_id_rejected(self):
        with pytest.raises(InvalidParameterError, match="unknown model id"):
            model_presets("model9")


class TestGrids:
    def test_log_spaced_strictly_increasing(self):
        grid = log_spaced_n(100, 100_000, 100)
        assert len(grid) == 100
        assert all(b > a for a, b in zip(grid, grid[1:]))
        assert grid[0] == 100 and grid[-1] == 100_000

    def test_profiles(self):
        desk, desk_reps = profile_grid("desk")
        assert len(desk) == 20 and desk[0] == 100 and desk[-1] == 10_000
        assert desk_reps == 10
        paper, paper_reps = profile_grid("paper")
        assert len(paper) == 100 and paper[-1] == 100_000
        assert paper_reps == 20
        with pytest.raises(InvalidParameterError):
            profile_grid("weekend")


def fabricated_sweep(ns, losses, reps=1):
    rows = []
    for n, value in zip(ns, losses):
        for rep in range(reps):
            rows.append(
                SweepRow(
                    model="model1", k=4, n=int(n), rep=rep, seed=0,
                    loss_name="dbar", loss=float(value), loglik=0.0, iters=1,
                    converged=True, max_cell=2, excluded=False,
                )
            )
    cfg = ExperimentConfig(model="model1", k=4, n_grid=tuple(int(n) for n in ns), reps=reps)
    return SweepResult(config=cfg, rows=tuple(rows), loss_name="dbar")


class TestRateFit:
    def test_exact_half_power_law(self):
        ns = np.array([100, 1000, 10_000, 100_000])
        rate = fit_loglog(ns, ns**-0.5)
        assert rate.slope == pytest.approx(-0.5, abs=1e-12)
        assert rate.r_squared == pytest.approx(1.0, abs=1e-12)

    def test_scaled_inverse_law_recovers_intercept(self):
        ns = np.array([10, 100, 1000, 10000])
        c = 3.7
        rate = fit_loglog(ns, c / ns)
        assert rate.slope == pytest.approx(-1.0, abs=1e-12)
        assert rate.intercept == pytest.approx(math.log(c), abs=1e-12)

    def test_through_sweep_result(self):
        ns = (100, 316, 1000, 3162, 10_000)
        result = fabricated_sweep(ns, [n**-0.5 for n in ns])
        rate = fit_rate(result)
        assert rate.slope == pytest.approx(-0.5, abs=1e-12)

    def test_invariant_to_row_reordering(self):
        rng = np.random.default_rng(2)
        ns = (100, 200, 400, 800)
        losses = [0.3, 0.21, 0.17, 0.09]
        result = fabricated_sweep(ns, losses, reps=3)
        shuffled = SweepResult(
            config=result.config,
            rows=tuple(result.rows[i] for i in rng.permutation(len(result.rows))),
            loss_name=result.loss_name,
        )
        assert fit_rate(shuffled) == fit_rate(result)

    def test_degenerate_design_rejected(self):
        with pytest.raises(InvalidParameterError, match="3 distinct"):
            fit_loglog([100, 200], [0.1, 0.05])
        with pytest.raises(InvalidParameterError):
            fit_loglog([100, 200, 400], [0.0, 0.0, 0.0])

    def test_excluded_rows_do_not_enter_summary(self):
        result = fabricated_sweep((100, 200, 400), [0.3, 0.2, 0.1], reps=2)
        poisoned = list(result.rows)
        poisoned[0] = SweepRow(
            model="model1", k=4, n=100, rep=9, seed=0, loss_name="dbar",
            loss=float("nan"), loglik=0.0, iters=1, converged=True,
            max_cell=4, excluded=True,
        )
        res2 = SweepResult(config=result.config, rows=tuple(poisoned), loss_name="dbar")
        summary = {row.n: row for row in summarize(res2)}
        assert summary[100].count == 1 and summary[100].mean_loss == pytest.approx(0.3)
        assert res2.excluded_count == 1


class TestRunSweep:
    def test_smoke_single_cell(self):
        cfg = ExperimentConfig(model="model1", k=3, n_grid=(100,), reps=1, base_seed=5)
        result = run_sweep(cfg)
        assert len(result.rows) == 1
        row = result.rows[0]
        assert math.isfinite(row.loss) and row.loss >= 0
        assert row.loss_name == "dbar"
        assert row.n == 100 and not row.excluded

    def test_repeat_runs_are_byte_identical(self):
        cfg = ExperimentConfig(model="model1", k=3, n_grid=(80, 160, 320), reps=2, base_seed=9)
        a = results_to_csv(run_sweep(cfg))
        b = results_to_csv(run_sweep(cfg))
        assert a == b

    def test_worker_count_does_not_change_results(self):
        base = dict(model="model2", k=3, n_grid=(80, 160), reps=2, base_seed=13)
        serial = run_sweep(ExperimentConfig(**base, threads=1))
        pooled = run_sweep(ExperimentConfig(**base, threads=3))
        assert results_to_csv(serial) == results_to_csv(pooled)
        assert summary_to_csv(serial) == summary_to_csv(pooled)

    def test_auto_loss_matches_setting_for_all_presets(self):
        want = {"model1": "dbar", "model2": "dtilde", "model3": "dbar", "model4": "dtilde"}
        for model, loss_name in want.items():
            cfg = ExperimentConfig(model=model, k=3, n_grid=(60,), reps=1, base_seed=3)
            result = run_sweep(cfg)
            assert result.loss_name == loss_name
            assert all(row.loss_name == loss_name for row in result.rows)

    def test_mean_loss_shrinks_with_sample_size(self):
        cfg = ExperimentConfig(
            model="model1", k=4, n_grid=(100, 400, 1600, 6400), reps=3, base_seed=23,
            threads=2,
        )
        result = run_sweep(cfg)
        summary = summarize(result)
        assert summary[-1].mean_loss < summary[0].mean_loss

    def test_inline_measure_accepted(self):
        G0 = MixingMeasure(
            np.array([0.5, 0.5]),
            (Component(-1.0, 0.5, 1.0, 0.0, 0.2), Component(1.0, 0.5, -1.0, 0.0, 0.2)),
        )
        cfg = ExperimentConfig(model=G0, k=2, n_grid=(120,), reps=1, base_seed=1,
                               em=EmSettings())
        result = run_sweep(cfg)
        assert result.rows[0].model == "inline"
        assert math.isfinite(result.rows[0].loss)

    def test_k_below_true_order_rejected(self):
        with pytest.raises(InvalidParameterError):
            run_sweep(ExperimentConfig(model="model1", k=2, n_grid=(50,), reps=1))

    def test_n_grid_must_increase(self):
        with pytest.raises(InvalidParameterError):
            ExperimentConfig(model="model1", k=3, n_grid=(100, 100), reps=1)

    def test_csv_headers(self):
        cfg = ExperimentConfig(model="model1", k=3, n_grid=(60,), reps=1)
        result = run_sweep(cfg)
        assert results_to_csv(result).splitlines()[0] == (
            "model,k,n,rep,seed,loss_name,loss,loglik,iters,converged,max_cell,excluded"
        )
        assert summary_to_csv(result).splitlines()[0] == "n,mean_loss,stderr,count"


def single_atom_measure(b=0.0):
    return MixingMeasure(np.array([1.0]), (Component(0.0, 1.0, 0.0, b, 1.0),))


class TestTvDistance:
    def test_zero_on_identical_measures(self):
        G0, _ = model_presets("model1")
        assert tv_distance(G0, G0, method="grid", budget=256) <= 1e-12

    def test_intercept_shift_matches_gaussian_closed_form(self):
        # TV between N(0,1) and N(delta,1) along y only: 2 Phi(delta/2) - 1
        delta = 0.2
        want = math.erf(delta / (2 * math.sqrt(2.0)))
        assert want == pytest.approx(0.0796556745541, abs=1e-10)
        got = tv_grid(single_atom_measure(0.0), single_atom_measure(delta), 1024)
        assert got == pytest.approx(want, abs=5e-4)

    def test_mc_estimator_agrees_within_error_bars(self):
        delta = 0.2
        want = math.erf(delta / (2 * math.sqrt(2.0)))
        value, stderr = tv_mc(single_atom_measure(0.0), single_atom_measure(delta),
                              n_samples=40_000, seed=3)
        assert stderr > 0
        assert abs(value - want) < 4 * stderr

    def test_mc_deterministic_in_seed(self):
        G0, _ = model_presets("model1")
        G1, _ = model_presets("model2")
        a = tv_distance(G0, G1, method="mc", budget=5000, seed=8)
        b = tv_distance(G0, G1, method="mc", budget=5000, seed=8)
        assert a == b

    def test_grid_rejects_higher_dimensions(self):
        G3, _ = model_presets("model3")
        with pytest.raises(InvalidParameterError, match="d = 1"):
            tv_distance(G3, G3, method="grid")

    def test_unknown_method_rejected(self):
        G0, _ = model_presets("model1")
        with pytest.raises(InvalidParameterError):
            tv_distance(G0, G0, method="exact")

    def test_grid_and_mc_agree_on_preset_pair(self):
        G0, _ = model_presets("model1")
        G1, _ = model_presets("model2")
        grid = tv_grid(G0, G1, 512)
        value, stderr = tv_mc(G0, G1, n_samples=60_000, seed=4)
        assert abs(grid - value) < max(5 * stderr, 5e-3)
