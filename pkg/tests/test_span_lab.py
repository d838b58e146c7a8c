import json

import numpy as np
import pytest

from bilevel_lab import build_scsc, scsc_feasible_dimension
from bilevel_lab.errors import InfeasibleDimensionError, InvariantViolationError
from bilevel_lab.span_lab import (
    SIMULATOR_ALGORITHMS,
    SupportProfile,
    active_index,
    simulate_on_instance,
    span_projection_residual,
    support_cap,
    verify_gap_floor,
    verify_grad_floor,
    verify_support_cap,
)

BUDGETS = {"K": 10, "Q": 5, "T": 3}


@pytest.fixture(scope="module")
def scsc_run_instance(mild_constants):
    probe = build_scsc(16, mild_constants)
    m = support_cap("scsc", **BUDGETS)
    d = scsc_feasible_dimension(m, probe.r, probe.lam_coef, probe.tau_coef)
    return build_scsc(d, mild_constants)


class TestSupportBookkeeping:
    def test_zero_vector_has_support_zero(self):
        assert active_index(np.zeros(8)) == 0

    def test_noop_script_keeps_origin(self, scsc_run_instance):
        x, profile = simulate_on_instance(
            scsc_run_instance, lambda oracle, d, budgets: np.zeros(d), BUDGETS
        )
        assert np.array_equal(x, np.zeros(scsc_run_instance.d))
        assert profile.max_x_index == 0

    def test_first_y_update_has_support_of_b(self, scsc_run_instance):
        _, profile = simulate_on_instance(scsc_run_instance, "baseline_aid_gd", BUDGETS)
        assert profile.y_support_raw[0] == active_index(scsc_run_instance.b)

    def test_support_caps_formulas(self):
        assert support_cap("scsc", 10, 5, 3) == 32
        assert support_cap("csc", 10, 5, 3) == 23

    def test_per_update_growth_bounded_by_chain_budget(self, scsc_run_instance):
        # each x-update embeds at most n_inner + T + 1 squared-operator events
        _, profile = simulate_on_instance(scsc_run_instance, "baseline_aid_gd", BUDGETS)
        n_inner = BUDGETS["K"] // BUDGETS["Q"] - 1
        steps = profile.x_support
        increments = [b - a for a, b in zip(steps, steps[1:])]
        assert all(inc <= n_inner + BUDGETS["T"] + 1 for inc in increments)

    def test_cumulative_support_nondecreasing(self, scsc_run_instance):
        _, profile = simulate_on_instance(scsc_run_instance, "accbio", BUDGETS)
        assert all(b >= a for a, b in zip(profile.x_support, profile.x_support[1:]))
        assert all(b >= a for a, b in zip(profile.y_support, profile.y_support[1:]))


class TestBudgetMapping:
    def test_counters_match_accounting(self, scsc_run_instance):
        _, profile = simulate_on_instance(scsc_run_instance, "baseline_aid_gd", BUDGETS)
        counters = profile.mapping["counters"]
        n_inner = BUDGETS["K"] // BUDGETS["Q"] - 1
        assert counters["n_G"] == BUDGETS["Q"] * (n_inner + 2)
        assert counters["n_H"] == BUDGETS["Q"] * BUDGETS["T"]
        assert counters["n_J"] == BUDGETS["Q"]

    def test_rejects_nonuniform_schedule(self, scsc_run_instance):
        with pytest.raises(InvariantViolationError):
            simulate_on_instance(scsc_run_instance, "baseline_aid_gd", {"K": 11, "Q": 5, "T": 3})
        with pytest.raises(InvariantViolationError):
            simulate_on_instance(scsc_run_instance, "baseline_aid_gd", {"K": 5, "Q": 5, "T": 3})

    def test_rejects_infeasible_dimension(self, mild_constants):
        small = build_scsc(16, mild_constants)
        with pytest.raises(InfeasibleDimensionError) as err:
            simulate_on_instance(small, "baseline_aid_gd", BUDGETS)
        assert err.value.required_dim > 16


class TestSupportCap:
    @pytest.mark.parametrize("algorithm", SIMULATOR_ALGORITHMS)
    def test_all_algorithms_within_cap(self, scsc_run_instance, algorithm):
        _, profile = simulate_on_instance(scsc_run_instance, algorithm, BUDGETS)
        report = verify_support_cap(profile, scsc_run_instance)
        assert report.passed
        assert report.observed_max_index <= report.predicted_support_cap
        assert report.span_residual <= 1e-8

    def test_zb_is_in_span_with_small_support(self, scsc_run_instance):
        zb = scsc_run_instance.z.apply(scsc_run_instance.b)
        assert active_index(zb) <= 2
        assert span_projection_residual(scsc_run_instance, zb, 32) <= 1e-12

    def test_out_of_span_mass_fails(self, scsc_run_instance):
        d = scsc_run_instance.d
        m = support_cap("scsc", **BUDGETS)
        bad = np.zeros(d)
        bad[m + 4] = 1.0  # unit mass at coordinate M + 5
        profile = SupportProfile(budgets=dict(BUDGETS))
        profile.observe_x(bad)
        profile.final_x = bad
        report = verify_support_cap(profile, scsc_run_instance)
        assert not report.passed
        assert not report.checks["coordinates_within_cap"]
        assert not report.checks["span_projection"]


class TestFloors:
    def test_gap_floor_holds_uniformly_across_algorithms(self, scsc_run_instance):
        m = support_cap("scsc", **BUDGETS)
        for algorithm in SIMULATOR_ALGORITHMS:
            x_final, _ = simulate_on_instance(scsc_run_instance, algorithm, BUDGETS)
            report = verify_gap_floor(scsc_run_instance, x_final, m)
            assert report.passed
            assert report.gap >= report.gap_floor > 0.0

    def test_minimizer_defeats_gap_floor(self, scsc_run_instance):
        m = support_cap("scsc", **BUDGETS)
        report = verify_gap_floor(scsc_run_instance, scsc_run_instance.x_star_dense, m)
        assert not report.passed

    def test_grad_floor_run_and_controls(self, csc20):
        budgets = {"K": 5, "Q": 1, "T": 3}
        m = support_cap("csc", **budgets)
        assert m == 10
        x_final, profile = simulate_on_instance(csc20, "baseline_aid_gd", budgets)
        support = verify_support_cap(profile, csc20)
        assert support.passed
        report = verify_grad_floor(csc20, x_final, m)
        assert report.passed
        # starting point: the gradient at the origin also clears the floor
        zero_report = verify_grad_floor(csc20, np.zeros(csc20.d), m)
        assert zero_report.passed
        # the true minimizer (support violation aside) defeats the floor
        neg = verify_grad_floor(csc20, csc20.x_star, m)
        assert not neg.passed

    def test_grad_floor_requires_small_budget(self, csc20):
        with pytest.raises(InvariantViolationError):
            verify_grad_floor(csc20, np.zeros(csc20.d), csc20.d - 2)


class TestCustomScripts:
    def test_span_legal_script_passes(self, scsc_run_instance):
        d = scsc_run_instance.d

        def one_step(oracle, dim, budgets):
            x0, y0 = np.zeros(dim), np.zeros(dim)
            y = y0 - 0.5 * oracle.grad_y_g(x0, y0)
            rhs = oracle.grad_y_f(x0, y)
            v = rhs - 0.3 * oracle.hess_y_g_vec(x0, y, rhs)
            return -0.1 * (oracle.grad_x_f(x0, y) - oracle.jac_xy_g_vec(x0, y, v))

        x_final, profile = simulate_on_instance(scsc_run_instance, one_step, BUDGETS)
        report = verify_support_cap(profile, scsc_run_instance)
        assert report.passed

    def test_scripts_only_see_the_query_surface(self, scsc_run_instance):
        seen = {}

        def probe(oracle, dim, budgets):
            seen["has_exact"] = hasattr(oracle, "y_star") or hasattr(oracle, "phi")
            seen["has_queries"] = all(
                hasattr(oracle, name)
                for name in ("grad_x_f", "grad_y_f", "grad_y_g", "hess_y_g_vec", "jac_xy_g_vec")
            )
            return np.zeros(dim)

        simulate_on_instance(scsc_run_instance, probe, BUDGETS)
        assert seen["has_queries"] and not seen["has_exact"]

    def test_cheating_script_is_caught(self, scsc_run_instance):
        d = scsc_run_instance.d
        m = support_cap("scsc", **BUDGETS)

        def cheat(oracle, dim, budgets):
            x = np.zeros(dim)
            x[dim - 1] = 1.0  # coordinate unreachable within the budget
            return x

        _, profile = simulate_on_instance(scsc_run_instance, cheat, BUDGETS)
        report = verify_support_cap(profile, scsc_run_instance)
        assert not report.passed


class TestReportSerialization:
    def test_json_round_trip(self, scsc_run_instance):
        x_final, profile = simulate_on_instance(
            scsc_run_instance, "baseline_aid_gd", BUDGETS
        )
        report = verify_support_cap(profile, scsc_run_instance)
        doc = json.loads(report.to_json())
        assert doc["passed"] == report.passed
        assert doc["predicted_support_cap"] == report.predicted_support_cap
        assert doc["budgets"] == BUDGETS
        assert set(doc["checks"]) == set(report.checks)
