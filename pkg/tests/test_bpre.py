import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kimmel import bpre
from kimmel.bpre import (BracketError, SolverError, bgw_conditioned_future, bgw_distribution,
                         bgw_extinction_by, bgw_survival, bgw_yaglom, bpre_distribution,
                         bpre_sample_line, bpre_sample_lines, bpre_step, conditioned_pmf,
                         environment_sum_survival, functional_eq_residual,
                         linear_fractional_root, linear_fractional_yaglom, size_biased,
                         survival_curve, survival_decay_fit, survival_prob_exact,
                         yaglom_power_iteration)
from kimmel.model import from_table, marginal, total_offspring_law
from kimmel.pmf import Pmf
from kimmel.stats import l1_distance

from .conftest import LAW_A, LAW_B, LAW_C, LAW_D, LAW_D4, LAW_D5

S0 = 40 / 21


def closed_form(K):
    return linear_fractional_yaglom(0.3, 0.3, K)


# -- one step and exact laws ---------------------------------------------------------

def test_step_law_c_from_one_is_the_marginal():
    out = bpre_step(Pmf.delta(1, 50), LAW_C, 50)
    assert math.isclose(out[0], 4 / 7, abs_tol=1e-12)
    for k in range(1, 20):
        assert math.isclose(out[k], 0.3 * 0.3 ** (k - 1), rel_tol=1e-9)


def test_step_law_b():
    out = bpre_step(Pmf.delta(1, 10), LAW_B, 10)
    assert out.to_dict() == {2: 1.0}


@pytest.mark.parametrize("law", [LAW_A, LAW_B, LAW_C, LAW_D])
def test_mean_is_m_to_the_n(law):
    m = 0.5 * (law.mean(0) + law.mean(1))
    K = 1 << 11 if law is LAW_B else 400
    for n in (1, 5, 10):
        pmf = bpre_distribution(law, n, K)
        assert pmf.overflow == 0 or law is LAW_C
        assert math.isclose(pmf.mean(), m**n, rel_tol=1e-9, abs_tol=pmf.overflow * 10 * K)
        assert math.isclose(pmf.total(), 1.0, abs_tol=1e-12)


@given(st.integers(0, 30), st.sampled_from(["A", "C", "D"]))
def test_step_mean_evolution(k, name):
    law = {"A": LAW_A, "C": LAW_C, "D": LAW_D}[name]
    m = 0.5 * (law.mean(0) + law.mean(1))
    out = bpre_step(Pmf.delta(k, 400), law, 400)
    assert math.isclose(out.total(), 1.0, abs_tol=1e-12)
    assert math.isclose(out.mean(), m * k, rel_tol=1e-9, abs_tol=1e-9)


# -- survival ------------------------------------------------------------------------

def test_survival_examples():
    br = survival_prob_exact(LAW_A, 3)
    assert br.lower == br.upper == 0.125
    assert math.isclose(survival_prob_exact(LAW_D, 2).mid, 0.0625, abs_tol=1e-15)
    assert math.isclose(survival_prob_exact(LAW_C, 1).mid, 3 / 7, abs_tol=1e-12)


def test_environment_sum_agrees_with_dp():
    for n in range(0, 11):
        br = survival_prob_exact(LAW_C, n, cross_check=False)
        exact = environment_sum_survival(LAW_C, n)
        assert br.lower - 1e-13 <= exact <= br.upper + 1e-13


def test_environment_sum_limit():
    with pytest.raises(ValueError):
        environment_sum_survival(LAW_C, bpre.ENV_MAX + 1)


def test_bracket_width_error():
    with pytest.raises(BracketError):
        survival_prob_exact(LAW_D5, 8, K=20, max_width=1e-6, cross_check=False)


def test_tight_curve_contains_exact_survival():
    curve = survival_curve(LAW_D4, 14, K=60, tight=True)
    loose = survival_curve(LAW_D4, 14, K=60)
    for n in range(1, 15):
        exact = environment_sum_survival(LAW_D4, n)
        assert curve[n].lower - 1e-12 <= exact <= curve[n].upper + 1e-12
        assert curve[n].lower >= loose[n].lower


def test_conditioned_pmf_examples():
    assert conditioned_pmf(LAW_A, 7).to_dict() == {1: 1.0}
    assert conditioned_pmf(LAW_D, 1).to_dict() == {1: 1.0}
    pmf = conditioned_pmf(LAW_C, 1)
    assert math.isclose(pmf[1], 0.7, abs_tol=1e-12)
    assert math.isclose(pmf[2], 0.21, abs_tol=1e-12)


def test_conditioned_pmf_converges_to_yaglom():
    pmf = conditioned_pmf(LAW_C, 30, K=400)
    assert l1_distance(pmf.mass, closed_form(400).mass) < 1e-6


# -- quasistationary law -------------------------------------------------------------

def test_closed_form_root_and_first_mass():
    assert math.isclose(linear_fractional_root(0.3, 0.3), S0, rel_tol=1e-14)
    pmf = closed_form(400)
    assert math.isclose(pmf[1], 0.475, abs_tol=1e-14)
    assert math.isclose(pmf[2], 0.249375, abs_tol=1e-14)


@given(st.floats(0.05, 0.9), st.floats(0.01, 0.9))
def test_closed_form_sums_to_one(p, frac):
    b = frac * (1 - p) ** 2
    pmf = linear_fractional_yaglom(b, p, 100)
    assert math.isclose(pmf.total(), 1.0, abs_tol=1e-12)


def test_power_iteration_examples():
    a = yaglom_power_iteration(LAW_A)
    assert a.pmf.to_dict(1e-15) == {1: 1.0} and math.isclose(a.decay_ratio, 0.5)
    d = yaglom_power_iteration(LAW_D)
    assert d.pmf.to_dict(1e-15) == {1: 1.0} and math.isclose(d.decay_ratio, 0.25)
    c = yaglom_power_iteration(LAW_C, K=400)
    assert l1_distance(c.pmf.mass, closed_form(400).with_bound(400).mass + 0) < 1e-9
    assert math.isclose(c.pmf[1], 0.475, abs_tol=1e-10)
    assert abs(c.decay_ratio - 30 / 49) < 1e-6
    assert c.residual < 1e-8


def test_power_iteration_rejects_d4_d5():
    for law in (LAW_D4, LAW_D5):
        with pytest.raises(SolverError, match="not strongly subcritical"):
            yaglom_power_iteration(law)


def test_power_iteration_non_convergence():
    with pytest.raises(SolverError):
        yaglom_power_iteration(LAW_C, max_iter=3)


def test_power_iteration_fixed_point_and_uniqueness():
    tol = 1e-12
    runs = [yaglom_power_iteration(LAW_C, K=200, tol=tol, start=s)
            for s in (Pmf.delta(1, 200), Pmf.delta(2, 200),
                      Pmf.from_dict({k: 0.1 for k in range(1, 11)}, 200))]
    for r in runs[1:]:
        assert l1_distance(r.pmf.mass, runs[0].pmf.mass) < 10 * tol + 1e-11
    again = bpre_step(runs[0].pmf, LAW_C, 200)
    mass = np.array(again.mass)
    mass[0] = 0
    assert np.abs(mass / mass.sum() - runs[0].pmf.mass).sum() < 10 * tol + 1e-11


def test_functional_residual_examples():
    assert functional_eq_residual(LAW_D, Pmf.delta(1)) < 1e-15
    pts = np.linspace(0, 1, 21)
    assert functional_eq_residual(LAW_C, closed_form(200), pts) < 1e-8
    uniform = Pmf.from_dict({k: 0.2 for k in range(1, 6)})
    assert functional_eq_residual(LAW_C, uniform, pts) > 0.01
    res, bound = functional_eq_residual(LAW_C, closed_form(200), pts, with_bound=True)
    assert bound >= 0
    with pytest.raises(ValueError):
        functional_eq_residual(LAW_C, Pmf.delta(0))


def test_size_biased_examples():
    assert size_biased(Pmf.delta(1)).to_dict() == {1: 1.0}
    out = size_biased(Pmf.from_dict({1: 0.5, 2: 0.5}))
    assert math.isclose(out[1], 1 / 3) and math.isclose(out[2], 2 / 3)
    sb = size_biased(yaglom_power_iteration(LAW_C, K=400).pmf)
    assert math.isclose(sb[1], 0.225625, abs_tol=1e-9)
    with pytest.raises(ValueError):
        size_biased(Pmf(np.array([0.5, 0.4]), 0.1))
    with pytest.raises(ValueError):
        size_biased(Pmf.delta(0))


# -- total parasite count ---------------------------------------------------------------

def test_bgw_yaglom_examples():
    assert bgw_yaglom(Pmf.from_dict({0: 0.5, 1: 0.5})).pmf.to_dict(1e-15) == {1: 1.0}
    total = Pmf.from_dict({0: 0.5, 1: 0.3, 2: 0.2})
    y = bgw_yaglom(total, K=200)
    law = bpre.degenerate_law(total)
    # the conditioned law approaches its limit like 0.7^n: 2.7e-10 off at n = 60
    assert l1_distance(y.pmf.mass, conditioned_pmf(law, 60, K=200).mass) < 5e-10
    assert l1_distance(y.pmf.mass, conditioned_pmf(law, 70, K=200).mass) < 1e-10
    with pytest.raises(SolverError):
        bgw_yaglom(Pmf.from_dict({0: 0.2, 2: 0.8}))


def test_bgw_conditioned_future_unit_population():
    assert bgw_conditioned_future(Pmf.delta(1), 5, 3).to_dict(1e-15) == {1: 1.0}


def test_bgw_conditioned_future_against_brute_force():
    # P(Z_n = j, Z_{n+k} > 0) from the joint chain, summed over the future
    total = total_offspring_law(LAW_C)
    n, k, K = 4, 3, 300
    future = bgw_conditioned_future(total, n, k, K)
    law = bpre.degenerate_law(total)
    T, _ = bpre._transition(law, K)
    now = bgw_distribution(total, n, K).mass
    alive_after = 1 - np.linalg.matrix_power(T, k)[:, 0]
    joint = now * alive_after
    assert np.abs(future.mass - joint / joint.sum()).max() < 1e-9


def test_bgw_survival_and_extinction():
    total = total_offspring_law(LAW_D)
    assert math.isclose(bgw_survival(total, 4), 0.0625)
    q = bgw_extinction_by(total, 4)
    assert math.isclose(1 - q[4], 0.0625)
    assert math.isclose(bgw_survival(total_offspring_law(LAW_C), 10),
                        1 - bgw_extinction_by(total_offspring_law(LAW_C), 10)[-1], rel_tol=1e-9)


# -- decay fits ----------------------------------------------------------------------------

def test_decay_fit_law_a():
    fit = survival_decay_fit(LAW_A, range(4, 21))
    assert math.isclose(fit.rate, 0.5, rel_tol=1e-9) and abs(fit.polynomial_exponent) < 1e-9


def test_decay_fit_law_c():
    fit = survival_decay_fit(LAW_C, range(6, 25))
    assert abs(fit.rate - 30 / 49) < 0.01 and abs(fit.polynomial_exponent) < 0.2
    assert fit.note == ""


def test_decay_fit_d4_is_exploratory():
    fit = survival_decay_fit(LAW_D4, range(6, 15), K=400)
    assert fit.note.startswith("D4")
    assert 0.5 * (LAW_D4.mean(0) + LAW_D4.mean(1)) > 1 > fit.rate > math.sqrt(0.5 * 1.9)


def test_decay_fit_needs_four_points():
    with pytest.raises(ValueError):
        survival_decay_fit(LAW_C, [3, 4, 5])


# -- Monte Carlo lines -----------------------------------------------------------------------

def test_sample_line_examples():
    rng = np.random.default_rng(1)
    assert bpre_sample_line(LAW_B, 6, rng).tolist() == [2**g for g in range(7)]
    path = bpre_sample_line(LAW_A, 30, rng)
    assert set(path.tolist()) <= {0, 1} and np.all(np.diff(path) <= 0)


def test_sample_lines_match_exact_survival():
    rng = np.random.default_rng(7)
    n_paths = 10**6
    z = bpre_sample_lines(LAW_C, 6, n_paths, rng)[:, 6]
    p_hat = np.mean(z > 0)
    exact = survival_prob_exact(LAW_C, 6).mid
    se = math.sqrt(exact * (1 - exact) / n_paths)
    assert abs(p_hat - exact) <= 4 * se
