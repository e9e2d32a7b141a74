import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from kimmel import treesim
from kimmel._rng import RandomStream
from kimmel.bpre import bgw_survival, survival_prob_exact
from kimmel.model import from_table, total_offspring_law
from kimmel.stats import aggregate, l1_distance, wilson_interval
from kimmel.treesim import (BudgetExhausted, GenerationState, InfeasibleConditioning,
                            SimConfig, ancestor_proportions, estimate_recovery,
                            exact_acceptance, heavy_cell_mass, leaf_count, mean_identity_check,
                            multiplicity_stats, proportions, run_ensemble, run_replicate,
                            sample_split, step)

from .conftest import LAW_A, LAW_B, LAW_C, LAW_D, LAW_D5, LAW_E


# -- configuration ---------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"horizon": 0},
    {"replicates": 0},
    {"conditioning": "sometimes"},
    {"sampler": "magic"},
    {"k_top": 64, "cell_cap": 64},
    {"tag_from": 11},
    {"ancestor_depth": (6, 6)},
    {"master_seed": -1},
])
def test_config_validation(kwargs):
    args = {"law": LAW_C, "horizon": 10, **kwargs}
    with pytest.raises(ValueError):
        SimConfig(**args)


# -- single steps ------------------------------------------------------------------

def test_step_law_b():
    out = step(GenerationState.initial(), LAW_B, None, RandomStream(1, 0))
    assert out.generation == 1 and out.count.tolist() == [2, 2]
    assert out.parent.tolist() == [0, 0]


def test_step_law_d_outcomes():
    outcomes = {0: 0, 1: 0}
    for rid in range(4000):
        out = step(GenerationState.initial(), LAW_D, None, RandomStream(3, rid))
        assert out.n_cells <= 1 and (out.n_cells == 0 or out.count[0] == 1)
        outcomes[out.n_cells] += 1
    assert abs(outcomes[0] / 4000 - 0.5) < 4 * math.sqrt(0.25 / 4000)


def _joint_convolution(law, x):
    size = x * max(max(law.k0), max(law.k1)) + 1
    base = np.zeros((size, size))
    for (k0, k1), p in law.support:
        base[k0, k1] += p
    out = np.zeros((size, size))
    out[0, 0] = 1.0
    for _ in range(x):
        nxt = np.zeros_like(out)
        for (k0, k1), p in law.support:
            nxt[k0:, k1:] += p * out[: size - k0, : size - k1]
        out = nxt
    return out


def _chi2_pvalue(draws, exact):
    size = exact.shape[0]
    n = draws.shape[0]
    observed = np.zeros_like(exact)
    np.add.at(observed, (draws[:, 0], draws[:, 1]), 1)
    expected = exact * n
    big = expected >= 5
    o = np.append(observed[big], observed[~big].sum())
    e = np.append(expected[big], expected[~big].sum())
    stat = float(np.sum((o - e) ** 2 / e))
    return chi2.sf(stat, o.size - 1)


@pytest.mark.parametrize("x", [3, 40])
def test_split_matches_joint_convolution(x):
    # x = 3 uses one draw per parasite, x = 40 the conditional-binomial counts
    law = from_table([(k0, k1, p) for (k0, k1), p in LAW_C.support if k0 <= 6 and k1 <= 6]
                     + [(7, 0, 1.0 - sum(p for (k0, k1), p in LAW_C.support
                                             if k0 <= 6 and k1 <= 6))])
    draws = sample_split(law, x, 10**6, RandomStream(11, x))
    assert _chi2_pvalue(draws, _joint_convolution(law, x)) > 1e-4


def test_split_law_c_three_parasites():
    draws = sample_split(LAW_C, 3, 10**6, RandomStream(5, 0))
    size = int(draws.max()) + 1
    exact = _joint_convolution(LAW_C, 3)
    exact = exact[:size, :size] / exact[:size, :size].sum()
    assert _chi2_pvalue(draws, exact) > 1e-4


def test_saturation_flags_and_propagates():
    law = from_table([(4, 0, 1.0)])
    cfg = SimConfig(law, horizon=8, k_top=10, cell_cap=1000, replicates=1)
    r = run_replicate(cfg, 0)
    assert r.total_parasites[:5].tolist() == [1, 4, 16, 64, 256]
    assert not r.total_saturated[4] and r.total_saturated[5:].all()
    # a saturated cell holds the cap; its daughter gets round(cap * m0), capped again
    assert r.total_parasites[5:].tolist() == [1000] * 4
    assert r.f_histogram[8, -1] == 1 and r.n_contaminated[8] == 1


def test_max_cells_guard():
    cfg = SimConfig(LAW_B, horizon=6, replicates=1, max_cells=16)
    with pytest.raises(MemoryError):
        run_replicate(cfg, 0)


# -- replicates ---------------------------------------------------------------------

def test_replicate_law_b():
    r = run_replicate(SimConfig(LAW_B, horizon=5), 0)
    assert r.n_contaminated.tolist() == [2**g for g in range(6)]
    assert r.total_parasites.tolist() == [4**g for g in range(6)]
    assert r.recovery_ratio == 1.0 and r.extinction_generation is None


def test_replicate_law_a_single_line():
    for rid in range(20):
        r = run_replicate(SimConfig(LAW_A, horizon=10), rid)
        assert set(r.total_parasites.tolist()) == {1}
        assert set(r.n_contaminated.tolist()) == {1}


def test_replicate_deterministic():
    cfg = SimConfig(LAW_D, horizon=3, master_seed=99)
    assert run_replicate(cfg, 4).to_json() == run_replicate(cfg, 4).to_json()
    cfg = SimConfig(LAW_C, horizon=12, master_seed=99)
    assert run_replicate(cfg, 17).to_json() == run_replicate(cfg, 17).to_json()


tables = st.lists(
    st.tuples(st.integers(0, 4), st.integers(0, 4), st.floats(0.05, 1.0)),
    min_size=1, max_size=5,
).map(lambda rows: [(k0, k1, w / sum(r[2] for r in rows)) for k0, k1, w in rows])


@settings(max_examples=40, suppress_health_check=[HealthCheck.too_slow])
@given(tables, st.integers(0, 2**32), st.integers(0, 10**6))
def test_replicate_invariants(rows, seed, rid):
    law = from_table(rows)
    r = run_replicate(SimConfig(law, horizon=7, master_seed=seed, k_top=8), rid)
    nc, z = r.n_contaminated, r.total_parasites
    assert nc[0] == 1 and z[0] == 1
    assert np.array_equal(r.f_histogram.sum(axis=1), nc)
    assert np.all(z >= nc)
    assert np.all(np.diff(r.leaves_cumulative) >= 0)
    assert np.all(nc[1:] <= 2 * nc[:-1])
    dead = np.flatnonzero(nc == 0)
    if dead.size:
        assert r.extinction_generation == dead[0] and not nc[dead[0]:].any()
    else:
        assert r.extinction_generation is None
    assert np.all(r.max_cell_count <= z)


# -- ensembles and conditioning ---------------------------------------------------------

def test_law_b_always_accepted():
    for cond in treesim.CONDITIONINGS:
        ens = run_ensemble(SimConfig(LAW_B, horizon=4, replicates=50, conditioning=cond,
                                     batch_size=64))
        assert ens.accepted_count == 50 and ens.acceptance_rate == 1.0


def test_acceptance_law_d_horizon_4():
    cfg = SimConfig(LAW_D, horizon=4, replicates=4000, conditioning="survive_at_horizon")
    assert math.isclose(exact_acceptance(cfg), 0.0625)
    ens = run_ensemble(cfg)
    lo, hi = wilson_interval(ens.accepted_count, ens.attempted, 0.9999)
    assert lo <= 0.0625 <= hi


def test_acceptance_law_c_horizon_10():
    cfg = SimConfig(LAW_C, horizon=10, replicates=5000, conditioning="survive_at_horizon")
    exact = bgw_survival(total_offspring_law(LAW_C), 10)
    assert math.isclose(exact_acceptance(cfg), exact, rel_tol=1e-12)
    ens = run_ensemble(cfg)
    se = math.sqrt(exact * (1 - exact) / ens.attempted)
    assert abs(ens.acceptance_rate - exact) <= 4 * se


def test_infeasible_conditioning():
    with pytest.raises(InfeasibleConditioning):
        run_ensemble(SimConfig(LAW_D, horizon=4, conditioning="survive_forever"))
    with pytest.raises(InfeasibleConditioning):
        run_ensemble(SimConfig(LAW_E, horizon=20, conditioning="survive_at_horizon"))


def test_budget_exhausted():
    cfg = SimConfig(LAW_D, horizon=6, replicates=1000, conditioning="survive_at_horizon",
                    max_attempts=500, batch_size=100)
    with pytest.raises(BudgetExhausted):
        run_ensemble(cfg)


def test_spine_agrees_with_rejection():
    base = SimConfig(LAW_C, horizon=8, replicates=20000, conditioning="survive_with_margin",
                     margin=3, k_top=16, master_seed=4)
    rej = run_ensemble(base)
    spi = run_ensemble(replace(base, sampler="spine", master_seed=5))
    assert spi.attempted == spi.accepted_count
    for name in ("total_parasites", "n_contaminated", "leaves_cumulative"):
        d = rej.mean(name)[8] - spi.mean(name)[8]
        se = math.hypot(rej.stderr(name)[8], spi.stderr(name)[8])
        assert abs(d) <= 4.5 * se, name
    assert l1_distance(proportions(rej, 8), proportions(spi, 8)) < 0.03


def test_spine_conditioned_every_replicate_survives():
    cfg = SimConfig(LAW_E, horizon=16, replicates=500, conditioning="survive_at_horizon",
                    sampler="spine")
    ens = run_ensemble(cfg)
    assert np.all(ens.total_parasites[:, 16] > 0)


def test_unconditioned_mean_total_is_geometric():
    cfg = SimConfig(LAW_C, horizon=8, replicates=50000, master_seed=2)
    ens = run_ensemble(cfg)
    mu, se = ens.mean("total_parasites")[8], ens.stderr("total_parasites")[8]
    assert abs(mu - (60 / 49) ** 8) <= 4 * se


def test_ensemble_matches_aggregated_replicates():
    cfg = SimConfig(LAW_C, horizon=9, replicates=300, conditioning="survive_at_horizon",
                    batch_size=128, k_top=12, ancestor_depth=(3, 4), tag_from=3)
    ens = run_ensemble(cfg)
    results = [run_replicate(cfg, i) for i in range(ens.attempted)]
    rng = np.random.default_rng(0)
    shuffled = [results[i] for i in rng.permutation(len(results))]
    agg = aggregate(shuffled, chunk=128)
    assert agg.accepted_count == ens.accepted_count
    assert np.array_equal(agg.replicate_ids, ens.replicate_ids)
    for name in ("n_contaminated", "total_parasites", "max_cell_count"):
        assert np.array_equal(agg.series(name), ens.series(name))
    assert np.array_equal(agg.f_sum, ens.f_sum)
    assert np.array_equal(agg.ancestor_pooled, ens.ancestor_pooled)
    assert np.array_equal(agg.multiplicity_pooled, ens.multiplicity_pooled)
    agg.config = ens.config
    agg.exact_acceptance = ens.exact_acceptance
    assert agg.to_json() == ens.to_json()
    assert agg.to_csv("f") == ens.to_csv("f")


def test_ensemble_is_reproducible():
    cfg = SimConfig(LAW_C, horizon=10, replicates=500, conditioning="survive_with_margin")
    a, b = run_ensemble(cfg), run_ensemble(cfg)
    assert a.to_json() == b.to_json()
    assert a.to_csv("total_parasites") == b.to_csv("total_parasites")


# -- observables ------------------------------------------------------------------------

def test_proportions_examples():
    # law B: 2^g parasites per cell (the 4^g total is spread over 2^g cells)
    r = run_replicate(SimConfig(LAW_B, horizon=3), 0)
    f = proportions(r, 3, k_top=7)
    assert f[-1] == 1.0 and f.sum() == 1.0
    assert proportions(r, 3, k_top=20)[7] == 1.0
    r = run_replicate(SimConfig(LAW_A, horizon=6), 3)
    assert proportions(r, 6)[0] == 1.0
    dead = run_replicate(SimConfig(LAW_D, horizon=6), 0)
    if dead.extinction_generation is not None:
        with pytest.raises(ValueError):
            proportions(dead, 6)


def test_ancestor_proportions_examples():
    r = run_replicate(SimConfig(LAW_B, horizon=4, ancestor_depth=(2, 2)), 0)
    f = ancestor_proportions(r)
    assert f[3] == 1.0  # every gen-2 cell holds 4
    ens = run_ensemble(SimConfig(LAW_D, horizon=6, replicates=100, ancestor_depth=(2, 3),
                                 conditioning="survive_at_horizon"))
    assert ancestor_proportions(ens)[0] == 1.0
    with pytest.raises(ValueError):
        ancestor_proportions(run_replicate(SimConfig(LAW_B, horizon=4), 0))


def test_multiplicity_examples():
    ens = run_ensemble(SimConfig(LAW_D, horizon=6, replicates=100, tag_from=2,
                                 conditioning="survive_at_horizon"))
    hist, excluded = multiplicity_stats(ens, 10)
    assert hist[0] == hist.sum() > 0 and excluded == 0
    # every gen-2 cell of law B descends from the two parasites of its gen-1 parent
    r = run_replicate(SimConfig(LAW_B, horizon=2, tag_from=1), 0)
    hist, _ = multiplicity_stats(r, 10)
    assert hist[1] == hist.sum() == 4
    with pytest.raises(ValueError):
        multiplicity_stats(run_replicate(SimConfig(LAW_B, horizon=2), 0), 10)


def test_heavy_cell_mass_examples():
    r = run_replicate(SimConfig(LAW_D, horizon=1), 1)
    if r.total_parasites[1]:
        assert heavy_cell_mass(r, 1, 1) == 0.0
    r = run_replicate(SimConfig(LAW_B, horizon=3), 0)
    assert heavy_cell_mass(r, 3, 7) == 1.0 and heavy_cell_mass(r, 3, 8) == 0.0


def test_heavy_cell_mass_nonincreasing_in_k():
    ens = run_ensemble(SimConfig(LAW_C, horizon=10, replicates=1000,
                                 conditioning="survive_at_horizon"))
    values = [heavy_cell_mass(ens, 10, K) for K in range(1, 64)]
    assert all(0 <= v <= 1 for v in values)
    assert all(a >= b - 1e-15 for a, b in zip(values, values[1:]))


def test_leaf_count_examples():
    ens = run_ensemble(SimConfig(LAW_D, horizon=5, replicates=50,
                                 conditioning="survive_at_horizon"))
    assert not ens.leaves_cumulative.any()
    for rid in range(50):
        r = run_replicate(SimConfig(LAW_D, horizon=12), rid)
        if r.extinction_generation is not None:
            assert leaf_count(r, 12) == 1
        else:
            assert leaf_count(r, 12) == 0


def test_recovery_law_b():
    rep = estimate_recovery(SimConfig(LAW_B, horizon=8, replicates=20))
    assert rep.conditioned["q0.01"] == rep.conditioned["q0.99"] == 1.0
    assert rep.unconditioned["mean"] == 1.0 and rep.z_score == 0.0


def test_identity_examples():
    assert math.isclose(survival_prob_exact(LAW_D, 2).mid, 0.0625)
    rep = mean_identity_check(SimConfig(LAW_D, horizon=2, replicates=20000))
    assert rep.max_abs_z <= 4
    rep = mean_identity_check(SimConfig(LAW_B, horizon=6, replicates=10))
    assert rep.mc_mean == [1.0] * 7 and rep.exact_lower == [1.0] * 7
    with pytest.raises(ValueError):
        mean_identity_check(SimConfig(LAW_B, horizon=6, conditioning="survive_at_horizon"))


def test_margin_sensitivity_keys():
    out = treesim.margin_sensitivity(SimConfig(LAW_C, horizon=6, replicates=100))
    assert sorted(out) == [2, 6, 10]
    assert all(e.accepted_count == 100 for e in out.values())
