import math
import warnings

import numpy as np
import pytest

import oracles as O
from cqed_transfer.evolve import (
    EvolutionOptions,
    Method,
    TimeGrid,
    TruncationWarning,
    evolve,
    evolve_master,
    evolve_mcwf,
    evolve_schrodinger,
    lindblad_rhs,
)
from cqed_transfer.hilbert import DensityMatrix, HilbertSpace, StateVector, label
from cqed_transfer.observables import group_populations
from cqed_transfer.model import GHZ, ModelParams, PureSchmidt, Werner, field_state, initial_state

TAU_OFF = math.pi / math.sqrt(2)


def prep(params, spec=GHZ):
    return initial_state(spec, HilbertSpace.network(params.cutoff))


def test_time_grid_breakpoints():
    g = TimeGrid(t_end=1.0, dt=0.1, sample_every=3, extra_times=(0.55,))
    pts, mask = g.points(tau_off=0.7)
    assert pts[0] == 0 and pts[-1] == 1.0
    assert 0.55 in pts and 0.7 in pts
    s = g.sample_times(0.7)
    assert 0.55 in s and 0.7 in s and 1.0 in s
    assert np.isclose(s, 0.3).any() and not np.isclose(s, 0.2).any()
    with pytest.raises(ValueError):
        TimeGrid(t_end=0.0)
    with pytest.raises(ValueError):
        TimeGrid(t_end=1.0, sample_every=0)


def test_options_validation():
    with pytest.raises(ValueError):
        EvolutionOptions(n_trajectories=0)
    with pytest.raises(ValueError):
        EvolutionOptions(seed=-1)


@pytest.mark.parametrize("spec", [GHZ, PureSchmidt(0.6, 0.8j)])
def test_schrodinger_matches_chain_oracle(spec):
    p = ModelParams(g=(1.0, 0.8, 1.3))
    rec = evolve_schrodinger(p, prep(p, spec), TimeGrid(t_end=4.5, dt=1e-3, sample_every=250))
    rho_f = field_state(spec)
    for i in range(0, len(rec.times), 3):
        t = rec.times[i]
        for g in "acf":
            ref = O.group_state(rho_f, t, g, g=(1.0, 0.8, 1.3))
            np.testing.assert_allclose(rec.reduced_states[g][i], ref, atol=1e-9)
    assert rec.diagnostics["norm_drift"] < 1e-9
    assert rec.diagnostics["excitation_drift"] < 1e-9


def test_schrodinger_refuses_dissipation():
    p = ModelParams(kappa_c=0.1)
    with pytest.raises(ValueError):
        evolve_schrodinger(p, prep(p), TimeGrid(t_end=0.1))


def test_master_matches_chain_oracle_with_all_losses():
    p = ModelParams(kappa_c=0.2, kappa_f=0.15, gamma_a=0.05)
    spec = Werner(0.3)
    rec = evolve_master(p, prep(p, spec), TimeGrid(t_end=4.0, dt=5e-3, sample_every=40))
    rho_f = field_state(spec)
    for i, t in enumerate(rec.times):
        for g in "acf":
            ref = O.group_state(rho_f, t, g, kappa_c=0.2, kappa_f=0.15, gamma=0.05)
            np.testing.assert_allclose(rec.reduced_states[g][i], ref, atol=1e-8)
    d = rec.diagnostics
    assert d["trace_dev"] < 1e-10 and d["herm_dev"] < 1e-10 and d["min_eig"] >= -1e-7


def cavity_b_photon(params):
    """Cavity B holds one photon; with g_B = nu_BB = 0 it only decays."""
    sp_ = HilbertSpace.network(params.cutoff)
    occ = [0] * 9
    occ[sp_.axis(label("cB"))] = 1
    v = np.zeros(sp_.dim, complex)
    v[sp_.index_of(occ)] = 1
    return sp_, v


def cavity_b_population(rec):
    return np.array([group_populations(r, (2, 2, 2))[1] for r in rec.reduced_states["c"]])


def decay_params(kappa=0.3):
    return ModelParams(g=(1.0, 0.0, 1.0), nu=np.diag([1.0, 0.0, 1.0]), kappa_c=kappa)


def test_master_single_mode_analytic_decay():
    p = decay_params()
    sp_, v = cavity_b_photon(p)
    rho0 = DensityMatrix(sp_, np.outer(v, v.conj()))
    rec = evolve_master(p, rho0, TimeGrid(t_end=3.0, dt=1e-3, sample_every=100))
    np.testing.assert_allclose(cavity_b_population(rec), np.exp(-0.3 * rec.times), atol=1e-6)


def test_mcwf_single_mode_analytic_decay():
    p = decay_params()
    sp_, v = cavity_b_photon(p)
    rec = evolve_mcwf(p, StateVector(sp_, v), TimeGrid(t_end=3.0, dt=1e-2, sample_every=25),
                      EvolutionOptions(method=Method.MCWF, n_trajectories=2000, seed=3))
    exact = np.exp(-0.3 * rec.times)
    got = cavity_b_population(rec)
    # every trajectory either still holds the photon or has lost it: binomial error
    se = np.sqrt(got * (1 - got) / 2000)
    inside = np.abs(got - exact) <= 3 * se + 1e-12
    assert inside.all(), (got - exact) / np.maximum(se, 1e-300)


def test_mcwf_without_dissipation_equals_schrodinger():
    p = ModelParams()
    grid = TimeGrid(t_end=6.0, dt=1e-3, sample_every=200)
    ref = evolve_schrodinger(p, prep(p), grid)
    rec = evolve_mcwf(p, prep(p), grid, EvolutionOptions(method=Method.MCWF, n_trajectories=20))
    assert rec.diagnostics["total_jumps"] == 0
    for k in ref.samples:
        np.testing.assert_allclose(rec.samples[k], ref.samples[k], atol=1e-9)


def test_mcwf_deterministic_and_worker_independent():
    p = ModelParams(kappa_c=0.3)
    grid = TimeGrid(t_end=3.0, dt=1e-2, sample_every=50)
    opts = EvolutionOptions(method=Method.MCWF, n_trajectories=60, seed=11, chunk_size=20)
    r1 = evolve_mcwf(p, prep(p), grid, opts)
    r2 = evolve_mcwf(p, prep(p), grid, opts)
    r3 = evolve_mcwf(p, prep(p), grid, EvolutionOptions(method=Method.MCWF, n_trajectories=60, seed=11,
                                                      chunk_size=20, workers=2))
    for k in r1.samples:
        assert np.array_equal(r1.samples[k], r2.samples[k])
        assert np.array_equal(r1.samples[k], r3.samples[k])
    assert r1.jumps == r3.jumps
    r4 = evolve_mcwf(p, prep(p), grid, EvolutionOptions(method=Method.MCWF, n_trajectories=60, seed=12))
    assert not np.array_equal(r1.samples["fidelity_a"], r4.samples["fidelity_a"])


def test_mcwf_agrees_with_master_mixed_input():
    p = ModelParams(kappa_c=0.4, gamma_a=0.1)
    spec = Werner(0.3)
    grid = TimeGrid(t_end=4.0, dt=1e-2, sample_every=50)
    me = evolve_master(p, prep(p, spec), grid)
    mc = evolve_mcwf(p, prep(p, spec), grid, EvolutionOptions(method=Method.MCWF, n_trajectories=1500, seed=5))
    for k in ("N_c", "p_e", "fidelity_a", "E_a", "purity_c"):
        z = np.abs(mc.samples[k] - me.samples[k]) - 3 * mc.stderr[k]
        assert np.all(z[1:] < 2e-3), k  # loose floor for the per-point multiple comparison


def test_lindblad_rhs_trace_free():
    p = ModelParams(kappa_c=0.2, kappa_f=0.1)
    sp_ = HilbertSpace.network(1)
    v = initial_state(GHZ, sp_).vectors[0]
    d = lindblad_rhs(p, DensityMatrix(sp_, np.outer(v, v.conj())), 0.1)
    assert abs(np.trace(d)) < 1e-12
    assert np.abs(d - d.conj().T).max() < 1e-12


def test_truncation_warning_multimode():
    p = ModelParams.multimode(0.8)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rec = evolve(p, prep(p), TimeGrid(t_end=2.0, dt=1e-3, sample_every=100))
    assert any(issubclass(w.category, TruncationWarning) for w in caught)
    assert rec.warnings
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        evolve(ModelParams(), prep(ModelParams()), TimeGrid(t_end=2.0, dt=1e-3, sample_every=100))


def test_cutoff_two_agrees_with_cutoff_one_single_mode():
    grid = TimeGrid(t_end=3.0, dt=1e-3, sample_every=100)
    r1 = evolve(ModelParams(), prep(ModelParams()), grid)
    p2 = ModelParams(cutoff=2)
    r2 = evolve(p2, prep(p2), grid)
    for k in r1.samples:
        np.testing.assert_allclose(r1.samples[k], r2.samples[k], atol=1e-10)
