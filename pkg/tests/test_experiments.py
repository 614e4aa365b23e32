import math

import numpy as np
import pytest

import oracles as O
from cqed_transfer.evolve import TimeGrid
from cqed_transfer.model import GHZ, ModelParams, Werner, field_state
from cqed_transfer.experiments import (
    ScenarioConfig,
    SwitchOffPolicy,
    choose_tau_off,
    find_extremum,
    first_local_extremum,
    fit_exponential,
    mapping_times,
    robustness_tau_off,
    run_fig1,
    run_werner_plane,
    werner_boundaries,
    werner_class_at,
    werner_plane,
)

TAU_OFF = math.pi / math.sqrt(2)


def test_find_extremum_parabolic_refinement():
    t = np.linspace(0, 2, 21)
    y = 1 - (t - 0.83) ** 2
    e = find_extremum(t, y)
    assert e.tau == pytest.approx(0.83, abs=1e-12)
    assert e.value == pytest.approx(1, abs=1e-12)
    assert not e.boundary
    m = find_extremum(t, -y, "Min", window=(0.0, 0.5))
    assert m.boundary and m.tau == pytest.approx(0.5)
    with pytest.raises(ValueError):
        find_extremum(t, y, "Peak")


def test_first_local_extremum():
    t = np.linspace(0, 10, 1001)
    y = np.sin(t)
    assert first_local_extremum(t, y).tau == pytest.approx(math.pi / 2, abs=1e-6)
    assert first_local_extremum(t, y, "Min").tau == pytest.approx(3 * math.pi / 2, abs=1e-6)


def test_fit_exponential_exact():
    x = np.array([0.1, 0.2, 0.4, 0.5])
    r = fit_exponential(x, 0.9 * np.exp(-1.7 * x))
    assert r.rate == pytest.approx(1.7)
    assert r.amplitude == pytest.approx(0.9)
    assert r.residual < 1e-12
    with pytest.raises(ValueError):
        fit_exponential([1, 2], [1, 1])
    with pytest.raises(ValueError):
        fit_exponential([1, 2, 3], [1, 0, 1])


def test_max_pe_policy_finds_first_transfer():
    tau, rec = choose_tau_off(ModelParams(), GHZ, SwitchOffPolicy.MAX_PE)
    assert tau == pytest.approx(TAU_OFF, abs=1e-6)
    assert choose_tau_off(ModelParams(), GHZ, "FixedTime")[0] == TAU_OFF


def test_fig1_peaks_against_oracle():
    cfg = ScenarioConfig(grid=TimeGrid(t_end=TAU_OFF + 3 * math.pi, dt=1e-3, sample_every=10),
                         switch_off_policy=SwitchOffPolicy.MAX_PE)
    rec, peaks = run_fig1(cfg)
    tau_off = rec.diagnostics["tau_off"]
    assert tau_off == pytest.approx(TAU_OFF, abs=1e-3)
    atoms, cavities = mapping_times(TAU_OFF)
    assert len(peaks) == 6
    for row in peaks:
        expect = (atoms if row["group"] == "a" else cavities)[row["index"]]
        assert row["tau_peak"] == pytest.approx(expect, abs=0.01)
        assert row["phase_fidelity"] > 0.999
    # independent propagation of one chain, evaluated at the first cavity mapping time
    i = rec.index(cavities[0])
    ref = O.group_state(O.ghz_rho(), rec.times[i], "c")
    np.testing.assert_allclose(rec.reduced_states["c"][i], ref, atol=1e-8)


def test_robustness_symmetric_and_degrading():
    cfg = ScenarioConfig(grid=TimeGrid(t_end=TAU_OFF + 2 * math.pi, dt=1e-3))
    rows = robustness_tau_off(cfg, [-0.1, 0.0, 0.1])
    f = [r["fidelity_a"] for r in rows]
    assert f[1] == pytest.approx(1, abs=1e-6)
    assert f[0] == pytest.approx(f[2], abs=1e-6)
    assert f[0] < f[1]


@pytest.fixture(scope="module")
def plane():
    cfg = ScenarioConfig(grid=TimeGrid(t_end=TAU_OFF + 1.0, dt=1e-3, sample_every=10))
    return werner_plane(cfg)


def test_werner_plane_linear_decomposition_matches_oracle(plane):
    for p in (0.0, 0.35, 1.0):
        i = len(plane.times) // 3
        t = plane.times[i]
        for g in "acf":
            ref = O.group_state(field_state(Werner(p)), t, g)
            np.testing.assert_allclose(plane.states(p, g)[i], ref, atol=1e-9)


def test_werner_boundaries_at_first_mapping(plane):
    b = werner_boundaries(plane)
    assert [r["p"] for r in b] == pytest.approx([2 / 7, 4 / 7, 4 / 5], abs=1e-6)
    assert [r["to"] for r in b] == ["Wclass", "INS", "FullySeparable"]
    assert werner_class_at(plane, TAU_OFF, 0.1).value == "GHZclass"


def test_run_werner_plane_tables():
    cfg = ScenarioConfig(grid=TimeGrid(t_end=TAU_OFF + 0.5, dt=1e-3, sample_every=20))
    out = run_werner_plane(cfg, [0.0, 0.5], tau_stride=5)
    assert {r["p"] for r in out["werner_map"]} == {0.0, 0.5}
    assert out["werner_sections"]
    assert all(ev["kind"] in ("Death", "Birth") for ev in out["esd_events"])
    with pytest.raises(ValueError):
        run_werner_plane(cfg, [1.5])


def test_werner_p0_matches_pure_path():
    grid = TimeGrid(t_end=TAU_OFF + 2 * math.pi, dt=1e-3, sample_every=10)
    rec, _ = run_fig1(ScenarioConfig(grid=grid))
    plane = werner_plane(ScenarioConfig(grid=grid))
    e = plane.negativity(0.0, "a")
    common = np.intersect1d(rec.times, plane.times)
    assert len(common) > 100
    ia = np.searchsorted(rec.times, common)
    ib = np.searchsorted(plane.times, common)
    np.testing.assert_allclose(e[ib], rec.samples["E_a"][ia], atol=1e-8)


def test_per_chain_conservation_and_site_symmetry():
    rec, _ = run_fig1(ScenarioConfig(grid=TimeGrid(t_end=TAU_OFF + 2 * math.pi, dt=1e-3, sample_every=20)))
    total = rec.samples["N_f"] + rec.samples["N_c"] + rec.samples["p_e"]
    np.testing.assert_allclose(total, 0.5, atol=1e-6)
    assert rec.diagnostics["site_spread"] < 1e-10
