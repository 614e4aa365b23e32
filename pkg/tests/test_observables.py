import math

import numpy as np
import pytest

from conftest import random_density
from oracles import ghz_rho
from cqed_transfer.hilbert import DensityMatrix, HilbertSpace, StateVector, label
from cqed_transfer.model import GHZ, initial_state
from cqed_transfer.observables import (
    SERIES_NAMES,
    aligned_fidelity,
    aligned_fidelity_value,
    apply_local_phase,
    excitation_probability,
    fidelity_to,
    group_observables,
    mapping_phase,
    mean_photon_number,
    purity,
    qubit_block,
    reduced_state,
)

GHZ_KET = np.zeros(8, complex)
GHZ_KET[[0, 7]] = 1 / math.sqrt(2)


def test_reduced_state_of_initial_ghz():
    sp_ = HilbertSpace.network(1)
    psi = StateVector(sp_, initial_state(GHZ, sp_).vectors[0])
    np.testing.assert_allclose(reduced_state(psi, "f").matrix, ghz_rho(), atol=1e-14)
    atoms = reduced_state(psi, "a").matrix
    assert atoms[0, 0] == pytest.approx(1)
    assert mean_photon_number(psi, label("fB")) == pytest.approx(0.5)
    assert excitation_probability(psi) == 0
    with pytest.raises(ValueError):
        mean_photon_number(psi, label("aA"))


def test_purity_and_fidelity():
    assert purity(ghz_rho()) == pytest.approx(1)
    assert purity(np.eye(8) / 8) == pytest.approx(1 / 8)
    assert fidelity_to(ghz_rho(), GHZ_KET) == pytest.approx(1)
    with pytest.raises(ValueError):
        fidelity_to(ghz_rho(), np.ones(8))


def test_local_phase_on_ghz():
    # exp(-i phi n) per qubit multiplies |111> by exp(-3 i phi)
    k = apply_local_phase(GHZ_KET, math.pi / 2)
    assert k[7] == pytest.approx(1j / math.sqrt(2))
    assert k[0] == pytest.approx(1 / math.sqrt(2))


def test_aligned_fidelity_recovers_phase():
    for phi in (0.3, -1.2, math.pi / 2):
        rho = apply_local_phase(ghz_rho(), phi)
        f, found = aligned_fidelity(rho, GHZ_KET)
        assert f == pytest.approx(1, abs=1e-9)
        # only 3 phi mod 2 pi is observable
        assert np.exp(3j * found) == pytest.approx(np.exp(3j * phi), abs=1e-5)
        assert aligned_fidelity_value(rho, GHZ_KET) == pytest.approx(1, abs=1e-12)


def test_aligned_value_matches_search(rng):
    for _ in range(5):
        rho = random_density(rng, 8)
        c = rng.normal(size=2) + 1j * rng.normal(size=2)
        c /= np.linalg.norm(c)
        ref = np.zeros(8, complex)
        ref[0], ref[7] = c
        assert aligned_fidelity_value(rho, ref) == pytest.approx(aligned_fidelity(rho, ref)[0], abs=1e-8)


def test_mapping_phases():
    assert mapping_phase("a", 0) == pytest.approx(math.pi)
    assert mapping_phase("a", 1) == 0
    assert mapping_phase("c", 0) == pytest.approx(-math.pi / 2)
    assert mapping_phase("c", 1) == pytest.approx(math.pi / 2)
    with pytest.raises(ValueError):
        mapping_phase("f", 0)


def test_qubit_block_selection():
    dims = (3, 3, 3)
    rho = np.diag(np.arange(27.0))
    q = qubit_block(rho, dims)
    # |1,1,1> sits at 9 + 3 + 1
    assert q[7, 7] == 13
    assert q.shape == (8, 8)


def test_group_observables_initial():
    dims = {g: (2, 2, 2) for g in "acf"}
    vac = np.zeros((8, 8))
    vac[0, 0] = 1
    obs = group_observables({"a": vac, "c": vac, "f": ghz_rho()}, dims, GHZ_KET)
    assert set(obs) == set(SERIES_NAMES)
    assert obs["N_f"] == pytest.approx(0.5)
    assert obs["N_c"] == 0
    assert obs["E_f"] == pytest.approx(1)
    assert obs["E_a"] == 0
    assert obs["fidelity_a"] == pytest.approx(0.5)
    assert obs["purity_c"] == pytest.approx(1)
