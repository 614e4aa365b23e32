"""Populations, reduced states, purity, fidelity and local phase rotations."""
from __future__ import annotations

import math
from typing import Union

import numpy as np
from scipy.optimize import minimize_scalar

from .entanglement import tripartite_negativity
from .hilbert import (
    DensityMatrix,
    HilbertSpace,
    Kind,
    StateVector,
    SubsystemLabel,
    group_labels,
    partial_trace,
    reduce_vectors,
)

GROUPS = {"a": Kind.ATOM, "c": Kind.CAVITY, "f": Kind.FIELD}

SERIES_NAMES = (
    "N_f", "N_c", "p_e",
    "purity_a", "purity_c",
    "fidelity_a", "fidelity_c",
    "E_a", "E_c", "E_f",
    "fidelity_a_raw", "fidelity_c_raw",
)

State = Union[DensityMatrix, StateVector]

# Hamming weight of each three-qubit basis index.
WEIGHTS = np.array([bin(i).count("1") for i in range(8)])


def _kind(group: str | Kind) -> Kind:
    return GROUPS[group] if isinstance(group, str) and group in GROUPS else Kind(group)


def reduced_state(state: State, group: str | Kind) -> DensityMatrix:
    """Joint state of the three subsystems of one kind, ordered A, B, C."""
    keep = group_labels(_kind(group))
    if isinstance(state, StateVector):
        amps = state.amplitudes / math.sqrt(state.norm2())
        sub = state.space.subspace(keep)
        return DensityMatrix(sub, reduce_vectors(state.space, amps[None, :], keep))
    return partial_trace(state, keep)


def qubit_block(rho: np.ndarray, dims: tuple[int, ...]) -> np.ndarray:
    """Restrict a group state to Fock levels {0, 1} of each mode (no renormalisation)."""
    rho = np.asarray(rho)
    if all(d == 2 for d in dims):
        return rho
    idx = np.ravel_multi_index(np.indices((2,) * len(dims)).reshape(len(dims), -1), dims)
    return rho[np.ix_(idx, idx)]


def _number_diag(dims: tuple[int, ...], axis: int) -> np.ndarray:
    return np.indices(dims).reshape(len(dims), -1)[axis].astype(float)


def _expect_diag(state: State, diag: np.ndarray) -> float:
    if isinstance(state, StateVector):
        p = np.abs(state.amplitudes) ** 2
        return float(p @ diag / p.sum())
    return float(np.real(np.diagonal(state.matrix)) @ diag)


def mean_photon_number(state: State, mode: SubsystemLabel) -> float:
    if not mode.bosonic:
        raise ValueError(f"{mode} is not a bosonic mode")
    space = state.space
    return _expect_diag(state, _number_diag(space.dims, space.axis(mode)))


def excitation_probability(state: State, site: str | None = None) -> float:
    """Excited-state probability of the atom at ``site`` (mean over sites if None)."""
    space = state.space
    sites = [site] if site else ["A", "B", "C"]
    vals = [
        _expect_diag(state, _number_diag(space.dims, space.axis(SubsystemLabel(Kind.ATOM, s))))
        for s in sites
    ]
    return float(np.mean(vals))


def group_populations(rho_group: np.ndarray, dims: tuple[int, ...]) -> np.ndarray:
    """Mean occupation of each of the three modes of a group state."""
    p = np.real(np.diagonal(rho_group))
    return np.array([p @ _number_diag(dims, i) for i in range(len(dims))])


def purity(rho8) -> float:
    m = np.asarray(getattr(rho8, "matrix", rho8))
    return float(np.real(np.vdot(m.conj().T, m)))


def fidelity_to(rho8, reference: np.ndarray) -> float:
    m = np.asarray(getattr(rho8, "matrix", rho8))
    r = np.asarray(reference, dtype=complex)
    if abs(np.vdot(r, r) - 1) > 1e-10:
        raise ValueError("reference must be normalised")
    return float(np.real(np.vdot(r, m @ r)))


def apply_local_phase(state, phi: float):
    """Apply exp(-i phi n) on each of three qubits to a ket or an 8x8 matrix."""
    u = np.exp(-1j * phi * WEIGHTS)
    state = np.asarray(getattr(state, "matrix", state))
    if state.ndim == 1:
        return u * state
    return u[:, None] * state * u.conj()[None, :]


def mapping_phase(group: str, index: int) -> float:
    """Local phase relating the mapped state to the input at the ``index``-th mapping time.

    Atoms (tau_off + m pi): each transferred excitation picks up -1 at tau_off
    and another -1 per Rabi half-period, so phi = pi for even m and 0 for odd m.
    Cavities (tau_off + (n + 1/2) pi): phi = -pi/2 for even n, +pi/2 for odd n.
    """
    if group == "a":
        return math.pi if index % 2 == 0 else 0.0
    if group == "c":
        return -math.pi / 2 if index % 2 == 0 else math.pi / 2
    raise ValueError("mapping phases are defined for atoms and cavities")


def aligned_fidelity(rho8, reference: np.ndarray) -> tuple[float, float]:
    """Fidelity maximised over the local phase family U_phi |reference>.

    Returns ``(fidelity, phi)``.
    """
    m = np.asarray(getattr(rho8, "matrix", rho8))
    r = np.asarray(reference, dtype=complex)
    # F(phi) = sum_m a_m exp(i m phi), m = w_k - w_l
    terms = np.conj(r)[:, None] * r[None, :] * m
    diff = WEIGHTS[:, None] - WEIGHTS[None, :]
    harmonics = {k: terms[diff == k].sum() for k in range(-3, 4)}

    def f(phi):
        return float(np.real(sum(a * np.exp(1j * k * phi) for k, a in harmonics.items())))

    grid = np.linspace(-math.pi, math.pi, 361)
    vals = np.real(sum(a * np.exp(1j * k * grid) for k, a in harmonics.items()))
    i = int(np.argmax(vals))
    step = grid[1] - grid[0]
    res = minimize_scalar(lambda x: -f(x), bounds=(grid[i] - step, grid[i] + step),
                          method="bounded", options={"xatol": 1e-10})
    phi, best = (res.x, -res.fun) if -res.fun >= vals[i] else (grid[i], vals[i])
    phi = (phi + math.pi) % (2 * math.pi) - math.pi
    return float(best), float(phi)


def _ghz_like(reference: np.ndarray) -> bool:
    return not np.any(reference[1:7])


def aligned_fidelity_value(rho8, reference: np.ndarray) -> float:
    """``aligned_fidelity`` without the phase; closed form for c0|000> + c1|111> references."""
    r = np.asarray(reference, dtype=complex)
    if not _ghz_like(r):
        return aligned_fidelity(rho8, r)[0]
    m = np.asarray(getattr(rho8, "matrix", rho8))
    return float(abs(r[0]) ** 2 * m[0, 0].real + abs(r[7]) ** 2 * m[7, 7].real
                 + 2 * abs(r[0] * r[7] * m[0, 7]))


def site_spread(states: dict[str, np.ndarray], dims: dict[str, tuple[int, ...]]) -> float:
    """Largest difference between the per-site populations of any group."""
    return float(max(np.ptp(group_populations(states[g], dims[g])) for g in "acf"))


def group_observables(states: dict[str, np.ndarray], dims: dict[str, tuple[int, ...]],
                      reference: np.ndarray) -> dict[str, float]:
    """Every named series value from the reduced states of groups a, c and f."""
    ra, rc, rf = states["a"], states["c"], states["f"]
    q = {g: qubit_block(states[g], dims[g]) for g in "acf"}
    e = tripartite_negativity(np.stack([q["a"], q["c"], q["f"]]))
    # populations are reported for site A; site_spread() checks the other sites
    return {
        "N_f": float(group_populations(rf, dims["f"])[0]),
        "N_c": float(group_populations(rc, dims["c"])[0]),
        "p_e": float(group_populations(ra, dims["a"])[0]),
        "purity_a": purity(ra),
        "purity_c": purity(rc),
        "fidelity_a": aligned_fidelity_value(q["a"], reference),
        "fidelity_c": aligned_fidelity_value(q["c"], reference),
        "E_a": float(e[0]),
        "E_c": float(e[1]),
        "E_f": float(e[2]),
        "fidelity_a_raw": fidelity_to(q["a"], reference),
        "fidelity_c_raw": fidelity_to(q["c"], reference),
    }
