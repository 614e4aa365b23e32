"""Hamiltonian, jump channels and initial states of the driven cavity network.

All quantities are dimensionless, scaled to the atom-cavity coupling of site A
(``g[0] == 1``) with time ``tau = g_A t``.  The fiber couplings are switched off
by an ideal step at ``tau_off``.
"""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Union

import numpy as np
import scipy.sparse as sp

from .hilbert import (
    SITES,
    DensityMatrix,
    HilbertSpace,
    Kind,
    Operator,
    StateVector,
    SubsystemLabel,
    embed_product,
)

TAU_OFF_DEFAULT = math.pi / math.sqrt(2)


def _fc(kind: Kind, j: int) -> SubsystemLabel:
    return SubsystemLabel(kind, SITES[j])


def destroy(d: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, d, dtype=float)), 1).astype(complex)


def _as_matrix(nu) -> tuple[tuple[float, ...], ...]:
    arr = np.asarray(nu, dtype=float)
    if arr.shape != (3, 3):
        raise ValueError("nu must be a 3x3 matrix")
    return tuple(tuple(float(x) for x in row) for row in arr)


@dataclass(frozen=True)
class ModelParams:
    g: tuple[float, float, float] = (1.0, 1.0, 1.0)
    nu: tuple[tuple[float, ...], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    kappa_c: float = 0.0
    kappa_f: float = 0.0
    gamma_a: float = 0.0
    nbar: float = 0.0
    tau_off: float = TAU_OFF_DEFAULT
    cutoff: int = 1

    def __post_init__(self):
        object.__setattr__(self, "g", tuple(float(x) for x in self.g))
        object.__setattr__(self, "nu", _as_matrix(self.nu))
        if len(self.g) != 3:
            raise ValueError("g needs three entries")
        if self.g[0] != 1.0:
            raise ValueError("g_A must be exactly 1 (all quantities are scaled to it)")
        values = list(self.g) + [x for row in self.nu for x in row]
        values += [self.kappa_c, self.kappa_f, self.gamma_a, self.nbar]
        if not all(math.isfinite(v) and v >= 0 for v in values):
            raise ValueError("couplings and rates must be finite and non-negative")
        if not (math.isfinite(self.tau_off) and self.tau_off > 0):
            raise ValueError("tau_off must be positive")
        if int(self.cutoff) != self.cutoff or self.cutoff < 1:
            raise ValueError("cutoff must be an integer >= 1")
        object.__setattr__(self, "cutoff", int(self.cutoff))

    @classmethod
    def single_mode(cls, **kw) -> "ModelParams":
        return cls(**kw)

    @classmethod
    def multimode(cls, nu_offdiag: float, **kw) -> "ModelParams":
        """Diagonal fiber couplings 1, all six off-diagonal ones equal to ``nu_offdiag``."""
        nu = np.full((3, 3), float(nu_offdiag))
        np.fill_diagonal(nu, 1.0)
        return cls(nu=nu, **kw)

    def replace(self, **kw) -> "ModelParams":
        return dataclasses.replace(self, **kw)

    @property
    def dissipative(self) -> bool:
        return any(r > 0 for r in (self.kappa_c, self.kappa_f, self.gamma_a))

    @property
    def nu_array(self) -> np.ndarray:
        return np.array(self.nu)

    @property
    def single_mode_coupling(self) -> bool:
        nu = self.nu_array
        return bool(np.all(nu[~np.eye(3, dtype=bool)] == 0))


@dataclass(frozen=True)
class PureSchmidt:
    c0: complex = 1 / math.sqrt(2)
    c1: complex = 1 / math.sqrt(2)

    def __post_init__(self):
        n2 = abs(self.c0) ** 2 + abs(self.c1) ** 2
        if abs(n2 - 1.0) > 1e-12:
            raise ValueError(f"Schmidt amplitudes not normalised (|c0|^2+|c1|^2 = {n2!r})")


@dataclass(frozen=True)
class Werner:
    p: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"Werner p={self.p} outside [0, 1]")


InitialStateSpec = Union[PureSchmidt, Werner]

GHZ = PureSchmidt()


def reference_ket(spec: InitialStateSpec) -> np.ndarray:
    """Three-qubit ket c0|000> + c1|111> (the GHZ state for Werner inputs)."""
    v = np.zeros(8, dtype=complex)
    if isinstance(spec, Werner):
        v[0] = v[7] = 1 / math.sqrt(2)
    else:
        v[0], v[7] = spec.c0, spec.c1
    return v


def field_state(spec: InitialStateSpec) -> np.ndarray:
    """8x8 density matrix of the three qubit-like field modes at tau = 0."""
    ghz = reference_ket(spec)
    proj = np.outer(ghz, ghz.conj())
    if isinstance(spec, Werner):
        return (1 - spec.p) * proj + spec.p / 8 * np.eye(8)
    return proj


class ChannelKind(str, enum.Enum):
    ATOM_DECAY = "AtomDecay"
    FIBER_LOSS = "FiberLoss"
    CAVITY_LOSS = "CavityLoss"
    CAVITY_GAIN = "CavityGain"


@dataclass(frozen=True, eq=False)
class JumpChannel:
    kind: ChannelKind
    site: str
    prefactor: float
    operator: Operator

    @property
    def name(self) -> str:
        return f"{self.kind.value}({self.site})"

    @property
    def zero(self) -> bool:
        return self.prefactor == 0.0


# A product term: coefficient times the tensor product of local matrices.
Term = tuple[complex, dict]


def hamiltonian_terms(params: ModelParams, tau: float) -> list[Term]:
    """Product terms of the interaction Hamiltonian at time ``tau``."""
    d = params.cutoff + 1
    a = destroy(d)
    s = destroy(2)
    terms: list[Term] = []
    for j in range(3):
        c, at = _fc(Kind.CAVITY, j), _fc(Kind.ATOM, j)
        gj = params.g[j]
        if gj:
            terms.append((gj, {c: a, at: s.conj().T}))
            terms.append((gj, {c: a.conj().T, at: s}))
    if tau < params.tau_off:
        for j in range(3):
            for k in range(3):
                v = params.nu[j][k]
                if v:
                    c, f = _fc(Kind.CAVITY, j), _fc(Kind.FIELD, k)
                    terms.append((v, {c: a, f: a.conj().T}))
                    terms.append((v, {c: a.conj().T, f: a}))
    return terms


def jump_terms(params: ModelParams, tau: float | None = None) -> list[tuple[ChannelKind, str, float, dict]]:
    """All twelve channels as (kind, site, prefactor, local factors).

    Fiber losses only act while the fibers are coupled (``tau < tau_off``);
    passing ``tau=None`` returns the ungated set.
    """
    d = params.cutoff + 1
    a = destroy(d)
    s = destroy(2)
    fiber_on = tau is None or tau < params.tau_off
    out = []
    for j, site in enumerate(SITES):
        out.append((ChannelKind.ATOM_DECAY, site, math.sqrt(params.gamma_a), {_fc(Kind.ATOM, j): s}))
        out.append((ChannelKind.FIBER_LOSS, site, math.sqrt(params.kappa_f) if fiber_on else 0.0,
                    {_fc(Kind.FIELD, j): a}))
        out.append((ChannelKind.CAVITY_LOSS, site, math.sqrt(params.kappa_c * (params.nbar + 1)),
                    {_fc(Kind.CAVITY, j): a}))
        out.append((ChannelKind.CAVITY_GAIN, site, math.sqrt(params.kappa_c * params.nbar),
                    {_fc(Kind.CAVITY, j): a.conj().T}))
    return out


def embed_terms(space: HilbertSpace, terms: list[Term]) -> sp.csr_matrix:
    m = sp.csr_matrix((space.dim, space.dim), dtype=complex)
    for coef, factors in terms:
        m = m + coef * embed_product(space, factors).matrix
    return m.tocsr()


def build_space(params: ModelParams) -> HilbertSpace:
    return HilbertSpace.network(params.cutoff)


@lru_cache(maxsize=64)
def _hamiltonian(params: ModelParams, fibers_on: bool, space: HilbertSpace) -> Operator:
    tau = 0.0 if fibers_on else params.tau_off
    return Operator(space, embed_terms(space, hamiltonian_terms(params, tau)))


def build_hamiltonian(params: ModelParams, tau: float, space: HilbertSpace | None = None) -> Operator:
    if tau < 0:
        raise ValueError("tau must be >= 0")
    space = space or build_space(params)
    return _hamiltonian(params, tau < params.tau_off, space)


@lru_cache(maxsize=64)
def _channels(params: ModelParams, fibers_on: bool, space: HilbertSpace) -> tuple[JumpChannel, ...]:
    tau = 0.0 if fibers_on else params.tau_off
    out = []
    for kind, site, pref, factors in jump_terms(params, tau):
        op = pref * embed_product(space, factors) if pref else Operator(
            space, sp.csr_matrix((space.dim, space.dim), dtype=complex))
        out.append(JumpChannel(kind, site, pref, op))
    return tuple(out)


def build_jump_channels(params: ModelParams, tau: float | None = None,
                        space: HilbertSpace | None = None) -> list[JumpChannel]:
    """Twelve channels (3 sites x 4 kinds); zero-rate channels carry zero operators."""
    space = space or build_space(params)
    fibers_on = tau is None or tau < params.tau_off
    return list(_channels(params, fibers_on, space))


def active_channels(params: ModelParams, tau: float, space: HilbertSpace | None = None) -> list[JumpChannel]:
    return [ch for ch in build_jump_channels(params, tau, space) if not ch.zero]


@lru_cache(maxsize=64)
def _effective(params: ModelParams, fibers_on: bool, space: HilbertSpace) -> Operator:
    h = _hamiltonian(params, fibers_on, space).matrix
    decay = sp.csr_matrix((space.dim, space.dim), dtype=complex)
    for ch in _channels(params, fibers_on, space):
        if not ch.zero:
            decay = decay + (ch.operator.matrix.conj().T @ ch.operator.matrix)
    return Operator(space, (h - 0.5j * decay).tocsr())


def build_effective_hamiltonian(params: ModelParams, tau: float, space: HilbertSpace | None = None) -> Operator:
    """H - (i/2) sum_k C_k^dag C_k over the channels active at ``tau``."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    space = space or build_space(params)
    return _effective(params, tau < params.tau_off, space)


def excitation_numbers(space: HilbertSpace) -> np.ndarray:
    """Total excitation (photons + excited atoms) of every basis state."""
    grids = np.indices(space.dims).reshape(len(space.dims), -1)
    return grids.sum(axis=0)


def total_excitation(space: HilbertSpace) -> Operator:
    return Operator(space, sp.diags(excitation_numbers(space).astype(complex), format="csr"))


def leakage_operators(params: ModelParams, tau: float, space: HilbertSpace | None = None) -> list[sp.csr_matrix]:
    """Operators whose summed squared action measures flow past the Fock cutoff.

    For a bosonic mode m the truncated Hamiltonian drops the amplitude
    sqrt(d) * P_top(m) X_m psi, where X_m multiplies m^dag in H.  The thermal
    gain jump contributes in the same way.  Zero for every state on which the
    truncation is exact.
    """
    space = space or build_space(params)
    d = params.cutoff + 1
    a = destroy(d)
    s = destroy(2)
    top = np.zeros((d, d), dtype=complex)
    top[-1, -1] = 1.0
    on = tau < params.tau_off
    ops = []
    for j in range(3):
        c, at = _fc(Kind.CAVITY, j), _fc(Kind.ATOM, j)
        partner: list[Term] = []
        if params.g[j]:
            partner.append((params.g[j], {c: top, at: s}))
        if on:
            for k in range(3):
                if params.nu[j][k]:
                    partner.append((params.nu[j][k], {c: top, _fc(Kind.FIELD, k): a}))
        if partner:
            ops.append(math.sqrt(d) * embed_terms(space, partner))
        if params.kappa_c * params.nbar > 0:
            ops.append(math.sqrt(params.kappa_c * params.nbar * d) * embed_product(space, {c: top}).matrix)
    if on:
        for k in range(3):
            f = _fc(Kind.FIELD, k)
            partner = [(params.nu[j][k], {f: top, _fc(Kind.CAVITY, j): a}) for j in range(3) if params.nu[j][k]]
            if partner:
                ops.append(math.sqrt(d) * embed_terms(space, partner))
    return ops


def embed_field_vector(space: HilbertSpace, v8: np.ndarray) -> np.ndarray:
    """Place a qubit-like three-mode field ket on the full space (cavities empty, atoms ground)."""
    out = np.zeros(space.dim, dtype=complex)
    field_axes = [space.axis(_fc(Kind.FIELD, j)) for j in range(3)]
    for b in range(8):
        if v8[b] == 0:
            continue
        occ = [0] * len(space.dims)
        for j, ax in enumerate(field_axes):
            occ[ax] = (b >> (2 - j)) & 1
        out[space.index_of(occ)] = v8[b]
    return out


@dataclass(frozen=True, eq=False)
class PreparedState:
    """Initial state as a spectral ensemble of pure states on ``space``."""

    space: HilbertSpace
    weights: np.ndarray
    vectors: np.ndarray  # shape (k, dim)
    spec: InitialStateSpec = field(default=GHZ)

    @property
    def pure(self) -> bool:
        return len(self.weights) == 1

    def state_vector(self) -> StateVector:
        if not self.pure:
            raise ValueError("mixed initial state has no state vector")
        return StateVector(self.space, self.vectors[0])

    def density_matrix(self) -> DensityMatrix:
        if self.space.dim > 4096:
            raise MemoryError(f"dense density matrix of dimension {self.space.dim} refused")
        v = self.vectors * np.sqrt(self.weights)[:, None]
        return DensityMatrix(self.space, v.T @ v.conj())


def initial_state(spec: InitialStateSpec, space: HilbertSpace) -> PreparedState:
    rho_f = field_state(spec)
    if isinstance(spec, PureSchmidt):
        weights, vecs = np.array([1.0]), reference_ket(spec)[None, :]
    else:
        w, v = np.linalg.eigh(rho_f)
        keep = w > 1e-14
        weights, vecs = w[keep][::-1], v[:, keep].T[::-1]
        weights = weights / weights.sum()
    full = np.array([embed_field_vector(space, x) for x in vecs])
    return PreparedState(space, np.asarray(weights, dtype=float), full, spec)
