"""Time evolution by Schrodinger, Lindblad master-equation or quantum-trajectory integration.

All three integrators sample the same named observables (see
``observables.SERIES_NAMES``) on the same time nodes, so their records are
interchangeable.  The fiber switch-off at ``tau_off`` is always a grid node.
"""
from __future__ import annotations

import enum
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import scipy.sparse as sp

from .hilbert import (
    DensityMatrix,
    HilbertSpace,
    Kind,
    StateVector,
    apply_on,
    embed_product,
    group_labels,
    reduce_vectors,
)
from .model import (
    GHZ,
    ModelParams,
    PreparedState,
    build_effective_hamiltonian,
    build_hamiltonian,
    build_jump_channels,
    embed_terms,
    excitation_numbers,
    hamiltonian_terms,
    jump_terms,
    leakage_operators,
    reference_ket,
)
from .observables import SERIES_NAMES, group_observables, site_spread

logger = logging.getLogger(__name__)

GROUP_KINDS = {"a": Kind.ATOM, "c": Kind.CAVITY, "f": Kind.FIELD}
LEAKAGE_TOL = 1e-6
JUMP_TIME_TOL = 1e-6


class Method(str, enum.Enum):
    SCHRODINGER = "Schrodinger"
    MASTER = "MasterEquation"
    MCWF = "MCWF"


class EvolutionError(RuntimeError):
    """Integrator aborted (norm or trace drift, inconsistent jump)."""


class TruncationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TimeGrid:
    t_end: float
    t_start: float = 0.0
    dt: float = 1e-3
    sample_every: int = 10
    extra_times: tuple[float, ...] = ()

    def __post_init__(self):
        if not (self.t_start >= 0 and self.t_end > self.t_start):
            raise ValueError("need t_end > t_start >= 0")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if int(self.sample_every) != self.sample_every or self.sample_every < 1:
            raise ValueError("sample_every must be a positive integer")
        object.__setattr__(self, "extra_times", tuple(float(t) for t in self.extra_times))

    def points(self, tau_off: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Integration points and a mask of the sampled ones.

        Points are the lattice ``t_start + k dt`` with the breakpoints (``t_end``,
        ``tau_off`` and ``extra_times`` inside the interval) inserted exactly;
        every ``sample_every``-th lattice point and every breakpoint is sampled.
        """
        n = int(math.floor((self.t_end - self.t_start) / self.dt + 1e-9))
        pts = self.t_start + self.dt * np.arange(n + 1)
        mask = np.arange(n + 1) % self.sample_every == 0
        breaks = [self.t_end] + [t for t in (tau_off, *self.extra_times)
                                 if t is not None and self.t_start < t < self.t_end]
        for b in breaks:
            k = int(np.searchsorted(pts, b))
            near = [j for j in (k - 1, k) if 0 <= j < len(pts) and abs(pts[j] - b) < 1e-9]
            if near:
                pts[near[0]] = b
                mask[near[0]] = True
            else:
                pts = np.insert(pts, k, b)
                mask = np.insert(mask, k, True)
        keep = pts <= self.t_end
        return pts[keep], mask[keep]

    def sample_times(self, tau_off: float | None = None) -> np.ndarray:
        pts, mask = self.points(tau_off)
        return pts[mask]


@dataclass(frozen=True)
class EvolutionOptions:
    method: Method = Method.SCHRODINGER
    n_trajectories: int = 5000
    seed: int = 0
    workers: int = 1
    chunk_size: int = 250
    keep_states: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.n_trajectories < 1:
            raise ValueError("n_trajectories must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.workers < 1 or self.chunk_size < 1:
            raise ValueError("workers and chunk_size must be >= 1")


@dataclass
class EvolutionRecord:
    times: np.ndarray
    samples: dict[str, np.ndarray]
    reduced_states: dict[str, np.ndarray] | None = None
    stderr: dict[str, np.ndarray] | None = None
    jumps: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)

    def index(self, tau: float) -> int:
        """Index of the sampled time closest to ``tau``."""
        return int(np.argmin(np.abs(self.times - tau)))

    def value(self, name: str, tau: float) -> float:
        return float(self.samples[name][self.index(tau)])

    def row(self, i: int) -> dict[str, float]:
        return {k: float(v[i]) for k, v in self.samples.items()}

    def state(self, group: str, tau: float) -> np.ndarray:
        if self.reduced_states is None:
            raise ValueError("record was produced without reduced states")
        return self.reduced_states[group][self.index(tau)]


Initial = Union[PreparedState, StateVector, DensityMatrix]


# -- shared sampling ---------------------------------------------------------

def _group_dims(space: HilbertSpace) -> dict[str, tuple[int, ...]]:
    return {g: tuple(space.dim_of(l) for l in group_labels(k)) for g, k in GROUP_KINDS.items()}


class _Sampler:
    """Accumulates observables (and optionally group states) at sampled times."""

    def __init__(self, space: HilbertSpace, reference: np.ndarray, keep_states: bool):
        self.dims = _group_dims(space)
        self.reference = reference
        self.keep_states = keep_states
        self.rows: list[dict[str, float]] = []
        self.spread = 0.0
        self.states: dict[str, list[np.ndarray]] = {g: [] for g in GROUP_KINDS}

    def add(self, states: dict[str, np.ndarray]) -> None:
        self.rows.append(group_observables(states, self.dims, self.reference))
        self.spread = max(self.spread, site_spread(states, self.dims))
        if self.keep_states:
            for g in GROUP_KINDS:
                self.states[g].append(states[g])

    def record(self, times: np.ndarray) -> EvolutionRecord:
        samples = {k: np.array([r[k] for r in self.rows]) for k in SERIES_NAMES}
        reduced = {g: np.array(v) for g, v in self.states.items()} if self.keep_states else None
        return EvolutionRecord(np.asarray(times, dtype=float), samples, reduced,
                               diagnostics={"site_spread": self.spread})


def _check_leakage(rec: EvolutionRecord, leak: np.ndarray) -> None:
    worst = float(np.max(leak)) if len(leak) else 0.0
    rec.diagnostics["truncation_leakage"] = worst
    if worst > LEAKAGE_TOL:
        msg = f"Fock cutoff too small: leakage measure {worst:.3e} exceeds {LEAKAGE_TOL:g}"
        rec.warnings.append(msg)
        warnings.warn(msg, TruncationWarning, stacklevel=3)


def _leakage_matrix(params: ModelParams, tau: float, space: HilbertSpace) -> sp.csr_matrix:
    m = sp.csr_matrix((space.dim, space.dim), dtype=complex)
    for op in leakage_operators(params, tau, space):
        m = m + op.conj().T @ op
    return m.tocsr()


def _fibers_on(params: ModelParams, t0: float, t1: float) -> bool:
    return 0.5 * (t0 + t1) < params.tau_off


def _reference(initial, reference) -> np.ndarray:
    if reference is not None:
        return np.asarray(reference, dtype=complex)
    spec = getattr(initial, "spec", None)
    return reference_ket(spec if spec is not None else GHZ)


def _ensemble(initial) -> tuple[HilbertSpace, np.ndarray, np.ndarray]:
    if isinstance(initial, PreparedState):
        return initial.space, np.asarray(initial.weights, float), np.asarray(initial.vectors, complex)
    if isinstance(initial, StateVector):
        v = initial.amplitudes / math.sqrt(initial.norm2())
        return initial.space, np.array([1.0]), v[None, :]
    raise TypeError("expected a PreparedState or StateVector")


class _Restriction:
    """Group reductions for states supported on the basis subset ``idx``."""

    def __init__(self, space: HilbertSpace, idx: np.ndarray):
        self.space = space
        self.idx = np.asarray(idx)
        occ = np.array(np.unravel_index(self.idx, space.dims)).T
        self.plans = {}
        for g, kind in GROUP_KINDS.items():
            kept = [space.axis(l) for l in group_labels(kind)]
            traced = [i for i in range(len(space.dims)) if i not in kept]
            kdims = [space.dims[i] for i in kept]
            ki = np.ravel_multi_index(occ[:, kept].T, kdims)
            ti = np.ravel_multi_index(occ[:, traced].T, [space.dims[i] for i in traced])
            blocks = [(sel, ki[sel]) for sel in (np.nonzero(ti == t)[0] for t in np.unique(ti))]
            qubit = np.ravel_multi_index(np.indices((2, 2, 2)).reshape(3, -1), kdims)
            # occupation of the group's site-A mode in each basis state
            occupation = occ[:, kept[0]].astype(float)
            self.plans[g] = (int(np.prod(kdims)), int(np.prod([space.dims[i] for i in traced])),
                             ki, ti, blocks, qubit, occupation)

    def density(self, rho: np.ndarray) -> dict[str, np.ndarray]:
        out = {}
        for g, (dk, _, _, _, blocks, _, _) in self.plans.items():
            r = np.zeros((dk, dk), dtype=complex)
            for sel, k in blocks:
                r[np.ix_(k, k)] += rho[np.ix_(sel, sel)]
            out[g] = r
        return out

    def _tensor(self, g: str, vectors: np.ndarray) -> np.ndarray:
        dk, dt, ki, ti, _, _, _ = self.plans[g]
        t = np.zeros((vectors.shape[0], dk, dt), dtype=complex)
        t[:, ki, ti] = vectors
        return t

    def vectors(self, vectors: np.ndarray, weights=None) -> dict[str, np.ndarray]:
        """Weighted sum of the group states of a stack of restricted vectors."""
        if weights is not None:
            vectors = vectors * np.sqrt(np.asarray(weights, dtype=float))[:, None]
        out = {}
        for g in self.plans:
            t = self._tensor(g, vectors)
            m = t.transpose(1, 0, 2).reshape(t.shape[1], -1)
            out[g] = m @ m.conj().T
        return out

    def per_vector(self, vectors: np.ndarray) -> tuple[dict, dict, dict]:
        """Summed group states, per-vector qubit blocks (n, 8, 8) and site-A occupations (n,)."""
        sums, blocks, occ = {}, {}, {}
        p = np.abs(vectors) ** 2
        for g, plan in self.plans.items():
            t = self._tensor(g, vectors)
            q = t if plan[0] == 8 else t[:, plan[5], :]
            blocks[g] = np.matmul(q, q.conj().transpose(0, 2, 1))
            if plan[0] == 8:
                sums[g] = blocks[g].sum(axis=0)
            else:
                m = t.transpose(1, 0, 2).reshape(t.shape[1], -1)
                sums[g] = m @ m.conj().T
            occ[g] = p @ plan[6]
        return sums, blocks, occ


# -- Lindblad generator --------------------------------------------------------

def lindblad_rhs(params: ModelParams, rho: DensityMatrix, tau: float) -> np.ndarray:
    """-i (H_e rho - rho H_e^dag) + sum_k C_k rho C_k^dag at time ``tau``."""
    he = build_effective_hamiltonian(params, tau, rho.space).matrix
    m = rho.matrix
    out = -1j * (he @ m - (he @ m.conj().T).conj().T)
    for ch in build_jump_channels(params, tau, rho.space):
        if not ch.zero:
            c = ch.operator.matrix
            out = out + c @ (c @ m.conj().T).conj().T
    return np.asarray(out)


def _liouvillian(he: sp.spmatrix, channels: list[sp.spmatrix]) -> sp.csr_matrix:
    """Row-major vectorised generator: vec(A X B) = kron(A, B^T) vec(X)."""
    n = he.shape[0]
    eye = sp.identity(n, dtype=complex, format="csr")
    out = -1j * sp.kron(he, eye) + 1j * sp.kron(eye, he.conj())
    for c in channels:
        out = out + sp.kron(c, c.conj())
    return out.tocsr()


def _rk4(f, y, h):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


# -- Schrodinger -------------------------------------------------------------

def _segment_tau(params: ModelParams, on: bool) -> float:
    return 0.0 if on else params.tau_off


def _restricted_leakage(params: ModelParams, space: HilbertSpace, idx: np.ndarray) -> dict:
    return {on: _leakage_matrix(params, _segment_tau(params, on), space)[idx][:, idx].tocsr()
            for on in (True, False)}


def evolve_schrodinger(params: ModelParams, psi0: PreparedState | StateVector, grid: TimeGrid,
                       reference=None, keep_states: bool = True) -> EvolutionRecord:
    """RK4 on psi' = -i H psi for every spectral component of the initial state.

    H conserves the total excitation number, so integration is restricted to
    the excitation sectors populated initially.
    """
    if params.dissipative:
        raise ValueError("Schrodinger evolution requires all dissipation rates to be zero")
    space, weights, vecs = _ensemble(psi0)
    ref = _reference(psi0, reference)
    exc = excitation_numbers(space)
    sectors = np.unique(exc[np.any(np.abs(vecs) > 0, axis=0)])
    idx = np.nonzero(np.isin(exc, sectors))[0]
    ham = {}
    for on in (True, False):
        h = build_hamiltonian(params, _segment_tau(params, on), space).matrix[idx][:, idx]
        ham[on] = h.toarray() if len(idx) <= 1024 else h.tocsr()
    leak = _restricted_leakage(params, space, idx)
    restr = _Restriction(space, idx)
    n_op = exc[idx].astype(float)

    y = vecs[:, idx].T.copy()  # (n_r, k)
    norm0 = np.sum(np.abs(y) ** 2, axis=0)
    exc0 = weights @ (n_op @ (np.abs(y) ** 2) / norm0)
    pts, mask = grid.points(params.tau_off)
    sampler = _Sampler(space, ref, keep_states)
    leaks, drift, exc_drift = [], 0.0, 0.0

    def sample(on):
        nonlocal drift, exc_drift
        n2 = np.sum(np.abs(y) ** 2, axis=0)
        drift = max(drift, float(np.max(np.abs(n2 - norm0))))
        if drift > 1e-6:
            raise EvolutionError(f"norm drift {drift:.3e} exceeds 1e-6; reduce dt")
        exc_drift = max(exc_drift, abs(float(weights @ (n_op @ (np.abs(y) ** 2) / n2)) - exc0))
        unit = (y / np.sqrt(n2)).T
        sampler.add(restr.vectors(unit, weights))
        leaks.append(float(weights @ np.einsum("ki,ki->k", unit.conj(), (leak[on] @ unit.T).T).real))

    sample(pts[0] < params.tau_off)
    for t0, t1, s in zip(pts[:-1], pts[1:], mask[1:]):
        on = _fibers_on(params, t0, t1)
        h = ham[on]
        y = _rk4(lambda v: -1j * (h @ v), y, t1 - t0)
        if s:
            sample(on)
    rec = sampler.record(pts[mask])
    rec.diagnostics.update(norm_drift=drift, excitation_drift=exc_drift, sector_dim=len(idx),
                           method=Method.SCHRODINGER.value)
    _check_leakage(rec, np.array(leaks))
    return rec


# -- master equation ---------------------------------------------------------

def _dynamical_support(params: ModelParams, space: HilbertSpace, populated: np.ndarray) -> np.ndarray:
    """Basis states reachable from the populated ones: without thermal gain the
    excitation number never grows."""
    exc = excitation_numbers(space)
    if params.kappa_c * params.nbar > 0:
        return np.arange(space.dim)
    return np.nonzero(exc <= exc[populated].max())[0]


def evolve_master(params: ModelParams, rho0: DensityMatrix | PreparedState, grid: TimeGrid,
                  reference=None, keep_states: bool = True, max_dim: int = 1024) -> EvolutionRecord:
    """RK4 on the vectorised Lindblad equation, restricted to the dynamical support."""
    ref = _reference(rho0, reference)
    if isinstance(rho0, PreparedState):
        rho0 = rho0.density_matrix()
    space = rho0.space
    idx = _dynamical_support(params, space, np.nonzero(np.abs(np.diagonal(rho0.matrix)) > 0)[0])
    if len(idx) > max_dim:
        raise MemoryError(f"master equation on {len(idx)} basis states exceeds max_dim={max_dim}")
    gens = {}
    for on in (True, False):
        tau = _segment_tau(params, on)
        he = build_effective_hamiltonian(params, tau, space).matrix[idx][:, idx]
        chans = [ch.operator.matrix[idx][:, idx] for ch in build_jump_channels(params, tau, space) if not ch.zero]
        gens[on] = _liouvillian(he, chans)
    leak = {on: m.toarray() for on, m in _restricted_leakage(params, space, idx).items()}
    restr = _Restriction(space, idx)
    n = len(idx)
    y = rho0.matrix[np.ix_(idx, idx)].reshape(-1).astype(complex)
    tr0 = float(np.trace(rho0.matrix).real)
    pts, mask = grid.points(params.tau_off)
    sampler = _Sampler(space, ref, keep_states)
    leaks = []
    diag = {"trace_dev": 0.0, "herm_dev": 0.0, "min_eig": 1.0}

    def sample(on):
        rho = y.reshape(n, n)
        tr = float(np.trace(rho).real)
        if abs(tr - tr0) > 1e-5:
            raise EvolutionError(f"trace drift {abs(tr - tr0):.3e} exceeds 1e-5; reduce dt")
        diag["trace_dev"] = max(diag["trace_dev"], abs(tr - 1.0))
        diag["herm_dev"] = max(diag["herm_dev"], float(np.max(np.abs(rho - rho.conj().T))))
        diag["min_eig"] = min(diag["min_eig"], float(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0]))
        sampler.add(restr.density(rho))
        leaks.append(float(np.real(np.sum(leak[on] * rho.T))))

    sample(pts[0] < params.tau_off)
    for t0, t1, s in zip(pts[:-1], pts[1:], mask[1:]):
        gen = gens[_fibers_on(params, t0, t1)]
        y = _rk4(lambda v: gen @ v, y, t1 - t0)
        if s:
            sample(_fibers_on(params, t0, t1))
    rec = sampler.record(pts[mask])
    rec.diagnostics.update(diag, sector_dim=n, method=Method.MASTER.value)
    _check_leakage(rec, np.array(leaks))
    return rec


# -- quantum trajectories ------------------------------------------------------

def coupled_components(space: HilbertSpace, terms) -> list[tuple]:
    """Groups of subsystems linked by Hamiltonian product terms, in declared order."""
    parent = {l: l for l in space.labels}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for _, factors in terms:
        labs = list(factors)
        for other in labs[1:]:
            parent[find(other)] = find(labs[0])
    groups: dict = {}
    for l in space.labels:
        groups.setdefault(find(l), []).append(l)
    return [tuple(g) for g in groups.values()]


class _Propagator:
    """exp(-i H_e s) on one fiber segment, restricted to basis subset ``idx``.

    H_e is diagonalised per coupled component and per excitation sector of
    that component, so the eigenbasis never mixes sectors and the tensor
    product of component eigenbases restricts exactly to ``idx``.
    """

    def __init__(self, params: ModelParams, space: HilbertSpace, fibers_on: bool, idx: np.ndarray):
        tau = _segment_tau(params, fibers_on)
        hterms = hamiltonian_terms(params, tau)
        jterms = [t for t in jump_terms(params, tau) if t[2] > 0]
        occ = np.array(np.unravel_index(idx, space.dims))
        n = len(idx)
        self.lam = np.zeros(n, dtype=complex)
        v_full = np.ones((n, n), dtype=complex)
        vinv_full = np.ones((n, n), dtype=complex)
        for labs in coupled_components(space, hterms):
            sub = space.subspace(labs)
            members = set(labs)
            h = embed_terms(sub, [t for t in hterms if set(t[1]) <= members]).toarray()
            for _, _, pref, fac in jterms:
                if set(fac) <= members:
                    c = pref * embed_product(sub, fac).dense()
                    h = h - 0.5j * c.conj().T @ c
            w = np.zeros(sub.dim, dtype=complex)
            v = np.eye(sub.dim, dtype=complex)
            vinv = np.eye(sub.dim, dtype=complex)
            exc = excitation_numbers(sub)
            for e in np.unique(exc):
                sel = np.nonzero(exc == e)[0]
                block = h[np.ix_(sel, sel)]
                if not np.any(block):
                    continue
                bw, bv = np.linalg.eig(block)
                cond = np.linalg.cond(bv)
                if cond > 1e8:
                    raise EvolutionError(f"effective Hamiltonian near an exceptional point (cond {cond:.2e})")
                w[sel] = bw
                v[np.ix_(sel, sel)] = bv
                vinv[np.ix_(sel, sel)] = np.linalg.inv(bv)
            local = np.ravel_multi_index(occ[[space.axis(l) for l in sub.labels]], sub.dims)
            self.lam += w[local]
            v_full *= v[np.ix_(local, local)]
            vinv_full *= vinv[np.ix_(local, local)]
        # row-vector convention: states are rows, so apply transposes
        self.vt = v_full.T.copy()
        self.vinvt = vinv_full.T.copy()
        self._cache: dict[float, np.ndarray] = {}

    def step(self, states: np.ndarray, h: float) -> np.ndarray:
        pt = self._cache.get(h)
        if pt is None:
            pt = (self.vinvt * np.exp(-1j * self.lam * h)) @ self.vt
            self._cache[h] = pt
        return states @ pt

    def to_eig(self, states):
        return states @ self.vinvt

    def from_eig(self, coeffs, s):
        """Evolve eigen-coordinates by per-row times ``s`` and map back."""
        return (coeffs * np.exp(-1j * np.outer(s, self.lam))) @ self.vt


def _norm2(states):
    return np.einsum("ij,ij->i", states.conj(), states).real


def _run_chunk(params: ModelParams, space: HilbertSpace, weights, vectors, nodes, seed: int,
               start: int, count: int, idx: np.ndarray) -> dict:
    props = {on: _Propagator(params, space, on, idx) for on in (True, False)}
    chans = {}
    for on in (True, False):
        chs = build_jump_channels(params, _segment_tau(params, on), space)
        chans[on] = [(ch.name, ch.operator.matrix[idx][:, idx].tocsr()) for ch in chs if not ch.zero]
    leak = _restricted_leakage(params, space, idx)
    restr = _Restriction(space, idx)

    rngs = [np.random.default_rng([seed, i]) for i in range(start, start + count)]
    pick = [int(g.choice(len(weights), p=weights)) if len(weights) > 1 else 0 for g in rngs]
    psi = vectors[pick][:, idx].copy()
    r = np.array([1.0 - g.random() for g in rngs])
    jumps = np.zeros(count, dtype=int)
    by_channel: dict[str, int] = {}
    n_nodes = len(nodes)
    dk = {g: restr.plans[g][0] for g in GROUP_KINDS}
    sums = {g: np.zeros((n_nodes, dk[g], dk[g]), dtype=complex) for g in GROUP_KINDS}
    moments = {g: np.zeros((n_nodes, 64, 64), dtype=complex) for g in GROUP_KINDS}
    occ = {g: np.zeros((n_nodes, 2)) for g in GROUP_KINDS}
    leaks = np.zeros(n_nodes)

    def sample(k, on):
        unit = psi / np.sqrt(_norm2(psi))[:, None]
        states, blocks, pops = restr.per_vector(unit)
        for g in GROUP_KINDS:
            sums[g][k] = states[g]
            v = blocks[g].reshape(count, 64)
            moments[g][k] = v.T @ v.conj()
            occ[g][k] = pops[g].sum(), (pops[g] ** 2).sum()
        leaks[k] = float(np.einsum("ij,ij->", unit.conj(), (leak[on] @ unit.T).T).real)

    sample(0, nodes[0] < params.tau_off)
    for k in range(n_nodes - 1):
        t0, t1 = nodes[k], nodes[k + 1]
        on = _fibers_on(params, t0, t1)
        prop = props[on]
        psi_next = prop.step(psi, t1 - t0)
        crossed = np.nonzero(_norm2(psi_next) <= r)[0]
        t_cur = np.full(count, t0)
        while crossed.size:
            # jump time of each crossing trajectory by bisection on the norm
            c0 = prop.to_eig(psi[crossed])
            lo = np.zeros(crossed.size)
            hi = t1 - t_cur[crossed]
            while np.max(hi - lo) > JUMP_TIME_TOL:
                mid = 0.5 * (lo + hi)
                above = _norm2(prop.from_eig(c0, mid)) > r[crossed]
                lo = np.where(above, mid, lo)
                hi = np.where(above, hi, mid)
            at_jump = prop.from_eig(c0, hi)
            for j, i in enumerate(crossed):
                phi = at_jump[j]
                outs = [c @ phi for _, c in chans[on]]
                probs = np.array([np.vdot(o, o).real for o in outs])
                total = probs.sum()
                if not total > 0:
                    raise EvolutionError(f"jump at tau={t_cur[i] + hi[j]:.6f} with all channel norms zero")
                ch = int(rngs[i].choice(len(probs), p=probs / total))
                psi[i] = outs[ch] / math.sqrt(probs[ch])
                r[i] = 1.0 - rngs[i].random()
                jumps[i] += 1
                name = chans[on][ch][0]
                by_channel[name] = by_channel.get(name, 0) + 1
            t_cur[crossed] += hi
            moved = prop.from_eig(prop.to_eig(psi[crossed]), t1 - t_cur[crossed])
            psi_next[crossed] = moved
            crossed = crossed[_norm2(moved) <= r[crossed]]
        psi = psi_next
        sample(k + 1, on)
    return {"sums": sums, "moments": moments, "occ": occ, "leak": leaks,
            "jumps": jumps, "by_channel": by_channel}


def _chunk_job(args):
    return _run_chunk(*args)


def _negativity_gradient(q: np.ndarray) -> np.ndarray:
    """Gradient of the tripartite negativity: tr(G d rho) = dE."""
    from .entanglement import _pt_qubit

    grads, values = [], []
    for k in range(3):
        w, u = np.linalg.eigh(_pt_qubit(q, k))
        neg = u[:, w < 0]
        values.append(-2.0 * w[w < 0].sum())
        grads.append(_pt_qubit(-2.0 * neg @ neg.conj().T, k))
    e = np.cbrt(np.prod(np.clip(values, 0, None)))
    if e == 0:
        return np.zeros((8, 8), dtype=complex)
    return e / 3 * sum(g / v for g, v in zip(grads, values))


def _observable_gradients(q: dict[str, np.ndarray], reference: np.ndarray, cutoff: int) -> dict:
    """(group, G) with tr(G d q_group) the first-order change of each qubit-block observable."""
    from .observables import aligned_fidelity, apply_local_phase

    out = {}
    proj = np.outer(reference, reference.conj())
    for g in "ac":
        _, phi = aligned_fidelity(q[g], reference)
        rp = apply_local_phase(reference, phi)
        out[f"fidelity_{g}"] = (g, np.outer(rp, rp.conj()))
        out[f"fidelity_{g}_raw"] = (g, proj)
        if cutoff == 1 or g == "a":
            out[f"purity_{g}"] = (g, 2 * q[g])
    for g in "acf":
        out[f"E_{g}"] = (g, _negativity_gradient(q[g]))
    return out


def _standard_errors(rec: EvolutionRecord, totals: dict, occ: dict, n: int, reference, cutoff: int,
                     dims: dict) -> dict[str, np.ndarray]:
    """Delta-method standard errors from per-trajectory first and second moments."""
    from .observables import qubit_block

    n_nodes = len(rec.times)
    se = {name: np.full(n_nodes, np.nan) for name in SERIES_NAMES}
    if n < 2:
        return se
    for name, g in (("N_f", "f"), ("N_c", "c"), ("p_e", "a")):
        s1, s2 = occ[g][:, 0], occ[g][:, 1]
        se[name] = np.sqrt(np.clip((s2 - s1 ** 2 / n) / (n - 1), 0, None) / n)
    for k in range(n_nodes):
        q = {g: qubit_block(totals["sums"][g][k] / n, dims[g]) for g in GROUP_KINDS}
        for name, (g, grad) in _observable_gradients(q, reference, cutoff).items():
            gv = grad.T.reshape(-1)
            second = float(np.real(gv @ totals["moments"][g][k] @ gv.conj()))
            mean = float(np.real(np.sum(grad * q[g].T)))
            se[name][k] = math.sqrt(max(second - n * mean ** 2, 0.0) / (n - 1) / n)
    return se


def evolve_mcwf(params: ModelParams, psi0: PreparedState | StateVector, grid: TimeGrid,
                options: EvolutionOptions | None = None, reference=None) -> EvolutionRecord:
    """Quantum-jump unravelling with exact no-jump propagation between sampled nodes.

    Trajectory ``i`` draws from ``default_rng([seed, i])`` only, and chunks of
    ``chunk_size`` trajectories are combined in index order, so results do not
    depend on the number of workers.
    """
    options = options or EvolutionOptions(method=Method.MCWF)
    space, weights, vecs = _ensemble(psi0)
    ref = _reference(psi0, reference)
    nodes = grid.sample_times(params.tau_off)
    idx = _dynamical_support(params, space, np.nonzero(np.any(np.abs(vecs) > 0, axis=0))[0])
    n = options.n_trajectories
    bounds = [(s, min(options.chunk_size, n - s)) for s in range(0, n, options.chunk_size)]
    jobs = [(params, space, weights, vecs, nodes, options.seed, s, c, idx) for s, c in bounds]

    totals: dict = {}
    by_channel: dict[str, int] = {}
    per_traj = []

    def absorb(res):
        for key in ("sums", "moments", "occ"):
            acc = totals.setdefault(key, {})
            for g, v in res[key].items():
                acc[g] = acc[g] + v if g in acc else v.copy()
        totals["leak"] = totals.get("leak", 0) + res["leak"]
        for k, v in res["by_channel"].items():
            by_channel[k] = by_channel.get(k, 0) + v
        per_traj.append(res["jumps"])

    if options.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=options.workers) as pool:
            for res in pool.map(_chunk_job, jobs):
                absorb(res)
    else:
        for job in jobs:
            absorb(_chunk_job(job))

    dims = _group_dims(space)
    sampler = _Sampler(space, ref, options.keep_states)
    for k in range(len(nodes)):
        sampler.add({g: totals["sums"][g][k] / n for g in GROUP_KINDS})
    rec = sampler.record(nodes)
    rec.stderr = _standard_errors(rec, totals, totals["occ"], n, ref, params.cutoff, dims)
    rec.jumps = dict(sorted(by_channel.items()))
    per_traj = np.concatenate(per_traj)
    rec.diagnostics.update(method=Method.MCWF.value, n_trajectories=n, seed=options.seed,
                           total_jumps=int(per_traj.sum()), jumps_per_trajectory=per_traj,
                           sector_dim=len(idx))
    _check_leakage(rec, totals["leak"] / n)
    return rec


def evolve(params: ModelParams, initial: Initial, grid: TimeGrid,
           options: EvolutionOptions | None = None, reference=None) -> EvolutionRecord:
    options = options or EvolutionOptions()
    if options.method is Method.SCHRODINGER:
        return evolve_schrodinger(params, initial, grid, reference, options.keep_states)
    if options.method is Method.MASTER:
        return evolve_master(params, initial, grid, reference, options.keep_states)
    return evolve_mcwf(params, initial, grid, options, reference)
