"""Tensor-product bookkeeping for the field/cavity/atom network.

Subsystems are ordered fields (A, B, C), cavities (A, B, C), atoms (A, B, C)
and basis indices are row-major over that order.  Operators are kept sparse;
density matrices are dense.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

SITES = ("A", "B", "C")


class Kind(str, enum.Enum):
    FIELD = "f"
    CAVITY = "c"
    ATOM = "a"


@dataclass(frozen=True)
class SubsystemLabel:
    kind: Kind
    site: str

    def __post_init__(self):
        if self.site not in SITES:
            raise ValueError(f"unknown site {self.site!r}")
        object.__setattr__(self, "kind", Kind(self.kind))

    @property
    def bosonic(self) -> bool:
        return self.kind is not Kind.ATOM

    def __str__(self) -> str:
        return f"{self.kind.value}{self.site}"


def label(name: str) -> SubsystemLabel:
    """Parse a short label such as ``"cA"``."""
    return SubsystemLabel(Kind(name[0]), name[1:])


def group_labels(kind: Kind | str) -> tuple[SubsystemLabel, ...]:
    kind = Kind(kind)
    return tuple(SubsystemLabel(kind, s) for s in SITES)


NETWORK_LABELS = tuple(
    SubsystemLabel(k, s) for k in (Kind.FIELD, Kind.CAVITY, Kind.ATOM) for s in SITES
)


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class HilbertSpace:
    labels: tuple[SubsystemLabel, ...]
    dims: tuple[int, ...]

    def __post_init__(self):
        if len(self.labels) != len(self.dims) or not self.labels:
            raise DimensionError("labels and dims must be non-empty and of equal length")
        if len(set(self.labels)) != len(self.labels):
            raise DimensionError("duplicate subsystem labels")
        for lab, d in zip(self.labels, self.dims):
            if lab.kind is Kind.ATOM and d != 2:
                raise DimensionError(f"atom {lab} must have dimension 2, got {d}")
            if d < 2:
                raise DimensionError(f"{lab} has dimension {d} < 2")

    @classmethod
    def network(cls, cutoff: int = 1) -> "HilbertSpace":
        if cutoff < 1:
            raise DimensionError("cutoff must be >= 1")
        dims = tuple(2 if lab.kind is Kind.ATOM else cutoff + 1 for lab in NETWORK_LABELS)
        return cls(NETWORK_LABELS, dims)

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims))

    def axis(self, lab: SubsystemLabel) -> int:
        try:
            return self.labels.index(lab)
        except ValueError:
            raise DimensionError(f"{lab} not in space") from None

    def dim_of(self, lab: SubsystemLabel) -> int:
        return self.dims[self.axis(lab)]

    def index_of(self, occupations: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(occupations), self.dims))

    def occupations(self, index: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(index, self.dims))

    def subspace(self, labels: Iterable[SubsystemLabel]) -> "HilbertSpace":
        """Subspace on ``labels``, kept in this space's declared order."""
        wanted = set(labels)
        missing = wanted.difference(self.labels)
        if missing:
            raise DimensionError(f"labels {sorted(map(str, missing))} not in space")
        keep = [i for i, lab in enumerate(self.labels) if lab in wanted]
        return HilbertSpace(
            tuple(self.labels[i] for i in keep), tuple(self.dims[i] for i in keep)
        )

    def reordered(self, labels: Sequence[SubsystemLabel]) -> "HilbertSpace":
        if sorted(map(str, labels)) != sorted(map(str, self.labels)):
            raise DimensionError("reordering must be a permutation of the labels")
        return HilbertSpace(tuple(labels), tuple(self.dim_of(l) for l in labels))

    def __str__(self) -> str:
        return " x ".join(f"{l}({d})" for l, d in zip(self.labels, self.dims))


@dataclass(frozen=True, eq=False)
class Operator:
    """Sparse operator on a ``HilbertSpace``."""

    space: HilbertSpace
    matrix: sp.csr_matrix

    def __post_init__(self):
        if self.matrix.shape != (self.space.dim, self.space.dim):
            raise DimensionError(
                f"matrix shape {self.matrix.shape} does not match space dimension {self.space.dim}"
            )

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def dag(self) -> "Operator":
        return Operator(self.space, self.matrix.conj().T.tocsr())

    def _wrap(self, m) -> "Operator":
        return Operator(self.space, sp.csr_matrix(m))

    def __add__(self, other: "Operator") -> "Operator":
        return self._wrap(self.matrix + other.matrix)

    def __sub__(self, other: "Operator") -> "Operator":
        return self._wrap(self.matrix - other.matrix)

    def __mul__(self, scalar: complex) -> "Operator":
        return self._wrap(self.matrix * scalar)

    __rmul__ = __mul__

    def __matmul__(self, other):
        if isinstance(other, Operator):
            return self._wrap(self.matrix @ other.matrix)
        return self.matrix @ other

    def is_zero(self) -> bool:
        return self.matrix.count_nonzero() == 0


@dataclass(frozen=True, eq=False)
class StateVector:
    space: HilbertSpace
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.shape != (self.space.dim,):
            raise DimensionError("amplitude length does not match space dimension")
        n2 = float(np.vdot(amps, amps).real)
        if not 0.0 < n2 <= 1.0 + 1e-10:
            raise ValueError(f"squared norm {n2} outside (0, 1]")
        object.__setattr__(self, "amplitudes", amps)

    def norm2(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def projector(self) -> "DensityMatrix":
        v = self.amplitudes / np.sqrt(self.norm2())
        return DensityMatrix(self.space, np.outer(v, v.conj()))


class InvalidStateError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    space: HilbertSpace
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape != (self.space.dim, self.space.dim):
            raise DimensionError("density matrix shape does not match space dimension")
        object.__setattr__(self, "matrix", m)

    def check(self, herm_tol: float = 1e-10, trace_tol: float = 1e-8, eig_tol: float = 1e-8) -> None:
        """Raise ``InvalidStateError`` unless Hermitian, unit-trace and positive."""
        m = self.matrix
        dev = np.max(np.abs(m - m.conj().T))
        if dev > herm_tol:
            raise InvalidStateError(f"not Hermitian (max deviation {dev:.3e})")
        tr = np.trace(m).real
        if abs(tr - 1.0) > trace_tol:
            raise InvalidStateError(f"trace {tr!r} differs from 1")
        lo = np.linalg.eigvalsh(m)[0]
        if lo < -eig_tol:
            raise InvalidStateError(f"negative eigenvalue {lo:.3e}")

    def trace(self) -> float:
        return float(np.trace(self.matrix).real)


def _local_dense(local) -> np.ndarray:
    return local.toarray() if sp.issparse(local) else np.asarray(local, dtype=complex)


def embed_local(space: HilbertSpace, lab: SubsystemLabel, local) -> Operator:
    """Identity on every subsystem except ``lab``, where ``local`` acts."""
    local = _local_dense(local)
    d = space.dim_of(lab)
    if local.shape != (d, d):
        raise DimensionError(f"local operator shape {local.shape} does not match {lab} dimension {d}")
    ax = space.axis(lab)
    left = int(np.prod(space.dims[:ax]))
    right = int(np.prod(space.dims[ax + 1:]))
    m = sp.kron(sp.identity(left, format="csr"), sp.csr_matrix(local), format="csr")
    m = sp.kron(m, sp.identity(right, format="csr"), format="csr")
    return Operator(space, m.astype(complex))


def embed_product(space: HilbertSpace, factors: dict[SubsystemLabel, np.ndarray]) -> Operator:
    """Tensor product of local factors (identity elsewhere)."""
    mats = []
    for lab, d in zip(space.labels, space.dims):
        f = factors.get(lab)
        if f is None:
            mats.append(sp.identity(d, format="csr"))
        else:
            f = _local_dense(f)
            if f.shape != (d, d):
                raise DimensionError(f"factor for {lab} has shape {f.shape}, expected {(d, d)}")
            mats.append(sp.csr_matrix(f))
    m = reduce(lambda x, y: sp.kron(x, y, format="csr"), mats)
    return Operator(space, m.astype(complex))


def _split_axes(space: HilbertSpace, keep: Iterable[SubsystemLabel]) -> tuple[list[int], list[int]]:
    keep = set(keep)
    if not keep:
        raise DimensionError("keep set must be non-empty")
    missing = keep.difference(space.labels)
    if missing:
        raise DimensionError(f"labels {sorted(map(str, missing))} not in space")
    kept = [i for i, l in enumerate(space.labels) if l in keep]
    traced = [i for i, l in enumerate(space.labels) if l not in keep]
    return kept, traced


def partial_trace(rho: DensityMatrix, keep: Iterable[SubsystemLabel]) -> DensityMatrix:
    space = rho.space
    kept, traced = _split_axes(space, keep)
    n = len(space.dims)
    dk = int(np.prod([space.dims[i] for i in kept]))
    dt = int(np.prod([space.dims[i] for i in traced]))
    t = rho.matrix.reshape(space.dims + space.dims)
    t = t.transpose(kept + traced + [n + i for i in kept] + [n + i for i in traced])
    t = t.reshape(dk, dt, dk, dt)
    sub = space.subspace(space.labels[i] for i in kept)
    return DensityMatrix(sub, np.einsum("ajbj->ab", t))


def reduce_vectors(
    space: HilbertSpace,
    vectors: np.ndarray,
    keep: Iterable[SubsystemLabel],
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Weighted sum of reduced density matrices of a stack of state vectors.

    ``vectors`` has shape ``(k, dim)``; with ``weights=None`` every vector
    gets weight one and no normalisation is applied.
    """
    kept, traced = _split_axes(space, keep)
    vectors = np.asarray(vectors)
    k = vectors.shape[0]
    dk = int(np.prod([space.dims[i] for i in kept]))
    t = vectors.reshape((k,) + space.dims)
    t = t.transpose([0] + [1 + i for i in kept] + [1 + i for i in traced]).reshape(k, dk, -1)
    if weights is not None:
        t = t * np.sqrt(np.asarray(weights, dtype=float))[:, None, None]
    m = t.transpose(1, 0, 2).reshape(dk, -1)
    return m @ m.conj().T


def partial_transpose(rho: DensityMatrix, subset: Iterable[SubsystemLabel]) -> np.ndarray:
    space = rho.space
    subset = set(subset)
    if not subset or subset.issuperset(space.labels):
        raise DimensionError("subset must be a proper non-empty subset of the labels")
    if subset.difference(space.labels):
        raise DimensionError("subset labels not in space")
    n = len(space.dims)
    perm = list(range(2 * n))
    for lab in subset:
        i = space.axis(lab)
        perm[i], perm[n + i] = n + i, i
    t = rho.matrix.reshape(space.dims + space.dims).transpose(perm)
    return t.reshape(space.dim, space.dim)


def hermitian_eigenvalues(m: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError("matrix must be square")
    dev = np.max(np.abs(m - m.conj().T)) if m.size else 0.0
    if dev > tol:
        raise ValueError(f"matrix not Hermitian (max deviation {dev:.3e})")
    return np.linalg.eigvalsh(0.5 * (m + m.conj().T))


def apply_on(space: HilbertSpace, labels: Sequence[SubsystemLabel], local: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Apply ``local`` (acting on ``labels`` in the given order) to a batch of states.

    ``states`` has shape ``(n, dim)``.  Costs O(n * dim * d_local) instead of a
    full ``dim x dim`` product.
    """
    axes = [space.axis(l) for l in labels]
    dl = int(np.prod([space.dims[i] for i in axes]))
    if local.shape != (dl, dl):
        raise DimensionError("local operator does not match the labelled subsystems")
    rest = [i for i in range(len(space.dims)) if i not in axes]
    n = states.shape[0]
    t = states.reshape((n,) + space.dims)
    order = [0] + [1 + i for i in axes] + [1 + i for i in rest]
    t = t.transpose(order).reshape(n, dl, -1)
    t = np.matmul(local, t)
    t = t.reshape((n,) + tuple(space.dims[i] for i in axes) + tuple(space.dims[i] for i in rest))
    return t.transpose(np.argsort(order)).reshape(n, space.dim)
