"""Three-qubit negativities, GHZ/W projector witnesses and class labels.

Classification is only attempted on permutation-symmetric states whose sole
coherence sits between |000> and |111>; for that family PPT under every cut
is equivalent to full separability.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CUTS = ("A|BC", "B|AC", "C|AB")
EPS_W = 1e-9
EPS_E = 1e-9

# basis-index pair carrying the |000><111| coherence after transposing each qubit
_PT_PAIRS = {"A|BC": (3, 4), "B|AC": (2, 5), "C|AB": (1, 6)}


class ClassLabel(str, enum.Enum):
    GHZ = "GHZclass"
    W = "Wclass"
    INS = "INS"
    SEPARABLE = "FullySeparable"


class StructureError(ValueError):
    """State lies outside the symmetric one-coherence family; no label is given."""


@dataclass(frozen=True)
class WitnessReport:
    w_ghz: float
    w_bisep: float
    phase_used: float


@dataclass(frozen=True)
class EsdEvent:
    kind: str  # "Death" or "Birth"
    subsystem: str
    time: float


def _mat(rho8) -> np.ndarray:
    m = np.asarray(getattr(rho8, "matrix", rho8), dtype=complex)
    if m.shape[-2:] != (8, 8):
        raise ValueError("expected an 8x8 three-qubit density matrix")
    return m


def _pt_qubit(m: np.ndarray, q: int) -> np.ndarray:
    """Partial transpose of qubit ``q`` for a (..., 8, 8) stack."""
    lead = m.shape[:-2]
    t = m.reshape(lead + (2,) * 6)
    n = len(lead)
    perm = list(range(n + 6))
    perm[n + q], perm[n + 3 + q] = perm[n + 3 + q], perm[n + q]
    return t.transpose(perm).reshape(lead + (8, 8))


def bipartite_negativity(rho8, cut: str) -> float:
    """||rho^T||_1 - 1 across ``cut`` (1 for GHZ, 0 for PPT states)."""
    if cut not in CUTS:
        raise ValueError(f"cut must be one of {CUTS}")
    ev = np.linalg.eigvalsh(_pt_qubit(_mat(rho8), CUTS.index(cut)))
    return float(-2.0 * ev[ev < 0].sum())


def negativities(rho8) -> np.ndarray:
    """The three bipartite negativities; accepts a stack of shape (..., 8, 8)."""
    m = _mat(rho8)
    out = []
    for q in range(3):
        ev = np.linalg.eigvalsh(_pt_qubit(m, q))
        out.append(-2.0 * np.where(ev < 0, ev, 0.0).sum(axis=-1))
    return np.stack(out, axis=-1)


def tripartite_negativity(rho8) -> float | np.ndarray:
    """Geometric mean of the three bipartite negativities."""
    n = np.clip(negativities(rho8), 0.0, None)
    e = np.cbrt(np.prod(n, axis=-1))
    return float(e) if np.ndim(e) == 0 else e


def xstate_negativity(rho8, cut: str) -> float:
    """Closed form for states whose only coherence is between |000> and |111>."""
    m = _mat(rho8)
    i, j = _PT_PAIRS[cut]
    di, dj = m[i, i].real, m[j, j].real
    c = abs(m[0, 7])
    lam = 0.5 * (di + dj) - math.sqrt(0.25 * (di - dj) ** 2 + c * c)
    return 2.0 * max(0.0, -lam)


def ghz_overlap(rho8) -> tuple[float, float]:
    """max over phi of <GHZ_phi|rho|GHZ_phi>, GHZ_phi = (|000> + e^{i phi}|111>)/sqrt 2."""
    m = _mat(rho8)
    phi = float(np.angle(m[7, 0])) if abs(m[7, 0]) > 0 else 0.0
    return float(0.5 * (m[0, 0].real + m[7, 7].real) + abs(m[7, 0])), phi


def witness_values(rho8) -> WitnessReport:
    overlap, phi = ghz_overlap(rho8)
    return WitnessReport(w_ghz=0.75 - overlap, w_bisep=0.5 - overlap, phase_used=phi)


def check_structure(rho8, tol: float = 1e-8) -> None:
    """Raise ``StructureError`` unless rho8 is symmetric with a single coherence pair."""
    m = _mat(rho8)
    off = m.copy()
    np.fill_diagonal(off, 0)
    off[0, 7] = off[7, 0] = 0
    worst = np.max(np.abs(off))
    if worst > tol:
        raise StructureError(f"extra coherence of magnitude {worst:.2e}")
    d = m.diagonal().real
    for w in (1, 2):
        block = d[[i for i in range(8) if bin(i).count("1") == w]]
        if np.ptp(block) > tol:
            raise StructureError(f"populations of weight-{w} states differ by {np.ptp(block):.2e}")


def full_separability_test(rho8, tol: float = 1e-8) -> bool:
    """True iff PPT under all three cuts (equivalent to full separability on this family)."""
    check_structure(rho8, tol)
    return bool(np.all(negativities(rho8) <= EPS_E))


def classify(rho8, eps_w: float = EPS_W, eps_e: float = EPS_E, tol: float = 1e-8) -> ClassLabel:
    check_structure(rho8, tol)
    w = witness_values(rho8)
    if w.w_ghz < -eps_w:
        return ClassLabel.GHZ
    if w.w_bisep < -eps_w:
        return ClassLabel.W
    if tripartite_negativity(rho8) > eps_e:
        return ClassLabel.INS
    return ClassLabel.SEPARABLE


def try_classify(rho8, **kw) -> ClassLabel | None:
    """``classify`` that returns None (and logs) when the structure check fails."""
    try:
        return classify(rho8, **kw)
    except StructureError as exc:
        logger.debug("classification declined: %s", exc)
        return None


def detect_esd_esb(times: Sequence[float], values: Iterable[float], threshold: float = EPS_E,
                   subsystem: str = "") -> list[EsdEvent]:
    """Deaths (E drops to <= threshold) and births (E rises above it), in time order."""
    t = np.asarray(times, dtype=float)
    e = np.asarray(list(values), dtype=float)
    alive = e > threshold
    events = []
    for k in np.nonzero(alive[1:] != alive[:-1])[0]:
        e0, e1 = e[k] - threshold, e[k + 1] - threshold
        frac = e0 / (e0 - e1) if e0 != e1 else 0.0
        tc = t[k] + frac * (t[k + 1] - t[k])
        events.append(EsdEvent("Death" if alive[k] else "Birth", subsystem, float(tc)))
    return events
