"""Independent reference solutions used by the tests.

For diagonal fiber couplings the network splits into three identical
field-cavity-atom chains.  With at most one excitation per chain each chain
is an 8-dimensional system, and its Liouvillian can be exponentiated directly.
The group states of the full network follow by multilinearity from the chain
transfer maps applied to |x><y| for x, y in {0, 1}.
"""
import itertools
import math

import numpy as np
import scipy.linalg as sl

_a = np.array([[0, 1], [0, 0]], dtype=complex)
_I = np.eye(2)


def _k3(x, y, z):
    return np.kron(np.kron(x, y), z)


F, C, S = _k3(_a, _I, _I), _k3(_I, _a, _I), _k3(_I, _I, _a)


def chain_liouvillian(nu, g, kappa_c, kappa_f, gamma):
    h = g * (C @ S.conj().T + C.conj().T @ S) + nu * (C @ F.conj().T + C.conj().T @ F)
    jumps = [math.sqrt(kappa_c) * C, math.sqrt(kappa_f) * F, math.sqrt(gamma) * S]
    he = h - 0.5j * sum(j.conj().T @ j for j in jumps)
    eye = np.eye(8)
    L = -1j * (np.kron(he, eye) - np.kron(eye, he.conj()))
    for j in jumps:
        L = L + np.kron(j, j.conj())
    return L


def chain_propagator(t, g=1.0, kappa_c=0.0, kappa_f=0.0, gamma=0.0, tau_off=math.pi / math.sqrt(2)):
    on = chain_liouvillian(1.0, g, kappa_c, kappa_f, gamma)
    off = chain_liouvillian(0.0, g, kappa_c, 0.0, gamma)
    if t <= tau_off:
        return sl.expm(on * t)
    return sl.expm(off * (t - tau_off)) @ sl.expm(on * tau_off)


_PARTIAL = {"f": "ijkljk->il", "c": "ijkilk->jl", "a": "ijkijl->kl"}


def chain_maps(t, g=(1.0, 1.0, 1.0), **kw):
    """Per site J: dict (x, y) -> 2x2 reduced matrices of each chain member."""
    out = []
    for gj in g:
        P = chain_propagator(t, g=gj, **kw)
        e = [np.eye(8)[0], np.eye(8)[4]]  # field empty / one field photon
        m = {}
        for x, y in itertools.product((0, 1), repeat=2):
            r = (P @ np.outer(e[x], e[y]).ravel()).reshape((2,) * 6)
            m[x, y] = {grp: np.einsum(p, r) for grp, p in _PARTIAL.items()}
        out.append(m)
    return out


def group_state(rho_field, t, group, **kw):
    """Three-qubit state of ``group`` at time t for an initial field density matrix."""
    maps = chain_maps(t, **kw)
    out = np.zeros((8, 8), dtype=complex)
    for b, bp in zip(*np.nonzero(np.abs(rho_field) > 0)):
        bits = [(b >> (2 - j)) & 1 for j in range(3)]
        bitsp = [(bp >> (2 - j)) & 1 for j in range(3)]
        blk = maps[0][bits[0], bitsp[0]][group]
        for j in (1, 2):
            blk = np.kron(blk, maps[j][bits[j], bitsp[j]][group])
        out += rho_field[b, bp] * blk
    return out


def ghz_rho(c0=1 / math.sqrt(2), c1=1 / math.sqrt(2)):
    v = np.zeros(8, dtype=complex)
    v[0], v[7] = c0, c1
    return np.outer(v, v.conj())


def negativity_bruteforce(rho8, q):
    """Partial transpose via explicit index loops (no reshaping tricks)."""
    out = np.zeros_like(rho8)
    for i in range(8):
        for j in range(8):
            bi = [(i >> (2 - k)) & 1 for k in range(3)]
            bj = [(j >> (2 - k)) & 1 for k in range(3)]
            bi[q], bj[q] = bj[q], bi[q]
            ii = sum(b << (2 - k) for k, b in enumerate(bi))
            jj = sum(b << (2 - k) for k, b in enumerate(bj))
            out[ii, jj] = rho8[i, j]
    ev = np.linalg.eigvalsh(out)
    return float(-2 * ev[ev < 0].sum())
