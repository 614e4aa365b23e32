"""Scenario drivers: mapping dynamics, Werner-noise plane, dissipation sweeps,
multimode coupling, switch-off robustness, plus peak finding and rate fits.

Tables are lists of flat dicts (one per row) with a fixed key order, ready
for CSV output.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .entanglement import ClassLabel, detect_esd_esb, tripartite_negativity, try_classify
from .evolve import (
    EvolutionOptions,
    EvolutionRecord,
    Method,
    TimeGrid,
    evolve,
    evolve_master,
    evolve_schrodinger,
)
from .model import (
    GHZ,
    InitialStateSpec,
    ModelParams,
    PreparedState,
    Werner,
    build_space,
    embed_field_vector,
    initial_state,
    reference_ket,
)
from .observables import apply_local_phase, fidelity_to, mapping_phase, qubit_block

logger = logging.getLogger(__name__)

SWEEP_PARAMETERS = ("kappa_c", "kappa_f", "gamma_a", "nu_offdiag", "p")
Table = list[dict]


class SwitchOffPolicy(str, enum.Enum):
    FIXED = "FixedTime"
    MAX_PE = "MaxPe"
    MIN_NF = "MinNf"
    MAX_NC = "MaxNc"


@dataclass(frozen=True)
class ScenarioConfig:
    base: ModelParams = field(default_factory=ModelParams)
    initial: InitialStateSpec = GHZ
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(t_end=math.pi / math.sqrt(2) + 3 * math.pi))
    evolution: EvolutionOptions = field(default_factory=EvolutionOptions)
    sweep: tuple[str, tuple[float, ...]] | None = None
    switch_off_policy: SwitchOffPolicy = SwitchOffPolicy.FIXED

    def __post_init__(self):
        object.__setattr__(self, "switch_off_policy", SwitchOffPolicy(self.switch_off_policy))
        if self.sweep is not None:
            name, values = self.sweep
            if name not in SWEEP_PARAMETERS:
                raise ValueError(f"sweep parameter {name!r} not in {SWEEP_PARAMETERS}")
            object.__setattr__(self, "sweep", (name, tuple(float(v) for v in values)))

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def grid_until(self, t_end: float, extra: Sequence[float] = (), sample_every: int | None = None) -> TimeGrid:
        return TimeGrid(t_end=t_end, dt=self.grid.dt,
                        sample_every=sample_every or self.grid.sample_every,
                        extra_times=tuple(t for t in extra if 0 < t < t_end))


@dataclass(frozen=True)
class Extremum:
    tau: float
    value: float
    boundary: bool = False


@dataclass(frozen=True)
class FitResult:
    amplitude: float
    rate: float
    residual: float


# -- numerics helpers ----------------------------------------------------------

def find_extremum(times, values, kind: str = "Max", window: tuple[float, float] | None = None) -> Extremum:
    """Discrete extremum in ``window`` refined by a parabola through three points."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if kind not in ("Max", "Min"):
        raise ValueError("kind must be 'Max' or 'Min'")
    lo, hi = window if window is not None else (t[0], t[-1])
    sel = np.nonzero((t >= lo - 1e-12) & (t <= hi + 1e-12))[0]
    if len(sel) < 3:
        raise ValueError("need at least 3 points in the window")
    ys = y[sel] if kind == "Max" else -y[sel]
    k = int(np.argmax(ys))
    if k == 0 or k == len(sel) - 1:
        return Extremum(float(t[sel[k]]), float(y[sel[k]]), boundary=True)
    i = sel[k]
    x0, x1, x2 = t[i - 1], t[i], t[i + 1]
    y0, y1, y2 = y[i - 1], y[i], y[i + 1]
    denom = (x0 - x1) * (x0 - x2) * (x1 - x2)
    a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom
    b = (x2 ** 2 * (y0 - y1) + x1 ** 2 * (y2 - y0) + x0 ** 2 * (y1 - y2)) / denom
    if a == 0:
        return Extremum(float(x1), float(y1))
    xs = -b / (2 * a)
    if not x0 <= xs <= x2:
        return Extremum(float(x1), float(y1))
    c = y1 - a * x1 ** 2 - b * x1
    return Extremum(float(xs), float(a * xs ** 2 + b * xs + c))


def first_local_extremum(times, values, kind: str = "Max", after: float = 0.0) -> Extremum:
    """First interior local extremum after ``after`` (refined)."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    s = y if kind == "Max" else -y
    for i in range(1, len(t) - 1):
        if t[i] > after and s[i] >= s[i - 1] and s[i] > s[i + 1]:
            return find_extremum(t, y, kind, (t[i - 1], t[i + 1]))
    return find_extremum(t, y, kind, (max(after, t[0]), t[-1]))


def fit_exponential(xs, ys) -> FitResult:
    """Least squares of ln y against x; returns (e^intercept, -slope, rms log-residual)."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if len(x) != len(y) or len(x) < 3:
        raise ValueError("need at least 3 (x, y) pairs")
    if np.any(~(y > 0)):
        raise ValueError("all ys must be positive")
    slope, intercept = np.polyfit(x, np.log(y), 1)
    res = np.log(y) - (intercept + slope * x)
    return FitResult(float(np.exp(intercept)), float(-slope), float(np.sqrt(np.mean(res ** 2))))


# -- evolution plumbing ----------------------------------------------------------

def prepare(params: ModelParams, spec: InitialStateSpec) -> PreparedState:
    return initial_state(spec, build_space(params))


def _run(params: ModelParams, spec: InitialStateSpec, grid: TimeGrid, options: EvolutionOptions,
         keep_states: bool = True) -> EvolutionRecord:
    """Evolve with ``options.method``, falling back to Schrodinger for zero rates."""
    state = prepare(params, spec)
    if options.method is Method.SCHRODINGER or not params.dissipative:
        return evolve_schrodinger(params, state, grid, keep_states=keep_states)
    if options.method is Method.MASTER:
        return evolve_master(params, state, grid, keep_states=keep_states)
    return evolve(params, state, grid, dataclasses.replace(options, keep_states=keep_states))


def preliminary_run(params: ModelParams, spec: InitialStateSpec, t_end: float, dt: float = 1e-3) -> EvolutionRecord:
    """Fibers never switched off; deterministic (master equation if dissipative)."""
    p = params.replace(tau_off=t_end + 1.0)
    if p.dissipative:
        # exact generator, coarser RK4 step: global error ~1e-9 at dt = 0.01
        grid = TimeGrid(t_end=t_end, dt=max(dt, 0.01), sample_every=1)
        return evolve_master(p, prepare(p, spec), grid, keep_states=False)
    return evolve_schrodinger(p, prepare(p, spec), TimeGrid(t_end=t_end, dt=dt, sample_every=1),
                              keep_states=False)


def choose_tau_off(params: ModelParams, spec: InitialStateSpec, policy: SwitchOffPolicy,
                   dt: float = 1e-3, horizon: float | None = None) -> tuple[float, EvolutionRecord | None]:
    """Switch-off time chosen from the first transient extremum of a no-switch-off run."""
    policy = SwitchOffPolicy(policy)
    if policy is SwitchOffPolicy.FIXED:
        return params.tau_off, None
    rec = preliminary_run(params, spec, horizon or 2 * math.pi / math.sqrt(2) + 0.5, dt)
    name, kind = {SwitchOffPolicy.MAX_PE: ("p_e", "Max"), SwitchOffPolicy.MIN_NF: ("N_f", "Min"),
                  SwitchOffPolicy.MAX_NC: ("N_c", "Max")}[policy]
    ext = first_local_extremum(rec.times, rec.samples[name], kind)
    return ext.tau, rec


# -- Hamiltonian mapping dynamics -----------------------------------------------------

def mapping_times(tau_off: float, count: int = 3) -> tuple[list[float], list[float]]:
    atoms = [tau_off + m * math.pi for m in range(count)]
    cavities = [tau_off + (n + 0.5) * math.pi for n in range(count)]
    return atoms, cavities


def phase_fidelity(rho8: np.ndarray, reference: np.ndarray, group: str, index: int) -> float:
    """Fidelity to the locally phase-rotated input expected at a mapping time."""
    return fidelity_to(rho8, apply_local_phase(reference, mapping_phase(group, index)))


def run_fig1(config: ScenarioConfig) -> tuple[EvolutionRecord, Table]:
    """Hamiltonian dynamics for a GHZ-type input; returns the record and the peak table."""
    params = config.base
    if params.dissipative:
        raise ValueError("run_fig1 expects zero dissipation rates")
    tau_off, _ = choose_tau_off(params, config.initial, config.switch_off_policy, config.grid.dt)
    params = params.replace(tau_off=tau_off)
    if config.grid.t_end < tau_off + 2 * math.pi:
        raise ValueError("horizon must reach at least tau_off + 2 pi")
    atoms, cavities = mapping_times(tau_off)
    grid = config.grid_until(config.grid.t_end, [tau_off / 2] + atoms + cavities)
    rec = evolve_schrodinger(params, prepare(params, config.initial), grid)
    rec.diagnostics["tau_off"] = tau_off
    ref = reference_ket(config.initial)
    dims = {"a": (2, 2, 2), "c": (params.cutoff + 1,) * 3}
    rows = []
    for group, times, name in (("a", atoms, "fidelity_a"), ("c", cavities, "fidelity_c")):
        for m, tau_m in enumerate(times):
            if tau_m > rec.times[-1] + 1e-12:
                continue  # mapping time beyond the horizon
            win = (tau_m - math.pi / 4, min(tau_m + math.pi / 4, rec.times[-1]))
            ext = find_extremum(rec.times, rec.samples[name], "Max", win)
            i = rec.index(tau_m)
            rho = qubit_block(rec.reduced_states[group][i], dims[group])
            rows.append({
                "group": group, "index": m, "tau_analytic": tau_m, "tau_peak": ext.tau,
                "fidelity_peak": ext.value, "boundary": ext.boundary, "fidelity": rec.samples[name][i],
                "phase": mapping_phase(group, m),
                "phase_fidelity": phase_fidelity(rho, ref, group, m),
                "E": rec.samples[f"E_{group}"][i], "p_e": rec.samples["p_e"][i],
                "N_c": rec.samples["N_c"][i], "purity": rec.samples[f"purity_{group}"][i],
            })
    return rec, rows


def robustness_tau_off(config: ScenarioConfig, deltas: Sequence[float]) -> Table:
    """Atomic fidelity at the first atomic peak after a relative shift of tau_off."""
    base = config.base
    rows = []
    for d in deltas:
        if abs(d) > 0.2 + 1e-12:
            raise ValueError("relative shifts are limited to |delta| <= 0.2")
        tau = base.tau_off * (1 + d)
        p = base.replace(tau_off=tau)
        grid = config.grid_until(tau + math.pi + 0.05, [tau, tau + math.pi])
        rec = _run(p, config.initial, grid, config.evolution, keep_states=False)
        ext = find_extremum(rec.times, rec.samples["fidelity_a"], "Max", (tau, tau + math.pi))
        rows.append({"delta": float(d), "tau_off": tau, "tau_peak": ext.tau, "fidelity_a": ext.value,
                     "fidelity_a_at_tau_off": rec.value("fidelity_a", tau), "boundary": int(ext.boundary)})
    return rows


# -- Werner plane -----------------------------------------------------------------------

@dataclass
class WernerPlane:
    times: np.ndarray
    ghz: dict[str, np.ndarray]    # group -> (n_t, 8, 8) from the GHZ component
    noise: dict[str, np.ndarray]  # group -> (n_t, 8, 8) from the white-noise component
    tau_off: float

    def states(self, p: float, group: str) -> np.ndarray:
        return (1 - p) * self.ghz[group] + p * self.noise[group]

    def negativity(self, p: float, group: str) -> np.ndarray:
        return tripartite_negativity(self.states(p, group))


def werner_plane(config: ScenarioConfig, t_end: float | None = None) -> WernerPlane:
    """Evolve the GHZ projector and the white-noise part once; every p is a linear mix."""
    params = config.base
    if params.dissipative:
        raise ValueError("the Werner plane is computed in the Hamiltonian regime")
    t_end = t_end or config.grid.t_end
    atoms, cavities = mapping_times(params.tau_off)
    grid = config.grid_until(t_end, [params.tau_off / 2] + atoms + cavities)
    space = build_space(params)
    ghz = evolve_schrodinger(params, initial_state(GHZ, space), grid)
    basis = np.array([embed_field_vector(space, np.eye(8)[b]) for b in range(8)])
    noise_state = PreparedState(space, np.full(8, 1 / 8), basis, Werner(1.0))
    noise = evolve_schrodinger(params, noise_state, grid)
    dims = {"a": (2, 2, 2), "c": (params.cutoff + 1,) * 3, "f": (params.cutoff + 1,) * 3}
    blk = lambda rec, g: np.array([qubit_block(r, dims[g]) for r in rec.reduced_states[g]])
    return WernerPlane(ghz.times, {g: blk(ghz, g) for g in "acf"}, {g: blk(noise, g) for g in "acf"},
                       params.tau_off)


def _label(rho8) -> str:
    lab = try_classify(rho8)
    return lab.value if lab is not None else "Declined"


def werner_class_at(plane: WernerPlane, tau: float, p: float, group: str = "a") -> ClassLabel | None:
    i = int(np.argmin(np.abs(plane.times - tau)))
    return try_classify(plane.states(p, group)[i])


def werner_boundaries(plane: WernerPlane, tau: float | None = None, group: str = "a",
                      n_scan: int = 201, tol: float = 1e-7) -> list[dict]:
    """Class transitions along p at fixed tau, located by bisection."""
    tau = plane.tau_off if tau is None else tau
    i = int(np.argmin(np.abs(plane.times - tau)))
    g, nz = plane.ghz[group][i], plane.noise[group][i]
    cls = lambda p: _label((1 - p) * g + p * nz)
    ps = np.linspace(0, 1, n_scan)
    labels = [cls(p) for p in ps]
    out = []
    for k in range(n_scan - 1):
        if labels[k] != labels[k + 1]:
            lo, hi = ps[k], ps[k + 1]
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                if cls(mid) == labels[k]:
                    lo = mid
                else:
                    hi = mid
            out.append({"tau": float(plane.times[i]), "group": group, "from": labels[k],
                        "to": labels[k + 1], "p": 0.5 * (lo + hi)})
    return out


def run_werner_plane(config: ScenarioConfig, p_grid: Sequence[float], tau_stride: int = 1,
                     section_ps: Sequence[float] | None = None) -> dict[str, Table]:
    """Class map over (tau, p), E sections and ESD/ESB events for the Werner input."""
    for p in p_grid:
        if not 0 <= p <= 1:
            raise ValueError(f"p={p} outside [0, 1]")
    plane = werner_plane(config)
    section_ps = tuple(p_grid) if section_ps is None else tuple(section_ps)
    idx = np.arange(0, len(plane.times), max(1, tau_stride))
    class_map, sections, events = [], [], []
    for p in sorted(set(p_grid) | set(section_ps)):
        states = {g: plane.states(p, g) for g in "acf"}
        e = {g: tripartite_negativity(states[g]) for g in "acf"}
        if p in p_grid:
            for i in idx:
                row = {"tau": plane.times[i], "p": p}
                for g in "acf":
                    row[f"label_{g}"] = _label(states[g][i])
                    row[f"E_{g}"] = float(e[g][i])
                class_map.append(row)
        if p in section_ps:
            for i in range(len(plane.times)):
                sections.append({"p": p, "tau": plane.times[i], "E_a": float(e["a"][i]),
                                 "E_c": float(e["c"][i]), "E_f": float(e["f"][i])})
            for g in "fca":
                for ev in detect_esd_esb(plane.times, e[g], subsystem=g):
                    events.append({"p": p, "group": g, "kind": ev.kind, "tau": ev.time})
    boundaries = werner_boundaries(plane)
    return {"werner_map": class_map, "werner_sections": sections, "esd_events": events,
            "werner_boundaries": boundaries, "plane": plane}


# -- dissipation sweeps -------------------------------------------------------------

def _sweep_grid(config: ScenarioConfig, t_end: float, marks: Sequence[float]) -> TimeGrid:
    # exact no-jump propagation between nodes: sparse nodes lose nothing
    every = config.grid.sample_every
    if config.evolution.method is Method.MCWF:
        every = max(every, int(round(0.1 / config.grid.dt)))
    return config.grid_until(t_end, marks, sample_every=every)


def _point(params: ModelParams, config: ScenarioConfig, marks: dict[str, float],
           quantities: dict[str, tuple[str, str]], method: Method | None = None) -> dict:
    t_end = max(marks.values()) + 0.02
    options = config.evolution if method is None else dataclasses.replace(config.evolution, method=method)
    rec = _run(params, config.initial, _sweep_grid(config, t_end, list(marks.values())), options,
               keep_states=False)
    row = {}
    for key, (series, mark) in quantities.items():
        i = rec.index(marks[mark])
        row[key] = float(rec.samples[series][i])
        if rec.stderr is not None:
            row[key + "_se"] = float(rec.stderr[series][i])
    row["jumps"] = int(rec.diagnostics.get("total_jumps", 0))
    return row


def _fits(table: Table, xkey: str, keys: Sequence[str], label: str) -> Table:
    out = []
    if len(table) < 3:
        return out
    for k in keys:
        fit = fit_exponential([r[xkey] for r in table], [r[k] for r in table])
        out.append({"sweep": label, "quantity": k, "amplitude": fit.amplitude, "rate": fit.rate,
                    "residual": fit.residual})
    return out


CAVITY_QUANTITIES = {
    "fidelity_a": ("fidelity_a", "tau0"),
    "E_a": ("E_a", "tau0"),
    "fidelity_c": ("fidelity_c", "tau0c"),
    "E_c": ("E_c", "tau0c"),
}

FIBER_QUANTITIES = {
    "p_e": ("p_e", "tau_off"),
    "N_c": ("N_c", "half"),
    "E_a": ("E_a", "tau0"),
    "fidelity_a": ("fidelity_a", "tau0"),
}


def _marks(tau_off: float) -> dict[str, float]:
    return {"half": tau_off / 2, "tau_off": tau_off, "tau0": tau_off, "tau0c": tau_off + math.pi / 2}


def _sweep(config: ScenarioConfig, name: str, values: Sequence[float], quantities: dict,
           make: Callable[[float], ModelParams], anchors: Sequence[float]) -> tuple[Table, Table]:
    rows = []
    for v in values:
        params = make(v)
        tau_off, _ = choose_tau_off(params, config.initial, config.switch_off_policy, config.grid.dt)
        params = params.replace(tau_off=tau_off)
        marks = _marks(tau_off)
        row = {name: float(v), "tau_off": tau_off}
        row.update(_point(params, config, marks, quantities))
        if any(abs(v - a) < 1e-12 for a in anchors) and config.evolution.method is not Method.MASTER:
            me = _point(params, config, marks, quantities, Method.MASTER)
            row.update({f"{k}_me": me[k] for k in quantities})
        rows.append(row)
    return rows, _fits(rows, name, list(quantities), name)


def sweep_cavity_decay(config: ScenarioConfig, kappa_list: Sequence[float],
                       anchors: Sequence[float] = (0.1, 0.5)) -> tuple[Table, Table]:
    """First-peak fidelities and negativities versus cavity loss, with exponential fits."""
    for k in kappa_list:
        if not 0 < k <= 0.5:
            raise ValueError(f"kappa_c={k} outside (0, 0.5]")
    return _sweep(config, "kappa_c", kappa_list, CAVITY_QUANTITIES,
                  lambda k: config.base.replace(kappa_c=k), anchors)


def sweep_fiber_decay(config: ScenarioConfig, kappa_f_list: Sequence[float],
                      anchors: Sequence[float] = (0.1, 1.0)) -> tuple[Table, Table]:
    """Transfer quality versus fiber loss (active only before switch-off), with fits."""
    for k in kappa_f_list:
        if not 0 < k <= 1:
            raise ValueError(f"kappa_f={k} outside (0, 1]")
    base = config.base.replace(kappa_c=0.0, gamma_a=0.0)
    return _sweep(config, "kappa_f", kappa_f_list, FIBER_QUANTITIES,
                  lambda k: base.replace(kappa_f=k), anchors)


def atomic_decay_anchor(config: ScenarioConfig, kappa_c: float = 0.1, gamma_a: float = 0.03,
                        method: Method = Method.MASTER) -> dict:
    """Relative fidelity loss (percent) caused by adding atomic decay at fixed cavity loss."""
    base = config.base.replace(kappa_c=kappa_c, gamma_a=0.0)
    marks = _marks(base.tau_off)
    q = {"fidelity_a": CAVITY_QUANTITIES["fidelity_a"], "fidelity_c": CAVITY_QUANTITIES["fidelity_c"]}
    without = _point(base, config, marks, q, method)
    with_decay = _point(base.replace(gamma_a=gamma_a), config, marks, q, method)
    out = {"kappa_c": kappa_c, "gamma_a": gamma_a}
    for k in q:
        out[k] = without[k]
        out[k + "_with_decay"] = with_decay[k]
        out[k + "_drop_percent"] = 100 * (without[k] - with_decay[k]) / without[k]
    return out


# -- multimode coupling ------------------------------------------------------------------

def transient_summary(params: ModelParams, spec: InitialStateSpec, dt: float = 1e-3,
                      horizon: float = 2 * math.pi / math.sqrt(2) + 0.5) -> dict:
    """Extrema of the no-switch-off transient and its energy-exchange period.

    The period is twice the time of the first p_e maximum (a half exchange
    cycle moves the excitation from the fields into the atoms).
    """
    rec = preliminary_run(params, spec, horizon, dt)
    pe = first_local_extremum(rec.times, rec.samples["p_e"], "Max")
    nc = first_local_extremum(rec.times, rec.samples["N_c"], "Max")
    nf = first_local_extremum(rec.times, rec.samples["N_f"], "Min")
    return {"period": 2 * pe.tau, "p_e_max": pe.value, "tau_p_e_max": pe.tau,
            "N_c_max": nc.value, "tau_N_c_max": nc.tau, "N_f_min": nf.value, "tau_N_f_min": nf.tau,
            "warnings": rec.warnings}


def run_multimode(config: ScenarioConfig, nu_list: Sequence[float],
                  policy: SwitchOffPolicy | str | None = None) -> tuple[Table, list[str]]:
    """Per off-diagonal coupling: transient extrema, policy switch-off and post-transient peaks."""
    policy = SwitchOffPolicy(policy or config.switch_off_policy)
    if policy is SwitchOffPolicy.FIXED:
        raise ValueError("multimode runs choose tau_off by MaxPe, MinNf or MaxNc")
    rows, warns = [], []
    for nu in nu_list:
        if not 0 <= nu <= 1.4 + 1e-12:
            raise ValueError(f"nu_offdiag={nu} outside [0, 1.4]")
        kw = {f.name: getattr(config.base, f.name) for f in dataclasses.fields(ModelParams)
              if f.name not in ("nu", "g")}
        params = ModelParams.multimode(nu, g=config.base.g, **kw)
        summary = transient_summary(params, config.initial, config.grid.dt)
        tau_off, _ = choose_tau_off(params, config.initial, policy, config.grid.dt)
        p = params.replace(tau_off=tau_off)
        grid = config.grid_until(tau_off + math.pi + 0.05, [tau_off, tau_off + math.pi / 2, tau_off + math.pi])
        rec = _run(p, config.initial, grid, config.evolution, keep_states=False)
        row = {"nu_offdiag": float(nu), "policy": policy.value, "tau_off": tau_off}
        row.update({k: v for k, v in summary.items() if k != "warnings"})
        window = (tau_off, tau_off + math.pi)
        for name in ("E_a", "E_c", "fidelity_a", "fidelity_c"):
            ext = find_extremum(rec.times, rec.samples[name], "Max", window)
            row[f"{name}_peak"] = ext.value
            row[f"tau_{name}_peak"] = ext.tau
        rows.append(row)
        for w in summary["warnings"] + rec.warnings:
            msg = f"nu_offdiag={nu}: {w}"
            if msg not in warns:
                warns.append(msg)
    return rows, warns
