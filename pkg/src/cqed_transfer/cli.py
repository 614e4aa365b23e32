"""Command-line front end.

Config files are flat ``key = value`` text with ``#`` comments.  Every run
writes its CSVs with a ``.partial`` suffix and renames them only once the
whole scenario has succeeded; ``manifest.txt`` is written before the run and
finalised after it.
"""
from __future__ import annotations

import argparse
import cmath
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .entanglement import CUTS, StructureError, bipartite_negativity, classify, tripartite_negativity, witness_values
from .evolve import EvolutionOptions, EvolutionRecord, Method, TimeGrid
from .experiments import (
    ScenarioConfig,
    SwitchOffPolicy,
    atomic_decay_anchor,
    robustness_tau_off,
    run_fig1,
    run_multimode,
    run_werner_plane,
    sweep_cavity_decay,
    sweep_fiber_decay,
)
from .model import TAU_OFF_DEFAULT, GHZ, ModelParams, PureSchmidt, Werner
from .observables import SERIES_NAMES

SUBCOMMANDS = ("fig1", "werner", "sweep-kappa-c", "sweep-kappa-f", "multimode", "robustness", "classify")


class ConfigError(ValueError):
    pass


def _nonneg(x):
    return x >= 0


def _positive(x):
    return x > 0


_FLOAT_KEYS = {
    "g_b": (1.0, _nonneg), "g_c": (1.0, _nonneg), "nu_offdiag": (0.0, _nonneg),
    "kappa_c": (0.0, _nonneg), "kappa_f": (0.0, _nonneg), "gamma_a": (0.0, _nonneg),
    "nbar": (0.0, _nonneg), "tau_off": (TAU_OFF_DEFAULT, _positive), "dt": (1e-3, _positive),
    "t_end": (TAU_OFF_DEFAULT + 3 * math.pi, _positive), "werner_p": (0.0, lambda x: 0 <= x <= 1),
    "schmidt_c0_re": (1 / math.sqrt(2), None), "schmidt_c0_im": (0.0, None),
    "schmidt_c1_re": (1 / math.sqrt(2), None), "schmidt_c1_im": (0.0, None),
}
_INT_KEYS = {
    "cutoff": (1, lambda x: x >= 1), "sample_every": (10, lambda x: x >= 1),
    "trajectories": (5000, lambda x: x >= 1), "seed": (0, lambda x: 0 <= x < 2 ** 64),
    "workers": (1, lambda x: x >= 1),
}
_CHOICE_KEYS = {
    "switch_off_policy": (None, tuple(p.value for p in SwitchOffPolicy)),
    "method": (None, tuple(m.value for m in Method)),
    "initial": ("GHZ", ("GHZ", "Werner", "Schmidt")),
}
_LIST_KEYS = {
    "p_list": ((0.0, 0.2, 0.4, 0.6), lambda x: 0 <= x <= 1),
    "kappa_list": (None, _positive),
    "nu_list": ((0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4), _nonneg),
    "delta_list": ((-0.2, -0.1, 0.0, 0.1, 0.2), lambda x: abs(x) <= 0.2),
}
CONFIG_KEYS = tuple(_FLOAT_KEYS) + tuple(_INT_KEYS) + tuple(_CHOICE_KEYS) + tuple(_LIST_KEYS)

KAPPA_C_DEFAULT = tuple(round(0.05 * k, 10) for k in range(1, 11))
KAPPA_F_DEFAULT = tuple(round(0.1 * k, 10) for k in range(1, 11))


@dataclass
class ParsedConfig:
    values: dict = field(default_factory=dict)
    explicit: set = field(default_factory=set)

    def get(self, key):
        return self.values[key]

    def echo(self) -> list[str]:
        out = []
        for k in CONFIG_KEYS:
            v = self.values[k]
            if isinstance(v, tuple):
                v = ", ".join(_fmt(x) for x in v)
            elif isinstance(v, float):
                v = _fmt(v)
            out.append(f"{k} = {v}")
        return out


def _defaults() -> dict:
    vals = {k: d for k, (d, _) in _FLOAT_KEYS.items()}
    vals.update({k: d for k, (d, _) in _INT_KEYS.items()})
    vals.update({k: d for k, (d, _) in _CHOICE_KEYS.items()})
    vals.update({k: d for k, (d, _) in _LIST_KEYS.items()})
    return vals


def _parse_value(key: str, raw: str, where: str):
    try:
        if key in _FLOAT_KEYS:
            v = float(raw)
            ok = math.isfinite(v) and (_FLOAT_KEYS[key][1] is None or _FLOAT_KEYS[key][1](v))
        elif key in _INT_KEYS:
            v = int(raw)
            ok = _INT_KEYS[key][1](v)
        elif key in _CHOICE_KEYS:
            v = raw
            ok = raw in _CHOICE_KEYS[key][1]
            if not ok:
                raise ConfigError(f"{where}: key '{key}' must be one of {', '.join(_CHOICE_KEYS[key][1])}")
        else:
            v = tuple(float(x) for x in raw.split(",") if x.strip())
            ok = bool(v) and all(math.isfinite(x) and _LIST_KEYS[key][1](x) for x in v)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: key '{key}' has non-numeric value {raw!r}") from None
    if not ok:
        raise ConfigError(f"{where}: key '{key}' value {raw!r} out of range")
    return v


def parse_config_text(text: str, source: str = "<config>") -> ParsedConfig:
    cfg = ParsedConfig(_defaults())
    unknown = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source} line {n}"
        if "=" not in line:
            raise ConfigError(f"{where}: malformed line (expected 'key = value')")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            unknown.append(f"'{key}' (line {n})")
            continue
        cfg.values[key] = _parse_value(key, raw, where)
        cfg.explicit.add(key)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {', '.join(unknown)}")
    return cfg


def parse_config(path: str | os.PathLike) -> ParsedConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return parse_config_text(p.read_text(), str(p))


def _initial(cfg: ParsedConfig):
    kind = cfg.get("initial")
    if kind == "Werner" or ("werner_p" in cfg.explicit and kind == "GHZ" and "initial" not in cfg.explicit):
        return Werner(cfg.get("werner_p"))
    if kind == "Schmidt":
        c0 = complex(cfg.get("schmidt_c0_re"), cfg.get("schmidt_c0_im"))
        c1 = complex(cfg.get("schmidt_c1_re"), cfg.get("schmidt_c1_im"))
        try:
            return PureSchmidt(c0, c1)
        except ValueError as exc:
            raise ConfigError(f"keys 'schmidt_c*': {exc}") from None
    return GHZ


def build_scenario(cfg: ParsedConfig, default_method: Method = Method.SCHRODINGER,
                   policy_default: SwitchOffPolicy = SwitchOffPolicy.FIXED) -> ScenarioConfig:
    """ScenarioConfig from parsed keys (defaults filled per subcommand)."""
    g = (1.0, cfg.get("g_b"), cfg.get("g_c"))
    common = dict(g=g, kappa_c=cfg.get("kappa_c"), kappa_f=cfg.get("kappa_f"), gamma_a=cfg.get("gamma_a"),
                  nbar=cfg.get("nbar"), tau_off=cfg.get("tau_off"), cutoff=cfg.get("cutoff"))
    base = ModelParams.multimode(cfg.get("nu_offdiag"), **common) if cfg.get("nu_offdiag") else ModelParams(**common)
    method = Method(cfg.get("method")) if cfg.get("method") else default_method
    policy = SwitchOffPolicy(cfg.get("switch_off_policy") or policy_default)
    grid = TimeGrid(t_end=cfg.get("t_end"), dt=cfg.get("dt"), sample_every=cfg.get("sample_every"))
    options = EvolutionOptions(method=method, n_trajectories=cfg.get("trajectories"), seed=cfg.get("seed"),
                               workers=cfg.get("workers"))
    return ScenarioConfig(base=base, initial=_initial(cfg), grid=grid, evolution=options,
                          switch_off_policy=policy)


# -- CSV output ----------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def _write_lines(path: Path, lines: list[str]) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_series_csv(record: EvolutionRecord, path: str | os.PathLike) -> None:
    """One row per sampled time: tau followed by every named observable."""
    if record is None or len(record.times) == 0:
        raise ValueError("cannot write an empty record")
    lines = [",".join(("tau",) + SERIES_NAMES)]
    for i, t in enumerate(record.times):
        lines.append(",".join([_fmt(t)] + [_fmt(record.samples[k][i]) for k in SERIES_NAMES]))
    _write_lines(Path(path), lines)


def write_table_csv(rows: Sequence[dict], path: str | os.PathLike) -> None:
    if not rows:
        raise ValueError("cannot write an empty table")
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    lines = [",".join(keys)]
    lines += [",".join(_fmt(r.get(k, "")) for k in keys) for r in rows]
    _write_lines(Path(path), lines)


def read_series_csv(path: str | os.PathLike) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    return {h: data[:, i] for i, h in enumerate(header)}


def read_density_csv(path: str | os.PathLike) -> np.ndarray:
    """8x8 complex matrix, one row per line, entries like ``0.5``, ``0.1+0.2j`` or ``(0.1-0.2j)``."""
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            rows.append([complex(x.strip().replace(" ", "").strip("()").replace("i", "j"))
                         for x in line.split(",")])
        except ValueError:
            raise ValueError(f"{path} line {n}: not a complex number") from None
    m = np.array(rows, dtype=complex)
    if m.shape != (8, 8):
        raise ValueError(f"{path}: expected an 8x8 matrix, got shape {m.shape}")
    return m


# -- run management ----------------------------------------------------------------------

class _Run:
    """Output directory bookkeeping: partial files, manifest before and after."""

    def __init__(self, out: Path, scenario: str, cfg: ParsedConfig, argv: Sequence[str]):
        self.out = out
        self.scenario = scenario
        self.cfg = cfg
        self.argv = list(argv)
        self.files: list[Path] = []
        self.warnings: list[str] = []
        out.mkdir(parents=True, exist_ok=True)
        self.start = time.perf_counter()
        self._manifest("running")

    def _manifest(self, status: str, wall: float | None = None) -> None:
        lines = [f"scenario = {self.scenario}", f"status = {status}", f"code_version = {__version__}",
                 f"seed = {self.cfg.get('seed')}", f"command = {' '.join(self.argv)}"]
        lines += [f"config.{ln}" for ln in self.cfg.echo()]
        if wall is not None:
            lines.append(f"wall_time_s = {wall:.3f}")
        lines += [f"output = {p.name}" for p in self.files]
        lines += [f"warning = {w}" for w in self.warnings] or ["warnings = none"]
        _write_lines(self.out / "manifest.txt", lines)

    def partial(self, name: str) -> Path:
        p = self.out / (name + ".partial")
        self.files.append(self.out / name)
        return p

    def warn(self, msgs) -> None:
        for m in msgs:
            m = str(m).replace("\n", " ")
            if m not in self.warnings:
                self.warnings.append(m)

    def finish(self) -> None:
        for f in self.files:
            os.replace(f.with_name(f.name + ".partial"), f)
        self._manifest("complete", time.perf_counter() - self.start)

    def fail(self, msg: str) -> None:
        self.warn([f"error: {msg}"])
        self._manifest("failed", time.perf_counter() - self.start)


def _cmd_fig1(cfg, run: _Run):
    sc = build_scenario(cfg)
    rec, peaks = run_fig1(sc)
    run.warn(rec.warnings)
    write_series_csv(rec, run.partial("fig1_series.csv"))
    write_table_csv(peaks, run.partial("fig1_peaks.csv"))


def _cmd_werner(cfg, run: _Run):
    sc = build_scenario(cfg)
    out = run_werner_plane(sc, cfg.get("p_list"))
    declined = sum(1 for r in out["werner_map"] for g in "acf" if r[f"label_{g}"] == "Declined")
    if declined:
        run.warn([f"classification declined at {declined} (tau, p, group) points"])
    write_table_csv(out["werner_map"], run.partial("werner_map.csv"))
    write_table_csv(out["werner_sections"], run.partial("werner_sections.csv"))
    events = out["esd_events"] or [{"p": "", "group": "", "kind": "", "tau": ""}]
    write_table_csv(events, run.partial("esd_events.csv"))
    write_table_csv(out["werner_boundaries"], run.partial("werner_boundaries.csv"))


def _cmd_sweep_c(cfg, run: _Run):
    sc = build_scenario(cfg, Method.MCWF)
    rows, fits = sweep_cavity_decay(sc, cfg.get("kappa_list") or KAPPA_C_DEFAULT)
    anchor = atomic_decay_anchor(sc)
    write_table_csv(rows, run.partial("sweep_kappa_c.csv"))
    write_table_csv(fits, run.partial("fits.csv"))
    write_table_csv([anchor], run.partial("atomic_decay.csv"))


def _cmd_sweep_f(cfg, run: _Run):
    sc = build_scenario(cfg, Method.MCWF)
    rows, fits = sweep_fiber_decay(sc, cfg.get("kappa_list") or KAPPA_F_DEFAULT)
    write_table_csv(rows, run.partial("sweep_kappa_f.csv"))
    write_table_csv(fits, run.partial("fits.csv"))


def _cmd_multimode(cfg, run: _Run):
    sc = build_scenario(cfg, policy_default=SwitchOffPolicy.MAX_NC)
    rows, warns = run_multimode(sc, cfg.get("nu_list"))
    run.warn(warns)
    write_table_csv(rows, run.partial("multimode.csv"))


def _cmd_robustness(cfg, run: _Run):
    sc = build_scenario(cfg)
    write_table_csv(robustness_tau_off(sc, cfg.get("delta_list")), run.partial("robustness.csv"))


_COMMANDS = {"fig1": _cmd_fig1, "werner": _cmd_werner, "sweep-kappa-c": _cmd_sweep_c,
             "sweep-kappa-f": _cmd_sweep_f, "multimode": _cmd_multimode, "robustness": _cmd_robustness}


def _classify(path: str) -> int:
    rho = read_density_csv(path)
    label = classify(rho)
    w = witness_values(rho)
    print(f"label = {label.value}")
    for cut in CUTS:
        print(f"negativity[{cut}] = {_fmt(bipartite_negativity(rho, cut))}")
    print(f"tripartite_negativity = {_fmt(tripartite_negativity(rho))}")
    print(f"w_ghz = {_fmt(w.w_ghz)}")
    print(f"w_bisep = {_fmt(w.w_bisep)}")
    print(f"phase = {_fmt(w.phase_used)}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cqed-transfer",
                                 description="Entanglement transfer in a fiber-coupled cavity network.")
    sub = ap.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    for name in SUBCOMMANDS[:-1]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value scenario file")
        p.add_argument("--out", default=f"out-{name}", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--trajectories", type=int)
        p.add_argument("--dt", type=float)
        p.add_argument("--cutoff", type=int)
    p = sub.add_parser("classify", help="classify an 8x8 density matrix given as complex CSV")
    p.add_argument("matrix")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = make_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "classify":
        try:
            return _classify(args.matrix)
        except (OSError, ValueError, StructureError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    try:
        cfg = parse_config(args.config) if args.config else ParsedConfig(_defaults())
        for key, flag in (("seed", args.seed), ("trajectories", args.trajectories),
                          ("dt", args.dt), ("cutoff", args.cutoff)):
            if flag is not None:
                cfg.values[key] = _parse_value(key, str(flag), f"--{key}")
                cfg.explicit.add(key)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    run = None
    try:
        run = _Run(Path(args.out), args.command, cfg, [args.command] + argv[1:])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            _COMMANDS[args.command](cfg, run)
        run.warn(str(w.message) for w in caught)
        run.finish()
    except Exception as exc:  # single-line diagnostic, partial outputs stay
        msg = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        if run is not None:
            run.fail(msg)
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
