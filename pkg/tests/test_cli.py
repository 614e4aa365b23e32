import math
import subprocess
import sys

import numpy as np
import pytest

from oracles import ghz_rho
from cqed_transfer.cli import (
    ConfigError,
    build_scenario,
    main,
    parse_config,
    parse_config_text,
    read_series_csv,
    write_series_csv,
    write_table_csv,
)
from cqed_transfer.evolve import EvolutionRecord, TimeGrid, evolve
from cqed_transfer.experiments import prepare
from cqed_transfer.model import ModelParams, Werner
from cqed_transfer.observables import SERIES_NAMES


def test_parse_config_values_and_comments():
    cfg = parse_config_text("# scenario\nkappa_c = 0.1  # loss\nseed=7\ninitial = Werner\nwerner_p = 0.4\n"
                            "p_list = 0, 0.2,0.4\n")
    assert cfg.get("kappa_c") == 0.1
    assert cfg.get("seed") == 7
    assert cfg.get("p_list") == (0.0, 0.2, 0.4)
    sc = build_scenario(cfg)
    assert sc.base.kappa_c == 0.1
    assert sc.initial == Werner(0.4)


@pytest.mark.parametrize("text,needle", [
    ("werner_p = 1.5\n", "line 1"),
    ("kappa_c = 0.1\nbogus = 3\n", "'bogus' (line 2)"),
    ("kappa_c 0.1\n", "line 1"),
    ("dt = fast\n", "'dt'"),
    ("method = RK45\n", "'method'"),
    ("\n\nkappa_f = -1\n", "line 3"),
])
def test_parse_config_errors_name_line_and_key(text, needle):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text, "cfg.txt")
    assert needle in str(exc.value)


def test_parse_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "none.cfg")


def small_record():
    p = ModelParams()
    return evolve(p, prepare(p, Werner(0.0)), TimeGrid(t_end=0.5, dt=1e-2, sample_every=10))


def test_series_csv_roundtrip(tmp_path):
    rec = small_record()
    path = tmp_path / "s.csv"
    write_series_csv(rec, path)
    text = path.read_text()
    assert text.splitlines()[0] == ",".join(("tau",) + SERIES_NAMES)
    assert "\r" not in text
    back = read_series_csv(path)
    for k in SERIES_NAMES:
        assert np.array_equal(back[k], rec.samples[k])  # .17g round-trips doubles exactly


def test_empty_record_writes_nothing(tmp_path):
    empty = EvolutionRecord(np.array([]), {k: np.array([]) for k in SERIES_NAMES})
    with pytest.raises(ValueError):
        write_series_csv(empty, tmp_path / "e.csv")
    assert not (tmp_path / "e.csv").exists()
    with pytest.raises(ValueError):
        write_table_csv([], tmp_path / "t.csv")


def test_classify_werner(tmp_path, capsys):
    rho = 0.1 * ghz_rho() + 0.9 / 8 * np.eye(8)
    path = tmp_path / "rho.csv"
    path.write_text("\n".join(",".join(repr(complex(x)) for x in row) for row in rho) + "\n")
    assert main(["classify", str(path)]) == 0
    out = capsys.readouterr().out
    assert "label = FullySeparable" in out
    assert main(["classify", str(tmp_path / "missing.csv")]) != 0


def test_unknown_subcommand_exits_nonzero(capsys):
    assert main(["frobnicate"]) != 0
    assert "usage" in capsys.readouterr().err


def test_config_error_exit(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("werner_p = 1.5\n")
    assert main(["werner", "--config", str(cfg), "--out", str(tmp_path / "o")]) != 0
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and "werner_p" in err and "line 1" in err


def test_fig1_outputs_deterministic(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("t_end = 9.0\nsample_every = 50\n")
    for d in ("r1", "r2"):
        assert main(["fig1", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    for name in ("fig1_series.csv", "fig1_peaks.csv"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    man = (tmp_path / "r1" / "manifest.txt").read_text()
    assert "status = complete" in man and "seed = 0" in man and "code_version" in man
    assert not list((tmp_path / "r1").glob("*.partial"))


def test_failed_run_leaves_partial(tmp_path, capsys):
    # fibers never switch off inside the horizon, so no cavity mapping peak exists
    cfg = tmp_path / "c.cfg"
    cfg.write_text("t_end = 1.0\nsample_every = 50\n")
    rc = main(["fig1", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert rc != 0
    assert len(capsys.readouterr().err.strip().splitlines()) == 1
    man = (tmp_path / "o" / "manifest.txt").read_text()
    assert "status = failed" in man
    assert not (tmp_path / "o" / "fig1_series.csv").exists()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "cqed_transfer", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "fig1" in r.stdout
