import json
import os

import numpy as np
import pytest

from dyadlab.cli import main as cli_main
from dyadlab.harness import (ALL_SUITES, COVERAGE_ANCHORS, ExperimentConfig,
                             emit_report, run_suite)


FAST = ("identities", "layers")


def fast_config(**kw):
    base = dict(atom_count=16, suites=FAST, mc_trials=20_000, seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_validates_shift_geometry():
    with pytest.raises(ValueError):
        ExperimentConfig(gamma=0.49, growth_exponent=1.0)
    with pytest.raises(ValueError):
        ExperimentConfig(p=1.0)
    with pytest.raises(ValueError):
        ExperimentConfig(suites=("bogus",))


def test_config_roundtrip_and_hash():
    cfg = fast_config()
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()
    assert cfg.q == pytest.approx(2.0)
    assert cfg.t_aux == pytest.approx(2.0 * max(2.0, cfg.p, cfg.q))


def test_run_deterministic_bytes():
    a = run_suite(fast_config())
    b = run_suite(fast_config())
    assert a.canonical_json() == b.canonical_json()
    assert a.passed


def test_emit_idempotent(tmp_path):
    report = run_suite(fast_config())
    emit_report(report, tmp_path)
    first = (tmp_path / "report.json").read_bytes()
    emit_report(report, tmp_path)
    assert (tmp_path / "report.json").read_bytes() == first
    rows = (tmp_path / "checks.csv").read_text().strip().splitlines()
    assert len(rows) == len(report.checks) + 1


def test_report_carries_anchors():
    report = run_suite(fast_config())
    data = json.loads(report.canonical_json())
    anchors = {c["anchor"] for c in data["checks"]}
    assert all(a for a in anchors)
    assert "reconstruction.telescoping" in anchors
    assert anchors <= COVERAGE_ANCHORS


def test_full_run_matches_coverage_table():
    report = run_suite(ExperimentConfig(atom_count=16, mc_trials=20_000,
                                        sampler_trials=512, seed=5))
    anchors = {c.anchor for c in report.checks}
    assert anchors == COVERAGE_ANCHORS
    assert report.passed


def test_trials_env_override(monkeypatch):
    cfg = fast_config()
    monkeypatch.setenv("DYADLAB_TRIALS", "12000")
    assert cfg.effective_trials() == 12_000
    monkeypatch.delenv("DYADLAB_TRIALS")
    assert cfg.effective_trials() == 20_000


def test_cli_run_exit_codes(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(fast_config().to_json())
    code = cli_main(["run", "--config", str(cfg_path), "--suite", "identities",
                     "--out", str(tmp_path / "out")])
    assert code == 0
    assert (tmp_path / "out" / "report.json").exists()
    code = cli_main(["report", "--out", str(tmp_path / "out")])
    assert code == 0


def test_cli_config_error_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"p\": 0.5}")
    assert cli_main(["run", "--config", str(bad)]) == 2
    assert cli_main(["report", "--out", str(tmp_path / "missing")]) == 2


def test_cli_gen_fixture_files(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(fast_config().to_json())
    assert cli_main(["gen", "--config", str(cfg_path),
                     "--out", str(tmp_path / "fx")]) == 0
    for name in ("measure.json", "system_f.json", "system_g.json",
                 "accretive_f.json", "accretive_g.json", "config.json"):
        assert (tmp_path / "fx" / name).exists()


def test_unknown_suite_is_config_error(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(fast_config().to_json())
    assert cli_main(["run", "--config", str(cfg_path), "--suite", "nope"]) == 2
