import json
import math
import os

import pytest
import yaml

from cbire import cli
from cbire.config import (ConfigError, certificate_key, config_hash, load_config, parse_text,
                          shipped_names, validate)


def small_config(tmp_path, name="small.yaml", **overrides):
    cfg = load_config("theorem_example")
    cfg["sim"].update(n_paths=300, t_end=1.0, record_times=[0.0, 0.5, 1.0], burn_in=1.0)
    cfg["certify"].update(n_grid=10)
    for section, vals in overrides.items():
        cfg.setdefault(section, {}).update(vals)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def outputs(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_shipped_configs_validate():
    names = shipped_names()
    assert {"theorem_example", "infinite_activity", "catastrophe_heavy", "anti_example"} <= set(names)
    for n in names:
        assert load_config(n)["model"]


def test_yaml_exponent_float():
    assert parse_text("a: 1e-3")["a"] == 1e-3


def test_unknown_key_reports_path():
    with pytest.raises(ConfigError) as info:
        validate({"model": {"alpha": 1.0, "b": 0.0, "alhpa": 2.0}})
    assert info.value.path == "$.model"


def test_wrong_type_reports_path():
    with pytest.raises(ConfigError) as info:
        validate({"model": {"alpha": "one", "b": 0.0}})
    assert info.value.path == "$.model.alpha"


def test_nonfinite_rejected():
    with pytest.raises(ConfigError) as info:
        validate({"model": {"alpha": math.nan, "b": 0.0}})
    assert info.value.path == "$.model.alpha"
    with pytest.raises(ConfigError):
        parse_text('{"model": {"alpha": NaN, "b": 0}}', "json")
    with pytest.raises(ConfigError):
        validate(parse_text("model: {alpha: .inf, b: 0}"))


def test_hash_is_key_order_independent():
    a = {"model": {"alpha": 1.0, "b": 0.0}, "sim": {"seed": 1}}
    b = {"sim": {"seed": 1}, "model": {"b": 0.0, "alpha": 1.0}}
    assert config_hash(a) == config_hash(b)
    c = dict(a, sim={"seed": 2})
    assert config_hash(a) != config_hash(c)
    assert certificate_key(a) == certificate_key(c)


def test_version(capsys):
    assert cli.run(["--version"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert set(info) == {"package", "version", "interface_revision"}


def test_malformed_config_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("model: {alpha: 1.0, b: 0.0, sigma: -1}\n")
    assert cli.run(["simulate", str(p), "-o", str(tmp_path)]) == 2
    assert "$.model.sigma" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path):
    assert cli.run(["simulate", str(tmp_path / "nope.yaml")]) == 2


def test_no_immigration_exit_1(tmp_path, capsys):
    p = small_config(tmp_path, model={"alpha": 0.0})
    assert cli.run(["certify", str(p), "-o", str(tmp_path)]) == 1
    assert "immigration" in capsys.readouterr().err


def test_anti_example_lyapunov_exit_1(tmp_path, capsys):
    assert cli.run(["check-lyapunov", "anti_example", "-o", str(tmp_path)]) == 1
    assert "lyapunov" in capsys.readouterr().err
    assert (tmp_path / "lyapunov.csv").exists()


def test_check_criterion_writes_hash(tmp_path):
    p = small_config(tmp_path)
    assert cli.run(["check-criterion", str(p), "-o", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "criterion.json").read_text())
    assert data["config_hash"] == config_hash(load_config(p))
    first = (tmp_path / "criterion.csv").read_text().splitlines()[0]
    assert first == f"# config_hash={data['config_hash']}"


@pytest.fixture(scope="module")
def certified_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cert")
    p = small_config(d)
    assert cli.run(["certify", str(p), "-o", str(d)]) == 0
    return d, p


def test_certify_outputs(certified_dir):
    d, _ = certified_dir
    cert = json.loads((d / "certificate.json").read_text())
    assert cert["verified"] is True and cert["lam"] > 0
    assert cert["certificate_key"]
    header = (d / "certificate_margin.csv").read_text().splitlines()[1]
    assert header == "x,y,F,LF,margin"


def test_rate_with_certificate(certified_dir, tmp_path):
    d, p = certified_dir
    out = tmp_path / "rate"
    assert cli.run(["rate", str(p), "--certificate", str(d / "certificate.json"),
                    "-o", str(out)]) == 0
    rep = json.loads((out / "rate.json").read_text())
    assert rep["contraction_holds"]


def test_certificate_mismatch_refused(certified_dir, tmp_path, capsys):
    d, _ = certified_dir
    other = small_config(tmp_path, "other.yaml", model={"b": 0.6})
    assert cli.run(["rate", str(other), "--certificate", str(d / "certificate.json"),
                    "-o", str(tmp_path)]) == 2
    assert "hash mismatch" in capsys.readouterr().err


def test_seed_change_keeps_certificate_key(certified_dir, tmp_path):
    d, p = certified_dir
    assert cli.run(["stationary", str(p), "--seed", "99", "--certificate",
                    str(d / "certificate.json"), "-o", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "stationary.json").read_text())["exploratory"] is False


@pytest.mark.parametrize("command", ["simulate", "couple", "stationary"])
def test_reruns_byte_identical(tmp_path, command):
    p = small_config(tmp_path)
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert cli.run([command, str(p), "-o", str(a)]) == 0
    assert cli.run([command, str(p), "-o", str(b)]) == 0
    assert cli.run([command, str(p), "-o", str(c), "--workers", "8"]) == 0
    assert outputs(a) == outputs(b) == outputs(c)


def test_workers_env_precedence(tmp_path, monkeypatch):
    p = small_config(tmp_path)
    monkeypatch.setenv("CBIRE_WORKERS", "zero")
    assert cli.run(["simulate", str(p), "-o", str(tmp_path)]) == 2
    assert cli.run(["simulate", str(p), "-o", str(tmp_path), "--workers", "2"]) == 0


def test_outputs_respect_umask(tmp_path):
    p = small_config(tmp_path)
    old = os.umask(0o022)
    try:
        assert cli.run(["simulate", str(p), "-o", str(tmp_path / "o")]) == 0
    finally:
        os.umask(old)
    mode = (tmp_path / "o" / "simulate.csv").stat().st_mode & 0o777
    assert mode == 0o644
