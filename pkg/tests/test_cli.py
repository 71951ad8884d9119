import json
import subprocess
import sys

import pytest

from branchcrt.cli import EXIT_CAP, EXIT_CONFIG, EXIT_FAIL, EXIT_OK, EXPERIMENTS, build_parser, main
from branchcrt.config import ConfigError, build_config, load_config, reference_config
from branchcrt.io import read_csv
from branchcrt.spectral import model_constants


def write_config(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


SMALL = """
[run]
particle_cap = 100000
[experiments.simulate]
horizon = 2.0
replicas = 3
[experiments.survival]
times = [1.0, 2.0]
replicas = 300
[experiments.phase]
ratios = [0.8, 1.0, 1.2]
times = [1.0, 2.0]
replicas = 200
[experiments.martingale]
times = [0.5]
replicas = 300
"""


def run(tmp_path, *argv, config=SMALL, out="out"):
    cfg = write_config(tmp_path, config)
    return main([*argv, "--config", str(cfg), "--out", str(tmp_path / out)])


def report(tmp_path, name, out="out"):
    return json.loads((tmp_path / out / f"{name}.json").read_text())


def strip_runtime(body):
    body["report"].pop("runtime")
    return body


# configuration

def test_reference_config_resolves_critical_rate():
    cfg = reference_config()
    assert cfg.beta == 0.5 and cfg.beta_spec == "critical"
    assert cfg.x == pytest.approx((1.5707963267948966,))
    assert cfg.step.h == 1e-3
    assert cfg.tolerances["ks_p"] == 0.01


def test_schema_errors_are_listed():
    with pytest.raises(ConfigError) as e:
        build_config({"model": {"beta": -1.0}, "step": {"h": 0}, "bogus": 1})
    msg = str(e.value)
    assert "model/beta" in msg and "step/h" in msg and "bogus" in msg


def test_semantic_config_errors():
    for raw in ({"model": {"x": [4.0]}}, {"model": {"x": [1.0, 1.0]}},
                {"model": {"offspring": [0.5, 0.5]}}, {"model": {"offspring": [0.3, 0.3]}}):
        with pytest.raises(ConfigError):
            build_config(raw)


def test_explicit_beta_and_box_config():
    cfg = build_config({"model": {"domain": "box", "lower": [0.0, 0.0], "upper": [3.0, 3.0], "x": [1.5, 1.5],
                                  "diffusion": [[1.0, 0.0], [0.0, 1.0]], "beta": 0.7}})
    assert cfg.beta == 0.7 and cfg.domain.dim == 2


def test_replica_override_touches_only_counts():
    cfg = reference_config().with_overrides(replicas=17)
    assert cfg.experiment("survival")["replicas"] == 17
    assert cfg.experiment("yaglom")["conditioned"] == 17
    assert cfg.experiment("yaglom")["max_replicas"] == reference_config().experiment("yaglom")["max_replicas"]


def test_parser_lists_every_subcommand():
    parser = build_parser()
    for name in ("constants", "simulate", *EXPERIMENTS):
        assert parser.parse_args([name]).command == name


# exit codes and artifacts

def test_constants_output(tmp_path, capsys):
    assert run(tmp_path, "constants") == EXIT_OK
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line == "b=2.95305 sigma2=0.424413 beta_c=0.5"
    body = json.loads((tmp_path / "out" / "constants.json").read_text())
    assert body["constants"]["b_phi_x"] == pytest.approx(2.356194, abs=1e-6)
    assert body["header"]["seed"] == 0


def test_config_error_exit(tmp_path):
    assert run(tmp_path, "constants", config="[model]\nbeta = -2\n") == EXIT_CONFIG
    assert run(tmp_path, "constants", config="not toml [") == EXIT_CONFIG
    assert main(["constants", "--config", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
    assert main(["constants", "--seed", "-1", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["constants", "--threads", "0", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_cap_exit(tmp_path):
    cfg = "[run]\nparticle_cap = 3\n[experiments.simulate]\nhorizon = 20.0\nreplicas = 5\n"
    assert run(tmp_path, "simulate", "--seed", "1", config=cfg) == EXIT_CAP
    cfg = "[run]\nparticle_cap = 2\n[experiments.survival]\ntimes = [20.0]\nreplicas = 50\n"
    assert run(tmp_path, "survival", config=cfg) == EXIT_CAP


def test_failure_exit(tmp_path):
    cfg = SMALL + "[tolerances]\nse_multiple = 1e-12\n"
    assert run(tmp_path, "martingale", config=cfg) == EXIT_FAIL
    assert report(tmp_path, "martingale")["report"]["passed"] is False


def test_every_artifact_carries_the_header(tmp_path):
    assert run(tmp_path, "simulate", "--seed", "5") == EXIT_OK
    assert run(tmp_path, "survival", "--seed", "5") in (EXIT_OK, EXIT_FAIL)
    assert run(tmp_path, "constants", "--seed", "5") == EXIT_OK
    out = tmp_path / "out"
    files = sorted(out.iterdir())
    assert {f.suffix for f in files} == {".json", ".csv", ".jsonl"}
    for f in files:
        text = f.read_text()
        if f.suffix == ".csv":
            head = json.loads("\n".join(ln[2:] for ln in text.splitlines() if ln.startswith("# ")))
        elif f.suffix == ".json":
            head = json.loads(text)["header"]
        else:
            head = json.loads(text.splitlines()[0])["header"]
        assert head["seed"] == 5
        assert head["config"]["model"]["beta"] == 0.5
        assert head["config"]["experiments"]["survival"]["replicas"] == 300


def test_simulate_is_byte_identical(tmp_path):
    assert run(tmp_path, "simulate", "--seed", "7", out="a") == EXIT_OK
    assert run(tmp_path, "simulate", "--seed", "7", out="b") == EXIT_OK
    assert (tmp_path / "a" / "trees.jsonl").read_bytes() == (tmp_path / "b" / "trees.jsonl").read_bytes()
    assert run(tmp_path, "simulate", "--seed", "8", out="c") == EXIT_OK
    assert (tmp_path / "a" / "trees.jsonl").read_bytes() != (tmp_path / "c" / "trees.jsonl").read_bytes()


def test_replicas_do_not_change_streams(tmp_path):
    assert run(tmp_path, "simulate", "--seed", "9", "--replicas", "2", out="two") == EXIT_OK
    assert run(tmp_path, "simulate", "--seed", "9", "--replicas", "3", out="three") == EXIT_OK
    _, two = read_csv(tmp_path / "two" / "trees.csv")
    _, three = read_csv(tmp_path / "three" / "trees.csv")
    assert len(two) == 2 and three[:2] == two


def test_threads_do_not_change_results(tmp_path):
    run(tmp_path, "survival", "--seed", "3", "--threads", "1", out="t1")
    run(tmp_path, "survival", "--seed", "3", "--threads", "2", out="t2")
    a, b = strip_runtime(report(tmp_path, "survival", "t1")), strip_runtime(report(tmp_path, "survival", "t2"))
    assert a["header"]["config"]["run"]["threads"] == 1 and b["header"]["config"]["run"]["threads"] == 2
    assert a["report"] == b["report"]


def test_phase_writes_three_curves(tmp_path):
    assert run(tmp_path, "phase") in (EXIT_OK, EXIT_FAIL)
    cols, rows = read_csv(tmp_path / "out" / "phase_curves.csv")
    assert cols == ["ratio", "t", "survivors", "P", "wilson_lo", "wilson_hi"]
    assert sorted({float(r[0]) for r in rows}) == [0.8, 1.0, 1.2]


def test_floats_written_at_full_precision(tmp_path):
    run(tmp_path, "constants")
    _, rows = read_csv(tmp_path / "out" / "constants.csv")
    cfg = load_config(None)
    # 17 significant digits round-trip exactly
    assert float(dict(rows)["b"]) == model_constants(cfg.domain, cfg.offspring).b


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "branchcrt.cli", "constants", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "b=2.95305" in res.stdout
