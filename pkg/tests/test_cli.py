import csv
import json
from pathlib import Path

import pytest

from apdo.cli import ConfigError, csv_header, load_config, main, parse_config, run_experiment, sweep_kadj

ROOT = Path(__file__).resolve().parents[1]
TINY = {
    "env": {"name": "risky_chain"},
    "epochs": 4,
    "batch_size": 40,
    "offpolicy": {"off_iterations": 50, "critic_hidden": [4], "actor_hidden": [4]},
}


def tiny(**kw):
    return parse_config({**TINY, **kw})


def test_defaults():
    cfg = parse_config({"algorithm": "pdo"})
    assert cfg.algorithms == ("pdo",)
    assert cfg.apdo.gamma == 0.995 and cfg.apdo.beta == 0.1 and cfg.apdo.gae_lambda == 0.95
    assert cfg.apdo.k_adj == 5 and cfg.seeds == (0,)
    assert parse_config({}).algorithms == ("apdo",)


def test_overrides():
    cfg = parse_config('{"k_adj": 7, "offpolicy": {"tau": 0.01}, "policy_hidden": [8]}')
    assert cfg.apdo.k_adj == 7 and cfg.apdo.offpolicy.tau == 0.01 and cfg.ddpg.offpolicy.tau == 0.01
    assert cfg.apdo.policy_hidden == (8,)
    assert parse_config({"env": {"name": "risky_chain"}}).apdo.gamma == 0.9


@pytest.mark.parametrize("doc, fragment", [
    ('{"epochs": 3,\n "seeds": [0', "line 2"),
    ({"k_adjust": 5}, "k_adjust"),
    ({"offpolicy": {"taux": 0.1}}, "offpolicy.taux"),
    ({"algorithm": "cpo"}, "cpo"),
    ({"seeds": []}, "seeds"),
    ({"beta": "fast"}, "beta"),
    ({"epochs": 2.5}, "epochs"),
    ({"alpha": -1}, "alpha"),
    ({"env": {"name": "mujoco"}}, "env"),
    ([1, 2], "object"),
])
def test_rejects(doc, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(doc)


def test_header_width():
    assert len(csv_header(2)) == 5 + 2 * 2
    assert csv_header(1) == ["epoch", "avg_return", "avg_cost_1", "lambda_1", "samples", "wall_s", "adjusted"]


def read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh, strict=True))


def test_run_writes_files_deterministically(tmp_path):
    cfg = tiny(algorithms=["pdo", "apdo"], seeds=[0, 1, 2, 3, 4], k_adj=1)
    paths = run_experiment(cfg, tmp_path / "a")
    assert len(paths) == 12
    assert sorted(p.name for p in paths if "summary" in p.name) == ["apdo_summary.csv", "pdo_summary.csv"]
    rows = read(tmp_path / "a" / "apdo_seed3.csv")
    assert rows[0] == csv_header(1) and len(rows) == 5
    assert [r[-1] for r in rows[1:]] == ["0", "1", "0", "0"]
    assert all(r[5] == "0.0" for r in rows[1:])
    assert all("nan" not in cell.lower() for r in rows for cell in r)
    summary = read(tmp_path / "a" / "pdo_summary.csv")
    assert summary[0][:5] == ["epoch", "n_seeds", "avg_return_q25", "avg_return_median", "avg_return_q75"]
    assert summary[1][1] == "5"
    run_experiment(cfg, tmp_path / "b")
    for p in paths:
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_parallel_matches_serial(tmp_path):
    run_experiment(tiny(seeds=[0, 1]), tmp_path / "serial")
    run_experiment(tiny(seeds=[0, 1], parallelism=2), tmp_path / "par")
    for name in ("apdo_seed0.csv", "apdo_seed1.csv", "apdo_summary.csv"):
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "par" / name).read_bytes()


def test_wall_clock_opt_in(tmp_path):
    run_experiment(tiny(record_wall_clock=True), tmp_path)
    assert float(read(tmp_path / "apdo_seed0.csv")[-1][5]) > 0


def test_sweep(tmp_path):
    paths = sweep_kadj(tiny(seeds=[0, 1]), [0, 1, 3], tmp_path)
    for k in (0, 1, 3):
        assert (tmp_path / f"kadj_{k}" / "apdo_seed1.csv").exists()
        assert (tmp_path / f"kadj_{k}" / "apdo_summary.csv").exists()
    rows = read(tmp_path / "kadj_sweep.csv")
    assert rows[0][:3] == ["k_adj", "seed", "lambda_off_1"] and len(rows) == 7
    assert tmp_path / "kadj_sweep.csv" in paths
    with pytest.raises(ConfigError):
        sweep_kadj(tiny(), [], tmp_path)
    with pytest.raises(ConfigError):
        sweep_kadj(tiny(), [4], tmp_path)


def test_main_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({**TINY, "algorithm": "pdo"}))
    assert main(["run", str(good), "-o", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "pdo_seed0.csv").exists()
    assert main(["sweep-kadj", str(good), "--values", "1,2", "-o", str(tmp_path / "sw")]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text('{"epochs": 1, "colour": "red"}')
    assert main(["run", str(bad)]) == 1
    assert "colour" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.json")]) == 1
    with pytest.raises(SystemExit):
        main(["sweep-kadj", str(good), "--values", ""])


def test_oracle_subcommand(tmp_path, capsys):
    assert main(["oracle", str(ROOT / "configs" / "risky_chain_cmdp.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["lambda_star"] == pytest.approx(9.0, abs=1e-6)
    assert report["R_star"] == pytest.approx(28.0, abs=1e-6)
    broken = tmp_path / "broken.json"
    broken.write_text('{"gamma": 0.9}')
    assert main(["oracle", str(broken)]) == 1


def test_shipped_configs_parse():
    for path in sorted((ROOT / "configs").glob("*.json")):
        if path.name.endswith("_cmdp.json"):
            continue
        cfg = load_config(path)
        assert cfg.seeds and cfg.algorithms
