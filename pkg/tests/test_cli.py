import json
import os
from pathlib import Path

import numpy as np
import pytest

from gibbscal.cli import ConfigError, cli_dispatch, parse_config
from gibbscal.dataio import canon_json, load_dataset_csv
from gibbscal.errors import DomainError


def write_config(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def minimal_sample_config():
    return {
        "command": "sample",
        "dgp": {"kind": "gamma-quantile", "tau": 0.7},
        "n": 40,
        "eta": 1.0,
        "sampler": {"n_draws": 300, "burn_in": 150},
    }


# ---------------------------------------------------------------------------
# config parsing


def test_parse_minimal_config(tmp_path):
    path = write_config(tmp_path, "c.json", minimal_sample_config())
    cfg = parse_config(path)
    assert cfg.command == "sample"
    assert cfg.seed == 0 and cfg.workers >= 1


def test_parse_rejects_conflicting_sources(tmp_path):
    obj = minimal_sample_config()
    obj["dataset"] = {"path": "x.csv"}
    path = write_config(tmp_path, "c.json", obj)
    with pytest.raises(ConfigError):
        parse_config(path)


def test_parse_rejects_unknown_keys(tmp_path):
    obj = minimal_sample_config()
    obj["bogus"] = 1
    with pytest.raises(ConfigError):
        parse_config(write_config(tmp_path, "c.json", obj))
    obj = minimal_sample_config()
    obj["sampler"]["bogus"] = 1
    with pytest.raises(ConfigError):
        parse_config(write_config(tmp_path, "c2.json", obj))


def test_parse_requires_one_source(tmp_path):
    obj = minimal_sample_config()
    del obj["dgp"]
    with pytest.raises(ConfigError):
        parse_config(write_config(tmp_path, "c.json", obj))


def test_config_roundtrip_bytes(tmp_path):
    path = write_config(tmp_path, "c.json", minimal_sample_config())
    cfg = parse_config(path, overrides={"seed": 5})
    emitted = canon_json(cfg.to_dict())
    cfg2 = parse_config(write_config(tmp_path, "c2.json", json.loads(emitted)))
    assert canon_json(cfg2.to_dict()) == emitted


def test_flag_overrides(tmp_path):
    path = write_config(tmp_path, "c.json", minimal_sample_config())
    cfg = parse_config(path, overrides={"eta": 0.25, "tau": 0.5, "seed": 9})
    assert cfg.raw["eta"] == 0.25
    assert cfg.raw["dgp"]["tau"] == 0.5
    assert cfg.seed == 9


def test_workers_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv("GIBBSCAL_WORKERS", "6")
    cfg = parse_config(write_config(tmp_path, "c.json", minimal_sample_config()))
    assert cfg.workers == 6


# ---------------------------------------------------------------------------
# CSV loading


def test_load_csv_shape(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1.0,2.0\n3.5,4.5\n5.0,6.0\n")
    ds = load_dataset_csv(p, split_index=1)
    assert ds.n == 3 and ds.record_width == 2


def test_load_csv_crlf_equals_lf(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_bytes(b"1.0,2.0\n3.0,4.0\n")
    b.write_bytes(b"1.0,2.0\r\n3.0,4.0\r\n")
    np.testing.assert_array_equal(load_dataset_csv(a).values, load_dataset_csv(b).values)


def test_load_csv_ragged_and_nonnumeric(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,2\n3\n")
    with pytest.raises(DomainError, match="line 2"):
        load_dataset_csv(p)
    p.write_text("1,2\n3,x\n")
    with pytest.raises(DomainError, match="line 2, column 2"):
        load_dataset_csv(p)


def test_load_csv_header_flag(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b\n1,2\n")
    ds = load_dataset_csv(p, header=True)
    assert ds.n == 1


def test_classification_zero_label_rejected(tmp_path):
    data = tmp_path / "d.csv"
    data.write_text("0.5,1\n-0.3,0\n")
    cfgp = write_config(
        tmp_path,
        "c.json",
        {
            "command": "fit",
            "dataset": {"path": str(data), "split_index": 1},
            "loss": {"kind": "hinge", "basis": {"kind": "affine", "input_dim": 1}},
        },
    )
    rc = cli_dispatch(["fit", "--config", cfgp])
    assert rc == 3


# ---------------------------------------------------------------------------
# dispatch


def test_unknown_subcommand_exits_2(capsys):
    assert cli_dispatch(["frobnicate"]) == 2
    assert cli_dispatch([]) == 2


def test_missing_config_file_exits_3(tmp_path):
    assert cli_dispatch(["fit", "--config", str(tmp_path / "nope.json")]) == 3


def test_sample_runs_and_is_deterministic(tmp_path):
    cfgp = write_config(tmp_path, "c.json", minimal_sample_config())
    out1, out2 = str(tmp_path / "o1.json"), str(tmp_path / "o2.json")
    assert cli_dispatch(["sample", "--config", cfgp, "--seed", "7", "--out", out1]) == 0
    assert cli_dispatch(["sample", "--config", cfgp, "--seed", "7", "--out", out2]) == 0
    e1, e2 = json.loads(Path(out1).read_text()), json.loads(Path(out2).read_text())
    assert e1["payload"] == e2["payload"]
    assert e1["payload_sha256"] == e2["payload_sha256"]
    assert Path(tmp_path / "o1.draws.csv").read_bytes() == Path(tmp_path / "o2.draws.csv").read_bytes()


def test_calibrate_runs_with_trace(tmp_path, capsys):
    cfgp = write_config(
        tmp_path,
        "c.json",
        {
            "command": "calibrate",
            "dgp": {"kind": "gamma-quantile", "tau": 0.7},
            "n": 40,
            "gpc": {
                "B": 12,
                "max_iter": 3,
                "region_kind": "interval",
                "feature": 0,
                "sampler": {"n_draws": 300, "burn_in": 150},
            },
        },
    )
    out = str(tmp_path / "cal.json")
    rc = cli_dispatch(["calibrate", "--config", cfgp, "--seed", "3", "--out", out])
    assert rc == 0
    env = json.loads(Path(out).read_text())
    assert env["payload"]["kind"] == "calibrate"
    assert 1 <= len(env["payload"]["trace"]) <= 3
    err = capsys.readouterr().err
    assert '"c_hat"' in err  # progress lines on stderr


def test_all_commands_validate_against_schema(tmp_path):
    import jsonschema

    schema = json.loads(
        Path(__file__).resolve().parents[1]
        .joinpath("src/gibbscal/schemas/envelope.schema.json").read_text()
    )
    runs = {
        "fit": {
            "command": "fit",
            "dgp": {"kind": "quantile-regression"},
            "n": 60,
        },
        "sample": minimal_sample_config(),
        "calibrate": {
            "command": "calibrate",
            "dgp": {"kind": "gamma-quantile"},
            "n": 30,
            "gpc": {"B": 8, "max_iter": 2, "region_kind": "interval", "feature": 0,
                    "sampler": {"n_draws": 200, "burn_in": 100}},
        },
        "simulate": {
            "command": "simulate",
            "dgp": {"kind": "gamma-quantile"},
            "n": 30,
            "reps": 2,
            "calibrate": False,
            "eta": 1.0,
            "gpc": {"region_kind": "interval", "feature": 0,
                    "sampler": {"n_draws": 200, "burn_in": 100}},
        },
        "curve": {
            "command": "curve",
            "dgp": {"kind": "gamma-quantile"},
            "n_list": [30],
            "eta_grid": [1.0],
            "reps": 2,
            "gpc": {"region_kind": "interval", "feature": 0,
                    "sampler": {"n_draws": 200, "burn_in": 100}},
        },
        "diagnose": {
            "command": "diagnose",
            "dgp": {"kind": "gamma-quantile"},
            "n_list": [30, 60],
            "eps": 0.5,
            "reps": 2,
            "sampler": {"n_draws": 200, "burn_in": 100},
        },
    }
    for name, obj in runs.items():
        cfgp = write_config(tmp_path, f"{name}.json", obj)
        out = str(tmp_path / f"{name}.out.json")
        assert cli_dispatch([name, "--config", cfgp, "--seed", "1", "--out", out]) == 0, name
        env = json.loads(Path(out).read_text())
        jsonschema.validate(env, schema)
        assert env["payload"]["kind"] == name


def test_simulate_writes_records_csv(tmp_path):
    cfgp = write_config(
        tmp_path,
        "c.json",
        {
            "command": "simulate",
            "dgp": {"kind": "gamma-quantile"},
            "n": 30,
            "reps": 3,
            "calibrate": False,
            "eta": 1.0,
            "gpc": {"region_kind": "interval", "feature": 0,
                    "sampler": {"n_draws": 200, "burn_in": 100}},
        },
    )
    out = str(tmp_path / "sim.json")
    assert cli_dispatch(["simulate", "--config", cfgp, "--seed", "2", "--out", out]) == 0
    csv_path = tmp_path / "sim.records.csv"
    assert csv_path.exists()
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].startswith("rep,seed,failed,eta_hat")
    assert len(lines) == 4


def test_dataset_fit_roundtrip(tmp_path):
    data = tmp_path / "d.csv"
    rng = np.random.default_rng(0)
    rows = "\n".join(f"{v:.6f}" for v in rng.gamma(5, 1, 50))
    data.write_text(rows + "\n")
    cfgp = write_config(
        tmp_path,
        "c.json",
        {
            "command": "fit",
            "dataset": {"path": str(data)},
            "loss": {"kind": "quantile", "tau": 0.7},
        },
    )
    out = str(tmp_path / "fit.json")
    assert cli_dispatch(["fit", "--config", cfgp, "--out", out]) == 0
    env = json.loads(Path(out).read_text())
    assert env["payload"]["converged"] is True
    assert len(env["payload"]["theta"]) == 1


def test_canon_json_floats():
    assert canon_json({"a": 1.0, "b": 0.1}) == '{"a":1,"b":0.10000000000000001}'
    assert canon_json([True, None, 2]) == "[true,null,2]"
    with pytest.raises(DomainError):
        canon_json({"x": float("nan")})
