import json

import pytest

from imci.cli import main
from imci.config import Config


@pytest.fixture
def data_dir(tmp_path):
    d = tmp_path / "d"
    assert main(["init", "--data-dir", str(d), "--tables", "3", "--set", "group.size=64"]) == 0
    return d


def test_init_layout(data_dir, capsys):
    assert (data_dir / "catalog.json").exists()
    assert {p.name for p in data_dir.iterdir()} >= {"log", "ckpt", "run", "imci.conf"}
    cfg = Config.parse((data_dir / "imci.conf").read_text())
    assert cfg["tables"] == 3 and cfg["group.size"] == 64
    with pytest.raises(SystemExit):
        main(["init", "--data-dir", str(data_dir)])


def test_bad_override_is_reported(data_dir):
    with pytest.raises(SystemExit, match="config error"):
        main(["query", "--data-dir", str(data_dir), "--set", "bogus=1", "scan t1 agg count"])


def test_uninitialized_dir(tmp_path):
    with pytest.raises(SystemExit, match="not initialized"):
        main(["query", "--data-dir", str(tmp_path), "scan t1 agg count"])


def test_offline_query_and_checkpoint(data_dir, capsys):
    capsys.readouterr()
    assert main(["query", "--data-dir", str(data_dir), "scan t1 agg count"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["value"] == 0 and res["node"] == "offline/empty"
    assert main(["checkpoint", "--data-dir", str(data_dir)]) == 0
    assert "csn=0 offline" in capsys.readouterr().out
    assert main(["query", "--data-dir", str(data_dir), "scan t1 agg count"]) == 0
    assert json.loads(capsys.readouterr().out)["node"] == "offline/checkpoint"


def test_query_error_exit_code(data_dir, capsys):
    assert main(["query", "--data-dir", str(data_dir), "scan nope"]) == 2
    assert "QueryError" in capsys.readouterr().err


def test_verify_exit_codes(capsys):
    assert main(["verify", "--scale", "0"]) == 0
    assert "nothing to verify" in capsys.readouterr().err
    assert main(["verify", "--scale", "small", "--fault", "skip-entry", "--seed", "3"]) == 1
    assert "FAIL end_to_end_equivalence" in capsys.readouterr().out


def test_bench_writes_schema_valid_report(tmp_path, capsys):
    jsonschema = pytest.importorskip("jsonschema")
    from imci.bench import load_report_schema

    out = tmp_path / "out"
    assert main(["bench", "--workload", "mixed", "--rate", "500", "--seconds", "1", "--tables", "4",
                 "--out", str(out)]) == 0
    report = json.loads((out / "bench_mixed_42.json").read_text())
    jsonschema.validate(report, load_report_schema())
    header = (out / "bench_mixed_42.csv").read_text().splitlines()[0]
    assert header == "t_s,written_lsn,applied_lsn,lag_lsn"
