import json

import pytest

from gpshare.cli import main

SPEC = {
    "series": [{"kernel": "SE(1, 0.2) + LIN(1, 0)", "seed": 1}, {"kernel": "SE(1, 0.2)", "seed": 2}],
    "t": {"start": 0, "end": 2, "count": 30},
    "noise": 0.1,
}


@pytest.fixture
def dataset(tmp_path):
    spec = tmp_path / "g.json"
    spec.write_text(json.dumps(SPEC))
    out = tmp_path / "d.csv"
    assert main(["synth", "--spec", str(spec), "--out", str(out)]) == 0
    return out


def search(data, out, *extra):
    return main(
        ["search", "--data", str(data), "--model", "lkm", "--alphabet", "SE,LIN", "--max-depth", "1",
         "--rules", "times-base", "--restarts", "1", "--out", str(out), *extra]
    )


def test_synth_search_predict_report_eval(dataset, tmp_path, capsys):
    run = tmp_path / "run"
    assert search(dataset, run) == 0
    assert (run / "model.json").exists()
    assert (run / "trace.jsonl").read_text().count("\n") >= 1
    assert main(["predict", "--fitted", str(run / "model.json"), "--out", str(run)]) == 0
    printed = capsys.readouterr().out
    assert "RMSE" in printed and "MNLP" in printed
    assert main(["eval", "--predictions", str(run / "predictions.csv")]) == 0
    again = capsys.readouterr().out
    # eval recomputes exactly the numbers predict printed
    assert sorted(again.splitlines()) == sorted(l for l in printed.splitlines() if "RMSE" in l)
    assert main(["report", "--fitted", str(run / "model.json"), "--out", str(run)]) == 0
    assert "share the following properties" in (run / "report.md").read_text() or "has the following" in (run / "report.md").read_text()
    json.loads((run / "plot.json").read_text())


def test_fit_command(dataset, tmp_path):
    run = tmp_path / "fit"
    assert main(["fit", "--data", str(dataset), "--kernels", "SE + LIN", "--restarts", "1", "--out", str(run)]) == 0
    payload = json.loads((run / "model.json").read_text())
    assert payload["model"] == "lkm"
    assert len(payload["state"]["kernels"]) == 2


def test_fixed_seed_is_byte_identical(dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert search(dataset, a, "--seed", "3") == 0
    assert search(dataset, b, "--seed", "3") == 0
    assert (a / "model.json").read_bytes() == (b / "model.json").read_bytes()
    assert (a / "trace.jsonl").read_bytes() == (b / "trace.jsonl").read_bytes()


def test_config_file_overrides_flags(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": "gplfm", "max_depth": 0, "alphabet": ["SE"]}))
    run = tmp_path / "cfg"
    assert search(dataset, run, "--config", str(cfg)) == 0
    payload = json.loads((run / "model.json").read_text())
    assert payload["model"] == "gplfm"
    assert [e["factors"][0]["kind"] for e in payload["state"]["kernels"]] == ["SE"]


def test_missing_file_exit_1(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert main(["search", "--data", str(missing), "--out", str(tmp_path / "o")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_usage_errors_exit_1(dataset, tmp_path, capsys):
    assert main([]) == 1
    assert main(["search", "--data", str(dataset)]) == 1
    assert main(["search", "--data", str(dataset), "--out", str(tmp_path), "--alphabet", "SE,XX"]) == 1
    assert main(["search", "--data", str(dataset), "--out", str(tmp_path), "--rules", "grow"]) == 1
    assert "usage" in capsys.readouterr().err


def test_malformed_csv_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,a\n0,1\n1,oops\n")
    assert main(["fit", "--data", str(bad), "--kernels", "SE", "--out", str(tmp_path / "o")]) == 1
    assert "row 3" in capsys.readouterr().err


def test_report_without_active_column_exit_2(dataset, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["fit", "--data", str(dataset), "--kernels", "SE", "--restarts", "1", "--out", str(run)]) == 0
    path = run / "model.json"
    payload = json.loads(path.read_text())
    payload["state"]["xi"] = [[-10.0] for _ in payload["state"]["xi"]]
    path.write_text(json.dumps(payload))
    assert main(["report", "--fitted", str(path), "--out", str(run)]) == 2
    assert "NoActiveComponent" in capsys.readouterr().err
