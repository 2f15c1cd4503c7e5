import csv
import json

import pytest

from aoept.cli import main

TINY = """\
[data]
n_train = 48
n_val = 16
n_test = 24
seq_len = 4
[backbone]
layers = 2
d_model = 8
heads = 2
pretrain_epochs = 1
[train]
epochs = 1
n_proto = 4
M = 2
[sweep]
sweep_etas = 90, 10
sweep_seeds = 0, 1
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY)
    out = root / "run"
    assert main(["gen-data", "--config", str(root / "tiny.ini"), "--out", str(out)]) == 0
    for cmd in (["pretrain"], ["build-collections"], ["train"], ["train", "--variant", "no_inst"],
                ["train-baseline"], ["train-baseline", "--variant", "frozen"], ["eval"], ["nm2i"]):
        assert main(cmd + ["--out", str(out)]) == 0, cmd
    return root, out


def test_stages_leave_the_documented_layout(run):
    _, out = run
    for rel in ("config.ini", "data/meta.json", "tables/train.json", "tables/test_2.json", "backbone/manifest.json",
                "collections/manifest.json", "models/aoept/bank/manifest.json", "models/aoept/history.csv",
                "models/baseline/report.json", "models/no_inst/nm2i_report.json", "models/frozen/head/manifest.json"):
        assert (out / rel).exists(), rel
    assert not (out / "models/frozen/nm2i_report.json").exists()
    rep = json.loads((out / "models/aoept/report.json").read_text())
    assert len(rep["per_table"]) == 3 and 0 <= rep["accuracy"] <= 1


def test_report_prints_every_variant(run, capsys):
    _, out = run
    assert main(["report", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    for v in ("aoept", "no_inst", "baseline", "frozen"):
        assert f"| {v} |" in text
    assert (out / "report.md").exists() and (out / "summary.csv").exists()


def test_missing_artifacts_name_the_producing_command(tmp_path, capsys):
    assert main(["pretrain", "--out", str(tmp_path / "none")]) == 2
    assert "aoept gen-data" in capsys.readouterr().err
    (tmp_path / "c.ini").write_text(TINY)
    main(["gen-data", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / "r")])
    main(["pretrain", "--out", str(tmp_path / "r")])
    assert main(["train", "--out", str(tmp_path / "r")]) == 2
    assert "aoept build-collections" in capsys.readouterr().err
    assert main(["eval", "--out", str(tmp_path / "r")]) == 2
    assert "train" in capsys.readouterr().err


def test_bad_config_reports_line(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[missing]\neta_test = 170\n")
    assert main(["gen-data", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "r")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_flags_override_the_config(tmp_path):
    (tmp_path / "c.ini").write_text(TINY)
    out = tmp_path / "r"
    assert main(["gen-data", "--config", str(tmp_path / "c.ini"), "--out", str(out), "--seed", "4",
                 "--eta", "30", "--kind", "both", "--method", "init"]) == 0
    cfg = (out / "config.ini").read_text()
    for line in ("data_seed = 4", "eta_test = 30.0", "kind = both", "method = init"):
        assert line in cfg
    assert json.loads((out / "tables/train.json").read_text())["kind"] == "both"


def test_scaling_sweep_writes_one_row_per_method_seed_and_eta(run):
    root, _ = run
    out = root / "sweep"
    assert main(["scaling-sweep", "--config", str(root / "tiny.ini"), "--out", str(out)]) == 0
    with open(out / "sweep/scaling.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 * 2
    assert {r["test_eta"] for r in rows} == {"90.0"}
