import json
import subprocess
import sys

import pytest

from mixbalance.cli import main
from mixbalance.metrics import EvalReport

REPORT_FIELDS = {f for f in EvalReport.__dataclass_fields__}


def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    assert "gradient checks passed" in capsys.readouterr().out


def test_synth_twice_is_byte_identical(tmp_path):
    args = ["synth", "--counts", "20,10,4,2", "--size", "16", "--noise", "0.3", "--seed", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) == 37
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--counts", "6,4", "--size", "8", "--seed", "3", "--out", str(root / "data")]) == 0
    rc = main(["train", "--data", str(root / "data" / "manifest.csv"),
               "--eval-data", str(root / "data" / "manifest.csv"),
               "--loss-mode", "cucn", "--weights-scheme", "inv-freq", "--epochs", "2",
               "--batch-size", "4", "--base-channels", "4", "--stage-blocks", "1",
               "--feature-dim", "4", "--out", str(root / "run")])
    assert rc == 0
    return root


def test_train_then_eval_emits_every_report_field(trained, capsys):
    rc = main(["eval", "--checkpoint", str(trained / "run" / "final.cuck"),
               "--data", str(trained / "data" / "manifest.csv"), "--out", str(trained / "eval")])
    assert rc == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(printed) == REPORT_FIELDS
    on_disk = json.loads((trained / "eval" / "metrics.json").read_text())
    assert on_disk == printed
    rows = (trained / "eval" / "confusion.csv").read_text().splitlines()
    assert len(rows) == 2 and all(v.isdigit() for r in rows for v in r.split(","))


def test_report_renders_from_eval_and_history(trained, tmp_path):
    main(["eval", "--checkpoint", str(trained / "run" / "best.cuck"),
          "--data", str(trained / "data" / "manifest.csv"), "--out", str(tmp_path / "ev")])
    rc = main(["report", "--metrics", str(tmp_path / "ev" / "metrics.json"),
               "--history", str(trained / "run" / "history.csv"), "--out", str(tmp_path / "rep")])
    assert rc == 0
    summary = json.loads((tmp_path / "rep" / "summary.json").read_text())
    assert summary["epochs"] == 2 and summary["best_epoch"] in (0, 1)
    assert (tmp_path / "rep" / "confusion.csv").exists()


def test_config_file_with_flag_override(tmp_path):
    main(["synth", "--counts", "4,4", "--size", "8", "--seed", "0", "--out", str(tmp_path / "d")])
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# desk run\nepochs = 1\nbatch-size = 4\nloss_mode = ce\n"
                   "stage_blocks = 1\nbase_channels = 4\nfeature_dim = 4\ncbam_on = off\n")
    rc = main(["train", "--data", str(tmp_path / "d" / "manifest.csv"), "--config", str(cfg),
               "--loss-mode", "wce", "--out", str(tmp_path / "r")])
    assert rc == 0
    saved = json.loads((tmp_path / "r" / "config.json").read_text())
    assert saved["train"]["loss_mode"] == "wce" and saved["train"]["epochs"] == 1
    assert saved["backbone"]["cbam_on"] is False


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["synth", "--bogus", "1", "--out", "x"])
    assert info.value.code == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.cuck"),
                 "--data", str(tmp_path / "none.csv")]) == 1
    assert "error:" in capsys.readouterr().err


def test_manual_weights_need_right_length(tmp_path):
    main(["synth", "--counts", "4,4", "--size", "8", "--out", str(tmp_path / "d")])
    rc = main(["train", "--data", str(tmp_path / "d" / "manifest.csv"), "--weights-scheme",
               "manual:1,2,3", "--epochs", "1", "--batch-size", "4", "--out", str(tmp_path / "r")])
    assert rc == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mixbalance", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout
