import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from conftest import DATA, synthetic_corpus
from tripletbench import Run
from tripletbench.cli import main
from tripletbench.dataset_io import parse_run, write_ground_truth, write_run

TAX = DATA / "cholect50_taxonomy.csv"


@pytest.fixture
def workspace(tmp_path, challenge_tax):
    run, gt = synthetic_corpus(challenge_tax, n_videos=2, n_frames=120, seed=3)
    rng = np.random.default_rng(1)
    write_ground_truth(gt, tmp_path / "gt")
    write_run(Run("alpha", run.videos), tmp_path / "runs" / "alpha")
    write_run(Run("beta", {v: rng.random(m.shape) for v, m in run.videos.items()}), tmp_path / "runs" / "beta")
    return tmp_path


def _json(path):
    return json.loads(path.read_text())


def test_validate_pass_and_fail(workspace):
    assert main(["validate", "--runs", str(workspace / "runs"), "--gt", str(workspace / "gt"), "--out", str(workspace / "v")]) == 0
    report = _json(workspace / "v" / "validation_alpha.json")
    assert report["pass"] is True
    bad = workspace / "runs" / "alpha" / "VID00.csv"
    lines = bad.read_text().splitlines()
    lines[3] = ",".join(["1.5"] + lines[3].split(",")[1:])
    bad.write_text("\n".join(lines) + "\n")
    assert main(["validate", "--runs", str(workspace / "runs"), "--gt", str(workspace / "gt"), "--out", str(workspace / "v2")]) == 1
    (finding,) = _json(workspace / "v2" / "validation_alpha.json")["findings"]
    assert (finding["video_id"], finding["frame_index"], finding["class_index"]) == ("VID00", 3, 0)


def test_validate_causality(workspace):
    full = parse_run(workspace / "runs" / "alpha")
    prefix = Run("alpha", {v: m[:50].copy() for v, m in full.videos.items()})
    prefix.videos["VID01"][20, 7] += 0.1
    write_run(prefix, workspace / "prefix" / "alpha")
    code = main([
        "validate", "--runs", str(workspace / "runs" / "alpha"), "--gt", str(workspace / "gt"),
        "--prefix-runs", str(workspace / "prefix"), "--out", str(workspace / "v"),
    ])
    assert code == 1
    (finding,) = _json(workspace / "v" / "validation_alpha.json")["findings"]
    assert (finding["code"], finding["video_id"], finding["frame_index"]) == ("CAUSALITY", "VID01", 20)


def test_eval_then_leaderboard(workspace):
    args = ["eval", "--runs", str(workspace / "runs"), "--gt", str(workspace / "gt"), "--taxonomy", str(TAX), "--out", str(workspace / "e")]
    assert main(args) == 0
    rep = _json(workspace / "e" / "reports" / "alpha.json")
    assert set(rep["tasks"]) == {"I", "V", "T", "IV", "IT", "IVT"}
    manifest = _json(workspace / "e" / "manifest.json")
    assert manifest["inputs"]["gt"]["sha256"] and manifest["command"] == "eval"
    assert "time" not in json.dumps(manifest).lower()

    assert main(["leaderboard", "--reports", str(workspace / "e" / "reports"), "--taxonomy", str(TAX), "--out", str(workspace / "lb")]) == 0
    rows = (workspace / "lb" / "leaderboard.csv").read_text().splitlines()
    assert rows[0] == "team,AP_I,AP_V,AP_T,AP_IV,AP_IT,AP_IVT"
    assert rows[1].startswith("alpha,") and rows[3].startswith("mean_std,")


def test_eval_is_reproducible(workspace):
    base = ["eval", "--runs", str(workspace / "runs"), "--gt", str(workspace / "gt"), "--taxonomy", str(TAX), "--threads", "1"]
    main(base + ["--out", str(workspace / "a")])
    main(base + ["--out", str(workspace / "b")])
    for name in ("alpha.json", "beta.json"):
        assert (workspace / "a" / "reports" / name).read_bytes() == (workspace / "b" / "reports" / name).read_bytes()


def test_eval_no_mask_and_topk(workspace):
    args = ["eval", "--runs", str(workspace / "runs" / "alpha"), "--gt", str(workspace / "gt"), "--taxonomy", str(TAX),
            "--no-mask", "--topk", "1,3", "--out", str(workspace / "e")]
    assert main(args) == 0
    rep = _json(workspace / "e" / "reports" / "alpha.json")
    assert sorted(rep["topk"]) == ["1", "3"]


def test_eval_misaligned_exits_one(workspace):
    (workspace / "runs" / "beta" / "VID01.csv").unlink()
    args = ["eval", "--runs", str(workspace / "runs"), "--gt", str(workspace / "gt"), "--taxonomy", str(TAX), "--out", str(workspace / "e")]
    assert main(args) == 1


def test_usage_errors(workspace, capsys):
    assert main(["eval", "--runs", str(workspace / "nope"), "--gt", str(workspace / "gt"), "--taxonomy", str(TAX), "--out", str(workspace / "e")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--out", str(workspace)])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["ensemble", "--runs", str(workspace / "runs"), "--variant", "bagging", "--out", str(workspace)])
    assert exc.value.code == 2


@pytest.mark.parametrize("variant", ["average", "soft_vote"])
def test_ensemble_simple(workspace, variant):
    out = workspace / "ens"
    assert main(["ensemble", "--runs", str(workspace / "runs"), "--variant", variant, "--out", str(out)]) == 0
    combined = parse_run(out / f"ensemble-{variant}")
    assert combined.frame_counts() == {"VID00": 120, "VID01": 120}


def test_ensemble_weighted_and_selection(workspace):
    out = workspace / "ens"
    assert main(["ensemble", "--runs", str(workspace / "runs"), "--variant", "weighted_average",
                 "--calibration", str(workspace / "gt"), "--taxonomy", str(TAX), "--out", str(out)]) == 0
    info = _json(out / "ensemble.json")
    assert info["weights"]["alpha"] > info["weights"]["beta"]

    main(["eval", "--runs", str(workspace / "runs"), "--gt", str(workspace / "gt"), "--taxonomy", str(TAX), "--out", str(workspace / "e")])
    assert main(["ensemble", "--runs", str(workspace / "runs"), "--variant", "average", "--reports", str(workspace / "e" / "reports"),
                 "--threshold-ap", "50", "--out", str(workspace / "sel")]) == 0
    assert _json(workspace / "sel" / "ensemble.json")["teams"] == ["alpha"]


def test_ensemble_train_and_apply(workspace):
    assert main(["ensemble-train", "--runs", str(workspace / "runs"), "--gt", str(workspace / "gt"), "--variant", "deep_per_class_weighted",
                 "--epochs", "2", "--out", str(workspace / "m")]) == 0
    model = _json(workspace / "m" / "model.json")
    assert model["variant"] == "deep_per_class_weighted"
    assert main(["ensemble-apply", "--model", str(workspace / "m" / "model.json"), "--runs", str(workspace / "runs"),
                 "--out", str(workspace / "applied")]) == 0
    assert (workspace / "applied" / "ensemble-deep_per_class_weighted" / "VID00.csv").exists()


def test_stability(workspace):
    out = workspace / "s"
    assert main(["stability", "--runs", str(workspace / "runs"), "--gt", str(workspace / "gt"), "--taxonomy", str(TAX),
                 "--n-batches", "12", "--clip-len", "50", "--seed", "3", "--out", str(out)]) == 0
    d = _json(out / "stability.json")
    assert d["teams"] == ["alpha", "beta"] and len(d["clips"]) == 12
    assert _json(out / "manifest.json")["seed"] == 3


def test_frequencies_then_postprocess(workspace):
    assert main(["frequencies", "--gt", str(workspace / "gt"), "--rare", "10", "--out", str(workspace / "f")]) == 0
    assert len(_json(workspace / "f" / "frequencies.json")["rare_set"]) == 10
    assert main(["postprocess", "--runs", str(workspace / "runs"), "--taxonomy", str(TAX),
                 "--freq", str(workspace / "f" / "frequencies.json"), "--out", str(workspace / "pp")]) == 0
    assert (workspace / "pp" / "beta" / "VID01.csv").exists()
    assert main(["frequencies", "--gt", str(workspace / "gt"), "--rare", "500", "--out", str(workspace / "f2")]) == 1


def test_threads_env_override(workspace, monkeypatch):
    monkeypatch.setenv("TRIPLETBENCH_THREADS", "3")
    main(["eval", "--runs", str(workspace / "runs"), "--gt", str(workspace / "gt"), "--taxonomy", str(TAX),
          "--threads", "1", "--out", str(workspace / "e")])
    assert _json(workspace / "e" / "manifest.json")["config"]["threads"] == 3


@pytest.mark.skipif(shutil.which("tripletbench") is None, reason="console script not installed")
def test_console_script():
    proc = subprocess.run(["tripletbench", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("validate", "eval", "leaderboard", "ensemble", "stability", "postprocess"):
        assert cmd in proc.stdout


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "tripletbench.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "tripletbench" in proc.stdout
