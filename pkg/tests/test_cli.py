import json
from pathlib import Path

import pytest

from pneumoscan import cli
from pneumoscan.config import ExperimentConfig
from pneumoscan.trainer import TrainConfig

FAST = ["--weights", "none", "--work-size", "64", "--max-epochs", "2", "--patience", "2"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, corpus):
    wd = tmp_path_factory.mktemp("wd")
    assert cli.main(["scan", "--root", str(corpus), "--workdir", str(wd)]) == 0
    assert cli.main(["split", "--workdir", str(wd), "--test-fraction", "0.25"]) == 0
    assert cli.main(["augment", "--workdir", str(wd), "--target", "20", "--work-size", "64"]) == 0
    return wd


def test_scan_prints_counts(capsys, corpus, tmp_path):
    code, out, _ = run(capsys, "scan", "--root", corpus, "--workdir", tmp_path)
    assert code == 0
    assert out.splitlines() == ["Normal 12, Bacterial 12, Viral 12", "Total 36"]
    assert (tmp_path / "manifest.json").exists()
    assert (tmp_path / "experiment.json").exists()


def test_scan_missing_root_is_runtime_error(capsys, tmp_path):
    code, _, err = run(capsys, "scan", "--root", tmp_path / "nowhere", "--workdir", tmp_path)
    assert code == 2 and "not found or empty" in err


def test_usage_errors_exit_1(capsys, tmp_path):
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--arch", "vgg16"])
    assert e.value.code == 1
    code, _, err = run(capsys, "cv", "--arch", "squeezenet", "--k", "1", "--workdir", tmp_path)
    assert code == 1 and "k must be >= 2" in err
    assert run(capsys, "report", "--out", tmp_path / "r")[0] == 1


def test_split_bacterial_vs_viral(capsys, workdir):
    code, out, _ = run(capsys, "split", "--workdir", workdir, "--scheme", "bacterial-vs-viral",
                       "--test-fraction", "0.25")
    assert code == 0
    s = json.loads((workdir / "split.bacterial-vs-viral.json").read_text())
    assert not [r for r in s["train_ids"] + s["test_ids"] if "NORMAL" in r]
    assert "Normal" not in out


def test_augment_hits_target(capsys, workdir):
    code, out, _ = run(capsys, "augment", "--workdir", workdir, "--target", "20", "--work-size", "64")
    assert code == 0 and out.strip() == "Normal 20, Pneumonia 20"


def test_augment_unreachable_target(capsys, workdir):
    code, _, err = run(capsys, "augment", "--workdir", workdir, "--target", "500", "--work-size", "64")
    assert code == 2 and "at least" in err


def test_train_zero_epochs(capsys, workdir):
    code, out, err = run(capsys, "train", "--workdir", workdir, "--arch", "squeezenet", "--run-name", "zero",
                         *FAST, "--max-epochs", "0")
    assert code == 0 and "warning" in err
    run_dir = workdir / "runs" / "normal-vs-pneumonia" / "squeezenet" / "zero"
    assert (run_dir / "history.csv").read_text().splitlines() == ["epoch,train_loss,train_acc,val_loss,val_acc"]
    assert (run_dir / "predictions.csv").exists()
    assert (run_dir / "checkpoints" / "best.ckpt").exists()


def test_train_twice_identical_and_report(capsys, workdir, tmp_path):
    runs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "train", "--workdir", workdir, "--arch", "squeezenet", "--run-name", name,
                           *FAST, "--deterministic", "--seed", "7")
        assert code == 0
        runs.append(workdir / "runs" / "normal-vs-pneumonia" / "squeezenet" / name)
    assert (runs[0] / "predictions.csv").read_bytes() == (runs[1] / "predictions.csv").read_bytes()
    assert (runs[0] / "checkpoints" / "epoch1.ckpt").exists()
    cfg = json.loads((runs[0] / "config.json").read_text())
    assert cfg["experiment"]["train"]["seed"] == 7

    assert run(capsys, "report", *runs, "--out", tmp_path / "r1")[0] == 0
    assert run(capsys, "report", *runs, "--out", tmp_path / "r2")[0] == 0
    first = (tmp_path / "r1" / "results.csv").read_bytes()
    assert first == (tmp_path / "r2" / "results.csv").read_bytes()
    lines = first.decode().splitlines()
    assert lines[0] == "task,model,accuracy,sensitivity,specificity,precision,auc,f1"
    assert len(lines) == 3
    metrics = json.loads((runs[0] / "metrics.json").read_text())
    row = dict(zip(lines[0].split(","), lines[1].split(",")))
    for k in ("accuracy", "sensitivity", "specificity", "precision", "auc", "f1"):
        assert (float(row[k]) if row[k] else None) == metrics[k]
    for f in ("accuracy.normal-vs-pneumonia.png", "roc.normal-vs-pneumonia.png",
              "confusion.normal-vs-pneumonia.squeezenet.a.png"):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()


def test_report_skips_runs_without_predictions(capsys, tmp_path):
    (tmp_path / "empty").mkdir()
    code, _, err = run(capsys, "report", tmp_path / "empty", "--out", tmp_path / "r")
    assert code == 2 and "none of the given runs" in err


def test_cv_separable_smoke(capsys, workdir):
    # resnet18's batch norm separates the brightness classes within a few epochs from random init;
    # the BN-free backbones need more epochs than a smoke test should spend
    code, out, _ = run(capsys, "cv", "--workdir", workdir, "--arch", "resnet18", "--run-name", "cv", "--k", "2",
                       *FAST, "--max-epochs", "4")
    assert code == 0
    run_dir = workdir / "runs" / "normal-vs-pneumonia" / "resnet18" / "cv-cv2"
    assert sorted(p.name for p in run_dir.glob("fold*")) == ["fold0", "fold1"]
    summary = json.loads((run_dir / "cv_summary.json").read_text())
    assert summary["accuracy"]["mean"] == 1.0
    assert (workdir / "normal-vs-pneumonia" / "folds.k2.json").exists()


def test_activations_three_images(capsys, workdir, corpus, tmp_path):
    ckpt = workdir / "runs" / "normal-vs-pneumonia" / "squeezenet" / "zero" / "checkpoints" / "best.ckpt"
    if not ckpt.exists():
        run(capsys, "train", "--workdir", workdir, "--arch", "squeezenet", "--run-name", "zero", *FAST,
            "--max-epochs", "0")
    images = sorted((Path(corpus) / "chest_xray" / "NORMAL").glob("*.png"))[:3]
    argv = ["activations", "--checkpoint", ckpt, "--out", tmp_path / "act"]
    for im in images:
        argv += ["--image", im]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    dirs = sorted(p for p in (tmp_path / "act" / "squeezenet").iterdir())
    assert [d.name for d in dirs] == [im.stem for im in images]
    assert len(list(dirs[0].glob("*.png"))) >= 2

    code, _, err = run(capsys, "activations", "--checkpoint", ckpt, "--image", images[0], "--out",
                       tmp_path / "x", "--layer", "nope")
    assert code == 2 and "first_conv" in err


def test_verify_detects_change(capsys, tmp_path):
    from pneumoscan import synthetic
    root = synthetic.write_corpus(tmp_path / "c", 2, 2, 2, size=16)
    wd = tmp_path / "wd"
    assert run(capsys, "scan", "--root", root, "--workdir", wd)[0] == 0
    assert run(capsys, "verify", "--workdir", wd)[0] == 0
    victim = next((root / "chest_xray" / "NORMAL").glob("*.png"))
    victim.write_bytes(b"tampered")
    code, out, _ = run(capsys, "verify", "--workdir", wd)
    assert code == 2 and "hash mismatch" in out


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "exp.json"
    ExperimentConfig(workdir=str(tmp_path / "wd"),
                     train=TrainConfig(learning_rate=0.01, batch_size=8)).save(cfg_file)
    args = cli.build_parser().parse_args(["train", "--arch", "alexnet", "--config", str(cfg_file),
                                          "--learning-rate", "0.5"])
    cfg = cli.resolve_config(args)
    assert cfg.train.learning_rate == 0.5       # flag beats file
    assert cfg.train.batch_size == 8            # file beats default
    assert cfg.train.momentum == 0.9            # default
    assert cfg.workdir == str(tmp_path / "wd")
