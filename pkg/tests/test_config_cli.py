import hashlib
import os
from pathlib import Path

import numpy as np
import pytest

from mscope import config as cfgmod
from mscope.cli import main

# tiny-profile overrides: everything small enough for seconds-long runs
TINY_SETS = [
    "data.exams=40", "data.cc_height=64", "data.cc_width=48",
    "data.mlo_height=72", "data.mlo_width=44",
    "data.biopsied_fraction=0.5", "data.malignant_fraction=0.5",
    "data.occult_fraction=0.1", "data.split_train=0.5",
    "data.split_val=0.25", "data.split_test=0.25",
    "patch.size=16", "patch.side_min=8", "patch.side_max=24",
    "patch.plan=10,10,40,40", "patch.pool_targets=30,30,80,80",
    "patch.epochs=4", "patch.save_every=2", "patch.batch_size=20",
    "patch.lr=1e-3", "patch.select_exams=6",
    "heatmap.stride=8",
    "train.lr=3e-4", "train.patience=2", "train.max_epochs=2",
    "train.max_offset=2", "train.tta_samples=2",
    "train.birads_epoch_exams=10", "train.epoch_exams=8",
    "eval.readers=3", "eval.reader_auc_low=0.75", "eval.reader_auc_high=0.8",
]


def sets(extra=()):
    out = []
    for kv in list(TINY_SETS) + list(extra):
        out.extend(["--set", kv])
    return out


def tree_hash(root):
    digest = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            digest.update(str(p.relative_to(root)).encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


# -- config machinery --

def test_profiles_differ():
    desk = cfgmod.resolve()
    paper = cfgmod.resolve(overrides={"profile": "paper"})
    assert desk["patch.size"] == 64
    assert paper["patch.size"] == 256
    assert paper["data.cc_height"] == 2677
    assert desk["train.lr"] != paper["train.lr"]
    assert paper["train.lr"] == pytest.approx(1e-5)
    assert desk["train.l2"] == pytest.approx(10 ** -4.5)


def test_unknown_key_rejected():
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.resolve(overrides={"data.bananas": "3"})


def test_bad_value_rejected():
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.resolve(overrides={"data.exams": "many"})


def test_file_and_override_precedence(tmp_path):
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("# comment\ndata.exams=100\npatch.size=32\n")
    cfg = cfgmod.load(cfg_file, {"patch.size": "48"})
    assert cfg["data.exams"] == 100
    assert cfg["patch.size"] == 48


def test_dump_roundtrip(tmp_path):
    cfg = cfgmod.resolve(overrides={"data.exams": "7"})
    path = tmp_path / "resolved.txt"
    cfg.dump(path)
    again = cfgmod.load(path)
    assert again.values == cfg.values


# -- CLI basics --

def test_unknown_flag_exits_1(capsys):
    assert main(["gen-data", "--frobnicate"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err


def test_unknown_subcommand_exits_1():
    assert main(["explode"]) == 1


def test_missing_data_dir_is_user_error(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("MSCOPE_DATA_DIR", raising=False)
    assert main(["train-patch", "--out", str(tmp_path / "o")]) == 1


def test_refuses_existing_out_without_force(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["gen-data", "--out", str(out), "--seed", "1",
                 *sets(("data.exams=2",))]) == 0
    assert main(["gen-data", "--out", str(out), "--seed", "1",
                 *sets(("data.exams=2",))]) == 1
    assert "exists" in capsys.readouterr().err
    assert main(["gen-data", "--out", str(out), "--seed", "1", "--force",
                 *sets(("data.exams=2",))]) == 0


# -- full tiny pipeline --

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run every subcommand once on a tiny dataset; return all paths."""
    root = tmp_path_factory.mktemp("pipe")
    paths = {
        "data": root / "data", "patch": root / "patch",
        "heatmaps": root / "heatmaps", "birads": root / "birads",
        "cancer": root / "cancer", "cancer_hm": root / "cancer_hm",
        "ens": root / "ens",
        "pred": root / "pred", "pred_hm": root / "pred_hm",
        "eval": root / "eval", "reader": root / "reader",
    }
    def call(argv):
        assert main(argv) == 0, argv
    call(["gen-data", "--out", str(paths["data"]), "--seed", "5", *sets()])
    call(["train-patch", "--data", str(paths["data"]), "--out",
          str(paths["patch"]), "--seed", "5", *sets()])
    call(["gen-heatmaps", "--data", str(paths["data"]), "--out",
          str(paths["heatmaps"]), "--checkpoint",
          str(paths["patch"] / "best.ckpt"), "--seed", "5", *sets()])
    call(["pretrain-birads", "--data", str(paths["data"]), "--out",
          str(paths["birads"]), "--seed", "5", *sets()])
    call(["train-cancer", "--data", str(paths["data"]), "--out",
          str(paths["cancer"]), "--seed", "5", "--init",
          str(paths["birads"]), *sets()])
    call(["train-cancer", "--data", str(paths["data"]), "--out",
          str(paths["cancer_hm"]), "--seed", "5", "--init",
          str(paths["birads"]), "--heatmaps", str(paths["heatmaps"]),
          *sets()])
    call(["ensemble", "--data", str(paths["data"]), "--out",
          str(paths["ens"]), "--seed", "5", "--members", "2", "--init",
          str(paths["birads"]), *sets()])
    call(["predict", "--data", str(paths["data"]), "--run",
          str(paths["cancer"]), "--out", str(paths["pred"]), "--seed", "5",
          "--model-id", "image_only", *sets()])
    call(["predict", "--data", str(paths["data"]), "--run",
          str(paths["cancer_hm"]), "--out", str(paths["pred_hm"]),
          "--seed", "5", "--heatmaps", str(paths["heatmaps"]),
          "--model-id", "image_and_heatmaps", *sets()])
    call(["evaluate", "--data", str(paths["data"]), "--predictions",
          str(paths["pred"] / "predictions.csv"), "--out",
          str(paths["eval"]), "--seed", "5", *sets()])
    call(["reader-study", "--data", str(paths["data"]), "--predictions",
          str(paths["pred"] / "predictions.csv"), "--out",
          str(paths["reader"]), "--seed", "5", *sets()])
    return paths


def test_pipeline_artifacts(pipeline):
    p = pipeline
    assert (p["data"] / "manifest.csv").exists()
    assert (p["patch"] / "best.ckpt").exists()
    assert (p["patch"] / "selection.csv").exists()
    assert len(list(p["heatmaps"].glob("*.mshm"))) == 40 * 4
    assert (p["birads"] / "best.ckpt").exists()
    assert (p["cancer"] / "log.csv").exists()
    assert (p["ens"] / "members" / "m1.ckpt").exists()
    preds = (p["pred"] / "predictions.csv").read_text().splitlines()
    assert preds[0] == "exam_id,side,p_malignant,p_benign,model_id"
    assert len(preds) == 1 + 2 * 10  # 10 test exams
    # every run directory carries its resolved config
    for key in ("patch", "birads", "cancer", "ens", "pred", "eval"):
        assert (p[key] / "config.txt").exists()


def test_metrics_rows_present(pipeline):
    text = (pipeline["eval"] / "metrics.csv").read_text().splitlines()
    assert text[0] == "model_id,population,task,metric,value"
    rows = [line.split(",") for line in text[1:]]
    combos = {(r[1], r[2], r[3]) for r in rows}
    assert ("screening", "malignant", "auc") in combos
    assert ("screening", "benign", "auc") in combos
    assert ("biopsied", "malignant", "auc") in combos
    assert ("screening", "biopsy", "auc") in combos
    curves = list((pipeline["eval"] / "curves").glob("*.csv"))
    assert curves


def test_reader_study_outputs(pipeline):
    lines = (pipeline["reader"] / "reader_metrics.csv").read_text().splitlines()
    assert len(lines) == 1 + 3  # 3 readers
    sweep = (pipeline["reader"] / "sweep.csv").read_text().splitlines()
    assert len(sweep) == 1 + 3 * 100


def test_report_table(pipeline, tmp_path, capsys):
    out = tmp_path / "report.txt"
    assert main(["report", "--out", str(out),
                 str(pipeline["eval"] / "metrics.csv")]) == 0
    text = out.read_text()
    assert "screening population" in text
    assert "malignant" in text


def test_evaluate_single_population(pipeline, tmp_path):
    out = tmp_path / "ev2"
    assert main(["evaluate", "--data", str(pipeline["data"]),
                 "--predictions",
                 str(pipeline["pred"] / "predictions.csv"),
                 "--out", str(out), "--population", "biopsied",
                 "--seed", "5", *sets()]) == 0
    rows = (out / "metrics.csv").read_text()
    assert "biopsied,malignant,auc" in rows
    assert "screening" not in rows


def test_predict_ensemble_members(pipeline, tmp_path):
    out = tmp_path / "pred_ens"
    assert main(["predict", "--data", str(pipeline["data"]), "--run",
                 str(pipeline["ens"]), "--ensemble", "--out", str(out),
                 "--seed", "5", "--model-id", "ens", *sets()]) == 0
    lines = (out / "predictions.csv").read_text().splitlines()
    assert len(lines) == 21


def test_rerun_reproducibility(pipeline, tmp_path):
    """Identical config+seed reruns produce byte-identical outputs."""
    p = pipeline
    twin = tmp_path / "data2"
    assert main(["gen-data", "--out", str(twin), "--seed", "5", *sets()]) == 0
    assert tree_hash(twin) == tree_hash(p["data"])

    twin_pred = tmp_path / "pred2"
    assert main(["predict", "--data", str(p["data"]), "--run",
                 str(p["cancer"]), "--out", str(twin_pred), "--seed", "5",
                 "--model-id", "image_only", *sets()]) == 0
    assert (twin_pred / "predictions.csv").read_bytes() == \
        (p["pred"] / "predictions.csv").read_bytes()
