import argparse
import csv

import numpy as np
import pytest
import yaml

from ordigrade import cli, metrics, nn
from ordigrade import data as D
from ordigrade.augment import tta_set
from ordigrade.config import SEED_ENV
from ordigrade.ensemble import predict_batch

SIZE = 16


def tiny_config(out, **over):
    cfg = {
        "seed": 0,
        "output_dir": str(out),
        "data": {"pretrain": {"synthetic": {"n": 60}},
                 "main": {"synthetic": {"n": 60, "class_proportions": [0.2] * 5}},
                 "n_folds": 5, "holdout_fraction": 0.2},
        "model": {"input_shape": [3, SIZE, SIZE],
                  "encoder": [{"kind": "conv3x3", "in_ch": 3, "out_ch": 4, "stride": 2},
                              {"kind": "relu"}, {"kind": "global_avg_pool"}],
                  "head": []},
        "stages": {"pretrain": {"epochs": 1, "batch_size": 16},
                   "main": {"epochs": 2, "encoder_freeze_epochs": 1, "batch_size": 16},
                   "posttrain": {"epochs": 5}},
        "ensemble": {"tta": ["hflip"], "trim": 0.25},
    }
    for k, v in over.items():
        cfg[k] = v
    return cfg


def write_config(tmp_path, name="run.yaml", **over):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(tiny_config(tmp_path / "out", **over), sort_keys=False))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp)
    assert run("gen-data", cfg) == 0
    assert run("train", cfg) == 0
    return tmp, cfg


def perfect_stub(path):
    """Reads the grade back from a uniform image whose intensity is grade / 4."""
    model = nn.ThreeHeadModel((3, SIZE, SIZE), [nn.global_avg_pool()], [], seed=0)
    p = {k: np.zeros_like(v) for k, v in model.parameters().items()}
    p["reg.0.W"] = np.full_like(p["reg.0.W"], 4 / 3)
    p["fusion.w"] = np.array([0.0, 1.0, 0.0])
    model.load_parameters(p)
    nn.save_checkpoint(model, path)
    return path


def graded_images(path, unlabelled=False):
    samples = tuple(D.GradedSample(f"g{i}", np.full((3, SIZE, SIZE), (i % 5) / 4), i % 5) for i in range(15))
    D.save_dataset(D.Dataset(samples, "main"), path)
    if unlabelled:
        (path / "labels.csv").write_text("id_code\n" + "".join(s.id + "\n" for s in samples))
    return path


# -- help and parsing ------------------------------------------------------

@pytest.mark.parametrize("command", ["gen-data", "train", "evaluate", "predict"])
def test_help_lists_every_flag(command, capsys):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    with pytest.raises(SystemExit) as e:
        cli.main([command, "--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text, flag


def test_bad_arguments_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["train"])
    assert e.value.code == 2


# -- config validation -----------------------------------------------------

def test_missing_config_exit_2(tmp_path):
    assert run("gen-data", tmp_path / "none.yaml") == 2


def test_unknown_key_and_no_side_effects(tmp_path, capsys):
    cfg = write_config(tmp_path, ensemble={"tta": ["hflip"], "trimm": 0.1})
    assert run("gen-data", cfg) == 2
    assert "trimm" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_invalid_values_exit_2(tmp_path):
    for over in ({"ensemble": {"tta": ["cutout"]}}, {"ensemble": {"trim": 0.5}},
                 {"stages": {"posttrain": {"optimizer": "radam"}}},
                 {"stages": {"main": {}, "pretrain": {}}},
                 {"data": {"main": {"csv": {"labels": "missing.csv"}}}}):
        assert run("gen-data", write_config(tmp_path, **over)) == 2, over
    assert not (tmp_path / "out").exists()


# -- gen-data --------------------------------------------------------------

def test_gen_data_writes_both_domains(tmp_path):
    cfg = write_config(tmp_path)
    assert run("gen-data", cfg) == 0
    for tag in ("pretrain", "main"):
        d = tmp_path / "out" / "data" / tag
        assert (d / "labels.csv").exists() and (d / "manifest").exists()
        assert len(D.load_dataset_dir(d)) == 60


def test_gen_data_refuses_then_force(tmp_path):
    cfg = write_config(tmp_path)
    assert run("gen-data", cfg) == 0
    labels = tmp_path / "out" / "data" / "main" / "labels.csv"
    before = labels.read_bytes()
    labels.write_text("junk")
    assert run("gen-data", cfg) == 3
    assert labels.read_text() == "junk"
    assert run("gen-data", cfg, "--force") == 0
    assert labels.read_bytes() == before


def test_gen_data_same_seed_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    for d in (a, b):
        assert run("gen-data", write_config(d)) == 0
    for tag in ("pretrain", "main"):
        for f in ("manifest", "labels.csv", f"{tag}_07.png"):
            assert (a / "out/data" / tag / f).read_bytes() == (b / "out/data" / tag / f).read_bytes()


def test_seed_env_override(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    assert run("gen-data", cfg) == 0
    base = (tmp_path / "out/data/main/manifest").read_text()
    monkeypatch.setenv(SEED_ENV, "11")
    assert run("gen-data", cfg, "--force") == 0
    man = D.read_manifest(tmp_path / "out/data/main/manifest")
    assert man["seed"] == 12
    assert (tmp_path / "out/data/main/manifest").read_text() != base
    monkeypatch.setenv(SEED_ENV, "eleven")
    assert run("gen-data", cfg, "--force") == 2


# -- train -----------------------------------------------------------------

def test_train_without_data_exit_3(tmp_path):
    assert run("train", write_config(tmp_path)) == 3


def test_full_train_outputs(trained):
    tmp, _ = trained
    out = tmp / "out"
    names = sorted(p.name for p in (out / "checkpoints" / "desk").iterdir())
    assert names.count("stage_pretrain_fold_all.ckpt") == 1
    assert sum(n.startswith("stage_main_") for n in names) == 5
    assert sum(n.startswith("stage_posttrain_") for n in names) == 5
    for f in ("manifest.csv", "summary.txt", "split.json", "holdout_predictions.csv"):
        assert (out / f).exists(), f
    assert (out / "manifest.csv").read_text().startswith("epoch,stage,fold,train_loss,val_qwk,lr\n")


def test_train_single_fold(tmp_path):
    cfg = write_config(tmp_path)
    run("gen-data", cfg)
    assert run("train", cfg, "--fold", 0) == 0
    names = sorted(p.name for p in (tmp_path / "out/checkpoints/desk").iterdir())
    assert names == ["stage_main_fold_0.ckpt", "stage_posttrain_fold_0.ckpt", "stage_pretrain_fold_all.ckpt"]
    assert run("train", cfg, "--fold", 9) == 2


def test_train_rerun_identical_manifest(trained, tmp_path):
    tmp, _ = trained
    cfg = write_config(tmp_path)
    run("gen-data", cfg)
    assert run("train", cfg) == 0
    for f in ("manifest.csv", "holdout_predictions.csv", "split.json"):
        assert (tmp_path / "out" / f).read_bytes() == (tmp / "out" / f).read_bytes(), f


def test_training_failure_exit_4(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    run("gen-data", cfg)

    def boom(*a, **k):
        raise RuntimeError("fold 2: diverged")

    monkeypatch.setattr(cli, "run_cv", boom)
    assert run("train", cfg) == 4


# -- evaluate ------------------------------------------------------------

def test_evaluate_perfect_stub(tmp_path):
    cfg = write_config(tmp_path)
    stub = perfect_stub(tmp_path / "stub.ckpt")
    ds = graded_images(tmp_path / "graded")
    for mode in ("five_class", "binary"):
        assert run("evaluate", cfg, "--checkpoints", stub, "--dataset", ds, "--mode", mode,
                   "--out", f"reports_{mode}") == 0
        rows = list(csv.DictReader(open(tmp_path / "out" / f"reports_{mode}" / "reports.csv")))
        assert len(rows) == 1
        for key in ("qwk", "macro_f1", "accuracy", "sensitivity", "specificity"):
            assert float(rows[0][key]) == 1.0, (mode, key)
        assert rows[0]["mode"] == ("five_class" if mode == "five_class" else "binary_screening")


def test_evaluate_matches_metrics_module(trained):
    tmp, cfg = trained
    out = tmp / "out"
    assert run("evaluate", cfg, "--out", "rep") == 0
    assert run("predict", cfg, "--no-tta", "--out", "pred.csv") == 0
    main = D.load_dataset_dir(out / "data/main")
    preds = {r["id"]: int(r["grade"]) for r in csv.DictReader(open(out / "pred.csv"))}
    golden = metrics.report(main.grades, [preds[i] for i in main.ids])
    rows = {r["name"]: r for r in csv.DictReader(open(out / "rep" / "reports.csv"))}
    assert len(rows) == 6
    assert rows["ensemble"] == dict(zip(rows["ensemble"], golden.to_csv_row("ensemble").split(",")))
    assert sorted(p.name for p in (out / "rep").glob("*.txt"))[0] == "desk_stage_posttrain_fold_0.txt"


def test_evaluate_unlabelled_suggests_predict(tmp_path, capsys):
    cfg = write_config(tmp_path)
    ds = graded_images(tmp_path / "nolabels", unlabelled=True)
    assert run("evaluate", cfg, "--checkpoints", perfect_stub(tmp_path / "s.ckpt"), "--dataset", ds) == 3
    assert "predict" in capsys.readouterr().err


def test_evaluate_missing_checkpoint_exit_5(tmp_path, capsys):
    cfg = write_config(tmp_path)
    ds = graded_images(tmp_path / "graded")
    assert run("evaluate", cfg, "--checkpoints", tmp_path / "ghost.ckpt", "--dataset", ds) == 5
    assert "ghost.ckpt" in capsys.readouterr().err


# -- predict ---------------------------------------------------------------

def test_predict_rows_and_raw(trained):
    tmp, cfg = trained
    out = tmp / "out"
    assert run("predict", cfg, "--emit-raw", "--out", "raw.csv") == 0
    rows = list(csv.reader(open(out / "raw.csv")))
    assert len(rows) - 1 == 60
    assert len(rows[0]) == 3 + 5 * 2
    assert rows[0][3].startswith("raw_0[")


def test_predict_single_model_no_tta(trained):
    tmp, cfg = trained
    ckpt = tmp / "out/checkpoints/desk/stage_posttrain_fold_1.ckpt"
    assert run("predict", cfg, "--checkpoints", ckpt, "--no-tta", "--trim", 0, "--out", "one.csv") == 0
    images = D.load_images(tmp / "out/data/main")
    plain = predict_batch(nn.load_checkpoint(ckpt), images.images(), tta_set([]))[:, 0]
    rows = list(csv.DictReader(open(tmp / "out/one.csv")))
    assert [r["id"] for r in rows] == list(images.ids)
    assert [float(r["aggregated"]) for r in rows] == plain.tolist()


def test_predict_unlabelled_directory(trained, tmp_path):
    _, cfg = trained
    ds = graded_images(tmp_path / "nolabels", unlabelled=True)
    assert run("predict", cfg, "--dataset", ds, "--out", "unl.csv") == 0


def test_predict_output_confined(trained, tmp_path):
    _, cfg = trained
    assert run("predict", cfg, "--out", tmp_path / "escape.csv") == 2
    assert run("predict", cfg, "--out", "../escape.csv") == 2
    assert not (tmp_path / "escape.csv").exists()


def test_predict_without_checkpoints_exit_5(tmp_path):
    cfg = write_config(tmp_path)
    run("gen-data", cfg)
    assert run("predict", cfg) == 5
