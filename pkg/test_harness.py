#!/usr/bin/env python3
"""Tests for run configs, dataset formats, checkpoints, the CLI and end-to-end pretraining."""

import csv
import json
import os
import sys

# Add repository root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest
import soundfile as sf

from ctxlearn.db import configure, list_runs
from ctxlearn.exceptions import ConfigError, DataError, DataFormatError, NumericFaultError, StructuralError
from ctxlearn.harness.ablate import recipe_cells, run_ablation, summarize
from ctxlearn.harness.checkpoint import (
    Checkpoint,
    collect_state,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    mask_layout,
    restore_state,
)
from ctxlearn.harness.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from ctxlearn.harness.datasets import (
    Dataset,
    ingest_dataset,
    load_vocabulary,
    read_image_file,
    read_labels,
    read_wav_dir,
    synthetic_images,
    tokenize,
    write_image_file,
)
from ctxlearn.harness.pretrain import FINAL_CHECKPOINT, METRICS_FILE, build_trainer, pretrain
from ctxlearn.harness.report import plot_metrics, read_metrics, summarize as summarize_metrics
from ctxlearn.harness.run_config import cli_overrides, validate_run_config, with_overrides
from ctxlearn.network import Modality
from ctxlearn.training import CSV_COLUMNS

TINY_IMAGE = {
    "modality": "image",
    "features": {"channels": 1, "image_size": [8, 8], "patch": 2},
    "backbone": {"depth": 2, "width": 8, "heads": 2},
    "decoder": {"depth": 1, "kernel": 3, "groups": 4, "width": 8},
    "train": {
        "num_masks": 2,
        "updates": 10,
        "batch_size": 4,
        "crop_padding": 2,
        "mask": {"mask_ratio": 0.5, "block_size": 4},
    },
    "dataset": {"size": 40, "classes": 4},
    "probe": {"epochs": 20},
}


@pytest.fixture(autouse=True)
def ledger(tmp_path):
    """Point the results ledger at a throwaway SQLite file."""
    configure(f"sqlite:///{tmp_path}/ledger.db")
    yield


def write_config(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def tiny_run(**overrides):
    run = validate_run_config(TINY_IMAGE)
    return with_overrides(run, overrides) if overrides else run


def csv_rows(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


# ---- run config ----

def test_presets_fill_modality_defaults():
    speech = validate_run_config({"modality": "speech"})
    assert speech.train.mask.mask_ratio == 0.5
    assert speech.train.num_masks == 8
    assert speech.features.rel_conv_kernel == 9
    assert speech.backbone.alibi
    assert not validate_run_config({"modality": "speech", "backbone": {"alibi": False}}).backbone.alibi
    text = validate_run_config({"modality": "text"})
    assert text.train.mask.mask_ratio == 0.42
    assert not text.backbone.alibi
    image = validate_run_config({"modality": "image", "train": {"num_masks": 2}})
    assert image.train.num_masks == 2
    assert image.train.mask.block_size == 9


def test_unknown_keys_are_rejected_with_location():
    with pytest.raises(ConfigError, match="train.bogus"):
        validate_run_config({"modality": "image", "train": {"bogus": 1}})
    with pytest.raises(ConfigError, match="modality"):
        validate_run_config({"modality": "video"})
    with pytest.raises(ConfigError):
        validate_run_config({"modality": "text", "train": {"loss": "ctx+pixel"}})
    with pytest.raises(ConfigError):
        validate_run_config({"modality": "image", "train": {"top_k": 9}})


def test_cli_overrides():
    assert cli_overrides(seed=3, subsample_ratio=0.5) == {"seed": 3, "dataset": {"subsample_ratio": 0.5}}
    assert cli_overrides() == {}


# ---- datasets ----

def test_image_file_round_trip_and_corruption(tmp_path):
    pixels, _ = synthetic_images(5, 1, (8, 8), 4, seed=0)
    path = tmp_path / "images.bin"
    write_image_file(path, pixels)
    np.testing.assert_array_equal(read_image_file(path), pixels)

    data = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-7])
    with pytest.raises(DataFormatError) as info:
        read_image_file(tmp_path / "short.bin")
    assert info.value.offset == len(data) - 7

    (tmp_path / "magic.bin").write_bytes(b"NOTMAGIC" + data[8:])
    with pytest.raises(DataFormatError) as info:
        read_image_file(tmp_path / "magic.bin")
    assert info.value.offset == 0

    (tmp_path / "long.bin").write_bytes(data + b"\x00")
    with pytest.raises(DataFormatError):
        read_image_file(tmp_path / "long.bin")


def test_synthetic_labels_are_balanced():
    _, labels = synthetic_images(40, 1, (8, 8), 4, seed=0)
    assert np.bincount(labels).tolist() == [10, 10, 10, 10]
    with pytest.raises(ConfigError):
        synthetic_images(4, 1, (8, 8), 11, seed=0)


def test_label_file_errors(tmp_path):
    path = tmp_path / "labels.txt"
    path.write_text("0\n1\n7\n")
    with pytest.raises(DataError, match="line 3"):
        read_labels(path, classes=4)
    path.write_text("0\ncat\n")
    with pytest.raises(DataError, match="line 2"):
        read_labels(path)
    path.write_text("0\n1\n")
    with pytest.raises(DataError):
        read_labels(path, count=3)
    assert read_labels(path, count=2, classes=2).tolist() == [0, 1]


def test_vocabulary_and_tokenizer(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("<pad>\n<unk>\na\na\n")
    with pytest.raises(DataError, match="line 4"):
        load_vocabulary(path)
    path.write_text("")
    with pytest.raises(DataError):
        load_vocabulary(path)

    index = {"<pad>": 0, "<unk>": 1, "a": 2, "b": 3}
    assert tokenize("abz", index, "char", 5).tolist() == [2, 3, 1, 0, 0]
    assert tokenize("a b a", index, "whitespace", 2).tolist() == [2, 3]


def test_text_file_ingestion(tmp_path):
    (tmp_path / "vocab.txt").write_text("<pad>\n<unk>\nh\ni\n")
    (tmp_path / "corpus.txt").write_text("hi\n\nih!\n")
    (tmp_path / "labels.txt").write_text("0\n1\n")
    run = validate_run_config({
        "modality": "text",
        "dataset": {
            "source": "file",
            "path": str(tmp_path / "corpus.txt"),
            "vocab_path": str(tmp_path / "vocab.txt"),
            "labels_path": str(tmp_path / "labels.txt"),
            "classes": 2,
            "seq_len": 4,
        },
    })
    dataset = ingest_dataset(run.dataset, run.modality, run.seed, run.features)
    assert dataset.inputs.tolist() == [[2, 3, 0, 0], [3, 2, 1, 0]]
    assert dataset.labels.tolist() == [0, 1]
    assert len(dataset.vocab) == 4


def test_wav_directory(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("b.wav", "a.wav"):
        sf.write(str(tmp_path / name), rng.uniform(-0.5, 0.5, size=300), 16000, subtype="PCM_16")
    waves, names = read_wav_dir(tmp_path, samples=400)
    assert names == ["a.wav", "b.wav"]
    assert waves.shape == (2, 400)

    sf.write(str(tmp_path / "c.wav"), rng.uniform(-0.5, 0.5, size=300), 16000, subtype="FLOAT")
    with pytest.raises(DataFormatError):
        read_wav_dir(tmp_path, samples=400)


def test_subsample_and_split_are_deterministic():
    dataset = Dataset(Modality.IMAGE, np.arange(40.0).reshape(40, 1), np.arange(40) % 4, 4)
    small = dataset.subsample(0.25, seed=1)
    assert len(small) == 10
    np.testing.assert_array_equal(small.inputs, dataset.subsample(0.25, seed=1).inputs)
    train, held = dataset.split(0.1, seed=1)
    assert (len(train), len(held)) == (36, 4)
    assert not set(train.inputs[:, 0]) & set(held.inputs[:, 0])


def test_missing_dataset_path():
    run = validate_run_config({"modality": "image", "dataset": {"source": "file", "path": "/nonexistent/images.bin"}})
    with pytest.raises(DataError):
        ingest_dataset(run.dataset, run.modality, run.seed, run.features)


# ---- checkpoints ----

def test_checkpoint_reencodes_byte_for_byte():
    checkpoint = Checkpoint(
        5,
        {"student.b": np.arange(3, dtype=np.int64), "student.a": np.ones((2, 2)), "masks.0": np.zeros((2, 1), np.uint8)},
        {"run": {"seed": 1}, "mask_layout": [4, 4]},
        optim_step=5,
    )
    data = encode_checkpoint(checkpoint)
    decoded = decode_checkpoint(data)
    assert encode_checkpoint(decoded) == data
    assert list(decoded.group("student.")) == ["a", "b"]
    assert decoded.step == 5 and decoded.optim_step == 5
    assert mask_layout(decoded).shape == (4, 4)


def test_checkpoint_corruption_reports_offsets():
    data = encode_checkpoint(Checkpoint(1, {"x": np.ones(4)}))
    with pytest.raises(DataFormatError) as info:
        decode_checkpoint(data[:-1])
    assert info.value.offset == len(data) - 1
    with pytest.raises(DataFormatError) as info:
        decode_checkpoint(b"XXXXXXXX" + data[8:])
    assert info.value.offset == 0
    with pytest.raises(DataFormatError):
        decode_checkpoint(data + b"\x00")


def test_restore_into_a_different_model_fails():
    trainer = build_trainer(tiny_run(), strict=True)
    other = build_trainer(tiny_run(backbone={"depth": 1}), strict=True)
    with pytest.raises(StructuralError):
        restore_state(other, collect_state(trainer, 0))


# ---- end to end ----

def test_pretrain_smoke_run(tmp_path):
    result = pretrain(tiny_run(), out=tmp_path / "run", strict=True)
    rows = csv_rows(result.metrics)
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 11
    assert [int(r[0]) for r in rows[1:]] == list(range(10))
    counts = {tuple(r[7:10]) for r in rows[1:]}
    assert counts == {("1", "1", "2")}
    assert all(float(r[-1]) == 0.0 for r in rows[1:])
    assert np.isfinite(result.eval_loss)
    assert (tmp_path / "run" / FINAL_CHECKPOINT).is_file()

    runs = list_runs()
    assert runs[0]["kind"].value == "pretrain"
    assert runs[0]["updates"] == 10


def test_pretrain_with_cls_loss(tmp_path):
    run = tiny_run(train={"updates": 2, "loss": "ctx+cls"}, features={"cls_token": True})
    result = pretrain(run, out=tmp_path / "cls", strict=True, record=False)
    rows = csv_rows(result.metrics)
    cls_column = CSV_COLUMNS.index("cls_loss")
    assert len(rows) == 3
    assert all(float(r[cls_column]) > 0.0 for r in rows[1:])
    assert np.isfinite(result.eval_loss)


def test_strict_resume_matches_unbroken_run(tmp_path):
    run = tiny_run(train={"updates": 6, "checkpoint_every": 3})
    whole = pretrain(run, out=tmp_path / "whole", strict=True, record=False)
    resumed = pretrain(run, out=tmp_path / "resumed", resume=tmp_path / "whole" / "step000003.ckpt",
                       strict=True, record=False)

    whole_rows = csv_rows(whole.metrics)
    resumed_rows = csv_rows(resumed.metrics)
    assert resumed_rows[0] == whole_rows[0]
    assert resumed_rows[1:] == whole_rows[4:]
    assert (tmp_path / "resumed" / FINAL_CHECKPOINT).read_bytes() == (tmp_path / "whole" / FINAL_CHECKPOINT).read_bytes()
    assert resumed.eval_loss == whole.eval_loss


def test_resume_in_place_keeps_steps_increasing(tmp_path):
    run = tiny_run(train={"updates": 6, "checkpoint_every": 3})
    whole_rows = csv_rows(pretrain(run, out=tmp_path / "run", strict=True, record=False).metrics)

    again = pretrain(run, out=tmp_path / "run", resume=tmp_path / "run" / "step000003.ckpt",
                     strict=True, record=False)
    rows = csv_rows(again.metrics)
    assert [int(r[0]) for r in rows[1:]] == list(range(6))
    assert rows == whole_rows


def test_restore_brings_back_the_last_mask_plans(tmp_path):
    run = tiny_run(train={"updates": 3, "checkpoint_every": 3})
    pretrain(run, out=tmp_path / "run", strict=True, record=False)
    saved = load_checkpoint(tmp_path / "run" / "step000003.ckpt")
    assert mask_layout(saved).shape == (4, 4)

    trainer = build_trainer(run, strict=True)
    assert restore_state(trainer, saved) == 3
    assert len(trainer.last_plans) == 2
    assert all(len(plans) == 4 for plans in trainer.last_plans)
    again = collect_state(trainer, 3)
    assert list(again.group("masks.")) == list(saved.group("masks."))
    for name, packed in saved.group("masks.").items():
        np.testing.assert_array_equal(again.group("masks.")[name], packed)


def test_cli_pretrain_probe_and_report(tmp_path):
    config = write_config(tmp_path, TINY_IMAGE)
    out = tmp_path / "cli"
    assert main(["pretrain", "--config", str(config), "--out", str(out), "--strict"]) == EXIT_OK
    assert len(csv_rows(out / METRICS_FILE)) == 11

    probe_out = tmp_path / "probe"
    assert main(["probe", "--checkpoint", str(out / FINAL_CHECKPOINT), "--out", str(probe_out)]) == EXIT_OK
    probe = json.loads((probe_out / "probe.json").read_text())
    assert 0.0 <= probe["accuracy"] <= 1.0
    assert probe["num_classes"] == 4

    assert main(["report", "--csv", str(out / METRICS_FILE), "--out", str(tmp_path / "plots")]) == EXIT_OK
    assert sorted(p.name for p in (tmp_path / "plots").iterdir()) == ["flops.png", "loss.png", "schedule.png"]
    assert main(["report", "--ledger"]) == EXIT_OK
    kinds = {row["kind"].value for row in list_runs()}
    assert kinds == {"pretrain", "probe"}


def test_cli_exit_codes(tmp_path):
    assert main(["pretrain", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG

    (tmp_path / "broken.json").write_text("{not json")
    assert main(["pretrain", "--config", str(tmp_path / "broken.json")]) == EXIT_CONFIG

    unknown = write_config(tmp_path, {"modality": "image", "bogus": True}, "unknown.json")
    assert main(["pretrain", "--config", str(unknown)]) == EXIT_CONFIG

    missing_data = write_config(
        tmp_path, {"modality": "image", "dataset": {"source": "file", "path": str(tmp_path / "none.bin")}}, "data.json"
    )
    assert main(["pretrain", "--config", str(missing_data), "--out", str(tmp_path / "o")]) == EXIT_DATA

    assert main(["probe", "--checkpoint", str(tmp_path / "none.ckpt")]) == EXIT_DATA
    assert main(["ablate", "bogus", "--config", str(write_config(tmp_path, TINY_IMAGE))]) == EXIT_CONFIG

    assert NumericFaultError("loss at step 0").exit_code == EXIT_NUMERIC
    assert DataFormatError("bad", offset=4).exit_code == EXIT_DATA


# ---- ablations and reports ----

def test_recipe_cells():
    run = tiny_run()
    multimask = dict(recipe_cells("multimask", run))
    assert len(multimask) == 20
    assert multimask["M=16,bsz=64"] == {"train": {"num_masks": 16, "batch_size": 64}}
    assert multimask["M=2,bsz=64"] == {"train": {"num_masks": 2, "batch_size": 64}}
    assert [label for label, _ in recipe_cells("masking", run)][-2:] == ["block", "random"]
    with pytest.raises(ConfigError, match="multimask"):
        recipe_cells("bogus", run)
    with pytest.raises(ConfigError):
        recipe_cells("losses", validate_run_config({"modality": "text"}))


def test_alibi_ablation_writes_a_table(tmp_path):
    run = tiny_run(train={"updates": 2})
    rows = run_ablation("alibi", run, seeds=[0, 1], out_dir=tmp_path, strict=True)
    assert len(rows) == 6
    table = csv_rows(tmp_path / "ablation_alibi.csv")
    assert table[0] == ["recipe", "cell", "seed", "final_eval_loss", "probe_accuracy"]
    assert len(table) == 7
    summary = summarize(rows)
    assert set(summary) == {"alibi off", "alibi learned scalars", "alibi frozen scalars"}
    assert all(entry["seeds"] == 2 for entry in summary.values())


def test_report_reads_only_well_formed_csvs(tmp_path):
    result = pretrain(tiny_run(train={"updates": 3}), out=tmp_path / "run", strict=True, record=False)
    metrics = read_metrics(result.metrics)
    summary = summarize_metrics(metrics, window=2)
    assert summary["steps"] == 3
    assert summary["student_forwards"] == 2.0
    assert len(plot_metrics(result.metrics, tmp_path / "plots")) == 3

    bad = tmp_path / "bad.csv"
    bad.write_text("step,loss\n0,1.0\n")
    with pytest.raises(DataFormatError):
        read_metrics(bad)
