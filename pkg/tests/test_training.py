import pytest
import torch

from iter_sgg import config as sgg_config
from iter_sgg import training, utils

from conftest import tiny_config_dict


def run(config, manifest, out_dir):
    return training.fit(config, manifest, out_dir, progress=False, device="cpu")


def epoch_records(path):
    return [r for r in utils.read_jsonl(path / "train_log.jsonl") if r["type"] == "epoch"]


def test_zero_epochs_writes_initial_state(tiny_dataset, tmp_path, monkeypatch):
    monkeypatch.delenv("ITER_SGG_SEED", raising=False)
    config = sgg_config.load_config(tiny_config_dict(training={"epochs": 0}))
    out = run(config, tiny_dataset, tmp_path)
    assert out["final_loss"] is None and out["best_metric"] is None
    assert out["best"].exists() and out["last"].exists()
    (header,) = utils.read_jsonl(tmp_path / "train_log.jsonl")
    assert header["type"] == "header"
    assert header["manifest_hash"] == tiny_dataset.hash
    assert header["config"] == config
    assert header["weights"]["w"] == [1.0] * tiny_dataset.world.upsilon
    _, _, metadata = utils.load_checkpoint(out["best"])
    assert metadata["epoch"] == 0


def test_training_is_deterministic(tiny_config, tiny_dataset, tmp_path):
    a = run(tiny_config, tiny_dataset, tmp_path / "a")
    b = run(tiny_config, tiny_dataset, tmp_path / "b")
    assert a["final_loss"] == pytest.approx(b["final_loss"], abs=1e-6)
    ra, rb = epoch_records(tmp_path / "a"), epoch_records(tmp_path / "b")
    assert [r["val"] for r in ra] == [r["val"] for r in rb]
    assert [r["loss"] for r in ra] == pytest.approx([r["loss"] for r in rb])
    state_a, _, _ = utils.load_checkpoint(a["last"])
    state_b, _, _ = utils.load_checkpoint(b["last"])
    for k in state_a:
        torch.testing.assert_close(state_a[k], state_b[k])


def test_epoch_records(tiny_config, tiny_dataset, tmp_path):
    out = run(tiny_config, tiny_dataset, tmp_path)
    (record,) = epoch_records(tmp_path)
    assert record["epoch"] == 1
    assert [v["step"] for v in record["val"]] == [1, 2]
    assert record["val"][-1]["model_size"] == 1.0
    assert record["loss"]["total"] == pytest.approx(out["final_loss"])
    assert "2/p/class" in record["loss"]
    assert out["best_metric"] == record["val"][-1]["hR"]["10"]
    _, _, metadata = utils.load_checkpoint(out["best"])
    assert metadata["manifest_hash"] == tiny_dataset.hash


def test_evaluate_and_truncate(tiny_config, tiny_dataset, tmp_path):
    out = run(tiny_config, tiny_dataset, tmp_path)
    model, config, _ = training.load_model(out["best"])
    reports = training.evaluate_model(model, config, tiny_dataset, split="test")
    assert [r.step for r in reports] == [1, 2]
    assert reports[0].model_size < reports[1].model_size == 1.0
    with pytest.raises(ValueError, match="out of range"):
        training.evaluate_model(model, config, tiny_dataset, steps=[3])

    path, size = training.truncate_checkpoint(out["best"], tmp_path / "short.safetensors", 1)
    assert size == pytest.approx(reports[0].model_size)
    short, short_config, metadata = training.load_model(path)
    assert short.num_steps == 1 and short_config["model"]["n_layers"] == 1
    assert metadata["model_size"] == pytest.approx(size)
    (short_report,) = training.evaluate_model(short, short_config, tiny_dataset, split="test")
    assert short_report.recall == reports[0].recall
    assert short_report.mean_recall == reports[0].mean_recall
    with pytest.raises(ValueError, match="cannot keep"):
        training.truncate_checkpoint(out["best"], tmp_path / "bad.safetensors", 3)


def test_freq_prior_report(tiny_config, tiny_dataset):
    report = training.freq_prior_report(tiny_config, tiny_dataset, split="test")
    assert report.ks == (5, 10)
    assert 0.0 <= report.recall[10] <= 1.0


def test_motif_fit(tiny_motif_config, tiny_dataset, tmp_path):
    out = run(tiny_motif_config, tiny_dataset, tmp_path)
    assert out["final_loss"] is not None
    model, config, _ = training.load_model(out["best"])
    reports = training.evaluate_model(model, config, tiny_dataset, split="val", top_m=2)
    assert [r.step for r in reports] == [1, 2]
