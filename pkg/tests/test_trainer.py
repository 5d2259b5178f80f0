import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from mtaffect.checkpoint import load_checkpoint
from mtaffect.data import Dataset
from mtaffect.fusion import FusionEnsemble
from mtaffect.pipeline import PostProcessing
from mtaffect.tensor import Tensor, backward
from mtaffect.trainer import (PRESETS, Adam, ConfigError, TrainConfig, TrainingDiverged, calibrate_ensemble,
                              clip_global_norm, dataset_sequences, evaluate, gather_batch, predict, sequence_loss,
                              train, write_predictions)

from conftest import tiny_model

FAST = TrainConfig(learning_rate=1e-3, batch_size=4, seq_len=4, epochs=2, eval_train=False)


def test_gather_batch_is_time_major(tiny_ds):
    seqs = dataset_sequences(tiny_ds, "train", 4)[:3]
    frames, lms = gather_batch(tiny_ds, seqs)
    assert frames.shape == (4, 3, 16, 16, 1) and lms.shape == (4, 3, 136)
    np.testing.assert_array_equal(frames[:, 1], tiny_ds.model_inputs()[0][seqs[1].frame_indices])


def test_zero_learning_rate_leaves_parameters_unchanged(tiny_ds):
    m = tiny_model()
    before = m.state_dict()
    train(m, tiny_ds, replace(FAST, learning_rate=0.0))
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_freeze_backbone_keeps_backbone_bits(tiny_ds):
    m = tiny_model()
    before = m.state_dict()
    train(m, tiny_ds, replace(FAST, freeze_backbone=True, epochs=1))
    after = m.state_dict()
    backbone = {p.name for p in m.backbone_parameters()}
    assert all(np.array_equal(after[k], before[k]) for k in backbone)
    assert any(not np.array_equal(after[k], before[k]) for k in after if k not in backbone)


def test_adam_step_matches_hand_update():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    g = np.array([0.5, -0.25])
    opt.step([g.copy()])
    # first bias-corrected step moves each entry by lr * sign(g) (up to eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)
    opt.step([g.copy()])
    np.testing.assert_allclose(p.data, [0.8, -1.8], atol=1e-7)


def test_clip_global_norm():
    grads = [np.array([3.0, 0.0]), np.array([[4.0]])]
    assert clip_global_norm(grads, None) == 5.0
    norm = clip_global_norm(grads, 1.0)
    assert norm == 5.0
    assert np.sqrt(sum(np.sum(g ** 2) for g in grads)) == pytest.approx(1.0)


def test_training_descends_on_a_fixed_batch(tiny_ds):
    m = tiny_model()
    seqs = dataset_sequences(tiny_ds, "train", 4)[:8]
    params = m.parameters()
    opt = Adam(params, 3e-3)
    first = float(sequence_loss(m, tiny_ds, seqs).data)
    for _ in range(30):
        opt.step(backward(sequence_loss(m, tiny_ds, seqs), params))
    assert float(sequence_loss(m, tiny_ds, seqs).data) < first - 0.2


def test_training_is_deterministic(tiny_ds):
    runs = []
    for _ in range(2):
        m = tiny_model(seed=4)
        res = train(m, tiny_ds, replace(FAST, seed=9, dropout_dense=0.3, dropout_rnn=0.3))
        runs.append((m.state_dict(), res.log))
    assert runs[0][1] == runs[1][1]
    for k in runs[0][0]:
        np.testing.assert_array_equal(runs[0][0][k], runs[1][0][k])


def test_best_epoch_is_restored(tiny_ds, tmp_path):
    m = tiny_model()
    res = train(m, tiny_ds, replace(FAST, epochs=3), out_dir=tmp_path)
    assert res.best_val_ccc == max(r["val_mean_ccc"] for r in res.log)
    assert res.log[res.best_epoch - 1]["val_mean_ccc"] == res.best_val_ccc
    ckpt = load_checkpoint(tmp_path / "best.ckpt")
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(ckpt[k], v)
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert len(rows) == 3 and float(rows[0]["train_loss"]) == res.log[0]["train_loss"]
    assert json.loads((tmp_path / "report.json").read_text())["best_epoch"] == res.best_epoch
    assert TrainConfig(**json.loads((tmp_path / "config.json").read_text())) == replace(FAST, epochs=3)


def test_max_steps_stops_early(tiny_ds):
    res = train(tiny_model(), tiny_ds, replace(FAST, epochs=50, max_steps=3))
    assert res.steps == 3 and len(res.log) == 1


def test_divergence_is_reported(tiny_ds):
    m = tiny_model()
    m.params["head/out/weights"].data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="non-finite loss"):
        train(m, tiny_ds, FAST)


def test_config_validation():
    with pytest.raises(ConfigError) as err:
        TrainConfig.from_dict({"learning_rat": 0.1})
    assert err.value.key == "train.learning_rat"
    with pytest.raises(ConfigError) as err:
        TrainConfig.from_dict({"learning_rate": -1.0})
    assert err.value.key == "train.learning_rate"
    for bad in ({"batch_size": 0}, {"dropout_rnn": 1.0}, {"reduction": "mode"}, {"clip_norm": 0.0}):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(bad)
    assert PRESETS["full-scale"].seq_len == 80 and PRESETS["full-scale"].batch_size == 4
    assert PRESETS["full-scale"].dropout_dense == 0.5 and PRESETS["full-scale"].dropout_rnn == 0.8


def test_seq_len_mismatch_is_a_config_error(tiny_ds):
    with pytest.raises(ConfigError):
        train(tiny_model(seq_len=5), tiny_ds, FAST)


class _ScriptedModel:
    """Reads a frame index encoded in pixel (0, 0) and answers from a lookup table."""

    seq_len = 4

    def __init__(self, table):
        self.table = table

    def forward(self, frames, landmarks, training=False, rng=None, dropout=(0.0, 0.0)):
        idx = np.rint((frames[..., 0, 0, 0] + 1.0) / 2.0 * 4096).astype(int)
        return Tensor(self.table[idx])


def _indexed(ds):
    frames = np.array(ds.frames, dtype=np.float32)
    frames[:, 0, 0, 0] = np.arange(len(frames)) / 4096
    return Dataset(frames, ds.landmarks, ds.utterances, ds.splits, ds.extent, ds.channels, ds.aligned, ds.spec)


def _label_table(ds):
    table = np.zeros((len(ds.frames), 2))
    for u in ds.utterances:
        table[u.start:u.stop] = u.label
    return table


def test_oracle_model_scores_perfectly(tiny_ds):
    ds = _indexed(tiny_ds)
    ev = evaluate(_ScriptedModel(_label_table(ds)), ds, "all", mode="off")
    assert ev.raw.ccc_v == pytest.approx(1.0, abs=1e-7) and ev.raw.ccc_a == pytest.approx(1.0, abs=1e-7)
    assert ev.raw.mse_v == 0.0 and ev.raw.mse_a == 0.0


def test_constant_model_scores_zero(tiny_ds):
    ds = _indexed(tiny_ds)
    ev = evaluate(_ScriptedModel(np.full((len(ds.frames), 2), 0.3)), ds, "all", mode="off")
    assert ev.raw.ccc_v == 0.0 and ev.raw.ccc_a == 0.0


def test_evaluate_reports_both_columns_and_is_repeatable(tiny_ds):
    m = tiny_model()
    post = PostProcessing("median", 3, 3, 8, 0.5)
    a = evaluate(m, tiny_ds, "validation", post, mode="on")
    b = evaluate(m, tiny_ds, "validation", post, mode="on")
    assert a.to_dict() == b.to_dict()
    assert set(a.table_row()) == {"valence", "arousal", "mean"}
    assert "(" in a.table_row()["valence"]
    off = evaluate(m, tiny_ds, "validation", post, mode="off")
    assert off.raw.to_dict() == off.post.to_dict() == a.raw.to_dict()
    gated = evaluate(m, tiny_ds, "test", post, mode="auto-gate", gate_split="validation")
    assert gated.gate_log and gated.post_processing["mode"] == "auto-gate"
    with pytest.raises(ValueError):
        evaluate(m, tiny_ds, "validation", mode="sometimes")


def test_decision_ensemble_evaluation(tiny_ds):
    ds = _indexed(tiny_ds)
    good, const = _ScriptedModel(_label_table(ds)), _ScriptedModel(np.full((len(ds.frames), 2), 0.3))
    ens = FusionEnsemble.__new__(FusionEnsemble)
    ens.members, ens.head, ens.weights = [good, const], "none", None
    w = calibrate_ensemble(ens, ds, "all")
    np.testing.assert_allclose(w[0], [1.0, 1.0], atol=1e-7)
    assert np.all(w[1] == 0.0)
    ev = evaluate(ens, ds, "all", mode="off")
    assert ev.raw.ccc_v == pytest.approx(1.0, abs=1e-7)


def test_predict_and_write_predictions(tiny_ds, tmp_path):
    m = tiny_model()
    track = predict(m, tiny_ds, "validation", batch_size=2)
    assert len(track.sequences) == len(dataset_sequences(tiny_ds, "validation", 4))
    ev = evaluate(m, tiny_ds, "validation", mode="off")
    write_predictions(tmp_path / "p.csv", ev.estimates)
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["video_id", "utterance_id", "O_v", "O_a"]
    assert len(rows) == 1 + len(tiny_ds.split("validation"))
