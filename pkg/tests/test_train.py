import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastadd import model as mdl
from fastadd import numerics as nx
from fastadd import train as tr
from fastadd.errors import ConfigError, DivergenceError, InputError, ShapeError
from fastadd.model import FastformerConfig

TINY = FastformerConfig(num_layers=1, heads=2, head_dim=4, vocab_size=6, max_len=16, num_classes=6, dropout=0.1)
QUICK = tr.TrainConfig(steps=12, batch=8, eval_every=4, seq_len=12, num_examples=200)


def test_cross_entropy_gradient_matches_finite_differences():
    z = np.array([0.3, -1.2, 2.0, 0.1])
    loss, g = tr.cross_entropy(z, 2)
    np.testing.assert_allclose(g, nx.finite_diff_grad(lambda v: tr.cross_entropy(v, 2)[0], z), atol=1e-8)
    assert loss == pytest.approx(-np.log(np.exp(2.0) / np.exp(z).sum()))


def test_batch_cross_entropy_is_mean_of_rows():
    logits = np.random.default_rng(0).normal(size=(5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    loss, g = tr.batch_cross_entropy(logits, labels)
    rows = [tr.cross_entropy(logits[i], labels[i]) for i in range(5)]
    assert loss == pytest.approx(np.mean([r[0] for r in rows]))
    np.testing.assert_allclose(g, np.stack([r[1] for r in rows]) / 5)


def test_cross_entropy_label_range():
    with pytest.raises(InputError):
        tr.cross_entropy(np.zeros(3), 3)
    with pytest.raises(InputError):
        tr.batch_cross_entropy(np.zeros((2, 3)), [0, 5])


def test_adam_first_step_moves_by_lr_times_sign():
    p = {"w": np.array([1.0, -1.0, 0.5])}
    tr.adam_step(p, {"w": np.array([0.3, -2.0, 1e-3])}, tr.AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"], [0.99, -0.99, 0.49], atol=1e-6)


def test_adam_matches_hand_written_recurrence():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=4)}
    ref, m, v = p["w"].copy(), np.zeros(4), np.zeros(4)
    state = tr.AdamState()
    for t in range(1, 6):
        g = rng.normal(size=4)
        tr.adam_step(p, {"w": g}, state, lr=0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-12)


def test_adam_zero_gradient_from_fresh_state_is_identity():
    p = {"w": np.array([1.0, 2.0]), "b": np.array([3.0])}
    tr.adam_step(p, {"w": np.zeros(2)}, tr.AdamState())
    np.testing.assert_array_equal(p["w"], [1.0, 2.0])
    np.testing.assert_array_equal(p["b"], [3.0])


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        tr.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, tr.AdamState())


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20), n=st.integers(3, 40), vocab=st.integers(3, 12))
def test_probe_key_recurs_exactly_once(seed, n, vocab):
    data = tr.gen_probe(seed, 4, n, vocab)
    for seq, label in zip(data.sequences, data.labels):
        later = np.flatnonzero(seq[1:] == seq[0]) + 1
        assert later.size == 1
        assert seq[later[0] + 1] == label


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20), n=st.integers(1, 40), vocab=st.integers(2, 12))
def test_majority_labels_are_majorities(seed, n, vocab):
    data = tr.gen_majority(seed, 5, n, vocab)
    for seq, label in zip(data.sequences, data.labels):
        counts = np.bincount(seq, minlength=vocab)
        assert counts[label] == counts.max()
        assert label == np.flatnonzero(counts == counts.max())[0]


def test_tasks_deterministic():
    a = tr.make_task("majority", 3, 10, 8, 5)
    b = tr.make_task("majority", 3, 10, 8, 5)
    np.testing.assert_array_equal(a.sequences, b.sequences)
    with pytest.raises(ConfigError):
        tr.make_task("copy", 0, 1, 1, 1)


def test_train_and_val_streams_differ():
    train, val = tr.split_task("majority", 0, 100, 8, 5)
    assert len(train) == 90 and len(val) == 10
    assert not np.array_equal(train.sequences[:10], val.sequences)


def test_train_loop_writes_artifacts(tmp_path):
    result = tr.train_loop(TINY, QUICK, out_dir=tmp_path)
    assert [row["step"] for row in result.history] == [4, 8, 12]
    lines = result.metrics_csv.read_text().splitlines()
    assert lines[0] == "step,loss,val_accuracy" and len(lines) == 4
    loaded = mdl.load_checkpoint(result.checkpoint, TINY)
    for name, arr in result.model.params.items():
        assert loaded.params[name].tobytes() == arr.tobytes()


def test_train_loop_is_deterministic():
    a = tr.train_loop(TINY, QUICK)
    b = tr.train_loop(TINY, QUICK)
    for name in a.model.params:
        assert a.model.params[name].tobytes() == b.model.params[name].tobytes()
    assert a.history == b.history


def test_train_loop_reduces_loss():
    result = tr.train_loop(TINY, dataclasses.replace(QUICK, steps=60, eval_every=20, lr=3e-3))
    assert result.history[-1]["loss"] < result.history[0]["loss"]


def test_train_loop_divergence_reports_last_finite_step(monkeypatch):
    real = tr.batch_cross_entropy
    calls = {"n": 0}

    def flaky(logits, labels):
        calls["n"] += 1
        loss, g = real(logits, labels)
        return (float("nan"), g) if calls["n"] == 3 else (loss, g)

    monkeypatch.setattr(tr, "batch_cross_entropy", flaky)
    with pytest.raises(DivergenceError) as err:
        tr.train_loop(TINY, QUICK)
    assert err.value.last_finite_step == 2


@pytest.mark.parametrize(
    "cfg, train",
    [
        (dataclasses.replace(TINY, num_classes=2), QUICK),
        (TINY, dataclasses.replace(QUICK, seq_len=64)),
        (TINY, dataclasses.replace(QUICK, steps=0)),
        (TINY, dataclasses.replace(QUICK, task="copy")),
    ],
)
def test_train_loop_config_errors(cfg, train):
    with pytest.raises(ConfigError):
        tr.train_loop(cfg, train)


def test_relative_error_floor():
    assert tr.relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(1e-3)
    assert tr.relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


@pytest.mark.parametrize("backbone", ["fastformer", "vanilla"])
def test_grad_check_small_model(backbone):
    cfg = dataclasses.replace(TINY, backbone=backbone, num_layers=2, share_layers=False)
    report = tr.grad_check(cfg, max_scalars=1500)
    assert report.max_rel_error < 1e-4
    assert report.checked_scalars == 1500 < report.total_scalars


def test_grad_check_catches_a_wrong_gradient(monkeypatch):
    real = mdl.backward

    def broken(model, cache, d_logits, freeze_embeddings=False):
        grads = real(model, cache, d_logits, freeze_embeddings)
        grads["classifier.W"] = grads["classifier.W"] * 1.01
        return grads

    monkeypatch.setattr(mdl, "backward", broken)
    report = tr.grad_check(TINY, max_scalars=500)
    assert report.per_param["classifier.W"] > 5e-3


def test_uniform_logits_cost_log_classes():
    loss, g = tr.cross_entropy(np.zeros(4), 1)
    assert loss == pytest.approx(np.log(4.0))
    np.testing.assert_allclose(g, [0.25, -0.75, 0.25, 0.25])


def test_confident_correct_logit_costs_nothing():
    loss, g = tr.cross_entropy(np.array([0.0, 50.0, 0.0]), 1)
    assert loss == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_allclose(g, 0.0, atol=1e-20)


def test_cross_entropy_random_five_class_gradient():
    z = np.random.default_rng(11).normal(size=5)
    _, g = tr.cross_entropy(z, 4)
    np.testing.assert_allclose(g, nx.finite_diff_grad(lambda v: tr.cross_entropy(v, 4)[0], z), atol=1e-8)


def test_adam_first_step_size_is_lr_for_any_gradient_scale():
    params = {"w": np.array([1.0])}
    state = tr.AdamState()
    tr.adam_step(params, {"w": np.array([2.0])}, state, lr=1e-3)
    assert params["w"][0] == pytest.approx(1.0 - 1e-3, abs=1e-9)
    assert state.t == 1
    tr.adam_step(params, {"w": np.array([2.0])}, state, lr=1e-3)
    assert state.t == 2


@pytest.mark.parametrize("seq, label", [([3, 3, 3, 3], 3), ([1, 2, 1, 2], 1), ([0, 4, 2, 4, 2], 2)])
def test_majority_label_examples(seq, label):
    assert tr.majority_label(seq) == label


def test_zero_learning_rate_keeps_loss_constant():
    result = tr.train_loop(TINY, dataclasses.replace(QUICK, lr=0.0))
    losses = [row["loss"] for row in result.history]
    assert max(losses) == min(losses)


def test_grad_check_all_zero_parameters():
    cfg = dataclasses.replace(TINY, dropout=0.0, precision="f64")
    m = mdl.build_model(cfg)
    for p in m.params.values():
        p[...] = 0
    report = tr.grad_check(cfg, model=m)
    assert report.max_rel_error < 1e-4


@pytest.mark.parametrize("interaction", ["add", "concat_project"])
def test_grad_check_other_interactions(interaction):
    cfg = dataclasses.replace(TINY, interaction=interaction, num_layers=2, share_layers=False)
    assert tr.grad_check(cfg, max_scalars=1500).max_rel_error < 1e-4
