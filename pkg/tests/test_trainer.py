import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from csasn.checkpoint import (CheckpointError, LOG_VAR_KEY, load_checkpoint, read_tensors, save_checkpoint,
                              state_dict, write_tensors)
from csasn.data import generate_synthetic
from csasn.loss import LossConfig, UncertaintyState
from csasn.metrics import auc_mann_whitney, binary_metrics, roc_points, task_report, trapezoid_auc
from csasn.model import CSASN
from csasn.tensor import Tensor
from csasn.trainer import (AdamState, TrainConfig, TrainingDiverged, clip_grad_norm, cosine_lr, evaluate, fit,
                           global_norm, optimizer_step, run_ablation, stratified_batches)


def adam_once(x0, g, lr, wd=0.0):
    p = [Tensor(np.array(x0, dtype=np.float64))]
    state = AdamState.zeros_like(p)
    optimizer_step(p, [np.array(g, dtype=np.float64)], state, TrainConfig(weight_decay=wd), lr)
    return p[0].data, state


def test_adam_hand_trace_on_square():
    x, state = adam_once([1.0], [2.0], lr=0.1)                # d/dx x^2 at 1
    # m = 0.2, v = 0.004; bias-corrected m_hat = 2, v_hat = 4
    assert x[0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), abs=1e-15)
    assert state.m[0][0] == pytest.approx(0.2) and state.v[0][0] == pytest.approx(0.004) and state.t == 1


def test_adam_degenerate_steps():
    x, _ = adam_once([1.5, -2.0], [0.0, 0.0], lr=0.1)
    np.testing.assert_array_equal(x, [1.5, -2.0])
    x, _ = adam_once([1.5, -2.0], [0.0, 0.0], lr=0.1, wd=0.01)
    np.testing.assert_allclose(x, np.array([1.5, -2.0]) * (1 - 0.1 * 0.01), rtol=1e-15)
    p = [Tensor(np.ones(2)), Tensor(np.ones(2))]
    optimizer_step(p, [np.zeros(2)] * 2, AdamState.zeros_like(p), TrainConfig(weight_decay=0.5), 0.1, [True, False])
    np.testing.assert_array_equal(p[1].data, [1.0, 1.0])
    np.testing.assert_allclose(p[0].data, [0.95, 0.95])
    with pytest.raises(ValueError):
        optimizer_step(p, [np.zeros(3), np.zeros(2)], AdamState.zeros_like(p), TrainConfig(), 0.1)
    with pytest.raises(ValueError):
        optimizer_step(p, [np.zeros(2)], AdamState.zeros_like(p), TrainConfig(), 0.1)


def test_adam_second_step_trace():
    p = [Tensor(np.array([1.0]))]
    state = AdamState.zeros_like(p)
    cfg = TrainConfig(weight_decay=0.0)
    lr = 0.1
    x = 1.0
    m = v = 0.0
    for t in (1, 2):
        g = 2 * x
        optimizer_step(p, [np.array([g])], state, cfg, lr)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p[0].data[0] == pytest.approx(x, abs=1e-15)


def test_train_config_validation():
    for bad in (dict(lr0=0), dict(clip_norm=0), dict(epochs=0), dict(batch_size=1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_cosine_lr_examples():
    assert cosine_lr(0, 10, 1e-3) == 1e-3
    assert cosine_lr(10, 10, 1e-3, 1e-5) == pytest.approx(1e-5, abs=1e-18)
    assert cosine_lr(5, 10, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, abs=1e-18)
    assert cosine_lr(0, 0, 0.1) == 0.1
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1e-3)
    seq = [cosine_lr(t, 29, 1e-4) for t in range(30)]
    assert all(a >= b for a, b in zip(seq, seq[1:])) and seq[-1] == pytest.approx(0.0, abs=1e-20)


def test_clip_examples():
    grads, norm = clip_grad_norm([np.array([3.0, 4.0])])
    np.testing.assert_allclose(grads[0], [0.6, 0.8])
    assert norm == 5.0
    small = [np.array([0.3]), np.array([[0.4]])]
    grads, norm = clip_grad_norm(small)
    assert norm == pytest.approx(0.5) and grads[0] is small[0]


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)),
       hnp.arrays(np.float64, (3, 2), elements=st.floats(-1e3, 1e3)), st.floats(1e-3, 10))
def test_clip_post_norm_bound(a, b, max_norm):
    grads, pre = clip_grad_norm([a, b], max_norm)
    assert global_norm(grads) <= max_norm + 1e-9
    if pre <= max_norm:
        np.testing.assert_array_equal(grads[0], a)


def test_stratified_batches_spread_classes():
    codes = np.array([0] * 60 + [1] * 8 + [2] * 16 + [3] * 12)
    batches = stratified_batches(codes, 16, np.random.default_rng(0))
    assert len(batches) == 6
    assert sorted(np.concatenate(batches).tolist()) == list(range(len(codes)))
    assert all(len(b) >= 16 for b in batches)
    for b in batches:
        assert {1, 2, 3} <= set(codes[b].tolist())
    again = stratified_batches(codes, 16, np.random.default_rng(0))
    assert all(np.array_equal(x, y) for x, y in zip(batches, again))
    assert len(stratified_batches(codes[:5], 16, np.random.default_rng(0))) == 1


# metrics -------------------------------------------------------------------------------

def test_auc_examples():
    assert auc_mann_whitney([1, 1, 0, 0], [0.9, 0.8, 0.7, 0.6]) == 1.0
    assert auc_mann_whitney([1, 0, 1, 0], [0.4] * 4) == 0.5
    assert auc_mann_whitney([1, 1], [0.2, 0.3]) is None
    m = binary_metrics([1, 1, 0, 0], [0.9, 0.8, 0.7, 0.6])
    assert m.auc == 1.0 and m.precision == 0.5 and m.recall == 1.0
    assert m.confusion == [[0, 2], [0, 2]] and m.accuracy == 0.5
    m = binary_metrics([1, 1, 0, 0], [0.9, 0.8, 0.4, 0.3])
    assert (m.precision, m.recall, m.f1, m.accuracy) == (1.0, 1.0, 1.0, 1.0)


def test_task_report_and_absent_tasks():
    codes = [0, 0, 1, 1, 2]
    probs = np.array([[0.1, 0.2, 0.3], [0.2, 0.1, 0.3], [0.9, 0.5, 0.5], [0.8, 0.5, 0.5], [0.5, 0.7, 0.5]])
    report = task_report(codes, probs)
    assert report.tasks["ATC"].auc == 1.0 and report.tasks["FTC"].auc == 1.0
    assert report.tasks["MTC"].auc is None                # only benign rows
    assert report.macro_auc == 1.0
    assert '"macro_auc": 1.0' in report.to_json()
    for m in report.tasks.values():
        assert sum(map(sum, m.confusion)) == m.n


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 40))
def test_rank_auc_matches_trapezoid_and_reorder(seed, n):
    rng = np.random.default_rng(seed)
    y = rng.permutation(np.arange(n) % 2)
    s = rng.random(n)                                           # continuous, tie-free almost surely
    _, fpr, tpr = roc_points(y, s)
    assert abs(trapezoid_auc(fpr, tpr) - auc_mann_whitney(y, s)) < 1e-12
    perm = rng.permutation(n)
    assert auc_mann_whitney(y[perm], s[perm]) == auc_mann_whitney(y, s)


def test_roc_endpoints():
    thr, fpr, tpr = roc_points([0, 1], [0.2, 0.7])
    assert (thr[0], fpr[0], tpr[0]) == (1.0 + 1e-9, 0.0, 0.0)
    assert (thr[-1], fpr[-1], tpr[-1]) == (-1e-9, 1.0, 1.0)
    assert any(f == 0.0 and t == 1.0 for f, t in zip(fpr, tpr))
    with pytest.raises(ValueError):
        roc_points([1, 1], [0.2, 0.3])


# fitting --------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(12, rng=np.random.default_rng(0), image_size=32, class_probs=(0.4, 0.2, 0.2, 0.2))


def test_fit_history_and_lr_trace(tiny_config, tiny_data):
    cfg = TrainConfig(epochs=3, batch_size=4, lr0=1e-3, seed=1)
    result = fit(CSASN(tiny_config, seed=1), tiny_data, LossConfig(), cfg)
    assert len(result.history) == 3
    assert result.lrs == [cosine_lr(e, 2, 1e-3) for e in range(3)]
    assert [h["lr"] for h in result.history] == result.lrs
    keys = set(result.history[0])
    assert {"epoch", "lr", "loss", "sigma2_t1_1", "sigma2_t3_4"} <= keys
    assert all(math.isfinite(v) for h in result.history for v in h.values())
    assert all(post <= 1.0 + 1e-9 for _, post in result.grad_norms)
    assert not result.model.training
    assert not np.array_equal(result.state.log_var.data, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        fit(CSASN(tiny_config), [], LossConfig(), cfg)


def test_fit_is_deterministic(tiny_config, tiny_data):
    cfg = TrainConfig(epochs=2, batch_size=4, lr0=1e-3, seed=3)
    a = fit(CSASN(tiny_config, seed=3), tiny_data, LossConfig(), cfg)
    b = fit(CSASN(tiny_config, seed=3), tiny_data, LossConfig(), cfg)
    for ha, hb in zip(a.history, b.history):
        assert ha.keys() == hb.keys()
        assert all(abs(ha[k] - hb[k]) <= 1e-12 for k in ha)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_aborts_on_nan_naming_component(tiny_config, tiny_data):
    model = CSASN(tiny_config, seed=0)
    model.parameters()[0].data[...] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 0 step 0: objective"):
        fit(model, tiny_data, LossConfig(), TrainConfig(epochs=1, batch_size=4))


def test_evaluate_and_ablation(tiny_config, tiny_data):
    cfg = TrainConfig(epochs=1, batch_size=4, seed=2)
    report, result = run_ablation("no_attention", tiny_data, tiny_data, tiny_config, LossConfig(), cfg)
    assert result.model.config.variant == "no_attention"
    assert set(report.tasks) == {"ATC", "FTC", "MTC"}
    assert evaluate(result.model, tiny_data[::-1]).to_dict() == report.to_dict()
    full, _ = run_ablation("full", tiny_data, tiny_data, tiny_config, LossConfig(), cfg)
    model = CSASN(tiny_config, seed=2)
    fit(model, tiny_data, LossConfig(), cfg)
    assert evaluate(model, tiny_data).to_dict() == full.to_dict()
    with pytest.raises(ValueError):
        run_ablation("bogus", tiny_data, tiny_data)
    with pytest.raises(ValueError):
        evaluate(model, [])


# checkpoints -------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, tiny_config, tiny_data):
    result = fit(CSASN(replace(tiny_config, variant="no_vit"), seed=4), tiny_data, LossConfig(),
                 TrainConfig(epochs=1, batch_size=4))
    save_checkpoint(tmp_path / "ck.bin", result.model, result.state)
    model, state = load_checkpoint(tmp_path / "ck.bin")
    assert model.config == result.model.config
    before, after = state_dict(result.model, result.state), state_dict(model, state)
    assert before.keys() == after.keys() and LOG_VAR_KEY in after
    assert all(np.array_equal(before[k], after[k]) for k in before)
    x = np.stack([s.image for s in tiny_data[:3]])
    a, b = result.model.eval()(x), model(x)
    for pa, pb in zip(a.probs, b.probs):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_checkpoint_format_errors(tmp_path):
    write_tensors(tmp_path / "t.bin", {"a": np.arange(6.0).reshape(2, 3), "b": np.array(2.5)})
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw[:6] == b"CSASN1"
    back = read_tensors(tmp_path / "t.bin")
    np.testing.assert_array_equal(back["a"], np.arange(6.0).reshape(2, 3))
    assert back["b"].shape == () and back["b"] == 2.5
    for name, data in {"magic": b"XXXXXX" + raw[6:], "trunc": raw[:-3], "trail": raw + b"\0"}.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(CheckpointError):
            read_tensors(tmp_path / name)
    with pytest.raises(FileNotFoundError):
        read_tensors(tmp_path / "absent.bin")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "t.bin")                # no sidecar


def test_checkpoint_shape_mismatch(tmp_path, tiny_config):
    model = CSASN(tiny_config, seed=0)
    save_checkpoint(tmp_path / "ck.bin", model, UncertaintyState())
    tensors = read_tensors(tmp_path / "ck.bin")
    name = next(iter(tensors))
    tensors[name] = np.zeros((1, 1, 1, 1, 1))
    write_tensors(tmp_path / "ck.bin", tensors)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(tmp_path / "ck.bin")
    del tensors[name]
    write_tensors(tmp_path / "ck.bin", tensors)
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(tmp_path / "ck.bin")


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1.0, 1e4))
def test_clip_bound_holds_for_32_bit_grads(seed, scale):
    rng = np.random.default_rng(seed)
    grads = [(rng.normal(size=rng.integers(1, 300)) * scale).astype(np.float32) for _ in range(4)]
    clipped, _ = clip_grad_norm(grads)
    assert global_norm(clipped) <= 1.0 + 1e-9
    assert all(c.dtype == np.float32 for c in clipped)
