"""Classifier construction, forward, partition, and checkpoint tests."""

import numpy as np
import pytest

from fedrobust import autodiff as ad
from fedrobust import model as M


CFG = M.ModelConfig(channels=8, samples=128, classes=2)


def test_build_deterministic():
    a = M.build(CFG, seed=3)
    b = M.build(CFG, seed=3)
    assert a.params.keys() == b.params.keys()
    for n in a.params:
        np.testing.assert_array_equal(a.params[n], b.params[n])


def test_parameter_count_closed_form():
    # hand count, layer by layer, for c=8 t=128 L=2 F1=8 D=2 F2=16 kt=33 ks=15:
    # temporal 8*33=264, bn1 16, spatial 16*8=128, bn2 32, sep-dw 16*15=240,
    # sep-pw 16*16=256, bn3 32, dense 64*2+2=130
    ps = M.build(CFG, seed=0)
    assert M.parameter_count(ps) == 264 + 16 + 128 + 32 + 240 + 256 + 32 + 130


def test_partition_covers_all_disjoint():
    ps = M.build(CFG, seed=0)
    agg = set(ps.aggregable_names())
    bn = set(ps.bn_names())
    assert agg | bn == set(ps.params)
    assert not (agg & bn)
    for name in bn:
        assert name.startswith("bn")


def test_invalid_config_rejected():
    with pytest.raises(M.ConfigError):
        M.ModelConfig(channels=0, samples=128, classes=2)
    with pytest.raises(M.ConfigError):
        M.ModelConfig(channels=8, samples=4, classes=2)
    with pytest.raises(M.ConfigError):
        M.ModelConfig(channels=8, samples=128, classes=1)
    with pytest.raises(M.ConfigError):
        M.ModelConfig(channels=8, samples=128, classes=2, temporal_kernel=200)
    with pytest.raises(M.ConfigError):
        M.ModelConfig(channels=8, samples=128, classes=2, dropout=1.0)


def test_zero_input_zero_head_uniform_logits():
    ps = M.build(CFG, seed=0)
    ps.params["dense.w"][:] = 0.0
    ps.params["dense.b"][:] = 0.0
    logits = M.forward(ps, np.zeros((4, 1, 8, 128)), "eval")
    np.testing.assert_array_equal(logits.value, np.zeros((4, 2)))
    probs = ad.softmax(logits.value)
    np.testing.assert_allclose(probs, 0.5)


def test_batch_permutation_equivariance():
    rng = np.random.default_rng(5)
    ps = M.build(CFG, seed=1)
    x = rng.normal(size=(6, 1, 8, 128))
    perm = rng.permutation(6)
    y = M.forward(ps, x, "eval").value
    yp = M.forward(ps, x[perm], "eval").value
    np.testing.assert_allclose(yp, y[perm], rtol=1e-10, atol=1e-12)


def test_eval_forward_deterministic():
    rng = np.random.default_rng(2)
    ps = M.build(CFG, seed=1)
    x = rng.normal(size=(4, 1, 8, 128))
    a = M.forward(ps, x, "eval").value
    b = M.forward(ps, x, "eval").value
    np.testing.assert_array_equal(a, b)


def test_small_batch_rejected():
    ps = M.build(CFG, seed=0)
    with pytest.raises(ad.ShapeError, match="two samples"):
        M.forward(ps, np.zeros((1, 1, 8, 128)), "eval")


def test_running_stats_eval_allows_single_sample():
    ps = M.build(CFG, seed=0, running_stats=True)
    out = M.forward(ps, np.zeros((1, 1, 8, 128)), "eval", batch_stats=False)
    assert np.all(np.isfinite(out.value))


def test_flat_norm():
    ps = M.build(CFG, seed=0)
    ps.params["dense.w"][:] = 0.0
    ps.params["dense.b"][:] = 0.0
    assert M.flat_norm(ps, "dense") == 0.0
    ps.params["dense.b"][:2] = [3.0, 4.0]
    assert M.flat_norm(ps, "dense") == pytest.approx(5.0)
    # naive-loop oracle on a random layer
    w = np.random.default_rng(0).normal(size=ps.params["conv_temporal.w"].shape)
    ps.params["conv_temporal.w"] = w
    acc = 0.0
    for v in w.ravel():
        acc += v * v
    assert M.flat_norm(ps, "conv_temporal") ** 2 == pytest.approx(acc)
    with pytest.raises(KeyError):
        M.flat_norm(ps, "nope")


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ps = M.build(CFG, seed=9, running_stats=True)
    rng = np.random.default_rng(0)
    for n in ps.params:
        ps.params[n] = rng.normal(size=ps.params[n].shape)
    M.save_checkpoint(ps, tmp_path / "ck")
    back = M.load_checkpoint(tmp_path / "ck")
    assert back.config == ps.config
    assert back.tags == ps.tags
    for n in ps.params:
        np.testing.assert_array_equal(back.params[n], ps.params[n])
    for n in ps.buffers:
        np.testing.assert_array_equal(back.buffers[n], ps.buffers[n])


def test_aggregable_reinsertion_reproduces_forward():
    # serialize only aggregable tensors, reinsert into a clone with the same
    # BN-local tensors: forward must be bit-identical
    rng = np.random.default_rng(4)
    ps = M.build(CFG, seed=2)
    x = rng.normal(size=(4, 1, 8, 128))
    ref = M.forward(ps, x, "eval").value
    clone = ps.copy()
    payload = {n: ps.params[n].copy() for n in ps.aggregable_names()}
    for n in clone.aggregable_names():
        clone.params[n] = np.zeros_like(clone.params[n])
    for n, v in payload.items():
        clone.params[n] = v
    np.testing.assert_array_equal(M.forward(clone, x, "eval").value, ref)


def test_train_on_separable_data():
    # 2-class linearly separable synthetic trials: >=95% train accuracy fast
    rng = np.random.default_rng(0)
    cfg = M.ModelConfig(channels=4, samples=32, classes=2,
                        temporal_filters=4, depth_multiplier=2,
                        separable_filters=8, temporal_kernel=9,
                        separable_kernel=7, dropout=0.0)
    ps = M.build(cfg, seed=0)
    n = 64
    y = np.repeat([0, 1], n // 2)
    x = rng.normal(size=(n, 1, 4, 32)) * 0.3
    x[y == 0, 0, 0] += np.sin(np.linspace(0, 6, 32))
    x[y == 1, 0, 0] -= np.sin(np.linspace(0, 6, 32))
    lr = 0.05
    for epoch in range(50):
        logits = M.forward(ps, x, "train", rng=rng)
        loss = ad.softmax_cross_entropy(logits, y)
        loss.backward()
        for name, node in logits.param_nodes.items():
            ps.params[name] -= lr * node.grad
        acc = (np.argmax(logits.value, axis=1) == y).mean()
        if acc >= 0.98 and epoch > 3:
            break
    preds = M.predict(ps, x)
    assert (preds == y).mean() >= 0.95
