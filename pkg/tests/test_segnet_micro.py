import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mopflow import segnet_micro as sn
from mopflow.checks import network_fd, network_gradient_check, relative_error
from mopflow.evaluation import iou


def small_instance(seed=0):
    rng = np.random.default_rng(seed)
    net = sn.NetParams.init(seed)
    return net, rng.normal(size=(2, 8, 8)), rng.random((8, 8)) > 0.5


def overfit_pair(seed=0):
    rng = np.random.default_rng(seed)
    flow = 0.1 * rng.normal(size=(32, 32, 2))
    mask = np.zeros((32, 32), dtype=bool)
    mask[10:22, 8:20] = True
    flow[mask] += (3.0, 1.0)
    return flow, mask


# -- pooling ---------------------------------------------------------------


def test_pool_examples():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out, idx = sn.maxpool2_with_indices(x)
    assert out[0, 0, 0] == 4 and (idx.rows[0, 0, 0], idx.cols[0, 0, 0]) == (1, 1)
    out, idx = sn.maxpool2_with_indices(np.full((1, 2, 2), 0.3))
    assert out[0, 0, 0] == 0.3 and (idx.rows[0, 0, 0], idx.cols[0, 0, 0]) == (0, 0)


def brute_pool(x):
    c, h, w = x.shape
    out = np.empty((c, h // 2, w // 2))
    where = np.empty((c, h // 2, w // 2, 2), dtype=int)
    for k in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                best = None
                for dr in (0, 1):
                    for dc in (0, 1):
                        v = x[k, 2 * i + dr, 2 * j + dc]
                        if best is None or v > best:
                            best, pos = v, (2 * i + dr, 2 * j + dc)
                out[k, i, j] = best
                where[k, i, j] = pos
    return out, where


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_pool_matches_brute_force_and_round_trips(seed, c, hh, ww):
    rng = np.random.default_rng(seed)
    # coarse values so ties actually occur
    x = rng.integers(0, 4, size=(c, 2 * hh, 2 * ww)).astype(float)
    out, idx = sn.maxpool2_with_indices(x)
    ref, where = brute_pool(x)
    assert np.array_equal(out, ref)
    assert np.array_equal(idx.rows, where[..., 0]) and np.array_equal(idx.cols, where[..., 1])
    # indices stay inside their windows
    assert np.all(idx.rows // 2 == np.arange(hh)[:, None]) and np.all(idx.cols // 2 == np.arange(ww)[None, :])
    up = sn.max_unpool2(out, idx, 2 * hh, 2 * ww)
    assert up.sum() == out.sum()
    nz = np.zeros_like(up, dtype=bool)
    nz[np.arange(c)[:, None, None], idx.rows, idx.cols] = True
    assert not up[~nz].any()
    again, _ = sn.maxpool2_with_indices(up + np.where(nz, 0.0, -1e9))
    assert np.array_equal(again, out)


def test_unpool_zero_and_errors():
    x = np.random.default_rng(0).random((2, 4, 6))
    out, idx = sn.maxpool2_with_indices(x)
    assert not sn.max_unpool2(np.zeros_like(out), idx, 4, 6).any()
    with pytest.raises(ValueError):
        sn.max_unpool2(out, idx, 8, 6)
    with pytest.raises(ValueError):
        sn.max_unpool2(out[:, :1], idx, 4, 6)
    with pytest.raises(ValueError):
        sn.maxpool2_with_indices(np.zeros((1, 3, 4)))


# -- forward / loss --------------------------------------------------------


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["train", "eval"]))
def test_softmax_normalised(seed, mode):
    net = sn.NetParams.init(seed % 1000)
    x = np.random.default_rng(seed).normal(scale=5, size=(2, 16, 16))
    probs, _ = sn.forward(net, x, mode)
    assert probs.shape == (2, 16, 16)
    assert probs.min() >= 0 and probs.max() <= 1
    assert np.abs(probs.sum(axis=0) - 1).max() < 1e-6


def test_forward_rejects_bad_dims():
    with pytest.raises(ValueError):
        sn.forward(sn.NetParams.init(0), np.zeros((2, 12, 16)))


def test_batch_items_independent_in_eval():
    net = sn.NetParams.init(1)
    x = np.random.default_rng(1).normal(size=(2, 8, 16))
    p, _ = sn.forward(net, np.stack([x, x]), "eval")
    assert np.array_equal(p[0], p[1])
    single, _ = sn.forward(net, x, "eval")
    assert np.allclose(single, p[0], rtol=0, atol=1e-15)


def test_uniform_loss_is_ln2():
    net, x, target = small_instance(2)
    net.params["cls.w"][:] = 0.0
    net.params["cls.b"][:] = 0.0
    loss, _, _ = sn.loss_and_grad(net, x, target)
    assert abs(loss - math.log(2)) < 1e-6


def test_confident_correct_loss_small():
    net, x, _ = small_instance(3)
    net.params["cls.w"][:] = 0.0
    net.params["cls.b"][:] = (-10.0, 10.0)
    loss, _, _ = sn.loss_and_grad(net, x, np.ones((8, 8), dtype=bool))
    assert loss < 1e-3


def test_target_shape_mismatch():
    net, x, _ = small_instance(4)
    with pytest.raises(ValueError):
        sn.loss_and_grad(net, x, np.zeros((8, 4), dtype=bool))


def test_gradient_check_all_parameters():
    net, x, target = small_instance(0)
    errs = network_gradient_check(net, x, target)
    assert set(errs) == set(net.params)
    assert max(errs.values()) < 1e-3


def test_gradient_check_step_1e3():
    # central differences with a 1e-3 step, as in the documented example
    net, x, target = small_instance(0)
    _, analytic, _ = sn.loss_and_grad(net, x, target)
    numeric = network_fd(net, x, target, step=1e-3)
    worst = max(float(relative_error(analytic[k], numeric[k], 1e-8).max()) for k in numeric)
    assert worst < 1e-3


# -- optimiser -------------------------------------------------------------


def test_lr_schedule():
    cfg = sn.TrainConfig()
    assert cfg.lr(2000) == 2.5e-4 and cfg.lr(4000) == 1.25e-4
    assert cfg.lr(1) == 5e-4 and cfg.lr(1999) == 5e-4


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6))
def test_lr_schedule_closed_form(t):
    assert sn.TrainConfig().lr(t) == 5e-4 * 0.5 ** (t // 2000)


def test_adam_first_step():
    params = {"w": np.array([1.0])}
    state = sn.AdamState({"w": np.zeros(1)}, {"w": np.zeros(1)})
    sn.adam_step(params, {"w": np.array([1.0])}, state, 1)
    assert abs((1.0 - params["w"][0]) - 5e-4) < 1e-11


def test_adam_zero_gradient_fixed_point():
    net = sn.NetParams.init(5)
    before = net.copy()
    state = sn.adam_init(net)
    for t in range(1, 50):
        sn.adam_step(net, net.zeros_like(), state, t)
    for k in net.params:
        assert np.array_equal(net.params[k], before.params[k])


def test_adam_rejects_step_zero():
    net = sn.NetParams.init(0)
    with pytest.raises(ValueError):
        sn.adam_step(net, net.zeros_like(), sn.adam_init(net), 0)


# -- training --------------------------------------------------------------


def test_train_errors():
    with pytest.raises(ValueError):
        sn.train([])
    with pytest.raises(ValueError):
        sn.train([(np.zeros((12, 16, 2)), np.zeros((12, 16), dtype=bool))])
    bad = np.zeros((8, 8, 2))
    bad[0, 0, 0] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError, match="step 1"):
        sn.train([(bad, np.zeros((8, 8), dtype=bool))], sn.TrainConfig(iterations=3))


def test_overfit_single_pair():
    flow, mask = overfit_pair()
    net, losses = sn.train([(flow, mask)], sn.TrainConfig(iterations=500), seed=0)
    assert losses[-1] < 0.1
    assert np.mean(losses[-100:]) < np.mean(losses[:100])
    assert iou(sn.predict_mask(net, flow), mask) > 0.9


def test_training_deterministic():
    pairs = [overfit_pair(0), overfit_pair(1)]
    cfg = sn.TrainConfig(iterations=15)
    a_net, a = sn.train(pairs, cfg, seed=3)
    b_net, b = sn.train(pairs, cfg, seed=3)
    assert a == b
    for k in a_net.params:
        assert np.array_equal(a_net.params[k], b_net.params[k])
    _, c = sn.train(pairs, cfg, seed=4)
    assert c != a


def test_predict_shape_and_channel_flip():
    net = sn.NetParams.init(6)
    flow = np.random.default_rng(6).normal(size=(13, 21, 2))
    m = sn.predict_mask(net, flow)
    assert m.shape == (13, 21) and m.dtype == bool
    flipped = net.copy()
    flipped.params["cls.w"] = net.params["cls.w"][::-1].copy()
    flipped.params["cls.b"] = net.params["cls.b"][::-1].copy()
    flow8 = flow[:8, :16]
    assert np.array_equal(sn.predict_mask(flipped, flow8), ~sn.predict_mask(net, flow8))


def test_checkpoint_round_trip(tmp_path):
    net = sn.NetParams.init(7)
    net.buffers["enc1.running_mean"][:] = np.linspace(-1, 1, 16)
    path = tmp_path / "ck.bin"
    sn.save_checkpoint(net, path)
    back = sn.load_checkpoint(path)
    assert list(back.params) == list(net.params)
    for group, ref in ((back.params, net.params), (back.buffers, net.buffers)):
        for k in ref:
            assert np.array_equal(group[k], ref[k].astype(np.float32).astype(np.float64))
    header = path.read_bytes().split(b"\nend\n")[0].decode()
    assert header.splitlines()[0] == "mopflow-segnet 1"
    assert "enc1.w 16 2 3 3" in header


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"something else\nend\n")
    with pytest.raises(ValueError):
        sn.load_checkpoint(p)
    net = sn.NetParams.init(0)
    sn.save_checkpoint(net, p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError):
        sn.load_checkpoint(p)


def test_loss_csv(tmp_path):
    p = tmp_path / "loss.csv"
    sn.write_loss_csv(p, [0.7, 0.5, 0.25])
    rows = p.read_text().splitlines()
    assert rows[0] == "step,lr,loss" and rows[1] == "1,0.0005,0.7" and len(rows) == 4
