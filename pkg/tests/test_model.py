import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from episeg.errors import BadInputSize, IndivisibleInput, InputError, NonFiniteGradient, NonFiniteLoss
from episeg.model import (AdamState, MiniSegmenter, OptimizerConfig, TrainConfig, TrainingLog,
                          adam_step, load_checkpoint, mini_backward, plateau_scheduler,
                          predict_from_logits, save_checkpoint, train, unet_topology, weighted_ce_loss)
from episeg.model.layers import conv2d, maxpool2
from episeg.sampler import PatchBatch, loss_weight_map


def scalar_adam(theta, grads, lr, b1, b2, eps):
    """Element-by-element reference written from the update rule."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta = theta - lr * mh / (vh ** 0.5 + eps)
    return theta


def trace_scheduler(losses, lr, patience, factor=0.5):
    """Hand-written rule trace: lr after each epoch."""
    best, bad, out = float("inf"), 0, []
    for x in losses:
        if x < best:
            best, bad = x, 0
        else:
            bad += 1
            if bad == patience:
                lr, bad = lr * factor, 0
        out.append(lr)
    return out


def activation_pattern(net, x, params):
    _, cache = net.forward(x, params)
    parts = [(cache[k][1] > 0).ravel() for k in ("c1", "c2", "c3", "c4", "c5", "c6")]
    return np.concatenate(parts + [cache["pool"].ravel()])


def fd_sweep(net, x, lab, w, h=1e-3):
    """Central differences for every parameter; also reports whether any
    perturbation crossed a ReLU or max-pool switch."""
    _, g, _ = net.loss_and_grad(x, lab, w)
    base = activation_pattern(net, x, net.params)
    num = np.zeros_like(g)
    crossed = False
    for i in range(net.n_params):
        p = net.params.copy()
        p[i] += h
        lp = net.loss_and_grad(x, lab, w, p)[0]
        crossed |= bool((activation_pattern(net, x, p) != base).any())
        p[i] -= 2 * h
        lm = net.loss_and_grad(x, lab, w, p)[0]
        crossed |= bool((activation_pattern(net, x, p) != base).any())
        num[i] = (lp - lm) / (2 * h)
    rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
    return rel.max(), crossed


def fd_instance(seed):
    r = np.random.default_rng(seed)
    net = MiniSegmenter(2, rng=r)
    net.params = net.params + r.normal(0, 0.3, net.n_params)
    x = r.normal(size=(1, 3, 8, 8))
    lab = r.integers(0, 2, (1, 8, 8))
    w = r.random((1, 8, 8)) + 0.5
    return net, x, lab, w


# optimiser ---------------------------------------------------------------------

def test_adam_examples():
    cfg = OptimizerConfig()
    p, s = adam_step(np.ones(4), np.zeros(4), AdamState.zeros(4), cfg)
    assert np.array_equal(p, np.ones(4)) and s.t == 1
    p, s = adam_step(np.zeros(1), np.ones(1), AdamState.zeros(1), cfg)
    assert p[0] == pytest.approx(-0.0005 / (1 + 1e-8), abs=1e-18)
    p, s = adam_step(p, np.ones(1), s, cfg)
    assert p[0] == pytest.approx(scalar_adam(0.0, [1.0, 1.0], 0.0005, 0.99, 0.99, 1e-8), abs=1e-12)


def test_adam_matches_scalar_oracle(rng):
    cfg = OptimizerConfig(beta1=0.9, beta2=0.999, learning_rate=0.01)
    theta0 = rng.normal(size=6)
    grads = rng.normal(size=(100, 6))
    p, s = theta0.copy(), AdamState.zeros(6)
    for g in grads:
        p, s = adam_step(p, g, s, cfg)
    for i in range(6):
        assert p[i] == pytest.approx(scalar_adam(theta0[i], grads[:, i], 0.01, 0.9, 0.999, 1e-8), abs=1e-12)


def test_adam_rejects_bad_input():
    with pytest.raises(NonFiniteGradient):
        adam_step(np.zeros(2), np.array([1.0, np.nan]), AdamState.zeros(2), OptimizerConfig())
    with pytest.raises(InputError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.zeros(2), OptimizerConfig())
    with pytest.raises(InputError):
        OptimizerConfig(beta1=1.0)


def test_scheduler_examples():
    cfg = OptimizerConfig(plateau_patience=5)
    assert plateau_scheduler([5, 4, 3, 2, 1], cfg) == [0.0005] * 5
    lrs = plateau_scheduler([1.0] * 7, cfg)
    # epoch 1 sets the best; epochs 2-6 are the five non-improving epochs
    assert lrs[:5] == [0.0005] * 5 and lrs[5] == 0.00025 and lrs[6] == 0.00025
    lrs = plateau_scheduler([1.0] * 12, cfg)
    changes = [i + 1 for i in range(1, 12) if lrs[i] != lrs[i - 1]]
    assert changes == [6, 11]
    assert lrs[-1] == pytest.approx(0.0005 / 4)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), max_size=40), st.sampled_from([5, 10]))
def test_scheduler_matches_trace(losses, patience):
    cfg = OptimizerConfig(plateau_patience=patience)
    assert plateau_scheduler(losses, cfg) == trace_scheduler(losses, 0.0005, patience)
    assert plateau_scheduler(losses, cfg) == plateau_scheduler(list(losses), cfg)


# loss --------------------------------------------------------------------------

def test_loss_examples(rng):
    lab = rng.integers(0, 2, (1, 4, 4))
    big = np.where(np.stack([lab == 0, lab == 1], axis=1), 50.0, -50.0)
    assert weighted_ce_loss(big, lab)[0] < 1e-30
    assert weighted_ce_loss(np.zeros((1, 2, 4, 4)), lab)[0] == pytest.approx(np.log(2))


def test_loss_weights_one_equals_unweighted(rng):
    logits = rng.normal(size=(2, 2, 5, 5))
    lab = rng.integers(0, 2, (2, 5, 5))
    a = weighted_ce_loss(logits, lab)[0]
    b = weighted_ce_loss(logits, lab, np.ones((2, 5, 5)))[0]
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    ref = -np.mean(np.log(np.take_along_axis(p, lab[:, None], axis=1)))
    assert a == pytest.approx(b, abs=1e-12) and a == pytest.approx(ref, abs=1e-12)


def test_loss_gradient_finite_differences(rng):
    logits = rng.normal(size=(1, 2, 6, 6))
    lab = rng.integers(0, 2, (1, 6, 6))
    w = rng.random((1, 6, 6)) * 2
    _, g = weighted_ce_loss(logits, lab, w)
    h = 1e-6
    num = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        lp, lm = logits.copy(), logits.copy()
        lp[idx] += h
        lm[idx] -= h
        num[idx] = (weighted_ce_loss(lp, lab, w)[0] - weighted_ce_loss(lm, lab, w)[0]) / (2 * h)
    assert np.linalg.norm(num - g) / np.linalg.norm(g) <= 1e-5


# network -----------------------------------------------------------------------

def test_conv_matches_direct_sum(rng):
    x = rng.normal(size=(1, 2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out, _ = conv2d(x, w, b)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                assert out[0, o, i, j] == pytest.approx((xp[0, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o])


def test_maxpool_first_max_wins():
    x = np.array([[[[1.0, 1.0], [0.0, 1.0]]]])
    out, arg = maxpool2(x)
    assert out[0, 0, 0, 0] == 1.0 and arg[0, 0, 0, 0] == 0


def test_zero_params_give_ln2():
    net = MiniSegmenter(4, params=np.zeros(MiniSegmenter(4).n_params))
    lab = np.random.default_rng(0).integers(0, 2, (1, 8, 8))
    logits, _ = net.forward(np.random.default_rng(1).normal(size=(1, 3, 8, 8)))
    assert np.all(logits == 0)
    assert net.loss_and_grad(np.zeros((1, 3, 8, 8)), lab)[0] == pytest.approx(np.log(2))


def test_shapes_and_bad_input():
    net = MiniSegmenter(2)
    logits, _ = net.forward(np.zeros((2, 3, 6, 10)))
    assert logits.shape == (2, 2, 6, 10)
    with pytest.raises(BadInputSize):
        net.forward(np.zeros((1, 3, 7, 8)))
    img = np.random.default_rng(0).integers(0, 256, (13, 17, 3), dtype=np.uint8)
    assert net.predict_mask(img).shape == (13, 17)


def test_predict_ties_to_background():
    lg = np.array([[[0.2, 0.5]], [[0.7, 0.5]]])
    assert predict_from_logits(lg).tolist() == [[1, 0]]


def test_gradient_finite_difference_sweep():
    # ReLU and max-pool switches inside the +-h band invalidate central
    # differences; only instances whose activation pattern is stable under
    # every perturbation are smooth there and can be checked at h = 1e-3.
    checked = 0
    for seed in range(12):
        net, x, lab, w = fd_instance(seed)
        err, crossed = fd_sweep(net, x, lab, w, h=1e-3)
        if crossed:
            continue
        checked += 1
        assert err <= 1e-3
    assert checked >= 3


def test_gradient_small_step_any_instance():
    for seed in range(3):
        net, x, lab, w = fd_instance(100 + seed)
        err, crossed = fd_sweep(net, x, lab, w, h=1e-6)
        if not crossed:
            assert err <= 1e-3


def test_batch_order_invariance(rng):
    net = MiniSegmenter(2, rng=rng)
    batches = []
    for _ in range(3):
        lab = (rng.random((8, 8)) < 0.4).astype(np.uint8)
        batches.append(PatchBatch(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8), lab, loss_weight_map(lab)))
    g1 = sum(mini_backward(net, b)[2] for b in batches)
    g2 = sum(mini_backward(net, b)[2] for b in batches[::-1])
    assert np.abs(g1 - g2).max() <= 1e-10
    # a stacked batch averages over all its pixels
    gb = mini_backward(net, batches)[2]
    assert np.abs(gb - g1 / 3).max() <= 1e-10


# topology ----------------------------------------------------------------------

def test_topology_examples():
    t5 = unet_topology(5, 32, 512)
    assert t5.level_sizes == [512, 256, 128, 64, 32]
    assert [l.filters for l in t5.per_level] == [32, 64, 128, 256, 512]
    assert t5.output_size_px == 512
    t6 = unet_topology(6, 16, 1024)
    assert t6.level_sizes[-1] == 32
    with pytest.raises(IndivisibleInput):
        unet_topology(5, 32, 500)


def test_topology_parameter_count_by_hand():
    # 2 levels, base 4, RGB in, 2 classes
    enc0 = (3 * 4 * 9 + 4) + (4 * 4 * 9 + 4)
    enc1 = (4 * 8 * 9 + 8) + (8 * 8 * 9 + 8)
    dec0 = (12 * 4 * 9 + 4) + (4 * 4 * 9 + 4)
    head = 4 * 2 + 2
    assert unet_topology(2, 4, 64).total_params == enc0 + enc1 + dec0 + head


@pytest.mark.xfail(strict=True, reason="the 6-level net with half the base filters contains every layer "
                                        "of the 5-level net plus one extra level, so it cannot be smaller")
def test_six_level_net_smaller_than_five_level():
    assert unet_topology(6, 16, 1024).total_params < unet_topology(5, 32, 512).total_params


# training ----------------------------------------------------------------------

def two_colour_stream(seed, size=16):
    r = np.random.default_rng(seed)
    while True:
        lab = np.zeros((size, size), np.uint8)
        y0, x0 = r.integers(0, size // 2, 2)
        lab[y0:y0 + size // 2, x0:x0 + size // 2] = 1
        img = np.where(lab[..., None] == 1, [200, 40, 40], [40, 40, 200]).astype(np.uint8)
        yield PatchBatch(img, lab, np.ones(lab.shape))


def test_smoke_training_beats_ln2():
    val = [b for b, _ in zip(two_colour_stream(99), range(4))]
    net = MiniSegmenter(4, rng=np.random.default_rng(0))
    net, log = train(net, two_colour_stream(1), val, OptimizerConfig(learning_rate=5e-3), 4, 50)
    assert log.records[-1].val_loss < np.log(2)
    assert len(log.records) == 4


def test_zero_lr_keeps_params():
    net = MiniSegmenter(2, rng=np.random.default_rng(0))
    before = net.params.copy()
    train(net, two_colour_stream(1), [], OptimizerConfig(learning_rate=0.0), 2, 5)
    assert np.array_equal(net.params, before)


def test_training_deterministic(tmp_path):
    from episeg.augment import AugmentationConfig
    logs = []
    for _ in range(2):
        net = MiniSegmenter(2, rng=np.random.default_rng(3))
        _, log = train(net, two_colour_stream(5), [next(two_colour_stream(6))], OptimizerConfig(), 2, 5,
                       AugmentationConfig(), seed=4)
        log.write_csv(tmp_path / "log.csv")
        logs.append((tmp_path / "log.csv").read_text())
    assert logs[0] == logs[1]
    back = TrainingLog.read_csv(tmp_path / "log.csv")
    assert [r.epoch for r in back.records] == [1, 2]
    assert logs[0].splitlines()[0] == "epoch,train_loss,val_loss,lr"


def test_non_finite_loss_aborts():
    def bad():
        lab = np.zeros((8, 8), np.uint8)
        while True:
            yield PatchBatch(np.zeros((8, 8, 3), np.uint8), lab, np.full((8, 8), np.inf))
    with pytest.raises(NonFiniteLoss) as ei:
        train(MiniSegmenter(2), bad(), [], OptimizerConfig(), 1, 3)
    assert ei.value.diagnostic["step"] == 1


def test_checkpoint_roundtrip(tmp_path):
    net = MiniSegmenter(3, rng=np.random.default_rng(0))
    save_checkpoint(net, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.filters == 3
    assert np.array_equal(back.params, net.params.astype(np.float32).astype(float))
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:4] == b"EPSG"
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_train_config_roundtrip():
    cfg = TrainConfig.from_dict({"epochs": 3, "optimizer": {"plateau_patience": 10},
                                 "sampler": {"patch_size_px": 64}, "augmentation": {"he_delta": 0.15}})
    assert cfg.optimizer.plateau_patience == 10 and cfg.sampler.patch_size_px == 64
    with pytest.raises(InputError):
        TrainConfig.from_dict({"epochz": 3})
