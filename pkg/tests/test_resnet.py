import math

import numpy as np
import pytest

from canehsi.patches import Patch, PatchSet, SplitResult
from canehsi.resnet import (
    NetConfig,
    ResidualNet,
    evaluate_net,
    forward,
    gradient_check,
    init_net,
    load_net,
    loss_and_grad,
    param_count,
    residual_block_forward,
    softmax,
    train,
)
from canehsi.synthgen import RATING_CLASSES

TINY = dict(input_n=9, stem_channels=4, num_blocks=1)


def tiny(seed=0, **kw):
    return init_net(NetConfig(**{**TINY, "seed": seed, **kw}))


def patches(count, n=9, bands=11, seed=0, balanced=True):
    rng = np.random.default_rng(seed)
    labels = [RATING_CLASSES[i % 7] for i in range(count)] if balanced else rng.choice(RATING_CLASSES, count)
    return PatchSet([Patch(rng.random((n, n, bands)), k, (0, i, 0)) for i, k in enumerate(labels)], n, bands)


# --- construction ---------------------------------------------------------------


def test_init_deterministic():
    np.testing.assert_array_equal(tiny(3).params, tiny(3).params)


def test_seeds_differ():
    assert not np.array_equal(tiny(1).params, tiny(2).params)


@pytest.mark.parametrize(
    "cfg",
    [NetConfig(), NetConfig(**TINY), NetConfig(num_blocks=2, channels_per_stage=[8, 12], stem_channels=8)],
)
def test_param_count_closed_form(cfg):
    net = init_net(cfg)
    assert net.params.size == param_count(cfg)
    B, c0 = cfg.input_bands, cfg.stem_channels
    expected = 9 * B * c0 + c0
    cin = c0
    for cout in cfg.block_channels():
        expected += 9 * cin * cout + cout + 9 * cout * cout + cout + (cin != cout) * (cin * cout + cout)
        cin = cout
    assert net.params.size == expected + cin * 7 + 7


def test_tiny_param_count():
    assert param_count(NetConfig(**TINY)) == 731


def test_init_scales():
    net = init_net(NetConfig(seed=5))
    w = net.view("block1.conv2.w")
    assert abs(w.std() - math.sqrt(2 / (9 * 16))) < 0.1 * math.sqrt(2 / (9 * 16))
    for name in net.layout:
        if name.endswith(".b"):
            assert np.all(net.view(name) == 0)


def test_invalid_config():
    with pytest.raises(ValueError):
        NetConfig(num_blocks=0).validate()
    with pytest.raises(ValueError):
        NetConfig(num_blocks=2, channels_per_stage=[4]).validate()
    with pytest.raises(ValueError):
        NetConfig(stem_channels=0).validate()


def test_layer_records():
    kinds = [r["kind"] for r in tiny().layers]
    assert kinds == ["conv3x3", "relu", "conv3x3", "relu", "conv3x3", "residual_add", "relu", "global_avg_pool", "fc"]


# --- residual block --------------------------------------------------------------


def zero_block(c):
    return {"conv1.w": np.zeros((3, 3, c, c)), "conv1.b": np.zeros(c), "conv2.w": np.zeros((3, 3, c, c)), "conv2.b": np.zeros(c)}


def test_zero_branch_is_identity():
    x = np.random.default_rng(0).random((2, 7, 7, 5))
    np.testing.assert_array_equal(residual_block_forward(x, zero_block(5)), x)


def test_zero_branch_rectifies_negative_input():
    x = np.random.default_rng(1).standard_normal((1, 5, 5, 3))
    np.testing.assert_array_equal(residual_block_forward(x, zero_block(3)), np.maximum(x, 0))


def test_zero_input_zero_output():
    net = init_net(NetConfig(seed=2))
    params = {k: net.view(f"block0.{k}") for k in ("conv1.w", "conv1.b", "conv2.w", "conv2.b")}
    out = residual_block_forward(np.zeros((2, 19, 19, 16), np.float32), params)
    assert out.shape == (2, 19, 19, 16) and np.all(out == 0)


def test_block_channel_mismatch():
    with pytest.raises(ValueError):
        residual_block_forward(np.zeros((1, 5, 5, 4)), zero_block(3))
    p = zero_block(3)
    p["conv1.w"] = np.zeros((3, 3, 3, 6))
    p["conv2.w"] = np.zeros((3, 3, 6, 6))
    with pytest.raises(ValueError):
        residual_block_forward(np.zeros((1, 5, 5, 3)), p)


def test_projection_skip():
    net = init_net(NetConfig(input_n=7, num_blocks=2, channels_per_stage=[4, 6], stem_channels=4))
    assert net.has("block1.proj.w") and not net.has("block0.proj.w")
    assert forward(net, patches(3, n=7)).shape == (3, 7)


# --- forward and loss ---------------------------------------------------------------


def test_logits_shape_and_single_item():
    net = init_net(NetConfig(seed=1))
    assert forward(net, patches(5, n=19)).shape == (5, 7)
    assert forward(net, patches(1, n=19).patches[0].data).shape == (1, 7)


def test_forward_shape_mismatch():
    with pytest.raises(ValueError):
        forward(tiny(), np.zeros((2, 8, 8, 11)))


def test_duplicated_rows():
    x = patches(1).stack()
    logits = forward(tiny(), np.concatenate([x, x]))
    np.testing.assert_array_equal(logits[0], logits[1])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for scale in (1e-3, 1.0, 50.0, 1e4):
        p = softmax(scale * rng.standard_normal((20, 7)))
        assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-6) and np.all(p >= 0)
    for seed in range(5):
        p = softmax(forward(tiny(seed), patches(6, seed=seed)))
        assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-6)


def test_uniform_logits_loss():
    net = tiny()
    net.view("fc.w")[...] = 0
    net.view("fc.b")[...] = 0
    ps = patches(7)
    loss, _ = loss_and_grad(net, ps, ps.labels())
    assert loss == pytest.approx(math.log(7), abs=1e-6)


def test_duplicated_batch_same_loss():
    ps = patches(5, seed=4, balanced=False)
    x = ps.stack()
    l1, _ = loss_and_grad(tiny(4), x, ps.labels())
    l2, _ = loss_and_grad(tiny(4), np.concatenate([x, x]), np.concatenate([ps.labels(), ps.labels()]))
    assert l2 == pytest.approx(l1, rel=1e-6)


def test_label_validation():
    ps = patches(2)
    with pytest.raises(ValueError):
        loss_and_grad(tiny(), ps, [1, 3])
    with pytest.raises(ValueError):
        loss_and_grad(tiny(), ps, [1])


@pytest.mark.parametrize("seed", range(3))
def test_initial_loss_near_ln7(seed):
    ps = patches(70, n=19, seed=seed)
    loss, _ = loss_and_grad(init_net(NetConfig(seed=seed)), ps, ps.labels())
    assert abs(loss - math.log(7)) <= 0.3


# --- gradient verification ------------------------------------------------------------


def test_gradient_check_tiny():
    ps = patches(4, seed=5, balanced=False)
    assert gradient_check(tiny(5), ps, ps.labels()) < 1e-3


def test_gradient_check_linear_only():
    ps = patches(4, seed=6, balanced=False)
    assert gradient_check(tiny(6, rectifier=False), ps, ps.labels()) < 1e-4


def test_gradient_check_projection_net():
    net = init_net(NetConfig(input_n=5, stem_channels=3, num_blocks=2, channels_per_stage=[3, 4], seed=7))
    ps = patches(3, n=5, seed=7, balanced=False)
    assert gradient_check(net, ps, ps.labels()) < 1e-3


def test_corrupted_gradient_fails_check():
    net = tiny(8)
    ps = patches(4, seed=8, balanced=False)
    _, grad = loss_and_grad(net.astype(np.float64), ps, ps.labels())
    bad = grad.copy()
    k = int(np.argmax(np.abs(bad)))
    bad[k] *= 1.10
    assert gradient_check(net, ps, ps.labels(), grad=bad) > 1e-3


# --- training -----------------------------------------------------------------------


def small_split(count=14, seed=0):
    ps = patches(count, seed=seed)
    return SplitResult(ps, patches(7, seed=seed + 1), patches(7, seed=seed + 2))


def test_lr_zero_leaves_params():
    net = tiny(9)
    trained, rep = train(net, small_split(), epochs=3, lr=0.0)
    np.testing.assert_array_equal(trained.params, net.params)
    assert len(rep.epochs) == 3


def test_single_patch_memorised():
    one = patches(1, seed=10)
    net, rep = train(tiny(10), SplitResult(one, one, one), epochs=200, lr=0.01, batch_size=1)
    assert rep.epochs[-1].train_accuracy == 1.0
    assert evaluate_net(net, one).accuracy == 1.0


def test_training_deterministic():
    a, ra = train(tiny(11), small_split(), epochs=2, seed=4)
    b, rb = train(tiny(11), small_split(), epochs=2, seed=4)
    assert a.params.tobytes() == b.params.tobytes()
    assert ra.to_json() == rb.to_json()


def test_training_report(tmp_path):
    _, rep = train(tiny(12), small_split(), epochs=3)
    for e in rep.epochs:
        assert e.train_loss >= 0 and 0 <= e.train_accuracy <= 1 and 0 <= e.val_accuracy <= 1
    assert 0 <= rep.final_test_accuracy <= 1
    rep.save_csv(tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,val_acc" and len(lines) == 4


def test_empty_training_split():
    empty = PatchSet([], 9, 11)
    with pytest.raises(ValueError):
        train(tiny(), SplitResult(empty, empty, empty), epochs=1)


def test_untrained_accuracy_near_chance():
    ps = patches(70, n=19, seed=13)
    accs = [evaluate_net(init_net(NetConfig(seed=s)), ps).accuracy for s in range(10)]
    assert all(0.05 <= a <= 0.30 for a in accs)


def test_eval_report_consistency():
    ps = patches(21, seed=14)
    r = evaluate_net(tiny(14), ps)
    assert r.confusion.sum() == 21 and r.accuracy == np.trace(r.confusion) / 21


def test_serialization_round_trip(tmp_path):
    net, _ = train(tiny(15), small_split(), epochs=1)
    p = tmp_path / "net.bin"
    from canehsi.resnet import save_net

    save_net(net, p)
    back = load_net(p)
    assert isinstance(back, ResidualNet)
    np.testing.assert_array_equal(back.params, net.params)
    np.testing.assert_array_equal(back.input_scale, net.input_scale)
    x = patches(3, seed=16).stack()
    np.testing.assert_array_equal(forward(back, x), forward(net, x))
