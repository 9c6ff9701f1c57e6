"""Acceptance suite: one test per criterion, summarised as PASS/FAIL lines at the end of the run."""

import itertools
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from milseg import functional as F
from milseg.cli import main
from milseg.data import (
    BAD,
    GOOD,
    Dataset,
    LabeledImage,
    SyntheticParams,
    generate_synthetic,
    holdout_split,
    mil_bag_label,
    save_dataset,
    to_batch,
)
from milseg.metrics import auc, confusion
from milseg.model import ModelConfig, build, describe, load_checkpoint, parameter_count, save_checkpoint
from milseg.tensor import Tensor
from milseg.training import TrainSettings, accuracy, predict, train
from milseg.weakseg import StructuringElement, dilate, erode, iou, opening, segment, threshold

from conftest import check_gradient, numeric_grad, rel_error, weighted_sum
from test_metrics import pairwise_auc
from test_model import conv_count
from test_tensor import naive_conv2d

# -- 1 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(1, "gradients match central differences (per op 1e-4, end-to-end 1e-3)")
def test_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(0)

    def leaf(*shape, name="x"):
        return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64, name=name)

    def params(o, c, output_padding=0):
        return F.ConvParams(leaf(o, c, 4, 4, name="w"), leaf(o, name="b"), 2, 1, output_padding)

    def away_from_zero(t):
        t.data[np.abs(t.data) < 0.05] += 0.1
        return t

    x = leaf(2, 3, 8, 8)
    cp = params(2, 3)
    r = rng.standard_normal((2, 2, 4, 4))
    check_gradient(lambda: weighted_sum(F.conv2d(x, cp), r), [x, cp.weights, cp.bias], rng)

    xd = leaf(2, 3, 3, 3)
    dp = params(2, 3, output_padding=1)
    r = rng.standard_normal((2, 2, 7, 7))
    check_gradient(lambda: weighted_sum(F.deconv2d(xd, dp), r), [xd, dp.weights, dp.bias], rng)

    xa = away_from_zero(leaf(3, 5))
    r = rng.standard_normal((3, 5))
    check_gradient(lambda: weighted_sum(F.leaky_relu(xa, 0.2), r), [xa], rng)
    check_gradient(lambda: weighted_sum(F.relu(xa), r), [xa], rng)

    for training in (True, False):
        xb = leaf(3, 2, 3, 3)
        bn = F.BatchNormState.create(2, np.float64)
        bn.scale.data[:] = rng.uniform(0.5, 1.5, 2)
        bn.shift.data[:] = rng.standard_normal(2)
        bn.running_var[:] = rng.uniform(0.5, 2, 2)
        bn.training = training
        r = rng.standard_normal((3, 2, 3, 3))
        check_gradient(lambda: weighted_sum(F.batch_norm(xb, bn), r), [xb, bn.scale, bn.shift], rng)

    xo = leaf(4, 6)
    r = rng.standard_normal((4, 6))
    check_gradient(lambda: weighted_sum(F.dropout(xo, 0.5, True, np.random.default_rng(3)), r), [xo], rng)

    a, b = leaf(1, 2, 3, 3, name="a"), leaf(1, 1, 3, 3, name="b")
    r = rng.standard_normal((1, 3, 3, 3))
    check_gradient(lambda: weighted_sum(F.concat_channels(a, b), r), [a, b], rng)

    xg = leaf(2, 3, 4, 4)
    r = rng.standard_normal((2, 3))
    check_gradient(lambda: weighted_sum(F.global_average_pool(xg), r), [xg], rng)

    xl, wl, bl = leaf(3, 4), leaf(2, 4, name="w"), leaf(2, name="b")
    r = rng.standard_normal((3, 2))
    check_gradient(lambda: weighted_sum(F.linear(xl, wl, bl), r), [xl, wl, bl], rng)

    z = leaf(4, 2)
    check_gradient(lambda: F.softmax_cross_entropy(z, [0, 1, 1, 0]), [z], rng)

    # end to end: tiny network in training mode (batch statistics and a fixed dropout mask)
    net = build(ModelConfig(input_size=16, base_channels=4, max_channels=16, depth=3, dropout_layers=1), dtype=np.float64)
    images = np.random.default_rng(1).random((4, 1, 16, 16))
    labels = [1, 0, 1, 0]

    def loss():
        return F.softmax_cross_entropy(net.forward(images, training=True)[0], labels)

    params = net.parameters()
    loss().backward()
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    picks = rng.choice(sizes.sum(), size=50, replace=False)
    offsets = np.cumsum(sizes) - sizes
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        tensor = params[names[k]]
        idx = int(flat - offsets[k])
        num = numeric_grad(loss, tensor, [idx], h=1e-6)
        err = float(rel_error(tensor.grad.reshape(-1)[idx], num, floor=1e-7)[0])
        worst = max(worst, err)
        assert err < 1e-3, (names[k], idx, err)
    print(f"end-to-end worst relative error {worst:.2e}")
    assert time.perf_counter() - start < 120


# -- 2 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(2, "conv2d equals loop oracle (1e-12); deconv2d adjoint identity (1e-10)")
def test_convolution_oracle_equivalence():
    rng = np.random.default_rng(0)
    for n, c, h, w in itertools.product((1, 2), (1, 2, 3), range(2, 9), range(2, 9)):
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((2, c, 4, 4))
        bias = rng.standard_normal(2)
        params = F.ConvParams(Tensor(wt, dtype=np.float64), Tensor(bias, dtype=np.float64))
        y = F.conv2d(Tensor(x, dtype=np.float64), params).data
        np.testing.assert_allclose(y, naive_conv2d(x, wt, bias, 2, 1), atol=1e-12, rtol=0)

        # adjoint: <conv(x), y> == <x, deconv(y)> with zero biases and matching output size
        out_h = F.conv_output_size(h, 4, 2, 1)
        out_w = F.conv_output_size(w, 4, 2, 1)
        zero_o, zero_c = Tensor(np.zeros(2), dtype=np.float64), Tensor(np.zeros(c), dtype=np.float64)
        cx = F.conv2d(Tensor(x, dtype=np.float64), F.ConvParams(Tensor(wt, dtype=np.float64), zero_o)).data
        g = rng.standard_normal(cx.shape)
        pad_h = h - F.deconv_output_size(out_h, 4, 2, 1)
        pad_w = w - F.deconv_output_size(out_w, 4, 2, 1)
        if pad_h != pad_w:  # one output_padding serves both axes
            continue
        pad = pad_h
        dparams = F.ConvParams(Tensor(wt.transpose(1, 0, 2, 3), dtype=np.float64), zero_c, 2, 1, pad)
        dg = F.deconv2d(Tensor(g, dtype=np.float64), dparams).data
        assert dg.shape == x.shape
        assert abs(np.vdot(cx, g) - np.vdot(x, dg)) < 1e-10


# -- 3 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(3, "full-size profile count within 1% of 54,653,008 and logged; desk count equals hand sum")
def test_parameter_count(tmp_path):
    full = build(ModelConfig.paper())
    count = parameter_count(full)
    assert abs(count - 54_653_008) / 54_653_008 < 0.01
    (tmp_path / "build.log").write_text(describe(full))
    log = (tmp_path / "build.log").read_text()
    assert f"parameter_count: {count}" in log
    assert "assumptions:" in log and "spatial sizes: [250, 125, 62, 31, 15, 7, 3, 1, 1]" in log

    desk = (
        conv_count(1, 8) + conv_count(8, 16) + conv_count(16, 32) + 3 * conv_count(32, 32)
        + 2 * (8 + 16 + 4 * 32)
        + conv_count(32, 32) + 2 * conv_count(64, 32) + conv_count(64, 16) + conv_count(32, 8)
        + 2 * (3 * 32 + 16 + 8)
        + conv_count(16, 8)
        + 8 * 2 + 2
    )
    assert parameter_count(build(ModelConfig.desk())) == desk
    print(f"full-size profile count {count} ({(count - 54_653_008) / 54_653_008:+.3%}); desk count {desk}")


# -- 4 and 5 ------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_run():
    corpus = generate_synthetic(SyntheticParams(seed=0), 54, 40)
    train_set, test_set = holdout_split(corpus, 44, 30, seed=0)
    net = build(ModelConfig.desk(seed=0))
    start = time.perf_counter()
    with threadpool_limits(limits=1):
        history = train(net, train_set, TrainSettings(epochs=30, augment=True, seed=0))
    elapsed = time.perf_counter() - start
    return net, train_set, test_set, history, elapsed


@pytest.mark.slow
@pytest.mark.criterion(4, "desk training reaches test accuracy >= 0.90 within 30 epochs (< 10 min)")
def test_end_to_end_learning(desk_run):
    net, _, test_set, history, elapsed = desk_run
    assert len(test_set) == 20 and test_set.class_counts == {GOOD: 10, BAD: 10}
    probs, _ = predict(net, test_set.items)
    acc = accuracy(probs, test_set.items)
    print(f"test accuracy {acc:.3f} after {history[-1].epoch} epochs in {elapsed:.0f}s")
    assert acc >= 0.90
    assert elapsed < 600


@pytest.mark.slow
@pytest.mark.criterion(5, "weak segmentation mean IoU >= 0.30 at tau 0.5; post-processing never adds pixels")
def test_weak_segmentation_quality(desk_run):
    net, _, test_set, _, _ = desk_run
    z = StructuringElement.for_image(64)
    scores = []
    for item in test_set:
        heat, mask = segment(net, item.pixels, 0.5, z)
        assert mask.sum() <= threshold(heat, 0.5).sum()
        assert not (mask & ~threshold(heat, 0.5)).any()
        scores.append(iou(mask, item.truth_mask))
    print(f"mean IoU {np.mean(scores):.3f} over {len(scores)} test images")
    assert np.mean(scores) >= 0.30


# -- 6 ----------------------------------------------------------------------------------------


@pytest.mark.criterion(6, "opening idempotent / anti-extensive / increasing; erosion-dilation duality")
def test_morphology_identities():
    rng = np.random.default_rng(0)
    for z in (StructuringElement.square(5), StructuringElement.square(20), StructuringElement(4, 6)):
        for _ in range(100):
            a = rng.random((64, 64)) < rng.uniform(0.3, 0.9)
            b = a | (rng.random((64, 64)) < 0.1)
            oa = opening(a, z)
            assert np.array_equal(opening(oa, z), oa)
            assert not (oa & ~a).any()
            assert not (oa & ~opening(b, z)).any()
            assert np.array_equal(erode(a, z), ~dilate(~a, z.reflected(), border_value=True))


# -- 7 ----------------------------------------------------------------------------------------


@pytest.mark.criterion(7, "bag label equals existence oracle on all 2^8 label vectors")
def test_mil_labeling():
    for labels in itertools.product((GOOD, BAD), repeat=8):
        assert mil_bag_label(labels) == (GOOD if any(y == GOOD for y in labels) else BAD)


# -- 8 ----------------------------------------------------------------------------------------


@pytest.mark.criterion(8, "AUC equals pairwise oracle (1e-12) on 200 sets; baseline row 0.90/1.0/0.8/0.89")
def test_metrics_oracle():
    rng = np.random.default_rng(0)
    for i in range(200):
        n = int(rng.integers(4, 60))
        labels = rng.choice([1, -1], n)
        labels[:2] = [1, -1]
        scores = rng.random(n) if i % 2 else rng.integers(0, 5, n) / 4
        assert abs(auc(scores, labels) - pairwise_auc(scores, labels)) < 1e-12
    rep = confusion(tp=8, fp=0, tn=10, fn=2)
    assert (round(rep.accuracy, 2), round(rep.precision, 2), round(rep.recall, 2), round(rep.f1, 2)) == (0.90, 1.0, 0.8, 0.89)


# -- 9 ----------------------------------------------------------------------------------------


@pytest.mark.criterion(9, "untrained network on a balanced batch gives cross-entropy 0.69 +/- 0.1")
def test_loss_sanity():
    corpus = generate_synthetic(SyntheticParams(seed=1), 4, 4)
    net = build(ModelConfig.desk())
    logits, _ = net.forward(to_batch(corpus.items), training=False)
    loss = F.softmax_cross_entropy(logits, [1] * 4 + [0] * 4).item()
    print(f"untrained loss {loss:.4f}")
    assert abs(loss - 0.69) <= 0.1


# -- 10 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(10, "identical seeded train runs give identical checkpoints; save/load forward is bitwise")
def test_determinism_and_persistence(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), "--n-good", "4", "--n-bad", "4", "--seed", "7"]) == 0
    args = ["--dataset", str(data), "--epochs", "1", "--train-good", "3", "--train-bad", "3", "--seed", "7"]
    assert main(["train", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["train", "--out", str(tmp_path / "b"), *args]) == 0
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()

    net = load_checkpoint(tmp_path / "a" / "model.ckpt")
    x = np.random.default_rng(0).random((3, 1, 64, 64))
    before = [t.data.copy() for t in net.forward(x)]
    save_checkpoint(net, tmp_path / "again.ckpt")
    after = [t.data for t in load_checkpoint(tmp_path / "again.ckpt").forward(x)]
    for b, a in zip(before, after):
        assert np.array_equal(a, b)


# -- 11 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(11, "logged learning rate equals 1e-4 * 0.9^floor(t/20000), floored at 1e-5")
def test_schedule(tmp_path):
    # a 4x4, one-layer model trained with batch size 1 on 200 images reaches iteration 40000 in ~30 s
    rng = np.random.default_rng(0)
    items = [LabeledImage(f"img_{i:03d}", rng.random((4, 4)), GOOD if i % 2 else BAD) for i in range(200)]
    save_dataset(Dataset(items), tmp_path / "data")
    rc = main([
        "train", "--dataset", str(tmp_path / "data"), "--out", str(tmp_path / "run"),
        "--input-size", "4", "--set", "depth=1", "--set", "base_channels=1", "--set", "max_channels=1",
        "--set", "dropout_layers=0", "--batch-size", "1", "--no-augment", "--epochs", "201",
        "--train-good", "100", "--train-bad", "100",
    ])
    assert rc == 0
    lines = (tmp_path / "run" / "train_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,iteration,lr,train_loss,train_acc"
    logged = {}
    for line in lines[1:]:
        _, t, lr, _, _ = line.split(",")
        logged[int(t)] = float(lr)
    for t, lr in logged.items():
        assert lr == pytest.approx(max(1e-5, 1e-4 * 0.9 ** (t // 20000)), rel=1e-12)
    assert logged[40000] == pytest.approx(8.1e-5, rel=1e-12)
    assert logged[20000] == pytest.approx(9e-5, rel=1e-12)
    assert max(logged) == 40200
