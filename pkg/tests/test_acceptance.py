"""End-to-end acceptance criteria.

Every test appends a one-line verdict to ``VERDICTS``; ``conftest.py`` prints
them after the run so they show up even without ``-s``.
"""
import time

import numpy as np
import pytest

from brassica_cnn import cli
from brassica_cnn import data as D
from brassica_cnn import gradcheck as G
from brassica_cnn import layers as L
from brassica_cnn.checkpoint import CrcError, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from brassica_cnn.metrics import ConfusionMatrix, report
from brassica_cnn.net import (
    ConvSpec,
    DenseSpec,
    DropoutSpec,
    FlattenSpec,
    PoolSpec,
    ReluSpec,
    SoftmaxSpec,
    build_brassica_net,
    build_mini_net,
)
from brassica_cnn.synthetic import write_synthetic
from brassica_cnn.tensor import Rng
from brassica_cnn.train import TrainConfig, evaluate, sweep, train

import reference as ref

VERDICTS = []


def verdict(number, title, ok, detail):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    write_synthetic(root, n_per_class=60, size=128, seed=0)
    return root


@pytest.fixture(scope="module")
def synthetic_splits(synthetic_root):
    s = D.split(D.scan(synthetic_root), (0.5, 0.2, 0.3), seed=0)
    return [D.load_arrays(s.part(name), 128) for name in D.SPLIT_NAMES]


def rand(rng, *shape, scale=1.0):
    return (rng.random(int(np.prod(shape))).reshape(shape) * 2 - 1) * scale


# ---------------------------------------------------------------- 1
def test_1_published_report_reproduced():
    r = report(ConfusionMatrix(ref.CONFUSION))

    def four(m):
        return (round(m.precision, 4), round(m.recall, 4), round(m.f1, 4), m.support)

    rows = [four(m) for m in r.classes]
    bad = [i for i, (got, want) in enumerate(zip(rows, ref.CLASS_ROWS)) if got != want]
    ok = (not bad and (round(r.accuracy, 4), r.total) == ref.ACCURACY
          and four(r.macro) == ref.MACRO and four(r.weighted) == ref.WEIGHTED)
    verdict(1, "report from published confusion matrix", ok,
            f"accuracy {r.accuracy:.4f}, macro f1 {r.macro.f1:.4f}, weighted f1 {r.weighted.f1:.4f}, "
            f"mismatched rows {bad}")


# ---------------------------------------------------------------- 2
@pytest.mark.slow
def test_2_synthetic_training_reaches_95(synthetic_splits):
    (xtr, ytr), (xva, yva), (xte, yte) = synthetic_splits
    start = time.perf_counter()
    cfg = TrainConfig(learning_rate=0.001, batch_size=64, epochs=60, seed=0)
    _, net = train(build_brassica_net(Rng(0)), (xtr, ytr), (xva, yva), cfg)
    _, acc, _ = evaluate(net, xte, yte)
    minutes = (time.perf_counter() - start) / 60
    verdict(2, "full network on 10-class synthetic set", acc >= 0.95 and minutes < 30,
            f"test accuracy {acc:.4f} after 60 epochs in {minutes:.1f} min")


# ---------------------------------------------------------------- 3
def layer_cases(seed):
    rng = Rng(seed)
    conv = {"weight": rand(rng, 3, 2, 3, 3), "bias": rand(rng, 3)}
    conv5 = {"weight": rand(rng, 2, 2, 5, 5), "bias": rand(rng, 2)}
    dense = {"weight": rand(rng, 3, 4), "bias": rand(rng, 3)}
    relu_x = rand(rng, 2, 3, 4, 4)
    relu_x[np.abs(relu_x) < 1e-2] = 0.5
    return [
        ("conv3", ConvSpec(2, 3, 3, 1, 1), rand(rng, 1, 2, 5, 5), conv, False),
        ("conv5s3", ConvSpec(2, 2, 5, 3, 0), rand(rng, 2, 2, 11, 11), conv5, False),
        ("pool", PoolSpec(3, 3), rand(rng, 2, 2, 9, 9), {}, False),
        ("relu", ReluSpec(), relu_x, {}, False),
        ("dropout", DropoutSpec(0.5), rand(rng, 2, 3, 2, 2), {}, True),
        ("flatten", FlattenSpec(), rand(rng, 2, 3, 2, 2), {}, False),
        ("dense", DenseSpec(4, 3), rand(rng, 2, 4, 1, 1), dense, False),
        ("softmax", SoftmaxSpec(), rand(rng, 3, 5, 1, 1, scale=3.0), {}, False),
    ]


def test_3_gradient_checks():
    start = time.perf_counter()
    layer_worst, seeds = 0.0, range(20)
    for seed in seeds:
        for _, spec, x, params, train_mode in layer_cases(seed):
            res = G.gradient_check(spec, x, params, seed=seed, train=train_mode)
            layer_worst = max(layer_worst, res.max_rel_error)
        rng = Rng(seed)
        logits = rand(rng, 4, 10, scale=3.0)
        layer_worst = max(layer_worst, G.softmax_ce_check(logits, [rng.integer(10) for _ in range(4)]).max_rel_error)

    net_worst, skipped, checked = 0.0, 0, 0
    for seed in seeds:
        rng = Rng(1000 + seed)
        net = build_mini_net(Rng(seed), 16, dtype=np.float64)
        # non-zero biases keep pre-activations off the ReLU kink
        for group in net.params:
            if "bias" in group:
                group["bias"][:] = rand(rng, *group["bias"].shape, scale=0.1)
        x = rand(rng, 4, 3, 16, 16)
        labels = [rng.integer(10) for _ in range(4)]
        res = G.network_check(net, x, labels, seed=seed, max_coords=60)
        net_worst = max(net_worst, res.max_rel_error)
        skipped += res.skipped
        checked += res.checked
    seconds = time.perf_counter() - start
    ok = layer_worst < 1e-6 and net_worst < 1e-4 and seconds < 120
    verdict(3, "finite-difference gradient checks", ok,
            f"worst layer {layer_worst:.2e}, worst end-to-end {net_worst:.2e} over {len(seeds)} seeds "
            f"({checked} coords, {skipped} skipped at kinks), {seconds:.0f} s")


# ---------------------------------------------------------------- 4
def test_4_architecture():
    net = build_brassica_net(Rng(0))
    spatial = sorted({h for _, h, w in net.shapes if h == w and h > 1}, reverse=True)
    flat = net.shapes[15]
    convs = [(5, 3, 32), (3, 32, 32), (3, 32, 64), (3, 64, 64), (3, 64, 128)]
    closed = sum(k * k * i * o + o for k, i, o in convs) + sum(i * o + o for i, o in [(512, 512), (512, 512), (512, 10)])
    ok = (len(net) == 23 and spatial == [128, 42, 14, 4, 2] and flat == (512, 1, 1)
          and net.num_params() == closed == 671_402)
    verdict(4, "architecture conformance", ok,
            f"{len(net)} layers, spatial {spatial}, flatten {flat[0]}, {net.num_params():,} parameters")


# ---------------------------------------------------------------- 5
def test_5_fast_conv_matches_loops():
    gen = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        k = int(gen.choice([3, 5]))
        stride, pad = int(gen.integers(1, 4)), int(gen.integers(0, 3))
        h, w = (int(v) for v in gen.integers(k, 14, size=2))
        n, cin, cout = (int(v) for v in gen.integers(1, 4, size=3))
        x = gen.uniform(-1, 1, (n, cin, h, w)).astype(np.float32)
        p = L.ConvParams(gen.uniform(-1, 1, (cout, cin, k, k)).astype(np.float32),
                         gen.uniform(-1, 1, cout).astype(np.float32), stride, pad)
        worst = max(worst, float(np.abs(L.conv2d_forward(x, p) - L.conv2d_reference(x, p)).max()))
    verdict(5, "fast convolution vs nested loops", worst <= 1e-5, f"max abs difference {worst:.2e} over 100 cases")


# ---------------------------------------------------------------- 6
@pytest.mark.slow
def test_6_strict_runs_are_bitwise_identical(tmp_path):
    root = tmp_path / "data"
    write_synthetic(root, n_per_class=8, size=128, seed=3)
    outputs = []
    for name in ("first", "second"):
        cfg = tmp_path / f"{name}.cfg"
        cfg.write_text(f"data_root = {root}\nout_dir = {tmp_path / name}\nepochs = 3\nbatch_size = 16\n"
                       "seed = 11\nstrict_deterministic = true\n")
        assert cli.run(["train", "--config", str(cfg)]) == 0
        outputs.append(((tmp_path / name / "train_log.csv").read_bytes(),
                        (tmp_path / name / "final.ckpt").read_bytes()))
    same_log = outputs[0][0] == outputs[1][0]
    same_ckpt = outputs[0][1] == outputs[1][1]
    verdict(6, "strict-mode determinism", same_log and same_ckpt,
            f"train_log.csv identical: {same_log}, final.ckpt identical: {same_ckpt} "
            f"({len(outputs[0][1])} bytes)")


# ---------------------------------------------------------------- 7
@pytest.mark.slow
def test_7_sweep_seconds_fall_with_batch_size(synthetic_splits):
    train_xy, val_xy, test_xy = synthetic_splits
    res = sweep(lambda: build_brassica_net(Rng(0)), train_xy, val_xy, test_xy, TrainConfig(epochs=3),
                batch_sizes=[8, 16, 32, 64])
    secs = [r.seconds_per_epoch for r in res.rows]
    ok = all(a > b for a, b in zip(secs, secs[1:]))
    verdict(7, "seconds/epoch strictly decreasing over batch 8..64", ok,
            ", ".join(f"{r.setting} {r.seconds_per_epoch:.3f}s" for r in res.rows))


# ---------------------------------------------------------------- 8
def test_8_checkpoint_round_trip(tmp_path):
    net = build_brassica_net(Rng(21))
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(net, a)
    save_checkpoint(load_checkpoint(a), b)
    identical = a.read_bytes() == b.read_bytes()
    data = to_bytes(net)
    payload_start = len(data) - 4 - 4 * net.num_params()
    gen = np.random.default_rng(8)
    caught = 0
    positions = gen.integers(payload_start, len(data) - 4, size=25)
    for pos in positions:
        corrupt = bytearray(data)
        corrupt[pos] ^= int(gen.integers(1, 256))
        try:
            from_bytes(bytes(corrupt))
        except CrcError:
            caught += 1
    verdict(8, "checkpoint round trip and CRC", identical and caught == len(positions),
            f"save-load-save identical: {identical}, corruptions caught {caught}/{len(positions)}")


# ---------------------------------------------------------------- 9
def test_9_split_on_dataset_counts(tmp_path):
    for name, count in zip(D.CLASS_NAMES, D.CLASS_COUNTS):
        d = tmp_path / name
        d.mkdir()
        for i in range(count):
            (d / f"{i:04d}.ppm").touch()
    # placeholders are empty, so skip the decode probe
    manifest = D.scan(tmp_path, verify=False)
    ratios = (0.5, 0.2, 0.3)
    s = D.split(manifest, ratios, seed=2024)
    parts = [{p for p, _ in s.part(n)} for n in D.SPLIT_NAMES]
    disjoint = all(not (parts[i] & parts[j]) for i in range(3) for j in range(i + 1, 3))
    exhaustive = set().union(*parts) == {p for p, _ in manifest.entries}
    deviation = 0.0
    for cid, count in enumerate(D.CLASS_COUNTS):
        for name, r in zip(D.SPLIT_NAMES, ratios):
            got = sum(1 for _, c in s.part(name) if c == cid)
            deviation = max(deviation, abs(got - r * count))
    repeat = D.split(D.scan(tmp_path, verify=False), ratios, seed=2024) == s
    ok = disjoint and exhaustive and deviation <= 1 and repeat and manifest.total == 5925
    verdict(9, "stratified split on the dataset's class counts", ok,
            f"{manifest.total} files -> {len(s.train)}/{len(s.val)}/{len(s.test)}, max deviation {deviation:.1f}, "
            f"disjoint {disjoint}, exhaustive {exhaustive}, reproducible {repeat}")
