"""Acceptance suite: one test per primary criterion, one PASS/FAIL line each.

The lines are printed as each criterion finishes and collected again in the
pytest terminal summary (see conftest.py).
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from dualenc.config import TrainConfig, apply_overrides
from dualenc.contrastive import PairBatch, compute_gradients, loss_and_gradient, pooled_gradients
from dualenc.datapipe import (
    AugmentParams,
    FrameMatrix,
    chunk_frames,
    fmat_read,
    fmat_write,
    gen_synthetic,
    pad_or_crop,
    read_manifest,
    sample_crop,
)
from dualenc.encoders import ConvBlock, DualEncoder, EncoderConfig, l2_normalize, l2_normalize_backward
from dualenc.retrieval import EmbeddingIndex, evaluate_split, recall_at_k, search
from dualenc.tensor import Conv1d, Dense, MaskedMeanPool, ReLU
from dualenc.training import build_model, read_log, train

from oracles import bidirectional_loss_scalar, central_difference, max_rel_error, topk_full_sort
from test_training import tree_bytes

RESULTS = []


@contextmanager
def criterion(name):
    notes = []
    start = time.perf_counter()
    try:
        yield notes
    except BaseException as e:
        _emit(f"FAIL  {name}  {type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}")
        raise
    notes.append(f"{time.perf_counter() - start:.1f}s")
    _emit(f"PASS  {name}  " + "; ".join(notes))


def _emit(line):
    RESULTS.append(line)
    print(line)


# -- gradient oracle -------------------------------------------------------------------

def _check_layer(layer, x, upstream, forward_kwargs=None):
    """Max relative error over weights, bias and input for sum(forward(x) * upstream)."""
    kwargs = forward_kwargs or {}

    def loss():
        return float(np.sum(layer.forward(x, **kwargs) * upstream))

    errors = []
    params = list(layer.params().values())
    for p in params:
        p.zero_grad()
    loss()
    gx = layer.backward(upstream)
    errors.append(max_rel_error(gx, central_difference(loss, x)))
    for p in params:
        errors.append(max_rel_error(p.grad_weights, central_difference(loss, p.weights)))
        errors.append(max_rel_error(p.grad_bias, central_difference(loss, p.bias)))
    return max(errors)


def _away_from_kink(x):
    x[np.abs(x) < 1e-3] = 0.5
    return x


def _gradient_instances(seed):
    """(layer type, max relative error) for one random instance of every layer type."""
    rng = np.random.default_rng(seed)
    f64 = np.float64

    dense = Dense(4, 3, rng=rng, dtype=f64)
    dense.p.bias[...] = rng.normal(size=3)
    x = rng.normal(size=(5, 4))
    yield "dense", _check_layer(dense, x, rng.normal(size=(5, 3)))

    for stride, padding in ((1, "same"), (2, "same"), (1, "valid"), (3, "valid")):
        conv = Conv1d(3, 2, int(rng.integers(1, 5)), stride, padding, rng=rng, dtype=f64)
        conv.p.bias[...] = rng.normal(size=2)
        x = rng.normal(size=(2, 9, 3))
        y = conv.forward(x)
        yield f"conv1d/{padding}/s{stride}", _check_layer(conv, x, rng.normal(size=y.shape))

    x = _away_from_kink(rng.normal(size=(3, 5, 2)))
    yield "relu", _check_layer(ReLU(), x, rng.normal(size=x.shape))

    x = rng.normal(size=(3, 6, 4))
    valid = rng.integers(1, 7, size=3)
    yield "masked_mean_pool", _check_layer(MaskedMeanPool(), x, rng.normal(size=(3, 4)),
                                           {"valid": valid})

    block = ConvBlock(3, 3, 3, 1, "same", True, rng, f64)
    block.conv.p.bias[...] = rng.normal(size=3) * 0.1
    x = rng.normal(size=(2, 7, 3))
    valid = np.array([7, 4])
    up = rng.normal(size=(2, 7, 3))

    def block_loss():
        return float(np.sum(block.forward(x, valid)[0] * up))

    block.conv.p.zero_grad()
    block_loss()
    gx = block.backward(up)
    err = max(max_rel_error(gx, central_difference(block_loss, x)),
              max_rel_error(block.conv.p.grad_weights,
                            central_difference(block_loss, block.conv.p.weights)),
              max_rel_error(block.conv.p.grad_bias,
                            central_difference(block_loss, block.conv.p.bias)))
    yield "residual_conv_block", err

    x = rng.normal(size=(4, 5))
    up = rng.normal(size=(4, 5))
    y, norms = l2_normalize(x)
    gx = l2_normalize_backward(y, norms, up)
    yield "l2_normalize", max_rel_error(
        gx, central_difference(lambda: float(np.sum(l2_normalize(x)[0] * up)), x))

    S = rng.normal(size=(int(rng.integers(1, 9)),) * 2) * 3
    _, grad = loss_and_gradient(S)
    yield "bidirectional_loss", max_rel_error(
        grad, central_difference(lambda: loss_and_gradient(S)[0], S))


def test_gradient_oracle():
    with criterion("gradient oracle (h=1e-5, 64-bit, rel < 1e-5, >=10 instances, < 60 s)") as notes:
        start = time.perf_counter()
        worst, counts = {}, {}
        for seed in range(12):
            for name, err in _gradient_instances(seed):
                worst[name] = max(worst.get(name, 0.0), err)
                counts[name] = counts.get(name, 0) + 1
        elapsed = time.perf_counter() - start
        assert min(counts.values()) >= 10, counts
        bad = {k: v for k, v in worst.items() if not v < 1e-5}
        assert not bad, f"relative error too large: {bad}"
        assert elapsed < 60, f"took {elapsed:.1f}s"
        notes.append(f"{len(worst)} layer types x {min(counts.values())} instances, "
                     f"worst rel err {max(worst.values()):.1e}")


# -- loss value oracle ------------------------------------------------------------------

def test_loss_value_oracle():
    with criterion("loss value oracle (1x1 exact, 2x2 identity 1e-6, shift 1e-9)") as notes:
        assert loss_and_gradient(np.array([[3.7]]))[0] == 0.0
        value = loss_and_gradient(np.eye(2))[0]
        scalar = bidirectional_loss_scalar(np.eye(2))
        closed = math.log(1 + math.exp(-1))
        assert abs(value - scalar) < 1e-6 and abs(value - closed) < 1e-6
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            b = int(rng.integers(1, 12))
            S = rng.normal(size=(b, b)) * rng.uniform(0.1, 10)
            c = rng.uniform(-50, 50)
            worst = max(worst, abs(loss_and_gradient(S)[0] - loss_and_gradient(S + c)[0]))
        assert worst < 1e-9, worst
        notes.append(f"2x2 {value:.12f}; worst shift gap {worst:.1e}")


# -- replica pooling --------------------------------------------------------------------

def _replica_model(precision, seed):
    speech = EncoderConfig(kind="shallow-cnn", widths=[6, 5, 4], kernels=[3, 5, 7],
                           strides=[1, 1, 1], input_dim=3, embed_dim=8)
    image = EncoderConfig(kind="projection-only", widths=[], kernels=[], strides=[],
                          input_dim=5, embed_dim=8)
    return DualEncoder(speech, image, seed=seed, precision=precision)


def test_replica_pooling_equivalence():
    with criterion("replica pooling equivalence (N,K) in {(1,8),(2,4),(4,2),(4,8)}") as notes:
        tolerances = {"float64": 1e-6, "float32": 1e-4}
        for precision, tol in tolerances.items():
            worst = 0.0
            for n, k in ((1, 8), (2, 4), (4, 2), (4, 8)):
                rng = np.random.default_rng(10 * n + k)
                b = n * k
                batch = PairBatch(rng.normal(size=(b, 12, 3)), rng.integers(1, 13, size=b),
                                  rng.normal(size=(b, 5)))
                plain, pooled = _replica_model(precision, n), _replica_model(precision, n)
                gap = abs(compute_gradients(plain, batch) - pooled_gradients(pooled, batch.split(n)))
                assert gap < tol, (precision, n, k, "loss", gap)
                worst = max(worst, gap)
                pooled_grads = pooled.grad_arrays()
                for name, g in plain.grad_arrays().items():
                    gap = float(np.max(np.abs(pooled_grads[name].astype(np.float64) - g)))
                    assert gap < tol, (precision, n, k, name, gap)
                    worst = max(worst, gap)
            notes.append(f"{precision} worst gap {worst:.1e} (tol {tol:g})")


# -- retrieval oracle -------------------------------------------------------------------

def test_retrieval_oracle():
    with criterion("retrieval oracle (1000 x {32,257}, 100 queries, k in {1,5,10}; 3x3 recall)") as notes:
        for dim in (32, 257):
            rng = np.random.default_rng(dim)
            corpus, queries = rng.normal(size=(1000, dim)), rng.normal(size=(100, dim))
            index = EmbeddingIndex(corpus, [f"doc{i}" for i in range(1000)], block_size=300)
            for k in (1, 5, 10):
                rows, _ = search(index, queries, k)
                for q in range(100):
                    expected = topk_full_sort(corpus, queries[q], k)
                    assert [index.ids[r] for r in rows[q]] == [f"doc{i}" for i in expected]
        S = np.array([[5.0, 1.0, 0.0], [0.5, 2.0, 3.0], [0.0, 1.0, 4.0]])
        assert recall_at_k(np.eye(3), S.T, 1) == 2 / 3
        assert recall_at_k(np.eye(3), S.T, 2) == 1.0
        notes.append("600 query rankings identical; 3x3 recall 2/3 and 1.0")


# -- desk-scale learning ----------------------------------------------------------------

DESK = {
    "seed": "7",
    "max_steps": "2000",
    "eval_interval": "500",
    "k_list": "1,5,10",
    "model.embed_dim": "64",
    "replicas.n_replicas": "2",
    "replicas.per_replica": "32",
    "speech.kind": "shallow-cnn",
    "speech.widths": "32,32,32",
    "speech.kernels": "5,11,25",
    "speech.strides": "1,1,1",
    "speech.input_dim": "32",
    "image.input_dim": "32",
    "data.target_frames": "64",
}


def _desk_corpus(root):
    gen_synthetic(root, n_pairs=256, dev_pairs=64, latent_dim=16, speech_T=64, speech_D=32,
                  image_D=32, noise_sigma=0.1, seed=7)
    return root / "manifest.tsv"


@pytest.mark.slow
def test_desk_scale_learning(tmp_path):
    with criterion("desk-scale learning (train R@1 >= 0.99, dev R@1 >= 0.5, < 5 min, "
                   "chance < 0.05)") as notes:
        start = time.perf_counter()
        manifest_path = _desk_corpus(tmp_path / "corpus")
        config = apply_overrides(TrainConfig(), dict(DESK, **{"data.manifest": str(manifest_path)}))
        manifest = read_manifest(manifest_path)
        assert len(manifest.split("train")) == 256 and len(manifest.split("dev")) == 64

        chance = evaluate_split(build_model(config), manifest, "train", [1], 64)
        model, _ = train(config, tmp_path / "run")
        trained = evaluate_split(model, manifest, "train", [1], 64)
        dev = evaluate_split(model, manifest, "dev", [1], 64)
        elapsed = time.perf_counter() - start

        for direction in ("speech_to_image", "image_to_speech"):
            key = f"r_at_1.{direction}"
            assert chance[key] < 0.05, ("chance", key, chance[key])
            assert trained[key] >= 0.99, ("train", key, trained[key])
            assert dev[key] >= 0.5, ("dev", key, dev[key])
        assert elapsed < 300, f"took {elapsed:.0f}s"
        notes.append("train R@1 {:.3f}/{:.3f}, dev R@1 {:.3f}/{:.3f}, chance {:.3f}/{:.3f}".format(
            trained["r_at_1.speech_to_image"], trained["r_at_1.image_to_speech"],
            dev["r_at_1.speech_to_image"], dev["r_at_1.image_to_speech"],
            chance["r_at_1.speech_to_image"], chance["r_at_1.image_to_speech"]))


# -- batch-size mechanics ---------------------------------------------------------------

@pytest.mark.slow
def test_batch_size_mechanics(tmp_path):
    """Loss logged every 20 steps over 200 steps; its 5-point moving average must fall."""
    with criterion("batch-size mechanics (global batch 64 and 128, 5-point MA decreasing)") as notes:
        manifest_path = _desk_corpus(tmp_path / "corpus")
        for n_replicas in (2, 4):
            config = apply_overrides(TrainConfig(), dict(DESK, **{
                "data.manifest": str(manifest_path), "max_steps": "200", "eval_interval": "200",
                "replicas.n_replicas": str(n_replicas)}))
            train(config, tmp_path / f"run{n_replicas}")
            steps, _ = read_log(tmp_path / f"run{n_replicas}" / "train.log")
            assert len(steps) == 200
            logged = np.array([s["loss"] for s in steps])[::20]
            moving = np.convolve(logged, np.ones(5) / 5, mode="valid")
            assert np.all(np.diff(moving) < 0), (config.replicas.global_batch, moving)
            notes.append(f"B={config.replicas.global_batch}: MA {moving[0]:.3f} -> {moving[-1]:.3f}")


# -- format and reproducibility ---------------------------------------------------------

def test_format_and_reproducibility(tiny_config, tmp_path):
    with criterion("format/reproducibility (FMAT bit-exact, identical runs, resume)") as notes:
        rng = np.random.default_rng(0)
        shapes = [(0, 0), (0, 5), (5, 0), (1, 1)] + [tuple(rng.integers(1, 40, size=2))
                                                     for _ in range(50)]
        for shape in shapes:
            m = (rng.normal(size=shape) * 10 ** rng.uniform(-30, 30)).astype(np.float32)
            data = fmat_write(m)
            back = fmat_read(data)
            assert back.shape == m.shape and back.tobytes() == m.tobytes()
            assert fmat_write(back) == data

        train(tiny_config(), tmp_path / "a")
        train(tiny_config(), tmp_path / "b")
        a = tree_bytes(tmp_path / "a")
        assert a == tree_bytes(tmp_path / "b")

        train(tiny_config(max_steps=3), tmp_path / "c")
        train(tiny_config(), tmp_path / "c", resume=tmp_path / "c" / "ckpt-000003")
        c = tree_bytes(tmp_path / "c")
        assert a.keys() == c.keys()
        for name in a:
            # manifests of checkpoints written before the resume record max_steps=3
            if name.endswith("checkpoint.txt") and not name.startswith("ckpt-000006"):
                continue
            assert a[name] == c[name], name
        notes.append(f"{len(shapes)} FMAT shapes; {len(a)} run files identical across runs and resume")


# -- preprocessing contracts ------------------------------------------------------------

def test_preprocessing_contracts():
    with criterion("preprocessing contracts (pad/crop, chunking, 1000 crops >= 0.67 area)") as notes:
        rng = np.random.default_rng(0)
        for _ in range(200):
            t, target = int(rng.integers(1, 400)), int(rng.integers(1, 400))
            fm = FrameMatrix(rng.normal(size=(t, 3)))
            out = pad_or_crop(fm, target)
            assert out.frames.shape == (target, 3)
            again = pad_or_crop(out, target)
            assert again.frames.tobytes() == out.frames.tobytes()
            assert again.valid_frames == out.valid_frames == min(t, target)

            window = int(rng.integers(1, 150))
            chunks = chunk_frames(fm, window)
            assert len(chunks) == -(-t // window)
            rebuilt = np.concatenate([c.frames for c in chunks])[:t]
            assert rebuilt.tobytes() == fm.frames.tobytes()

        floor = AugmentParams().min_area_fraction
        worst = 1.0
        for seed in range(1000):
            r = np.random.default_rng(seed)
            h, w = int(r.integers(1, 500)), int(r.integers(1, 500))
            _, _, ch, cw = sample_crop(h, w, floor, r)
            fraction = ch * cw / (h * w)
            assert fraction >= floor, (seed, h, w, ch, cw)
            worst = min(worst, fraction)
        notes.append(f"200 pad/crop/chunk cases; smallest crop area fraction {worst:.4f}")
