"""Decoder blocks, cosine maps, loss decomposition, training gradients."""
import dataclasses

import numpy as np
import pytest

from afe import codebook as cbm
from afe import decoder as dec
from afe.dataset import KIND_NONE, DatasetSplit, Sample
from afe.encoder import Encoder, EncoderSpec


# -- fusion blocks ------------------------------------------------------------

def _naive_block(block, in_map):
    c_in, h, w = in_map.shape
    c_out = block["w2"].shape[0]
    out = np.zeros((c_out, h, w))
    for i in range(h):
        for j in range(w):
            hid = np.maximum(block["w1"] @ in_map[:, i, j] + block["b1"], 0.0)
            out[:, i, j] = block["w2"] @ hid + block["b2"]
    return out


def _rand_block(rng, c_in=5, hidden=6, c_out=4):
    return {
        "w1": rng.standard_normal((hidden, c_in)),
        "b1": rng.standard_normal(hidden) * 0.1,
        "w2": rng.standard_normal((c_out, hidden)),
        "b2": rng.standard_normal(c_out) * 0.1,
    }


def test_block_forward_matches_pointwise_oracle():
    rng = np.random.default_rng(70)
    block = _rand_block(rng)
    x = rng.standard_normal((5, 3, 4))
    out, _ = dec.block_forward(block, x)
    assert np.allclose(out, _naive_block(block, x), atol=1e-10)


def test_block_backward_matches_finite_differences():
    rng = np.random.default_rng(71)
    block = _rand_block(rng)
    x = rng.standard_normal((5, 3, 4))
    grad_out = rng.standard_normal((4, 3, 4))

    def loss():
        out, _ = dec.block_forward(block, x)
        return float(np.sum(out * grad_out))

    out, cache = dec.block_forward(block, x)
    grads, grad_in = dec.block_backward(block, cache, grad_out)
    step, rel = 1e-6, 1e-5
    for name in ("w1", "b1", "w2", "b2"):
        flat, gflat = block[name].reshape(-1), grads[name].reshape(-1)
        for i in np.random.default_rng(1).choice(flat.size, min(6, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + step
            up = loss()
            flat[i] = orig - step
            dn = loss()
            flat[i] = orig
            assert (up - dn) / (2 * step) == pytest.approx(gflat[i], rel=rel, abs=1e-8), name
    xf, gf = x.reshape(-1), grad_in.reshape(-1)
    for i in np.random.default_rng(2).choice(xf.size, 6, replace=False):
        orig = xf[i]
        xf[i] = orig + step
        up = loss()
        xf[i] = orig - step
        dn = loss()
        xf[i] = orig
        assert (up - dn) / (2 * step) == pytest.approx(gf[i], rel=rel, abs=1e-8)


# -- cosine error --------------------------------------------------------------

def test_cosine_error_examples():
    v = np.array([[[1.0]], [[2.0]], [[3.0]]])
    assert dec.cosine_error_map(v, 2.5 * v)[0, 0] == pytest.approx(0.0, abs=1e-7)
    a = np.array([[[1.0]], [[0.0]]])
    b = np.array([[[0.0]], [[1.0]]])
    assert dec.cosine_error_map(a, b)[0, 0] == pytest.approx(1.0)
    assert dec.cosine_error_map(a, -a)[0, 0] == pytest.approx(2.0)
    zero = np.zeros((2, 1, 1))
    assert dec.cosine_error_map(zero, zero)[0, 0] == 0.0  # both flat: agreement
    assert dec.cosine_error_map(a, zero)[0, 0] == 1.0  # one flat: mismatch


def test_cosine_error_range_and_shape_check():
    rng = np.random.default_rng(72)
    fe = rng.standard_normal((6, 5, 5))
    fd = rng.standard_normal((6, 5, 5))
    m = dec.cosine_error_map(fe, fd)
    assert m.shape == (5, 5) and (m >= 0).all() and (m <= 2).all()
    with pytest.raises(ValueError, match="differ"):
        dec.cosine_error_map(fe, fd[:, :4])


def test_cosine_backward_matches_finite_differences():
    rng = np.random.default_rng(73)
    fe = rng.standard_normal((4, 3, 3))
    fd = rng.standard_normal((4, 3, 3))
    grad_m = rng.standard_normal((3, 3))
    _, cache = dec._cosine_forward(fe, fd)
    g = dec._cosine_backward(fe, fd, cache, grad_m)
    step = 1e-6
    flat, gflat = fd.reshape(-1), g.reshape(-1)
    for i in np.random.default_rng(3).choice(flat.size, 8, replace=False):
        orig = flat[i]
        flat[i] = orig + step
        up = float(np.sum(dec._cosine_forward(fe, fd)[0] * grad_m))
        flat[i] = orig - step
        dn = float(np.sum(dec._cosine_forward(fe, fd)[0] * grad_m))
        flat[i] = orig
        assert (up - dn) / (2 * step) == pytest.approx(gflat[i], rel=1e-4, abs=1e-8)


# -- loss bundle ----------------------------------------------------------------

def _toy_levels(rng):
    return {k: rng.standard_normal((4, 8 >> (k - 1), 8 >> (k - 1))) for k in (1, 2, 3, 4)}


def test_loss_bundle_decomposes_bitwise():
    rng = np.random.default_rng(74)
    fe, fd = _toy_levels(rng), _toy_levels(rng)
    x = rng.standard_normal((1, 16, 16))
    xp = rng.standard_normal((1, 16, 16))
    lambdas = (0.7, 2.0, 1.3)
    bundle, _, _ = dec.loss_bundle(fe, fd, x, xp, l_vq=0.425, lambdas=lambdas)
    assert bundle.l_total == 0.7 * bundle.l_cos + 2.0 * bundle.l_mse + 1.3 * bundle.l_vq
    assert bundle.l_vq == 0.425
    diff = xp - x
    assert bundle.l_mse == pytest.approx(float(np.mean(diff * diff)))


def test_loss_bundle_rejects_non_finite():
    rng = np.random.default_rng(75)
    fe, fd = _toy_levels(rng), _toy_levels(rng)
    x = rng.standard_normal((1, 16, 16))
    bad = x.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="x_prime"):
        dec.loss_bundle(fe, fd, x, bad, l_vq=0.0)


# -- training step gradients ------------------------------------------------------

@dataclasses.dataclass
class _Cfg:
    d_entries: int = 5
    d_g: int = 6
    lambdas: tuple = (1.0, 1.0, 1.0)
    lr: float = 1e-3
    codebook_lr: float = 0.05
    epochs: int = 2
    seed: int = 0
    joint_theta: bool = True


def _toy_problem(seed=80):
    rng = np.random.default_rng(seed)
    chans = (8, 16, 32, 64, 64)
    feats = {k: rng.standard_normal((chans[k - 1], 32 >> (k - 1), 32 >> (k - 1))).astype(np.float32)
             for k in (1, 2, 3, 4)}
    bottleneck = rng.standard_normal((64, 1, 1)).astype(np.float32)
    image = rng.random((1, 64, 64))
    model = dec.init_model(level_channels=chans, d_g=6, d_entries=5, seed=3)
    projectors = {k: cbm.ContextProjector.create(k, chans[k - 1], seed=4) for k in (1, 2, 3, 4)}
    codebooks = {}
    for k in (1, 2, 3, 4):
        z = cbm.context_project(feats[k], projectors[k])
        codebooks[k] = cbm.init_codebook(k, z.astype(np.float64), 5, seed=4)
        codebooks[k].entries = codebooks[k].entries.astype(np.float64)
    return model, feats, bottleneck, image, codebooks, projectors


def _total(model, feats, bottleneck, image, codebooks, projectors, emb=None):
    bundle, _ = dec.training_step(
        model, feats, bottleneck, "default", codebooks, projectors, image,
        external_embedding=emb,
    )
    return bundle.l_total


def _fd_param(param, grad, evalfn, picks=5, step=1e-6, rel=2e-4):
    flat, gflat = param.reshape(-1), np.asarray(grad).reshape(-1)
    for i in np.random.default_rng(0).choice(flat.size, min(picks, flat.size), replace=False):
        orig = flat[i]
        flat[i] = orig + step
        up = evalfn()
        flat[i] = orig - step
        dn = evalfn()
        flat[i] = orig
        assert (up - dn) / (2 * step) == pytest.approx(gflat[i], rel=rel, abs=1e-7), i


def test_training_step_gradients_match_fd_where_exact():
    # quantization assignments are locally constant, so finite differences
    # are valid for every parameter that does not route through the
    # straight-through estimator: g, fusion blocks, pixel head
    model, feats, bottleneck, image, codebooks, projectors = _toy_problem()
    _, grads = dec.training_step(
        model, feats, bottleneck, "default", codebooks, projectors, image
    )
    run = lambda: _total(model, feats, bottleneck, image, codebooks, projectors)
    _fd_param(model.params["g"]["default"], grads["g"], run)
    _fd_param(model.params["pixel_w"], grads["pixel_w"], run)
    _fd_param(model.params["pixel_b"], grads["pixel_b"], run)
    for k in (1, 4):
        for name in ("w1", "w2", "b1", "b2"):
            _fd_param(model.params["blocks"][k][name], grads["blocks"][k][name], run)


def test_training_step_adapter_gradient_matches_fd():
    model, feats, bottleneck, image, codebooks, projectors = _toy_problem(81)
    emb = np.random.default_rng(5).standard_normal(7)
    dec.ensure_adapter(model, 7)
    model.params["adapter"] = np.random.default_rng(6).standard_normal((6, 7)) * 0.1
    _, grads = dec.training_step(
        model, feats, bottleneck, "default", codebooks, projectors, image,
        external_embedding=emb,
    )
    run = lambda: _total(model, feats, bottleneck, image, codebooks, projectors, emb)
    _fd_param(model.params["adapter"], grads["adapter"], run, picks=6)
    assert grads["g"] is None


def test_entries_gradient_is_the_scaled_vq_term():
    # straight-through sends the reconstruction gradient at e to theta, so
    # codebook entries must see exactly lambda3 times the isolated vq term
    model, feats, bottleneck, image, codebooks, projectors = _toy_problem(82)
    _, grads = dec.training_step(
        model, feats, bottleneck, "default", codebooks, projectors, image
    )
    for k in (1, 2, 3, 4):
        z = cbm.context_project(feats[k], projectors[k]).astype(np.float64)
        q = cbm.quantize(z, codebooks[k])
        _, ge, _ = cbm.vq_loss(z, q, 5)
        assert np.allclose(grads["entries"][k], model.lambdas[2] * ge, atol=1e-12)


def test_decode_validates_inputs():
    model, feats, bottleneck, image, codebooks, projectors = _toy_problem(83)
    e_maps = {
        k: cbm.quantize(
            cbm.context_project(feats[k], projectors[k]).astype(np.float64), codebooks[k]
        ).e
        for k in (1, 2, 3, 4)
    }
    with pytest.raises(ValueError, match="missing quantized map"):
        dec.decode(model, bottleneck, np.zeros(6), {k: e_maps[k] for k in (1, 2, 3)})
    with pytest.raises(ValueError, match="context vector"):
        dec.decode(model, bottleneck, np.zeros(5), e_maps)


def test_global_context_constant_and_validated():
    model = dec.init_model(d_g=4, categories=("a", "b"), seed=1)
    g1 = dec.global_context(model, "a")
    g2 = dec.global_context(model, "a")
    assert np.array_equal(g1, g2) and g1.shape == (4,)
    assert not np.array_equal(g1, dec.global_context(model, "b"))
    with pytest.raises(ValueError, match="unknown category"):
        dec.global_context(model, "c")


# -- end-to-end training on a miniature dataset ---------------------------------

def _mini_split(rng, n=2, size=128):
    samples = [
        Sample(rng.random((size, size, 1)).astype(np.float32) * 0.5, 0, KIND_NONE, None, str(i))
        for i in range(n)
    ]
    return DatasetSplit(train=samples, validation=[], test=[])


def test_train_logical_zero_epochs_returns_untrained_init():
    rng = np.random.default_rng(90)
    split = _mini_split(rng)
    enc = Encoder.build(EncoderSpec(seed=31))
    model, codebooks, projectors, curve = dec.train_logical(split, enc, _Cfg(epochs=0))
    assert curve == [] and model.trained is False
    with pytest.raises(RuntimeError, match="untrained"):
        dec.logical_score(split.train[0].image, enc, model, codebooks, projectors)


def test_train_logical_descends_and_scores():
    rng = np.random.default_rng(91)
    split = _mini_split(rng)
    enc = Encoder.build(EncoderSpec(seed=32))
    cfg = _Cfg(epochs=4, lr=2e-3, codebook_lr=0.05)
    model, codebooks, projectors, curve = dec.train_logical(split, enc, cfg)
    assert len(curve) == 4 and curve[-1] < curve[0]
    assert model.trained
    a = dec.logical_score(split.train[0].image, enc, model, codebooks, projectors)
    assert a.shape == (128, 128) and a.dtype == np.float32
    assert float(a.min()) >= 0.0 and float(a.max()) <= 8.0  # 4 levels, each in [0, 2]
    raw = dec.logical_score(
        split.train[0].image, enc, model, codebooks, projectors, use_quantized=False
    )
    assert raw.shape == (128, 128) and not np.array_equal(a, raw)


def test_train_logical_empty_split_rejected():
    enc = Encoder.build(EncoderSpec(seed=33))
    with pytest.raises(ValueError, match="empty"):
        dec.train_logical(DatasetSplit([], [], []), enc, _Cfg())


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_train_logical_divergence_raises_training_error():
    rng = np.random.default_rng(92)
    split = _mini_split(rng)
    enc = Encoder.build(EncoderSpec(seed=34))
    with pytest.raises(dec.TrainingError):
        dec.train_logical(split, enc, _Cfg(epochs=8, lr=1e6, codebook_lr=1e6))


def test_model_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(93)
    split = _mini_split(rng)
    enc = Encoder.build(EncoderSpec(seed=35))
    model, codebooks, projectors, _ = dec.train_logical(split, enc, _Cfg(epochs=2, lr=1e-3))
    a_before = dec.logical_score(split.train[0].image, enc, model, codebooks, projectors)
    dec.save_model(tmp_path, model, codebooks, projectors)
    model2, cb2, pj2 = dec.load_model(tmp_path)
    assert model2.trained and model2.lambdas == model.lambdas
    a_after = dec.logical_score(split.train[0].image, enc, model2, cb2, pj2)
    assert np.allclose(a_before, a_after, atol=1e-4)  # f32 persistence wobble
    with pytest.raises(FileNotFoundError):
        dec.load_model(tmp_path / "nothing")
