import math
import time

import numpy as np
import pytest

from gradcheck import max_rel_error, numeric_grad
from sttm import numerics as nx
from sttm.errors import CompatibilityError, ShapeError
from sttm.model import (ABLATIONS, STTM, SttmConfig, count_params, load_checkpoint, param_shapes,
                        save_checkpoint)
from sttm.training import mae_loss

TINY_VOCAB = (2, 5, 1441, 6, 8, 4)


def tiny_config(**kw):
    base = dict(m=3, n=2, h=8, heads=2, l_mem=4, d_mem=4, e=2, h_mem=8, mlp_hidden=8,
                vocab_sizes=TINY_VOCAB)
    base.update(kw)
    return SttmConfig(**base)


def random_batch(c, b, seed=0):
    rng = np.random.default_rng(seed)
    x_a = rng.normal(size=(b, c.m, c.n, c.d_a))
    x_a[:, 1:][rng.random((b, c.m - 1)) < 0.2] = -1.0  # some missing neighbors
    coords = np.stack([rng.integers(0, 2 * c.n_x, (b, c.m)), rng.integers(0, 2 * c.n_y, (b, c.m))], -1)
    coords[:, 0] = (c.n_x, c.n_y)
    x_b = np.stack([rng.integers(0, v, b) for v in c.vocab_sizes], axis=1)
    y = rng.uniform(20, 60, b)
    return x_a, coords, x_b, y


def closed_form_count(c):
    f = c.ffn
    layer = 4 * (c.h * c.h + c.h) + c.h * f + f + f * c.h + c.h + 4 * c.h
    total = c.d_a * c.h + c.e * sum(c.vocab_sizes) + c.d_b * c.e * c.h_mem + 2 * c.mlp_hidden + 1
    total += c.use_tpe * c.n * c.h
    total += c.use_spe * (2 * c.n_x + 2 * c.n_y) * c.h
    total += (c.use_temporal_transformer + c.use_spatial_transformer) * c.layers * layer
    if c.use_memory:
        total += (c.h + c.h_mem) * c.d_mem + c.d_mem + c.l_mem * c.d_mem
        total += (c.h + 2 * c.d_mem) * c.mlp_hidden
    else:
        total += (c.h + c.h_mem) * c.mlp_hidden
    return total


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("variant", ["full", "no_memory", "no_temporal_transformer",
                                     "no_spatial_transformer"])
def test_gradient_check_every_parameter(variant):
    c = tiny_config().variant(variant)
    model = STTM(c, seed=1, label_shift=35.0, label_scale=8.0)
    x_a, coords, x_b, y = random_batch(c, 4, seed=2)

    def loss_value():
        return float(mae_loss(model.forward(x_a, coords, x_b), y).data)

    loss = mae_loss(model.forward(x_a, coords, x_b), y)
    nx.backward(loss)
    start = time.time()
    for name, p in model.params.items():
        analytic = p.grad.copy()
        numeric = numeric_grad(loss_value, p.data)
        err = max_rel_error(analytic, numeric)
        assert err < 1e-4, (name, err)
    assert time.time() - start < 60


# ------------------------------------------------------------- embeddings

def test_tpe_row_selection_equals_one_hot():
    c = SttmConfig()
    model = STTM(c, seed=0)
    w = model.params["tpe"].data
    for n in range(c.n):
        one_hot = np.eye(c.n)[n]
        assert np.array_equal(one_hot @ w, model.temporal_position_embedding(n))
    assert np.array_equal(model.temporal_position_embedding(0), w[0])
    rows = [model.temporal_position_embedding(n) for n in range(c.n)]
    assert all(not np.array_equal(rows[i], rows[j]) for i in range(c.n) for j in range(i))
    with pytest.raises(IndexError):
        model.temporal_position_embedding(c.n)


def test_spe_center_additivity_and_one_hot():
    c = SttmConfig()
    model = STTM(c, seed=0)
    wx, wy = model.params["spe_x"].data, model.params["spe_y"].data
    assert np.array_equal(model.spatial_position_embedding(10, 10), wx[10] + wy[10])
    for x in range(2 * c.n_x):
        for y in (0, 7, 2 * c.n_y - 1):
            ref = np.eye(2 * c.n_x)[x] @ wx + np.eye(2 * c.n_y)[y] @ wy
            assert np.array_equal(model.spatial_position_embedding(x, y), ref)
    for bad in ((-1, 0), (20, 0), (0, 20)):
        with pytest.raises(IndexError):
            model.spatial_position_embedding(*bad)


def test_forward_rejects_out_of_range_coords():
    c = tiny_config()
    model = STTM(c, seed=0)
    x_a, coords, x_b, _ = random_batch(c, 2)
    coords[0, 1, 0] = 2 * c.n_x
    with pytest.raises(IndexError, match="spe_x"):
        model.forward(x_a, coords, x_b)


def test_embed_sensitive_matches_oracle():
    c = SttmConfig()
    model = STTM(c, seed=3)
    _, _, x_b, _ = random_batch(c, 5, seed=4)
    got = model.embed_sensitive(x_b).data
    tables = [model.params[f"emb.{n}"].data for n in ("city", "district", "minute", "peak",
                                                      "day_of_week", "weather")]
    cat = np.concatenate([t[x_b[:, i]] for i, t in enumerate(tables)], axis=1)
    assert np.array_equal(got, cat @ model.params["w_xb"].data)
    assert got.shape == (5, 256)
    changed = x_b.copy()
    changed[:, 5] = (changed[:, 5] + 1) % 4
    assert not np.array_equal(model.embed_sensitive(changed).data, got)


def test_unknown_sensitive_ids_map_to_zero():
    c = tiny_config()
    model = STTM(c, seed=0)
    x_b = np.array([[0, 0, 5, 1, 1, 0], [7, 99, 5, 1, 1, 0]])
    out = model.embed_sensitive(x_b).data
    assert np.array_equal(out[0], out[1])


# ------------------------------------------------------------------ memory

def test_memory_zero_query_uniform():
    c = SttmConfig()
    model = STTM(c, seed=0)
    model.params["w_q"].data[:] = 0.0
    model.params["b_q"].data[:] = 0.0
    o = nx.Tensor(np.random.default_rng(0).normal(size=(3, c.h)))
    xb = nx.Tensor(np.random.default_rng(1).normal(size=(3, c.h_mem)))
    q, alpha, w = model.memory(o, xb)
    assert np.all(q.data == 0)
    np.testing.assert_allclose(w.data, 1.0 / c.l_mem, rtol=0, atol=1e-15)
    np.testing.assert_allclose(alpha.data, np.broadcast_to(model.params["w_mem"].data.mean(0), (3, c.d_mem)),
                               atol=1e-12)


def test_memory_weights_are_distribution():
    c = SttmConfig()
    model = STTM(c, seed=5)
    rng = np.random.default_rng(2)
    o = nx.Tensor(rng.normal(0, 10, size=(200, c.h)))
    xb = nx.Tensor(rng.normal(0, 10, size=(200, c.h_mem)))
    _, alpha, w = model.memory(o, xb)
    assert np.all(w.data >= 0)
    assert np.max(np.abs(w.data.sum(-1) - 1)) < 1e-9
    # alpha = convex combination of memory rows
    np.testing.assert_allclose(alpha.data, w.data @ model.params["w_mem"].data, atol=1e-12)


def test_memory_saturation_selects_row():
    c = tiny_config()
    model = STTM(c, seed=0)
    w_mem = np.eye(c.l_mem, c.d_mem)
    model.params["w_mem"].data[:] = w_mem
    # q = b_q only; make the logit of row 2 exceed the rest by >= 50
    model.params["w_q"].data[:] = 0.0
    model.params["b_q"].data[:] = 0.0
    model.params["b_q"].data[2] = 60.0
    _, alpha, _ = model.memory(nx.Tensor(np.ones((1, c.h))), nx.Tensor(np.ones((1, c.h_mem))))
    np.testing.assert_allclose(alpha.data[0], w_mem[2], atol=1e-9)


# ------------------------------------------------------------ invariances

@pytest.mark.parametrize("variant", ["full", "no_spatial_transformer", "no_spe"])
def test_neighbor_permutation_invariance(variant):
    c = SttmConfig(m=5, n=3, h=32, h_mem=32, mlp_hidden=32, d_mem=16, vocab_sizes=TINY_VOCAB).variant(variant)
    model = STTM(c, seed=7)
    x_a, coords, x_b, _ = random_batch(c, 40, seed=8)
    base = model.predict(x_a, coords, x_b)
    rng = np.random.default_rng(9)
    for _ in range(5):
        perm = np.concatenate([[0], 1 + rng.permutation(c.m - 1)])
        got = model.predict(x_a[:, perm], coords[:, perm], x_b)
        assert np.max(np.abs(got - base)) < 1e-9


def test_readout_only_last_layer_is_exact():
    c = tiny_config(layers=2, m=4, n=3)
    model = STTM(c, seed=0)
    x = nx.Tensor(np.random.default_rng(0).normal(size=(6, c.n, c.h)))
    fast = model.encode(x, "temporal", c.n - 1).data
    full = model._encoder_layer(x, "temporal.0.", None, False, None)
    full = model._encoder_layer(full, "temporal.1.", None, False, None).data[:, c.n - 1]
    np.testing.assert_allclose(fast, full, rtol=0, atol=1e-12)


def test_inference_is_deterministic_and_dropout_only_in_training():
    c = tiny_config()
    model = STTM(c, seed=0)
    x_a, coords, x_b, _ = random_batch(c, 8)
    a = model.predict(x_a, coords, x_b)
    assert np.array_equal(a, model.predict(x_a, coords, x_b))
    t1 = model.forward(x_a, coords, x_b, train=True, rng=np.random.default_rng(1)).data
    t2 = model.forward(x_a, coords, x_b, train=True, rng=np.random.default_rng(1)).data
    assert np.array_equal(t1, t2)
    assert not np.array_equal(t1, a)


def test_fully_missing_neighbors_finite():
    c = tiny_config()
    model = STTM(c, seed=0)
    x_a, coords, x_b, _ = random_batch(c, 3)
    x_a[:] = -1.0
    assert np.all(np.isfinite(model.predict(x_a, coords, x_b)))


def test_trace_shapes():
    c = tiny_config()
    model = STTM(c, seed=0)
    x_a, coords, x_b, _ = random_batch(c, 3)
    y, tr = model.forward(x_a, coords, x_b, trace=True)
    assert tr.x_tilde_a.shape == (3, c.m, c.n, c.h)
    assert tr.o_temporal.shape == (3, c.m, c.h)
    assert tr.o_spatial.shape == (3, c.h)
    assert tr.x_tilde_b.shape == (3, c.h_mem)
    assert tr.q.shape == tr.alpha.shape == (3, c.d_mem)
    assert tr.pattern_weights.shape == (3, c.l_mem)
    assert np.max(np.abs(tr.pattern_weights.sum(-1) - 1)) < 1e-9
    assert np.array_equal(tr.y_hat, y.data)


def test_m1_shapes():
    c = tiny_config(m=1)
    model = STTM(c, seed=0)
    x_a, coords, x_b, _ = random_batch(c, 2)
    _, tr = model.forward(x_a, coords, x_b, trace=True)
    assert tr.o_temporal.shape == (2, 1, c.h)


def test_shape_errors():
    c = tiny_config()
    model = STTM(c, seed=0)
    x_a, coords, x_b, _ = random_batch(c, 2)
    with pytest.raises(ShapeError):
        model.forward(x_a[:, :, :1], coords, x_b)
    with pytest.raises(ShapeError):
        model.forward(x_a, coords[:1], x_b)
    with pytest.raises(ShapeError):
        model.forward(x_a, coords, x_b[:, :5])


# ------------------------------------------------------------ parameters

def test_param_count_golden():
    c = SttmConfig()
    assert count_params(c) == closed_form_count(c) == 1_755_873
    assert STTM(c, seed=0).num_params() == 1_755_873


@pytest.mark.parametrize("variant", sorted(ABLATIONS))
def test_param_count_closed_form_all_variants(variant):
    c = SttmConfig(layers=2).variant(variant)
    assert count_params(c) == closed_form_count(c)


def test_variants_strictly_smaller():
    c = SttmConfig()
    full = count_params(c)
    prints = {c.fingerprint()}
    for name in ABLATIONS:
        if name == "full":
            continue
        assert count_params(c.variant(name)) < full
        prints.add(c.variant(name).fingerprint())
    assert len(prints) == len(ABLATIONS)


def test_init_shapes_and_seeds():
    c = tiny_config()
    a, b, d = STTM(c, seed=1), STTM(c, seed=1), STTM(c, seed=2)
    assert a.fingerprint() == b.fingerprint() != d.fingerprint()
    for name, shape in param_shapes(c).items():
        p = a.params[name].data
        assert p.shape == shape
        if len(shape) == 2 and not name.startswith(("emb.", "tpe", "spe")):
            assert np.max(np.abs(p)) <= math.sqrt(6.0 / sum(shape))
    assert np.all(a.params["b_q"].data == 0)


def test_config_validation():
    from sttm.errors import ConfigError

    with pytest.raises(ConfigError):
        SttmConfig(h=10, heads=4).validate()
    with pytest.raises(ConfigError):
        SttmConfig(l_mem=0).validate()
    with pytest.raises(ConfigError):
        SttmConfig().variant("no_such")
    with pytest.raises(ConfigError):
        SttmConfig.from_dict({"bogus": 1})
    c = tiny_config()
    assert SttmConfig.from_dict(c.to_dict()) == c


def test_checkpoint_roundtrip(tmp_path):
    c = tiny_config()
    model = STTM(c, seed=4, label_shift=30.0, label_scale=5.0)
    x_a, coords, x_b, _ = random_batch(c, 6)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, model, {"note": "x"})
    back, header = load_checkpoint(p, expected_config=c)
    assert header["note"] == "x"
    assert header["version"] == 1
    assert np.array_equal(back.predict(x_a, coords, x_b), model.predict(x_a, coords, x_b))
    assert back.fingerprint() == model.fingerprint()
    with pytest.raises(CompatibilityError):
        load_checkpoint(p, expected_config=tiny_config(h=16))


def test_params_mismatch_rejected():
    c = tiny_config()
    params = STTM(c, seed=0).params
    with pytest.raises(CompatibilityError):
        STTM(tiny_config(l_mem=5), params=params)
