from __future__ import annotations

import numpy as np
import pytest

from _support import fd_relative_errors, toy_batch, toy_surrogate_config
from czplab.czp import CZPModel, eval_log_s11
from czplab.errors import InvalidArgument, NumericError
from czplab.spectral import FrequencyGrid
from czplab.surrogate import (SurrogateParams, evaluate, featurize, forward, init_params,
                              load_checkpoint, loss_and_grad, pack, predict_czp, prepare_input,
                              save_checkpoint, train)


def _with(params, cfg, **arrays):
    a = {k: v.copy() for k, v in params.unpack().items()}
    a.update(arrays)
    return pack(a, cfg)


def test_zero_tokenizer_gives_uniform_attention():
    cfg = toy_surrogate_config()
    p = init_params(cfg)
    p = _with(p, cfg, tok_w=np.zeros((cfg.features, cfg.tokens)))
    x = prepare_input(np.zeros((3, 20, 40)), cfg)
    _, attn = featurize(p, x, cfg)
    assert np.allclose(attn, 1.0 / x.shape[0])


def test_attention_columns_sum_to_one():
    cfg = toy_surrogate_config()
    x, _ = toy_batch(cfg, 4)
    _, attn = featurize(init_params(cfg), x, cfg)
    assert np.allclose(attn.sum(axis=1), 1.0, atol=1e-6)


def test_coordinate_channels_break_mirror_symmetry():
    cfg = toy_surrogate_config()
    img = np.zeros((3, 20, 40))
    img[2, 5:10, 3:12] = 1.0
    p = init_params(cfg)
    t1, _ = featurize(p, prepare_input(img, cfg), cfg)
    t2, _ = featurize(p, prepare_input(img[:, :, ::-1].copy(), cfg), cfg)
    assert np.max(np.abs(t1 - t2)) > 1e-6


def test_image_size_mismatch():
    cfg = toy_surrogate_config()
    with pytest.raises(InvalidArgument):
        prepare_input(np.zeros((3, 10, 40)), cfg)


def test_czp_head_cancellation_gives_constant():
    cfg = toy_surrogate_config()
    p = init_params(cfg)
    k = cfg.k
    h = cfg.trunk[-1]
    re = np.linspace(1, 6, k)
    u = np.full(k, 0.3)
    im = np.log1p(np.exp(u)) + cfg.pole_eps
    p = _with(p, cfg, z_w=np.zeros((h, 2 * k)), p_w=np.zeros((h, 2 * k)),
              z_b=np.concatenate([re, im]), p_b=np.concatenate([re, u]),
              c_w=np.zeros((h, 1)), c_b=np.array([-0.4]))
    x, _ = toy_batch(cfg, 2)
    assert np.allclose(forward(p, x, cfg), -0.4, atol=1e-12)


def test_czp_head_permutation_leaves_response_unchanged():
    cfg = toy_surrogate_config()
    p = init_params(cfg)
    a = p.unpack()
    perm = np.array([2, 0, 3, 1])
    cols = np.concatenate([perm, perm + cfg.k])
    q = _with(p, cfg, z_w=a["z_w"][:, cols], z_b=a["z_b"][cols],
              p_w=a["p_w"][:, cols], p_b=a["p_b"][cols])
    x, _ = toy_batch(cfg, 2)
    assert np.allclose(forward(p, x, cfg), forward(q, x, cfg), rtol=0, atol=1e-12)


def test_czp_head_matches_czp_model_evaluation():
    cfg = toy_surrogate_config()
    p = init_params(cfg)
    x, _ = toy_batch(cfg, 2)
    models = predict_czp(p, x, cfg)
    grid = FrequencyGrid(cfg.grid_values, "GHz")
    want = np.stack([eval_log_s11(m, grid).log_mag for m in models])
    assert np.allclose(forward(p, x, cfg), want, atol=1e-12)
    assert all(isinstance(m, CZPModel) for m in models)


def test_raw_head_zero_layer_returns_bias():
    cfg = toy_surrogate_config("raw")
    p = init_params(cfg)
    b = np.linspace(-1, 0, 69)
    p = _with(p, cfg, out_w=np.zeros((cfg.trunk[-1], 69)), out_b=b)
    x, _ = toy_batch(cfg, 3)
    assert np.array_equal(forward(p, x, cfg), np.tile(b, (3, 1)))


@pytest.mark.parametrize("head", ["raw", "czp"])
@pytest.mark.parametrize("loss", ["mse", "shrinkage"])
def test_gradient_matches_finite_differences(head, loss):
    cfg = toy_surrogate_config(head, loss)
    x, y = toy_batch(cfg, 3)
    p = init_params(cfg, y.mean(axis=0), x)
    assert np.max(fd_relative_errors(p, (x, y), cfg)) <= 1e-4


def test_duplicated_sample_gradient_equals_single():
    cfg = toy_surrogate_config()
    x, y = toy_batch(cfg, 1)
    p = init_params(cfg)
    l1, g1 = loss_and_grad(p, (x, y), cfg)
    l2, g2 = loss_and_grad(p, (np.concatenate([x, x]), np.concatenate([y, y])), cfg)
    assert l1 == pytest.approx(l2, rel=1e-14)
    assert np.allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_shrinkage_small_a_gradient_is_half_mse():
    x, y = toy_batch(toy_surrogate_config(), 2)
    mse = toy_surrogate_config(loss="mse")
    shr = toy_surrogate_config(loss="shrinkage", shrink_a=1e-9, shrink_c=0.0)
    p = init_params(mse)
    _, g_mse = loss_and_grad(p, (x, y), mse)
    _, g_shr = loss_and_grad(p, (x, y), shr)
    assert np.max(np.abs(g_shr - 0.5 * g_mse)) <= 1e-6


def test_non_finite_loss_reports_batch_index():
    cfg = toy_surrogate_config("raw")
    x, y = toy_batch(cfg, 3)
    y[1, 5] = np.nan
    with pytest.raises(NumericError) as info:
        loss_and_grad(init_params(cfg), (x, y), cfg)
    assert info.value.context["batch_index"] == 1


def test_evaluate_contracts():
    cfg = toy_surrogate_config()
    x, y = toy_batch(cfg, 5)
    p = init_params(cfg)
    mean, per = evaluate(p, x, y, cfg)
    assert abs(per.mean() - mean) <= 1e-12
    assert mean == pytest.approx(loss_and_grad(p, (x, y), cfg)[0], rel=1e-12)
    with pytest.raises(InvalidArgument):
        evaluate(p, x[:0], y[:0], cfg)


def test_checkpoint_round_trip_and_layout_check():
    cfg = toy_surrogate_config()
    p = init_params(cfg)
    q, cfg2 = load_checkpoint(save_checkpoint(p, cfg))
    assert np.array_equal(p.vector, q.vector) and cfg2 == cfg
    other = toy_surrogate_config("raw")
    with pytest.raises(InvalidArgument):
        forward(p, toy_batch(cfg, 1)[0], other)


def test_params_reject_non_finite():
    cfg = toy_surrogate_config()
    p = init_params(cfg)
    v = p.vector.copy()
    v[0] = np.inf
    with pytest.raises(NumericError):
        SurrogateParams(v, p.manifest, p.hash)


def _toy_dataset(cfg, n=120):
    rng = np.random.default_rng(7)
    x, _ = toy_batch(cfg, n, seed=3)
    w = rng.standard_normal((x.shape[1] * 5, 69)) * 0.01
    y = -0.5 + np.tanh(x.reshape(n, -1) @ w)
    return x, y


def test_train_is_deterministic_and_consistent():
    cfg = toy_surrogate_config("raw", epochs=3, batch_size=32)
    x, y = _toy_dataset(cfg)
    p1, r1 = train(x, y, cfg)
    p2, r2 = train(x, y, cfg)
    assert np.array_equal(p1.vector, p2.vector)
    assert r1.to_json() == r2.to_json()
    assert "wall_time" not in r1.to_dict()
    assert r1.split == {"train": 97, "val": 11, "test": 12, "seed": 0, "test_frac": 0.1,
                        "val_frac": 0.1}
    from czplab.surrogate import split_indices
    tr, _, _ = split_indices(len(x))
    assert evaluate(p1, x[tr], y[tr], cfg)[0] <= r1.final_train_loss + 1e-9
    assert all(np.isfinite(v) and v >= 0 for v in r1.train_curve + r1.val_curve)


def test_train_rejects_small_dataset():
    cfg = toy_surrogate_config("raw", epochs=1)
    x, y = _toy_dataset(cfg, 50)
    with pytest.raises(InvalidArgument):
        train(x, y, cfg)
