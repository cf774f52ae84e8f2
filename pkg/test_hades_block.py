#!/usr/bin/env python3
"""
Tests for one HADES layer: shapes, prefill/decode parity, block adjoint
"""

import numpy as np
import pytest

from errors import ShapeError
from hades_block import (
    InferenceCache,
    block_backward,
    block_shapes,
    decode_step,
    forward_block,
    init_block_params,
    prefill,
    rms_norm_backward,
    rms_norm_gated,
)
from model import ModelConfig
from numerics import Rng
from router import ROUTER_MODES
from ssm_core import HeadDiscretized, materialize_matrix, softplus_delta


def small_cfg(**overrides):
    base = dict(d=8, M=4, H=2, S=1, P=3, N=4, d_conv=3, n_layer=1, vocab=16)
    base.update(overrides)
    return ModelConfig(**base).validate()


def test_block_shapes_follow_config():
    cfg = small_cfg()
    shapes = block_shapes(cfg)
    assert shapes["W_in"] == (8, 2 * 6 + 2 * 4 + 4)
    assert shapes["conv_w"] == (6 + 8, 3)
    assert shapes["W_h"] == (8 + 4, 3 + 1)
    assert shapes["W_out"] == (6, 8)


def test_forward_block_output_shapes():
    cfg = small_cfg()
    params = init_block_params(cfg, Rng(0))
    u = Rng(1).normal((7, cfg.d))
    o, aux, records, cache, tape = forward_block(u, params, cfg)
    assert o.shape == (7, cfg.d)
    assert tape.y.shape == (7, cfg.H, cfg.P)
    assert len(records) == 7
    assert all(len(r.expert_ids) == cfg.Q for r in records)
    assert cache.t_pos == 8 and cache.mean_state.count == 7
    assert np.isfinite(aux["balance"]) and np.isfinite(aux["diversity"])


def test_forward_block_rejects_wrong_width():
    cfg = small_cfg()
    with pytest.raises(ShapeError):
        forward_block(np.zeros((4, cfg.d + 1)), init_block_params(cfg, Rng(0)), cfg)


def test_zero_out_projection_gives_zero_output():
    cfg = small_cfg()
    params = init_block_params(cfg, Rng(2))
    params.W_out[:] = 0.0
    o, _, _, _, _ = forward_block(Rng(3).normal((5, cfg.d)), params, cfg)
    np.testing.assert_array_equal(o, 0.0)


def test_records_carry_expert_bias_and_shift():
    cfg = small_cfg(gamma=0.0)
    params = init_block_params(cfg, Rng(4))
    _, _, records, _, _ = forward_block(Rng(5).normal((6, cfg.d)), params, cfg)
    for record in records:
        np.testing.assert_array_equal(record.bias, 0.0)
        np.testing.assert_array_equal(record.delta_shift, 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_prefill_decode_parity(seed):
    rng = Rng(seed)
    mode = ROUTER_MODES[seed % len(ROUTER_MODES)]
    cfg = small_cfg(router_mode=mode, router_seed=seed)
    params = init_block_params(cfg, rng)
    T = 10
    split = int(rng.integers(1, T))
    u = rng.normal((T, cfg.d))
    o_full, _, records_full, cache_full, _ = forward_block(u, params, cfg, layer=1)

    o_head, _, _, cache = prefill(u[:split], params, cfg, layer=1)
    np.testing.assert_allclose(o_head, o_full[:split], atol=1e-8)
    for t in range(split, T):
        o_t, cache, record = decode_step(u[t], params, cfg, cache, layer=1, return_record=True)
        np.testing.assert_allclose(o_t, o_full[t], atol=1e-8)
        assert record.expert_ids == records_full[t].expert_ids
        np.testing.assert_allclose(record.scores, records_full[t].scores, atol=1e-8)
    np.testing.assert_allclose(cache.ssm_state, cache_full.ssm_state, atol=1e-8)
    np.testing.assert_allclose(cache.conv_state, cache_full.conv_state, atol=1e-12)
    np.testing.assert_allclose(cache.mean_state.cumsum, cache_full.mean_state.cumsum, atol=1e-12)
    assert cache.t_pos == cache_full.t_pos == T + 1


def test_decode_from_empty_cache_matches_prefill():
    cfg = small_cfg()
    params = init_block_params(cfg, Rng(30))
    u = Rng(31).normal((5, cfg.d))
    o_full, _, _, _, _ = forward_block(u, params, cfg)
    cache = InferenceCache.empty(cfg)
    for t in range(5):
        o_t, cache = decode_step(u[t], params, cfg, cache)
        np.testing.assert_allclose(o_t, o_full[t], atol=1e-8)


def test_decode_does_not_mutate_input_cache():
    cfg = small_cfg()
    params = init_block_params(cfg, Rng(32))
    _, _, _, cache = prefill(Rng(33).normal((3, cfg.d)), params, cfg)
    before = cache.ssm_state.copy()
    decode_step(np.ones(cfg.d), params, cfg, cache)
    np.testing.assert_array_equal(cache.ssm_state, before)
    assert cache.t_pos == 4


def test_cache_validation_catches_inconsistent_position():
    cfg = small_cfg()
    cache = InferenceCache.empty(cfg)
    cache.t_pos = 3
    with pytest.raises(ShapeError):
        cache.validate(cfg)


def test_gated_rms_norm_backward_matches_finite_differences():
    rng = Rng(40)
    y, z, w = rng.normal((4, 6)), rng.normal((4, 6)), rng.normal((6,))
    G = rng.normal((4, 6))
    from numerics import silu
    g = y * silu(z)
    rms = np.sqrt(np.mean(g * g, axis=-1, keepdims=True) + 1e-6)
    d_g, d_w = rms_norm_backward(G, g / rms, rms, w)
    h = 1e-6
    for index in np.ndindex(y.shape):
        up, down = y.copy(), y.copy()
        up[index] += h
        down[index] -= h
        numeric = (np.sum(rms_norm_gated(up, z, w) * G) - np.sum(rms_norm_gated(down, z, w) * G)) / (2 * h)
        assert (d_g * silu(z))[index] == pytest.approx(numeric, abs=1e-7)


@pytest.mark.parametrize("mode", ["spectral", "input_only", "position_bias", "no_bias"])
def test_block_backward_matches_finite_differences(mode):
    cfg = small_cfg(router_mode=mode, lambda1=0.3, lambda2=0.2)
    rng = Rng(50)
    params = init_block_params(cfg, rng)
    u = rng.normal((6, cfg.d))
    G = rng.normal((6, cfg.d))
    w_bal, w_div = 0.3, 0.2

    def loss(u_in):
        o, aux, _, _, _ = forward_block(u_in, params, cfg, collect_records=False)
        return float(np.sum(o * G)) + w_bal * aux["balance"] + w_div * aux["diversity"]

    _, _, _, _, tape = forward_block(u, params, cfg, collect_records=False)
    d_u, grads = block_backward(G, params, cfg, tape, d_balance=w_bal, d_diversity=w_div)
    assert set(grads) == set(block_shapes(cfg))

    h = 1e-6
    for index in [(0, 0), (2, 3), (5, 7), (3, 1)]:
        up, down = u.copy(), u.copy()
        up[index] += h
        down[index] -= h
        numeric = (loss(up) - loss(down)) / (2 * h)
        assert d_u[index] == pytest.approx(numeric, rel=1e-4, abs=1e-6)

    tensors = params.tensors()
    for name in ("W_in", "conv_w", "a_log", "dt_bias", "W_h", "W_out", "D", "norm_weight"):
        tensor = tensors[name]
        index = tuple(s // 2 for s in tensor.shape)
        original = tensor[index]
        tensor[index] = original + h
        plus = loss(u)
        tensor[index] = original - h
        minus = loss(u)
        tensor[index] = original
        assert grads[name][index] == pytest.approx((plus - minus) / (2 * h), rel=1e-4, abs=1e-6)


def test_zero_upstream_gives_zero_gradients():
    cfg = small_cfg()
    params = init_block_params(cfg, Rng(60))
    _, _, _, _, tape = forward_block(Rng(61).normal((4, cfg.d)), params, cfg)
    d_u, grads = block_backward(np.zeros((4, cfg.d)), params, cfg, tape)
    np.testing.assert_array_equal(d_u, 0.0)
    for grad in grads.values():
        np.testing.assert_array_equal(grad, 0.0)


def test_shared_slots_ignore_expert_rerouting():
    cfg = small_cfg(M=6, H=3, S=1)
    params = init_block_params(cfg, Rng(62))
    u = Rng(63).normal((8, cfg.d))
    _, _, _, _, tape = forward_block(u, params, cfg, collect_records=False)

    # negated scores pick the bottom experts, disjoint from the top ones when E >= 2Q
    params.router.W_h[:, :cfg.E] *= -1.0
    _, _, _, _, rerouted = forward_block(u, params, cfg, collect_records=False)

    Q = cfg.Q
    assert all(not set(a) & set(b) for a, b in zip(tape.slots[:, :Q], rerouted.slots[:, :Q]))
    np.testing.assert_array_equal(rerouted.slots[:, Q:], tape.slots[:, Q:])
    np.testing.assert_array_equal(rerouted.delta[:, Q:], tape.delta[:, Q:])
    np.testing.assert_array_equal(rerouted.y[:, Q:], tape.y[:, Q:])


@pytest.mark.parametrize("M", [4, 6, 8])
def test_filters_gathered_per_token_scale_with_active_slots(M):
    cfg = small_cfg(M=M, H=3, S=1)
    params = init_block_params(cfg, Rng(M))
    _, _, records, _, tape = forward_block(Rng(M + 1).normal((6, cfg.d)), params, cfg)
    for record, slots in zip(records, tape.slots):
        gathered = record.expert_ids + record.shared_ids
        assert len(set(gathered)) == cfg.H
        assert sorted(gathered) == sorted(slots.tolist())
    shapes = block_shapes(cfg)
    assert shapes["a_log"] == shapes["D"] == shapes["dt_bias"] == (cfg.H,)
    assert shapes["W_out"] == (cfg.H * cfg.P, cfg.d)


def test_baseline_filter_matrices_reproduce_block_output():
    cfg = small_cfg().baseline()
    params = init_block_params(cfg, Rng(64))
    u = Rng(65).normal((9, cfg.d))
    o, _, _, _, tape = forward_block(u, params, cfg, collect_records=False)

    HP = cfg.H * cfg.P
    proj = u @ params.W_in
    delta = softplus_delta(proj[:, 2 * HP + 2 * cfg.N:] + params.dt_bias)
    a = np.exp(-delta * np.exp(params.a_log))
    y = np.empty((9, cfg.H, cfg.P))
    for head in range(cfg.H):
        disc = HeadDiscretized(a=a[:, head], Bbar=tape.B, C=tape.C, delta=delta[:, head], D=params.D[head])
        y[:, head] = materialize_matrix(disc) @ tape.x[:, head]
    np.testing.assert_allclose(y, tape.y, atol=1e-9)
    rebuilt = rms_norm_gated(y.reshape(9, HP), proj[:, :HP], params.norm_weight) @ params.W_out
    np.testing.assert_allclose(rebuilt, o, atol=1e-9)


def test_decode_state_contracts_on_zero_token():
    cfg = small_cfg()
    params = init_block_params(cfg, Rng(66))
    _, _, _, cache = prefill(Rng(67).normal((5, cfg.d)), params, cfg)
    cache.conv_state[:] = 0.0
    norms = [np.linalg.norm(cache.ssm_state)]
    for _ in range(3):
        _, cache = decode_step(np.zeros(cfg.d), params, cfg, cache)
        norms.append(np.linalg.norm(cache.ssm_state))
    np.testing.assert_array_equal(cache.conv_state, 0.0)
    assert np.all(np.diff(norms) < 0.0)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
