# =============================================================================
#           HADES TOOLKIT - ONE HADES LAYER
#           PACKED PROJECTION, CAUSAL CONV, ROUTING, H-SLOT SCAN, GATED NORM
# =============================================================================

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ShapeError
from numerics import check_finite, silu, silu_grad
from router import (
    RouterParams,
    RunningMeanState,
    SelectionRecord,
    assemble_slots,
    assemble_slots_backward,
    balance_loss,
    balance_loss_grad,
    cumulative_residual,
    cumulative_residual_backward,
    diversity_loss,
    diversity_loss_grad,
    routing_input,
    score_and_bias,
    select_expert_ids,
    slot_ids,
    spectral_residual,
)
from ssm_core import HeadDiscretized, scan_head_backward, softplus_delta

logger = logging.getLogger(__name__)

NORM_EPS = 1e-6

BLOCK_TENSORS = ("W_in", "conv_w", "conv_b", "a_log", "D", "dt_bias", "W_h", "norm_weight", "W_out")


@dataclass
class BlockParams:
    W_in: np.ndarray         # d x (2HP + 2N + M), columns [z | xBC | dt]
    conv_w: np.ndarray       # (HP + 2N) x d_conv
    conv_b: np.ndarray       # (HP + 2N)
    a_log: np.ndarray        # H
    D: np.ndarray            # H
    dt_bias: np.ndarray      # H
    router: RouterParams
    norm_weight: np.ndarray  # HP
    W_out: np.ndarray        # HP x d

    @classmethod
    def from_tensors(cls, tensors, prefix=""):
        """View over a flat name -> array mapping (no copies)"""
        get = lambda name: tensors[prefix + name]
        return cls(
            W_in=get("W_in"), conv_w=get("conv_w"), conv_b=get("conv_b"),
            a_log=get("a_log"), D=get("D"), dt_bias=get("dt_bias"),
            router=RouterParams(W_h=get("W_h")),
            norm_weight=get("norm_weight"), W_out=get("W_out"),
        )

    def tensors(self, prefix=""):
        return {
            prefix + "W_in": self.W_in, prefix + "conv_w": self.conv_w, prefix + "conv_b": self.conv_b,
            prefix + "a_log": self.a_log, prefix + "D": self.D, prefix + "dt_bias": self.dt_bias,
            prefix + "W_h": self.router.W_h, prefix + "norm_weight": self.norm_weight,
            prefix + "W_out": self.W_out,
        }

    def validate(self, cfg):
        for name, shape in block_shapes(cfg).items():
            actual = self.tensors()[name].shape
            if actual != shape:
                raise ShapeError(f"block tensor '{name}' has shape {actual}, expected {shape}")
        check_finite("block.a_log", self.a_log)
        return self


def block_shapes(cfg):
    HP = cfg.H * cfg.P
    channels = HP + 2 * cfg.N
    rcfg = cfg.router_config()
    return {
        "W_in": (cfg.d, 2 * HP + 2 * cfg.N + cfg.M),
        "conv_w": (channels, cfg.d_conv),
        "conv_b": (channels,),
        "a_log": (cfg.H,),
        "D": (cfg.H,),
        "dt_bias": (cfg.H,),
        "W_h": (cfg.d + cfg.M, rcfg.score_width),
        "norm_weight": (HP,),
        "W_out": (HP, cfg.d),
    }


def init_block_params(cfg, rng, dt_min=1e-3, dt_max=1e-1):
    """Random block in the usual Mamba2 ranges: A in [1, 16], dt log-uniform"""
    shapes = block_shapes(cfg)
    HP = cfg.H * cfg.P
    dt = np.exp(rng.uniform((cfg.H,), np.log(dt_min), np.log(dt_max)))
    tensors = {
        "W_in": rng.normal(shapes["W_in"], scale=cfg.d ** -0.5),
        "conv_w": rng.normal(shapes["conv_w"], scale=cfg.d_conv ** -0.5),
        "conv_b": np.zeros(shapes["conv_b"]),
        "a_log": np.log(rng.uniform((cfg.H,), 1.0, 16.0)),
        "D": np.ones(cfg.H),
        "dt_bias": dt + np.log(-np.expm1(-dt)),  # inverse softplus
        "W_h": rng.normal(shapes["W_h"], scale=(cfg.d + cfg.M) ** -0.5),
        "norm_weight": np.ones(HP),
        "W_out": rng.normal(shapes["W_out"], scale=HP ** -0.5),
    }
    return BlockParams.from_tensors(tensors)


@dataclass
class InferenceCache:
    conv_state: np.ndarray   # (HP + 2N) x d_conv, pre-activation channel values
    ssm_state: np.ndarray    # H x N x P
    mean_state: RunningMeanState
    t_pos: int = 1           # 1-based position of the next token

    @classmethod
    def empty(cls, cfg):
        channels = cfg.H * cfg.P + 2 * cfg.N
        return cls(
            conv_state=np.zeros((channels, cfg.d_conv)),
            ssm_state=np.zeros((cfg.H, cfg.N, cfg.P)),
            mean_state=RunningMeanState.fresh(cfg.d),
            t_pos=1,
        )

    def copy(self):
        return InferenceCache(self.conv_state.copy(), self.ssm_state.copy(), self.mean_state.copy(), self.t_pos)

    def validate(self, cfg):
        channels = cfg.H * cfg.P + 2 * cfg.N
        if self.conv_state.shape != (channels, cfg.d_conv):
            raise ShapeError(f"conv_state {self.conv_state.shape} != {(channels, cfg.d_conv)}")
        if self.ssm_state.shape != (cfg.H, cfg.N, cfg.P):
            raise ShapeError(f"ssm_state {self.ssm_state.shape} != {(cfg.H, cfg.N, cfg.P)}")
        if self.mean_state.cumsum.shape != (cfg.d,):
            raise ShapeError(f"mean_state width {self.mean_state.cumsum.shape} != {(cfg.d,)}")
        if self.t_pos < 1 or self.mean_state.count != self.t_pos - 1:
            raise ShapeError(f"cache position {self.t_pos} disagrees with {self.mean_state.count} accumulated tokens")
        return self


@dataclass
class BlockTape:
    """Intermediates saved by the prefill for the hand-written backward"""
    u: np.ndarray
    z: np.ndarray
    padded: np.ndarray
    windows: np.ndarray
    xc: np.ndarray
    x: np.ndarray
    B: np.ndarray
    C: np.ndarray
    route_in: np.ndarray
    dt_base: np.ndarray
    scores: np.ndarray
    bias_raw: np.ndarray
    slots: np.ndarray
    pre: np.ndarray
    delta: np.ndarray
    a: np.ndarray
    states: np.ndarray
    y: np.ndarray
    gate: np.ndarray = field(repr=False)
    normed: np.ndarray = field(repr=False)
    rms: np.ndarray = field(repr=False)
    out: np.ndarray = field(repr=False)
    applied_bias: np.ndarray = field(default=None, repr=False)  # gamma * bias, zero on shared slots

    def delta_shift(self, Q):
        """Delta_HADES - Delta_base on the expert slots (T, Q)"""
        unbiased = softplus_delta(self.pre - self.applied_bias)
        return (self.delta - unbiased)[:, :Q]


def rms_norm_gated(y, z, w, eps=NORM_EPS):
    """g = y * SiLU(z); g / sqrt(mean(g^2) + eps) * w"""
    y = np.asarray(y, dtype=float)
    g = y * silu(np.asarray(z, dtype=float))
    rms = np.sqrt(np.mean(g * g, axis=-1, keepdims=True) + eps)
    return g / rms * w


def rms_norm_backward(d_out, normed, rms, w):
    """Adjoint of out = (g / rms) * w; returns (d_g, d_w)"""
    d_w = np.sum((d_out * normed).reshape(-1, normed.shape[-1]), axis=0)
    d_n = d_out * w
    d_g = (d_n - normed * np.mean(d_n * normed, axis=-1, keepdims=True)) / rms
    return d_g, d_w


def _split_projection(proj, cfg):
    HP = cfg.H * cfg.P
    channels = HP + 2 * cfg.N
    return proj[..., :HP], proj[..., HP:HP + channels], proj[..., HP + channels:]


def _split_channels(xbc, cfg):
    HP = cfg.H * cfg.P
    x = xbc[..., :HP]
    B = xbc[..., HP:HP + cfg.N]
    C = xbc[..., HP + cfg.N:]
    return x.reshape(x.shape[:-1] + (cfg.H, cfg.P)), B, C


def forward_block(u, params, cfg, layer=0, collect_records=True, gamma=None):
    """Whole-sequence prefill of one block; returns (o, aux, records, cache, tape).

    ``gamma`` overrides the configured bias scale (analysis sweeps only).
    """
    u = np.asarray(u, dtype=float)
    if u.ndim != 2 or u.shape[1] != cfg.d:
        raise ShapeError(f"block input must be (T, {cfg.d}), got {u.shape}")
    T = u.shape[0]
    if T < 1:
        raise ShapeError("prefill needs at least one token")
    rcfg = cfg.router_config()
    if gamma is not None:
        rcfg.gamma = float(gamma)
    K = cfg.d_conv

    proj = check_finite("in_proj", u @ params.W_in)
    z, xbc_pre, dt_base = _split_projection(proj, cfg)

    padded = np.vstack([np.zeros((K - 1, xbc_pre.shape[1])), xbc_pre])
    windows = sliding_window_view(padded, K, axis=0)  # (T, channels, K)
    xc = np.einsum("tck,ck->tc", windows, params.conv_w) + params.conv_b
    x, B, C = _split_channels(silu(xc), cfg)

    positions = np.arange(1, T + 1)
    R, mean_state = cumulative_residual(u)
    route_in = routing_input(rcfg.mode, u, R, positions, rcfg.position_horizon)
    scores, bias_raw = score_and_bias(dt_base, route_in, params.router, rcfg.E)
    expert_ids = select_expert_ids(scores, rcfg, positions, layer)
    slots = slot_ids(expert_ids, rcfg)
    delta, pre = assemble_slots(dt_base, expert_ids, bias_raw, rcfg, params.dt_bias, return_pre=True)
    check_finite("delta", delta)
    a = np.exp(-delta * np.exp(params.a_log)[None, :])

    h = np.zeros((cfg.H, cfg.N, cfg.P))
    states = np.empty((T, cfg.H, cfg.N, cfg.P))
    y = np.empty((T, cfg.H, cfg.P))
    for t in range(T):
        h = a[t][:, None, None] * h + (delta[t][:, None, None] * B[t][None, :, None]) * x[t][:, None, :]
        states[t] = h
        y[t] = np.einsum("n,hnp->hp", C[t], h) + params.D[:, None] * x[t]
    check_finite("ssm_output", y)

    yf = y.reshape(T, cfg.H * cfg.P)
    gate = silu(z)
    g = yf * gate
    rms = np.sqrt(np.mean(g * g, axis=-1, keepdims=True) + NORM_EPS)
    normed = g / rms
    out = normed * params.norm_weight
    o = check_finite("block_output", out @ params.W_out)

    aux = {"balance": balance_loss(scores, rcfg.epsilon), "diversity": diversity_loss(y)}

    applied = np.zeros_like(pre)
    applied[:, :rcfg.Q] = rcfg.effective_gamma * bias_raw[:, :rcfg.Q]
    records = []
    if collect_records:
        shift = delta[:, :rcfg.Q] - softplus_delta(pre[:, :rcfg.Q] - applied[:, :rcfg.Q])
        shared = tuple(int(i) for i in rcfg.shared_ids)
        for t in range(T):
            records.append(SelectionRecord(
                token_index=t, expert_ids=tuple(int(i) for i in expert_ids[t]),
                scores=scores[t].copy(), bias=applied[t, :rcfg.Q].copy(),
                shared_ids=shared, layer=layer, delta_shift=shift[t].copy(),
            ))

    cache = InferenceCache(
        conv_state=padded[-K:].T.copy(),
        ssm_state=h.copy(),
        mean_state=mean_state,
        t_pos=T + 1,
    )
    tape = BlockTape(
        u=u, z=z, padded=padded, windows=windows, xc=xc, x=x, B=B, C=C,
        route_in=route_in, dt_base=dt_base, scores=scores, bias_raw=bias_raw,
        slots=slots, pre=pre, delta=delta, a=a, states=states, y=y,
        gate=gate, normed=normed, rms=rms, out=out, applied_bias=applied,
    )
    return o, aux, records, cache, tape


def prefill(u, params, cfg, layer=0):
    """Prefill returning (o, aux, records, cache)"""
    o, aux, records, cache, _ = forward_block(u, params, cfg, layer=layer)
    return o, aux, records, cache


def decode_step(u_t, params, cfg, cache, layer=0, return_record=False):
    """Advance one token from the cache; numerics match the prefill position"""
    u_t = np.asarray(u_t, dtype=float)
    if u_t.shape != (cfg.d,):
        raise ShapeError(f"decode token must have shape ({cfg.d},), got {u_t.shape}")
    cache = cache.copy().validate(cfg)
    rcfg = cfg.router_config()

    z, xbc_pre, dt_base = _split_projection(u_t @ params.W_in, cfg)

    cache.conv_state = np.roll(cache.conv_state, -1, axis=1)
    cache.conv_state[:, -1] = xbc_pre
    xc = np.sum(cache.conv_state * params.conv_w, axis=1) + params.conv_b
    x, B, C = _split_channels(silu(xc), cfg)

    position = cache.t_pos
    r_t, cache.mean_state = spectral_residual(u_t, cache.mean_state)
    route_in = routing_input(rcfg.mode, u_t[None, :], r_t[None, :], [position], rcfg.position_horizon)[0]
    scores, bias_raw = score_and_bias(dt_base, route_in, params.router, rcfg.E)
    expert_ids = select_expert_ids(scores[None, :], rcfg, [position], layer)[0]
    delta = np.atleast_1d(assemble_slots(dt_base, expert_ids, bias_raw, rcfg, params.dt_bias))
    a = np.exp(-delta * np.exp(params.a_log))

    cache.ssm_state = (a[:, None, None] * cache.ssm_state
                       + (delta[:, None, None] * B[None, :, None]) * x[:, None, :])
    y = np.einsum("n,hnp->hp", C, cache.ssm_state) + params.D[:, None] * x
    check_finite("ssm_output", y)
    out = rms_norm_gated(y.reshape(-1), z, params.norm_weight)
    o = check_finite("block_output", out @ params.W_out)
    cache.t_pos += 1

    if return_record:
        record = SelectionRecord(
            token_index=position - 1, expert_ids=tuple(int(i) for i in expert_ids),
            scores=scores.copy(), bias=rcfg.effective_gamma * bias_raw[:rcfg.Q],
            shared_ids=tuple(int(i) for i in rcfg.shared_ids), layer=layer,
        )
        return o, cache, record
    return o, cache


def block_backward(d_o, params, cfg, tape, d_balance=0.0, d_diversity=0.0):
    """Reverse-mode adjoint of forward_block.

    d_balance / d_diversity are the upstream weights on this block's aux
    losses. Expert selection is a constant index set. Returns (d_u, grads)
    with grads keyed like BlockParams.tensors().
    """
    rcfg = cfg.router_config()
    T = tape.u.shape[0]
    H, N, P, K = cfg.H, cfg.N, cfg.P, cfg.d_conv
    HP = H * P

    # out projection and gated RMS norm
    d_W_out = tape.out.T @ d_o
    d_out = d_o @ params.W_out.T
    d_g, d_norm_weight = rms_norm_backward(d_out, tape.normed, tape.rms, params.norm_weight)
    yf = tape.y.reshape(T, HP)
    d_yf = d_g * tape.gate
    d_z = d_g * yf * silu_grad(tape.z)

    d_y = d_yf.reshape(T, H, P)
    if d_diversity:
        d_y = d_y + d_diversity * diversity_loss_grad(tape.y)

    # scan adjoint per head; B and C are shared, so their gradients sum over heads
    a, delta = tape.a, tape.delta
    d_D = np.zeros(H)
    d_x = np.zeros_like(tape.x)
    d_B = np.zeros((T, N))
    d_C = np.zeros((T, N))
    d_delta = np.zeros((T, H))
    d_a = np.zeros((T, H))
    for head in range(H):
        disc = HeadDiscretized(a=a[:, head], Bbar=tape.B, C=tape.C, delta=delta[:, head], D=params.D[head])
        g = scan_head_backward(disc, tape.x[:, head], d_y[:, head], states=tape.states[:, head])
        d_a[:, head] = g["a"]
        d_delta[:, head] = g["delta"]
        d_D[head] = g["D"]
        d_x[:, head] = g["x"]
        d_B += g["Bbar"]
        d_C += g["C"]

    exp_a_log = np.exp(params.a_log)
    d_delta += d_a * a * (-exp_a_log[None, :])
    d_a_log = np.sum(d_a * a * (-delta * exp_a_log[None, :]), axis=0)

    # slot assembly, scores and routing projection
    d_dt_base, d_dt_bias, d_bias_raw = assemble_slots_backward(d_delta, tape.pre, tape.slots, rcfg, cfg.M)
    d_scores = np.zeros_like(tape.scores)
    if d_balance:
        d_scores = d_balance * balance_loss_grad(tape.scores, rcfg.epsilon)
    d_hb = np.concatenate([d_scores, d_bias_raw], axis=-1)
    features = np.concatenate([tape.route_in, tape.dt_base], axis=-1)
    d_W_h = features.T @ d_hb
    d_features = d_hb @ params.router.W_h.T
    d_route = d_features[:, :cfg.d]
    d_dt_base = d_dt_base + d_features[:, cfg.d:]

    d_u = np.zeros_like(tape.u)
    if rcfg.mode == "input_only":
        d_u += d_route
    elif rcfg.mode != "position_bias":
        d_u += cumulative_residual_backward(d_route)

    # depthwise causal conv + SiLU
    d_xbc = np.concatenate([d_x.reshape(T, HP), d_B, d_C], axis=-1)
    d_xc = d_xbc * silu_grad(tape.xc)
    d_conv_b = d_xc.sum(axis=0)
    d_conv_w = np.einsum("tck,tc->ck", tape.windows, d_xc)
    d_padded = np.zeros_like(tape.padded)
    for k in range(K):
        d_padded[k:k + T] += d_xc * params.conv_w[:, k]
    d_xbc_pre = d_padded[K - 1:]

    # packed input projection
    d_proj = np.concatenate([d_z, d_xbc_pre, d_dt_base], axis=-1)
    d_W_in = tape.u.T @ d_proj
    d_u += d_proj @ params.W_in.T

    grads = {
        "W_in": d_W_in, "conv_w": d_conv_w, "conv_b": d_conv_b,
        "a_log": d_a_log, "D": d_D, "dt_bias": d_dt_bias, "W_h": d_W_h,
        "norm_weight": d_norm_weight, "W_out": d_W_out,
    }
    return d_u, grads
