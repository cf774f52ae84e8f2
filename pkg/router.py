# =============================================================================
#           HADES TOOLKIT - SPECTRAL-RESIDUAL FILTER ROUTER
#           RUNNING MEAN, EXPERT SCORING, TOP-Q, SLOT ASSEMBLY, AUX LOSSES
# =============================================================================

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import ConfigError, ShapeError
from numerics import Rng
from ssm_core import softplus_delta, softplus_grad

logger = logging.getLogger(__name__)

ROUTER_MODES = ("spectral", "fixed", "random", "input_only", "no_bias", "position_bias")


@dataclass
class RouterConfig:
    M: int
    S: int
    H: int
    gamma: float = 0.25
    epsilon: float = 1e-10
    mode: str = "spectral"
    seed: int = 0
    position_horizon: int = 512

    @property
    def E(self):
        return self.M - self.S

    @property
    def Q(self):
        return self.H - self.S

    @property
    def effective_gamma(self):
        # no_bias keeps the projection but never lets it touch delta
        return 0.0 if self.mode == "no_bias" else self.gamma

    @property
    def shared_ids(self):
        return np.arange(self.E, self.M)

    @property
    def score_width(self):
        return self.E + self.Q

    def validate(self):
        if not 0 <= self.S <= self.H <= self.M:
            raise ConfigError(f"need 0 <= S <= H <= M, got S={self.S}, H={self.H}, M={self.M}")
        if self.Q > self.E:
            raise ConfigError(f"Q = H - S = {self.Q} exceeds expert count E = {self.E}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be non-negative, got {self.gamma}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.mode not in ROUTER_MODES:
            raise ConfigError(f"unknown router mode '{self.mode}', expected one of {ROUTER_MODES}")
        if self.position_horizon < 1:
            raise ConfigError("position_horizon must be at least 1")
        return self


@dataclass
class RouterParams:
    """Joint score/bias projection W_h of shape (d + M, E + Q), no additive bias"""
    W_h: np.ndarray

    def validate(self, d, cfg):
        expected = (d + cfg.M, cfg.score_width)
        if self.W_h.shape != expected:
            raise ShapeError(f"router projection shape {self.W_h.shape} != {expected}")
        return self


@dataclass
class RunningMeanState:
    cumsum: np.ndarray
    count: int = 0

    @classmethod
    def fresh(cls, d):
        return cls(cumsum=np.zeros(d), count=0)

    def copy(self):
        return RunningMeanState(cumsum=self.cumsum.copy(), count=self.count)


@dataclass
class SelectionRecord:
    token_index: int
    expert_ids: tuple
    scores: np.ndarray
    bias: np.ndarray
    shared_ids: tuple
    layer: int = 0
    delta_shift: np.ndarray = field(default=None, repr=False)


# --- Spectral residual ---

def spectral_residual(u_t, state):
    """Inclusive running-mean residual: accumulate u_t, then r_t = u_t - mean(u_1..u_t)"""
    u_t = np.asarray(u_t, dtype=float)
    if u_t.shape != state.cumsum.shape:
        raise ShapeError(f"token width {u_t.shape} != running mean width {state.cumsum.shape}")
    new_state = RunningMeanState(cumsum=state.cumsum + u_t, count=state.count + 1)
    r_t = u_t - new_state.cumsum / new_state.count
    return r_t, new_state


def cumulative_residual(U, state=None):
    """Whole-sequence form of spectral_residual over U (T, d); returns (R, final state)"""
    U = np.asarray(U, dtype=float)
    state = state or RunningMeanState.fresh(U.shape[1])
    sums = state.cumsum[None, :] + np.cumsum(U, axis=0)
    counts = state.count + np.arange(1, U.shape[0] + 1)
    R = U - sums / counts[:, None]
    final = RunningMeanState(cumsum=sums[-1].copy() if len(U) else state.cumsum.copy(),
                             count=int(state.count + U.shape[0]))
    return R, final


def cumulative_residual_backward(d_R, start_count=0):
    """Adjoint of cumulative_residual with respect to U"""
    d_R = np.asarray(d_R, dtype=float)
    counts = start_count + np.arange(1, d_R.shape[0] + 1)
    scaled = d_R / counts[:, None]
    # suffix sums: token s feeds every mean at t >= s
    suffix = np.cumsum(scaled[::-1], axis=0)[::-1]
    return d_R - suffix


def routing_input(mode, U, R, positions, horizon):
    """Vector placed in front of delta_base for scoring, per router mode"""
    if mode == "input_only":
        return U
    if mode == "position_bias":
        enc = np.asarray(positions, dtype=float) / float(horizon)
        return np.repeat(enc[:, None], U.shape[1], axis=1)
    return R


# --- Scoring and selection ---

def score_and_bias(delta_base, r_t, params, E):
    """hb = [r_t || delta_base] W_h; first E columns are scores, the rest raw bias"""
    delta_base = np.asarray(delta_base, dtype=float)
    r_t = np.asarray(r_t, dtype=float)
    features = np.concatenate([r_t, delta_base], axis=-1)
    if features.shape[-1] != params.W_h.shape[0]:
        raise ShapeError(f"routing features width {features.shape[-1]} != projection rows {params.W_h.shape[0]}")
    hb = features @ params.W_h
    return hb[..., :E], hb[..., E:]


def top_q(scores, Q):
    """Ids of the Q largest scores in descending order, ties to the lower index"""
    scores = np.asarray(scores, dtype=float)
    if Q > scores.shape[-1]:
        raise ValueError(f"cannot select Q={Q} of {scores.shape[-1]} experts")
    if Q < 0:
        raise ValueError("Q must be non-negative")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :Q]


def random_expert_ids(seed, layer, position, E, Q):
    """Input-independent draw of Q distinct experts, reproducible per (seed, layer, position)"""
    rng = Rng.keyed(seed, layer, position)
    return np.asarray(rng.choice(E, size=Q, replace=False), dtype=int)


def select_expert_ids(scores, cfg, positions, layer=0):
    """Per-token expert ids (T, Q) under the configured router mode"""
    T = scores.shape[0]
    if cfg.Q == 0:
        return np.zeros((T, 0), dtype=int)
    if cfg.mode == "fixed":
        return np.tile(np.arange(cfg.Q), (T, 1))
    if cfg.mode == "random":
        return np.stack([random_expert_ids(cfg.seed, layer, int(p), cfg.E, cfg.Q) for p in positions])
    return top_q(scores, cfg.Q)


def slot_ids(expert_ids, cfg):
    """Slot layout: selected experts (descending score) then shared ids ascending"""
    expert_ids = np.asarray(expert_ids, dtype=int)
    lead = expert_ids.shape[:-1]
    shared = np.broadcast_to(cfg.shared_ids, lead + (cfg.S,))
    return np.concatenate([expert_ids, shared], axis=-1)


def assemble_slots(delta_base, ids, b_t, cfg, dt_bias, return_pre=False):
    """Delta per slot: Softplus(gathered delta_base + dt_bias + gamma * zero-padded bias)"""
    delta_base = np.asarray(delta_base, dtype=float)
    ids = np.asarray(ids, dtype=int)
    b_t = np.asarray(b_t, dtype=float)
    if ids.shape[-1] != cfg.Q:
        raise ShapeError(f"expected {cfg.Q} expert ids per token, got {ids.shape[-1]}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.E):
        raise ValueError(f"expert id out of range [0, {cfg.E})")
    slots = slot_ids(ids, cfg)
    gathered = np.take_along_axis(delta_base, slots, axis=-1)
    bias = np.zeros(gathered.shape)
    bias[..., : cfg.Q] = cfg.effective_gamma * b_t[..., : cfg.Q]
    pre = gathered + np.asarray(dt_bias, dtype=float) + bias
    delta = softplus_delta(pre)
    if return_pre:
        return delta, pre
    return delta


def assemble_slots_backward(d_delta, pre, slots, cfg, M):
    """Adjoint of assemble_slots: returns (d_delta_base, d_dt_bias, d_bias_raw)"""
    d_pre = d_delta * softplus_grad(pre)
    lead = d_pre.shape[:-1]
    d_delta_base = np.zeros(lead + (M,))
    # ids within one token are distinct, so put_along_axis cannot collide
    np.put_along_axis(d_delta_base, slots, d_pre, axis=-1)
    d_dt_bias = d_pre.reshape(-1, d_pre.shape[-1]).sum(axis=0)
    d_bias_raw = cfg.effective_gamma * d_pre[..., : cfg.Q]
    return d_delta_base, d_dt_bias, d_bias_raw


# --- Auxiliary losses ---

def balance_loss(scores, epsilon):
    """Mean over tokens of Var(s_t) / (mean(s_t)^2 + eps), population variance"""
    s = np.asarray(scores, dtype=float)
    if s.size == 0 or s.shape[-1] == 0:
        return 0.0
    mean = s.mean(axis=-1)
    var = s.var(axis=-1)
    return float(np.mean(var / (mean * mean + epsilon)))


def balance_loss_grad(scores, epsilon):
    s = np.asarray(scores, dtype=float)
    if s.size == 0 or s.shape[-1] == 0:
        return np.zeros_like(s)
    E = s.shape[-1]
    tokens = s.size // E
    mean = s.mean(axis=-1, keepdims=True)
    var = s.var(axis=-1, keepdims=True)
    den = mean * mean + epsilon
    grad = (2.0 / E) * ((s - mean) / den - var * mean / (den * den))
    return grad / tokens


def _normalize_rows(y):
    norms = np.linalg.norm(y, axis=-1, keepdims=True)
    nonzero = norms > 0.0
    y_hat = np.where(nonzero, y / np.where(nonzero, norms, 1.0), 0.0)
    return y_hat, norms, nonzero


def diversity_loss(y):
    """Mean over tokens of mean_{i,j} (<y_i, y_j> - delta_ij)^2 on l2-normalized slot outputs.

    Zero-norm slot outputs are zero rows and drop out of the identity target.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim < 2:
        raise ShapeError("diversity_loss expects (..., H, P)")
    H = y.shape[-2]
    if H < 1:
        raise ValueError("diversity_loss needs at least one slot")
    if y.size == 0:
        return 0.0
    y_hat, _, nonzero = _normalize_rows(y)
    gram = y_hat @ np.swapaxes(y_hat, -1, -2)
    target = np.eye(H) * nonzero.astype(float)  # row mask on the diagonal
    per_token = np.mean((gram - target) ** 2, axis=(-1, -2))
    return float(per_token.mean())


def diversity_loss_grad(y):
    y = np.asarray(y, dtype=float)
    H = y.shape[-2]
    tokens = y.size // (H * y.shape[-1]) if y.size else 1
    y_hat, norms, nonzero = _normalize_rows(y)
    gram = y_hat @ np.swapaxes(y_hat, -1, -2)
    target = np.eye(H) * nonzero.astype(float)
    d_hat = (4.0 / (H * H)) * ((gram - target) @ y_hat)
    radial = np.sum(y_hat * d_hat, axis=-1, keepdims=True)
    safe = np.where(nonzero, norms, 1.0)
    d_y = np.where(nonzero, (d_hat - y_hat * radial) / safe, 0.0)
    return d_y / tokens


# --- Selection records ---

def records_to_frame(records):
    """One row per (token, rank): token_index, layer, rank, expert_id, score, bias"""
    rows = []
    for rec in records:
        for rank, expert in enumerate(rec.expert_ids):
            rows.append({
                "token_index": rec.token_index,
                "layer": rec.layer,
                "rank": rank,
                "expert_id": int(expert),
                "score": float(rec.scores[expert]),
                "bias": float(rec.bias[rank]) if len(rec.bias) > rank else 0.0,
            })
    return pd.DataFrame(rows, columns=["token_index", "layer", "rank", "expert_id", "score", "bias"])


def export_records_csv(records, path, header_line=None):
    frame = records_to_frame(records)
    with open(path, "w", newline="") as f:
        if header_line:
            f.write(f"# {header_line}\n")
        frame.to_csv(f, index=False)
    logger.info("wrote %d selection rows to %s", len(frame), path)
    return frame
