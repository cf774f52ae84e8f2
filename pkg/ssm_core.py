# =============================================================================
#           HADES TOOLKIT - SELECTIVE SCAN CORE
#           DISCRETIZATION, REFERENCE SCAN AND FILTER-MATRIX VIEW
# =============================================================================

from dataclasses import dataclass

import numpy as np

from errors import ShapeError
from numerics import check_finite, sigmoid

SOFTPLUS_THRESHOLD = 20.0


def softplus_delta(delta_base):
    """ln(1 + exp(x)), returning x itself above the saturation threshold"""
    x = np.asarray(delta_base, dtype=float)
    safe = np.minimum(x, SOFTPLUS_THRESHOLD)
    out = np.where(x > SOFTPLUS_THRESHOLD, x, np.log1p(np.exp(safe)))
    return out if out.ndim else float(out)


def softplus_grad(delta_base):
    # d/dx softplus(x) = sigmoid(x); the saturated branch has slope 1
    x = np.asarray(delta_base, dtype=float)
    return np.where(x > SOFTPLUS_THRESHOLD, 1.0, sigmoid(x))


def decay(delta, a_log):
    """a = exp(-delta * exp(a_log)), strictly inside (0, 1) for delta > 0"""
    out = np.exp(-np.asarray(delta, dtype=float) * np.exp(np.asarray(a_log, dtype=float)))
    return out if np.ndim(out) else float(out)


@dataclass
class HeadDiscretized:
    """Per-token discretized parameters of one head.

    a: (T,) decay, Bbar: (T, N), C: (T, N), delta: (T,), D: skip scalar.
    """
    a: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray
    delta: np.ndarray
    D: float = 0.0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.Bbar = np.atleast_2d(np.asarray(self.Bbar, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.delta = np.asarray(self.delta, dtype=float)
        self.D = float(self.D)

    @property
    def length(self):
        return self.a.shape[0]

    @property
    def state_size(self):
        return self.Bbar.shape[1]

    def validate(self):
        T = self.length
        if self.delta.shape != (T,) or self.Bbar.shape[0] != T or self.C.shape != self.Bbar.shape:
            raise ShapeError(
                f"inconsistent head shapes: a {self.a.shape}, delta {self.delta.shape}, "
                f"Bbar {self.Bbar.shape}, C {self.C.shape}"
            )
        for name, value in (("a", self.a), ("Bbar", self.Bbar), ("C", self.C), ("delta", self.delta)):
            check_finite(f"head.{name}", value)
        # a may underflow to 0 or round to 1 in float64 at extreme step sizes
        if np.any(self.a < 0.0) or np.any(self.a > 1.0):
            raise ValueError("decay values must lie inside [0, 1]")
        if np.any(self.delta < 0.0):
            raise ValueError("step sizes must be non-negative")
        return self

    @classmethod
    def from_raw(cls, delta_base, a_log, Bbar, C, D=0.0):
        delta = softplus_delta(delta_base)
        return cls(a=decay(delta, a_log), Bbar=Bbar, C=C, delta=delta, D=D)


def scan_head(disc, x, h0=None, return_states=False):
    """Reference sequential scan of one head.

    h_t = a_t h_{t-1} + (delta_t Bbar_t) x_t^T,  y_t = C_t h_t + D x_t
    """
    disc.validate()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    T, N = disc.length, disc.state_size
    if x.shape[0] != T:
        raise ShapeError(f"input length {x.shape[0]} does not match head length {T}")
    P = x.shape[1]
    h = np.zeros((N, P)) if h0 is None else np.array(h0, dtype=float)
    if h.shape != (N, P):
        raise ShapeError(f"initial state shape {h.shape} != {(N, P)}")

    y = np.empty((T, P))
    states = np.empty((T, N, P)) if return_states else None
    for t in range(T):
        h = disc.a[t] * h + np.outer(disc.delta[t] * disc.Bbar[t], x[t])
        y[t] = disc.C[t] @ h + disc.D * x[t]
        if return_states:
            states[t] = h
    if return_states:
        return y, states
    return y


def scan_head_backward(disc, x, d_y, h0=None, states=None):
    """Adjoint of scan_head for upstream d_y; returns a dict of gradients.

    Keys: a, Bbar, C, delta, D, x, h0. The state adjoint runs backward in
    time and is carried through a_t. ``states`` (T, N, P) skips the forward
    recomputation when the caller already holds them.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    d_y = np.asarray(d_y, dtype=float).reshape(x.shape)
    if states is None:
        _, states = scan_head(disc, x, h0=h0, return_states=True)
    else:
        disc.validate()
        states = np.asarray(states, dtype=float)
    T, N = disc.length, disc.state_size
    P = x.shape[1]
    h_init = np.zeros((N, P)) if h0 is None else np.asarray(h0, dtype=float)

    grads = {
        "a": np.zeros(T), "Bbar": np.zeros((T, N)), "C": np.einsum("tnp,tp->tn", states, d_y),
        "delta": np.zeros(T), "D": float(np.sum(d_y * x)), "x": disc.D * d_y,
    }
    G = np.zeros((N, P))
    for t in range(T - 1, -1, -1):
        G = G + np.outer(disc.C[t], d_y[t])
        h_prev = states[t - 1] if t > 0 else h_init
        grads["a"][t] = np.sum(G * h_prev)
        Gx = G @ x[t]
        grads["delta"][t] = disc.Bbar[t] @ Gx
        grads["Bbar"][t] = disc.delta[t] * Gx
        grads["x"][t] += disc.delta[t] * (disc.Bbar[t] @ G)
        G = disc.a[t] * G
    grads["h0"] = G
    if squeeze:
        grads["x"] = grads["x"][:, 0]
    return grads


def materialize_matrix(disc):
    """Lower-triangular T x T matrix whose product with a channel equals the scan.

    Entry (t, s), s <= t: C_t . Bbar_s * delta_s * prod_{i=s+1}^{t} a_i, plus D on the diagonal.
    """
    disc.validate()
    T = disc.length
    # column s holds prod_{i=s+1}^{t} a_i for t >= s; running products stay exact at a = 0 or 1
    decay_prod = np.zeros((T, T))
    for s in range(T):
        decay_prod[s:, s] = np.cumprod(np.concatenate(([1.0], disc.a[s + 1:])))
    gram = disc.C @ (disc.Bbar * disc.delta[:, None]).T
    matrix = decay_prod * gram
    matrix[np.diag_indices(T)] += disc.D
    return matrix


def kernel_lti(A, B, C, K):
    """Impulse response [CB, CAB, ..., CA^K B] of a time-invariant diagonal system"""
    if K < 0:
        raise ValueError("kernel order must be non-negative")
    A = np.asarray(A, dtype=float)
    diag = np.diag(A) if A.ndim == 2 else A
    B = np.asarray(B, dtype=float).reshape(-1)
    C = np.asarray(C, dtype=float).reshape(-1)
    if not (diag.shape == B.shape == C.shape):
        raise ShapeError(f"A/B/C sizes disagree: {diag.shape}, {B.shape}, {C.shape}")
    powers = diag[None, :] ** np.arange(K + 1)[:, None]
    return powers @ (C * B)


def lti_convolve(kernel, x):
    """Causal convolution y_t = sum_k kernel[k] x_{t-k}, truncated to len(x)"""
    x = np.asarray(x, dtype=float)
    return np.convolve(x, np.asarray(kernel, dtype=float))[: x.shape[0]]
