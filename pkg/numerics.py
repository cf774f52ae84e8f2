# =============================================================================
#           HADES TOOLKIT - NUMERICAL PRIMITIVES
#           DFT, JACOBI SINGULAR VALUES, SEEDED RANDOM STREAMS
# =============================================================================

import logging
from dataclasses import dataclass

import numpy as np

from errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

# One-sided Jacobi settings
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def check_finite(name, array):
    """Raise NumericalError naming the tensor if it holds NaN or Inf"""
    array = np.asarray(array)
    if array.size and not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NumericalError(name, f"{bad} of {array.size} entries")
    return array


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


# --- Fourier transform ---

@dataclass(frozen=True)
class ComplexVector:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        if np.shape(self.re) != np.shape(self.im):
            raise ShapeError(f"re/im length mismatch: {np.shape(self.re)} vs {np.shape(self.im)}")

    @classmethod
    def from_complex(cls, values):
        values = np.asarray(values, dtype=complex)
        return cls(re=values.real.copy(), im=values.imag.copy())

    def as_complex(self):
        return self.re + 1j * self.im

    def magnitude(self):
        return np.hypot(self.re, self.im)

    def __len__(self):
        return len(self.re)


def _is_power_of_two(n):
    return n > 0 and (n & (n - 1)) == 0


def naive_dft(x):
    """Direct O(n^2) evaluation of X[k] = sum_t x[t] exp(-2 pi i k t / n)"""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    k = np.arange(n)
    # reduce k*t modulo n before scaling so large n keeps full phase accuracy
    phase = -2.0 * np.pi * (np.outer(k, k) % n) / n
    return np.exp(1j * phase) @ x


def dft(x, n=None, fast=True):
    """Discrete Fourier transform of a real vector.

    Arbitrary lengths use the direct sum. Power-of-two lengths take the
    numpy FFT path when ``fast`` is set; both agree to round-off.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError(f"dft expects a 1-D vector, got shape {x.shape}")
    if n is None:
        n = x.shape[0]
    if n != x.shape[0]:
        raise ShapeError(f"dft length {n} does not match input length {x.shape[0]}")
    if n < 1:
        raise ValueError("dft of an empty vector")
    check_finite("dft.input", x)
    if fast and _is_power_of_two(n):
        coeffs = np.fft.fft(x)
    else:
        coeffs = naive_dft(x)
    return ComplexVector.from_complex(coeffs)


def dft_matrix(n, unitary=True):
    """Dense DFT matrix F with F[k, t] = exp(-2 pi i k t / n) (scaled by 1/sqrt(n) if unitary)"""
    k = np.arange(n)
    F = np.exp(-2j * np.pi * (np.outer(k, k) % n) / n)
    if unitary:
        F = F / np.sqrt(n)
    return F


# --- Singular values ---

def singular_values(A, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Singular values of A by one-sided (Hestenes) Jacobi rotations, descending"""
    A = np.array(A, dtype=float, copy=True)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise ShapeError(f"singular_values expects a non-empty matrix, got shape {A.shape}")
    check_finite("singular_values.input", A)

    # work on the orientation with fewer columns; the spectrum is shared
    U = A if A.shape[0] >= A.shape[1] else A.T.copy()
    n = U.shape[1]

    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = U[:, p] @ U[:, p]
                beta = U[:, q] @ U[:, q]
                gamma = U[:, p] @ U[:, q]
                if alpha == 0.0 or beta == 0.0:
                    continue
                if abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sign = 1.0 if zeta >= 0 else -1.0
                t = sign / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                col_p = U[:, p].copy()
                U[:, p] = c * col_p - s * U[:, q]
                U[:, q] = s * col_p + c * U[:, q]
        if not rotated:
            logger.debug("jacobi converged after %d sweeps", sweep + 1)
            break
    else:
        logger.warning("jacobi hit max sweeps (%d) without convergence", max_sweeps)

    sigma = np.sqrt(np.sum(U * U, axis=0))
    return np.sort(sigma)[::-1]


# --- Random streams ---

class Rng:
    """Seeded counter-based generator (numpy Philox).

    The same seed gives the same stream on every platform. ``keyed`` derives
    independent child streams from a seed and an integer path, which lets
    callers regenerate the draw for a given (layer, token) without replaying
    the whole stream. Single owner: do not draw from one Rng concurrently.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))

    @classmethod
    def keyed(cls, seed, *path):
        rng = cls.__new__(cls)
        rng.seed = int(seed)
        sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
        rng._gen = np.random.Generator(np.random.Philox(sequence))
        return rng

    @property
    def generator(self):
        return self._gen

    def normal(self, shape, scale=1.0):
        return self._gen.standard_normal(size=tuple(shape)) * scale

    def uniform(self, shape, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size=tuple(shape))

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=None if shape is None else tuple(shape))

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def digits(self, count):
        return "".join(str(d) for d in self._gen.integers(0, 10, size=count))


def rng_normal(rng, shape):
    """i.i.d. standard normal tensor of the given shape drawn from rng"""
    return rng.normal(shape)
