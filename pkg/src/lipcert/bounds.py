"""Per-layer operator-norm machinery.

Gradient-form power iteration with an a-posteriori error certificate, exact
SVD oracles (including an independently materialized convolution operator
matrix), patch repetition counts for convolution/pooling, and closed-form
bounds for normalization layers and activations.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field
from math import ceil, pi, sqrt as _sqrt

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .graph import (
    Activation,
    AvgPool,
    BatchNorm,
    Conv2d,
    Dense,
    LipschitzBound,
    MaxPool,
    NetworkGraph,
    iter_layers,
)

# multiplicative guard against float64 rounding in the iteration and in the
# SVD the certificate is compared against
_ROUNDING_GUARD = 1.0 + 1e-12

ACTIVATION_LIPSCHITZ = {
    "relu": lambda alpha: 1.0,
    "leaky_relu": lambda alpha: max(1.0, abs(alpha)),
    "sigmoid": lambda alpha: 0.25,
    "tanh": lambda alpha: 1.0,
    "softplus": lambda alpha: 1.0,
    "elu": lambda alpha: max(1.0, abs(alpha)),
}


# ---------------------------------------------------------------------------
# linear maps (bias dropped: it never moves a Lipschitz constant)


class MatrixMap:
    """phi(u) = M u for a dense matrix (optionally a tape-tracked tensor)."""

    has_normalization = False

    def __init__(self, matrix):
        self._tensor = matrix if isinstance(matrix, Tensor) else None
        self.matrix = matrix.data if isinstance(matrix, Tensor) else np.asarray(
            matrix, dtype=np.float64
        )
        if self.matrix.ndim != 2:
            raise ValueError("MatrixMap needs a 2-D matrix")
        self.out_dim, self.in_dim = self.matrix.shape

    def apply(self, u: np.ndarray) -> np.ndarray:
        return u @ self.matrix.T

    def apply_gram(self, u: np.ndarray) -> np.ndarray:
        return (u @ self.matrix.T) @ self.matrix

    def apply_tensor(self, ut: Tensor) -> Tensor:
        w = self._tensor if self._tensor is not None else self.matrix
        return ad.linear(ut, w)


class DiagMap:
    """phi(u) = d * u (normalization layers at inference time)."""

    has_normalization = True

    def __init__(self, scale):
        self._tensor = scale if isinstance(scale, Tensor) else None
        self.scale = scale.data if isinstance(scale, Tensor) else np.asarray(
            scale, dtype=np.float64
        )
        self.in_dim = self.out_dim = self.scale.size

    def apply(self, u: np.ndarray) -> np.ndarray:
        return u * self.scale

    def apply_gram(self, u: np.ndarray) -> np.ndarray:
        return u * (self.scale * self.scale)

    def apply_tensor(self, ut: Tensor) -> Tensor:
        return ad.mul(ut, self._tensor if self._tensor is not None else self.scale)


class ConvOperatorMap:
    """phi(u) = Conv(u) on the layer's declared input shape."""

    has_normalization = False

    def __init__(self, conv: Conv2d, weight=None):
        if not conv.in_shape:
            raise ValueError("conv layer lacks input-shape metadata")
        self.conv = conv
        self._weight = weight if weight is not None else conv.weight
        self.in_shape = tuple(conv.in_shape)
        self.in_dim = int(np.prod(conv.in_shape))
        self.out_dim = int(np.prod(conv.out_shape))

    def apply_tensor(self, ut: Tensor) -> Tensor:
        x = ad.reshape(ut, (-1,) + self.in_shape)
        y = ad.conv2d(
            x, self._weight, None, stride=self.conv.stride, padding=self.conv.padding
        )
        return ad.reshape(y, (ut.shape[0], -1))

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.apply_tensor(Tensor(u)).data

    def apply_gram(self, u: np.ndarray) -> np.ndarray:
        return _gram_via_tape(self, u)


class ComposedMap:
    """Composition of linear maps, applied left to right."""

    def __init__(self, maps):
        self.maps = list(maps)
        self.in_dim = self.maps[0].in_dim
        self.out_dim = self.maps[-1].out_dim
        self.has_normalization = any(m.has_normalization for m in self.maps)

    def apply_tensor(self, ut: Tensor) -> Tensor:
        for m in self.maps:
            ut = m.apply_tensor(ut)
        return ut

    def apply(self, u: np.ndarray) -> np.ndarray:
        for m in self.maps:
            u = m.apply(u)
        return u

    def apply_gram(self, u: np.ndarray) -> np.ndarray:
        return _gram_via_tape(self, u)


def _gram_via_tape(phi, u: np.ndarray) -> np.ndarray:
    """M^T M u, rows of ``u`` are independent vectors."""
    with Tape() as tape:
        ut = Tensor(u, requires_grad=True)
        q = ad.sumsq(phi.apply_tensor(ut))
    (g,) = tape.gradient(q, [ut])
    return 0.5 * g


def as_linear_map(obj):
    """Coerce a layer, matrix, or map into a LinearMap."""
    if isinstance(obj, (MatrixMap, DiagMap, ConvOperatorMap, ComposedMap)):
        return obj
    if isinstance(obj, Dense):
        return MatrixMap(obj.weight)
    if isinstance(obj, Conv2d):
        return ConvOperatorMap(obj)
    if isinstance(obj, BatchNorm):
        return DiagMap(obj.gamma / np.sqrt(obj.var + obj.eps))
    if isinstance(obj, (np.ndarray, Tensor)):
        return MatrixMap(obj)
    raise TypeError(f"cannot interpret {type(obj).__name__} as a linear map")


# ---------------------------------------------------------------------------
# gradient-form power iteration


@dataclass
class PowerIterState:
    """One power-iteration chain: the carried vector and its norm history."""

    u: np.ndarray
    r_prev: float = float("nan")
    r_curr: float = float("nan")
    k: int = 0
    rng_seed: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.rng_seed)

    @classmethod
    def initialize(cls, n_dim: int, seed: int) -> "PowerIterState":
        rng = np.random.default_rng(seed)
        return cls(u=rng.standard_normal(n_dim), rng_seed=seed, rng=rng)


def power_step(layer, state: PowerIterState, noise_std: float = 0.0):
    """One update u <- u/|u|; v <- phi(u); u <- grad(|v|^2)/2.

    Returns (new_state, sigma) where sigma = |phi(u/|u|)| estimates the
    operator norm and |u| after the update converges to its square.
    ``noise_std`` > 0 perturbs the normalized vector, which keeps chains on
    normalization layers from freezing onto a coordinate axis.
    """
    phi = as_linear_map(layer)
    u = state.u
    norm = float(np.linalg.norm(u))
    if norm == 0.0 or not np.isfinite(norm):
        warnings.warn(
            "power iteration vector degenerated; reinitializing from Gaussian",
            RuntimeWarning,
            stacklevel=2,
        )
        u = state.rng.standard_normal(phi.in_dim)
        norm = float(np.linalg.norm(u))
    u = u / norm
    if noise_std > 0.0:
        u = u + state.rng.normal(0.0, noise_std, size=u.shape)
    with Tape() as tape:
        ut = Tensor(u.reshape(1, -1), requires_grad=True)
        q = ad.sumsq(phi.apply_tensor(ut))
    (g,) = tape.gradient(q, [ut])
    u_new = 0.5 * g.reshape(-1)
    sigma = float(np.sqrt(q.item()))
    r_new = float(np.linalg.norm(u_new))
    new_state = PowerIterState(
        u=u_new,
        r_prev=state.r_curr,
        r_curr=r_new,
        k=state.k + 1,
        rng_seed=state.rng_seed,
        rng=state.rng,
    )
    return new_state, sigma


# ---------------------------------------------------------------------------
# certified upper bound (power iteration with a-posteriori error)


@dataclass(frozen=True)
class NormCertificate:
    """Probabilistic upper bound on an operator norm (not its square)."""

    upper_bound: float
    raw_R_k: float
    error_term: float
    failure_probability: float
    n_dim: int
    iterations: int = 0


def power_chain_bounds(
    layer,
    k_iters: int,
    batch_m: int,
    seed: int = 0,
    tol_rel: float = 1e-13,
):
    """Run ``batch_m`` independent chains; per-chain R_k and error terms.

    Returns (R_k, error_term, iterations).  Each chain bounds the squared
    operator norm by R_k + error_term, with error_term =
    (D + sqrt(D(4R_k+D)))/2 and D = (R_k - R_{k-1}) * n clamped at zero.
    When ``tol_rel`` > 0, iteration stops early once every chain moves by
    less than tol_rel * R_k per step.
    """
    if k_iters < 2:
        raise ValueError("k_iters must be >= 2")
    if batch_m < 1:
        raise ValueError("batch_m must be >= 1")
    phi = as_linear_map(layer)
    n = phi.in_dim
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((batch_m, n))
    r_prev = np.full(batch_m, np.nan)
    r = np.full(batch_m, np.nan)
    done = 0
    for it in range(k_iters):
        norms = np.linalg.norm(u, axis=1)
        u = u / np.where(norms > 0, norms, 1.0)[:, None]
        u = phi.apply_gram(u)
        r_prev, r = r, np.linalg.norm(u, axis=1)
        if not np.all(np.isfinite(r)):
            raise ArithmeticError("power iteration produced non-finite values")
        done = it + 1
        if done >= 2 and tol_rel > 0 and np.all((r - r_prev) * n <= tol_rel * r):
            break
    delta = np.clip((r - r_prev) * n, 0.0, None)
    err = 0.5 * (delta + np.sqrt(delta * (4.0 * r + delta)))
    return r, err, done


def certified_operator_norm(
    layer,
    k_iters: int = 1000,
    batch_m: int = 128,
    seed: int = 0,
    tol_rel: float = 1e-13,
) -> NormCertificate:
    """Bound |phi|_2 from ``batch_m`` independent power-iteration chains.

    The certificate keeps the largest per-chain bound, which fails only if
    every chain fails, i.e. with probability at most (2/pi)^(batch_m/2).
    """
    phi = as_linear_map(layer)
    r, err, done = power_chain_bounds(
        phi, k_iters=k_iters, batch_m=batch_m, seed=seed, tol_rel=tol_rel
    )
    bound_sq = r + err
    best = int(np.argmax(bound_sq))
    return NormCertificate(
        upper_bound=float(np.sqrt(bound_sq[best])) * _ROUNDING_GUARD,
        raw_R_k=float(r[best]),
        error_term=float(err[best]),
        failure_probability=(2.0 / pi) ** (batch_m / 2.0),
        n_dim=phi.in_dim,
        iterations=done,
    )


# ---------------------------------------------------------------------------
# exact oracles


def conv_operator_matrix(conv: Conv2d) -> np.ndarray:
    """Materialize the convolution as an explicit matrix.

    Built directly from index arithmetic, independent of the conv forward
    pass, so it can serve as an oracle for it.
    """
    ci, h, w = conv.in_shape
    co, _, kh, kw = conv.weight.shape
    sh, sw = conv.stride
    ph, pw = conv.padding
    _, ho, wo = conv.out_shape
    m = np.zeros((co * ho * wo, ci * h * w))
    for ky in range(kh):
        for kx in range(kw):
            block = conv.weight[:, :, ky, kx]  # (co, ci)
            for oy in range(ho):
                iy = oy * sh - ph + ky
                if not 0 <= iy < h:
                    continue
                for ox in range(wo):
                    ix = ox * sw - pw + kx
                    if not 0 <= ix < w:
                        continue
                    rows = (np.arange(co) * ho + oy) * wo + ox
                    cols = (np.arange(ci) * h + iy) * w + ix
                    m[np.ix_(rows, cols)] += block
    return m


def exact_spectral_norm(layer, element_budget: int = 2**26) -> float:
    """Largest singular value via dense SVD; the test oracle.

    Refuses when the materialized matrix would exceed ``element_budget``
    elements.
    """

    def guarded_svd(mat: np.ndarray) -> float:
        if mat.size > element_budget:
            raise ValueError(
                f"matrix with {mat.size} elements exceeds budget {element_budget}"
            )
        if mat.size == 0:
            return 0.0
        return float(np.linalg.svd(mat, compute_uv=False)[0])

    if isinstance(layer, Tensor):
        layer = layer.data
    if isinstance(layer, np.ndarray):
        return guarded_svd(np.asarray(layer, dtype=np.float64))
    if isinstance(layer, MatrixMap):
        return guarded_svd(layer.matrix)
    if isinstance(layer, Dense):
        return guarded_svd(layer.weight)
    if isinstance(layer, Conv2d):
        out_dim = int(np.prod(layer.out_shape))
        in_dim = int(np.prod(layer.in_shape))
        if out_dim * in_dim > element_budget:
            raise ValueError(
                f"conv operator matrix {out_dim}x{in_dim} exceeds budget "
                f"{element_budget}"
            )
        return guarded_svd(conv_operator_matrix(layer))
    if isinstance(layer, BatchNorm):
        return float(np.max(np.abs(layer.gamma) / np.sqrt(layer.var + layer.eps)))
    if isinstance(layer, DiagMap):
        return float(np.max(np.abs(layer.scale)))
    raise TypeError(f"no exact spectral norm for {type(layer).__name__}")


# ---------------------------------------------------------------------------
# repetition counts and closed-form layer bounds


def repetition_count(
    h_in: int, w_in: int, h_k: int, w_k: int, h_s: int, w_s: int
) -> int:
    """How many sliding windows any single input element can join.

    ``h_in``/``w_in`` are post-padding sizes.
    """
    if min(h_in, w_in, h_k, w_k, h_s, w_s) < 1:
        raise ValueError("all sizes must be positive")
    if h_k > h_in or w_k > w_in:
        raise ValueError(
            f"kernel {h_k}x{w_k} larger than padded input {h_in}x{w_in}"
        )
    return ceil(min(h_k, h_in - h_k + 1) / h_s) * ceil(min(w_k, w_in - w_k + 1) / w_s)


def conv_repetition_count(conv: Conv2d) -> int:
    _, h, w = conv.in_shape
    kh, kw = conv.weight.shape[2:]
    return repetition_count(
        h + 2 * conv.padding[0],
        w + 2 * conv.padding[1],
        kh,
        kw,
        conv.stride[0],
        conv.stride[1],
    )


def kernel_matrix(conv: Conv2d) -> np.ndarray:
    """Kernel reshaped with one row per output channel."""
    return conv.weight.reshape(conv.weight.shape[0], -1)


def conv_norm_bound(
    conv: Conv2d,
    method: str = "power",
    k_iters: int = 1000,
    batch_m: int = 128,
    seed: int = 0,
):
    """Bound |Conv|_2 <= sqrt(n) * |W'|_2.

    Returns (LipschitzBound, NormCertificate or None).
    """
    wmat = kernel_matrix(conv)
    n_rep = conv_repetition_count(conv)
    scale = _sqrt(n_rep)
    if method == "svd":
        value = scale * exact_spectral_norm(wmat)
        return LipschitzBound(value, "certified", 0.0), None
    if method == "power":
        cert = certified_operator_norm(
            MatrixMap(wmat), k_iters=k_iters, batch_m=batch_m, seed=seed
        )
        bound = LipschitzBound(
            scale * cert.upper_bound, "certified", cert.failure_probability
        )
        return bound, cert
    raise ValueError(f"unknown method '{method}'")


def batchnorm_bound(gamma, var, eps: float) -> LipschitzBound:
    gamma = np.asarray(gamma, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise ValueError("variance must be elementwise >= 0")
    if not eps > 0:
        raise ValueError("eps must be > 0")
    return LipschitzBound(float(np.max(np.abs(gamma) / np.sqrt(var + eps))))


def activation_bound(kind: str, alpha: float = 1.0) -> LipschitzBound:
    try:
        value = ACTIVATION_LIPSCHITZ[kind](alpha)
    except KeyError:
        raise ValueError(f"unknown activation kind '{kind}'") from None
    return LipschitzBound(value)


def pool_bound(
    kind: str, h_in: int, w_in: int, h_k: int, w_k: int, h_s: int, w_s: int
) -> LipschitzBound:
    """Pooling bound: sqrt(repetitions) times the per-patch constant."""
    n_rep = repetition_count(h_in, w_in, h_k, w_k, h_s, w_s)
    if kind == "max":
        per_patch = 1.0
    elif kind == "avg":
        per_patch = 1.0 / _sqrt(h_k * w_k)
    else:
        raise ValueError(f"unknown pool kind '{kind}'")
    return LipschitzBound(_sqrt(n_rep) * per_patch)


# ---------------------------------------------------------------------------
# whole-network driver


def layer_bound(
    layer,
    method: str = "power",
    k_iters: int = 1000,
    batch_m: int = 128,
    seed: int = 0,
):
    """Bound one layer. Returns (LipschitzBound, NormCertificate or None)."""
    if isinstance(layer, Dense):
        if method == "svd":
            return LipschitzBound(exact_spectral_norm(layer)), None
        cert = certified_operator_norm(
            MatrixMap(layer.weight), k_iters=k_iters, batch_m=batch_m, seed=seed
        )
        return (
            LipschitzBound(cert.upper_bound, "certified", cert.failure_probability),
            cert,
        )
    if isinstance(layer, Conv2d):
        return conv_norm_bound(
            layer, method=method, k_iters=k_iters, batch_m=batch_m, seed=seed
        )
    if isinstance(layer, BatchNorm):
        return batchnorm_bound(layer.gamma, layer.var, layer.eps), None
    if isinstance(layer, (MaxPool, AvgPool)):
        _, h, w = layer.in_shape
        kind = "max" if isinstance(layer, MaxPool) else "avg"
        return (
            pool_bound(
                kind, h, w, layer.kernel[0], layer.kernel[1],
                layer.stride[0], layer.stride[1],
            ),
            None,
        )
    if isinstance(layer, Activation):
        return activation_bound(layer.kind, layer.alpha), None
    raise TypeError(f"cannot bound layer type {type(layer).__name__}")


def network_layer_bounds(
    graph: NetworkGraph,
    method: str = "power",
    k_iters: int = 1000,
    batch_m: int = 128,
    seed: int = 0,
):
    """Bound every layer. Returns (name -> bound, name -> certificate)."""
    bounds: dict[str, LipschitzBound] = {}
    certs: dict[str, NormCertificate] = {}
    for i, layer in enumerate(iter_layers(graph)):
        b, cert = layer_bound(
            layer, method=method, k_iters=k_iters, batch_m=batch_m, seed=seed + i
        )
        bounds[layer.name] = b
        if cert is not None:
            certs[layer.name] = cert
    return bounds, certs


def layer_bounds_csv(graph: NetworkGraph, bounds, certs, method: str) -> str:
    """Per-layer certificate report."""
    buf = io.StringIO()
    buf.write("layer,method,upper_bound,error_term,failure_probability\n")
    for layer in iter_layers(graph):
        b = bounds[layer.name]
        cert = certs.get(layer.name)
        used = method if cert is not None else "exact"
        err = cert.error_term if cert is not None else 0.0
        buf.write(
            f"{layer.name},{used},{b.value:.12g},{err:.12g},"
            f"{b.failure_probability:.12g}\n"
        )
    return buf.getvalue()
