"""Per-sample certified radii from margins and network Lipschitz bounds.

Two routes: the whole-network bound divides the prediction margin by
sqrt(2) * L, and the per-class route divides each logit gap by the
sub-network bound times the distance between the final-layer weight rows.
Any perturbation with l2 norm strictly below the radius provably cannot
change the argmax.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .bounds import network_layer_bounds
from .graph import (
    GraphError,
    LipschitzBound,
    NetworkGraph,
    aggregate_lipschitz,
    final_dense,
    forward_eval,
)

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class CertificationResult:
    sample_id: int
    label: int
    predicted: int
    margin: float
    radius: float
    method: str  # "prop1" | "prop2"
    bound_used: LipschitzBound
    radius_prop1: float = 0.0
    radius_prop2: float = float("nan")

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if self.margin <= 0 and self.radius != 0:
            raise ValueError("nonpositive margin must give radius 0")


def prediction_margin(logits, t: int) -> float:
    """True-class logit minus the best rival logit; negative if misclassified."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size < 2:
        raise ValueError("logits must be a vector of length >= 2")
    if not 0 <= t < logits.size:
        raise ValueError(f"label {t} out of range for {logits.size} classes")
    rivals = np.delete(logits, t)
    return float(logits[t] - rivals.max())


def certify_prop1(margin: float, l_full: LipschitzBound) -> float:
    """Radius margin / (sqrt(2) L); L = 0 means a constant network."""
    if l_full.value == 0.0:
        if margin > 0:
            return math.inf
        raise ValueError(
            "degenerate certificate: zero Lipschitz bound with nonpositive margin"
        )
    return max(0.0, margin) / (SQRT2 * l_full.value)


def certify_prop2(
    logits, last_dense_rows: np.ndarray, t: int, l_sub: LipschitzBound
) -> float:
    """Per-class radius min_i (y_t - y_i) / (L_sub |w_t - w_i|)."""
    logits = np.asarray(logits, dtype=np.float64)
    rows = np.asarray(last_dense_rows, dtype=np.float64)
    if rows.shape[0] != logits.size:
        raise ValueError("one weight row per class is required")
    if l_sub.value == 0.0:
        gaps = np.delete(logits[t] - logits, t)
        return math.inf if np.all(gaps > 0) else 0.0
    dists = np.linalg.norm(rows - rows[t], axis=1)
    radius = math.inf
    for i in range(logits.size):
        if i == t:
            continue
        gap = logits[t] - logits[i]
        if dists[i] == 0.0:
            if gap <= 0:
                return 0.0
            continue  # identical rows keep a positive gap forever
        radius = min(radius, gap / (l_sub.value * dists[i]))
    if math.isinf(radius):
        return radius
    return max(0.0, radius)


def certify_sample(
    sample_id: int,
    logits: np.ndarray,
    label: int,
    l_full: LipschitzBound,
    l_sub: LipschitzBound | None,
    last_rows: np.ndarray | None,
) -> CertificationResult:
    """Certify one sample, preferring the per-class route when available."""
    margin = prediction_margin(logits, label)
    predicted = int(np.argmax(logits))
    r1 = certify_prop1(margin, l_full) if margin > 0 else 0.0
    r2 = float("nan")
    method = "prop1"
    radius = r1
    bound = l_full
    if l_sub is not None and last_rows is not None:
        r2 = certify_prop2(logits, last_rows, label, l_sub) if margin > 0 else 0.0
        method = "prop2"
        radius = r2
        bound = l_sub
    return CertificationResult(
        sample_id=sample_id,
        label=int(label),
        predicted=predicted,
        margin=margin,
        radius=radius,
        method=method,
        bound_used=bound,
        radius_prop1=r1,
        radius_prop2=r2,
    )


def certify_batch(
    graph: NetworkGraph,
    images: np.ndarray,
    labels: np.ndarray,
    method: str = "prop2",
    norm_method: str = "power",
    k_iters: int = 1000,
    batch_m: int = 128,
    seed: int = 0,
    per_layer=None,
) -> list[CertificationResult]:
    """Certify a batch of samples against a freshly bounded network."""
    if per_layer is None:
        per_layer, _ = network_layer_bounds(
            graph, method=norm_method, k_iters=k_iters, batch_m=batch_m, seed=seed
        )
    l_full = aggregate_lipschitz(graph, per_layer, mode="full")
    l_sub = None
    last_rows = None
    if method == "prop2":
        try:
            last_rows = final_dense(graph).weight
            l_sub = aggregate_lipschitz(graph, per_layer, mode="sub_network")
        except GraphError:
            l_sub = None  # fall back to the whole-network route
    elif method != "prop1":
        raise ValueError(f"unknown certification method '{method}'")
    logits = forward_eval(graph, images).data
    return [
        certify_sample(i, logits[i], int(labels[i]), l_full, l_sub, last_rows)
        for i in range(len(labels))
    ]


def median_radius(results) -> float:
    return float(np.median([r.radius for r in results]))


def certification_csv(results, input_dim: int) -> str:
    """CSV plus a trailing summary comment with the median radius.

    The linf column is the l2 radius divided by sqrt(input dimension).
    """
    buf = io.StringIO()
    buf.write(
        "sample_id,label,predicted,margin,radius_prop1,radius_prop2,method,"
        "radius_linf\n"
    )
    scale = 1.0 / math.sqrt(input_dim)
    for r in results:
        buf.write(
            f"{r.sample_id},{r.label},{r.predicted},{r.margin:.12g},"
            f"{r.radius_prop1:.12g},{r.radius_prop2:.12g},{r.method},"
            f"{r.radius * scale:.12g}\n"
        )
    buf.write(f"# median_radius,{median_radius(results):.12g}\n")
    return buf.getvalue()
