"""Empirical tightness analysis of the certification chain.

Compares, per sample: the certified radius, the radius implied by observed
global/local Lipschitz lower bounds (maximum input-Jacobian spectral norm
over noisy probes), and the norm of a minimal adversarial perturbation found
by an iterative linearized attack.  The certified radius must sit below the
attack norm on every sample; anything else falsifies the certification.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .graph import LipschitzBound, NetworkGraph, forward_eval

SQRT2 = math.sqrt(2.0)


def network_jacobian_batch(graph: NetworkGraph, points: np.ndarray) -> np.ndarray:
    """Input Jacobians for a batch: (B, K, d) via K reverse passes."""
    xt = Tensor(points, requires_grad=True)
    with Tape() as tape:
        logits = forward_eval(graph, xt)
    b, k = logits.shape
    d = int(np.prod(points.shape[1:]))
    jac = np.empty((b, k, d))
    seed = np.zeros((b, k))
    for j in range(k):
        seed[:] = 0.0
        seed[:, j] = 1.0
        (g,) = tape.gradient(logits, [xt], seed=seed)
        jac[:, j, :] = g.reshape(b, -1)
    return jac


def local_lipschitz_lower(
    graph: NetworkGraph, x: np.ndarray, trials: int = 100, seed: int = 0
) -> float:
    """Max Jacobian spectral norm at x and at Gaussian-perturbed probes.

    Probe noise has per-element variance 1/d for input dimension d.  A lower
    bound on the true local (hence global) Lipschitz constant.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    rng = np.random.default_rng(seed)
    points = np.concatenate(
        [x[None], x[None] + rng.normal(0.0, 1.0 / math.sqrt(d), (trials,) + x.shape)]
    )
    jac = network_jacobian_batch(graph, points)
    return float(np.linalg.svd(jac, compute_uv=False)[:, 0].max())


def global_lipschitz_lower(
    graph: NetworkGraph,
    images: np.ndarray,
    trials: int = 100,
    seed: int = 0,
    local_values=None,
) -> float:
    """Max of the per-sample local lower bounds over an evaluation set."""
    if local_values is None:
        local_values = [
            local_lipschitz_lower(graph, images[i], trials=trials, seed=seed + i)
            for i in range(len(images))
        ]
    return float(np.max(local_values))


# ---------------------------------------------------------------------------
# minimal-perturbation attack


@dataclass(frozen=True)
class AttackResult:
    found: bool
    perturbation: np.ndarray | None
    norm: float
    iterations: int


def min_l2_attack(
    graph: NetworkGraph,
    x: np.ndarray,
    t: int,
    max_iters: int = 50,
    overshoot: float = 0.02,
) -> AttackResult:
    """Iterative linearized minimal l2 perturbation that flips the argmax
    away from class ``t``, refined by bisection along the found direction.

    Returns a zero perturbation when x is already classified differently.
    """
    x = np.asarray(x, dtype=np.float64)
    logits = forward_eval(graph, x).data

    def flipped(point: np.ndarray) -> bool:
        return int(np.argmax(forward_eval(graph, point).data)) != t

    if int(np.argmax(logits)) != t:
        return AttackResult(True, np.zeros_like(x), 0.0, 0)

    x_adv = x.copy()
    iterations = 0
    for it in range(max_iters):
        iterations = it + 1
        jac = network_jacobian_batch(graph, x_adv[None])[0]
        logits = forward_eval(graph, x_adv).data
        if int(np.argmax(logits)) != t:
            break
        w = jac - jac[t]  # (K, d)
        gaps = logits[t] - logits
        wnorm = np.linalg.norm(w, axis=1)
        dist = np.full(len(gaps), np.inf)
        ok = (np.arange(len(gaps)) != t) & (wnorm > 0)
        dist[ok] = np.abs(gaps[ok]) / wnorm[ok]
        if not np.any(np.isfinite(dist)):
            return AttackResult(False, None, float("nan"), iterations)
        j = int(np.argmin(dist))
        step = (gaps[j] / wnorm[j] ** 2) * w[j].reshape(x.shape)
        x_adv = x_adv + (1.0 + overshoot) * step
    if not flipped(x_adv):
        return AttackResult(False, None, float("nan"), iterations)

    direction = x_adv - x
    base = float(np.linalg.norm(direction))
    lo, hi = 0.0, 1.0
    while (hi - lo) > 1e-4 * hi:
        mid = 0.5 * (lo + hi)
        if flipped(x + mid * direction):
            hi = mid
        else:
            lo = mid
    eps = hi * direction
    return AttackResult(True, eps, hi * base, iterations)


# ---------------------------------------------------------------------------
# tightness chain


@dataclass(frozen=True)
class TightnessRecord:
    sample_id: int
    a: float  # margin / (sqrt2 * certified L)
    b: float  # margin / (sqrt2 * global lower bound)
    c: float  # margin / (sqrt2 * local lower bound)
    d: float  # attack norm (nan when the attack found nothing)
    r1: float  # b / a
    r2: float  # c / b
    r3: float  # d / c
    attack_found: bool


def tightness_report(
    graph: NetworkGraph,
    images: np.ndarray,
    labels: np.ndarray,
    l_cert: LipschitzBound,
    trials: int = 100,
    seed: int = 0,
    attack_iters: int = 50,
    overshoot: float = 0.02,
):
    """Per-sample chain records and their medians.

    Misclassified samples are skipped (they have no certified radius); the
    summary counts them along with failed attacks.
    """
    logits = forward_eval(graph, images).data
    records: list[TightnessRecord] = []
    skipped = 0
    not_found = 0
    local_values = []
    for i in range(len(labels)):
        t = int(labels[i])
        if int(np.argmax(logits[i])) != t:
            skipped += 1
            continue
        rivals = np.delete(logits[i], t)
        margin = float(logits[i, t] - rivals.max())
        local = local_lipschitz_lower(graph, images[i], trials=trials, seed=seed + i)
        local_values.append(local)
        attack = min_l2_attack(
            graph, images[i], t, max_iters=attack_iters, overshoot=overshoot
        )
        if not attack.found:
            not_found += 1
        records.append((i, margin, local, attack))
    g_lower = float(np.max(local_values)) if local_values else float("nan")
    out: list[TightnessRecord] = []
    for i, margin, local, attack in records:
        a = margin / (SQRT2 * l_cert.value)
        b = margin / (SQRT2 * g_lower)
        c = margin / (SQRT2 * local)
        d = attack.norm if attack.found else float("nan")
        out.append(
            TightnessRecord(
                sample_id=i,
                a=a,
                b=b,
                c=c,
                d=d,
                r1=b / a if a > 0 else float("nan"),
                r2=c / b if b > 0 else float("nan"),
                r3=d / c if (attack.found and c > 0) else float("nan"),
                attack_found=attack.found,
            )
        )
    summary = {
        "median_r1": _nanmedian([r.r1 for r in out]),
        "median_r2": _nanmedian([r.r2 for r in out]),
        "median_r3": _nanmedian([r.r3 for r in out]),
        "median_a": _nanmedian([r.a for r in out]),
        "median_d": _nanmedian([r.d for r in out if r.attack_found]),
        "global_lower": g_lower,
        "certified_l": l_cert.value,
        "samples": len(out),
        "misclassified_skipped": skipped,
        "attack_not_found": not_found,
    }
    return out, summary


def _nanmedian(values) -> float:
    values = [v for v in values if np.isfinite(v)]
    return float(np.median(values)) if values else float("nan")


def tightness_csv(records) -> str:
    buf = io.StringIO()
    buf.write("sample_id,A,B,C,D,r1,r2,r3,attack_found\n")
    for r in records:
        buf.write(
            f"{r.sample_id},{r.a:.12g},{r.b:.12g},{r.c:.12g},{r.d:.12g},"
            f"{r.r1:.12g},{r.r2:.12g},{r.r3:.12g},{int(r.attack_found)}\n"
        )
    return buf.getvalue()


def summary_block(summary: dict) -> str:
    lines = ["tightness summary"]
    for key in (
        "samples",
        "misclassified_skipped",
        "attack_not_found",
        "certified_l",
        "global_lower",
        "median_a",
        "median_d",
        "median_r1",
        "median_r2",
        "median_r3",
    ):
        lines.append(f"  {key} = {summary[key]:.6g}" if isinstance(
            summary[key], float) else f"  {key} = {summary[key]}")
    return "\n".join(lines) + "\n"
