"""Margin training against a differentiable network Lipschitz estimate.

Each step runs one gradient-form power-iteration update per linear unit
(adjacent conv + batchnorm pairs are treated as one unit), composes the
per-unit spectral estimates through the graph calculus into a scalar L that
stays differentiable w.r.t. the weights, and adds sqrt(2)*c*L (or the
per-class analogue) to every rival logit before the cross-entropy.  The
addition is scaled per sample by a clamped factor so misclassified samples
receive no margin pressure.  With c = 0 the whole machinery drops out and
the loop is byte-identical to plain cross-entropy training.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .bounds import (
    ComposedMap,
    DiagMap,
    MatrixMap,
    PowerIterState,
    conv_repetition_count,
    layer_bound,
)
from .graph import (
    Activation,
    AvgPool,
    BatchNorm,
    Block,
    Conv2d,
    Dense,
    MaxPool,
    NetworkGraph,
    collect_params,
    forward_eval,
    replace_params,
)
from .model_io import write_weights_stream

SQRT2 = math.sqrt(2.0)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message carries epoch/step."""


@dataclass
class TrainConfig:
    c_target: float = 1.0
    warmup_epochs: int = 5
    epochs: int = 20
    batch_size: int = 50
    optimizer: str = "adam"  # "adam" | "momentum"
    learning_rate: float = 0.001
    momentum: float = 0.9
    lr_milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    seed: int = 0
    use_prop2_variant: bool = False
    lmt: bool = True
    power_noise_std: float = 1e-3
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.c_target < 0:
            raise ValueError("c_target must be >= 0")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.optimizer not in ("adam", "momentum"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")


def warmup_c(epoch: int, config: TrainConfig) -> float:
    """Linear ramp from c_target/warmup to c_target over the first epochs."""
    if config.warmup_epochs == 0:
        return config.c_target
    return config.c_target * min(1.0, (epoch + 1) / config.warmup_epochs)


# ---------------------------------------------------------------------------
# differentiable network Lipschitz estimate


@dataclass
class _LinearUnit:
    key: str
    kind: str  # "dense" | "conv" | "conv_bn" | "bn"
    layers: tuple
    in_dim: int
    factor: float = 1.0  # weight-independent sqrt(repetitions) for convs
    has_normalization: bool = False


def _build_unit_tree(nodes) -> list:
    """Mirror the node tree with linear units and constant factors."""
    out: list = []
    i = 0
    while i < len(nodes):
        node = nodes[i]
        if isinstance(node, Block):
            out.append(
                ("block", node.kind, [_build_unit_tree(b) for b in node.branches])
            )
        elif isinstance(node, Conv2d):
            kdim = int(np.prod(node.weight.shape[1:]))
            factor = math.sqrt(conv_repetition_count(node))
            if i + 1 < len(nodes) and isinstance(nodes[i + 1], BatchNorm):
                bn = nodes[i + 1]
                out.append(
                    _LinearUnit(
                        node.name, "conv_bn", (node, bn), kdim, factor, True
                    )
                )
                i += 2
                continue
            out.append(_LinearUnit(node.name, "conv", (node,), kdim, factor))
        elif isinstance(node, Dense):
            out.append(
                _LinearUnit(node.name, "dense", (node,), node.weight.shape[1])
            )
        elif isinstance(node, BatchNorm):
            out.append(
                _LinearUnit(node.name, "bn", (node,), node.gamma.size, 1.0, True)
            )
        elif isinstance(node, (MaxPool, AvgPool, Activation)):
            out.append(layer_bound(node)[0].value)
        else:
            raise TypeError(f"cannot handle node {type(node).__name__}")
        i += 1
    return out


@dataclass
class TrainState:
    """Per-unit power-iteration chains plus loop counters."""

    unit_tree: list
    power: dict[str, PowerIterState]
    epoch: int = 0
    step: int = 0
    l_estimate: float = field(default=float("nan"))


def init_train_state(
    graph: NetworkGraph, seed: int, mode: str = "full"
) -> TrainState:
    """Fresh Gaussian chains for every linear unit, one child seed each."""
    nodes = graph.nodes[:-1] if mode == "sub_network" else graph.nodes
    tree = _build_unit_tree(nodes)
    power: dict[str, PowerIterState] = {}

    def collect(t):
        for item in t:
            if isinstance(item, _LinearUnit):
                power[item.key] = None
            elif isinstance(item, tuple):
                for branch in item[2]:
                    collect(branch)

    collect(tree)
    seeds = np.random.SeedSequence(seed).spawn(len(power))
    for key, ss in zip(sorted(power), seeds):
        rng = np.random.default_rng(ss)
        unit = _find_unit(tree, key)
        power[key] = PowerIterState(
            u=rng.standard_normal(unit.in_dim), rng_seed=seed, rng=rng
        )
    return TrainState(unit_tree=tree, power=power)


def _find_unit(tree, key):
    for item in tree:
        if isinstance(item, _LinearUnit) and item.key == key:
            return item
        if isinstance(item, tuple):
            for branch in item[2]:
                found = _find_unit(branch, key)
                if found is not None:
                    return found
    return None


def _unit_map(unit: _LinearUnit, params):
    def p(layer, name, fallback):
        key = f"{layer.name}.{name}"
        if params is not None and key in params:
            return params[key]
        return fallback

    def bn_scale(bn):
        g = p(bn, "gamma", bn.gamma)
        gt = g if isinstance(g, Tensor) else Tensor(g)
        var = np.asarray(p(bn, "var", bn.var))  # current running stats
        return DiagMap(ad.mul(gt, 1.0 / np.sqrt(var + bn.eps)))

    if unit.kind == "dense":
        (dense,) = unit.layers
        w = p(dense, "weight", dense.weight)
        return MatrixMap(w if isinstance(w, Tensor) else Tensor(w))
    if unit.kind in ("conv", "conv_bn"):
        conv = unit.layers[0]
        w = p(conv, "weight", conv.weight)
        wt = w if isinstance(w, Tensor) else Tensor(w)
        wmat = ad.reshape(wt, (conv.weight.shape[0], -1))
        if unit.kind == "conv":
            return MatrixMap(wmat)
        return ComposedMap([MatrixMap(wmat), bn_scale(unit.layers[1])])
    if unit.kind == "bn":
        (bn,) = unit.layers
        return bn_scale(bn)
    raise ValueError(f"unknown unit kind '{unit.kind}'")


def _unit_sigma(
    unit: _LinearUnit,
    state: TrainState,
    params,
    noise_std: float,
    update_u: bool,
):
    ps = state.power[unit.key]
    norm = float(np.linalg.norm(ps.u))
    if norm == 0.0 or not np.isfinite(norm):
        warnings.warn(
            f"power chain for '{unit.key}' degenerated; reinitializing",
            RuntimeWarning,
            stacklevel=2,
        )
        ps.u = ps.rng.standard_normal(unit.in_dim)
        norm = float(np.linalg.norm(ps.u))
    u = ps.u / norm
    if unit.has_normalization and noise_std > 0.0:
        u = u + ps.rng.normal(0.0, noise_std, size=u.shape)
    phi = _unit_map(unit, params)
    with Tape() as inner:
        ut = Tensor(u.reshape(1, -1), requires_grad=True)
        q = ad.sumsq(phi.apply_tensor(ut))
    sigma = ad.sqrt(q)  # recorded on the surrounding tape only
    if update_u:
        (g,) = inner.gradient(q, [ut])
        u_new = 0.5 * g.reshape(-1)
        state.power[unit.key] = PowerIterState(
            u=u_new,
            r_prev=ps.r_curr,
            r_curr=float(np.linalg.norm(u_new)),
            k=ps.k + 1,
            rng_seed=ps.rng_seed,
            rng=ps.rng,
        )
    if unit.factor != 1.0:
        sigma = ad.mul(sigma, unit.factor)
    return sigma


def _c_mul(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return ad.mul(a, b)
    return a * b


def _c_add(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return ad.add(a, b)
    return a + b


def _c_hypot(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return ad.sqrt(ad.add(_c_mul(a, a), _c_mul(b, b)))
    return math.hypot(a, b)


def _fold_units(tree, state, params, noise_std, update_u):
    from functools import reduce

    acc = 1.0
    for item in tree:
        if isinstance(item, _LinearUnit):
            v = _unit_sigma(item, state, params, noise_std, update_u)
        elif isinstance(item, tuple):
            _, kind, branches = item
            vals = [
                _fold_units(b, state, params, noise_std, update_u) for b in branches
            ]
            v = reduce(_c_add if kind == "add" else _c_hypot, vals)
        else:
            v = item
        acc = _c_mul(acc, v)
    return acc


def training_lipschitz_estimate(
    graph: NetworkGraph,
    state: TrainState,
    params=None,
    noise_std: float = 1e-3,
    update_u: bool = True,
):
    """One power step per linear unit, folded into a scalar network bound.

    The result is a tape-tracked Tensor when ``params`` holds tracked
    weights; the chain vectors advance as a side effect but gradients never
    flow through their updates across steps.
    """
    l_est = _fold_units(state.unit_tree, state, params, noise_std, update_u)
    if not isinstance(l_est, Tensor):
        l_est = Tensor(l_est)
    state.l_estimate = float(l_est.data)
    return l_est


# ---------------------------------------------------------------------------
# logit adjustments


def stabilization_alpha(logits, t: int, l_value: float, c: float) -> float:
    """Clamped margin-over-threshold scale; 0 for misclassified samples."""
    if c * l_value == 0.0:
        return 1.0
    logits = np.asarray(logits, dtype=np.float64)
    denom = SQRT2 * c * l_value
    gaps = np.delete(logits[t] - logits, t)
    return float(np.min(np.clip(gaps / denom, 0.0, 1.0)))


def _alpha_batch(logits: np.ndarray, labels: np.ndarray, l_value: float, c: float):
    n, k = logits.shape
    if c * l_value == 0.0:
        return np.ones(n)
    denom = SQRT2 * c * l_value
    gaps = logits[np.arange(n), labels][:, None] - logits
    gaps[np.arange(n), labels] = np.inf
    return np.clip(gaps / denom, 0.0, 1.0).min(axis=1)


def _alpha_batch_prop2(
    logits: np.ndarray, labels: np.ndarray, rows: np.ndarray, l_value: float, c: float
):
    # per-rival threshold c * L_sub * |w_t - w_i|; zero-distance rivals are
    # unconstrained unless already violated
    n, k = logits.shape
    if c * l_value == 0.0:
        return np.ones(n)
    dists = np.linalg.norm(rows[:, None, :] - rows[None, :, :], axis=2)
    alpha = np.ones(n)
    for s in range(n):
        t = labels[s]
        best = 1.0
        for i in range(k):
            if i == t:
                continue
            gap = logits[s, t] - logits[s, i]
            d = dists[t, i]
            if d == 0.0:
                if gap <= 0:
                    best = 0.0
                continue
            best = min(best, max(0.0, min(1.0, gap / (c * l_value * d))))
        alpha[s] = best
    return alpha


def lmt_logit_adjust(logits, t, l, c: float, alpha):
    """Add alpha * sqrt(2) * c * L to every rival logit.

    ``logits`` may be a Tensor (training) or array (tests); ``t`` an int or a
    label vector; ``l`` a Tensor (kept differentiable) or float.  A zero
    coefficient returns the logits object unchanged.
    """
    single = np.isscalar(t) or np.ndim(t) == 0
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, float)
    z = data.reshape(1, -1) if single else data
    labels = np.array([t]) if single else np.asarray(t)
    a = np.full(len(labels), alpha) if np.isscalar(alpha) else np.asarray(alpha)
    coef = np.repeat(a[:, None] * SQRT2 * c, z.shape[1], axis=1)
    coef[np.arange(len(labels)), labels] = 0.0
    if single:
        coef = coef.reshape(-1)
    if not np.any(coef):
        return logits
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    return ad.add(logits, ad.mul(l, coef))


def lmt_logit_adjust_prop2(logits, t, last_dense_rows, l_sub, c: float, alpha):
    """Per-class additions alpha * c * L_sub * |w_t - w_i| on rival logits."""
    rows = np.asarray(
        last_dense_rows.data if isinstance(last_dense_rows, Tensor) else last_dense_rows,
        dtype=np.float64,
    )
    single = np.isscalar(t) or np.ndim(t) == 0
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, float)
    z = data.reshape(1, -1) if single else data
    labels = np.array([t]) if single else np.asarray(t)
    a = np.full(len(labels), alpha) if np.isscalar(alpha) else np.asarray(alpha)
    dists = np.linalg.norm(rows[labels][:, None, :] - rows[None, :, :], axis=2)
    coef = a[:, None] * c * dists
    coef[np.arange(len(labels)), labels] = 0.0
    if single:
        coef = coef.reshape(-1)
    if not np.any(coef):
        return logits
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    return ad.add(logits, ad.mul(l_sub, coef))


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad**2
            p.data -= (self.lr * lr_scale) * (m / bias1) / (
                np.sqrt(v / bias2) + self.eps
            )


class Momentum:
    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.mu = momentum
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr_scale: float = 1.0) -> None:
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            v = self.v[name]
            v *= self.mu
            v += p.grad
            p.data -= (self.lr * lr_scale) * v


# ---------------------------------------------------------------------------
# the loop


def _lr_scale(epoch: int, config: TrainConfig) -> float:
    return config.lr_decay ** sum(1 for m in config.lr_milestones if epoch >= m)


def train(
    graph: NetworkGraph,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    dump_path=None,
):
    """Train and return (trained graph, per-epoch log rows).

    Deterministic per seed: data order and power-chain draws come from
    independent child streams, so the c=0 path consumes exactly the same
    data stream as plain training.
    """
    data_ss, power_ss = np.random.SeedSequence(config.seed).spawn(2)
    data_rng = np.random.default_rng(data_ss)

    trainable = {}
    running = {}
    for name, arr in collect_params(graph).items():
        if name.endswith(".mean") or name.endswith(".var"):
            running[name] = arr.copy()
        else:
            trainable[name] = Tensor(arr.copy(), requires_grad=True)

    state = None
    if config.lmt:
        mode = "sub_network" if config.use_prop2_variant else "full"
        state = init_train_state(graph, int(power_ss.generate_state(1)[0]), mode=mode)

    if config.optimizer == "adam":
        opt = Adam(trainable, config.learning_rate)
    else:
        opt = Momentum(trainable, config.learning_rate, config.momentum)

    final_name = None
    if config.use_prop2_variant:
        from .graph import final_dense

        final_name = final_dense(graph).name

    n = len(labels)
    log_rows = []
    for epoch in range(config.epochs):
        c_t = warmup_c(epoch, config) if config.lmt else 0.0
        order = data_rng.permutation(n)
        scale = _lr_scale(epoch, config)
        loss_sum = 0.0
        correct = 0
        l_last = float("nan")
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x, y = images[idx], labels[idx]
            for p in trainable.values():
                p.grad = None
            bn_stats: dict = {}
            with Tape() as tape:
                logits = forward_eval(
                    graph, x, params=trainable, bn_train=True, bn_stats=bn_stats
                )
                if config.lmt and c_t > 0.0:
                    l_est = training_lipschitz_estimate(
                        graph,
                        state,
                        trainable | running,  # bound reads live running stats
                        noise_std=config.power_noise_std,
                    )
                    l_last = float(l_est.data)
                    if config.use_prop2_variant:
                        rows = trainable[f"{final_name}.weight"].data
                        alpha = _alpha_batch_prop2(logits.data, y, rows, l_last, c_t)
                        adjusted = lmt_logit_adjust_prop2(
                            logits, y, rows, l_est, c_t, alpha
                        )
                    else:
                        alpha = _alpha_batch(logits.data, y, l_last, c_t)
                        adjusted = lmt_logit_adjust(logits, y, l_est, c_t, alpha)
                else:
                    adjusted = logits
                loss = ad.cross_entropy_logits(adjusted, y)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                if dump_path is not None:
                    with open(dump_path, "wb") as fh:
                        write_weights_stream(
                            fh,
                            {k: p.data for k, p in trainable.items()} | running,
                        )
                raise TrainingDiverged(
                    f"non-finite loss {loss_val} at epoch {epoch} step "
                    f"{start // config.batch_size}"
                )
            tape.backward(loss)
            opt.step(lr_scale=scale)
            for bn_name, (mu, var) in bn_stats.items():
                m = config.bn_momentum
                rm, rv = running[f"{bn_name}.mean"], running[f"{bn_name}.var"]
                rm *= 1 - m
                rm += m * mu
                rv *= 1 - m
                rv += m * var
            loss_sum += loss_val * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            if state is not None:
                state.step += 1
        if state is not None:
            state.epoch = epoch + 1
        log_rows.append(
            {
                "epoch": epoch,
                "c": c_t,
                "loss": loss_sum / n,
                "train_acc": correct / n,
                "l_estimate": l_last,
            }
        )
    values = {k: p.data for k, p in trainable.items()} | running
    return replace_params(graph, values), log_rows


def training_log_csv(rows) -> str:
    buf = io.StringIO()
    buf.write("epoch,c,loss,train_acc,l_estimate\n")
    for r in rows:
        buf.write(
            f"{r['epoch']},{r['c']:.12g},{r['loss']:.12g},{r['train_acc']:.12g},"
            f"{r['l_estimate']:.12g}\n"
        )
    return buf.getvalue()
