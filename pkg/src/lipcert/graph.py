"""Network description and the Lipschitz-bound calculus.

A network is a sequence of layers and combinator blocks.  A ``Block`` runs
two or more branches on the same input and merges them by elementwise
addition or channel concatenation; fan-out into branches is plain
duplication, so each branch sees the identity on its input and the merge
rule carries the whole combination cost (add: L1+L2, concat:
sqrt(L1^2+L2^2), sequence: product).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import reduce
from typing import Callable, Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATION_KINDS = ("relu", "leaky_relu", "sigmoid", "tanh", "softplus", "elu")


class GraphError(ValueError):
    """Structural or shape problem, message names the offending layer."""


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True, eq=False)
class Dense:
    name: str
    weight: np.ndarray  # (out_features, in_features)
    bias: np.ndarray  # (out_features,)
    in_shape: tuple[int, ...] = ()
    out_shape: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class Conv2d:
    name: str
    weight: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    in_shape: tuple[int, ...] = ()
    out_shape: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class BatchNorm:
    name: str
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray  # running mean
    var: np.ndarray  # running variance, elementwise >= 0
    eps: float = 1e-5
    in_shape: tuple[int, ...] = ()
    out_shape: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class MaxPool:
    name: str
    kernel: tuple[int, int]
    stride: tuple[int, int]
    in_shape: tuple[int, ...] = ()
    out_shape: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class AvgPool:
    name: str
    kernel: tuple[int, int]
    stride: tuple[int, int]
    in_shape: tuple[int, ...] = ()
    out_shape: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class Activation:
    name: str
    kind: str
    alpha: float = 1.0
    in_shape: tuple[int, ...] = ()
    out_shape: tuple[int, ...] = ()


LayerSpec = Dense | Conv2d | BatchNorm | MaxPool | AvgPool | Activation


@dataclass(frozen=True, eq=False)
class Block:
    """Parallel combinator: run branches on the same input, then merge."""

    name: str
    kind: str  # "add" | "concat"
    branches: tuple[tuple["Node", ...], ...]
    in_shape: tuple[int, ...] = ()
    out_shape: tuple[int, ...] = ()


Node = LayerSpec | Block


@dataclass(frozen=True, eq=False)
class NetworkGraph:
    input_shape: tuple[int, ...]
    nodes: tuple[Node, ...]
    class_count: int


def validate_layer(layer: LayerSpec) -> None:
    if isinstance(layer, BatchNorm):
        if np.any(layer.var < 0):
            raise GraphError(f"layer '{layer.name}': variance must be >= 0")
        if not layer.eps > 0:
            raise GraphError(f"layer '{layer.name}': eps must be > 0")
    if isinstance(layer, Activation) and layer.kind not in ACTIVATION_KINDS:
        raise GraphError(f"layer '{layer.name}': unknown activation '{layer.kind}'")


# ---------------------------------------------------------------------------
# traversal helpers


def iter_layers(graph: NetworkGraph) -> Iterator[LayerSpec]:
    """All leaf layers in declaration order."""

    def walk(nodes) -> Iterator[LayerSpec]:
        for node in nodes:
            if isinstance(node, Block):
                for branch in node.branches:
                    yield from walk(branch)
            else:
                yield node

    yield from walk(graph.nodes)


def find_layer(graph: NetworkGraph, name: str) -> LayerSpec:
    for layer in iter_layers(graph):
        if layer.name == name:
            return layer
    raise GraphError(f"no layer named '{name}'")


def final_dense(graph: NetworkGraph) -> Dense:
    """The last root node, required to be a dense layer (Prop-2 use)."""
    if not graph.nodes or not isinstance(graph.nodes[-1], Dense):
        raise GraphError("network does not end in a dense layer")
    return graph.nodes[-1]


def collect_params(graph: NetworkGraph) -> dict[str, np.ndarray]:
    """Trainable parameters plus normalization statistics, keyed by name."""
    out: dict[str, np.ndarray] = {}
    for layer in iter_layers(graph):
        if isinstance(layer, (Dense, Conv2d)):
            out[f"{layer.name}.weight"] = layer.weight
            out[f"{layer.name}.bias"] = layer.bias
        elif isinstance(layer, BatchNorm):
            out[f"{layer.name}.gamma"] = layer.gamma
            out[f"{layer.name}.beta"] = layer.beta
            out[f"{layer.name}.mean"] = layer.mean
            out[f"{layer.name}.var"] = layer.var
    return out


def replace_params(graph: NetworkGraph, values: Mapping[str, np.ndarray]) -> NetworkGraph:
    """New graph with parameter arrays swapped in by name."""

    def rebuild_layer(layer: LayerSpec) -> LayerSpec:
        kw = {}
        if isinstance(layer, (Dense, Conv2d)):
            for f in ("weight", "bias"):
                key = f"{layer.name}.{f}"
                if key in values:
                    kw[f] = np.asarray(values[key], dtype=np.float64)
        elif isinstance(layer, BatchNorm):
            for f in ("gamma", "beta", "mean", "var"):
                key = f"{layer.name}.{f}"
                if key in values:
                    kw[f] = np.asarray(values[key], dtype=np.float64)
        return dataclasses.replace(layer, **kw) if kw else layer

    def rebuild(nodes) -> tuple[Node, ...]:
        out = []
        for node in nodes:
            if isinstance(node, Block):
                out.append(
                    dataclasses.replace(
                        node, branches=tuple(rebuild(b) for b in node.branches)
                    )
                )
            else:
                out.append(rebuild_layer(node))
        return tuple(out)

    return dataclasses.replace(graph, nodes=rebuild(graph.nodes))


def structurally_equal(a: NetworkGraph, b: NetworkGraph, params: bool = True) -> bool:
    if a.input_shape != b.input_shape or a.class_count != b.class_count:
        return False

    def node_eq(x: Node, y: Node) -> bool:
        if type(x) is not type(y) or x.name != y.name:
            return False
        if isinstance(x, Block):
            return (
                x.kind == y.kind
                and len(x.branches) == len(y.branches)
                and all(
                    len(p) == len(q) and all(node_eq(i, j) for i, j in zip(p, q))
                    for p, q in zip(x.branches, y.branches)
                )
            )
        for f in dataclasses.fields(x):
            u, v = getattr(x, f.name), getattr(y, f.name)
            if isinstance(u, np.ndarray):
                if params and not np.array_equal(u, v):
                    return False
            elif u != v:
                return False
        return True

    return len(a.nodes) == len(b.nodes) and all(
        node_eq(x, y) for x, y in zip(a.nodes, b.nodes)
    )


# ---------------------------------------------------------------------------
# forward evaluation


def _param(params: Mapping[str, Tensor] | None, key: str, fallback: np.ndarray):
    if params is not None and key in params:
        return params[key]
    return fallback


def _apply_layer(
    layer: LayerSpec,
    t: Tensor,
    params: Mapping[str, Tensor] | None,
    bn_train: bool,
    bn_stats: dict[str, tuple[np.ndarray, np.ndarray]] | None,
) -> Tensor:
    if layer.in_shape and t.shape[1:] != tuple(layer.in_shape):
        # dense layers flatten implicitly
        if not (
            isinstance(layer, Dense)
            and int(np.prod(t.shape[1:])) == int(np.prod(layer.in_shape))
        ):
            raise GraphError(
                f"layer '{layer.name}': expected input shape {tuple(layer.in_shape)}, "
                f"got {tuple(t.shape[1:])}"
            )
    if isinstance(layer, Dense):
        return ad.linear(
            t,
            _param(params, f"{layer.name}.weight", layer.weight),
            _param(params, f"{layer.name}.bias", layer.bias),
        )
    if isinstance(layer, Conv2d):
        return ad.conv2d(
            t,
            _param(params, f"{layer.name}.weight", layer.weight),
            _param(params, f"{layer.name}.bias", layer.bias),
            stride=layer.stride,
            padding=layer.padding,
        )
    if isinstance(layer, BatchNorm):
        gamma = _param(params, f"{layer.name}.gamma", layer.gamma)
        beta = _param(params, f"{layer.name}.beta", layer.beta)
        if bn_train:
            out, mu, var = ad.batchnorm_train(t, gamma, beta, layer.eps)
            if bn_stats is not None:
                bn_stats[layer.name] = (mu, var)
            return out
        return ad.batchnorm_infer(t, gamma, beta, layer.mean, layer.var, layer.eps)
    if isinstance(layer, MaxPool):
        return ad.maxpool2d(t, layer.kernel, layer.stride)
    if isinstance(layer, AvgPool):
        return ad.avgpool2d(t, layer.kernel, layer.stride)
    if isinstance(layer, Activation):
        return ad.ACTIVATION_OPS[layer.kind](t, layer.alpha)
    raise GraphError(f"unknown layer type {type(layer).__name__}")


def _run_nodes(nodes, t, params, bn_train, bn_stats) -> Tensor:
    for node in nodes:
        if isinstance(node, Block):
            outs = [
                _run_nodes(branch, t, params, bn_train, bn_stats)
                for branch in node.branches
            ]
            if node.kind == "add":
                t = reduce(ad.add, outs)
            else:
                t = ad.concat(outs, axis=1)
        else:
            t = _apply_layer(node, t, params, bn_train, bn_stats)
    return t


def forward_eval(
    graph: NetworkGraph,
    x,
    params: Mapping[str, Tensor] | None = None,
    bn_train: bool = False,
    bn_stats: dict | None = None,
) -> Tensor:
    """Evaluate the network; returns logits.

    ``x`` may be a single sample (input_shape) or a batch (N, *input_shape);
    the result has matching arity.  ``params`` optionally overrides layer
    parameters with tape-tracked tensors (used in training).
    """
    t = x if isinstance(x, Tensor) else Tensor(x)
    single = t.shape == tuple(graph.input_shape)
    if single:
        t = ad.reshape(t, (1,) + tuple(graph.input_shape))
    elif t.shape[1:] != tuple(graph.input_shape):
        raise GraphError(
            f"input: expected shape {tuple(graph.input_shape)} or a batch of it, "
            f"got {tuple(t.shape)}"
        )
    t = _run_nodes(graph.nodes, t, params, bn_train, bn_stats)
    if single:
        t = ad.reshape(t, t.shape[1:])
    return t


def grad(graph: NetworkGraph, x, loss_fn: Callable[[Tensor], Tensor]) -> np.ndarray:
    """Gradient of a scalar loss of the logits with respect to the input."""
    xt = Tensor(x, requires_grad=True)
    with ad.Tape() as tape:
        loss = loss_fn(forward_eval(graph, xt))
    (g,) = tape.gradient(loss, [xt])
    return g


# ---------------------------------------------------------------------------
# Lipschitz-bound calculus


@dataclass(frozen=True)
class LipschitzBound:
    """Nonnegative bound on an operator's Lipschitz constant."""

    value: float
    grade: str = "certified"  # "certified" | "estimate"
    failure_probability: float = 0.0

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError(f"bound must be >= 0, got {self.value}")
        if self.grade not in ("certified", "estimate"):
            raise ValueError(f"unknown grade '{self.grade}'")
        if not 0.0 <= self.failure_probability <= 1.0:
            raise ValueError("failure_probability must lie in [0, 1]")


def _merge_meta(a: LipschitzBound, b: LipschitzBound) -> tuple[str, float]:
    grade = "certified" if (a.grade == b.grade == "certified") else "estimate"
    return grade, min(1.0, a.failure_probability + b.failure_probability)


def compose_bound(a: LipschitzBound, b: LipschitzBound) -> LipschitzBound:
    return LipschitzBound(a.value * b.value, *_merge_meta(a, b))


def add_bound(a: LipschitzBound, b: LipschitzBound) -> LipschitzBound:
    return LipschitzBound(a.value + b.value, *_merge_meta(a, b))


def concat_bound(a: LipschitzBound, b: LipschitzBound) -> LipschitzBound:
    return LipschitzBound(float(np.hypot(a.value, b.value)), *_merge_meta(a, b))


UNIT_BOUND = LipschitzBound(1.0, "certified", 0.0)


@dataclass
class FoldOps:
    """Semiring-style callbacks for folding a graph into a single value."""

    unit: Callable[[], object]
    leaf: Callable[[LayerSpec], object]
    compose: Callable[[object, object], object]
    add: Callable[[object, object], object]
    concat: Callable[[object, object], object]


def fold_graph(nodes, ops: FoldOps):
    acc = ops.unit()
    for node in nodes:
        if isinstance(node, Block):
            vals = [fold_graph(branch, ops) for branch in node.branches]
            merge = ops.add if node.kind == "add" else ops.concat
            v = reduce(merge, vals)
        else:
            v = ops.leaf(node)
        acc = ops.compose(acc, v)
    return acc


def aggregate_lipschitz(
    graph: NetworkGraph,
    per_layer: Mapping[str, LipschitzBound],
    mode: str = "full",
) -> LipschitzBound:
    """Fold per-layer bounds through the graph.

    mode="full" bounds the whole network; mode="sub_network" excludes the
    final dense layer, giving the bound used by the per-class certificate.
    """
    nodes = graph.nodes
    if mode == "sub_network":
        final_dense(graph)
        nodes = nodes[:-1]
    elif mode != "full":
        raise ValueError(f"unknown mode '{mode}'")

    def leaf(layer: LayerSpec) -> LipschitzBound:
        try:
            return per_layer[layer.name]
        except KeyError:
            raise GraphError(f"missing bound for layer '{layer.name}'") from None

    ops = FoldOps(
        unit=lambda: UNIT_BOUND,
        leaf=leaf,
        compose=compose_bound,
        add=add_bound,
        concat=concat_bound,
    )
    return fold_graph(nodes, ops)
