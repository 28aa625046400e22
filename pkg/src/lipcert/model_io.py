"""Model text format, parameter initialization, and the binary weight sidecar.

Text format, one declaration per line (``#`` starts a comment)::

    input 1x28x28
    conv out=16 k=4x4 pad=1 stride=2
    relu
    maxpool k=2 stride=2
    avgpool k=2 stride=2
    batchnorm
    fc out=100
    block add { ... } { ... }
    block concat { ... } { ... }

Block branches may span multiple lines; an empty branch is the identity.
Weights live in a sidecar binary: magic ``LMT1``, then per parameter a
little-endian u32 name length, the utf-8 name, u32 rank, u32 dims, and the
float64 payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Mapping

import numpy as np

from .graph import (
    Activation,
    AvgPool,
    BatchNorm,
    Block,
    Conv2d,
    Dense,
    GraphError,
    MaxPool,
    NetworkGraph,
    Node,
    collect_params,
    iter_layers,
    replace_params,
    validate_layer,
)

ACTIVATION_DEFAULT_ALPHA = {"leaky_relu": 0.01, "elu": 1.0}

WEIGHTS_MAGIC = b"LMT1"


class ParseError(ValueError):
    """Model text problem; message carries the source line number."""


# ---------------------------------------------------------------------------
# tokenizing / raw declarations


@dataclass
class _Tok:
    line: int
    text: str


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        for piece in line.replace("{", " { ").replace("}", " } ").split():
            toks.append(_Tok(lineno, piece))
    return toks


@dataclass
class _Decl:
    line: int
    words: list[str]


@dataclass
class _BlockDecl:
    line: int
    kind: str
    branches: list[list]


class _Reader:
    def __init__(self, toks: list[_Tok]):
        self.toks = toks
        self.pos = 0

    def peek(self) -> _Tok | None:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def next(self) -> _Tok:
        tok = self.toks[self.pos]
        self.pos += 1
        return tok


def _read_sequence(r: _Reader, in_block: bool) -> list:
    decls: list = []
    while True:
        tok = r.peek()
        if tok is None:
            if in_block:
                raise ParseError("unexpected end of input: unclosed '{'")
            return decls
        if tok.text == "}":
            if not in_block:
                raise ParseError(f"line {tok.line}: unmatched '}}'")
            return decls
        if tok.text == "{":
            raise ParseError(f"line {tok.line}: unexpected '{{'")
        if tok.text == "block":
            start = r.next()
            kind_tok = r.peek()
            if kind_tok is None or kind_tok.text not in ("add", "concat"):
                raise ParseError(
                    f"line {start.line}: block kind must be 'add' or 'concat'"
                )
            r.next()
            branches = []
            while r.peek() is not None and r.peek().text == "{":
                r.next()
                branches.append(_read_sequence(r, in_block=True))
                closing = r.peek()
                if closing is None or closing.text != "}":
                    raise ParseError(f"line {start.line}: unclosed block branch")
                r.next()
            if len(branches) < 2:
                raise ParseError(
                    f"line {start.line}: block needs at least two {{...}} branches"
                )
            decls.append(_BlockDecl(start.line, kind_tok.text, branches))
            continue
        # plain declaration: word tokens from the same source line
        first = r.next()
        words = [first.text]
        while (
            r.peek() is not None
            and r.peek().line == first.line
            and r.peek().text not in ("{", "}")
        ):
            words.append(r.next().text)
        decls.append(_Decl(first.line, words))


# ---------------------------------------------------------------------------
# declaration arguments


def _parse_args(decl: _Decl, allowed: set[str]) -> dict[str, str]:
    args: dict[str, str] = {}
    for w in decl.words[1:]:
        if "=" not in w:
            raise ParseError(
                f"line {decl.line}: expected key=value arguments, got '{w}'"
            )
        k, v = w.split("=", 1)
        if k not in allowed:
            raise ParseError(f"line {decl.line}: unknown argument '{k}'")
        args[k] = v
    return args


def _pair(value: str, line: int, what: str) -> tuple[int, int]:
    parts = value.split("x")
    try:
        if len(parts) == 1:
            v = int(parts[0])
            pair = (v, v)
        elif len(parts) == 2:
            pair = (int(parts[0]), int(parts[1]))
        else:
            raise ValueError
    except ValueError:
        raise ParseError(f"line {line}: bad {what} '{value}'") from None
    return pair


def _int_arg(args: dict[str, str], key: str, line: int) -> int:
    try:
        return int(args[key])
    except (KeyError, ValueError):
        raise ParseError(f"line {line}: '{key}' must be an integer") from None


# ---------------------------------------------------------------------------
# building shaped layers


def _conv_out(size: int, k: int, pad: int, stride: int) -> int:
    return (size + 2 * pad - k) // stride + 1


class _Builder:
    def __init__(self):
        self.counter = 0

    def fresh(self, prefix: str) -> str:
        name = f"{prefix}{self.counter}"
        self.counter += 1
        return name

    def build_sequence(
        self, decls: list, shape: tuple[int, ...]
    ) -> tuple[tuple[Node, ...], tuple[int, ...]]:
        nodes: list[Node] = []
        for decl in decls:
            if isinstance(decl, _BlockDecl):
                node, shape = self.build_block(decl, shape)
            else:
                node, shape = self.build_layer(decl, shape)
            nodes.append(node)
        return tuple(nodes), shape

    def build_block(
        self, decl: _BlockDecl, shape: tuple[int, ...]
    ) -> tuple[Block, tuple[int, ...]]:
        name = self.fresh("block")
        built = []
        out_shapes = []
        for branch in decl.branches:
            nodes, out = self.build_sequence(branch, shape)
            built.append(nodes)
            out_shapes.append(out)
        if decl.kind == "add":
            if len(set(out_shapes)) != 1:
                raise ParseError(
                    f"line {decl.line}: add branches disagree on output shape "
                    f"{out_shapes}"
                )
            out_shape = out_shapes[0]
        else:
            ranks = {len(s) for s in out_shapes}
            if len(ranks) != 1:
                raise ParseError(
                    f"line {decl.line}: concat branches disagree on rank {out_shapes}"
                )
            if len(out_shapes[0]) == 3:
                spatial = {s[1:] for s in out_shapes}
                if len(spatial) != 1:
                    raise ParseError(
                        f"line {decl.line}: concat branches disagree on spatial size"
                    )
                out_shape = (sum(s[0] for s in out_shapes),) + out_shapes[0][1:]
            else:
                out_shape = (sum(s[0] for s in out_shapes),)
        return (
            Block(name, decl.kind, tuple(built), in_shape=shape, out_shape=out_shape),
            out_shape,
        )

    def build_layer(
        self, decl: _Decl, shape: tuple[int, ...]
    ) -> tuple[Node, tuple[int, ...]]:
        kind = decl.words[0]
        line = decl.line
        if kind == "conv":
            args = _parse_args(decl, {"out", "k", "pad", "stride"})
            if len(shape) != 3:
                raise ParseError(f"line {line}: conv needs a CxHxW input, got {shape}")
            if "out" not in args or "k" not in args:
                raise ParseError(f"line {line}: conv requires out= and k=")
            co = _int_arg(args, "out", line)
            kh, kw = _pair(args["k"], line, "kernel")
            ph, pw = _pair(args.get("pad", "0"), line, "padding")
            sh, sw = _pair(args.get("stride", "1"), line, "stride")
            ci, h, w = shape
            ho, wo = _conv_out(h, kh, ph, sh), _conv_out(w, kw, pw, sw)
            if kh > h + 2 * ph or kw > w + 2 * pw or ho < 1 or wo < 1:
                raise ParseError(
                    f"line {line}: kernel {kh}x{kw} does not fit padded input "
                    f"{h + 2 * ph}x{w + 2 * pw}"
                )
            name = self.fresh("conv")
            layer = Conv2d(
                name,
                np.zeros((co, ci, kh, kw)),
                np.zeros(co),
                stride=(sh, sw),
                padding=(ph, pw),
                in_shape=shape,
                out_shape=(co, ho, wo),
            )
            return layer, layer.out_shape
        if kind == "fc":
            args = _parse_args(decl, {"out"})
            if "out" not in args:
                raise ParseError(f"line {line}: fc requires out=")
            out = _int_arg(args, "out", line)
            d = int(np.prod(shape))
            name = self.fresh("fc")
            layer = Dense(
                name, np.zeros((out, d)), np.zeros(out), in_shape=shape, out_shape=(out,)
            )
            return layer, layer.out_shape
        if kind == "batchnorm":
            args = _parse_args(decl, {"eps"})
            try:
                eps = float(args.get("eps", "1e-5"))
            except ValueError:
                raise ParseError(f"line {line}: bad eps") from None
            if eps <= 0:
                raise ParseError(f"line {line}: eps must be > 0")
            c = shape[0]
            name = self.fresh("bn")
            layer = BatchNorm(
                name,
                np.ones(c),
                np.zeros(c),
                np.zeros(c),
                np.ones(c),
                eps=eps,
                in_shape=shape,
                out_shape=shape,
            )
            return layer, shape
        if kind in ("maxpool", "avgpool"):
            args = _parse_args(decl, {"k", "stride"})
            if len(shape) != 3:
                raise ParseError(f"line {line}: {kind} needs a CxHxW input")
            if "k" not in args:
                raise ParseError(f"line {line}: {kind} requires k=")
            kh, kw = _pair(args["k"], line, "kernel")
            sh, sw = _pair(args.get("stride", args["k"]), line, "stride")
            c, h, w = shape
            if kh > h or kw > w:
                raise ParseError(f"line {line}: pool kernel larger than input")
            out_shape = (c, (h - kh) // sh + 1, (w - kw) // sw + 1)
            cls = MaxPool if kind == "maxpool" else AvgPool
            layer = cls(
                self.fresh(kind), (kh, kw), (sh, sw), in_shape=shape, out_shape=out_shape
            )
            return layer, out_shape
        if kind in ("relu", "leaky_relu", "sigmoid", "tanh", "softplus", "elu"):
            args = _parse_args(decl, {"alpha"})
            try:
                alpha = float(args.get("alpha", ACTIVATION_DEFAULT_ALPHA.get(kind, 1.0)))
            except ValueError:
                raise ParseError(f"line {line}: bad alpha") from None
            layer = Activation(
                self.fresh(kind), kind, alpha=alpha, in_shape=shape, out_shape=shape
            )
            return layer, shape
        raise ParseError(f"line {line}: unknown layer kind '{kind}'")


def parse_model(text: str) -> NetworkGraph:
    """Parse model text into a shaped graph with zero-initialized parameters."""
    decls = _read_sequence(_Reader(_tokenize(text)), in_block=False)
    if not decls:
        raise ParseError("empty model: expected an 'input' declaration")
    head = decls[0]
    if isinstance(head, _BlockDecl) or head.words[0] != "input":
        raise ParseError(
            f"line {head.line}: model must start with an 'input' declaration"
        )
    if len(head.words) != 2:
        raise ParseError(f"line {head.line}: input takes a single size argument")
    dims = head.words[1].split("x")
    try:
        shape = tuple(int(d) for d in dims)
    except ValueError:
        raise ParseError(f"line {head.line}: bad input size '{head.words[1]}'") from None
    if len(shape) not in (1, 3) or any(d < 1 for d in shape):
        raise ParseError(
            f"line {head.line}: input must be D or CxHxW with positive sizes"
        )
    nodes, out_shape = _Builder().build_sequence(decls[1:], shape)
    graph = NetworkGraph(shape, nodes, class_count=int(np.prod(out_shape)))
    for layer in iter_layers(graph):
        validate_layer(layer)
    return graph


# ---------------------------------------------------------------------------
# serialization


def serialize_model(graph: NetworkGraph) -> str:
    lines = ["input " + "x".join(str(d) for d in graph.input_shape)]

    def fmt_num(x: float) -> str:
        return format(x, "g")

    def emit(nodes, indent: int):
        pad = "  " * indent
        for node in nodes:
            if isinstance(node, Block):
                lines.append(f"{pad}block {node.kind} {{")
                for i, branch in enumerate(node.branches):
                    if i:
                        lines.append(f"{pad}}} {{")
                    emit(branch, indent + 1)
                lines.append(f"{pad}}}")
            elif isinstance(node, Conv2d):
                co = node.weight.shape[0]
                kh, kw = node.weight.shape[2:]
                ph, pw = node.padding
                sh, sw = node.stride
                lines.append(
                    f"{pad}conv out={co} k={kh}x{kw} pad={ph}x{pw} stride={sh}x{sw}"
                )
            elif isinstance(node, Dense):
                lines.append(f"{pad}fc out={node.weight.shape[0]}")
            elif isinstance(node, BatchNorm):
                lines.append(f"{pad}batchnorm eps={fmt_num(node.eps)}")
            elif isinstance(node, MaxPool):
                lines.append(
                    f"{pad}maxpool k={node.kernel[0]}x{node.kernel[1]} "
                    f"stride={node.stride[0]}x{node.stride[1]}"
                )
            elif isinstance(node, AvgPool):
                lines.append(
                    f"{pad}avgpool k={node.kernel[0]}x{node.kernel[1]} "
                    f"stride={node.stride[0]}x{node.stride[1]}"
                )
            elif isinstance(node, Activation):
                if node.kind in ("leaky_relu", "elu"):
                    lines.append(f"{pad}{node.kind} alpha={fmt_num(node.alpha)}")
                else:
                    lines.append(f"{pad}{node.kind}")
            else:
                raise GraphError(f"cannot serialize {type(node).__name__}")

    emit(graph.nodes, 0)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# parameter initialization


def init_params(graph: NetworkGraph, seed: int) -> NetworkGraph:
    """He-normal weights, zero biases, identity normalization; deterministic."""
    rng = np.random.default_rng(seed)
    values: dict[str, np.ndarray] = {}
    for layer in iter_layers(graph):
        if isinstance(layer, Dense):
            fan_in = layer.weight.shape[1]
            values[f"{layer.name}.weight"] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), layer.weight.shape
            )
        elif isinstance(layer, Conv2d):
            fan_in = int(np.prod(layer.weight.shape[1:]))
            values[f"{layer.name}.weight"] = rng.normal(
                0.0, np.sqrt(2.0 / fan_in), layer.weight.shape
            )
    return replace_params(graph, values)


# ---------------------------------------------------------------------------
# weight sidecar binary


def write_weights_stream(fh: BinaryIO, params: Mapping[str, np.ndarray]) -> None:
    fh.write(WEIGHTS_MAGIC)
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<I", d))
        fh.write(arr.tobytes())


def read_weights_stream(fh: BinaryIO) -> dict[str, np.ndarray]:
    magic = fh.read(4)
    if magic != WEIGHTS_MAGIC:
        raise ValueError(f"bad weights magic {magic!r}, expected {WEIGHTS_MAGIC!r}")

    def take(n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise ValueError("truncated weights file")
        return buf

    out: dict[str, np.ndarray] = {}
    while True:
        head = fh.read(4)
        if not head:
            return out
        if len(head) != 4:
            raise ValueError("truncated weights file")
        (name_len,) = struct.unpack("<I", head)
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = tuple(
            struct.unpack("<I", take(4))[0] for _ in range(rank)
        )
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        out[name] = data.astype(np.float64)


def save_weights(graph: NetworkGraph, path) -> None:
    with open(path, "wb") as fh:
        write_weights_stream(fh, collect_params(graph))


def load_weights(graph: NetworkGraph, path) -> NetworkGraph:
    """New graph with parameters read from ``path``; shapes must match."""
    with open(path, "rb") as fh:
        values = read_weights_stream(fh)
    expected = collect_params(graph)
    missing = sorted(set(expected) - set(values))
    extra = sorted(set(values) - set(expected))
    if missing or extra:
        raise ValueError(
            f"weights do not match architecture (missing={missing}, extra={extra})"
        )
    for name, arr in values.items():
        if arr.shape != expected[name].shape:
            raise ValueError(
                f"parameter '{name}': expected shape {expected[name].shape}, "
                f"file has {arr.shape}"
            )
    return replace_params(graph, values)
