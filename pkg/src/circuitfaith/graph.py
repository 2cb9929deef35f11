"""Transformer runtime and its residual / factorized / treeified graph views.

Sources are ``Input``, every attention head ``A{l}.{h}`` and every MLP ``M{l}``.
Destinations are the channels that read the residual stream: ``A{l}.{h}.Q``,
``.K``, ``.V``, ``MlpIn{l}`` and ``OutputIn``. An edge joins a source to every
later destination channel; the input of a channel is the sum of the outputs
of its upstream sources, which is the identity edge patching relies on.

There is no layer norm. The unembedding sits outside the graph, reading
``OutputIn``.
"""

from __future__ import annotations

import base64
import csv
import io
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import Tensor, matmul, relu, gelu, softmax, swap_last, stack_sum

SOURCE_KINDS = ("input", "attn", "mlp")
CHANNEL_KINDS = ("q", "k", "v", "mlp_in", "output_in")


class GraphError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class NodeId:
    kind: str
    layer: int = -1
    head: int = -1

    @property
    def is_source(self) -> bool:
        return self.kind in SOURCE_KINDS

    @property
    def name(self) -> str:
        k = self.kind
        if k == "input":
            return "Input"
        if k == "attn":
            return f"A{self.layer}.{self.head}"
        if k == "mlp":
            return f"M{self.layer}"
        if k in ("q", "k", "v"):
            return f"A{self.layer}.{self.head}.{k.upper()}"
        if k == "mlp_in":
            return f"MlpIn{self.layer}"
        return "OutputIn"

    def __str__(self) -> str:
        return self.name

    @property
    def head_node(self) -> "NodeId":
        """The source node a channel belongs to (OutputIn maps to itself)."""
        if self.kind in ("q", "k", "v"):
            return NodeId("attn", self.layer, self.head)
        if self.kind == "mlp_in":
            return NodeId("mlp", self.layer)
        return self

    @classmethod
    def parse(cls, name: str) -> "NodeId":
        name = name.strip()
        if name == "Input":
            return cls("input")
        if name == "OutputIn":
            return cls("output_in")
        if name.startswith("MlpIn"):
            return cls("mlp_in", int(name[5:]))
        if name.startswith("M"):
            return cls("mlp", int(name[1:]))
        if name.startswith("A"):
            parts = name[1:].split(".")
            if len(parts) == 2:
                return cls("attn", int(parts[0]), int(parts[1]))
            if len(parts) == 3 and parts[2] in ("Q", "K", "V"):
                return cls(parts[2].lower(), int(parts[0]), int(parts[1]))
        raise GraphError(f"unparseable node name {name!r}")


INPUT = NodeId("input")
OUTPUT_IN = NodeId("output_in")


@dataclass(frozen=True, order=True)
class Edge:
    src: NodeId
    dst: NodeId
    token_pos: int | None = None

    @property
    def name(self) -> str:
        base = f"{self.src.name}->{self.dst.name}"
        return base if self.token_pos is None else f"{base}@{self.token_pos}"

    def __str__(self) -> str:
        return self.name

    def at(self, pos: int | None) -> "Edge":
        return Edge(self.src, self.dst, pos)

    @property
    def untimed(self) -> "Edge":
        return Edge(self.src, self.dst, None) if self.token_pos is not None else self

    @classmethod
    def parse(cls, text: str) -> "Edge":
        pos = None
        if "@" in text:
            text, p = text.rsplit("@", 1)
            pos = int(p)
        src, dst = text.split("->")
        return cls(NodeId.parse(src), NodeId.parse(dst), pos)


@dataclass(frozen=True, order=True)
class NodeSite:
    """A source node, optionally restricted to one token position."""

    node: NodeId
    token_pos: int | None = None

    @property
    def name(self) -> str:
        return self.node.name if self.token_pos is None else f"{self.node.name}@{self.token_pos}"

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> "NodeSite":
        pos = None
        if "@" in text:
            text, p = text.rsplit("@", 1)
            pos = int(p)
        return cls(NodeId.parse(text), pos)


def _member_key(m):
    pos = -1 if m.token_pos is None else m.token_pos
    if isinstance(m, Edge):
        return (m.dst, m.src, pos)
    return (m.node, pos)


@dataclass(frozen=True)
class Circuit:
    """A set of edges (``granularity="edge"``) or node sites (``"node"``)."""

    members: frozenset
    granularity: str = "edge"

    def __post_init__(self):
        if self.granularity not in ("edge", "node"):
            raise GraphError(f"unknown granularity {self.granularity!r}")
        want = Edge if self.granularity == "edge" else NodeSite
        for m in self.members:
            if not isinstance(m, want):
                raise GraphError(f"{self.granularity} circuit holds a {type(m).__name__}: {m}")

    @classmethod
    def of_edges(cls, edges: Iterable[Edge]) -> "Circuit":
        return cls(frozenset(edges), "edge")

    @classmethod
    def of_nodes(cls, nodes: Iterable[NodeId | NodeSite]) -> "Circuit":
        return cls(frozenset(n if isinstance(n, NodeSite) else NodeSite(n) for n in nodes), "node")

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, item) -> bool:
        return item in self.members

    def __iter__(self):
        return iter(sorted(self.members, key=_member_key))

    @property
    def has_positions(self) -> bool:
        return any(m.token_pos is not None for m in self.members)

    def untimed(self) -> "Circuit":
        """Drop token positions from every member."""
        if self.granularity == "edge":
            return Circuit.of_edges(e.untimed for e in self.members)
        return Circuit.of_nodes(NodeSite(n.node) for n in self.members)

    def to_nodes(self) -> "Circuit":
        """Node sites touched by an edge circuit: each edge's source and destination node."""
        if self.granularity == "node":
            return self
        sites = set()
        for e in self.members:
            sites.add(NodeSite(e.src, e.token_pos))
            if e.dst != OUTPUT_IN:
                sites.add(NodeSite(e.dst.head_node, e.token_pos))
        return Circuit.of_nodes(sites)

    def head_level(self) -> frozenset[tuple[str, str]]:
        """Edges with Q/K/V channels merged into their head, for diagram comparison."""
        if self.granularity != "edge":
            raise GraphError("head_level needs an edge circuit")
        return frozenset((e.src.name, e.dst.head_node.name) for e in self.members)

    def validate(self, model: "PatchableModel") -> None:
        if self.granularity == "edge":
            for e in self.members:
                if e.untimed not in model.edge_index:
                    raise GraphError(f"edge {e} not in model")
                if e.token_pos is not None and not 0 <= e.token_pos < model.spec.max_seq_len:
                    raise GraphError(f"edge {e} position out of range")
        else:
            known = set(model.sources)
            for n in self.members:
                if n.node not in known:
                    raise GraphError(f"node {n} not in model")
                if n.token_pos is not None and not 0 <= n.token_pos < model.spec.max_seq_len:
                    raise GraphError(f"node {n} position out of range")


@dataclass
class ModelSpec:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_mlp: int
    vocab: list[str]
    max_seq_len: int
    use_positional_embedding: bool = True
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    mlp_act: str = "relu"

    @property
    def has_mlp(self) -> bool:
        return self.d_mlp > 0

    @property
    def d_out(self) -> int:
        return int(self.weights["W_U"].shape[1])

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        D, dh, dm = self.d_model, self.d_head, self.d_mlp
        shapes = {"W_E": (len(self.vocab), D), "W_U": (D, None)}
        if self.use_positional_embedding:
            shapes["W_pos"] = (self.max_seq_len, D)
        for l in range(self.n_layers):
            for h in range(self.n_heads):
                pre = f"A{l}.{h}."
                shapes[pre + "W_Q"] = (D, dh)
                shapes[pre + "W_K"] = (D, dh)
                shapes[pre + "W_V"] = (D, dh)
                shapes[pre + "W_O"] = (dh, D)
            if self.has_mlp:
                shapes[f"M{l}.W_in"] = (D, dm)
                shapes[f"M{l}.W_out"] = (dm, D)
        return shapes

    def validate(self) -> None:
        if len(set(self.vocab)) != len(self.vocab):
            raise GraphError("vocab has duplicate tokens")
        if self.mlp_act not in ("relu", "gelu"):
            raise GraphError(f"unsupported MLP nonlinearity {self.mlp_act!r}")
        for name, shape in self.expected_shapes().items():
            if name not in self.weights:
                raise GraphError(f"missing weight {name}")
            got = self.weights[name].shape
            if len(got) != len(shape) or any(s is not None and s != g for s, g in zip(shape, got)):
                raise GraphError(f"weight {name} has shape {got}, expected {shape}")
        optional = {"b_U": (self.d_out,)}
        if self.has_mlp:
            for l in range(self.n_layers):
                optional[f"M{l}.b_in"] = (self.d_mlp,)
                optional[f"M{l}.b_out"] = (self.d_model,)
        for name, shape in optional.items():
            if name in self.weights and self.weights[name].shape != shape:
                raise GraphError(f"weight {name} has shape {self.weights[name].shape}, expected {shape}")
        allowed = set(self.expected_shapes()) | set(optional)
        for name in self.weights:
            if name not in allowed:
                raise GraphError(f"unexpected weight {name}")
        for name, w in self.weights.items():
            if not np.isfinite(w).all():
                raise GraphError(f"weight {name} has non-finite entries")

    def bias(self, name: str, size: int) -> np.ndarray:
        w = self.weights.get(name)
        return np.zeros(size) if w is None else w

    def token_ids(self, tokens: Sequence[str]) -> list[int]:
        index = {t: i for i, t in enumerate(self.vocab)}
        try:
            return [index[t] for t in tokens]
        except KeyError as exc:
            raise GraphError(f"unknown token {exc.args[0]!r}") from None


@dataclass
class ModelOutput:
    output: np.ndarray  # [B, T, d_out]
    src_out: dict[NodeId, np.ndarray] = field(default_factory=dict)  # [B, T, d_model]
    dst_in: dict[NodeId, np.ndarray] = field(default_factory=dict)


class PatchableModel:
    """An immutable model plus its enumerated factorized graph."""

    def __init__(self, spec: ModelSpec):
        spec.validate()
        self.spec = spec
        srcs = [INPUT]
        dsts = []
        order = [INPUT]
        for l in range(spec.n_layers):
            heads = [NodeId("attn", l, h) for h in range(spec.n_heads)]
            for h in range(spec.n_heads):
                for ch in ("q", "k", "v"):
                    dsts.append(NodeId(ch, l, h))
                    order.append(NodeId(ch, l, h))
            order.extend(heads)
            srcs.extend(heads)
            if spec.has_mlp:
                dsts.append(NodeId("mlp_in", l))
                order.append(NodeId("mlp_in", l))
                order.append(NodeId("mlp", l))
                srcs.append(NodeId("mlp", l))
        dsts.append(OUTPUT_IN)
        order.append(OUTPUT_IN)
        self.sources: list[NodeId] = srcs
        self.destinations: list[NodeId] = dsts
        self.topo_order: list[NodeId] = order
        self.src_index = {s: i for i, s in enumerate(srcs)}
        self.dst_index = {d: i for i, d in enumerate(dsts)}
        self.topo_index = {n: i for i, n in enumerate(order)}
        self.prior: dict[NodeId, list[NodeId]] = {
            d: [s for s in srcs if self.topo_index[s] < self.topo_index[d]] for d in dsts
        }
        self.edges: list[Edge] = [Edge(s, d) for d in dsts for s in self.prior[d]]
        self.edge_index: dict[Edge, int] = {e: i for i, e in enumerate(self.edges)}
        self._w = {k: np.asarray(v, dtype=np.float64) for k, v in spec.weights.items()}

    def __repr__(self) -> str:
        s = self.spec
        return f"PatchableModel(layers={s.n_layers}, heads={s.n_heads}, edges={len(self.edges)})"

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def w(self, name: str) -> np.ndarray:
        return self._w[name]

    def out_edges(self, src: NodeId) -> list[int]:
        return [i for i, e in enumerate(self.edges) if e.src == src]

    @cached_property
    def channel_edges(self) -> dict[NodeId, list[int]]:
        return {d: [self.edge_index[Edge(s, d)] for s in self.prior[d]] for d in self.destinations}

    # ---------------------------------------------------------------- inputs

    def check_tokens(self, tokens) -> np.ndarray:
        arr = np.asarray(tokens)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise GraphError(f"tokens must be [T] or [B, T], got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise GraphError("token ids must be integers")
        T = arr.shape[1]
        if T == 0 or T > self.spec.max_seq_len:
            raise GraphError(f"sequence length {T} outside [1, {self.spec.max_seq_len}]")
        V = len(self.spec.vocab)
        if arr.min() < 0 or arr.max() >= V:
            bad = arr[(arr < 0) | (arr >= V)][0]
            raise GraphError(f"unknown token id {int(bad)}")
        return arr

    def embed(self, tokens: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
        """Output of the Input source: token (+ optional noise) plus positional embedding."""
        x = self._w["W_E"][tokens]
        if noise is not None:
            x = x + noise
        if self.spec.use_positional_embedding:
            x = x + self._w["W_pos"][: tokens.shape[1]]
        return x

    # ---------------------------------------------------------------- node maps

    def attn_head(self, l: int, h: int, q_in, k_in, v_in):
        pre = f"A{l}.{h}."
        q = matmul(q_in, self._w[pre + "W_Q"])
        k = matmul(k_in, self._w[pre + "W_K"])
        v = matmul(v_in, self._w[pre + "W_V"])
        scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(self.spec.d_head))
        return matmul(matmul(softmax(scores), v), self._w[pre + "W_O"])

    def mlp(self, l: int, x):
        D, dm = self.spec.d_model, self.spec.d_mlp
        pre = matmul(x, self._w[f"M{l}.W_in"]) + self.spec.bias(f"M{l}.b_in", dm)
        act = relu(pre) if self.spec.mlp_act == "relu" else gelu(pre)
        return matmul(act, self._w[f"M{l}.W_out"]) + self.spec.bias(f"M{l}.b_out", D)

    def unembed(self, x):
        return matmul(x, self._w["W_U"]) + self.spec.bias("b_U", self.spec.d_out)

    # ---------------------------------------------------------------- factorized run

    def run(self, tokens, *, edge_weights=None, donors=None, embed_noise=None,
            keep_cache: bool = False, dst_hook=None):
        """Factorized forward pass; the core every patched run goes through.

        ``edge_weights[e]`` (array broadcastable to ``[B, T, 1]`` or a Tensor) is the
        fraction of edge ``e``'s activation taken from ``donors[src]`` instead of
        the live source output: ``(1 - w) * out + w * donor``. Edges missing from
        ``edge_weights`` are left untouched. ``dst_hook(dst, tensor)`` may replace a
        destination input (used to differentiate with respect to it).

        Returns ``(output Tensor, src_out, dst_in)``; the dicts are filled only
        when ``keep_cache`` is set.
        """
        tokens = self.check_tokens(tokens)
        spec = self.spec
        outs: dict[NodeId, Tensor] = {INPUT: Tensor(self.embed(tokens, embed_noise))}
        dst_in: dict[NodeId, Tensor] = {}

        def gather(d: NodeId):
            terms = []
            for s, e in zip(self.prior[d], self.channel_edges[d]):
                w = None if edge_weights is None else edge_weights.get(e)
                if w is None:
                    terms.append(outs[s])
                else:
                    terms.append(outs[s] * (1.0 - w) + donors[s] * w)
            x = stack_sum(terms)
            if dst_hook is not None:
                x = dst_hook(d, x)
            if keep_cache or dst_hook is not None:
                dst_in[d] = x
            return x

        for l in range(spec.n_layers):
            for h in range(spec.n_heads):
                q_in = gather(NodeId("q", l, h))
                k_in = gather(NodeId("k", l, h))
                v_in = gather(NodeId("v", l, h))
                outs[NodeId("attn", l, h)] = self.attn_head(l, h, q_in, k_in, v_in)
            if spec.has_mlp:
                outs[NodeId("mlp", l)] = self.mlp(l, gather(NodeId("mlp_in", l)))
        out = self.unembed(gather(OUTPUT_IN))
        return out, (outs if keep_cache else {}), dst_in


def build_model(spec: ModelSpec) -> PatchableModel:
    return PatchableModel(spec)


def enumerate_edges(model: PatchableModel) -> list[Edge]:
    return list(model.edges)


def forward(model: PatchableModel, tokens) -> ModelOutput:
    out, src, dst = model.run(tokens, keep_cache=True)
    return ModelOutput(
        out.data,
        {k: v.data for k, v in src.items()},
        {k: v.data for k, v in dst.items()},
    )


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(-1, keepdims=True))
    return z / z.sum(-1, keepdims=True)


def attn_np(model: PatchableModel, l: int, h: int, q_in, k_in, v_in) -> np.ndarray:
    """Numpy twin of ``PatchableModel.attn_head`` for the reference implementations."""
    w = model.w
    p = f"A{l}.{h}."
    q, k, v = q_in @ w(p + "W_Q"), k_in @ w(p + "W_K"), v_in @ w(p + "W_V")
    pat = _softmax_np(q @ np.swapaxes(k, -1, -2) / math.sqrt(model.spec.d_head))
    return (pat @ v) @ w(p + "W_O")


def mlp_np(model: PatchableModel, l: int, x) -> np.ndarray:
    spec = model.spec
    pre = x @ model.w(f"M{l}.W_in") + spec.bias(f"M{l}.b_in", spec.d_mlp)
    if spec.mlp_act == "relu":
        act = np.maximum(pre, 0.0)
    else:
        act = 0.5 * pre * (1 + np.tanh(math.sqrt(2 / math.pi) * (pre + 0.044715 * pre**3)))
    return act @ model.w(f"M{l}.W_out") + spec.bias(f"M{l}.b_out", spec.d_model)


def unembed_np(model: PatchableModel, x) -> np.ndarray:
    return x @ model.w("W_U") + model.spec.bias("b_U", model.spec.d_out)


def forward_residual(model: PatchableModel, tokens, replace: Mapping[NodeId, np.ndarray] | None = None
                     ) -> np.ndarray:
    """Plain residual-stream forward pass in numpy, independent of the graph code.

    ``replace[node]`` overrides that source's output as seen by everything
    downstream (residual-view node intervention).
    """
    tokens = model.check_tokens(tokens)
    spec = model.spec
    replace = replace or {}
    resid = model.embed(tokens)
    if INPUT in replace:
        resid = np.broadcast_to(replace[INPUT], resid.shape).copy()
    for l in range(spec.n_layers):
        head_outs = []
        for h in range(spec.n_heads):
            o = attn_np(model, l, h, resid, resid, resid)
            node = NodeId("attn", l, h)
            if node in replace:
                o = np.broadcast_to(replace[node], o.shape)
            head_outs.append(o)
        for o in head_outs:
            resid = resid + o
        if spec.has_mlp:
            o = mlp_np(model, l, resid)
            node = NodeId("mlp", l)
            if node in replace:
                o = np.broadcast_to(replace[node], o.shape)
            resid = resid + o
    return unembed_np(model, resid)


# -------------------------------------------------------------------- paths

DEFAULT_PATH_BOUND = 100_000


class PathBoundExceeded(GraphError):
    def __init__(self, count: int, bound: int):
        super().__init__(f"model has {count} input-to-output paths, bound is {bound}")
        self.count = count


def count_paths(model: PatchableModel, edges: Iterable[Edge] | None = None) -> int:
    """Number of Input->OutputIn edge chains, by dynamic programming over the DAG."""
    allowed = set(model.edges if edges is None else (e.untimed for e in edges))
    reach: dict[NodeId, int] = {INPUT: 1}
    for node in model.topo_order[1:]:
        if node.is_source:
            chans = _channels_of(model, node)
            reach[node] = sum(reach.get(ch, 0) for ch in chans)
        else:
            reach[node] = sum(reach[s] for s in model.prior[node] if Edge(s, node) in allowed)
    return reach[OUTPUT_IN]


def _channels_of(model: PatchableModel, node: NodeId) -> list[NodeId]:
    if node.kind == "attn":
        return [NodeId(c, node.layer, node.head) for c in ("q", "k", "v")]
    if node.kind == "mlp":
        return [NodeId("mlp_in", node.layer)]
    return []


def enumerate_paths(model: PatchableModel, bound: int = DEFAULT_PATH_BOUND,
                    edges: Iterable[Edge] | None = None) -> list[tuple[Edge, ...]]:
    """All Input->OutputIn chains as edge tuples ordered from Input outward."""
    edges = None if edges is None else list(edges)
    n = count_paths(model, edges)
    if n > bound:
        raise PathBoundExceeded(n, bound)
    allowed = set(model.edges if edges is None else (e.untimed for e in edges))
    paths: list[tuple[Edge, ...]] = []

    def walk(channel: NodeId, suffix: tuple[Edge, ...]):
        for s in model.prior[channel]:
            e = Edge(s, channel)
            if e not in allowed:
                continue
            if s == INPUT:
                paths.append((e,) + suffix)
            else:
                for ch in _channels_of(model, s):
                    walk(ch, (e,) + suffix)

    walk(OUTPUT_IN, ())
    return paths


# -------------------------------------------------------------------- weight files


def _encode(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"dtype": "<f8", "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(blob: dict) -> np.ndarray:
    if blob.get("dtype", "<f8") != "<f8":
        raise GraphError(f"unsupported dtype {blob['dtype']}")
    raw = base64.b64decode(blob["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(blob["shape"]).astype(np.float64)


def spec_to_json(spec: ModelSpec) -> str:
    doc = {
        "n_layers": spec.n_layers,
        "n_heads": spec.n_heads,
        "d_model": spec.d_model,
        "d_head": spec.d_head,
        "d_mlp": spec.d_mlp,
        "vocab": list(spec.vocab),
        "max_seq_len": spec.max_seq_len,
        "use_positional_embedding": spec.use_positional_embedding,
        "mlp_act": spec.mlp_act,
        "weights": {k: _encode(v) for k, v in spec.weights.items()},
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def spec_from_json(text: str) -> ModelSpec:
    doc = json.loads(text)
    weights = {k: _decode(v) for k, v in doc.pop("weights").items()}
    spec = ModelSpec(weights=weights, **doc)
    spec.validate()
    return spec


def save_model(model: PatchableModel | ModelSpec, path: str | Path) -> None:
    spec = model.spec if isinstance(model, PatchableModel) else model
    Path(path).write_text(spec_to_json(spec), encoding="utf-8", newline="\n")


def load_model(path: str | Path) -> PatchableModel:
    return PatchableModel(spec_from_json(Path(path).read_text(encoding="utf-8")))


def random_spec(rng: np.random.Generator, n_layers: int = 2, n_heads: int = 1, d_model: int = 6,
                d_head: int = 3, d_mlp: int = 4, vocab_size: int = 4, max_seq_len: int = 5,
                d_out: int = 3, biases: bool = False, scale: float = 0.7) -> ModelSpec:
    """Random Gaussian weights; handy for invariant testing."""
    spec = ModelSpec(n_layers, n_heads, d_model, d_head, d_mlp,
                     [f"t{i}" for i in range(vocab_size)], max_seq_len)
    shapes = spec.expected_shapes()
    shapes["W_U"] = (d_model, d_out)
    weights = {k: rng.normal(0, scale, size=s) for k, s in shapes.items()}
    if biases:
        weights["b_U"] = rng.normal(0, scale, size=d_out)
        for l in range(n_layers if d_mlp else 0):
            weights[f"M{l}.b_in"] = rng.normal(0, scale, size=d_mlp)
            weights[f"M{l}.b_out"] = rng.normal(0, scale, size=d_model)
    spec.weights = weights
    return spec


# ------------------------------------------------------------------ circuit files


def circuit_to_csv(circuit: Circuit) -> str:
    """Edge circuits as ``src,dst,token_pos`` rows; node circuits as ``node,token_pos``."""
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    if circuit.granularity == "edge":
        w.writerow(["src", "dst", "token_pos"])
        for e in circuit:
            w.writerow([e.src.name, e.dst.name, "" if e.token_pos is None else e.token_pos])
    else:
        w.writerow(["node", "token_pos"])
        for n in circuit:
            w.writerow([n.node.name, "" if n.token_pos is None else n.token_pos])
    return buf.getvalue()


def circuit_from_csv(text: str) -> Circuit:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise GraphError("empty circuit file")
    header, body = rows[0], [r for r in rows[1:] if r]
    pos = lambda s: None if s == "" else int(s)
    if header == ["src", "dst", "token_pos"]:
        return Circuit.of_edges(Edge(NodeId.parse(s), NodeId.parse(d), pos(p)) for s, d, p in body)
    if header == ["node", "token_pos"]:
        return Circuit.of_nodes(NodeSite(NodeId.parse(n), pos(p)) for n, p in body)
    raise GraphError(f"unrecognised circuit header {header}")


def head_level_csv(circuit: Circuit) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["src", "dst"])
    for s, d in sorted(circuit.head_level()):
        w.writerow([s, d])
    return buf.getvalue()
