"""Ablating activations outside (or inside) a circuit.

An ablation methodology is the tuple (granularity, component, value, token
positions, direction, set). Granularity is fixed here to heads and MLPs with
separate Q/K/V inputs. Every node and edge ablation is lowered to one boolean
``[n_edges, seq_len]`` patch mask consumed by the factorized forward pass, so
the cost of a patched run does not depend on how many edges are patched.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .data import LengthMismatch, PromptPairBatch
from .graph import (
    DEFAULT_PATH_BOUND,
    INPUT,
    OUTPUT_IN,
    Circuit,
    Edge,
    GraphError,
    NodeId,
    NodeSite,
    PatchableModel,
    PathBoundExceeded,
    attn_np,
    count_paths,
    mlp_np,
    unembed_np,
)

VALUE_KINDS = ("zero", "gaussian_noise", "resample", "mean")
COMPONENTS = ("node", "edge", "branch")
POSITIONS = ("all", "specific")
DIRECTIONS = ("ablate_clean", "restore_clean")
SETS = ("circuit", "complement")


class AblationError(ValueError):
    pass


@dataclass(frozen=True)
class AblationValueSpec:
    kind: str = "resample"
    sigma: float = 0.1
    seed: int = 0
    # Mean only: which side of the batch supplies the donor distribution, and
    # whether the mean is taken separately for each token position.
    mean_source: str = "corrupt"
    per_position: bool = True

    def __post_init__(self):
        if self.kind not in VALUE_KINDS:
            raise AblationError(f"unknown ablation value {self.kind!r}")
        if self.kind == "gaussian_noise" and not self.sigma > 0:
            raise AblationError("gaussian noise needs sigma > 0")
        if self.mean_source not in ("corrupt", "clean"):
            raise AblationError(f"mean_source must be 'corrupt' or 'clean', got {self.mean_source!r}")


@dataclass(frozen=True)
class AblationSpec:
    component: str = "edge"
    value: AblationValueSpec = field(default_factory=AblationValueSpec)
    token_positions: str = "all"
    direction: str = "ablate_clean"
    set: str = "complement"
    granularity: str = "heads_mlps_qkv"

    def __post_init__(self):
        for name, allowed in (("component", COMPONENTS), ("token_positions", POSITIONS),
                              ("direction", DIRECTIONS), ("set", SETS)):
            if getattr(self, name) not in allowed:
                raise AblationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.granularity != "heads_mlps_qkv":
            raise AblationError("only the heads/MLPs with Q/K/V channels granularity is supported")
        if self.component == "branch" and self.token_positions != "all":
            raise AblationError("branch ablation is position-agnostic")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["value"] = asdict(self.value)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AblationSpec":
        d = dict(d)
        value = AblationValueSpec(**d.pop("value", {}))
        return cls(value=value, **d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **kw) -> "AblationSpec":
        d = self.to_dict()
        if "value" in kw and isinstance(kw["value"], AblationValueSpec):
            kw["value"] = asdict(kw["value"])
        d.update(kw)
        return AblationSpec.from_dict(d)


@dataclass(frozen=True)
class DonorCache:
    """Replacement activations per source, each broadcastable to ``[B, T, d_model]``."""

    values: Mapping[NodeId, np.ndarray]
    provenance: str
    run_tokens: np.ndarray
    run_noise: np.ndarray | None = None

    def __getitem__(self, node: NodeId) -> np.ndarray:
        try:
            return self.values[node]
        except KeyError:
            raise AblationError(f"donor cache has no entry for {node}") from None

    def covers(self, model: PatchableModel) -> bool:
        return all(s in self.values for s in model.sources)


def _source_outputs(model: PatchableModel, tokens, noise=None) -> dict[NodeId, np.ndarray]:
    _, outs, _ = model.run(tokens, embed_noise=noise, keep_cache=True)
    return {k: v.data for k, v in outs.items()}


def run_tokens_for(batch: PromptPairBatch, direction: str) -> np.ndarray:
    return batch.clean if direction == "ablate_clean" else batch.corrupt


def build_donor_cache(model: PatchableModel, value: AblationValueSpec, batch: PromptPairBatch,
                      direction: str = "ablate_clean", mean_dataset: np.ndarray | None = None
                      ) -> DonorCache:
    """Donor activations for ``value``.

    AblateClean runs the model on clean prompts and draws donors from corrupt
    prompts (or zeros / noise / a mean); RestoreClean runs on corrupt prompts and
    draws donors from clean ones. Gaussian noise is added to the token embeddings
    and the activations are re-derived by a forward pass: under RestoreClean the
    noised clean prompt is the run input and the clean run supplies the donors.
    """
    if direction not in DIRECTIONS:
        raise AblationError(f"unknown direction {direction!r}")
    D = model.spec.d_model
    restore = direction == "restore_clean"
    run = batch.corrupt if restore else batch.clean
    donor_side = batch.clean if restore else batch.corrupt
    kind = value.kind

    if kind == "zero":
        vals = {s: np.zeros((1, 1, D)) for s in model.sources}
        return DonorCache(vals, "zero", run)

    if kind == "gaussian_noise":
        rng = np.random.default_rng(value.seed)
        noise = rng.normal(0.0, value.sigma, size=batch.clean.shape + (D,))
        if restore:
            vals = _source_outputs(model, batch.clean)
            return DonorCache(vals, "clean-run", batch.clean, run_noise=noise)
        vals = _source_outputs(model, batch.clean, noise)
        return DonorCache(vals, f"noise(sigma={value.sigma},seed={value.seed})", batch.clean)

    if kind == "resample":
        if batch.clean.shape != batch.corrupt.shape:
            raise LengthMismatch(list(range(len(batch))))
        vals = _source_outputs(model, donor_side)
        return DonorCache(vals, "clean-run" if restore else "corrupt-run", run)

    # mean
    if mean_dataset is None:
        side = batch.clean if value.mean_source == "clean" else batch.corrupt
        mean_dataset = side if not restore else batch.clean
    mean_dataset = np.asarray(mean_dataset)
    if mean_dataset.ndim != 2 or mean_dataset.shape[0] == 0:
        raise AblationError("mean ablation needs a nonempty [N, T] donor dataset")
    if value.per_position and mean_dataset.shape[1] != run.shape[1]:
        raise AblationError("per-position mean needs donor prompts of the run length")
    outs = _source_outputs(model, mean_dataset)
    if value.per_position:
        vals = {s: a.mean(axis=0, keepdims=True) for s, a in outs.items()}
    else:
        vals = {s: a.mean(axis=(0, 1), keepdims=True) for s, a in outs.items()}
    tag = f"mean(n={mean_dataset.shape[0]},{'per-position' if value.per_position else 'pooled'})"
    return DonorCache(vals, tag, run)


# -------------------------------------------------------------------- patch masks


def complement(circuit: Circuit, model: PatchableModel, seq_len: int | None = None) -> Circuit:
    """Every edge (node) of the model not in ``circuit``.

    Position-qualified circuits are complemented in the (member, position)
    universe over ``seq_len`` positions; position-free members stand for every
    position.
    """
    circuit.validate(model)
    edge = circuit.granularity == "edge"
    units = model.edges if edge else [NodeSite(s) for s in model.sources]
    if not circuit.has_positions:
        return Circuit(frozenset(u for u in units if u not in circuit.members), circuit.granularity)
    T = seq_len or model.spec.max_seq_len
    at = (lambda u, p: u.at(p)) if edge else (lambda u, p: NodeSite(u.node, p))
    inside = set()
    for m in circuit.members:
        base = m.untimed if edge else NodeSite(m.node)
        if m.token_pos is None:
            inside.update(at(base, p) for p in range(T))
        else:
            inside.add(m)
    return Circuit(frozenset(at(u, p) for u in units for p in range(T) if at(u, p) not in inside),
                   circuit.granularity)


def _membership(circuit: Circuit, model: PatchableModel, T: int, specific: bool) -> np.ndarray:
    """Boolean ``[n_units, T]``: is unit (edge or source) at position in the circuit."""
    edge = circuit.granularity == "edge"
    index = model.edge_index if edge else model.src_index
    n = model.n_edges if edge else len(model.sources)
    inside = np.zeros((n, T), dtype=bool)
    for m in circuit.members:
        i = index[m.untimed] if edge else index[m.node]
        if m.token_pos is None or not specific:
            inside[i, :] = True
        elif m.token_pos < T:
            inside[i, m.token_pos] = True
    return inside


def patch_mask(model: PatchableModel, circuit: Circuit, spec: AblationSpec, seq_len: int) -> np.ndarray:
    """``[n_edges, seq_len]`` bool: which edge activations at which positions receive donors.

    With specific token positions and the complement set this patches circuit
    members at positions outside the circuit as well as non-circuit members at
    every position.
    """
    if spec.component == "branch":
        raise AblationError("branch ablation has no edge patch mask")
    circuit.validate(model)
    specific = spec.token_positions == "specific"
    if spec.component == "edge":
        if circuit.granularity != "edge":
            raise AblationError("edge ablation needs an edge circuit")
        inside = _membership(circuit, model, seq_len, specific)
        return ~inside if spec.set == "complement" else inside
    nodes = circuit.to_nodes()
    inside = _membership(nodes, model, seq_len, specific)
    target = ~inside if spec.set == "complement" else inside
    src_of_edge = np.array([model.src_index[e.src] for e in model.edges])
    return target[src_of_edge]


def run_patched(model: PatchableModel, tokens, mask: np.ndarray, donors: DonorCache) -> np.ndarray:
    """Fast path: every edge gets the same interpolation arithmetic, patched or not."""
    tokens = model.check_tokens(tokens)
    T = tokens.shape[1]
    if mask.shape != (model.n_edges, T):
        raise AblationError(f"patch mask shape {mask.shape} != {(model.n_edges, T)}")
    w = mask.astype(np.float64)[:, None, :, None]  # [E, 1, T, 1]
    weights = {e: w[e] for e in range(model.n_edges)}
    vals = {s: donors[s] for s in model.sources}
    out, _, _ = model.run(tokens, edge_weights=weights, donors=vals, embed_noise=donors.run_noise)
    return out.data


def run_naive(model: PatchableModel, tokens, mask: np.ndarray, donors: DonorCache) -> np.ndarray:
    """Reference edge patching: rebuild every destination input from scratch, per prompt."""
    tokens = model.check_tokens(tokens)
    B, T = tokens.shape
    D = model.spec.d_model
    noise = donors.run_noise
    outputs = []
    for b in range(B):
        emb = model.embed(tokens[b:b + 1], None if noise is None else noise[b:b + 1])[0]
        src = {INPUT: emb}

        def donor(s):
            arr = np.broadcast_to(donors[s], (B, T, D))
            return arr[b]

        def dst_input(d):
            x = np.zeros((T, D))
            for s in model.prior[d]:
                e = model.edge_index[Edge(s, d)]
                for t in range(T):
                    x[t] += donor(s)[t] if mask[e, t] else src[s][t]
            return x

        for l in range(model.spec.n_layers):
            for h in range(model.spec.n_heads):
                q, k, v = (dst_input(NodeId(c, l, h)) for c in ("q", "k", "v"))
                src[NodeId("attn", l, h)] = attn_np(model, l, h, q, k, v)
            if model.spec.has_mlp:
                src[NodeId("mlp", l)] = mlp_np(model, l, dst_input(NodeId("mlp_in", l)))
        outputs.append(unembed_np(model, dst_input(OUTPUT_IN)))
    return np.stack(outputs)


def run_ablated(model: PatchableModel, circuit: Circuit, spec: AblationSpec, batch: PromptPairBatch,
                donors: DonorCache | None = None, path_bound: int = DEFAULT_PATH_BOUND) -> np.ndarray:
    """Output ``[B, T, d_out]`` of the model under ``spec`` applied relative to ``circuit``."""
    if donors is None:
        donors = build_donor_cache(model, spec.value, batch, spec.direction)
    tokens = donors.run_tokens
    if not donors.covers(model):
        missing = [s.name for s in model.sources if s not in donors.values]
        raise AblationError(f"donor cache is missing {missing}")
    if spec.component == "branch":
        return branch_ablate_oracle(model, circuit, spec, tokens, donors, bound=path_bound)
    mask = patch_mask(model, circuit, spec, tokens.shape[1])
    return run_patched(model, tokens, mask, donors)


def branch_ablate_oracle(model: PatchableModel, circuit: Circuit, spec: AblationSpec, tokens,
                         donors: DonorCache, bound: int = DEFAULT_PATH_BOUND) -> np.ndarray:
    """Evaluate the treeified model directly.

    Every Input->Output path gets its own copy of each node along it. A path
    carries the clean input iff all of its edges are kept (the circuit under the
    complement set, everything else under the circuit set); otherwise its Input
    leaf is the donor Input activation.
    """
    n = count_paths(model)
    if n > bound:
        raise PathBoundExceeded(n, bound)
    if circuit.granularity != "edge":
        raise AblationError("branch ablation needs an edge circuit")
    circuit.validate(model)
    tokens = model.check_tokens(tokens)
    members = circuit.untimed().members
    kept = members if spec.set == "complement" else set(model.edges) - members
    clean_in = model.embed(tokens, donors.run_noise)
    donor_in = np.broadcast_to(donors[INPUT], clean_in.shape)

    def channel(c: NodeId, suffix: tuple[Edge, ...]) -> np.ndarray:
        total = np.zeros_like(clean_in)
        for s in model.prior[c]:
            path = (Edge(s, c),) + suffix
            if s == INPUT:
                total = total + (clean_in if all(e in kept for e in path) else donor_in)
            else:
                total = total + source(s, path)
        return total

    def source(s: NodeId, suffix: tuple[Edge, ...]) -> np.ndarray:
        if s.kind == "attn":
            q, k, v = (channel(NodeId(c, s.layer, s.head), suffix) for c in ("q", "k", "v"))
            return attn_np(model, s.layer, s.head, q, k, v)
        return mlp_np(model, s.layer, channel(NodeId("mlp_in", s.layer), suffix))

    return unembed_np(model, channel(OUTPUT_IN, ()))


def node_intervention(model: PatchableModel, tokens, nodes, donors: DonorCache) -> np.ndarray:
    """Residual-view node patching, for checking node ablation against edge masks."""
    from .graph import forward_residual

    tokens = model.check_tokens(tokens)
    B, T = tokens.shape
    D = model.spec.d_model
    repl = {n: np.broadcast_to(donors[n], (B, T, D)) for n in nodes}
    return forward_residual(model, tokens, repl)
