"""Automatic circuit discovery: ACDC, subnetwork probing and HISP.

Every method works on edges or, in its node variant, on non-input source
nodes. Node results are turned into edge circuits by keeping every edge whose
two endpoints are both important, with Input and OutputIn always important.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .ablation import AblationError, AblationSpec, DonorCache, build_donor_cache, run_ablated
from .autodiff import Tape, Tensor
from .data import PromptPairBatch
from .graph import INPUT, OUTPUT_IN, Circuit, Edge, NodeId, NodeSite, PatchableModel
from .metrics import divergence

UNITS = ("edge", "node")


class DiscoveryError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScoreMap:
    """Importance score per edge, or per non-input source for node variants."""

    scores: Mapping
    algorithm: str
    granularity: str = "edge"
    task: str = ""

    def covers(self, model: PatchableModel) -> bool:
        return set(self.scores) == set(units_of(model, self.granularity))

    def ranked(self) -> list:
        """Units by decreasing score; ties keep enumeration order."""
        keys = list(self.scores)
        return sorted(keys, key=lambda k: -self.scores[k])

    def to_csv(self, model: PatchableModel) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["edge_id", "source", "destination", "token_pos", "score"])
        for i, u in enumerate(units_of(model, self.granularity)):
            if isinstance(u, Edge):
                w.writerow([model.edge_index[u], u.src.name, u.dst.name, "", repr(float(self.scores[u]))])
            else:
                w.writerow([i, u.name, "", "", repr(float(self.scores[u]))])
        return buf.getvalue()


@dataclass(frozen=True)
class CircuitSequence:
    """Circuits by ascending threshold; each contains every later one."""

    steps: tuple[tuple[float, Circuit], ...]
    algorithm: str = ""

    def __post_init__(self):
        ths = [t for t, _ in self.steps]
        if ths != sorted(ths):
            raise DiscoveryError("thresholds must ascend")
        for (t1, c1), (t2, c2) in zip(self.steps, self.steps[1:]):
            if not c2.members <= c1.members:
                extra = sorted(str(m) for m in c2.members - c1.members)
                raise DiscoveryError(f"circuit at threshold {t2} is not inside the one at {t1}: {extra}")

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    @property
    def circuits(self) -> list[Circuit]:
        return [c for _, c in self.steps]


def units_of(model: PatchableModel, granularity: str) -> list:
    if granularity == "edge":
        return list(model.edges)
    if granularity == "node":
        return [s for s in model.sources if s != INPUT]
    raise DiscoveryError(f"unknown unit granularity {granularity!r}")


def nodes_to_edges(model: PatchableModel, important) -> Circuit:
    """Edges whose source and destination node are both important."""
    keep = {INPUT, OUTPUT_IN} | {n.node if isinstance(n, NodeSite) else n for n in important}
    return Circuit.of_edges(e for e in model.edges if e.src in keep and e.dst.head_node in keep)


def _unit_edges(model: PatchableModel, granularity: str) -> list[list[int]]:
    """Edge indices patched when each unit is ablated."""
    if granularity == "edge":
        return [[i] for i in range(model.n_edges)]
    return [model.out_edges(s) for s in units_of(model, "node")]


def reverse_topological(model: PatchableModel, granularity: str = "edge") -> list:
    if granularity == "edge":
        return sorted(model.edges, key=lambda e: (-model.topo_index[e.dst], model.src_index[e.src]))
    return sorted(units_of(model, "node"), key=lambda s: -model.topo_index[s])


# ------------------------------------------------------------------ metrics


MetricArg = str | Callable


def _numpy_metric(metric: MetricArg, full: np.ndarray) -> Callable[[np.ndarray], float]:
    if callable(metric):
        return lambda out: float(metric(Tensor(out), full).data)
    return lambda out: float(divergence(metric, full, out).mean())


def _tensor_metric(metric: MetricArg, ref: np.ndarray) -> Callable[[Tensor], Tensor]:
    """Differentiable divergence of an output from ``ref`` (treated as the reference)."""
    if callable(metric):
        return lambda out: metric(out, ref)
    if metric == "kl":
        return lambda out: ad.kl_div(Tensor(ref), out)
    if metric == "mse":
        return lambda out: ad.mse(out, Tensor(ref))
    raise DiscoveryError(f"unknown metric {metric!r}")


def _donors(model, batch, spec: AblationSpec) -> DonorCache:
    if spec.direction != "ablate_clean":
        raise AblationError("discovery runs on clean prompts with donors ablating them")
    return build_donor_cache(model, spec.value, batch, spec.direction)


# ------------------------------------------------------------------ ACDC


def acdc(model: PatchableModel, batch: PromptPairBatch, metric: MetricArg, threshold: float,
         spec: AblationSpec, granularity: str = "edge", donors: DonorCache | None = None) -> Circuit:
    """Greedy pruning: drop a unit if ablating it moves the metric by less than ``threshold``.

    The comparison point is the current pruned model, so removals accumulate.
    Node granularity returns a node circuit.
    """
    donors = donors or _donors(model, batch, spec)
    full = model.run(batch.clean)[0].data
    score = _numpy_metric(metric, full)
    edge_spec = spec.replace(component="edge" if granularity == "edge" else "node", set="complement")

    def evaluate(kept) -> float:
        circuit = Circuit.of_edges(kept) if granularity == "edge" else Circuit.of_nodes(kept | {INPUT})
        return score(run_ablated(model, circuit, edge_spec, batch, donors))

    kept = set(units_of(model, granularity))
    baseline = evaluate(kept)
    for u in reverse_topological(model, granularity):
        trial = evaluate(kept - {u})
        if not math.isfinite(trial):
            raise DiscoveryError(f"non-finite metric while ablating {u}")
        if abs(trial - baseline) < threshold:
            kept.discard(u)
            baseline = trial
    if granularity == "edge":
        return Circuit.of_edges(kept)
    return Circuit.of_nodes(kept)


DEFAULT_ACDC_THRESHOLDS = (0.0,) + tuple(10.0 ** k for k in range(-12, 3)) + (math.inf,)


def acdc_sweep(model: PatchableModel, batch: PromptPairBatch, metric: MetricArg, spec: AblationSpec,
               thresholds: Sequence[float] = DEFAULT_ACDC_THRESHOLDS,
               granularity: str = "edge") -> CircuitSequence:
    """ACDC at every threshold; the result must nest (checked)."""
    donors = _donors(model, batch, spec)
    steps = []
    for t in sorted(thresholds):
        c = acdc(model, batch, metric, t, spec, granularity, donors)
        if granularity == "node":
            c = nodes_to_edges(model, c.members)
        steps.append((float(t), c))
    return CircuitSequence(tuple(steps), f"acdc-{granularity}")


# ------------------------------------------------------------------ subnetwork probing


def _masked_weights(model: PatchableModel, m: Tensor, granularity: str) -> dict[int, Tensor]:
    """Donor fraction ``1 - m_u`` for each edge, from a vector of unit masks."""
    n = m.shape[0]
    eye = np.eye(n)
    weights = {}
    for u, edges in enumerate(_unit_edges(model, granularity)):
        mu = ad.tsum(m * eye[u]).reshape((1, 1, 1))
        for e in edges:
            weights[e] = 1.0 - mu
    return weights


def sp_loss(model: PatchableModel, tokens: np.ndarray, donors: DonorCache, full: np.ndarray,
            metric: MetricArg, lam: float, granularity: str = "edge") -> Callable[[Tensor], Tensor]:
    """Loss as a function of the unit logits: divergence from the full model + ``lam`` · Σ mask."""
    vals = {s: donors[s] for s in model.sources}
    div = _tensor_metric(metric, full)

    def loss(theta: Tensor) -> Tensor:
        m = ad.sigmoid(theta)
        out, _, _ = model.run(tokens, edge_weights=_masked_weights(model, m, granularity), donors=vals,
                              embed_noise=donors.run_noise)
        return div(out) + ad.tsum(m) * lam

    return loss


def subnetwork_probing(model: PatchableModel, batch: PromptPairBatch, spec: AblationSpec,
                       lam: float = 0.01, steps: int = 1000, seed: int = 0, lr: float = 0.1,
                       metric: MetricArg = "kl", granularity: str = "edge", init: float = 3.0,
                       jitter: float = 0.0) -> ScoreMap:
    """Learn a sigmoid mask per unit by full-batch gradient descent.

    ``seed`` only matters when ``jitter > 0`` perturbs the initial logits.
    """
    donors = _donors(model, batch, spec)
    full = model.run(batch.clean)[0].data
    units = units_of(model, granularity)
    rng = np.random.default_rng(seed)
    theta = np.full(len(units), float(init)) + jitter * rng.standard_normal(len(units))
    loss_fn = sp_loss(model, batch.clean, donors, full, metric, lam, granularity)
    for step in range(steps):
        t = Tensor(theta, requires_grad=True)
        with Tape() as tape:
            loss = loss_fn(t)
        if not math.isfinite(loss.item()):
            raise DiscoveryError(f"subnetwork probing loss diverged at step {step}")
        ad.backward(tape, loss)
        theta = theta - lr * t.grad
    m = 1.0 / (1.0 + np.exp(-theta))
    return ScoreMap(dict(zip(units, (float(x) for x in m))), f"sp-{granularity}", granularity, batch.task)


# ------------------------------------------------------------------ HISP


def hisp_metric_reference(model: PatchableModel, batch: PromptPairBatch, donors: DonorCache) -> np.ndarray:
    """Output of the fully ablated model; HISP measures divergence from it."""
    w = {e: np.ones((1, 1, 1)) for e in range(model.n_edges)}
    out, _, _ = model.run(batch.clean, edge_weights=w, donors={s: donors[s] for s in model.sources},
                          embed_noise=donors.run_noise)
    return out.data


def edge_attributions(model: PatchableModel, batch: PromptPairBatch, donors: DonorCache,
                      metric_fn: Callable[[Tensor], Tensor]) -> np.ndarray:
    """Signed first-order change of ``metric_fn`` from patching each edge alone."""
    tokens = batch.clean
    B, T = tokens.shape
    leaves: dict[NodeId, Tensor] = {}

    def hook(d, x):
        leaf = Tensor(np.zeros((B, T, model.spec.d_model)), requires_grad=True)
        leaves[d] = leaf
        return x + leaf

    with Tape() as tape:
        out, outs, _ = model.run(tokens, embed_noise=donors.run_noise, keep_cache=True, dst_hook=hook)
        value = metric_fn(out)
    if not math.isfinite(value.item()):
        raise DiscoveryError("non-finite metric in attribution pass")
    ad.backward(tape, value)
    attr = np.zeros(model.n_edges)
    for i, e in enumerate(model.edges):
        g = leaves[e.dst].grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise DiscoveryError(f"non-finite gradient at {e.dst}")
        delta = np.broadcast_to(donors[e.src], (B, T, model.spec.d_model)) - outs[e.src].data
        attr[i] = float(np.sum(delta * g))
    return attr


def hisp(model: PatchableModel, batch: PromptPairBatch, spec: AblationSpec,
         metric: MetricArg = "mse", granularity: str = "edge",
         reference: np.ndarray | None = None) -> ScoreMap:
    """Score = |(donor - clean activation) · gradient of the metric|, summed over the batch.

    String metrics measure divergence from ``reference``, by default the fully
    ablated model's output: divergence from the clean model itself has zero
    gradient at the clean point. A callable metric receives the output Tensor
    and the reference.
    """
    donors = _donors(model, batch, spec)
    if reference is None:
        reference = hisp_metric_reference(model, batch, donors)
    attr = edge_attributions(model, batch, donors, _tensor_metric(metric, reference))
    units = units_of(model, granularity)
    if granularity == "edge":
        scores = {e: abs(float(a)) for e, a in zip(units, attr)}
    else:
        scores = {s: abs(float(sum(attr[i] for i in model.out_edges(s)))) for s in units}
    return ScoreMap(scores, f"hisp-{granularity}", granularity, batch.task)


# ------------------------------------------------------------------ sweeps


def scores_to_circuit_sequence(scores: ScoreMap, thresholds: Sequence[float] | None = None,
                               model: PatchableModel | None = None) -> CircuitSequence:
    """Edge circuits ``{u : score(u) >= t}`` for ascending thresholds.

    Default thresholds are the distinct scores plus one above the maximum, so the
    sequence runs from the full model to the empty circuit. Node scores need
    ``model`` to convert node sets into edge circuits.
    """
    vals = sorted(set(float(v) for v in scores.scores.values()))
    if thresholds is None:
        top = vals[-1] if vals else 0.0
        thresholds = vals + [top + max(1.0, abs(top))]
    steps = []
    for t in sorted(thresholds):
        chosen = [u for u, v in scores.scores.items() if v >= t]
        if scores.granularity == "edge":
            c = Circuit.of_edges(chosen)
        else:
            if model is None:
                raise DiscoveryError("node scores need the model to build edge circuits")
            c = nodes_to_edges(model, chosen)
        steps.append((float(t), c))
    return CircuitSequence(tuple(steps), scores.algorithm)

