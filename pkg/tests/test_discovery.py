import math

import numpy as np
import pytest

from circuitfaith import autodiff as ad
from circuitfaith.ablation import AblationError, AblationSpec, AblationValueSpec, build_donor_cache, run_ablated
from circuitfaith.autodiff import Tensor, check_gradients
from circuitfaith.data import PromptPairBatch
from circuitfaith.discovery import (
    DEFAULT_ACDC_THRESHOLDS,
    CircuitSequence,
    DiscoveryError,
    ScoreMap,
    acdc,
    acdc_sweep,
    hisp,
    hisp_metric_reference,
    nodes_to_edges,
    scores_to_circuit_sequence,
    sp_loss,
    subnetwork_probing,
)
from circuitfaith.graph import INPUT, OUTPUT_IN, Circuit, NodeId, forward, random_spec, PatchableModel
from circuitfaith.metrics import divergence

from conftest import random_model

RESAMPLE = AblationSpec()
SMALL = slice(0, 20)


def small(batch, n=20):
    return batch.subset(np.arange(n))


def test_acdc_extreme_thresholds(xprop, xprop_batch):
    b = small(xprop_batch)
    assert acdc(xprop.model, b, "mse", 0.0, RESAMPLE).members == set(xprop.model.edges)
    assert acdc(xprop.model, b, "mse", math.inf, RESAMPLE).members == set()


def test_acdc_sweep_nests_and_is_deterministic(reverse, reverse_batch):
    b = small(reverse_batch)
    s1 = acdc_sweep(reverse.model, b, "kl", RESAMPLE)
    s2 = acdc_sweep(reverse.model, b, "kl", RESAMPLE)
    assert [c.members for c in s1.circuits] == [c.members for c in s2.circuits]
    sizes = [len(c) for c in s1.circuits]
    assert sizes == sorted(sizes, reverse=True)
    assert len(s1) == len(DEFAULT_ACDC_THRESHOLDS)


def test_acdc_recovers_resample_truth(reverse, reverse_batch):
    found = acdc(reverse.model, reverse_batch, "kl", 1e-6, RESAMPLE)
    assert found == reverse.resample_ablation_circuit


def test_acdc_node_variant(xprop, xprop_batch):
    c = acdc(xprop.model, small(xprop_batch), "mse", 1e-9, RESAMPLE, granularity="node")
    assert c.granularity == "node"
    assert {n.node.name for n in c.members} == {"M0", "A1.0"}


def test_discovery_rejects_restore_clean(xprop, xprop_batch):
    with pytest.raises(AblationError):
        acdc(xprop.model, small(xprop_batch), "mse", 1.0, RESAMPLE.replace(direction="restore_clean"))


def test_circuit_sequence_must_nest():
    m = random_model(0)
    a, b = Circuit.of_edges(m.edges[:2]), Circuit.of_edges(m.edges[1:3])
    with pytest.raises(DiscoveryError, match="not inside"):
        CircuitSequence(((0.0, a), (1.0, b)))
    with pytest.raises(DiscoveryError):
        CircuitSequence(((1.0, a), (0.0, a)))


def _masked_kl(model, batch, scores):
    """KL of the model with SP masks applied, measured directly through the loss at lambda 0."""
    donors = build_donor_cache(model, RESAMPLE.value, batch)
    full = forward(model, batch.clean).output
    m = np.array([scores.scores[e] for e in model.edges])
    theta = np.log(m) - np.log1p(-m)
    return float(sp_loss(model, batch.clean, donors, full, "kl", 0.0)(Tensor(theta)).data)


def test_sp_without_penalty_keeps_the_model(reverse, reverse_batch):
    b = small(reverse_batch)
    s = subnetwork_probing(reverse.model, b, RESAMPLE, lam=0.0, steps=50)
    assert _masked_kl(reverse.model, b, s) < 1e-3
    assert min(s.scores.values()) > 0.9


def test_sp_with_huge_penalty_drops_everything(reverse, reverse_batch):
    s = subnetwork_probing(reverse.model, small(reverse_batch), RESAMPLE, lam=10.0, steps=100)
    assert max(s.scores.values()) < 0.5


def test_sp_is_reproducible(reverse, reverse_batch):
    b = small(reverse_batch, 10)
    a = subnetwork_probing(reverse.model, b, RESAMPLE, steps=20, seed=3, jitter=0.1)
    c = subnetwork_probing(reverse.model, b, RESAMPLE, steps=20, seed=3, jitter=0.1)
    d = subnetwork_probing(reverse.model, b, RESAMPLE, steps=20, seed=4, jitter=0.1)
    assert a.scores == c.scores and a.scores != d.scores


def test_sp_node_granularity(xprop, xprop_batch):
    s = subnetwork_probing(xprop.model, small(xprop_batch), RESAMPLE, steps=10, metric="mse",
                           granularity="node")
    assert s.covers(xprop.model) and INPUT not in s.scores


def test_hisp_scores_edges_with_no_donor_delta_zero(xprop, xprop_batch):
    # A0.0 writes zeros on every prompt, so its donor equals its clean value.
    s = hisp(xprop.model, small(xprop_batch), RESAMPLE)
    a0 = [e for e in xprop.model.edges if e.src.name == "A0.0"]
    assert a0 and all(s.scores[e] == 0.0 for e in a0)


def _linear_model(seed):
    spec = random_spec(np.random.default_rng(seed), d_mlp=0, n_heads=2, biases=False)
    for k in spec.weights:
        if k.endswith("W_Q") or k.endswith("W_K"):
            spec.weights[k] = np.zeros_like(spec.weights[k])
    return PatchableModel(spec)


@pytest.mark.parametrize("seed", range(10))
def test_hisp_is_exact_on_a_linear_model(seed):
    rng = np.random.default_rng(seed)
    model = _linear_model(seed)
    batch = PromptPairBatch("lin", rng.integers(0, 4, (3, 4)), rng.integers(0, 4, (3, 4)))
    c = rng.normal(size=(3, 4, 3))
    metric = lambda out, ref: ad.tsum(out * Tensor(c))
    scores = hisp(model, batch, RESAMPLE, metric=metric)
    donors = build_donor_cache(model, RESAMPLE.value, batch)
    base = float((forward(model, batch.clean).output * c).sum())
    for e in model.edges:
        out = run_ablated(model, Circuit.of_edges([e]), RESAMPLE.replace(set="circuit"), batch, donors)
        assert scores.scores[e] == pytest.approx(abs(float((out * c).sum()) - base), abs=1e-9)


def test_hisp_reference_is_corrupt_run_under_resampling(xprop, xprop_batch):
    b = small(xprop_batch)
    donors = build_donor_cache(xprop.model, RESAMPLE.value, b)
    np.testing.assert_allclose(hisp_metric_reference(xprop.model, b, donors),
                               forward(xprop.model, b.corrupt).output, atol=1e-9)


def test_hisp_node_scores(xprop, xprop_batch):
    s = hisp(xprop.model, small(xprop_batch), RESAMPLE, granularity="node")
    assert set(s.scores) == {n for n in xprop.model.sources if n != INPUT}


@pytest.mark.parametrize("seed", range(100))
def test_sp_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, biases=True)
    spec.mlp_act = "gelu"
    model = PatchableModel(spec)
    batch = PromptPairBatch("r", rng.integers(0, 4, (2, 3)), rng.integers(0, 4, (2, 3)))
    donors = build_donor_cache(model, RESAMPLE.value, batch)
    full = forward(model, batch.clean).output
    loss = sp_loss(model, batch.clean, donors, full, "kl", 0.01)
    res = check_gradients(loss, rng.normal(0, 1.5, model.n_edges))
    assert res.finite and res.max_rel_error < 1e-4


@pytest.mark.parametrize("seed", range(100))
def test_hisp_metric_gradient(seed):
    # The attribution gradient: d metric / d destination input, checked per destination.
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, biases=True)
    spec.mlp_act = "gelu"
    model = PatchableModel(spec)
    tokens = rng.integers(0, 4, (2, 3))
    ref = rng.normal(size=(2, 3, 3))
    dst = model.destinations[seed % len(model.destinations)]

    def f(x):
        hook = lambda d, inp: inp + x if d == dst else inp
        out = model.run(tokens, dst_hook=hook)[0]
        return ad.mse(out, Tensor(ref))

    res = check_gradients(f, rng.normal(0, 0.1, (2, 3, model.spec.d_model)))
    assert res.finite and res.max_rel_error < 1e-4


def test_sequence_from_distinct_scores():
    m = random_model(0)
    s = ScoreMap({e: float(i) for i, e in enumerate(m.edges)}, "t")
    seq = scores_to_circuit_sequence(s)
    assert len(seq) == 24
    assert len(seq.circuits[0]) == 23 and len(seq.circuits[-1]) == 0


def test_sequence_from_constant_scores():
    m = random_model(0)
    seq = scores_to_circuit_sequence(ScoreMap({e: 0.5 for e in m.edges}, "t"))
    assert [len(c) for c in seq.circuits] == [23, 0]


def test_node_scores_keep_input_and_output():
    m = random_model(0, n_layers=1)
    a, mlp = NodeId("attn", 0, 0), NodeId("mlp", 0)
    seq = scores_to_circuit_sequence(ScoreMap({a: 1.0, mlp: 0.0}, "t", "node"), model=m)
    names = [{e.name for e in c} for c in seq.circuits]
    assert names[1] == {"Input->A0.0.Q", "Input->A0.0.K", "Input->A0.0.V", "Input->OutputIn",
                        "A0.0->OutputIn"}
    assert names[-1] == {"Input->OutputIn"}
    assert nodes_to_edges(m, []).members == {e for e in m.edges if e.src == INPUT and e.dst == OUTPUT_IN}
    with pytest.raises(DiscoveryError):
        scores_to_circuit_sequence(ScoreMap({a: 1.0}, "t", "node"))


def test_score_csv_layout(xprop):
    s = ScoreMap({e: 0.25 for e in xprop.model.edges}, "t")
    lines = s.to_csv(xprop.model).splitlines()
    assert lines[0] == "edge_id,source,destination,token_pos,score"
    assert lines[1] == "0,Input,A0.0.Q,,0.25"
    assert len(lines) == 24


def test_node_conversion_pulls_in_edges_outside_the_truth(xprop):
    # M0 and A1.0 both matter, but only M0 -> A1.0.V belongs to the resample truth.
    m = xprop.model
    scores = ScoreMap({s: 1.0 if s.name in ("M0", "A1.0") else 0.0 for s in m.sources if s != INPUT},
                      "t", "node")
    circuit = scores_to_circuit_sequence(scores, model=m).circuits[1]
    spurious = {e.name for e in circuit.members - xprop.resample_ablation_circuit.members}
    assert {"M0->A1.0.Q", "M0->A1.0.K"} <= spurious
