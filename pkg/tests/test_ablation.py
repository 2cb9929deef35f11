import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from circuitfaith.ablation import (
    AblationError,
    AblationSpec,
    AblationValueSpec,
    branch_ablate_oracle,
    build_donor_cache,
    complement,
    node_intervention,
    patch_mask,
    run_ablated,
    run_naive,
    run_patched,
)
from circuitfaith.data import LengthMismatch, PromptPairBatch
from circuitfaith.graph import INPUT, Circuit, Edge, NodeId, NodeSite, forward

from conftest import random_model

RESAMPLE = AblationSpec()
ZERO = AblationSpec(value=AblationValueSpec("zero"))


def random_batch(rng, B=3, T=4, vocab=4):
    return PromptPairBatch("rand", rng.integers(0, vocab, (B, T)), rng.integers(0, vocab, (B, T)))


def random_edge_circuit(rng, model, p=0.5):
    return Circuit.of_edges([e for e in model.edges if rng.random() < p])


@pytest.mark.parametrize("seed", range(100))
def test_fast_path_matches_naive(seed):
    rng = np.random.default_rng(seed)
    model = random_model(seed, n_layers=int(rng.integers(1, 3)), n_heads=int(rng.integers(1, 3)),
                         biases=bool(seed % 2))
    batch = random_batch(rng)
    kind = ["zero", "resample", "mean", "gaussian_noise"][seed % 4]
    donors = build_donor_cache(model, AblationValueSpec(kind, seed=seed), batch,
                               "restore_clean" if seed % 5 == 0 else "ablate_clean")
    mask = rng.random((model.n_edges, batch.seq_len)) < 0.5
    fast = run_patched(model, donors.run_tokens, mask, donors)
    slow = run_naive(model, donors.run_tokens, mask, donors)
    np.testing.assert_allclose(fast, slow, atol=1e-9, rtol=0)


@pytest.mark.parametrize("seed", range(30))
@pytest.mark.parametrize("set_", ["circuit", "complement"])
def test_branch_oracle_matches_edge_patching_with_resampling(seed, set_):
    rng = np.random.default_rng(seed)
    model = random_model(seed, n_heads=int(rng.integers(1, 3)), biases=True)
    batch = random_batch(rng)
    circuit = random_edge_circuit(rng, model)
    edge = run_ablated(model, circuit, RESAMPLE.replace(set=set_), batch)
    branch = run_ablated(model, circuit, RESAMPLE.replace(component="branch", set=set_), batch)
    np.testing.assert_allclose(edge, branch, atol=1e-9, rtol=0)


@pytest.mark.parametrize("seed", range(30))
def test_branch_oracle_matches_edge_patching_with_zeros(seed):
    # Zeros are cross-expressible when every node maps a zero input to zero.
    rng = np.random.default_rng(seed)
    model = random_model(seed, biases=False)
    batch = random_batch(rng)
    circuit = random_edge_circuit(rng, model)
    edge = run_ablated(model, circuit, ZERO, batch)
    branch = run_ablated(model, circuit, ZERO.replace(component="branch"), batch)
    np.testing.assert_allclose(edge, branch, atol=1e-9, rtol=0)


def test_branch_differs_from_edge_when_biases_break_zero():
    rng = np.random.default_rng(0)
    model = random_model(0, biases=True)
    batch = random_batch(rng)
    circuit = Circuit.of_edges(model.edges[:5])
    edge = run_ablated(model, circuit, ZERO, batch)
    branch = run_ablated(model, circuit, ZERO.replace(component="branch"), batch)
    assert np.abs(edge - branch).max() > 1e-6


def test_empty_patch_set_is_bit_identical():
    rng = np.random.default_rng(3)
    model = random_model(3, biases=True)
    batch = random_batch(rng)
    for kind in ("zero", "resample", "mean"):
        donors = build_donor_cache(model, AblationValueSpec(kind), batch)
        mask = np.zeros((model.n_edges, batch.seq_len), dtype=bool)
        assert np.array_equal(run_patched(model, batch.clean, mask, donors), forward(model, batch.clean).output)
    full = Circuit.of_edges(model.edges)
    assert np.array_equal(run_ablated(model, full, ZERO, batch), forward(model, batch.clean).output)


@pytest.mark.parametrize("seed", range(10))
def test_self_donor_is_identity(seed):
    rng = np.random.default_rng(seed)
    model = random_model(seed, biases=True)
    clean = rng.integers(0, 4, (3, 5))
    batch = PromptPairBatch("self", clean, clean)
    circuit = random_edge_circuit(rng, model, 0.3)
    for spec in (RESAMPLE, RESAMPLE.replace(component="node"), RESAMPLE.replace(set="circuit")):
        np.testing.assert_allclose(run_ablated(model, circuit, spec, batch),
                                   forward(model, clean).output, atol=1e-9, rtol=0)


@pytest.mark.parametrize("seed", range(10))
def test_complement_duality(seed):
    rng = np.random.default_rng(seed)
    model = random_model(seed)
    batch = random_batch(rng)
    c = random_edge_circuit(rng, model)
    assert complement(complement(c, model), model) == c
    a = run_ablated(model, c, RESAMPLE, batch)
    b = run_ablated(model, complement(c, model), RESAMPLE.replace(set="circuit"), batch)
    assert np.array_equal(a, b)


def test_complement_of_positioned_circuit():
    model = random_model(0)
    c = Circuit.of_edges([model.edges[0].at(1), model.edges[3]])
    comp = complement(c, model, seq_len=3)
    assert len(comp) == 3 * model.n_edges - 1 - 3
    assert complement(comp, model, seq_len=3).members == {model.edges[0].at(1)} | {
        model.edges[3].at(p) for p in range(3)}


def test_specific_positions_mask():
    model = random_model(0)
    c = Circuit.of_edges([model.edges[2].at(1), model.edges[4]])
    spec = RESAMPLE.replace(token_positions="specific")
    mask = patch_mask(model, c, spec, 3)
    assert mask[2].tolist() == [True, False, True]
    assert mask[4].tolist() == [False, False, False]
    assert mask[0].all()
    assert not patch_mask(model, c, RESAMPLE, 3)[2].any()


@pytest.mark.parametrize("seed", range(20))
def test_node_ablation_matches_residual_intervention(seed):
    rng = np.random.default_rng(seed)
    model = random_model(seed, n_heads=2, biases=True)
    batch = random_batch(rng)
    kept = [NodeSite(s) for s in model.sources if rng.random() < 0.5]
    circuit = Circuit.of_nodes(kept)
    spec = RESAMPLE.replace(component="node")
    donors = build_donor_cache(model, spec.value, batch)
    ablated = [s for s in model.sources if NodeSite(s) not in circuit.members]
    np.testing.assert_allclose(run_ablated(model, circuit, spec, batch, donors),
                               node_intervention(model, batch.clean, ablated, donors), atol=1e-9, rtol=0)


def test_constant_source_ablation_is_a_no_op(xprop, xprop_batch):
    # A0.0 has all-zero weights, so its output is constant over every donor distribution.
    model = xprop.model
    keep = Circuit.of_nodes([NodeSite(s) for s in model.sources if s.name != "A0.0"])
    full = forward(model, xprop_batch.clean).output
    for value in ("resample", "mean"):
        spec = AblationSpec(component="node", value=AblationValueSpec(value))
        np.testing.assert_allclose(run_ablated(model, keep, spec, xprop_batch), full, atol=1e-9, rtol=0)


@pytest.mark.parametrize("seed", range(5))
def test_mean_over_identical_prompts_is_a_no_op(seed):
    rng = np.random.default_rng(seed)
    model = random_model(seed, biases=True)
    prompt = rng.integers(0, 4, (1, 5))
    batch = PromptPairBatch("c", prompt, rng.integers(0, 4, (1, 5)))
    donors = build_donor_cache(model, AblationValueSpec("mean"), batch, mean_dataset=np.repeat(prompt, 7, 0))
    out = run_ablated(model, Circuit.of_edges([]), AblationSpec(value=AblationValueSpec("mean")), batch, donors)
    np.testing.assert_allclose(out, forward(model, prompt).output, atol=1e-9, rtol=0)


def _positional_edges(model):
    return [Edge(INPUT, NodeId("q", 1, 0)), Edge(INPUT, NodeId("k", 1, 0))]


def test_resample_of_positional_edges_is_harmless_but_zero_is_not(xprop, xprop_batch):
    model = xprop.model
    full = forward(model, xprop_batch.clean).output
    cut = Circuit.of_edges(_positional_edges(model))
    resampled = run_ablated(model, cut, RESAMPLE.replace(set="circuit"), xprop_batch)
    np.testing.assert_allclose(resampled, full, atol=1e-9, rtol=0)
    zeroed = run_ablated(model, Circuit.of_edges([_positional_edges(model)[1]]),
                         ZERO.replace(set="circuit"), xprop_batch)
    per_prompt = ((zeroed - full) ** 2).mean(axis=(1, 2))
    assert per_prompt.max() > 0.1


def test_mean_of_one_and_three_is_two():
    model = random_model(0, n_layers=0, d_model=1, vocab_size=4, d_out=1)
    model.spec.weights["W_E"][:] = [[0.0], [1.0], [2.0], [3.0]]
    model.spec.weights["W_pos"][:] = 0.0
    batch = PromptPairBatch("m", [[0]], [[0]])
    donors = build_donor_cache(model, AblationValueSpec("mean"), batch, mean_dataset=np.array([[1], [3]]))
    assert donors[INPUT].ravel().tolist() == [2.0]


def test_mean_depends_on_dataset_size(xprop):
    model = xprop.model
    rng = np.random.default_rng(0)
    data = rng.integers(0, 4, (100, 5))
    batch = PromptPairBatch("m", data[:2], data[:2])
    small = build_donor_cache(model, AblationValueSpec("mean"), batch, mean_dataset=data[:10])
    large = build_donor_cache(model, AblationValueSpec("mean"), batch, mean_dataset=data)
    m0 = NodeId("mlp", 0)
    assert np.abs(small[m0] - large[m0]).max() > 1e-3


def test_pooled_mean_is_constant_over_positions():
    rng = np.random.default_rng(0)
    model = random_model(0)
    batch = random_batch(rng, B=6, T=5)
    d = build_donor_cache(model, AblationValueSpec("mean", per_position=False), batch)
    assert d[INPUT].shape == (1, 1, model.spec.d_model)


def test_gaussian_noise_is_seeded():
    rng = np.random.default_rng(0)
    model = random_model(0)
    batch = random_batch(rng)
    a = build_donor_cache(model, AblationValueSpec("gaussian_noise", seed=4), batch)
    b = build_donor_cache(model, AblationValueSpec("gaussian_noise", seed=4), batch)
    c = build_donor_cache(model, AblationValueSpec("gaussian_noise", seed=5), batch)
    assert np.array_equal(a[INPUT], b[INPUT]) and not np.array_equal(a[INPUT], c[INPUT])


def test_restore_clean_swaps_roles():
    rng = np.random.default_rng(1)
    model = random_model(1)
    batch = random_batch(rng)
    d = build_donor_cache(model, AblationValueSpec(), batch, "restore_clean")
    assert np.array_equal(d.run_tokens, batch.corrupt)
    np.testing.assert_allclose(d[INPUT], model.embed(batch.clean))
    # Restoring everything gives back the clean run.
    out = run_ablated(model, Circuit.of_edges(model.edges), RESAMPLE.replace(direction="restore_clean",
                                                                            set="circuit"), batch)
    np.testing.assert_allclose(out, forward(model, batch.clean).output, atol=1e-9, rtol=0)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["edge", "node", "branch"]), st.sampled_from(["zero", "resample", "mean"]),
       st.sampled_from(["circuit", "complement"]))
def test_spec_dict_round_trip(component, value, set_):
    spec = AblationSpec(component, AblationValueSpec(value), set=set_)
    assert AblationSpec.from_dict(spec.to_dict()) == spec
    assert spec.fingerprint() == AblationSpec.from_dict(spec.to_dict()).fingerprint()


def test_spec_validation():
    with pytest.raises(AblationError):
        AblationValueSpec("bogus")
    with pytest.raises(AblationError):
        AblationValueSpec("gaussian_noise", sigma=0)
    with pytest.raises(AblationError):
        AblationSpec(direction="sideways")
    with pytest.raises(AblationError):
        AblationSpec(component="branch", token_positions="specific")


def test_errors():
    model = random_model(0)
    rng = np.random.default_rng(0)
    batch = random_batch(rng)
    donors = build_donor_cache(model, AblationValueSpec(), batch)
    with pytest.raises(AblationError, match="mask shape"):
        run_patched(model, batch.clean, np.zeros((3, 4), bool), donors)
    with pytest.raises(AblationError):
        patch_mask(model, Circuit.of_nodes([NodeSite(INPUT)]), RESAMPLE, 4)
    with pytest.raises(LengthMismatch):
        PromptPairBatch.from_sequences("t", [[0, 1]], [[0]])
    with pytest.raises(AblationError):
        build_donor_cache(model, AblationValueSpec("mean"), batch, mean_dataset=np.zeros((0, 4), int))
