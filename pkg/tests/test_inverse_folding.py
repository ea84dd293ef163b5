import pytest
import torch

from affinity_lab.data.dataset import sample_complex_corpus
from affinity_lab.models.inverse_folding import (
    InverseFoldModel,
    MutationProposal,
    cdr_distribution,
    if_accuracy,
    position_weights,
    post_select,
    propose_mutations,
    rank_proposals,
    train_if,
)
from affinity_lab.models.predictors import SeqPredictor, score_sequences
from affinity_lab.utils.config import TrainConfig
from affinity_lab.world.oracle import oracle_mean_structure


@pytest.fixture
def if_model():
    torch.manual_seed(0)
    return InverseFoldModel(16, 4, 4)


def test_untrained_model_is_uniform(if_model, tiny_complex):
    layout, seq = tiny_complex
    probs = cdr_distribution(if_model, oracle_mean_structure(seq), seq, layout)
    assert probs.shape == (4, 20)
    assert torch.allclose(probs, torch.full_like(probs, 0.05))


def test_cdr_residue_types_are_not_read(if_model, tiny_complex):
    layout, seq = tiny_complex
    x = oracle_mean_structure(seq)
    for p in if_model.parameters():
        torch.nn.init.normal_(p, std=0.1)
    mutant = layout.antibody.mutate({p: "W" for p in layout.cdr_positions})
    mutant_seq = layout.with_antibody(mutant).complex_sequence()
    assert torch.equal(if_model(x, seq.encode(), layout), if_model(x, mutant_seq.encode(), layout))


@pytest.mark.parametrize("weighting", ["entropy", "uniform"])
def test_proposals_mutate_cdr_only(if_model, tiny_complex, rng, weighting):
    layout, seq = tiny_complex
    x = oracle_mean_structure(seq)
    proposals = propose_mutations(if_model, x, seq, layout, [1, 2, 3], 5, rng, weighting)
    assert proposals
    assert len({p.sequence for p in proposals}) == len(proposals)
    for p in proposals:
        changed = [i for i, (a, b) in enumerate(zip(layout.antibody.residues, p.sequence.residues)) if a != b]
        assert changed == list(p.positions)
        assert len(changed) == p.arity
        assert set(changed) <= set(layout.cdr_positions)


def test_arity_larger_than_cdr_is_rejected(if_model, tiny_complex, rng):
    layout, seq = tiny_complex
    with pytest.raises(ValueError):
        propose_mutations(if_model, oracle_mean_structure(seq), seq, layout, [5], 2, rng)


def test_position_weights():
    probs = torch.tensor([[1.0] + [0.0] * 19, [0.05] * 20], dtype=torch.float64)
    weights = position_weights(probs, "entropy")
    assert float(weights[0]) == pytest.approx(1e-12)
    assert float(weights[1]) == pytest.approx(float(torch.log(torch.tensor(20.0))))
    assert torch.equal(position_weights(probs, "uniform"), torch.ones(2, dtype=torch.float64))
    with pytest.raises(ValueError):
        position_weights(probs, "greedy")


def test_post_select_orders_by_predicted_energy(tiny_complex):
    layout, _ = tiny_complex
    torch.manual_seed(0)
    f_alpha = SeqPredictor(layout.cdr_positions, 16, 4)
    parent = layout.antibody
    proposals = [
        MutationProposal(parent.mutate({p: code}), parent, 1, (p,))
        for p, code in [(5, "W"), (6, "Y"), (7, "A"), (8, "K"), (5, "P")]
    ]
    ranked = rank_proposals(f_alpha, proposals, layout.antigen)
    scores = [p.seq_score for p in ranked]
    assert scores == sorted(scores)
    expected = score_sequences(f_alpha, [p.sequence for p in proposals], layout.antigen)
    assert min(scores) == pytest.approx(float(expected.min()))
    assert post_select(f_alpha, proposals, layout.antigen, 2) == ranked[:2]
    with pytest.raises(ValueError):
        post_select(f_alpha, proposals, layout.antigen, 0)
    with pytest.raises(ValueError):
        rank_proposals(f_alpha, [], layout.antigen)


def test_proposal_description(tiny_complex):
    layout, _ = tiny_complex
    parent = layout.antibody
    proposal = MutationProposal(parent.mutate({5: "W", 7: "Y"}), parent, 2, (5, 7))
    assert proposal.describe() == "G5W;I7Y"
    assert len(proposal.parent_hash) == 16


def test_training_beats_chance_on_unseen_complexes(tiny_dataset, rng):
    corpus = sample_complex_corpus(tiny_dataset, 64, 0.1, rng, tiny_dataset.training_antigens)
    heldout = sample_complex_corpus(tiny_dataset, 32, 0.1, rng, tiny_dataset.heldout_antigens)
    torch.manual_seed(0)
    model, curve = train_if(
        InverseFoldModel(32, 4, 4), corpus, TrainConfig(epochs=40, batch_size=16, learning_rate=5e-3), rng
    )
    assert curve.final < curve.initial
    assert if_accuracy(model, heldout) > 0.05
