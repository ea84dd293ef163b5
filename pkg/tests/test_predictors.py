import pytest
import torch

from affinity_lab.models.layers import knn_antigen
from affinity_lab.models.predictors import (
    SeqPredictor,
    SeqScorer,
    StructPredictor,
    StructScorer,
    grad_struct,
    predict_seq,
    predict_struct,
    score_sequences,
    supervised_train,
)
from affinity_lab.utils.config import TrainConfig
from affinity_lab.world.oracle import oracle_ensemble_sample


@pytest.fixture
def f_beta():
    torch.manual_seed(0)
    return StructPredictor(num_cdr=4, hidden_dim=16, embed_dim=4, num_neighbors=4)


@pytest.fixture
def structure(tiny_complex, rng):
    _, seq = tiny_complex
    return oracle_ensemble_sample(seq, 0.3, rng)


def test_grad_struct_matches_finite_differences(f_beta, tiny_complex, structure, rng):
    layout, seq = tiny_complex
    grad = grad_struct(f_beta, structure, seq, layout)
    assert grad.shape == structure.shape
    h = 1e-6
    rows = list(layout.cdr_global) + list(layout.antigen_global)
    for _ in range(20):
        i = rows[int(torch.randint(len(rows), (1,), generator=rng))]
        c = int(torch.randint(3, (1,), generator=rng))
        up, down = structure.clone(), structure.clone()
        up[i, c] += h
        down[i, c] -= h
        numeric = (predict_struct(f_beta, up, seq, layout) - predict_struct(f_beta, down, seq, layout)) / (2 * h)
        assert numeric == pytest.approx(float(grad[i, c]), rel=1e-4, abs=1e-8)


def test_grad_struct_support_is_cdr_and_neighbours(f_beta, tiny_complex, structure):
    layout, seq = tiny_complex
    grad = grad_struct(f_beta, structure, seq, layout)
    neighbors, _ = knn_antigen(structure.unsqueeze(0), layout.cdr_global, layout.antigen_global, 4)
    support = set(layout.cdr_global) | set(neighbors.flatten().tolist())
    for row in range(layout.global_length):
        if row not in support:
            assert torch.all(grad[row] == 0.0), row


def test_grad_struct_batches_independently(f_beta, tiny_complex, structure):
    layout, seq = tiny_complex
    batch = torch.stack([structure, structure + 0.1])
    grads = grad_struct(f_beta, batch, seq, layout)
    assert torch.allclose(grads[0], grad_struct(f_beta, structure, seq, layout), atol=1e-12)
    assert torch.allclose(grads[1], grad_struct(f_beta, structure + 0.1, seq, layout), atol=1e-12)


def test_length_mismatch_is_rejected(f_beta, tiny_complex, structure):
    layout, seq = tiny_complex
    with pytest.raises(ValueError):
        predict_struct(f_beta, structure[:-1], seq, layout)
    with pytest.raises(ValueError):
        StructPredictor(num_cdr=3)(structure, seq.encode(), layout)


def test_knn_ties_are_counted(tiny_complex):
    layout, _ = tiny_complex
    x = torch.zeros(layout.global_length, 3, dtype=torch.float64)
    _, ties = knn_antigen(x.unsqueeze(0), layout.cdr_global, layout.antigen_global, 4)
    assert ties > 0


def test_seq_predictor_scores(tiny_complex):
    layout, _ = tiny_complex
    torch.manual_seed(0)
    f_alpha = SeqPredictor(layout.cdr_positions, 16, 4)
    antibodies = [layout.antibody, layout.antibody.mutate({5: "W"})]
    scores = score_sequences(f_alpha, antibodies, layout.antigen)
    assert scores.shape == (2,)
    assert float(scores[0]) == pytest.approx(predict_seq(f_alpha, layout.antibody, layout.antigen))


def test_seq_predictor_parameter_gradients(tiny_complex, rng):
    layout, _ = tiny_complex
    torch.manual_seed(2)
    f_alpha = SeqPredictor(layout.cdr_positions, 8, 4)
    ab = layout.antibody.encode()[None]
    ag = layout.antigen.encode()[None]
    weight = f_alpha.net[2].weight
    f_alpha.zero_grad()
    f_alpha(ab, ag).sum().backward()
    analytic = weight.grad.clone()
    h = 1e-6
    for flat in torch.randperm(weight.numel(), generator=rng)[:20].tolist():
        index = divmod(flat, weight.shape[1])
        with torch.no_grad():
            weight[index] += h
            up = float(f_alpha(ab, ag))
            weight[index] -= 2 * h
            down = float(f_alpha(ab, ag))
            weight[index] += h
        assert (up - down) / (2 * h) == pytest.approx(float(analytic[index]), rel=1e-4, abs=1e-8)


def test_struct_scorer_uses_docked_structures(tiny_dataset, f_beta):
    scorer = StructScorer(f_beta, tiny_dataset)
    scores = scorer.predict([0, 1], [2, 3])
    layout = tiny_dataset.layout(0, tiny_dataset.registry.antibody(2))
    expected = predict_struct(f_beta, tiny_dataset.docked(0, 2), layout.complex_sequence(), layout)
    assert float(scores[0]) == pytest.approx(expected, abs=1e-10)


def test_supervised_training_fits_labels(tiny_dataset):
    torch.manual_seed(0)
    gen = torch.Generator()
    gen.manual_seed(0)
    scorer = SeqScorer(SeqPredictor(tiny_dataset.world.cdr_positions, 16, 4), tiny_dataset)
    labels = tiny_dataset.labels
    _, curve = supervised_train(
        scorer, labels, TrainConfig(epochs=60, batch_size=4, learning_rate=1e-2), gen
    )
    assert curve.final < curve.initial
    assert curve.stage == "seq_supervised"
    with pytest.raises(ValueError):
        supervised_train(scorer, [], TrainConfig(), gen)


def parameter_gradient_check(model, loss_fn, parameter, rng, count=20, h=1e-6):
    model.zero_grad()
    loss_fn().backward()
    analytic = parameter.grad.clone()
    flat = parameter.data.view(-1)
    for index in torch.randperm(flat.numel(), generator=rng)[:count].tolist():
        with torch.no_grad():
            flat[index] += h
            up = float(loss_fn())
            flat[index] -= 2 * h
            down = float(loss_fn())
            flat[index] += h
        numeric = (up - down) / (2 * h)
        assert numeric == pytest.approx(float(analytic.view(-1)[index]), rel=1e-4, abs=1e-8)


def test_struct_predictor_parameter_gradients(f_beta, tiny_complex, structure, rng):
    layout, seq = tiny_complex
    indices = seq.encode()

    def loss():
        return f_beta(structure, indices, layout)

    parameter_gradient_check(f_beta, loss, f_beta.net[0].weight, rng)
    parameter_gradient_check(f_beta, loss, f_beta.net[4].weight, rng, count=10)
    parameter_gradient_check(f_beta, loss, f_beta.embedding.weight, rng, count=10)


def test_translation_leaves_prediction_and_gradient_unchanged(f_beta, tiny_complex, structure):
    layout, seq = tiny_complex
    shift = torch.tensor([3.5, -2.0, 7.25], dtype=torch.float64)
    assert predict_struct(f_beta, structure + shift, seq, layout) == pytest.approx(
        predict_struct(f_beta, structure, seq, layout), abs=1e-10
    )
    assert torch.allclose(
        grad_struct(f_beta, structure + shift, seq, layout),
        grad_struct(f_beta, structure, seq, layout),
        atol=1e-10,
    )


def test_constant_network_has_zero_gradient(f_beta, tiny_complex, structure):
    layout, seq = tiny_complex
    with torch.no_grad():
        f_beta.net[4].weight.zero_()
        f_beta.net[4].bias.fill_(-1.5)
    assert predict_struct(f_beta, structure, seq, layout) == -1.5
    assert predict_struct(f_beta, structure * 2.0, seq, layout) == -1.5
    assert torch.all(grad_struct(f_beta, structure, seq, layout) == 0.0)


def test_single_label_is_interpolated(tiny_dataset):
    torch.manual_seed(1)
    gen = torch.Generator()
    gen.manual_seed(1)
    label = tiny_dataset.labels[0]
    scorer = SeqScorer(SeqPredictor(tiny_dataset.world.cdr_positions, 16, 4), tiny_dataset)
    supervised_train(scorer, [label], TrainConfig(epochs=2000, batch_size=1, learning_rate=1e-2), gen)
    prediction = float(scorer.predict([label.antigen_id], [label.antibody_id])[0])
    assert (prediction - label.delta_g) ** 2 < 1e-4


def test_zero_epochs_leave_parameters_bitwise_unchanged(tiny_dataset, f_beta):
    gen = torch.Generator()
    gen.manual_seed(0)
    scorer = StructScorer(f_beta, tiny_dataset)
    before = {k: v.clone() for k, v in f_beta.state_dict().items()}
    _, curve = supervised_train(scorer, tiny_dataset.labels, TrainConfig(epochs=0), gen)
    assert len(curve) == 0
    for name, tensor in f_beta.state_dict().items():
        assert torch.equal(tensor, before[name])
