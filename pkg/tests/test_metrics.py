import math

import pytest
import torch

from affinity_lab.pipeline.metrics import (
    TRANSITION_FLOOR,
    compute_metrics,
    group_by_antigen,
    inverse_perplexity,
    metric_imp,
    metric_nat,
    metric_sim,
    metrics_frame,
)
from affinity_lab.protocol import DesignRecord
from affinity_lab.world.sequences import ALPHABET
from affinity_lab.world.tables import load_tables


def design(antigen_id, sequence, oracle_dg, wildtype_dg=-2.0, wildtype=None, seed=0, rank=0):
    return DesignRecord(
        antigen_id=antigen_id,
        seed=seed,
        rank=rank,
        sequence=sequence,
        wildtype=wildtype or sequence,
        oracle_dg=oracle_dg,
        wildtype_dg=wildtype_dg,
    )


@pytest.fixture
def deterministic_tables():
    """Shipped initial distribution; every residue is followed by itself."""
    return load_tables().replace(markov_transition=torch.eye(20, dtype=torch.float64))


def test_imp_counts_strict_improvements():
    designs = [design(0, "AAAA", -3.0), design(0, "AAAC", -1.0)]
    assert metric_imp(designs) == 0.5
    assert metric_imp([design(0, "AAAA", -2.0)]) == 0.0
    with pytest.raises(ValueError):
        metric_imp([])


def test_sim_identical_and_disjoint():
    cdr = [0, 1, 2]
    same = {0: [design(0, "ACDE", -1.0)], 1: [design(1, "ACDE", -1.0)]}
    assert metric_sim(same, cdr) == 1.0
    disjoint = {0: [design(0, "AAAA", -1.0)], 1: [design(1, "CCCA", -1.0)]}
    assert metric_sim(disjoint, cdr) == 0.0
    with pytest.raises(ValueError):
        metric_sim({0: same[0]}, cdr)


def test_sim_matches_brute_force(rng):
    cdr = [1, 2, 4]
    designs = []
    for antigen_id in range(3):
        for seed in range(2):
            picks = torch.randint(0, 3, (6,), generator=rng).tolist()
            designs.append(design(antigen_id, "".join("ACD"[p] for p in picks), -1.0, seed=seed))
    expected, count = 0.0, 0
    for a in designs:
        for b in designs:
            if a.antigen_id < b.antigen_id:
                expected += sum(a.sequence[p] == b.sequence[p] for p in cdr) / len(cdr)
                count += 1
    assert metric_sim(group_by_antigen(designs), cdr) == pytest.approx(expected / count)


def test_nat_of_deterministic_chain_is_one(deterministic_tables):
    value, floored = inverse_perplexity("AAAAAA", deterministic_tables)
    assert value == pytest.approx(1.0)
    assert not floored


def test_nat_scores_transitions_only():
    tables = load_tables()
    sequence = "QVQLVESGGG"
    indices = [ALPHABET.index(c) for c in sequence]
    log_p = sum(math.log(float(tables.markov_transition[a, b])) for a, b in zip(indices, indices[1:]))
    value, _ = inverse_perplexity(sequence, tables)
    assert value == pytest.approx(math.exp(log_p / len(sequence)), rel=1e-12)
    assert inverse_perplexity("W", tables) == (1.0, False)


def test_nat_floors_impossible_transitions(deterministic_tables):
    value, floored = inverse_perplexity("AC", deterministic_tables)
    assert floored
    assert value == pytest.approx(math.sqrt(TRANSITION_FLOOR))


def test_nat_is_within_unit_interval():
    nat, _ = metric_nat([design(0, "ACDEFGHIKL", -1.0), design(0, "GGGGSGGGGS", -1.0)])
    assert 0.0 < nat <= 1.0


def test_compute_metrics_report_and_frame(deterministic_tables):
    designs = [
        design(0, "AAAA", -3.0),
        design(0, "AAAA", -1.0, rank=1),
        design(1, "AAAA", -2.5),
    ]
    report = compute_metrics(designs, [0, 1], deterministic_tables)
    assert report.imp == pytest.approx(2 / 3)
    assert report.sim == 1.0
    assert report.nat == pytest.approx(1.0)
    assert report.per_antigen[0].imp == 0.5
    assert report.per_antigen[1].num_designs == 1

    frame = metrics_frame(report)
    assert list(frame["antigen_id"]) == ["all", 0, 1]
    assert frame.loc[0, "num_designs"] == 3


def test_single_antigen_has_no_sim(deterministic_tables):
    report = compute_metrics([design(3, "AAAA", -3.0)], [0], deterministic_tables)
    assert report.sim is None
