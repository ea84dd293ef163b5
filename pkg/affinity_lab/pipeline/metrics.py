# The MIT License (MIT)
# Copyright © 2024 affinity_lab developers

# Permission is hereby granted, free of charge, to any person obtaining a copy of this software and associated
# documentation files (the “Software”), to deal in the Software without restriction, including without limitation
# the rights to use, copy, modify, merge, publish, distribute, sublicense, and/or sell copies of the Software,
# and to permit persons to whom the Software is furnished to do so, subject to the following conditions:

# The above copyright notice and this permission notice shall be included in all copies or substantial portions of
# the Software.

# THE SOFTWARE IS PROVIDED “AS IS”, WITHOUT WARRANTY OF ANY KIND, EXPRESS OR IMPLIED, INCLUDING BUT NOT LIMITED TO
# THE WARRANTIES OF MERCHANTABILITY, FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL
# THE AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER LIABILITY, WHETHER IN AN ACTION
# OF CONTRACT, TORT OR OTHERWISE, ARISING FROM, OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER
# DEALINGS IN THE SOFTWARE.

import math
from collections import defaultdict
from itertools import combinations
from typing import Dict, List, Optional, Sequence as TypingSequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from affinity_lab.protocol import AntigenMetrics, DesignRecord, MetricsReport
from affinity_lab.world.sequences import ALPHABET
from affinity_lab.world.tables import WorldTables, load_tables

TRANSITION_FLOOR = 1e-6


def metric_imp(designs: TypingSequence[DesignRecord]) -> float:
    """Fraction of designs whose oracle ΔG is strictly below their wildtype's."""
    if not designs:
        raise ValueError("IMP needs at least one design")
    return sum(d.oracle_dg < d.wildtype_dg for d in designs) / len(designs)


def group_by_antigen(designs: TypingSequence[DesignRecord]) -> Dict[int, List[DesignRecord]]:
    groups = defaultdict(list)
    for d in designs:
        groups[d.antigen_id].append(d)
    return dict(sorted(groups.items()))


def metric_sim(
    designs_by_antigen: Dict[int, TypingSequence[DesignRecord]],
    cdr_positions: TypingSequence[int],
) -> float:
    """
    Mean CDR identity over every pair of designs aimed at different antigens. Lower is better.
    """
    if len(designs_by_antigen) < 2:
        raise ValueError("Sim needs designs for at least two antigens")
    if not cdr_positions:
        raise ValueError("Sim needs at least one CDR position")
    total, pairs = 0.0, 0
    for a, b in combinations(sorted(designs_by_antigen), 2):
        for da in designs_by_antigen[a]:
            for db in designs_by_antigen[b]:
                same = sum(da.sequence[p] == db.sequence[p] for p in cdr_positions)
                total += same / len(cdr_positions)
                pairs += 1
    return total / pairs if pairs else 0.0


def inverse_perplexity(sequence: str, tables: WorldTables) -> Tuple[float, bool]:
    """
    exp((1/N) sum_i log P(residue_i | residue_{i-1})) under the natural-antibody Markov chain,
    and whether a zero-probability transition hit the floor. Only transitions are scored.
    """
    indices = [ALPHABET.index(c) for c in sequence]
    probs = [float(tables.markov_transition[a, b]) for a, b in zip(indices, indices[1:])]
    floored = any(p < TRANSITION_FLOOR for p in probs)
    log_p = sum(math.log(max(p, TRANSITION_FLOOR)) for p in probs)
    return math.exp(log_p / len(indices)), floored


def metric_nat(
    designs: TypingSequence[DesignRecord], tables: Optional[WorldTables] = None
) -> Tuple[float, bool]:
    """Mean inverse perplexity (higher is more natural) and the zero-probability flag."""
    if not designs:
        raise ValueError("Nat needs at least one design")
    tables = tables or load_tables()
    values, floored = [], False
    for d in designs:
        value, hit = inverse_perplexity(d.sequence, tables)
        values.append(value)
        floored = floored or hit
    if floored:
        logger.warning(f"Zero-probability transitions floored at {TRANSITION_FLOOR:g} in Nat")
    return float(np.mean(values)), floored


def compute_metrics(
    designs: TypingSequence[DesignRecord],
    cdr_positions: TypingSequence[int],
    tables: Optional[WorldTables] = None,
) -> MetricsReport:
    groups = group_by_antigen(designs)
    tables = tables or load_tables()
    per_antigen = {}
    for antigen_id, group in groups.items():
        nat, _ = metric_nat(group, tables)
        per_antigen[antigen_id] = AntigenMetrics(imp=metric_imp(group), nat=nat, num_designs=len(group))
    sim = metric_sim(groups, cdr_positions) if len(groups) >= 2 else None
    if sim is None:
        logger.warning("Sim is undefined for a single antigen")
    nat, floored = metric_nat(designs, tables)
    return MetricsReport(
        imp=metric_imp(designs), sim=sim, nat=nat, per_antigen=per_antigen, nat_floored=floored
    )


def metrics_frame(report: MetricsReport) -> pd.DataFrame:
    """One 'all' row followed by one row per antigen."""
    total = sum(m.num_designs for m in report.per_antigen.values())
    rows = [
        {"antigen_id": "all", "imp": report.imp, "sim": report.sim, "nat": report.nat, "num_designs": total}
    ]
    for antigen_id, m in report.per_antigen.items():
        rows.append(
            {"antigen_id": antigen_id, "imp": m.imp, "sim": None, "nat": m.nat, "num_designs": m.num_designs}
        )
    return pd.DataFrame(rows, columns=["antigen_id", "imp", "sim", "nat", "num_designs"])
