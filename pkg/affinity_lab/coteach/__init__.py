from affinity_lab.coteach.pairs import (
    build_pairs,
    consensus_filter,
    load_pairs,
    predict_pair_label,
    predicted_margins,
    save_pairs,
)
from affinity_lab.coteach.training import (
    CoteachResult,
    RoundReport,
    SpearmanReport,
    coteach_round,
    finetune_unfiltered,
    pairwise_finetune,
    pairwise_loss,
    spearman_eval,
)
