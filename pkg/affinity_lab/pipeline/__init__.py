from .design import (
    Artifacts,
    affinity_flow_run,
    design_antigen,
    load_artifacts,
    load_designs,
    save_designs,
    save_proposals,
)
from .experiments import VARIANTS, run_ablations, run_sweep, variant_config
from .metrics import compute_metrics, metric_imp, metric_nat, metric_sim, metrics_frame
