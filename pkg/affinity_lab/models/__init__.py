from .flow import FlowModel, sample_ode, train_flow
from .inverse_folding import InverseFoldModel, post_select, propose_mutations, train_if
from .predictors import SeqPredictor, SeqScorer, StructPredictor, StructScorer, grad_struct
