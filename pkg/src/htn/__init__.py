"""Hidden tree Markov networks: bottom-up HTMM modules compared pairwise by
fixed contrastive units and read out by a trainable softmax layer."""

from ._backend import available as available_backends, current as current_backend, set_backend, use_backend
from .htmm import (
    HtmmParameters,
    NodePosteriors,
    ProbTables,
    em_step,
    fit_em,
    loglik_gradients,
    materialize,
    upward_downward,
    upward_log_likelihood,
)
from .network import ForwardTrace, Gradients, HtnModel, backward, forward, loss, pair_index, predict
from .optim import OptimizerState, sgd_update
from .trees import Dataset, LabeledTree, LabelVocab, generate_synthetic, load_dataset, parse_tree, stratified_folds

__version__ = "0.1.0"
