"""Scale-invariant learning-to-rank: a wide log-Kronecker path plus a deep path."""

from .data import (
    CsvSchema,
    Dataset,
    Item,
    PerturbationSpec,
    Query,
    SyntheticConfig,
    fit_standardizer,
    gen_synthetic,
    load_csv,
    load_letor,
    perturb,
    planted_scorer,
    save_letor,
    split,
)
from .losses import LabeledList, listmle_loss, listnet_loss
from .metrics import RankPermutation, mean_ndcg, ndcg, rank
from .scorer import (
    FeaturePartition,
    SirScorer,
    Standardizer,
    backward,
    f_d,
    f_s,
    f_w,
    init_scorer,
    load_scorer,
    save_scorer,
    score_item,
    score_query,
)
from .training import TrainConfig, TrainReport, adam_step, grad_audit, train

__version__ = "0.1.0"
