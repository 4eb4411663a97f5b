from .base import BlockUpdate, NumericError, StateCorruptionError, Workload
from .lda import (
    Corpus,
    LDAUpdate,
    LDAWorkload,
    TopicState,
    apply_lda_update,
    dump_corpus,
    gen_corpus,
    lda_gibbs_iteration,
    load_corpus,
)
from .lr import (
    LabeledDataset,
    LabeledExample,
    LRWorkload,
    dump_labeled,
    gen_lr,
    load_labeled,
    lr_sgd_iteration,
)
from .mf import (
    FactorModel,
    MFWorkload,
    RatingsMatrix,
    apply_mf_update,
    dump_ratings,
    gen_mf,
    load_ratings,
    mf_sgd_iteration,
)
from .probe import ProbeWorkload
