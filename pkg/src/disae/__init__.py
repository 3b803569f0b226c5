"""Disentangled autoencoders for tabular data with multiple tasks and
interacting domains, plus domain-shift metrics and an experiment harness."""

from .data import (
    Dataset,
    DomainSpec,
    NormStats,
    SplitPlan,
    TaskSpec,
    discretize_domain,
    load_dataset,
    make_folds,
    normalize,
    save_dataset,
)
from .metrics import (
    JSD,
    W2,
    Dissimilarity,
    ScoreReport,
    VariationReport,
    data_variation,
    feature_variation,
    jsd,
    model_variation,
    reliability_assessment,
    selection_score,
    wasserstein2_1d,
)
from .model import (
    DisAEConfig,
    DisAEModel,
    LossBreakdown,
    compute_loss,
    load_checkpoint,
    make_vanilla_ae,
    save_checkpoint,
    train,
    train_fold,
)
from .synth import (
    AffineInstance,
    GeneratorConfig,
    ShiftPlan,
    apply_shift_plan,
    generate_standard,
    make_classification,
    make_multilabel,
)

__version__ = "0.1.0"
