"""Self-paced CNN training: a small patch classifier trained on scarce
labels, a bootstrap ensemble that scores an unlabeled pool, FDR-controlled
selection of virtual samples, and retraining on the mixture."""

from .bootstrap import (
    BootstrapConfig,
    PredictionMatrix,
    predict_pool,
    subsample,
    train_ensemble,
)
from .config import PipelineConfig, load_config
from .dataset import (
    LabeledPatch,
    SplitSpec,
    SyntheticSpec,
    UnlabeledPatch,
    generate_synthetic,
    load_patches,
    save_patches,
    split,
)
from .network import (
    Architecture,
    CnnModel,
    TrainConfig,
    TrainReport,
    Variant,
    build_model,
    forward_proba,
    load_checkpoint,
    make_architecture,
    save_checkpoint,
    train,
)
from .pipeline import (
    EvalReport,
    PipelineResult,
    benchmark_parallel,
    evaluate_model,
    run_baseline,
    run_pipeline,
    run_round,
)
from .selection import (
    FamilyStrategy,
    PatchVerdict,
    SelectionReport,
    TTestResult,
    bh_fdr,
    select_virtual_samples,
    student_t_cdf,
    welch_t_one_sided,
)

__version__ = "0.1.0"
