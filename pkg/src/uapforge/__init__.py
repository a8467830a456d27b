"""uapforge: universal adversarial perturbations for multichannel
time-series classifiers, with a full crafting and evaluation harness."""

from ._kernels import BACKEND, HAVE_NATIVE
from .attacks import (
    CHANNEL_INVARIANT,
    FULL,
    MINI,
    AttackConfig,
    AttackResult,
    Placement,
    Uap,
    apply_uap,
    attack_loss,
    constraint_penalty,
    craft_mini_uap,
    deepfool,
    df_uap,
    load_uap,
    project,
    save_uap,
    substitute_transfer,
    tlm_uap,
    uap_to_csv,
)
from .data import (
    SplitPlan,
    SynthConfig,
    TrialSet,
    gen_synthetic,
    loso_split,
    normalize,
    read_trials,
    within_subject_blocks,
    within_subject_split,
    write_trials,
)
from .errors import (
    DegenerateGradientError,
    FormatError,
    NumericalError,
    ShapeError,
    UapForgeError,
)
from .metrics import (
    AttackPlan,
    EvalReport,
    ExperimentPlan,
    PlacementPolicy,
    VictimPlan,
    asr,
    evaluate,
    noise_baseline,
    rca_bca,
    run_experiment,
    spr_db,
    target_rate,
    write_report_csv,
    write_report_json,
)
from .models import (
    AdamState,
    FitReport,
    ModelParams,
    ModelSpec,
    TrainConfig,
    adam_step,
    class_weights,
    fit_victim,
    forward,
    grad_input,
    grad_params,
    init_params,
    load_model,
    predict_label,
    save_model,
    weighted_cross_entropy,
)

__version__ = "0.1.0"
