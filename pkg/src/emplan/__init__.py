"""Planning over discrete action sequences by iterative energy minimization.

A bidirectional masked sequence model trained on gridworld demonstrations
defines a trajectory energy (the negative pseudo-likelihood of a plan); a
Gibbs sampler refines PAD-initialized plan templates against that energy,
optionally composed with test-time constraint energies or with other models.
"""

__version__ = "0.1.0"

from .gridworld import (  # noqa: F401
    Action,
    Direction,
    EnvSpec,
    GridEnv,
    Outcome,
    Pose,
    StepResult,
    UnsolvableLayout,
    build_env,
    load_env_spec,
    step,
)
from .oracle import (  # noqa: F401
    Dataset,
    Demo,
    NoPath,
    corrupt,
    generate_dataset,
    load_dataset,
    optimal_plan,
    save_dataset,
)
from .codec import (  # noqa: F401
    MASK,
    PAD,
    ContextOverflow,
    MaskPattern,
    TokenSeq,
    apply_mask,
    make_plan_template,
    training_batch,
)
from .model import (  # noqa: F401
    CheckpointError,
    GradMismatch,
    MaskedSeqModel,
    NonFiniteLoss,
    TabularModel,
    TrainConfig,
    fit_tabular,
    grad_check,
    load_checkpoint,
    marginals,
    mlm_loss,
    save_checkpoint,
    train,
)
from .energy import (  # noqa: F401
    CompositeEnergy,
    ConstantEnergy,
    ConstraintEnergy,
    IncompletePlan,
    ModelPLL,
    compose,
    constraint_energy,
    landscape,
    pll_energy,
)
from .planner import (  # noqa: F401
    EpisodeResult,
    PlanConfig,
    PlanTrace,
    cem_plan,
    gibbs_plan,
    random_shooting_plan,
    run_episode,
)
from .harness import (  # noqa: F401
    CheckpointMissing,
    ExperimentSpec,
    MetricsReport,
    bc_reference,
    evaluate,
    load_experiment,
)
