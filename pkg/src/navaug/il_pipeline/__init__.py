from .examples import (
    Episode,
    Instruction,
    StepExample,
    StepLabels,
    emit_step_examples,
    make_instruction,
    mask_instruction,
    progress_class,
)
from .dataset import check_step_example, read_step_dataset, write_step_dataset
from .loops import (
    ExpertPolicy,
    RandomPolicy,
    StopPolicy,
    dagger_iteration,
    emit_dataset,
    evaluate_policy,
    perturb_start,
    rollout,
    expert_context,
)
from .policy import FeatureBatch, LinearPolicy, LossWeights, loss_and_grad

__all__ = [
    "Episode", "Instruction", "StepExample", "StepLabels", "emit_step_examples", "make_instruction",
    "mask_instruction", "progress_class", "ExpertPolicy", "RandomPolicy", "StopPolicy", "dagger_iteration",
    "emit_dataset", "evaluate_policy", "perturb_start", "rollout", "FeatureBatch", "LinearPolicy",
    "loss_and_grad", "check_step_example", "read_step_dataset", "write_step_dataset", "LossWeights",
    "expert_context",
]
