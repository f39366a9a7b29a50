"""Chain-of-Attack: targeted transfer attacks on vision-language models and
LLM-judged attack-success evaluation."""

from coa.core import (
    AttackConfig,
    ImageTensor,
    Perturbation,
    apply_perturbation,
    init_perturbation,
    project_linf,
)
from coa.errors import (
    BackendError,
    CapabilityError,
    CoAError,
    ConfigError,
    DegenerateFusionError,
    InputError,
    JudgeParseError,
    ShapeError,
)
from coa.fusion import ModalityAwareEmbedding, fuse_modalities
from coa.objective import TCMBreakdown, tcm_gradient, tcm_loss

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "BackendError",
    "CapabilityError",
    "CoAError",
    "ConfigError",
    "DegenerateFusionError",
    "ImageTensor",
    "InputError",
    "JudgeParseError",
    "ModalityAwareEmbedding",
    "Perturbation",
    "ShapeError",
    "TCMBreakdown",
    "apply_perturbation",
    "fuse_modalities",
    "init_perturbation",
    "project_linf",
    "tcm_gradient",
    "tcm_loss",
]
