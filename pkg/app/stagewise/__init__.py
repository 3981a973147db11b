from app.stagewise.driver import FitResult, FitTrace, converged, fit_stagewise
from app.stagewise.info_criterion import (
    CMITensor,
    Triplet,
    cmi_sum,
    cmi_tensor,
    max_cmi_norm,
    max_triplet,
    sparsity_diagnostic,
)
from app.stagewise.mdpd import (
    MISSING,
    FrozenCoordinates,
    LabelMatrix,
    MixtureModel,
    Posterior,
    em_iterate,
    init_one_component,
    log_likelihood,
    m_step,
    posterior,
    sample,
)
from app.stagewise.settings import FitConfig
from app.stagewise.split_engine import duplicate_component, perturb_split

__all__ = [
    "CMITensor",
    "FitConfig",
    "FitResult",
    "FitTrace",
    "FrozenCoordinates",
    "LabelMatrix",
    "MISSING",
    "MixtureModel",
    "Posterior",
    "Triplet",
    "cmi_sum",
    "cmi_tensor",
    "converged",
    "duplicate_component",
    "em_iterate",
    "fit_stagewise",
    "init_one_component",
    "log_likelihood",
    "m_step",
    "max_cmi_norm",
    "max_triplet",
    "perturb_split",
    "posterior",
    "sample",
    "sparsity_diagnostic",
]
