from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Mapping

from app import config

TRIPLET_SCORES = ("per_component", "weighted")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class FitConfig:
    """
    Everything a fit needs besides the data.

    Defaults come from app.config (and therefore from the environment / .env).
    """

    k_target: int = 2
    max_iters: int = config.MAX_ITERS
    tau_cmi: float = config.TAU_CMI
    tau_ll: float = config.TAU_LL
    seed: int = 0
    smoothing: float = config.SMOOTHING

    # split engine
    hessian_step: float = 1e-4
    split_step: float = 0.05
    simplex_margin: float = 1e-6
    eig_tol: float = 1e-10
    max_halvings: int = 20

    triplet_score: str = "per_component"
    split_when_in_s: bool = True

    # chance level of the max CMI and the informative-worker test
    null_level: float = config.NULL_LEVEL

    # L0 sparsity penalty, reporting only
    lam: float = 0.0
    tau_l0: float = 1e-6

    def __post_init__(self) -> None:
        if self.k_target < 1:
            raise ValueError(f"k_target must be >= 1, got {self.k_target}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        for name in ("tau_cmi", "tau_ll", "hessian_step", "split_step", "simplex_margin"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.null_level < 1.0:
            raise ValueError(f"null_level must be in [0, 1), got {self.null_level}")
        if self.smoothing < 0:
            raise ValueError("smoothing must be non-negative")
        if self.triplet_score not in TRIPLET_SCORES:
            raise ValueError(
                f"triplet_score must be one of {TRIPLET_SCORES}, got '{self.triplet_score}'"
            )

    # ---------------------------------------------------------
    # Conversions
    # ---------------------------------------------------------
    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "FitConfig":
        """
        Build a config from CLI flags, a key-value config file or a JSON body.

        String values are coerced to the field's type; keys that are not
        FitConfig fields are rejected so typos do not pass silently.
        """
        known = {f.name: f for f in fields(cls)}
        kwargs: Dict[str, Any] = {}
        for key, raw in values.items():
            name = key.strip().lower().replace("-", "_")
            if name not in known:
                raise ValueError(f"Unknown fit option '{key}'")
            if raw is None:
                continue
            kwargs[name] = coerce_value(raw, type(getattr(cls, name)))
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def coerce_value(raw: Any, kind: type) -> Any:
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ValueError(f"Not a boolean: '{raw}'")
    if kind is int:
        return int(float(raw)) if isinstance(raw, str) and "e" in raw.lower() else int(raw)
    if kind is float:
        return float(raw)
    return str(raw)
