import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from config import settings


class AttackKind(str, Enum):
    """Targeted white-box attacks."""
    PROPOSED = "proposed"     # per-bit margins on the logits, min over bits
    CW_ECOC = "cw-ecoc"       # C&W margin on the ECOC correlations
    CW_ONEHOT = "cw-onehot"   # C&W margin on softmax logits, tanh box reparameterization
    LOTS = "lots"             # logit matching against a target-class mean


class AttackConfig(BaseModel):
    """
    Attack parameters. The quadruple (lambda_start, binary_search_steps, max_iterations,
    confidence) is written `1e-3,10,1000,0`, the same order used to label result tables.
    """
    model_config = ConfigDict(frozen=True)

    kind: AttackKind = AttackKind.PROPOSED
    lambda_start: float = Field(default=1e-3, gt=0)
    binary_search_steps: int = Field(default=10, ge=1)
    step_size: float = Field(default_factory=lambda: settings.default_step_size, gt=0)
    max_iterations: int = Field(default=1000, ge=1)
    confidence: float = 0.0
    seed: int = 0
    lots_pool_size: int = Field(default_factory=lambda: settings.lots_pool_size, ge=1)

    @field_validator("lambda_start", "step_size", "confidence")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v

    @classmethod
    def from_quadruple(cls, params: str, **kwargs) -> "AttackConfig":
        parts = [p.strip() for p in params.split(",")]
        if len(parts) != 4:
            raise ValueError(f"Expected 'lambda,n,m,c', got '{params}'")
        lam, n, m, c = parts
        return cls(lambda_start=float(lam), binary_search_steps=int(n),
                   max_iterations=int(m), confidence=float(c), **kwargs)

    def quadruple(self) -> str:
        return f"{self.lambda_start:g},{self.binary_search_steps},{self.max_iterations},{self.confidence:g}"


class SearchRound(BaseModel):
    """One binary-search round: the λ it ran with and the bounds after it."""
    index: int
    lambda_value: float
    found: bool
    upper: float
    lower: float
    best_norm: float


@dataclass
class AttackResult:
    """Outcome of attacking one image."""
    kind: AttackKind
    config: AttackConfig
    true_class: int
    target_class: int
    target_codeword: np.ndarray
    delta: np.ndarray
    success: bool
    l2_norm: float               # in [0, 1] pixel units
    psnr_db: float               # +inf for a zero perturbation
    iterations: int
    final_lambda: float
    prob_true_before: float
    prob_true_after: float
    prob_target_before: float
    prob_target_after: float
    margin_after: float = float("nan")
    image_id: int = -1
    rounds: List[SearchRound] = field(default_factory=list)
    lots_target: Optional[np.ndarray] = None
    error: Optional[str] = None
