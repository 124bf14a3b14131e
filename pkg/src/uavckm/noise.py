"""Positioning error model parameterized by circular error probability (CEP).

CEP is the radius containing half of all position measurements; per-axis
Gaussian noise with sigma = CEP / 0.6745 reproduces that median, since
0.6745 is the 75% normal quantile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CEP_TO_SIGMA = 1.0 / 0.6745


@dataclass(frozen=True)
class CepModel:
    cep_m: float = 0.0

    def __post_init__(self):
        if self.cep_m < 0:
            raise ValueError("CEP must be >= 0")

    @property
    def sigma(self) -> float:
        return self.cep_m * CEP_TO_SIGMA


def perturb(pos, model: CepModel, rng: np.random.Generator) -> np.ndarray:
    """Position plus i.i.d. per-axis Gaussian noise. No bounds clamping here."""
    p = np.asarray(pos, dtype=float)
    return p + model.sigma * rng.standard_normal(3)
