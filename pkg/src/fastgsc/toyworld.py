"""Synthetic conditional-generation world and its analytic score oracle.

The world defines what a correct inference is: given a prompt (a subset of
the unit table), the target distribution is an isotropic Gaussian centred on
the sum of the prompt's offsets. Scores are computed analytically, so every
downstream mechanism can be evaluated without a learned embedding model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .semunits import (
    DEFAULT_ONEHOT_WIDTH,
    SemanticUnit,
    generate_world_units,
    prompt_embedding,
)

_ZERO_TOL = 1e-12


class ZeroSample(ValueError):
    """The generated sample has (numerically) zero norm; no direction."""


@dataclass(frozen=True)
class WorldSpec:
    """Unit table plus the spread of clean samples around the prompt mean."""

    units: tuple[SemanticUnit, ...]
    base_noise_sigma: float = 0.25
    seed: int = 0
    n_e: int = DEFAULT_ONEHOT_WIDTH

    def __post_init__(self) -> None:
        if self.base_noise_sigma <= 0:
            raise ValueError("base_noise_sigma must be > 0")
        if not self.units:
            raise ValueError("world needs at least one unit")

    @classmethod
    def default(cls, seed: int = 0, base_noise_sigma: float = 0.25) -> "WorldSpec":
        return cls(units=generate_world_units(seed), base_noise_sigma=base_noise_sigma,
                   seed=seed)

    @property
    def dim(self) -> int:
        return self.units[0].dim

    @property
    def k_max(self) -> int:
        return len(self.units)

    def units_by_id(self) -> dict[int, SemanticUnit]:
        return {u.id: u for u in self.units}

    def mean_for(self, prompt: tuple[SemanticUnit, ...]) -> np.ndarray:
        return np.sum([u.offset for u in prompt], axis=0)


def sample_training_pair(
    spec: WorldSpec, rng: np.random.Generator
) -> tuple[np.ndarray, tuple[SemanticUnit, ...]]:
    """Draw (clean sample, prompt) with the prompt a uniform non-empty subset
    of the unit table."""
    k = spec.k_max
    subset_index = int(rng.integers(1, 2**k))
    prompt = tuple(u for i, u in enumerate(spec.units) if (subset_index >> i) & 1)
    mean = spec.mean_for(prompt)
    x0 = mean + spec.base_noise_sigma * rng.normal(size=spec.dim)
    return x0, prompt


def clip_analogue_score(sample: np.ndarray, requested: tuple[SemanticUnit, ...] | list[SemanticUnit]) -> float:
    """Clamped cosine between the sample direction and the prompt embedding.

    Returns max(cos(h, v), 0) with h the unit-norm prompt embedding and v the
    normalized sample; 1 iff the sample is a positive multiple of h.
    """
    sample = np.asarray(sample, dtype=float)
    norm = float(np.linalg.norm(sample))
    if norm < _ZERO_TOL:
        raise ZeroSample("sample norm below tolerance")
    h = prompt_embedding(requested)
    return float(np.clip(np.dot(h, sample / norm), 0.0, 1.0))


def incorporation_ratio(sample: np.ndarray, unit: SemanticUnit) -> float:
    """Normalized projection of a sample onto one unit's offset.

    1.0 means the unit's offset is fully present; with orthogonal unit
    offsets this is unaffected by the other units' contributions.
    """
    denom = float(np.dot(unit.offset, unit.offset))
    if denom < _ZERO_TOL:
        raise ValueError("unit offset is zero")
    return float(np.dot(np.asarray(sample, dtype=float), unit.offset) / denom)
