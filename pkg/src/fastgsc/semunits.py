"""Semantic units, task requests, and transmission bookkeeping.

A semantic unit is one independently extractable and transmittable condition
element: a category tag plus a fixed offset vector in world space. The set of
all units describing one source is a prompt; the receiver asks for a subset
of the world's unit table via a ``TaskRequest``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DIM = 16
DEFAULT_K_MAX = 8
DEFAULT_ONEHOT_WIDTH = 5

_NORM_TOL = 1e-9
_DEGENERATE_TOL = 1e-12


class Category(Enum):
    NOUN = 0
    VERB = 1
    ADJECTIVE = 2
    STYLE = 3
    OTHERS = 4


# Per-category offset magnitudes of the default world. Large-magnitude
# categories are the ones whose late arrival is hardest for the sampler to
# absorb, which is what gives the transmission-order learner a real signal.
DEFAULT_MAGNITUDES: Mapping[Category, float] = {
    Category.NOUN: 3.0,
    Category.VERB: 2.0,
    Category.ADJECTIVE: 1.2,
    Category.STYLE: 1.2,
    Category.OTHERS: 0.4,
}

# Category layout of the default world's unit table (one entry per slot).
DEFAULT_CATEGORY_LAYOUT: tuple[Category, ...] = (
    Category.NOUN,
    Category.NOUN,
    Category.VERB,
    Category.VERB,
    Category.ADJECTIVE,
    Category.STYLE,
    Category.OTHERS,
    Category.OTHERS,
)


class EmptyPrompt(ValueError):
    """An operation that needs at least one semantic unit got none."""


class DegenerateSum(ValueError):
    """Unit offsets cancel; no direction can be normalized."""


@dataclass(frozen=True, eq=False)
class SemanticUnit:
    """One transmittable condition element.

    ``magnitude_class`` must equal the Euclidean norm of ``offset``; it is
    carried separately because it is the per-category knob of the world
    design, not a derived convenience.
    """

    id: int
    category: Category
    offset: np.ndarray
    magnitude_class: float

    def __post_init__(self) -> None:
        arr = np.asarray(self.offset, dtype=float)
        if arr.ndim != 1:
            raise ValueError("offset must be a 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("offset entries must be finite")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "offset", arr)
        norm = float(np.linalg.norm(arr))
        if abs(norm - self.magnitude_class) > _NORM_TOL:
            raise ValueError(
                f"magnitude_class {self.magnitude_class} does not match "
                f"offset norm {norm}"
            )

    @property
    def dim(self) -> int:
        return self.offset.shape[0]


def make_unit(uid: int, category: Category, offset: np.ndarray) -> SemanticUnit:
    """Build a unit, deriving magnitude_class from the offset norm."""
    offset = np.asarray(offset, dtype=float)
    return SemanticUnit(uid, category, offset, float(np.linalg.norm(offset)))


def generate_world_units(
    seed: int,
    dim: int = DEFAULT_DIM,
    layout: Sequence[Category] = DEFAULT_CATEGORY_LAYOUT,
    magnitudes: Mapping[Category, float] = DEFAULT_MAGNITUDES,
) -> tuple[SemanticUnit, ...]:
    """Deterministically generate a unit table from a 64-bit seed.

    Offsets are mutually orthogonal (orthonormal directions scaled by the
    category magnitude), so per-unit incorporation can be read off the
    generated sample by projection.
    """
    k = len(layout)
    if k > dim:
        raise ValueError(f"cannot fit {k} orthogonal offsets in dimension {dim}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57_6F_72_6C]))
    gauss = rng.normal(size=(dim, k))
    q, r = np.linalg.qr(gauss)
    # fix QR sign ambiguity so generation is reproducible across BLAS builds
    q = q * np.sign(np.diag(r))
    units = []
    for uid, cat in enumerate(layout):
        units.append(make_unit(uid, cat, magnitudes[cat] * q[:, uid]))
    return tuple(units)


@dataclass(frozen=True)
class TaskRequest:
    """The receiver's requested unit set, padded to ``k_max`` slots.

    Slot k of the request maps to ``units[k]``; slots beyond ``len(units)``
    are empty and encode to all-zero one-hot rows.
    """

    units: tuple[SemanticUnit, ...]
    k_max: int = DEFAULT_K_MAX
    n_e: int = DEFAULT_ONEHOT_WIDTH

    def __post_init__(self) -> None:
        if not (1 <= len(self.units) <= self.k_max):
            raise ValueError(
                f"request must hold between 1 and {self.k_max} units, "
                f"got {len(self.units)}"
            )
        ids = [u.id for u in self.units]
        if len(set(ids)) != len(ids):
            raise ValueError("unit ids within one request must be unique")
        if any(u.category.value >= self.n_e for u in self.units):
            raise ValueError("category index exceeds one-hot width")
        object.__setattr__(self, "units", tuple(self.units))

    @property
    def n_units(self) -> int:
        return len(self.units)

    def unit_at(self, slot: int) -> SemanticUnit | None:
        return self.units[slot] if slot < len(self.units) else None


def encode_request(req: TaskRequest) -> np.ndarray:
    """One-hot encode a request into a (k_max, n_e) matrix.

    Row k carries the one-hot category of the unit in slot k; empty slots
    are all-zero rows.
    """
    out = np.zeros((req.k_max, req.n_e))
    for slot, unit in enumerate(req.units):
        out[slot, unit.category.value] = 1.0
    return out


def prompt_embedding(units: Iterable[SemanticUnit]) -> np.ndarray:
    """Unit-norm embedding of a prompt: the normalized sum of unit offsets."""
    units = list(units)
    if not units:
        raise EmptyPrompt("prompt embedding needs at least one unit")
    total = np.sum([u.offset for u in units], axis=0)
    norm = float(np.linalg.norm(total))
    if norm < _DEGENERATE_TOL:
        raise DegenerateSum("unit offsets cancel; prompt direction undefined")
    return total / norm


def condition_sum(units: Iterable[SemanticUnit], dim: int | None = None) -> np.ndarray:
    """Un-normalized sum of unit offsets (the denoiser's condition vector).

    An empty collection yields the zero vector (the null condition of the
    unconditional branch); ``dim`` is required in that case.
    """
    units = list(units)
    if not units:
        if dim is None:
            raise ValueError("dim is required for an empty unit collection")
        return np.zeros(dim)
    return np.sum([u.offset for u in units], axis=0)


class TransmissionState:
    """Which request slots are still pending, and when units arrived.

    ``pending[k] == 0`` iff slot k was transmitted or is an empty slot.
    Pending bits only ever flip 1 -> 0 within an episode.
    """

    def __init__(self, request: TaskRequest):
        self.request = request
        self.pending = np.zeros(request.k_max, dtype=int)
        self.pending[: request.n_units] = 1
        self.sent_at_step: list[int | None] = [None] * request.k_max

    def mark_sent(self, slot: int, step: int) -> None:
        if self.pending[slot] == 0:
            raise ValueError(f"slot {slot} is empty or already transmitted")
        self.pending[slot] = 0
        self.sent_at_step[slot] = step

    def pending_slots(self) -> list[int]:
        return [k for k in range(self.request.k_max) if self.pending[k] == 1]


def world_to_json(units: Sequence[SemanticUnit], n_e: int = DEFAULT_ONEHOT_WIDTH) -> str:
    """Serialize a unit table to the world JSON schema."""
    dim = units[0].dim if units else DEFAULT_DIM
    doc = {
        "D": dim,
        "K_max": len(units),
        "N_e": n_e,
        "units": [
            {"id": u.id, "category": u.category.name, "offset": u.offset.tolist()}
            for u in units
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def world_from_json(text: str) -> tuple[SemanticUnit, ...]:
    doc = json.loads(text)
    units = tuple(
        make_unit(entry["id"], Category[entry["category"]], np.array(entry["offset"]))
        for entry in doc["units"]
    )
    if len(units) != doc["K_max"]:
        raise ValueError("unit count does not match K_max")
    for u in units:
        if u.dim != doc["D"]:
            raise ValueError("offset dimension does not match D")
    return units


def save_world(path: str | Path, units: Sequence[SemanticUnit],
               n_e: int = DEFAULT_ONEHOT_WIDTH) -> None:
    Path(path).write_text(world_to_json(units, n_e), encoding="utf-8")


def load_world(path: str | Path) -> tuple[SemanticUnit, ...]:
    return world_from_json(Path(path).read_text(encoding="utf-8"))
