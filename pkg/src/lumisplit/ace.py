"""Adaptive condition estimation: keep the light conditions whose masks cover enough of the frame."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import MaskField
from .shade import LightSet


@dataclass
class AceReport:
    iteration: int
    areas: list[float]
    epsilon: float
    kept: list[int]
    dropped: list[int]
    applied: bool = field(default=False, compare=False)

    @property
    def n_kept(self) -> int:
        return len(self.kept)

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "areas": self.areas, "epsilon": self.epsilon,
                "kept": self.kept, "dropped": self.dropped}

    @classmethod
    def from_dict(cls, d: dict) -> "AceReport":
        return cls(int(d["iteration"]), list(d["areas"]), float(d["epsilon"]), list(d["kept"]),
                   list(d["dropped"]), applied=True)


def mask_areas(m_n: np.ndarray) -> np.ndarray:
    """Fraction of all pixels (all frames) carried by each mask; m_n is (n, ...)."""
    m = np.asarray(m_n, dtype=np.float64)
    return m.reshape(m.shape[0], -1).mean(axis=1)


def estimate(m_n: np.ndarray, epsilon: float, iteration: int = 0) -> AceReport:
    """Select conditions whose mean mask value over the frame exceeds ``epsilon``.

    For sequences pass masks stacked as (n, k, H, W); areas average over frames.
    When nothing passes, the largest mask is kept.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    areas = mask_areas(m_n)
    kept = [int(i) for i in np.flatnonzero(areas > epsilon)]
    if not kept:
        kept = [int(np.argmax(areas))]
    dropped = [i for i in range(len(areas)) if i not in kept]
    return AceReport(iteration, [float(a) for a in areas], float(epsilon), kept, dropped)


def estimate_from_areas(areas, epsilon: float, iteration: int = 0) -> AceReport:
    return estimate(np.asarray(areas, dtype=np.float64)[:, None], epsilon, iteration)


def apply(lights: LightSet, f: MaskField, report: AceReport) -> LightSet:
    """Mark dropped conditions dead and restrict f's softmax to the survivors."""
    if report.applied:
        raise RuntimeError("this ACE report has already been applied")
    if not lights.alive.all() or not f.active.all():
        raise RuntimeError("ACE selection already applied to these lights/field")
    alive = np.zeros(lights.n, dtype=bool)
    alive[report.kept] = True
    lights.alive = alive
    f.active = alive.copy()
    report.applied = True
    return lights
