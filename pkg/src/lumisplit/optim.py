"""Adam over named variable groups."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class VarGroup:
    name: str
    values: np.ndarray
    lr: float
    frozen: bool = False
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(self.values)
        if self.v is None:
            self.v = np.zeros_like(self.values)

    def reset(self, lr: float | None = None):
        """Fresh moments, e.g. when a stage changes the group's learning rate."""
        self.m = np.zeros_like(self.values)
        self.v = np.zeros_like(self.values)
        self.step_count = 0
        if lr is not None:
            self.lr = lr


def adam_step(group: VarGroup, grad, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> VarGroup:
    """One bias-corrected Adam update, in place. Frozen groups are left untouched."""
    if group.frozen:
        return group
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != group.values.shape:
        raise ValueError(f"group {group.name}: gradient shape {grad.shape} != {group.values.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient in group {group.name}")
    group.step_count += 1
    t = group.step_count
    group.m *= beta1
    group.m += (1.0 - beta1) * grad
    group.v *= beta2
    group.v += (1.0 - beta2) * grad * grad
    m_hat = group.m / (1.0 - beta1 ** t)
    v_hat = group.v / (1.0 - beta2 ** t)
    group.values -= group.lr * m_hat / (np.sqrt(v_hat) + eps)
    return group


def clamp_constraints(groups: dict[str, VarGroup]) -> dict[str, VarGroup]:
    """Keep texels in range and the pose rotation inside the principal ball."""
    tex = groups.get("T")
    if tex is not None:
        np.clip(tex.values[..., :4], 0.0, 1.0, out=tex.values[..., :4])
        np.clip(tex.values[..., 4], 0.05, 1.0, out=tex.values[..., 4])
    pose = groups.get("pose")
    if pose is not None:
        rot = pose.values.reshape(-1, 6)[:, :3]
        for r in rot:
            theta = np.linalg.norm(r)
            if theta > np.pi:
                r -= (2.0 * np.pi / theta) * r  # same rotation, shorter axis-angle
    return groups
