"""Coordinate MLPs over (x, y, t): light-condition assignment and face probability.

Parameters live in one flat vector so the optimizer can treat a field as a
single variable group; per-layer weights are views into it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def pixel_coords(height: int, width: int, t: float) -> np.ndarray:
    """(H, W, 3) grid of (x, y, t); x, y are pixel centres mapped into [-1, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    xs = -1.0 + 2.0 * (np.arange(width) + 0.5) / width
    ys = -1.0 + 2.0 * (np.arange(height) + 0.5) / height
    x, y = np.meshgrid(xs, ys)
    return np.stack([x, y, np.full_like(x, t)], axis=-1)


def frame_times(k: int) -> np.ndarray:
    """t = i / k for frame i of a k-frame sequence; a single image gets t = 0."""
    return np.arange(k) / k


def encode(coords: np.ndarray, n_freq: int) -> np.ndarray:
    parts = [coords]
    for level in range(n_freq):
        f = (2.0 ** level) * np.pi
        parts.append(np.sin(f * coords))
        parts.append(np.cos(f * coords))
    return np.concatenate(parts, axis=-1)


@dataclass
class MaskField:
    shapes: list  # [(fan_in, fan_out), ...]
    theta: np.ndarray
    n_freq: int
    head: str  # "softmax" | "sigmoid"
    active: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.head not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown head {self.head!r}")
        self.shapes = [tuple(s) for s in self.shapes]
        if self.active is None:
            self.active = np.ones(self.n_outputs, dtype=bool)

    @property
    def n_outputs(self) -> int:
        return self.shapes[-1][1]

    @property
    def input_dim(self) -> int:
        return 3 + 6 * self.n_freq

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out, pos = [], 0
        for fan_in, fan_out in self.shapes:
            w = self.theta[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = self.theta[pos:pos + fan_out]
            pos += fan_out
            out.append((w, b))
        return out

    def copy(self) -> "MaskField":
        return MaskField(list(self.shapes), self.theta.copy(), self.n_freq, self.head, self.active.copy())

    def forward(self, coords: np.ndarray):
        """Head output for (P, 3) coordinates: (P, n) probabilities or (P,) sigmoid."""
        h = encode(coords, self.n_freq)
        acts = [h]
        layers = self.layers()
        for w, b in layers[:-1]:
            h = np.maximum(h @ w + b, 0.0)
            acts.append(h)
        w, b = layers[-1]
        logits = h @ w + b
        if self.head == "sigmoid":
            out = 1.0 / (1.0 + np.exp(-logits[:, 0]))
        else:
            out = masked_softmax(logits, self.active)
        return out, {"acts": acts, "logits": logits, "out": out}

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        return self.forward(coords)[0]

    def backward(self, cache: dict, grad_out: np.ndarray) -> np.ndarray:
        """Flat gradient matching ``theta`` for upstream dL/d(output)."""
        out = cache["out"]
        if grad_out.shape != out.shape:
            raise ValueError(f"upstream gradient shape {grad_out.shape} != output shape {out.shape}")
        if self.head == "sigmoid":
            g = (grad_out * out * (1.0 - out))[:, None]
        else:
            g = softmax_backward(out, grad_out)
        layers = self.layers()
        acts = cache["acts"]
        grads = [None] * len(layers)
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            a = acts[li]
            grads[li] = (a.T @ g, g.sum(axis=0))
            if li > 0:
                g = (g @ w.T) * (acts[li] > 0)
        return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])

    def to_dict(self) -> dict:
        return {"shapes": [list(s) for s in self.shapes], "n_freq": self.n_freq,
                "head": self.head, "active": self.active.tolist(), "n_params": int(self.theta.size)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, meta: dict, theta: np.ndarray) -> "MaskField":
        return cls([tuple(s) for s in meta["shapes"]], np.asarray(theta, dtype=np.float64).ravel().copy(),
                   int(meta["n_freq"]), meta["head"], np.asarray(meta["active"], dtype=bool))


def masked_softmax(logits: np.ndarray, active: np.ndarray) -> np.ndarray:
    z = np.where(active, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(active, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(p: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return p * (grad - np.sum(p * grad, axis=1, keepdims=True))


def init_field(seed: int, n_outputs: int, hidden: tuple[int, int] = (3, 64), n_freq: int = 6,
               head: str | None = None, out_scale: float = 0.1) -> MaskField:
    """Xavier-uniform weights, zero biases; the output layer is shrunk by ``out_scale``."""
    depth, width = hidden
    if depth < 1 or width < 1:
        raise ValueError("hidden depth and width must be >= 1")
    if head is None:
        head = "sigmoid" if n_outputs == 1 else "softmax"
    rng = np.random.default_rng(seed)
    dims = [3 + 6 * n_freq] + [width] * depth + [n_outputs]
    shapes = list(zip(dims[:-1], dims[1:]))
    parts = []
    for li, (fan_in, fan_out) in enumerate(shapes):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if li == len(shapes) - 1:
            w *= out_scale
        parts += [w.ravel(), np.zeros(fan_out)]
    return MaskField(shapes, np.concatenate(parts), n_freq, head)


def eval_light_mask(f: MaskField, coords: np.ndarray, m_r: np.ndarray) -> np.ndarray:
    """M_N = M_R * f(x, y, t); coords (H, W, 3), result (n, H, W)."""
    h, w = m_r.shape
    out = np.zeros((f.n_outputs, h, w))
    iy, ix = np.nonzero(m_r)
    if iy.size:
        out[:, iy, ix] = f(coords[iy, ix]).T * m_r[iy, ix]
    return out


def eval_face_mask(g: MaskField, coords: np.ndarray, m_r: np.ndarray) -> np.ndarray:
    """M_o = M_R * g(x, y, t)."""
    h, w = m_r.shape
    return g(coords.reshape(-1, 3)).reshape(h, w) * m_r


def backward_field(fld: MaskField, coords: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Recompute the forward pass and return the flat parameter gradient."""
    _, cache = fld.forward(coords)
    return fld.backward(cache, grad_out)
