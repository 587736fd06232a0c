"""Minimal differentiable query detector: rasterizer + two-layer perceptron.

The scene is rendered into a (C, H, W) grid of per-class Gaussian blobs,
flattened, and mapped through affine -> ReLU -> affine to N queries of
(4 box params + C class logits). Boxes are the elementwise sigmoid of the
raw box params, class probabilities the sigmoid of the logits. Forward
and backward are exact, pure numpy; there is no autograd anywhere.

Checkpoint layout (little-endian, documented here and in the README):
    bytes 0..7    magic b"AUXDETCK"
    uint32        format version (1)
    uint32 x 5    n_classes, grid_h, grid_w, hidden, n_queries
    float64[...]  w1 (in_dim x hidden, row-major), b1 (hidden,),
                  w2 (hidden x out_dim, row-major), b2 (out_dim,)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"AUXDETCK"
CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    n_classes: int
    grid_h: int = 16
    grid_w: int = 16
    hidden: int = 256
    n_queries: int = 20

    @property
    def in_dim(self) -> int:
        return self.n_classes * self.grid_h * self.grid_w

    @property
    def out_dim(self) -> int:
        return self.n_queries * (4 + self.n_classes)


@dataclass
class ModelParams:
    dims: ModelDims
    w1: np.ndarray  # (in_dim, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, out_dim)
    b2: np.ndarray  # (out_dim,)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


@dataclass
class ParamGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])


@dataclass(frozen=True)
class Predictions:
    """Per-query raw outputs plus their sigmoid-activated forms."""

    raw_boxes: np.ndarray  # (N, 4) pre-sigmoid box params
    logits: np.ndarray     # (N, C) class logits

    @property
    def boxes(self) -> np.ndarray:
        return _sigmoid(self.raw_boxes)

    @property
    def probs(self) -> np.ndarray:
        return _sigmoid(self.logits)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def rasterize(scene, noise_sigma: float, rng: np.random.Generator,
              n_classes: int, grid_h: int = 16, grid_w: int = 16) -> np.ndarray:
    """Render a scene into a (C, H, W) grid of per-class Gaussian blobs.

    Each object adds a blob centered on its box with axis sigmas of a
    quarter of the box size; i.i.d. Gaussian pixel noise of scale
    ``noise_sigma`` is added across the whole grid.
    """
    grid = np.zeros((n_classes, grid_h, grid_w), dtype=np.float64)
    ys = (np.arange(grid_h) + 0.5) / grid_h
    xs = (np.arange(grid_w) + 0.5) / grid_w
    for box, label in scene.objects:
        sx = box.w / 4
        sy = box.h / 4
        gx = np.exp(-0.5 * ((xs - box.cx) / sx) ** 2)
        gy = np.exp(-0.5 * ((ys - box.cy) / sy) ** 2)
        grid[label] += gy[:, None] * gx[None, :]
    if noise_sigma > 0:
        grid += rng.normal(0.0, noise_sigma, size=grid.shape)
    return grid


def init_params(rng: np.random.Generator, dims: ModelDims) -> ModelParams:
    """Xavier-uniform weights, zero biases."""
    def layer(fan_in: int, fan_out: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    return ModelParams(
        dims=dims,
        w1=layer(dims.in_dim, dims.hidden),
        b1=np.zeros(dims.hidden),
        w2=layer(dims.hidden, dims.out_dim),
        b2=np.zeros(dims.out_dim),
    )


def forward(params: ModelParams, grid: np.ndarray) -> Predictions:
    """Map a (C, H, W) grid to per-query raw outputs."""
    d = params.dims
    x = np.asarray(grid, dtype=np.float64).ravel()
    if x.shape[0] != d.in_dim:
        raise ShapeMismatch(f"grid has {x.shape[0]} values, model expects {d.in_dim}")
    h = np.maximum(x @ params.w1 + params.b1, 0.0)
    out = (h @ params.w2 + params.b2).reshape(d.n_queries, 4 + d.n_classes)
    return Predictions(raw_boxes=out[:, :4], logits=out[:, 4:])


def backward(params: ModelParams, grid: np.ndarray, grad_raw: np.ndarray) -> ParamGrads:
    """Exact gradients of sum(grad_raw * raw_outputs) w.r.t. all parameters.

    grad_raw: (N, 4 + C) upstream gradient on the raw outputs. The ReLU
    subgradient at the kink is 0.
    """
    d = params.dims
    x = np.asarray(grid, dtype=np.float64).ravel()
    if x.shape[0] != d.in_dim:
        raise ShapeMismatch(f"grid has {x.shape[0]} values, model expects {d.in_dim}")
    if grad_raw.shape != (d.n_queries, 4 + d.n_classes):
        raise ShapeMismatch(f"grad shape {grad_raw.shape} != {(d.n_queries, 4 + d.n_classes)}")

    pre = x @ params.w1 + params.b1
    h = np.maximum(pre, 0.0)
    g_out = grad_raw.ravel()

    g_w2 = np.outer(h, g_out)
    g_b2 = g_out.copy()
    g_h = params.w2 @ g_out
    g_pre = np.where(pre > 0, g_h, 0.0)
    g_w1 = np.outer(x, g_pre)
    g_b1 = g_pre
    return ParamGrads(w1=g_w1, b1=g_b1, w2=g_w2, b2=g_b2)


def save_checkpoint(path, params: ModelParams) -> None:
    d = params.dims
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<6I", CHECKPOINT_VERSION, d.n_classes, d.grid_h,
                            d.grid_w, d.hidden, d.n_queries))
        for arr in (params.w1, params.b1, params.w2, params.b2):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {magic!r}): {path}")
        version, n_classes, grid_h, grid_w, hidden, n_queries = struct.unpack("<6I", f.read(24))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        dims = ModelDims(n_classes=n_classes, grid_h=grid_h, grid_w=grid_w,
                         hidden=hidden, n_queries=n_queries)
        def read(shape) -> np.ndarray:
            count = int(np.prod(shape))
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"truncated checkpoint: {path}")
            return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)

        w1 = read((dims.in_dim, dims.hidden))
        b1 = read((dims.hidden,))
        w2 = read((dims.hidden, dims.out_dim))
        b2 = read((dims.out_dim,))
    return ModelParams(dims=dims, w1=w1, b1=b1, w2=w2, b2=b2)
