"""Pairwise box geometry features and the learned attention gate.

For two boxes m (query) and n (key) the displacement vector is

    lam(m, n) = ( log(max(|x_m - x_n| / w_m, eps)),
                  log(max(|y_m - y_n| / h_m, eps)),
                  log(w_n / w_m),
                  log(h_n / h_m) )

which only involves coordinate differences and size ratios, so it is
invariant to translating all boxes and to scaling them uniformly. The
eps clamp removes the log(0) singularity at coincident centers and acts
on the normalized ratio, which keeps self-pairs scale-invariant too. The
second component's denominator can be switched to y_m (`paper_verbatim_y`)
to reproduce a variant that breaks translation invariance; h_m is the
default.

Each displacement component is expanded with sinusoids over a geometric
frequency ladder and the resulting embedding is projected to a scalar by
a learned vector, rectified: gate = relu(embed(lam) . w). One such vector
exists per attention head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError

Y_DENOM_HEIGHT = "height"
Y_DENOM_PAPER = "paper_verbatim_y"

ORDER_MODES = ("none", "by_area_desc", "left_to_right", "top_to_bottom")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box given by center, width, height, in pixels."""

    x_center: float
    y_center: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x_center, self.y_center, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise UsageError(f"box fields must be finite: {vals}")
        if self.w <= 0 or self.h <= 0:
            raise UsageError(f"box needs positive size, got w={self.w}, h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_center, self.y_center, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class GeometryConfig:
    eps_clamp: float = 1e-3
    d_g: int = 64
    wavelength_base: float = 1000.0
    y_denominator: str = Y_DENOM_HEIGHT

    def __post_init__(self):
        if self.eps_clamp <= 0:
            raise ConfigError("eps_clamp must be positive")
        if self.d_g % 8 != 0 or self.d_g <= 0:
            raise ConfigError(f"d_g must be a positive multiple of 8, got {self.d_g}")
        if self.y_denominator not in (Y_DENOM_HEIGHT, Y_DENOM_PAPER):
            raise ConfigError(f"unknown y_denominator {self.y_denominator!r}")


@dataclass
class GeometricParams:
    """One learned projection vector (single attention head's gate)."""

    w_g: np.ndarray

    def __post_init__(self):
        self.w_g = np.asarray(self.w_g, dtype=np.float64)
        if self.w_g.ndim != 1:
            raise UsageError("w_g must be a vector")


def displacement(m: BoundingBox, n: BoundingBox, cfg: GeometryConfig) -> np.ndarray:
    """Four log-space displacement features of key box n relative to query box m."""
    eps = cfg.eps_clamp
    y_denom = m.h if cfg.y_denominator == Y_DENOM_HEIGHT else m.y_center
    if y_denom <= 0:
        raise UsageError("paper_verbatim_y requires positive y_center for the query box")
    return np.array(
        [
            math.log(max(abs(m.x_center - n.x_center) / m.w, eps)),
            math.log(max(abs(m.y_center - n.y_center) / y_denom, eps)),
            math.log(n.w / m.w),
            math.log(n.h / m.h),
        ],
        dtype=np.float64,
    )


def displacement_matrix(boxes: list[BoundingBox], cfg: GeometryConfig) -> np.ndarray:
    """[N x N x 4] displacements; entry (m, n) is displacement(m, n)."""
    if not boxes:
        raise UsageError("displacement_matrix needs at least one box")
    arr = np.stack([b.as_array() for b in boxes])  # N x (x, y, w, h)
    x, y, w, h = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
    eps = cfg.eps_clamp
    y_denom = h if cfg.y_denominator == Y_DENOM_HEIGHT else y
    if np.any(y_denom <= 0):
        raise UsageError("paper_verbatim_y requires positive y_center")
    dx = np.maximum(np.abs(x[:, None] - x[None, :]) / w[:, None], eps)
    dy = np.maximum(np.abs(y[:, None] - y[None, :]) / y_denom[:, None], eps)
    lam = np.empty(arr.shape[:1] * 2 + (4,), dtype=np.float64)
    lam[..., 0] = np.log(dx)
    lam[..., 1] = np.log(dy)
    lam[..., 2] = np.log(w[None, :] / w[:, None])
    lam[..., 3] = np.log(h[None, :] / h[:, None])
    return lam


def frequency_ladder(cfg: GeometryConfig) -> np.ndarray:
    k = np.arange(cfg.d_g // 8, dtype=np.float64)
    return cfg.wavelength_base ** (8.0 * k / cfg.d_g)


def sinusoidal_embed(lam: np.ndarray, cfg: GeometryConfig) -> np.ndarray:
    """Expand displacement components into [..., d_g] sin/cos features.

    Layout is component-major: for each of the four components, pairs
    (sin, cos) over ascending frequency index.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape[-1] != 4:
        raise UsageError(f"displacement must have 4 components, got {lam.shape}")
    angles = lam[..., :, None] / frequency_ladder(cfg)  # [..., 4, K]
    paired = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # [..., 4, K, 2]
    return paired.reshape(lam.shape[:-1] + (cfg.d_g,))


def geometric_weight(lam: np.ndarray, params: GeometricParams, cfg: GeometryConfig) -> float:
    """Scalar gate for one box pair: relu(embed(lam) . w_g)."""
    if params.w_g.shape != (cfg.d_g,):
        raise UsageError(f"w_g must have length d_g={cfg.d_g}, got {params.w_g.shape}")
    return float(max(sinusoidal_embed(lam, cfg) @ params.w_g, 0.0))


def geometry_matrix(boxes: list[BoundingBox], params: GeometricParams,
                    cfg: GeometryConfig) -> np.ndarray:
    """[N x N] nonnegative gates for one head over all ordered box pairs."""
    if params.w_g.shape != (cfg.d_g,):
        raise UsageError(f"w_g must have length d_g={cfg.d_g}, got {params.w_g.shape}")
    emb = sinusoidal_embed(displacement_matrix(boxes, cfg), cfg)
    return np.maximum(emb @ params.w_g, 0.0)


def embed_matrix(boxes: list[BoundingBox], cfg: GeometryConfig) -> np.ndarray:
    """[N*N x d_g] pair embeddings, row-major over (query, key).

    This is the parameter-independent part of the gate computation; scenes
    can cache it once and reuse it for every forward pass.
    """
    n = len(boxes)
    emb = sinusoidal_embed(displacement_matrix(boxes, cfg), cfg)
    return emb.reshape(n * n, cfg.d_g)


def order_boxes(boxes: list[BoundingBox], mode: str) -> np.ndarray:
    """Stable permutation of box indices for the positional-encoding ablation."""
    if mode not in ORDER_MODES:
        raise ConfigError(f"unknown ordering mode {mode!r}; choose from {ORDER_MODES}")
    n = len(boxes)
    if mode == "none":
        return np.arange(n, dtype=np.int64)
    if mode == "by_area_desc":
        keys = np.array([-b.w * b.h for b in boxes])
    elif mode == "left_to_right":
        keys = np.array([b.x_center for b in boxes])
    else:
        keys = np.array([b.y_center for b in boxes])
    return np.argsort(keys, kind="stable").astype(np.int64)
