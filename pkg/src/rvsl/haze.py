"""Physical haze model and statistical priors.

Koschmieder synthesis I = J*t + A*(1-t), transmission maps t = exp(-beta*d),
the dark channel operator, dark-channel-based airlight estimation, and the
RGB colinearity geometry (hazy pixel, clear pixel and airlight lie on a line).

All functions here are pure numpy over float64 arrays: images are (3,H,W) in
[0,1], depth/transmission maps are (H,W). Differentiable counterparts used by
the losses live in :mod:`rvsl.losses` on top of :mod:`rvsl.autograd`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BETA_MIN, BETA_MAX = 0.05, 5.0
T_MIN_DEFAULT = 0.05


@dataclass(frozen=True)
class HazeParams:
    """Scattering coefficient beta and global airlight color."""

    beta: float
    airlight: tuple  # RGB, each in [0,1]

    def __post_init__(self):
        if not (BETA_MIN <= self.beta <= BETA_MAX):
            raise ValueError(f"beta {self.beta} outside [{BETA_MIN}, {BETA_MAX}]")
        a = np.asarray(self.airlight, dtype=np.float64)
        if a.shape != (3,) or (a < 0).any() or (a > 1).any():
            raise ValueError(f"airlight must be an RGB triple in [0,1], got {self.airlight}")
        object.__setattr__(self, "airlight", tuple(float(v) for v in a))


@dataclass(frozen=True)
class DarkChannelConfig:
    """Window size for the local-patch minimum (odd, default 5)."""

    patch: int = 5

    def __post_init__(self):
        if self.patch < 1 or self.patch % 2 == 0:
            raise ValueError(f"patch must be odd and >= 1, got {self.patch}")


def transmission_from_depth(depth, beta):
    """t(x) = exp(-beta * d(x)), elementwise over an (H,W) depth map."""
    depth = np.asarray(depth, dtype=np.float64)
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if (depth < 0).any():
        raise ValueError("depth map contains negative values")
    return np.exp(-beta * depth)


def synthesize_haze(clear, t, params):
    """Render haze onto a clear image: I = J*t + A*(1-t), per channel."""
    clear = np.asarray(clear, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if clear.ndim != 3 or clear.shape[1:] != t.shape:
        raise ValueError(f"shape mismatch: clear {clear.shape} vs t {t.shape}")
    a = np.asarray(params.airlight)[:, None, None]
    return clear * t[None] + a * (1.0 - t[None])


def invert_haze(hazy, t, params, t_min=T_MIN_DEFAULT):
    """Algebraic inverse of the haze model: J = (I - A*(1-t)) / t.

    Transmission below ``t_min`` is clamped (flagged in the returned metadata);
    the result is clipped to [0,1]. Returns (image, info dict).
    """
    hazy = np.asarray(hazy, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if hazy.ndim != 3 or hazy.shape[1:] != t.shape:
        raise ValueError(f"shape mismatch: hazy {hazy.shape} vs t {t.shape}")
    clamped = t < t_min
    tc = np.maximum(t, t_min)
    a = np.asarray(params.airlight)[:, None, None]
    j = (hazy - a * (1.0 - tc[None])) / tc[None]
    return np.clip(j, 0.0, 1.0), {"clamped_pixels": int(clamped.sum())}


def dark_channel(img, cfg=DarkChannelConfig()):
    """DC(x) = min over the window of the per-pixel channel minimum.

    Borders use the valid sub-window only; no padding values are injected.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3,H,W) image, got {img.shape}")
    _, h, w = img.shape
    if cfg.patch > h and cfg.patch > w:
        raise ValueError(f"patch {cfg.patch} larger than both image dims {h}x{w}")
    cmin = img.min(axis=0)
    half = cfg.patch // 2
    padded = np.pad(cmin, half, constant_values=np.inf)
    win = sliding_window_view(padded, (cfg.patch, cfg.patch))
    return win.min(axis=(2, 3))


def estimate_airlight(hazy, cfg=DarkChannelConfig()):
    """Dark-channel-based airlight estimate.

    Takes the top 0.1% of pixels (at least one) by dark-channel value, then
    averages the input colors of the brightest half of those candidates.
    """
    hazy = np.asarray(hazy, dtype=np.float64)
    dc = dark_channel(hazy, cfg)
    h, w = dc.shape
    n_cand = max(1, int(round(0.001 * h * w)))
    flat_dc = dc.ravel()
    # stable selection: sort by (-dc, index) so ties break deterministically
    order = np.lexsort((np.arange(flat_dc.size), -flat_dc))
    cand = order[:n_cand]
    pixels = hazy.reshape(3, -1)[:, cand]
    lum = pixels.mean(axis=0)
    n_keep = max(1, n_cand // 2)
    keep = np.lexsort((np.arange(lum.size), -lum))[:n_keep]
    return tuple(pixels[:, keep].mean(axis=1))


def colinearity_residual(clear, hazy, airlight, eps=1e-6):
    """Per-pixel 1 - cos(clear - A, hazy - A); degenerate pixels return 0.

    A pixel is degenerate when either offset vector has norm < ``eps``
    (the pixel coincides with the airlight); cosine is undefined there.
    """
    clear = np.asarray(clear, dtype=np.float64)
    hazy = np.asarray(hazy, dtype=np.float64)
    if clear.shape != hazy.shape:
        raise ValueError(f"shape mismatch: {clear.shape} vs {hazy.shape}")
    a = np.asarray(airlight)[:, None, None]
    u = clear - a
    v = hazy - a
    nu = np.sqrt((u * u).sum(axis=0))
    nv = np.sqrt((v * v).sum(axis=0))
    valid = (nu >= eps) & (nv >= eps)
    denom = np.where(valid, nu * nv, 1.0)
    cos = (u * v).sum(axis=0) / denom
    return np.where(valid, 1.0 - cos, 0.0)
