"""PSNR, SSIM and MSE for unit-range images."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class SsimConfig:
    k1: float = 0.01
    k2: float = 0.03
    L: float = 1.0
    window: int = 0  # 0 -> global statistics
    stride: int = 1

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0 or self.L <= 0:
            raise ValueError("k1, k2 and L must be positive")
        if self.window and self.window < 2:
            raise ValueError("SSIM window must be >= 2")

    @property
    def c1(self) -> float:
        return (self.k1 * self.L) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.L) ** 2

    @property
    def mode(self) -> str:
        return f"windowed{self.window}" if self.window else "global"


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(output, gt) -> float:
    err = mse(output, gt)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def _ssim_formula(mx, my, vx, vy, cxy, c1, c2):
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(x, y, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM over channels; population statistics.

    Global mode uses whole-image statistics per channel; windowed mode averages
    the index over ``window`` x ``window`` patches taken every ``stride`` pixels.
    """
    x, y = _pair(x, y)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    vals = []
    for c in range(x.shape[2]):
        a, b = x[..., c], y[..., c]
        if cfg.window:
            wa = sliding_window_view(a, (cfg.window, cfg.window))[::cfg.stride, ::cfg.stride]
            wb = sliding_window_view(b, (cfg.window, cfg.window))[::cfg.stride, ::cfg.stride]
            mx, my = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
            vx = wa.var(axis=(-2, -1))
            vy = wb.var(axis=(-2, -1))
            cxy = ((wa - mx[..., None, None]) * (wb - my[..., None, None])).mean(axis=(-2, -1))
            vals.append(float(np.mean(_ssim_formula(mx, my, vx, vy, cxy, cfg.c1, cfg.c2))))
        else:
            mx, my = a.mean(), b.mean()
            cxy = ((a - mx) * (b - my)).mean()
            vals.append(float(_ssim_formula(mx, my, a.var(), b.var(), cxy, cfg.c1, cfg.c2)))
    return float(np.mean(vals))
