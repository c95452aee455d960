"""Image-quality metrics: PSNR and Gaussian-window SSIM.

SSIM follows the standard formulation (11x11 Gaussian window, sigma 1.5,
C1 = 0.01^2, C2 = 0.03^2, reflection padding, mean over pixels and
channels). ``ssim_with_grad`` additionally returns the analytic gradient
of the score with respect to the first image, which the training loss
consumes; the adjoint accounts for the reflection padding exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; inf if equal."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps (the 2-D window is separable)."""
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    if n == 1:
        return np.zeros(n + 2 * pad, dtype=np.int64)
    return np.pad(np.arange(n, dtype=np.int64), pad, mode="reflect")


def _filter_axis(img: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    """Correlate with reflection padding along one axis ('same' size)."""
    pad = (taps.size - 1) // 2
    idx = _reflect_indices(img.shape[axis], pad)
    padded = np.take(img, idx, axis=axis)
    windows = sliding_window_view(padded, taps.size, axis=axis)
    return windows @ taps


def _filter_axis_adjoint(grad: np.ndarray, taps: np.ndarray, axis: int,
                         n: int) -> np.ndarray:
    """Adjoint of ``_filter_axis``: scatter output-gradients back to the
    unpadded input, folding the reflected border weights in."""
    pad = (taps.size - 1) // 2
    # Full correlation of grad with reversed taps = gradient w.r.t. the
    # padded signal.
    zshape = list(grad.shape)
    zshape[axis] += 2 * (taps.size - 1)
    zpad = np.zeros(zshape, dtype=grad.dtype)
    sl = [slice(None)] * grad.ndim
    sl[axis] = slice(taps.size - 1, taps.size - 1 + grad.shape[axis])
    zpad[tuple(sl)] = grad
    windows = sliding_window_view(zpad, taps.size, axis=axis)
    grad_padded = windows @ taps[::-1]
    # Scatter padded-signal gradients onto source rows.
    idx = _reflect_indices(n, pad)
    oshape = list(grad.shape)
    oshape[axis] = n
    out = np.zeros(oshape, dtype=grad.dtype)
    out_m = np.moveaxis(out, axis, 0)
    gp_m = np.moveaxis(grad_padded, axis, 0)
    np.add.at(out_m, idx, gp_m)
    return out


def _blur(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    return _filter_axis(_filter_axis(img, taps, 0), taps, 1)


def _blur_adjoint(grad: np.ndarray, taps: np.ndarray, shape) -> np.ndarray:
    inner = _filter_axis_adjoint(grad, taps, 1, shape[1])
    return _filter_axis_adjoint(inner, taps, 0, shape[0])


def gaussian_blur(img: np.ndarray, sigma: float, truncate: float = 3.0) -> np.ndarray:
    """Separable Gaussian blur with reflection padding.

    The discrete kernel is the normalized Gaussian sampled on integer
    offsets out to ``ceil(truncate * sigma)``.
    """
    if sigma <= 0:
        return np.asarray(img, dtype=np.float64).copy()
    radius = int(np.ceil(truncate * sigma))
    taps = gaussian_window(2 * radius + 1, sigma)
    return _blur(np.asarray(img, dtype=np.float64), taps)


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    return a, b


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA) -> float:
    """Mean structural similarity of two [0, 1] images."""
    value, _ = _ssim_core(a, b, window, sigma, want_grad=False)
    return value


def ssim_with_grad(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW,
                   sigma: float = SSIM_SIGMA) -> tuple[float, np.ndarray]:
    """SSIM score and its gradient with respect to ``a``."""
    return _ssim_core(a, b, window, sigma, want_grad=True)


def _ssim_core(a, b, window, sigma, want_grad):
    x, y = _check_pair(a, b)
    taps = gaussian_window(window, sigma)
    ux = _blur(x, taps)
    uy = _blur(y, taps)
    uxx = _blur(x * x, taps)
    uyy = _blur(y * y, taps)
    uxy = _blur(x * y, taps)

    a1 = 2.0 * ux * uy + SSIM_C1
    a2 = 2.0 * (uxy - ux * uy) + SSIM_C2
    b1 = ux * ux + uy * uy + SSIM_C1
    b2 = (uxx - ux * ux) + (uyy - uy * uy) + SSIM_C2
    denom = b1 * b2
    smap = (a1 * a2) / denom
    value = float(np.mean(smap))
    if not want_grad:
        return value, None

    n = smap.size
    g_s = np.full_like(smap, 1.0 / n)
    # S depends on the five blurred fields; chain through each.
    d_a1 = g_s * a2 / denom
    d_a2 = g_s * a1 / denom
    d_b = -g_s * smap / denom  # shared factor for dB1, dB2
    d_b1 = d_b * b2
    d_b2 = d_b * b1
    g_ux = 2.0 * uy * d_a1 - 2.0 * uy * d_a2 + 2.0 * ux * d_b1 - 2.0 * ux * d_b2
    g_uxx = d_b2
    g_uxy = 2.0 * d_a2
    shape = x.shape[:2]
    grad = (_blur_adjoint(g_ux, taps, shape)
            + _blur_adjoint(g_uxx, taps, shape) * (2.0 * x)
            + _blur_adjoint(g_uxy, taps, shape) * y)
    if np.asarray(a).ndim == 2:
        grad = grad[:, :, 0]
    return value, grad


@dataclass
class MetricReport:
    """Evaluation summary for one scene at one iteration."""

    scene: str
    iteration: int
    psnr: float
    ssim: float
    lpips: str = "n/a"
    per_image: list[dict] = field(default_factory=list)

    def add_image(self, name: str, psnr_value: float, ssim_value: float) -> None:
        self.per_image.append(
            {"name": name, "psnr": _json_float(psnr_value), "ssim": ssim_value})

    def to_dict(self) -> dict:
        return {
            "scene": self.scene,
            "iteration": self.iteration,
            "psnr": _json_float(self.psnr),
            "ssim": self.ssim,
            "lpips": self.lpips,
            "per_image": self.per_image,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _json_float(x: float):
    return "inf" if np.isinf(x) else float(x)


def evaluate_pairs(pairs: list[tuple[str, np.ndarray, np.ndarray]], scene: str,
                   iteration: int) -> MetricReport:
    """Aggregate PSNR/SSIM over (name, rendered, reference) pairs."""
    report = MetricReport(scene=scene, iteration=iteration, psnr=0.0, ssim=0.0)
    psnrs: list[float] = []
    ssims: list[float] = []
    for name, rendered, reference in pairs:
        p = psnr(rendered, reference)
        s = ssim(rendered, reference)
        report.add_image(name, p, s)
        psnrs.append(p)
        ssims.append(s)
    if psnrs:
        report.psnr = float(np.mean(psnrs))
        report.ssim = float(np.mean(ssims))
    return report
