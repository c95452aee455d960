"""Pixel-space DDIM regeneration engine.

A partial image-to-image pass: noise the input forward to a timestep set
by the broken strength ``s_r``, then run the tail of the reverse process
with a pluggable noise predictor. The scheduling math (variance table,
forward noising, DDIM update) is exact and fully deterministic for
``eta = 0``; what plays the role of the big diffusion model is whatever
``NoisePredictor`` is plugged in — an algebraic oracle, a local
blur-sharpen heuristic, or a remote service speaking the regeneration
wire protocol.

Images are float64 in [0, 1]; the engine works directly in that domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import image_io

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2
DEFAULT_SAMPLER_STEPS = 100
DEFAULT_TIMEOUT = 120.0


class PredictorFailure(RuntimeError):
    """A noise predictor (typically remote) could not produce a result."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule plus sampler settings.

    ``alpha_bars`` has length T+1 with ``alpha_bars[0] == 1`` so that
    timestep 0 is exactly the identity.
    """

    betas: np.ndarray          # (T,) beta_t for t = 1..T
    alpha_bars: np.ndarray     # (T+1,) cumulative products, index by t
    sampler_steps: int = DEFAULT_SAMPLER_STEPS
    eta: float = 0.0

    def __post_init__(self):
        b = self.betas
        if np.any(b <= 0.0) or np.any(b >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(b) < 0.0):
            raise ValueError("betas must be non-decreasing")
        ab = self.alpha_bars
        if ab.shape[0] != b.shape[0] + 1:
            raise ValueError("alpha_bars must have length T+1")
        if ab[0] != 1.0:
            raise ValueError("alpha_bars[0] must be exactly 1")
        if np.any(np.diff(ab) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")
        if not (0 < self.sampler_steps <= self.num_train_steps):
            raise ValueError("sampler_steps must be in [1, T]")
        if self.eta < 0.0:
            raise ValueError("eta must be >= 0")

    @property
    def num_train_steps(self) -> int:
        return self.betas.shape[0]


def make_schedule(num_train_steps: int = DEFAULT_T,
                  beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END,
                  sampler_steps: int = DEFAULT_SAMPLER_STEPS,
                  eta: float = 0.0) -> DiffusionSchedule:
    """Linear-beta schedule with the cumulative alpha table prebuilt."""
    betas = np.linspace(beta_start, beta_end, num_train_steps)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule(betas=betas, alpha_bars=alpha_bars,
                             sampler_steps=sampler_steps, eta=eta)


def strength_to_start(s_r: float, num_train_steps: int) -> int:
    """Map broken strength to the starting timestep: round(T * s_r)."""
    if not 0.0 <= s_r <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    return int(np.clip(round(num_train_steps * s_r), 0, num_train_steps))


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray,
                  schedule: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    ab = schedule.alpha_bars[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_step(x_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray,
              eta: float, schedule: DiffusionSchedule,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """One deterministic (eta=0) or stochastic DDIM update t -> t_prev."""
    if t_prev >= t:
        raise ValueError("t_prev must be smaller than t")
    ab_t = schedule.alpha_bars[t]
    ab_prev = schedule.alpha_bars[t_prev]
    x0_pred = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if eta > 0.0:
        sigma = (eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
                 * np.sqrt(1.0 - ab_t / ab_prev))
    else:
        sigma = 0.0
    dir_coeff = np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0))
    x_prev = np.sqrt(ab_prev) * x0_pred + dir_coeff * eps_hat
    if sigma > 0.0:
        if rng is None:
            raise ValueError("eta > 0 requires an rng for the noise draw")
        x_prev = x_prev + sigma * rng.standard_normal(x_t.shape)
    return x_prev


def sampler_timesteps(start: int, num_train_steps: int, sampler_steps: int) -> list[int]:
    """Descending timesteps from ``start`` to 0, spaced like the global
    DDIM grid: the step count is proportional to start / T."""
    if start <= 0:
        return []
    n = max(1, int(round(sampler_steps * start / num_train_steps)))
    grid = np.unique(np.round(np.linspace(0, start, n + 1)).astype(np.int64))
    return [int(v) for v in grid[::-1]]


@dataclass
class RegenRequest:
    """One partial-regeneration job."""

    image: np.ndarray
    strength: float
    steps: int = DEFAULT_SAMPLER_STEPS
    seed: int = 0
    prompt: str | None = None
    upscale: bool = False

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must lie in [0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


class NoisePredictor:
    """Interface: predict the noise component of ``x_t`` at timestep t."""

    def predict(self, x_t: np.ndarray, t: int) -> np.ndarray:
        raise NotImplementedError


class ExactEpsOracle(NoisePredictor):
    """Returns the exact noise injected by the caller (test oracle).

    ``regenerate`` hands every predictor the drawn noise through
    ``on_noise_injected``; this one simply stores and replays it, which
    makes the DDIM walk an exact algebraic inversion.
    """

    def __init__(self):
        self.eps: np.ndarray | None = None

    def on_noise_injected(self, eps: np.ndarray) -> None:
        self.eps = eps.copy()

    def predict(self, x_t: np.ndarray, t: int) -> np.ndarray:
        if self.eps is None or self.eps.shape != x_t.shape:
            raise PredictorFailure("no injected noise recorded for this shape")
        return self.eps


class ZeroPredictor(NoisePredictor):
    """Predicts no noise; DDIM then just rescales toward the input."""

    def predict(self, x_t: np.ndarray, t: int) -> np.ndarray:
        return np.zeros_like(x_t)


class BlurSharpenHeuristic(NoisePredictor):
    """Edge-preserving denoiser dressed as a noise predictor.

    The implied clean image is blur(x) plus the soft-thresholded blur
    residual: small-amplitude texture (noise) is shrunk, strong edges
    pass through. The predicted noise is whatever makes the DDIM x0
    estimate equal that image: eps = (x_t - sqrt(abar) x0_est) /
    sqrt(1 - abar).
    """

    def __init__(self, schedule: DiffusionSchedule, blur_sigma: float = 1.0,
                 threshold_scale: float = 0.6):
        self.schedule = schedule
        self.blur_sigma = blur_sigma
        self.threshold_scale = threshold_scale

    def denoised(self, x_t: np.ndarray, t: int) -> np.ndarray:
        from .metrics import gaussian_blur
        smooth = gaussian_blur(x_t, self.blur_sigma)
        residual = x_t - smooth
        noise_level = float(np.sqrt(1.0 - self.schedule.alpha_bars[t])) if t > 0 else 0.0
        tau = self.threshold_scale * noise_level
        kept = np.sign(residual) * np.maximum(np.abs(residual) - tau, 0.0)
        return smooth + kept

    def predict(self, x_t: np.ndarray, t: int) -> np.ndarray:
        ab = self.schedule.alpha_bars[t]
        if t == 0:
            return np.zeros_like(x_t)
        x0_est = self.denoised(x_t, t)
        return (x_t - np.sqrt(ab) * x0_est) / np.sqrt(1.0 - ab)


class RemotePredictor:
    """Delegates the entire regeneration to a service over HTTP.

    Speaks the regeneration wire protocol: POST {url}/v1/regenerate with
    a base64 PNG plus strength/steps/seed, expect {"image_b64": ...}.
    Any transport, HTTP, or payload problem raises PredictorFailure.
    """

    def __init__(self, url: str, timeout: float = DEFAULT_TIMEOUT):
        self.url = url.rstrip("/")
        self.timeout = timeout

    def regenerate(self, req: RegenRequest) -> np.ndarray:
        import requests

        body = {
            "image_b64": image_io.to_b64(req.image),
            "strength": float(req.strength),
            "steps": int(req.steps),
            "seed": int(req.seed),
        }
        if req.prompt is not None:
            body["prompt"] = req.prompt
        if req.upscale:
            body["upscale"] = True
        try:
            resp = requests.post(f"{self.url}/v1/regenerate", json=body,
                                 timeout=self.timeout)
        except requests.RequestException as exc:
            raise PredictorFailure(f"regeneration request failed: {exc}") from exc
        if resp.status_code != 200:
            raise PredictorFailure(
                f"regeneration service returned HTTP {resp.status_code}: "
                f"{resp.text[:200]}")
        try:
            payload = resp.json()
            return image_io.from_b64(payload["image_b64"])
        except (ValueError, KeyError, TypeError) as exc:
            raise PredictorFailure(f"malformed service response: {exc}") from exc


def _notify_injected(predictor, eps: np.ndarray) -> None:
    hook = getattr(predictor, "on_noise_injected", None)
    if hook is not None:
        hook(eps)


def regenerate(req: RegenRequest, predictor, schedule: DiffusionSchedule) -> np.ndarray:
    """Partially noise the image and denoise it back; clamp to [0, 1].

    strength 0 returns the input bitwise. A ``RemotePredictor`` handles
    the whole request on the service side.
    """
    if isinstance(predictor, RemotePredictor):
        return predictor.regenerate(req)
    x0 = np.asarray(req.image, dtype=np.float64)
    start = strength_to_start(req.strength, schedule.num_train_steps)
    if start == 0:
        return x0
    rng = np.random.default_rng(req.seed)
    eps = rng.standard_normal(x0.shape)
    _notify_injected(predictor, eps)
    x = forward_noise(x0, start, eps, schedule)
    steps = sampler_timesteps(start, schedule.num_train_steps, req.steps)
    for t, t_prev in zip(steps[:-1], steps[1:]):
        eps_hat = predictor.predict(x, t)
        x = ddim_step(x, t, t_prev, eps_hat, schedule.eta, schedule, rng=rng)
    return np.clip(x, 0.0, 1.0)


def simple_loss(x0: np.ndarray, t: int, eps: np.ndarray, predictor,
                schedule: DiffusionSchedule) -> float:
    """Squared noise-prediction error at one timestep."""
    _notify_injected(predictor, eps)
    x_t = forward_noise(x0, t, eps, schedule)
    eps_hat = predictor.predict(x_t, t)
    return float(np.sum((eps - eps_hat) ** 2))
