"""Regeneration backends.

Every backend turns an 8-bit RGB image into a regenerated 8-bit RGB image
under the knobs of the wire protocol (strength, steps, seed, optional
prompt, optional 4x upscale).  ``MockBackend`` is a deterministic
blur-sharpen pipeline with no ML dependencies, used for protocol
conformance and CI.  ``load_backend`` resolves a backend name plus an
optional model path into an instance; a real latent-diffusion backend is
attempted lazily and degrades to a not-loaded placeholder (which the HTTP
layer reports as 503) when its stack or weights are unavailable.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageFilter


class BackendError(RuntimeError):
    """A loaded backend failed while regenerating."""


class MockBackend:
    """Deterministic blur-sharpen stand-in for a diffusion model.

    Strength 0 is a bitwise no-op.  For positive strengths the image is
    pulled toward its Gaussian blur, re-sharpened, and perturbed with
    seeded noise scaled by the strength, so the deviation from the input
    grows strictly with strength for a fixed seed.
    """

    model_id = "mock-blur-sharpen-v1"
    loaded = True

    def __init__(self, blur_sigma: float = 1.5, noise_scale: float = 0.08):
        self.blur_sigma = blur_sigma
        self.noise_scale = noise_scale

    def regenerate(self, image: np.ndarray, strength: float, steps: int,
                   seed: int, prompt: str | None = None,
                   upscale: bool = False) -> np.ndarray:
        if upscale:
            return self._upscale(image, strength, seed)
        if strength == 0.0:
            return image.copy()
        x = image.astype(np.float64) / 255.0
        blurred = self._blur(x, self.blur_sigma)
        w = min(1.0, 2.0 * strength)
        base = x + w * (blurred - x)
        sharp = base + 0.5 * w * (base - self._blur(base, 1.0))
        rng = np.random.default_rng(seed)
        noisy = sharp + self.noise_scale * strength * \
            rng.standard_normal(x.shape)
        return self._to_u8(noisy)

    def _upscale(self, image: np.ndarray, strength: float,
                 seed: int) -> np.ndarray:
        h, w = image.shape[:2]
        im = Image.fromarray(image, mode="RGB")
        up = im.resize((4 * w, 4 * h), Image.BICUBIC)
        up = up.filter(ImageFilter.UnsharpMask(radius=2, percent=80))
        x = np.asarray(up, dtype=np.float64) / 255.0
        if strength > 0.0:
            rng = np.random.default_rng(seed)
            x = x + self.noise_scale * strength * rng.standard_normal(x.shape)
        return self._to_u8(x)

    @staticmethod
    def _blur(x: np.ndarray, sigma: float) -> np.ndarray:
        im = Image.fromarray((np.clip(x, 0.0, 1.0) * 255.0 + 0.5)
                             .astype(np.uint8), mode="RGB")
        out = im.filter(ImageFilter.GaussianBlur(radius=sigma))
        return np.asarray(out, dtype=np.float64) / 255.0

    @staticmethod
    def _to_u8(x: np.ndarray) -> np.ndarray:
        return (np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


class NotLoadedBackend:
    """Placeholder for a backend whose model could not be loaded."""

    loaded = False

    def __init__(self, model_id: str, reason: str):
        self.model_id = model_id
        self.reason = reason

    def regenerate(self, *args, **kwargs) -> np.ndarray:
        raise BackendError(f"model not loaded: {self.reason}")


class DiffusionBackend:
    """Latent-diffusion image-to-image backend (optional heavyweight path).

    Loads a Stable-Diffusion-style img2img pipeline from ``model_path``.
    Construction raises ImportError/OSError when the stack or weights are
    missing; ``load_backend`` turns that into a ``NotLoadedBackend``.
    """

    loaded = True

    def __init__(self, model_path: str):
        import torch  # noqa: F401  (deferred heavy imports)
        from diffusers import StableDiffusionImg2ImgPipeline
        self._torch = torch
        self.model_id = model_path
        self._pipe = StableDiffusionImg2ImgPipeline.from_pretrained(
            model_path)

    def regenerate(self, image: np.ndarray, strength: float, steps: int,
                   seed: int, prompt: str | None = None,
                   upscale: bool = False) -> np.ndarray:
        if upscale:
            raise BackendError("this model does not provide an upscaler")
        gen = self._torch.Generator().manual_seed(seed)
        result = self._pipe(prompt=prompt or "",
                            image=Image.fromarray(image, mode="RGB"),
                            strength=float(strength),
                            num_inference_steps=int(steps),
                            generator=gen)
        return np.asarray(result.images[0].convert("RGB"), dtype=np.uint8)


def load_backend(name: str, model_path: str | None = None):
    """Resolve a backend name into an instance.

    ``mock`` always loads.  ``diffusion`` requires a model path and a
    working diffusion stack; any load failure yields a placeholder that
    answers health checks but rejects regeneration as not loaded.
    """
    if name == "mock":
        return MockBackend()
    if name == "diffusion":
        if not model_path:
            return NotLoadedBackend("diffusion", "no model path configured")
        try:
            return DiffusionBackend(model_path)
        except Exception as exc:
            return NotLoadedBackend(model_path, str(exc))
    raise ValueError(f"unknown backend {name!r} (expected mock or diffusion)")
