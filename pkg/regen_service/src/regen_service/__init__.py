"""HTTP sidecar serving the image-regeneration wire protocol.

The service accepts base64-encoded 8-bit RGB image files, runs them through
an image-to-image regeneration backend at a caller-chosen strength, and
returns the regenerated image in the same encoding.  A self-contained
blur-sharpen mock backend ships with the package so the protocol can be
exercised without any ML stack; a latent-diffusion backend slots in behind
the same interface when its dependencies and weights are available.
"""

from regen_service.app import create_app
from regen_service.backends import MockBackend, load_backend

__all__ = ["create_app", "MockBackend", "load_backend"]
