"""Desk-scale 3D Gaussian splatting trainer with diffusion bootstrapping.

The package trains an anisotropic 3D Gaussian scene representation from a
COLMAP sparse reconstruction, using a differentiable CPU tile rasterizer.
On top of the plain reconstruction loss it implements novel-view
bootstrapping: perturbed copies of the training cameras are rendered,
partially regenerated by a (pluggable) denoising-diffusion engine, and fed
back into training through a hybrid loss on a fixed interval schedule.
"""

__version__ = "0.1.0"
