"""Video 3D-ResNets with attention variants, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
