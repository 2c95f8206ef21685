"""Linear 3D face model learning from 2D observations with a differentiable renderer."""

__version__ = "0.1.0"
