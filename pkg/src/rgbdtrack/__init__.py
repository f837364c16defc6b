"""RGBD object tracking with dual cross-modal fusion, on a numpy autodiff core.

The package is organized around the data path of the tracker:

- :mod:`rgbdtrack.tensor` - float64 tensors with reverse-mode autodiff
- :mod:`rgbdtrack.attention` - multi-head attention building blocks
- :mod:`rgbdtrack.fusion` - cross-modal fusion (attention + residual mixing)
- :mod:`rgbdtrack.model` - backbone, fused features, discriminative head
- :mod:`rgbdtrack.pipeline` - training loop and online tracking
- :mod:`rgbdtrack.synthdata` - synthetic RGBD sequence generator
- :mod:`rgbdtrack.evalkit` - short-term and long-term evaluation metrics
- :mod:`rgbdtrack.cli` - command-line entry points
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
