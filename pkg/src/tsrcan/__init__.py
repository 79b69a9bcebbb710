"""RGB super-resolution from 4x4 multispectral mosaics on a numpy autodiff engine."""

__version__ = "0.1.0"
