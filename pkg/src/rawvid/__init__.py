"""Raw video denoising: Bayer data pipeline, calibrated noise model and RViDeNet."""

__version__ = "0.1.0"
