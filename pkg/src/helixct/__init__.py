"""Desk-scale helical multi-slice CT: simulation, two-stage cross-domain
denoising, weighted-FBP reconstruction, and image-quality metrology."""

__version__ = "0.1.0"

from .errors import ConfigError, HelixctError, NumericError, StageContractError
