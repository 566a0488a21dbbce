"""Two-stage segmentation: latent transport pretraining with dispersive
regularization, then a gated-fusion decoder with frequency-modulated
dynamic convolution. Pure NumPy, with its own reverse-mode autodiff."""

from .autodiff import ContractError, Var, backward, grad, grad_check, jvp, no_grad
from .config import Config, ConfigError

__version__ = "0.1.0"

__all__ = ["Config", "ConfigError", "ContractError", "Var", "backward", "grad", "grad_check", "jvp", "no_grad", "__version__"]
