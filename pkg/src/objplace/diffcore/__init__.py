"""Minimal reverse-mode autodiff on float64 numpy arrays."""

from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .gradcheck import GradcheckReport, gradcheck, gradcheck_params, rel_err
from .nn import BatchNorm, Conv2d, ConvBNReLU, Linear, Module, param
from .optim import ParamRegistry, adam_step
from .rng import Rng
from .tensor import ShapeMismatch, Tensor, as_tensor, no_grad
from . import tensor as F


def gaussian_sample(rng: Rng, mu, sigma) -> Tensor:
    """Reparameterised draw ``mu + sigma * eps`` with ``eps ~ N(0, 1)``.

    Differentiable through ``mu`` and ``sigma``; sigma is floored at 1e-8.
    """
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    eps = rng.normal(size=mu.shape)
    return F.add(mu, F.mul(F.clamp(sigma, 1e-8, None), eps))


__all__ = [
    "BatchNorm",
    "CheckpointError",
    "Conv2d",
    "ConvBNReLU",
    "F",
    "GradcheckReport",
    "Linear",
    "Module",
    "ParamRegistry",
    "Rng",
    "ShapeMismatch",
    "Tensor",
    "adam_step",
    "as_tensor",
    "gaussian_sample",
    "gradcheck",
    "gradcheck_params",
    "load_checkpoint",
    "no_grad",
    "param",
    "read_checkpoint",
    "rel_err",
    "save_checkpoint",
]
