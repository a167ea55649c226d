"""Loss terms for adversarial regression training.

All L1 terms use mean reduction (over the batch, and over pixels for the
map penalty) so the default weights do not depend on batch or image size.

* ``loss_rx``  -- regressor fit on original images.
* ``loss_gxp`` -- generator objective: the regressor should read ``y'`` on ``x'``.
* ``loss_rxp`` -- adversarial regressor objective: read the original ``y`` on ``x'``.
* ``loss_reg`` -- L1 sparsity penalty on the effect map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .models import counterfactual


@dataclass(frozen=True)
class VrganLambdas:
    lambda_gx: float = 0.3
    lambda_reg: float = 0.03
    lambda_rx: float = 1.0
    lambda_rxp: float = 0.3

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")


def loss_rx(pred, y):
    pred = torch.as_tensor(pred)
    y = torch.as_tensor(y, dtype=pred.dtype, device=pred.device)
    if pred.numel() == 0:
        raise ValueError("empty batch")
    if pred.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(y.shape)}")
    return (pred - y).abs().mean()


def loss_gxp(regressor, x_prime, y_prime):
    return loss_rx(regressor(x_prime), y_prime)


def loss_rxp(regressor, x_prime, y):
    return loss_rx(regressor(x_prime.detach()), y)


def loss_reg(delta_x):
    delta_x = torch.as_tensor(delta_x)
    if delta_x.numel() == 0:
        raise ValueError("empty effect map batch")
    return delta_x.abs().mean()


def generator_objective(generator, regressor, x, y, y_prime, stats, lambdas: VrganLambdas):
    """Weighted generator loss; returns ``(total, terms)``.

    Gradients reach the generator through the regressor; the caller decides which parameters
    are updated.
    """
    x_prime, dx = counterfactual(generator, x, y, y_prime, stats)
    gxp = loss_gxp(regressor, x_prime, y_prime)
    reg = loss_reg(dx)
    total = lambdas.lambda_gx * gxp + lambdas.lambda_reg * reg
    return total, {"loss_gxp": gxp.detach(), "loss_reg": reg.detach()}


def regressor_objective(generator, regressor, x, y, y_prime, stats, lambdas: VrganLambdas):
    """Weighted regressor loss; ``x'`` is built without tracking the generator's graph."""
    with torch.no_grad():
        x_prime, _ = counterfactual(generator, x, y, y_prime, stats)
    # one forward pass over [x; x'] -- frozen normalisation keeps rows independent
    pred = regressor(torch.cat([x, x_prime.detach()]))
    n = x.shape[0]
    rx = loss_rx(pred[:n], y)
    rxp = loss_rx(pred[n:], y)
    total = lambdas.lambda_rx * rx + lambdas.lambda_rxp * rxp
    return total, {"loss_rx": rx.detach(), "loss_rxp": rxp.detach()}
