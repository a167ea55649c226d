"""Shared test fixtures: affine micro-models and a finite-difference gradient check."""

import numpy as np
import torch

from vrgan.losses import VrganLambdas, generator_objective, regressor_objective
from vrgan.models import ConditioningStats


class MicroGenerator(torch.nn.Module):
    """dx = a * x + b * (y' - y) / std, broadcast over pixels."""

    def __init__(self, a, b):
        super().__init__()
        self.a = torch.nn.Parameter(torch.tensor(a, dtype=torch.float64))
        self.b = torch.nn.Parameter(torch.tensor(b, dtype=torch.float64))

    def forward(self, x, cond):
        return self.a * x + self.b * cond[:, 2].to(x.dtype)[:, None, None, None]


class MicroRegressor(torch.nn.Module):
    """f(x) = w * sum(x) + c."""

    def __init__(self, w, c):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor(w, dtype=torch.float64))
        self.c = torch.nn.Parameter(torch.tensor(c, dtype=torch.float64))

    def forward(self, x):
        return self.w * x.flatten(1).sum(1) + self.c


def central_difference(fn, params, h=1e-6):
    grads = []
    for p in params:
        with torch.no_grad():
            orig = p.item()
            p.fill_(orig + h)
            up = float(fn())
            p.fill_(orig - h)
            down = float(fn())
            p.fill_(orig)
        grads.append((up - down) / (2 * h))
    return np.array(grads)


def micro_gradient_errors(n_points=20, seed=0):
    """Largest relative analytic-vs-numeric gradient error at each random point.

    Both composite objectives are checked on 3 images of 2x2 pixels.
    """
    rng = np.random.default_rng(seed)
    stats = ConditioningStats(0.7, 0.1)
    lam = VrganLambdas()
    worst = []
    for _ in range(n_points):
        x = torch.as_tensor(rng.uniform(-1, 1, (3, 1, 2, 2)))
        y = torch.as_tensor(rng.uniform(0.5, 0.9, 3))
        yp = torch.as_tensor(rng.uniform(0.5, 0.9, 3))
        generator = MicroGenerator(*rng.uniform(-0.5, 0.5, 2))
        regressor = MicroRegressor(*rng.uniform(-0.5, 0.5, 2))

        def g_obj():
            return generator_objective(generator, regressor, x, y, yp, stats, lam)[0]

        def r_obj():
            return regressor_objective(generator, regressor, x, y, yp, stats, lam)[0]

        err = 0.0
        for objective, params in ((g_obj, [generator.a, generator.b]), (r_obj, [regressor.w, regressor.c])):
            for p in (generator.a, generator.b, regressor.w, regressor.c):
                p.grad = None
            objective().backward()
            analytic = np.array([p.grad.item() for p in params])
            numeric = central_difference(objective, params)
            err = max(err, float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-9))))
        worst.append(err)
    return np.array(worst)
