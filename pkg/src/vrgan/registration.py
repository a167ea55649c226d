"""Multi-resolution intensity-based affine registration.

The moving image is resampled through an affine map of output (reference)
coordinates to input (moving) coordinates and the mean squared intensity
difference to the reference, less its mean so that a global intensity
offset does not bias the fit, is minimised with L-BFGS, coarse to fine over
a Gaussian pyramid.  Gradients come from torch autograd through bilinear
``grid_sample``, so they are exact for the interpolated objective.

Transforms are reported as 2x3 matrices acting on homogeneous pixel
coordinates ``(col, row, 1)`` of the reference grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import optimize
from skimage.transform import pyramid_reduce

DET_BOUNDS = (0.5, 2.0)


@dataclass
class AffineTransform:
    matrix: np.ndarray  # (2, 3), output pixel (col, row, 1) -> input pixel (col, row)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @property
    def params(self) -> np.ndarray:
        return self.matrix.ravel().copy()

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.matrix[:, :2]))

    @property
    def plausible(self) -> bool:
        lo, hi = DET_BOUNDS
        return lo <= self.determinant <= hi

    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return AffineTransform((self.homogeneous() @ other.homogeneous())[:2])

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.homogeneous())[:2])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map ``(N, 2)`` arrays of ``(col, row)`` points."""
        return points @ self.matrix[:, :2].T + self.matrix[:, 2]


def centered_affine(shape, rotation_deg=0.0, scale=1.0, shift=(0.0, 0.0)) -> AffineTransform:
    """Rotation and isotropic scaling about the image centre followed by a ``(col, row)`` shift."""
    rows, cols = shape
    c = np.array([(cols - 1) / 2.0, (rows - 1) / 2.0])
    th = np.deg2rad(rotation_deg)
    lin = scale * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    t = c - lin @ c + np.asarray(shift, dtype=np.float64)
    return AffineTransform(np.hstack([lin, t[:, None]]))


# ---------------------------------------------------------------------------
# normalised <-> pixel coordinates (align_corners=True convention)


def _pixel_to_norm(shape) -> np.ndarray:
    rows, cols = shape
    return np.array([[2.0 / (cols - 1), 0.0, -1.0], [0.0, 2.0 / (rows - 1), -1.0], [0.0, 0.0, 1.0]])


def _norm_theta_to_pixel(theta: np.ndarray, shape) -> AffineTransform:
    P = _pixel_to_norm(shape)
    H = np.vstack([theta, [0.0, 0.0, 1.0]])
    return AffineTransform((np.linalg.inv(P) @ H @ P)[:2])


def _pixel_to_norm_theta(transform: AffineTransform, shape) -> np.ndarray:
    P = _pixel_to_norm(shape)
    return (P @ transform.homogeneous() @ np.linalg.inv(P))[:2]


def _warp_torch(moving: torch.Tensor, theta: torch.Tensor, shape) -> torch.Tensor:
    grid = F.affine_grid(theta[None], (1, 1, *shape), align_corners=True)
    return F.grid_sample(moving[None, None], grid, mode="bilinear", padding_mode="border",
                         align_corners=True)[0, 0]


def warp_affine(moving: np.ndarray, transform: AffineTransform, output_shape=None) -> np.ndarray:
    """Bilinear resampling of ``moving`` at ``transform(p)`` for every output pixel ``p``.

    Samples falling outside the moving image take the value of the nearest
    edge pixel.
    """
    moving = np.asarray(moving, dtype=np.float64)
    shape = tuple(output_shape or moving.shape)
    if shape != moving.shape:
        raise ValueError("warp_affine requires matching input and output shapes")
    theta = torch.as_tensor(_pixel_to_norm_theta(transform, shape))
    with torch.no_grad():
        return _warp_torch(torch.as_tensor(moving), theta, shape).numpy()


# ---------------------------------------------------------------------------
# registration


@dataclass
class RegistrationResult:
    transform: AffineTransform
    aligned: np.ndarray
    mse: float
    initial_mse: float
    converged: bool
    flags: list = field(default_factory=list)


def _pyramid(image: np.ndarray, levels: int) -> list:
    pyr = [image]
    for _ in range(levels - 1):
        if min(pyr[-1].shape) < 16:
            break
        pyr.append(pyramid_reduce(pyr[-1], downscale=2, preserve_range=True, channel_axis=None))
    return pyr[::-1]


def _offset_free_mse(diff):
    # MSE after removing the best constant offset; with plain MSE a global intensity
    # offset between the exams pulls the transform toward darker or brighter regions
    return ((diff - diff.mean()) ** 2).mean()


def _optimize_level(reference, moving, theta0, max_iter):
    shape = reference.shape
    ref = torch.as_tensor(reference)
    mov = torch.as_tensor(moving)
    identity = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    def fun(p):
        delta = torch.tensor(p, dtype=torch.float64, requires_grad=True)
        theta = torch.as_tensor(identity) + delta.reshape(2, 3)
        loss = _offset_free_mse(_warp_torch(mov, theta, shape) - ref)
        loss.backward()
        return float(loss.detach()), delta.grad.numpy().copy()

    res = optimize.minimize(fun, (theta0 - identity).ravel(), jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-10})
    return identity + res.x.reshape(2, 3), res


def register_affine(reference, moving, levels: int = 4, max_iter: int = 200) -> RegistrationResult:
    """Align ``moving`` onto ``reference`` with a 6-parameter affine transform.

    Optimisation starts at the identity on the coarsest pyramid level and is
    refined level by level.  Non-convergence and implausible determinants are
    reported in ``flags`` rather than raised.
    """
    reference = np.asarray(reference, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    if reference.shape != moving.shape or reference.ndim != 2:
        raise ValueError(f"expected two 2-D images of equal shape, got {reference.shape} and {moving.shape}")
    if not (np.all(np.isfinite(reference)) and np.all(np.isfinite(moving))):
        raise ValueError("images contain non-finite values")
    ref_pyr = _pyramid(reference, levels)
    mov_pyr = _pyramid(moving, levels)
    # normalised coordinates make the parameters comparable across levels
    theta = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    flags = []
    initial_mse = float(np.mean((moving - reference) ** 2))
    coarse_mse = None
    for level, (r, m) in enumerate(zip(ref_pyr, mov_pyr)):
        start = float(_offset_free_mse(warp_affine(m, _norm_theta_to_pixel(theta, r.shape)) - r))
        theta, res = _optimize_level(r, m, theta, max_iter)
        if level == 0:
            coarse_mse = (start, float(res.fun))
    transform = _norm_theta_to_pixel(theta, reference.shape)
    aligned = warp_affine(moving, transform)
    mse = float(np.mean((aligned - reference) ** 2))
    converged = True
    if coarse_mse is not None:
        start, end = coarse_mse
        stalled = start > 0 and (start - end) / start < 1e-6
        gross = mse > 0.5 * max(initial_mse, 1e-12) and mse > 1e-6
        if stalled and gross:
            converged = False
            flags.append("non-convergence")
    if not transform.plausible:
        flags.append("implausible-determinant")
    return RegistrationResult(transform, aligned, mse, initial_mse, converged, flags)


def composition_error(recovered: AffineTransform, known_warp: AffineTransform, shape) -> float:
    """Largest displacement (pixels) of ``known_warp ∘ recovered`` from the identity over the grid."""
    rows, cols = shape
    cc, rr = np.meshgrid(np.arange(cols, dtype=np.float64), np.arange(rows, dtype=np.float64))
    pts = np.stack([cc.ravel(), rr.ravel()], axis=1)
    mapped = known_warp.compose(recovered).apply(pts)
    return float(np.max(np.linalg.norm(mapped - pts, axis=1)))
