"""Blended articulated implicit surface and the observation-to-surface distance.

Each posed ellipsoid contributes exp(-d_M^2 / nu^2) at an observation, where
d_M is the Mahalanobis distance to the normal-constrained correspondence
point.  The surface is the level set sum_p f_p(y) = C, and the distance from
a set of observations to the surface is the soft-min

    F = -nu^2 * sum_i log sum_p exp(-d_ip^2 / nu^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ellipsoid import Datum, correspond_batch, spd_inverse_factor


@dataclass(frozen=True)
class BlendParams:
    """Blending bandwidth nu (shared by all ellipsoids) and surface level C."""

    nu: float = 0.1
    level: float = 1.0

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")


def stack_data(data):
    """List of Datum -> (points (I, 3), normals (I, 3))."""
    pts = np.array([d.point for d in data], dtype=float).reshape(-1, 3)
    nrm = np.array([d.normal for d in data], dtype=float).reshape(-1, 3)
    return pts, nrm


def sq_distances(ellipsoids, points, normals, sigma):
    """Squared Mahalanobis distances d_ip^2, shape (I, P)."""
    w = spd_inverse_factor(sigma)
    d2 = np.empty((points.shape[0], len(ellipsoids)))
    for p, e in enumerate(ellipsoids):
        x, _ = correspond_batch(e, normals)
        r = (points - x) @ w.T
        d2[:, p] = np.einsum("ij,ij->i", r, r)
    return d2


def contribution(e, d: Datum, sigma, params: BlendParams) -> float:
    """exp(-d_M^2 / nu^2) in (0, 1]; equals 1 exactly at the correspondence point."""
    d2 = sq_distances([e], d.point[None, :], d.normal[None, :], sigma)[0, 0]
    return float(np.exp(-d2 / params.nu ** 2))


def implicit_value(ellipsoids, d: Datum, sigma, params: BlendParams) -> float:
    """Sum of contributions of all posed ellipsoids at one datum."""
    if not ellipsoids:
        raise ValueError("need at least one ellipsoid")
    d2 = sq_distances(ellipsoids, d.point[None, :], d.normal[None, :], sigma)[0]
    return float(np.exp(-d2 / params.nu ** 2).sum())


def implicit_values(ellipsoids, points, normals, sigma, params: BlendParams):
    """Vectorized implicit function over (I, 3) points/normals."""
    d2 = sq_distances(ellipsoids, points, normals, sigma)
    return np.exp(-d2 / params.nu ** 2).sum(axis=1)


def implicit_gradient(ellipsoids, point, normal, sigma, params: BlendParams):
    """Gradient of the implicit function with respect to the point (normal held fixed)."""
    point = np.asarray(point, dtype=float)
    normal = np.asarray(normal, dtype=float)
    w = spd_inverse_factor(sigma)
    sigma_inv = w.T @ w
    nu2 = params.nu ** 2
    grad = np.zeros(3)
    for e in ellipsoids:
        x, _ = correspond_batch(e, normal[None, :])
        r = point - x[0]
        d2 = float(r @ sigma_inv @ r)
        grad += np.exp(-d2 / nu2) * (-2.0 / nu2) * (sigma_inv @ r)
    return grad


def log_blend(d2, nu):
    """log sum_p exp(-d_ip^2 / nu^2) per row, max-shifted so it never underflows."""
    z = -np.asarray(d2, dtype=float) / nu ** 2
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def surface_distance(model, pose, data, sigma, params: BlendParams) -> float:
    """F = -nu^2 sum_i log sum_p exp(-d_ip^2/nu^2) for the posed model."""
    from .kinematics import FkResult

    if not data:
        raise ValueError("need at least one datum")
    points, normals = stack_data(data)
    ellipsoids = FkResult(model, pose).posed_ellipsoids()
    d2 = sq_distances(ellipsoids, points, normals, sigma)
    return float(-params.nu ** 2 * log_blend(d2, params.nu).sum())
