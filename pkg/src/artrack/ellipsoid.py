"""Single-ellipsoid geometry: normal-constrained correspondence and distances.

An ellipsoid is parameterized by its semi-axes (a, b, c), a rotation R and a
center t.  Its implicit form is (y - t)^T R D R^T (y - t) = 1 with
D = diag(a^-2, b^-2, c^-2), equivalently Y^T Q Y = 0 in homogeneous
coordinates with

    Q = [[ Qbar,  q  ],          Qbar = R D R^T
         [ q^T,  q44 ]],         q    = -Qbar t,   q44 = t^T Qbar t - 1.

Given an observed unit normal n there is exactly one surface point x whose
outward gradient direction is parallel to n (with positive dot product):

    x = lam * R D^-1 R^T n + t,    lam = (n^T R D^-1 R^T n)^(-1/2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateNormal(ValueError):
    """Normal vector too close to zero to orient a correspondence."""


class SingularCovariance(ValueError):
    """Covariance matrix not symmetric positive-definite at working precision."""


NORMAL_INGEST_TOL = 1e-6
COND_THRESHOLD = 1e-12


def _vec3(v, name):
    a = np.asarray(v, dtype=float)
    if a.shape != (3,):
        raise ValueError("%s must be a 3-vector, got shape %s" % (name, a.shape))
    return a


def unit_normal(n):
    """Validate and re-normalize an observed normal.

    Vectors within NORMAL_INGEST_TOL of unit length are re-normalized (text
    round-trip tolerance); anything farther off is rejected as malformed,
    except that near-zero vectors raise DegenerateNormal.
    """
    n = _vec3(n, "normal")
    nn = float(np.linalg.norm(n))
    if nn < 1e-9:
        raise DegenerateNormal("cannot normalize vector with norm %.3g" % nn)
    if abs(nn - 1.0) > NORMAL_INGEST_TOL:
        raise ValueError("normal has norm %.9g, too far from unit length" % nn)
    return n / nn


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid with semi-axes ``semi_axes = (a, b, c)``, pose (R, t).

    The semi-axes are the lengths along the local x/y/z directions; the
    rotation maps local into world coordinates.  All lengths in meters.
    """

    semi_axes: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        axes = np.asarray(self.semi_axes, dtype=float).reshape(3).copy()
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3).copy()
        tr = _vec3(self.translation, "translation").copy()
        if not np.all(axes > 0.0):
            raise ValueError("semi-axes must be positive, got %s" % axes)
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(rot) < 0.0:
            raise ValueError("rotation must be proper (det = +1)")
        for arr in (axes, rot, tr):
            arr.flags.writeable = False
        object.__setattr__(self, "semi_axes", axes)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    # -- assembled quadric pieces (computed on demand, never stored) --

    @property
    def shape_matrix(self):
        """D = diag(a^-2, b^-2, c^-2)."""
        return np.diag(self.semi_axes ** -2.0)

    @property
    def q_bar(self):
        """Qbar = R D R^T."""
        r = self.rotation
        return r @ self.shape_matrix @ r.T

    @property
    def q_vec(self):
        """q = -Qbar t."""
        return -self.q_bar @ self.translation

    @property
    def q44(self):
        t = self.translation
        return float(t @ self.q_bar @ t) - 1.0

    @property
    def q_matrix(self):
        """Full 4x4 symmetric quadric matrix Q."""
        q = np.empty((4, 4))
        q[:3, :3] = self.q_bar
        q[:3, 3] = self.q_vec
        q[3, :3] = self.q_vec
        q[3, 3] = self.q44
        return q

    @property
    def inv_shape_world(self):
        """R D^-1 R^T, the matrix mapping a unit normal to its surface point."""
        r = self.rotation
        return (r * self.semi_axes ** 2) @ r.T


@dataclass(frozen=True)
class Datum:
    """One observation: a 3-D point and the unit surface normal measured there."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        p = _vec3(self.point, "point").copy()
        n = unit_normal(self.normal).copy()
        p.flags.writeable = False
        n.flags.writeable = False
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "normal", n)


@dataclass(frozen=True)
class Correspondence:
    """Surface point x whose (unnormalized) outward normal p aligns with the datum normal."""

    surface_point: np.ndarray
    surface_normal: np.ndarray
    scale: float


def correspond(e: Ellipsoid, n) -> Correspondence:
    """Closed-form surface point of ``e`` whose outward normal is parallel to n.

    Returns the unique solution with positive scale (p^T n > 0).
    """
    n = np.asarray(n, dtype=float)
    nn = float(np.linalg.norm(n))
    if nn < 1e-9:
        raise DegenerateNormal("cannot normalize vector with norm %.3g" % nn)
    n = n / nn
    binv = e.inv_shape_world
    bn = binv @ n
    lam = float(n @ bn) ** -0.5
    x = lam * bn + e.translation
    p = e.q_bar @ x + e.q_vec
    return Correspondence(surface_point=x, surface_normal=p, scale=lam)


def correspond_batch(e: Ellipsoid, normals):
    """Vectorized correspondence for an (N, 3) array of unit normals.

    Returns (points (N, 3), scales (N,)).
    """
    normals = np.asarray(normals, dtype=float)
    bn = normals @ e.inv_shape_world.T
    lam = np.einsum("ij,ij->i", normals, bn) ** -0.5
    return lam[:, None] * bn + e.translation, lam


def spd_inverse_factor(sigma):
    """Lower-triangular W with W^T W = sigma^-1, i.e. W = L^-1 for sigma = L L^T.

    Raises SingularCovariance when sigma is asymmetric, indefinite, or
    conditioned worse than COND_THRESHOLD.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (3, 3) or np.abs(sigma - sigma.T).max() > 1e-9 * max(1.0, np.abs(sigma).max()):
        raise SingularCovariance("covariance must be a symmetric 3x3 matrix")
    w = np.linalg.eigvalsh(sigma)
    if w[0] <= 0.0 or w[0] < COND_THRESHOLD * w[-1]:
        raise SingularCovariance("covariance eigenvalues %s not usable" % w)
    lower = np.linalg.cholesky(sigma)
    return np.linalg.inv(lower)


def datum_distance(e: Ellipsoid, d: Datum, sigma) -> float:
    """Squared Mahalanobis distance from the datum point to its correspondence on ``e``."""
    w = spd_inverse_factor(sigma)
    x = correspond(e, d.normal).surface_point
    r = w @ (d.point - x)
    return float(r @ r)


def algebraic_distance(e: Ellipsoid, y) -> float:
    """Algebraic distance Y^T Q Y: -1 at the center, 0 on the surface, > 0 outside."""
    m = _vec3(y, "point") - e.translation
    return float(m @ e.q_bar @ m) - 1.0
