"""Robust EM registration of the articulated surface to points and normals.

One frame alternates:
  E step   posterior responsibilities over the P ellipsoids plus a uniform
           outlier class of density 1/V,
  M step   damped Gauss-Newton decrease of the responsibility-weighted
           Mahalanobis objective over the pose, then closed-form updates of
           the shared covariance and the mixing weights,
until the negative log-likelihood stalls.  The pose step only improves its
objective (generalized EM), so the likelihood trace is non-increasing.

The ``algebraic`` metric replaces the point/normal correspondence distance
with the scaled algebraic distance of each ellipsoid (points-only baseline);
everything else in the loop is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .ellipsoid import SingularCovariance, spd_inverse_factor
from .kinematics import (BodyModel, FkResult, correspondence_jacobian_cols,
                         cross_rows)
from .surface import stack_data

LOG_2PI = float(np.log(2.0 * np.pi))
WEIGHT_FLOOR = 1e-13


class NonFiniteObjective(RuntimeError):
    """Residuals became non-finite during the pose minimization."""


@dataclass
class MixtureParams:
    """Mixing weights (last entry = outlier class), shared covariance, working volume."""

    priors: np.ndarray
    sigma: np.ndarray
    volume: float

    def __post_init__(self):
        self.priors = np.asarray(self.priors, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if abs(self.priors.sum() - 1.0) > 1e-9 or np.any(self.priors < -1e-15):
            raise ValueError("priors must be nonnegative and sum to 1")
        if not self.volume > 0:
            raise ValueError("volume must be positive")


@dataclass
class MStepSettings:
    max_iterations: int = 10
    damping_init: float = 1e-3
    gradient_tol: float = 1e-8
    improvement_tol: float = 1e-4    # stop polishing once a step gains this little


@dataclass
class TrackerConfig:
    max_em_iterations: int = 50
    em_tolerance_per_datum: float = 1e-5
    pose_stall_tol: float = 1e-6
    m_step: MStepSettings = field(default_factory=MStepSettings)
    nu: float = 0.1
    volume: float | None = None
    sigma_init: float = 0.05
    limit_penalty_weight: float = 10.0
    metric: str = "datum"
    use_outlier_class: bool = True

    def __post_init__(self):
        if self.metric not in ("datum", "algebraic"):
            raise ValueError("metric must be 'datum' or 'algebraic'")
        for v in (self.em_tolerance_per_datum, self.sigma_init):
            if not v > 0:
                raise ValueError("tolerances must be positive")

    @staticmethod
    def from_dict(doc):
        doc = dict(doc)
        ms = doc.pop("m_step", None)
        cfg = TrackerConfig(**doc)
        if ms:
            cfg.m_step = MStepSettings(**ms)
        return cfg

    def to_dict(self):
        return asdict(self)


@dataclass
class FrameResult:
    """Outcome of one frame: pose, mixture state, responsibilities, NLL trace."""

    pose: np.ndarray
    mixture: MixtureParams
    responsibilities: np.ndarray
    nll_trace: list
    iterations: int
    converged: bool

    def to_dict(self):
        return {
            "pose": [float(v) for v in self.pose],
            "priors": [float(v) for v in self.mixture.priors],
            "sigma": [float(v) for v in self.mixture.sigma.ravel()],
            "volume": float(self.mixture.volume),
            "nll_trace": [float(v) for v in self.nll_trace],
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


def default_volume(points):
    """Volume of the data bounding box with every side inflated by 20%."""
    ext = np.maximum(points.max(axis=0) - points.min(axis=0), 1e-3)
    return float(np.prod(1.2 * ext))


def initial_mixture(num_ellipsoids, config: TrackerConfig, points) -> MixtureParams:
    p = num_ellipsoids
    priors = np.zeros(p + 1)
    if config.use_outlier_class:
        priors[:] = 1.0 / (p + 1)
    else:
        priors[:p] = 1.0 / p
    vol = config.volume if config.volume is not None else default_volume(points)
    return MixtureParams(priors=priors, sigma=config.sigma_init ** 2 * np.eye(3), volume=vol)


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

def _algebraic_scales(model: BodyModel):
    """Per-ellipsoid factor converting the algebraic distance to meters.

    Near the side of an ellipsoid of minor semi-axis b the algebraic value
    grows as 2*delta/b per meter of offset, so q * b/2 approximates the
    offset; the baseline divides by the mean variance of Sigma.
    """
    return np.array([e.semi_axes[1] * 0.5 for e in model.ellipsoids])


def _sq_dist_matrix(fk: FkResult, points, normals, sigma, metric, scales=None):
    """(I, P) squared distances in the active metric."""
    model = fk.model
    n_ell = len(model.ellipsoids)
    d2 = np.empty((points.shape[0], n_ell))
    if metric == "datum":
        w = spd_inverse_factor(sigma)
        for p in range(n_ell):
            r = (points - fk.correspond_points(p, normals)) @ w.T
            d2[:, p] = np.einsum("ij,ij->i", r, r)
    else:
        var = float(np.trace(sigma)) / 3.0
        if var <= 0:
            raise SingularCovariance("nonpositive variance in algebraic metric")
        for p in range(n_ell):
            rot, t_w, axes = fk.world_frame(p)
            mloc = (points - t_w) @ rot
            q = (mloc ** 2 / axes ** 2).sum(axis=1) - 1.0
            d2[:, p] = (q * scales[p]) ** 2 / var
    return d2


def _log_joint(model, pose, points, normals, mix: MixtureParams, metric):
    """log(pi_p * density_ip) for all components, shape (I, P+1)."""
    fk = FkResult(model, pose)
    scales = _algebraic_scales(model) if metric == "algebraic" else None
    d2 = _sq_dist_matrix(fk, points, normals, mix.sigma, metric, scales)
    if metric == "datum":
        sign, logdet = np.linalg.slogdet(mix.sigma)
        if sign <= 0:
            raise SingularCovariance("covariance has nonpositive determinant")
        log_norm = -0.5 * logdet - 1.5 * LOG_2PI
    else:
        var = float(np.trace(mix.sigma)) / 3.0
        log_norm = -1.5 * (LOG_2PI + np.log(var))
    out = np.empty((points.shape[0], d2.shape[1] + 1))
    with np.errstate(divide="ignore"):
        log_pi = np.log(mix.priors)
    out[:, :-1] = log_pi[:-1] + log_norm - 0.5 * d2
    out[:, -1] = log_pi[-1] - np.log(mix.volume)
    return out


def _nll_from_log_joint(lj):
    m = lj.max(axis=1)
    return float(-(m + np.log(np.exp(lj - m[:, None]).sum(axis=1))).sum())


def _resp_from_log_joint(lj):
    m = lj.max(axis=1)
    t = np.exp(lj - m[:, None])
    t /= t.sum(axis=1, keepdims=True)
    return t


def neg_log_likelihood(model, pose, data, mix: MixtureParams, nu=None, metric="datum"):
    """Mixture negative log-likelihood of the data (constant P(n_i) terms dropped).

    The blend bandwidth does not enter the likelihood; ``nu`` is accepted for
    call-site symmetry with the surface distance and ignored.
    """
    points, normals = stack_data(data)
    return _nll_from_log_joint(_log_joint(model, pose, points, normals, mix, metric))


def e_step(model, pose, data, mix: MixtureParams, nu=None, metric="datum"):
    """Posterior responsibilities, shape (I, P+1); rows sum to one."""
    points, normals = stack_data(data)
    return _resp_from_log_joint(_log_joint(model, pose, points, normals, mix, metric))


# ---------------------------------------------------------------------------
# M step: pose
# ---------------------------------------------------------------------------

class _PoseProblem:
    """Responsibility-weighted least squares over the pose.

    Rows with responsibility below WEIGHT_FLOOR are dropped; they change the
    objective by far less than the generalized-EM slack.  Per-ellipsoid data
    slices are cached up front; Jacobians are assembled only over each
    ellipsoid's chain dofs.
    """

    def __init__(self, model, points, normals, t, sigma, config: TrackerConfig):
        self.model = model
        self.config = config
        self.metric = config.metric
        if self.metric == "datum":
            self.w = spd_inverse_factor(sigma)
            self.scales = None
            self.var = None
        else:
            self.w = None
            self.scales = _algebraic_scales(model)
            self.var = float(np.trace(sigma)) / 3.0
        self.active = []
        for p in range(len(model.ellipsoids)):
            rows = np.nonzero(t[:, p] > WEIGHT_FLOOR)[0]
            if not rows.size:
                continue
            sw = np.sqrt(t[rows, p])
            cols = model.chain_dof_indices(model.ellipsoid_part[p])
            self.active.append((p, points[rows], normals[rows], sw, cols))
        limits = model.angle_limits()
        self.limit_lo = limits[:, 0]
        self.limit_hi = limits[:, 1]
        self.pen_w = config.limit_penalty_weight

    def _limit_excess(self, pose):
        ang = pose[6:]
        return np.maximum(0.0, ang - self.limit_hi) + np.minimum(0.0, ang - self.limit_lo)

    def _residual(self, fk, p, pts, nrm, sw):
        if self.metric == "datum":
            return (pts - fk.correspond_points(p, nrm)) @ self.w.T * sw[:, None]
        rot, t_w, axes = fk.world_frame(p)
        mloc = (pts - t_w) @ rot
        q = (mloc ** 2 / axes ** 2).sum(axis=1) - 1.0
        return (q * self.scales[p] / np.sqrt(self.var) * sw)[:, None]

    def cost(self, pose):
        fk = FkResult(self.model, pose)
        total = 0.0
        for p, pts, nrm, sw, _ in self.active:
            r = self._residual(fk, p, pts, nrm, sw)
            total += float(r.ravel() @ r.ravel())
        h = self._limit_excess(pose)
        total += self.pen_w * float(h @ h)
        if not np.isfinite(total):
            raise NonFiniteObjective("pose objective is not finite")
        return 0.5 * total

    def normal_equations(self, pose):
        """cost, gradient and Gauss-Newton Hessian at ``pose``."""
        fk = FkResult(self.model, pose)
        dof = self.model.dof_count
        h = np.zeros((dof, dof))
        g = np.zeros(dof)
        total = 0.0
        for p, pts, nrm, sw, cols in self.active:
            if self.metric == "datum":
                r = self._residual(fk, p, pts, nrm, sw)
                jx = correspondence_jacobian_cols(fk, p, nrm, cols)
                j = -np.einsum("ab,nbk->nak", self.w, jx) * sw[:, None, None]
                h[np.ix_(cols, cols)] += np.einsum("nak,nal->kl", j, j)
                g[cols] += np.einsum("nak,na->k", j, r)
            else:
                r, j = self._algebraic_block(fk, p, pts, sw, cols)
                h[np.ix_(cols, cols)] += j.T @ j
                g[cols] += j.T @ r[:, 0]
            total += float(r.ravel() @ r.ravel())
        hexc = self._limit_excess(pose)
        total += self.pen_w * float(hexc @ hexc)
        for k in np.nonzero(hexc)[0]:
            g[6 + k] += self.pen_w * hexc[k]
            h[6 + k, 6 + k] += self.pen_w
        if not np.isfinite(total):
            raise NonFiniteObjective("pose objective is not finite")
        return 0.5 * total, g, h

    def _algebraic_block(self, fk, p, pts, sw, cols):
        rot, t_w, axes = fk.world_frame(p)
        mloc = (pts - t_w) @ rot
        q = (mloc ** 2 / axes ** 2).sum(axis=1) - 1.0
        gvec = (mloc / axes ** 2) @ rot.T                     # Qbar (y - t)
        scale = self.scales[p] / np.sqrt(self.var)
        r = (q * scale * sw)[:, None]
        j = np.empty((pts.shape[0], len(cols)))
        for i, k in enumerate(cols):
            if not fk.rotational[k]:
                j[:, i] = -2.0 * gvec[:, k - 3]
                continue
            u = fk.dof_axes[k]
            c = fk.dof_anchors[k]
            j[:, i] = -2.0 * np.einsum("ij,ij->i", gvec, cross_rows(u, pts - c))
        return r, j * (scale * sw)[:, None]


def m_step_pose(model, pose_init, data, t, sigma, config: TrackerConfig):
    """Levenberg-Marquardt decrease of the weighted objective; never worse than the start."""
    points, normals = stack_data(data)
    return _m_step_pose_arrays(model, np.asarray(pose_init, dtype=float),
                               points, normals, t, sigma, config)


def _m_step_pose_arrays(model, pose, points, normals, t, sigma, config):
    prob = _PoseProblem(model, points, normals, t, sigma, config)
    settings = config.m_step
    pose = model.check_pose(pose).copy()
    cost, g, h = prob.normal_equations(pose)
    if np.abs(g).max() < settings.gradient_tol:
        return pose
    lam = settings.damping_init * max(float(np.diag(h).max()), 1e-12)
    ridge = 1e-14 * max(float(np.diag(h).max()), 1.0)
    for _ in range(settings.max_iterations):
        damped = h + lam * np.diag(np.diag(h)) + ridge * np.eye(h.shape[0])
        try:
            step = np.linalg.solve(damped, -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        if not np.all(np.isfinite(step)):
            raise NonFiniteObjective("non-finite Gauss-Newton step")
        trial = pose + step
        try:
            trial_cost = prob.cost(trial)
        except NonFiniteObjective:
            lam *= 10.0
            continue
        if trial_cost < cost:
            gained = cost - trial_cost
            pose = trial
            lam = max(lam / 3.0, 1e-15)
            if gained < settings.improvement_tol * max(trial_cost, 1.0):
                cost = trial_cost
                break
            cost, g, h = prob.normal_equations(pose)
            if np.abs(g).max() < settings.gradient_tol or np.linalg.norm(step) < 1e-14:
                break
        else:
            lam *= 4.0
            if lam > 1e12:
                break
    return pose


def objective_gradient(model, pose, data, t, sigma, config: TrackerConfig):
    """Gradient of the weighted M-step objective (for finite-difference checks)."""
    points, normals = stack_data(data)
    prob = _PoseProblem(model, points, normals, t, sigma, config)
    _, g, _ = prob.normal_equations(model.check_pose(pose))
    return g


def objective_value(model, pose, data, t, sigma, config: TrackerConfig):
    points, normals = stack_data(data)
    prob = _PoseProblem(model, points, normals, t, sigma, config)
    return prob.cost(model.check_pose(pose))


# ---------------------------------------------------------------------------
# M step: mixture
# ---------------------------------------------------------------------------

def regularize_spd(sigma):
    """Floor the spectrum at eps = max(1e-8 * trace/3, 1e-12) by adding eps*I."""
    sigma = 0.5 * (sigma + sigma.T)
    eps = max(1e-8 * float(np.trace(sigma)) / 3.0, 1e-12)
    if np.linalg.eigvalsh(sigma)[0] < eps:
        sigma = sigma + eps * np.eye(3)
    return sigma


def m_step_mixture(model, pose_new, data, t, volume, metric="datum",
                   prev_sigma=None) -> MixtureParams:
    """Closed-form updates of priors and the shared covariance at the new pose."""
    points, normals = stack_data(data)
    return _m_step_mixture_arrays(model, pose_new, points, normals, t, volume,
                                  metric, prev_sigma)


def _m_step_mixture_arrays(model, pose, points, normals, t, volume, metric, prev_sigma):
    priors = t.mean(axis=0)
    priors = priors / priors.sum()
    inlier_mass = float(t[:, :-1].sum())
    if inlier_mass <= 0.0:
        sigma = prev_sigma if prev_sigma is not None else np.eye(3)
        return MixtureParams(priors=priors, sigma=regularize_spd(np.asarray(sigma)),
                             volume=volume)
    fk = FkResult(model, pose)
    if metric == "datum":
        scatter = np.zeros((3, 3))
        for p in range(len(model.ellipsoids)):
            w = t[:, p]
            rows = np.nonzero(w > WEIGHT_FLOOR)[0]
            if not rows.size:
                continue
            r = points[rows] - fk.correspond_points(p, normals[rows])
            scatter += (r * w[rows, None]).T @ r
        sigma = regularize_spd(scatter / inlier_mass)
    else:
        scales = _algebraic_scales(model)
        acc = 0.0
        for p in range(len(model.ellipsoids)):
            w = t[:, p]
            rows = np.nonzero(w > WEIGHT_FLOOR)[0]
            if not rows.size:
                continue
            rot, t_w, axes = fk.world_frame(p)
            mloc = (points[rows] - t_w) @ rot
            q = (mloc ** 2 / axes ** 2).sum(axis=1) - 1.0
            acc += float(w[rows] @ (q * scales[p]) ** 2)
        var = acc / (3.0 * inlier_mass)
        sigma = regularize_spd(var * np.eye(3))
    return MixtureParams(priors=priors, sigma=sigma, volume=volume)


# ---------------------------------------------------------------------------
# frame fit and sequence tracking
# ---------------------------------------------------------------------------

def fit_frame(model, pose_init, data, config: TrackerConfig) -> FrameResult:
    """Run EM on one frame until the likelihood stalls or the iteration cap."""
    if not len(data):
        raise ValueError("need at least one datum")
    points, normals = stack_data(data)
    pose = model.check_pose(pose_init).copy()
    mix = initial_mixture(len(model.ellipsoids), config, points)
    tol = config.em_tolerance_per_datum * points.shape[0]

    lj = _log_joint(model, pose, points, normals, mix, config.metric)
    trace = [_nll_from_log_joint(lj)]
    converged = False
    iterations = 0
    for _ in range(config.max_em_iterations):
        iterations += 1
        t = _resp_from_log_joint(lj)
        prev_pose = pose
        pose = _m_step_pose_arrays(model, pose, points, normals, t, mix.sigma, config)
        mix = _m_step_mixture_arrays(model, pose, points, normals, t, mix.volume,
                                     config.metric, prev_sigma=mix.sigma)
        lj = _log_joint(model, pose, points, normals, mix, config.metric)
        trace.append(_nll_from_log_joint(lj))
        # likelihood stall, or the pose itself has stopped moving (the
        # covariance housekeeping can keep shaving the NLL long after the
        # pose estimate is settled)
        if (abs(trace[-1] - trace[-2]) < tol
                or np.abs(pose - prev_pose).max() < config.pose_stall_tol):
            converged = True
            break
    return FrameResult(pose=pose, mixture=mix,
                       responsibilities=_resp_from_log_joint(lj),
                       nll_trace=trace, iterations=iterations, converged=converged)


def track_sequence(model, pose0, frames, config: TrackerConfig):
    """Track frame to frame; each frame starts from the previous estimate.

    A frame whose fit raises a numerical error is recorded as non-converged
    with the seed pose, and the next frame starts from the last finite pose.
    """
    if not len(frames):
        raise ValueError("need at least one frame")
    seed = model.check_pose(pose0).copy()
    results = []
    for data in frames:
        try:
            res = fit_frame(model, seed, data, config)
        except (NonFiniteObjective, SingularCovariance, np.linalg.LinAlgError):
            pts, _ = stack_data(data)
            res = FrameResult(pose=seed.copy(),
                              mixture=initial_mixture(len(model.ellipsoids), config, pts),
                              responsibilities=np.zeros((pts.shape[0],
                                                         len(model.ellipsoids) + 1)),
                              nll_trace=[], iterations=0, converged=False)
        if np.all(np.isfinite(res.pose)):
            seed = np.asarray(res.pose, dtype=float)
        results.append(res)
    return results
