"""Synthetic motion sequences and point+normal sampling with outlier injection.

Inliers are drawn on the blended level set: pick an ellipsoid with
probability proportional to its surface area, take the correspondence point
of a random direction, then slide along the normal to f(y) = C and settle
the normal onto the level-set gradient by fixed-point iteration.  Noise is
applied in world space afterwards.  Outliers are uniform in a fixed
workspace box and are drawn from their own random stream, so they do not
depend on the pose being sampled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .ellipsoid import Datum, correspond_batch, spd_inverse_factor
from .kinematics import BodyModel, FkResult, model_digest, rotation_about_axis
from .surface import BlendParams

THOMSEN_P = 1.6075


class RootFindFailure(RuntimeError):
    """Could not place a sample on the blended level set."""


@dataclass(frozen=True)
class SampleConfig:
    """Per-frame sampling parameters; ``workspace`` is the (lo, hi) outlier box."""

    observations: int = 500
    point_noise: float = 0.0
    normal_noise: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0
    nu: float = 0.04
    workspace: tuple | None = None

    def __post_init__(self):
        if self.observations < 1:
            raise ValueError("need at least one observation")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier fraction must be in [0, 1)")
        if self.point_noise < 0 or self.normal_noise < 0:
            raise ValueError("noise scales must be nonnegative")


@dataclass
class MotionScript:
    """Ground-truth pose per frame plus the nominal frame rate."""

    poses: np.ndarray
    rate: float
    model_hash: str = ""

    def __post_init__(self):
        self.poses = np.atleast_2d(np.asarray(self.poses, dtype=float))

    def __len__(self):
        return self.poses.shape[0]

    def subsample(self, factor):
        """Every factor-th frame: the same motion at a lower frame rate."""
        return MotionScript(poses=self.poses[::factor].copy(),
                            rate=self.rate / factor, model_hash=self.model_hash)


def ellipsoid_area(e):
    """Thomsen's surface-area approximation."""
    a, b, c = e.semi_axes
    p = THOMSEN_P
    return 4.0 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3.0) ** (1.0 / p)


def rest_workspace(model: BodyModel, margin=0.5):
    """Pose-independent box around the rest configuration."""
    centers = np.array([e.translation for e in model.ellipsoids])
    radius = max(float(e.semi_axes.max()) for e in model.ellipsoids)
    return centers.min(axis=0) - radius - margin, centers.max(axis=0) + radius + margin


def script_workspace(model: BodyModel, script: MotionScript, margin=0.2):
    """Box containing the posed model over every frame of the script, inflated."""
    los, his = [], []
    for pose in script.poses:
        centers = np.array([m.translation + m.rotation @ e.translation
                            for e, m in zip(model.ellipsoids,
                                            FkResult(model, pose).ellipsoid_motions)])
        los.append(centers.min(axis=0))
        his.append(centers.max(axis=0))
    radius = max(float(e.semi_axes.max()) for e in model.ellipsoids)
    lo = np.min(los, axis=0) - radius
    hi = np.max(his, axis=0) + radius
    pad = margin * (hi - lo)
    return lo - pad, hi + pad


# ---------------------------------------------------------------------------
# level-set sampling
# ---------------------------------------------------------------------------

class _BlendField:
    """Batched implicit value / gradient of a fixed set of posed ellipsoids."""

    def __init__(self, ellipsoids, sigma, params: BlendParams):
        self.ellipsoids = ellipsoids
        self.params = params
        w = spd_inverse_factor(sigma)
        self.sigma_inv = w.T @ w

    def value_fast(self, points, normals):
        nu2 = self.params.nu ** 2
        out = np.zeros(points.shape[0])
        for e in self.ellipsoids:
            x, _ = correspond_batch(e, normals)
            r = points - x
            d2 = np.einsum("ij,jk,ik->i", r, self.sigma_inv, r)
            out += np.exp(-d2 / nu2)
        return out

    def gradient(self, points, normals):
        nu2 = self.params.nu ** 2
        grad = np.zeros_like(points)
        for e in self.ellipsoids:
            x, _ = correspond_batch(e, normals)
            r = points - x
            rs = r @ self.sigma_inv
            d2 = np.einsum("ij,ij->i", r, rs)
            grad += np.exp(-d2 / nu2)[:, None] * (-2.0 / nu2) * rs
        return grad


def _batch_level_roots(field: _BlendField, points, normals, span, h0):
    """Per-row offset s with f(points + s*normals) = C, searched within +-span.

    Returns (s, failed_mask).  Brackets by geometric expansion from h0,
    outward direction first, then refines by bisection.
    """
    level = field.params.level
    n_rows = points.shape[0]

    def feval(svals, idx):
        return field.value_fast(points[idx] + svals[:, None] * normals[idx],
                                normals[idx]) - level

    f0 = feval(np.zeros(n_rows), np.arange(n_rows))
    done = np.abs(f0) < 1e-14
    lo = np.zeros(n_rows)
    hi = np.zeros(n_rows)
    have = done.copy()
    for sign in (1.0, -1.0):
        todo = ~have
        if not todo.any():
            break
        prev_s = np.zeros(n_rows)
        prev_f = f0.copy()
        s = h0
        while s <= span * (1 + 1e-9) and todo.any():
            idx = np.nonzero(todo)[0]
            val = feval(np.full(idx.size, sign * s), idx)
            cross = (np.sign(val) != np.sign(prev_f[idx])) | (val == 0.0)
            cidx = idx[cross]
            lo[cidx] = sign * prev_s[cidx]
            hi[cidx] = sign * s
            have[cidx] = True
            todo[cidx] = False
            rest = idx[~cross]
            prev_s[rest] = s
            prev_f[rest] = val[~cross]
            s *= 2.0
    failed = ~have
    s_out = np.zeros(n_rows)
    rows = np.nonzero(have & ~done)[0]
    if rows.size:
        a = lo[rows]
        b = hi[rows]
        fa_sign = np.sign(f0[rows])
        for _ in range(45):
            mid = 0.5 * (a + b)
            fm = feval(mid, rows)
            same = np.sign(fm) == fa_sign
            a = np.where(same, mid, a)
            b = np.where(same, b, mid)
        s_out[rows] = 0.5 * (a + b)
    return s_out, failed


def project_to_level_set(ellipsoids, point, normal, sigma, params: BlendParams):
    """Move ``point`` along ``normal`` onto f(y) = C (normal held fixed)."""
    field = _BlendField(ellipsoids, sigma, params)
    pts = np.atleast_2d(np.asarray(point, dtype=float))
    nrm = np.atleast_2d(np.asarray(normal, dtype=float))
    s, failed = _batch_level_roots(field, pts, nrm, span=5.0 * params.nu,
                                   h0=params.nu / 64.0)
    if failed.any():
        raise RootFindFailure("no level-set crossing within %.3g" % (5.0 * params.nu))
    out = pts + s[:, None] * nrm
    return out[0] if np.asarray(point).ndim == 1 else out


def _rebase_project(field, ellipsoids, picks, normals, idx, span, h0):
    """Correspondence point of each row's ellipsoid, pushed out to the level set.

    Starting on the generating ellipsoid keeps the start inside the level set
    (own contribution is exactly 1 there), so an outward crossing always
    exists; projecting from the previous sample instead can miss the level
    set entirely once the normal has rotated.
    """
    pts = np.empty((idx.size, 3))
    sub = picks[idx]
    for p in np.unique(sub):
        rows = sub == p
        pts[rows] = correspond_batch(ellipsoids[p], normals[idx][rows])[0]
    s, failed = _batch_level_roots(field, pts, normals[idx], span, h0)
    return pts + s[:, None] * normals[idx], failed


def _surface_samples(ellipsoids, areas, rng, sigma, params, count):
    """Exact samples on the blended level set; returns (points, normals, ok_mask).

    The datum normal is the generating direction: it is exactly the outward
    normal of the picked ellipsoid at the base point, and the level-set
    gradient deviates from it only by the (small) influence of the other
    ellipsoids' contributions.
    """
    field = _BlendField(ellipsoids, sigma, params)
    picks = rng.choice(len(ellipsoids), size=count, p=areas)
    nrm = rng.normal(size=(count, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)

    pts, failed = _rebase_project(field, ellipsoids, picks, nrm, np.arange(count),
                                  span=5.0 * params.nu, h0=params.nu / 64.0)
    ok = ~failed
    idx = np.nonzero(ok)[0]
    if idx.size:
        residual = np.abs(field.value_fast(pts[idx], nrm[idx]) - params.level)
        ok[idx[residual > 1e-9]] = False
    return pts, nrm, ok


def _perturb_normals(normals, angles, rng):
    """Rotate each unit normal by its angle about a random perpendicular axis."""
    out = normals.copy()
    for i in range(normals.shape[0]):
        if angles[i] == 0.0:
            continue
        v = rng.normal(size=3)
        axis = v - (v @ out[i]) * out[i]
        an = np.linalg.norm(axis)
        if an < 1e-12:
            continue
        out[i] = rotation_about_axis(axis / an, angles[i]) @ out[i]
        out[i] /= np.linalg.norm(out[i])
    return out


def sample_frame(model: BodyModel, pose, cfg: SampleConfig):
    """Sample one frame; returns (data, labels) with labels 1 = inlier, 0 = outlier.

    Labels are for evaluation only and must never reach the tracker.
    """
    rng_in = np.random.default_rng([cfg.seed, 11])
    rng_out = np.random.default_rng([cfg.seed, 13])

    n_out = int(np.floor(cfg.outlier_fraction * cfg.observations))
    n_in = cfg.observations - n_out

    lo, hi = cfg.workspace if cfg.workspace is not None else rest_workspace(model)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    out_pts = rng_out.uniform(lo, hi, size=(n_out, 3))
    out_nrm = rng_out.normal(size=(n_out, 3))
    if n_out:
        out_nrm /= np.linalg.norm(out_nrm, axis=1, keepdims=True)

    ellipsoids = FkResult(model, pose).posed_ellipsoids()
    areas = np.array([ellipsoid_area(e) for e in ellipsoids])
    areas /= areas.sum()
    sigma = np.eye(3)
    params = BlendParams(nu=cfg.nu)

    points = np.empty((n_in, 3))
    normals = np.empty((n_in, 3))
    filled = 0
    failures = 0
    while filled < n_in:
        want = n_in - filled
        pts, nrm, ok = _surface_samples(ellipsoids, areas, rng_in, sigma, params, want)
        n_bad = int((~ok).sum())
        if n_bad:
            failures += n_bad
            if failures > 100:
                raise RootFindFailure("more than 100 failed surface samples in one frame")
        n_ok = int(ok.sum())
        points[filled:filled + n_ok] = pts[ok]
        normals[filled:filled + n_ok] = nrm[ok]
        filled += n_ok

    if cfg.point_noise > 0:
        points = points + cfg.point_noise * rng_in.normal(size=points.shape)
    if cfg.normal_noise > 0:
        angles = np.abs(rng_in.normal(size=n_in)) * cfg.normal_noise
        normals = _perturb_normals(normals, angles, rng_in)

    data = [Datum(point=points[i], normal=normals[i]) for i in range(n_in)]
    data += [Datum(point=out_pts[k], normal=out_nrm[k]) for k in range(n_out)]
    labels = np.concatenate([np.ones(n_in, dtype=int), np.zeros(n_out, dtype=int)])
    return data, labels


def frame_sample_config(cfg: SampleConfig, frame_index) -> SampleConfig:
    """Derived per-frame configuration (seed xor frame index)."""
    return replace(cfg, seed=cfg.seed ^ frame_index)


# ---------------------------------------------------------------------------
# running sequence
# ---------------------------------------------------------------------------

RUN_STRIDE_PERIOD = 2.0     # seconds per gait cycle
RUN_FORWARD_SPEED = 1.0     # m/s along +y
RUN_AMPLITUDES = {
    "hip": 0.45, "knee": 0.5, "ankle": 0.2,
    "shoulder": 0.35, "elbow": 0.5, "neck": 0.05,
    "bob": 0.03, "lean": 0.04,
}


def make_running_script(model: BodyModel, frames=100, rate=25.0) -> MotionScript:
    """Periodic run: antiphase legs and arms plus forward root motion."""
    dof_index = {j.name: model.joint_dof_start[ji] for ji, j in enumerate(model.joints)}
    amp = RUN_AMPLITUDES
    poses = np.zeros((frames, model.dof_count))
    for k in range(frames):
        t = k / rate
        phi = 2.0 * np.pi * t / RUN_STRIDE_PERIOD
        pose = poses[k]
        pose[0] = amp["lean"] * np.sin(phi)
        pose[4] = RUN_FORWARD_SPEED * t
        pose[5] = amp["bob"] * np.sin(2.0 * phi)
        for side, ph in (("_l", 0.0), ("_r", np.pi)):
            pose[dof_index["hip" + side]] = amp["hip"] * np.sin(phi + ph)
            pose[dof_index["knee" + side]] = -amp["knee"] * (0.5 - 0.5 * np.cos(phi + ph))
            pose[dof_index["ankle" + side]] = amp["ankle"] * np.sin(phi + ph + 0.5)
            pose[dof_index["shoulder" + side]] = -amp["shoulder"] * np.sin(phi + ph)
            sign = 1.0 if side == "_l" else -1.0
            pose[dof_index["elbow" + side]] = sign * amp["elbow"] * (
                0.5 - 0.5 * np.cos(phi + ph + np.pi))
        pose[dof_index["neck"]] = amp["neck"] * np.sin(phi)
    limits = model.angle_limits()
    ang = poses[:, 6:]
    if np.any(ang < limits[:, 0]) or np.any(ang > limits[:, 1]):
        raise ValueError("running script violates joint limits")
    return MotionScript(poses=poses, rate=rate, model_hash=model_digest(model))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_cloud(path, data, labels=None):
    """One datum per line: x y z nx ny nz [label]."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# x y z nx ny nz%s\n" % (" inlier" if labels is not None else ""))
        for i, d in enumerate(data):
            cols = [repr(float(v)) for v in (*d.point, *d.normal)]
            if labels is not None:
                cols.append(str(int(labels[i])))
            fh.write(" ".join(cols) + "\n")


def load_cloud(path):
    """Returns (data, labels-or-None); '#' starts a comment."""
    data, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            cols = line.split()
            if len(cols) not in (6, 7):
                raise ValueError("cloud line needs 6 or 7 columns, got %d" % len(cols))
            vals = [float(c) for c in cols[:6]]
            data.append(Datum(point=vals[:3], normal=vals[3:]))
            if len(cols) == 7:
                labels.append(int(cols[6]))
    if labels and len(labels) != len(data):
        raise ValueError("labels present on only some lines")
    return data, (np.asarray(labels) if labels else None)


def save_script(path, script: MotionScript):
    doc = {"rate": script.rate, "model_hash": script.model_hash,
           "poses": [[float(v) for v in row] for row in script.poses]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_script(path) -> MotionScript:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return MotionScript(poses=np.asarray(doc["poses"], dtype=float),
                        rate=float(doc["rate"]), model_hash=doc.get("model_hash", ""))
