"""Experiment runner: simulate, track, evaluate, and the study sweeps.

Sweeps orchestrate simulate -> track -> eval over (swept value, metric,
seed) cells and report the mean angle error in radians over the joint
angles only (free-motion parameters excluded).  For efficiency each seed
simulates its base sequence once: noise levels rescale the same recorded
noise draws, observation counts take prefixes of the largest cell, and
frame-rate factors subsample the same captured frames.  Reports are written
as CSV plus a rendered PNG figure next to each CSV.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .ellipsoid import Datum  # noqa: E402
from .em import TrackerConfig, track_sequence  # noqa: E402
from .kinematics import BodyModel, model_from_dict, model_to_dict  # noqa: E402
from .synth import (MotionScript, SampleConfig, frame_sample_config,  # noqa: E402
                    make_running_script, sample_frame, script_workspace)

NOISE_POINT_BASE = 0.01   # meters of point noise per unit noise level
NOISE_ANGLE_BASE = 0.08   # radians of normal noise per unit noise level

SWEEP_DEFAULTS = {
    "observations": (50, 150, 250, 350, 450, 550),
    "noise": (0.0, 1.0, 2.0),
    "framerate": (1, 2, 4),
}


class FrameCountMismatch(ValueError):
    """Trajectory and ground truth disagree on the number of frames."""


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def angle_error_matrix(model: BodyModel, truth_poses, est_poses):
    """(frames, n_angles) absolute joint-angle errors; free motion excluded."""
    truth = np.atleast_2d(np.asarray(truth_poses, dtype=float))
    est = np.atleast_2d(np.asarray(est_poses, dtype=float))
    if truth.shape != est.shape:
        raise FrameCountMismatch(
            "truth %s vs estimate %s" % (truth.shape, est.shape))
    if truth.shape[1] != model.dof_count:
        raise FrameCountMismatch("pose width %d, model wants %d"
                                 % (truth.shape[1], model.dof_count))
    return np.abs(est - truth)[:, 6:]


def mean_angle_error(model: BodyModel, truth_poses, est_poses) -> float:
    return float(angle_error_matrix(model, truth_poses, est_poses).mean())


# ---------------------------------------------------------------------------
# sequence simulation and tracking
# ---------------------------------------------------------------------------

def simulate_sequence(model: BodyModel, script: MotionScript, cfg: SampleConfig):
    """Per-frame (data, labels) with per-frame derived seeds."""
    out = []
    for k, pose in enumerate(script.poses):
        out.append(sample_frame(model, pose, frame_sample_config(cfg, k)))
    return out


def track_frames(model, frames_data, script_poses, config: TrackerConfig,
                 init="previous"):
    """Track a sequence with the chosen initialization policy.

    previous: frame 0 starts at the script pose (or zeros without a script),
    later frames at the previous estimate.  script: every frame starts at its
    script pose.  identity: every frame starts at the zero pose.
    """
    if init == "previous":
        pose0 = (script_poses[0] if script_poses is not None
                 else np.zeros(model.dof_count))
        return track_sequence(model, pose0, frames_data, config)
    from .em import fit_frame
    results = []
    for k, data in enumerate(frames_data):
        if init == "script":
            if script_poses is None:
                raise ValueError("init=script needs a ground-truth script")
            pose0 = script_poses[k]
        elif init == "identity":
            pose0 = np.zeros(model.dof_count)
        else:
            raise ValueError("unknown init policy %r" % init)
        results.append(fit_frame(model, pose0, data, config))
    return results


def tracked_poses(results):
    return np.array([r.pose for r in results])


# ---------------------------------------------------------------------------
# sweep cells
# ---------------------------------------------------------------------------

def noise_config(base: SampleConfig, level) -> SampleConfig:
    return replace(base, point_noise=NOISE_POINT_BASE * level,
                   normal_noise=NOISE_ANGLE_BASE * level)


def _seed_cells(args):
    """All (value, metric) cells of one seed; returns [(value, metric, error)]."""
    (kind, model_doc, values, metrics, seed, sample_doc, tracker_doc,
     frames, rate) = args
    model = model_from_dict(model_doc)
    base = SampleConfig(**sample_doc)
    tracker = TrackerConfig.from_dict(tracker_doc)
    script = make_running_script(model, frames=frames, rate=rate)
    base = replace(base, seed=seed, workspace=script_workspace(model, script))

    rows = []
    if kind == "observations":
        top = replace(base, observations=int(max(values)))
        sim = simulate_sequence(model, script, top)
        for value in values:
            n_out = int(np.floor(top.outlier_fraction * value))
            n_in = int(value) - n_out
            cells = []
            for data, labels in sim:
                tot_in = int(labels.sum())
                keep = list(data[:n_in]) + list(data[tot_in:tot_in + n_out])
                cells.append(keep)
            rows += _track_cells(model, script.poses, cells, tracker, metrics, value)
    elif kind == "noise":
        family = simulate_noise_family(model, script, base, values)
        for value, sim in zip(values, family):
            cells = [data for data, _ in sim]
            rows += _track_cells(model, script.poses, cells, tracker, metrics, value)
    elif kind == "framerate":
        sim = simulate_sequence(model, script, base)
        for value in values:
            step = int(value)
            cells = [data for data, _ in sim[::step]]
            rows += _track_cells(model, script.poses[::step], cells, tracker,
                                 metrics, value)
    else:
        raise ValueError("unknown sweep kind %r" % kind)
    return [(value, metric, seed, err) for value, metric, err in rows]


def _track_cells(model, truth_poses, frames_data, tracker, metrics, value):
    out = []
    for metric in metrics:
        cfg = replace(tracker, metric=metric)
        results = track_frames(model, frames_data, truth_poses, cfg, init="previous")
        out.append((value, metric, mean_angle_error(model, truth_poses,
                                                    tracked_poses(results))))
    return out


def simulate_noise_family(model, script, base: SampleConfig, levels):
    """One simulation per frame, re-noised at each level with identical draws.

    Returns a list parallel to ``levels``; each entry is a per-frame list of
    (data, labels) exactly equal to simulating at that level directly.
    """
    from .kinematics import FkResult
    from .surface import BlendParams
    from .synth import (RootFindFailure, _perturb_normals, _surface_samples,
                        ellipsoid_area, rest_workspace)

    out = [[] for _ in levels]
    for k, pose in enumerate(script.poses):
        cfg = frame_sample_config(base, k)
        rng_in = np.random.default_rng([cfg.seed, 11])
        rng_out = np.random.default_rng([cfg.seed, 13])
        n_out = int(np.floor(cfg.outlier_fraction * cfg.observations))
        n_in = cfg.observations - n_out
        lo, hi = cfg.workspace if cfg.workspace is not None else rest_workspace(model)
        out_pts = rng_out.uniform(np.asarray(lo, float), np.asarray(hi, float),
                                  size=(n_out, 3))
        out_nrm = rng_out.normal(size=(n_out, 3))
        if n_out:
            out_nrm /= np.linalg.norm(out_nrm, axis=1, keepdims=True)
        ellipsoids = FkResult(model, pose).posed_ellipsoids()
        areas = np.array([ellipsoid_area(e) for e in ellipsoids])
        areas /= areas.sum()
        params = BlendParams(nu=cfg.nu)
        points = np.empty((n_in, 3))
        normals = np.empty((n_in, 3))
        filled = 0
        failures = 0
        while filled < n_in:
            pts, nrm, ok = _surface_samples(ellipsoids, areas, rng_in, np.eye(3),
                                            params, n_in - filled)
            failures += int((~ok).sum())
            if failures > 100:
                raise RootFindFailure("more than 100 failed surface samples")
            n_ok = int(ok.sum())
            points[filled:filled + n_ok] = pts[ok]
            normals[filled:filled + n_ok] = nrm[ok]
            filled += n_ok
        noise_state = rng_in.bit_generator.state
        labels = np.concatenate([np.ones(n_in, dtype=int), np.zeros(n_out, dtype=int)])
        for li, level in enumerate(levels):
            scfg = noise_config(cfg, level)
            rng = np.random.default_rng()
            rng.bit_generator.state = noise_state
            pts = points.copy()
            nrm = normals.copy()
            if scfg.point_noise > 0:
                pts += scfg.point_noise * rng.normal(size=pts.shape)
            if scfg.normal_noise > 0:
                angles = np.abs(rng.normal(size=n_in)) * scfg.normal_noise
                nrm = _perturb_normals(nrm, angles, rng)
            data = [Datum(point=pts[i], normal=nrm[i]) for i in range(n_in)]
            data += [Datum(point=out_pts[j], normal=out_nrm[j]) for j in range(n_out)]
            out[li].append((data, labels))
    return out


def run_sweep(model: BodyModel, kind, values, metrics, seeds,
              sample: SampleConfig, tracker: TrackerConfig,
              frames=100, rate=25.0, threads=1, cell_sink=None):
    """All cells of one sweep; returns aggregate rows sorted by (value, metric).

    ``cell_sink(value, metric, seed, error)`` is called as cells complete.
    """
    model_doc = model_to_dict(model)
    sample_doc = {k: v for k, v in vars(sample).items() if k != "workspace"}
    tasks = [(kind, model_doc, tuple(values), tuple(metrics), seed,
              sample_doc, tracker.to_dict(), frames, rate) for seed in seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            per_seed = list(ex.map(_seed_cells, tasks))
    else:
        per_seed = [_seed_cells(t) for t in tasks]

    cells = {}
    for chunk in per_seed:
        for value, metric, seed, err in chunk:
            cells.setdefault((value, metric), []).append(err)
            if cell_sink is not None:
                cell_sink(value, metric, seed, err)
    rows = []
    for value in values:
        for metric in metrics:
            errs = np.asarray(cells[(value, metric)])
            std = float(errs.std(ddof=1)) if errs.size > 1 else 0.0
            rows.append({"swept_value": value, "metric": metric,
                         "mean_angle_error": float(errs.mean()),
                         "std": std, "seeds": errs.size})
    return rows


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def write_sweep_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["swept_value", "metric", "mean_angle_error", "std", "seeds"])
        for r in rows:
            w.writerow([repr(float(r["swept_value"])), r["metric"],
                        repr(float(r["mean_angle_error"])), repr(float(r["std"])),
                        int(r["seeds"])])


def write_sweep_figure(path, rows, kind):
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    metrics = sorted({r["metric"] for r in rows})
    for metric, style in zip(metrics, ("o-", "s--", "^:")):
        sel = [r for r in rows if r["metric"] == metric]
        x = [r["swept_value"] for r in sel]
        y = [r["mean_angle_error"] for r in sel]
        e = [r["std"] for r in sel]
        ax.errorbar(x, y, yerr=e, fmt=style, capsize=3, label=metric)
    ax.set_xlabel(kind)
    ax.set_ylabel("mean angle error [rad]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_trajectory_csv(path, model, truth_poses, est_poses):
    truth = np.atleast_2d(np.asarray(truth_poses, dtype=float))
    est = np.atleast_2d(np.asarray(est_poses, dtype=float))
    if truth.shape != est.shape:
        raise FrameCountMismatch("truth %s vs estimate %s" % (truth.shape, est.shape))
    names = model.dof_names
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "param", "truth", "estimate"])
        for k in range(truth.shape[0]):
            for d, name in enumerate(names):
                w.writerow([k, name, repr(truth[k, d]), repr(est[k, d])])


def write_angle_error_csv(path, model, truth_poses, est_poses):
    errs = angle_error_matrix(model, truth_poses, est_poses)
    names = model.dof_names[6:]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "mean_abs_error"])
        for name, col in zip(names, errs.mean(axis=0)):
            w.writerow([name, repr(float(col))])
        w.writerow(["overall", repr(float(errs.mean()))])


def write_trajectory_figure(path, model, truth_poses, est_poses, params=None):
    truth = np.atleast_2d(np.asarray(truth_poses, dtype=float))
    est = np.atleast_2d(np.asarray(est_poses, dtype=float))
    names = model.dof_names
    if params is None:
        params = [n for n in ("knee_l_x", "elbow_r_z") if n in names] or names[6:8]
    fig, axes = plt.subplots(len(params), 1, figsize=(5.5, 2.2 * len(params)),
                             squeeze=False)
    frames = np.arange(truth.shape[0])
    for ax, name in zip(axes[:, 0], params):
        d = names.index(name)
        ax.plot(frames, truth[:, d], "--", label="truth")
        ax.plot(frames, est[:, d], "-", label="estimate")
        ax.set_ylabel("%s [rad]" % name)
    axes[-1, 0].set_xlabel("frame")
    axes[0, 0].legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
