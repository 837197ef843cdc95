"""Command line: simulate / track / eval / sweep.

Exit codes: 0 success, 1 usage, 2 I/O or parse failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .ellipsoid import SingularCovariance
from .em import NonFiniteObjective, TrackerConfig
from .harness import FrameCountMismatch
from .kinematics import default_body_model, load_model
from .synth import (RootFindFailure, SampleConfig, frame_sample_config,
                    load_cloud, load_script, make_running_script, sample_frame,
                    save_cloud, save_script, script_workspace)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, "%s: error: %s\n" % (self.prog, message))


def _model_from_arg(name, relaxed=False):
    if name == "default":
        return default_body_model()
    return load_model(name, relaxed=relaxed)


def _read_config(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _pick(flag_value, config_section, key, default):
    if flag_value is not None:
        return flag_value
    if key in config_section:
        return config_section[key]
    return default


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    model = _model_from_arg(args.model, args.relaxed)
    conf = _read_config(args.config).get("sample", {})
    if args.script == "running":
        script = make_running_script(model, frames=args.frames, rate=args.rate)
    else:
        script = load_script(args.script)
    cfg = SampleConfig(
        observations=int(_pick(args.obs, conf, "observations", 500)),
        point_noise=float(_pick(args.noise_point, conf, "point_noise", 0.0)),
        normal_noise=float(_pick(args.noise_angle, conf, "normal_noise", 0.0)),
        outlier_fraction=float(_pick(args.outliers, conf, "outlier_fraction", 0.0)),
        seed=int(_pick(args.seed, conf, "seed", 0)),
        nu=float(_pick(args.nu, conf, "nu", 0.04)),
        workspace=script_workspace(model, script),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_script(out / "script.json", script)
    for k, pose in enumerate(script.poses):
        data, labels = sample_frame(model, pose, frame_sample_config(cfg, k))
        save_cloud(out / ("cloud_%04d.txt" % k), data,
                   labels if args.labels else None)
    print("wrote %d frames to %s" % (len(script), out))
    return 0


def _cloud_paths(directory):
    paths = sorted(Path(directory).glob("cloud_*.txt"))
    if not paths:
        raise OSError("no cloud_*.txt files under %s" % directory)
    return paths


def cmd_track(args):
    model = _model_from_arg(args.model, args.relaxed)
    conf = _read_config(args.config)
    tracker = TrackerConfig.from_dict(conf.get("tracker", {}))
    tracker.metric = args.metric
    if args.no_outlier_class:
        tracker.use_outlier_class = False

    frames_data = [load_cloud(p)[0] for p in _cloud_paths(args.clouds)]
    script_poses = None
    if args.script is not None:
        script_poses = load_script(args.script).poses
        if script_poses.shape[0] != len(frames_data):
            raise FrameCountMismatch("script has %d poses, found %d clouds"
                                     % (script_poses.shape[0], len(frames_data)))
    results = harness.track_frames(model, frames_data, script_poses, tracker,
                                   init=args.init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, res in enumerate(results):
        with open(out / ("frame_%04d.json" % k), "w", encoding="utf-8") as fh:
            json.dump(res.to_dict(), fh)
            fh.write("\n")
    names = model.dof_names
    with open(out / "trajectory.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("frame," + ",".join(names) + "\n")
        for k, res in enumerate(results):
            fh.write(str(k) + "," + ",".join(repr(float(v)) for v in res.pose) + "\n")
    n_bad = sum(not r.converged for r in results)
    print("tracked %d frames (%d not converged) -> %s" % (len(results), n_bad, out))
    return 0


def _load_trajectory(path, model):
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:1] != ["frame"]:
            raise ValueError("trajectory file must start with a 'frame' header")
        for line in fh:
            cols = line.strip().split(",")
            if len(cols) != model.dof_count + 1:
                raise ValueError("trajectory row has %d columns, expected %d"
                                 % (len(cols), model.dof_count + 1))
            poses.append([float(c) for c in cols[1:]])
    return np.asarray(poses)


def cmd_eval(args):
    model = _model_from_arg(args.model, args.relaxed)
    est = _load_trajectory(args.trajectory, model)
    truth = load_script(args.script).poses
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_trajectory_csv(out / "trajectory_eval.csv", model, truth, est)
    harness.write_angle_error_csv(out / "angle_errors.csv", model, truth, est)
    params = args.plot_params.split(",") if args.plot_params else None
    harness.write_trajectory_figure(out / "trajectory.png", model, truth, est, params)
    err = harness.mean_angle_error(model, truth, est)
    print("mean angle error: %.6f rad" % err)
    return 0


def cmd_sweep(args):
    model = _model_from_arg(args.model, args.relaxed)
    conf = _read_config(args.config)
    tracker = TrackerConfig.from_dict(conf.get("tracker", {}))
    kind = args.sweep
    if args.values:
        raw = [float(v) for v in args.values.split(",")]
        values = [int(v) if kind in ("observations", "framerate") else v for v in raw]
    else:
        values = list(harness.SWEEP_DEFAULTS[kind])
    metrics = args.metrics.split(",")
    for m in metrics:
        if m not in ("datum", "algebraic"):
            raise ValueError("unknown metric %r" % m)
    seeds = [args.seed + i for i in range(args.seeds)]
    sample = SampleConfig(observations=args.obs, outlier_fraction=args.outliers,
                          seed=args.seed, nu=args.nu)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells_path = out / ("sweep_%s_cells.csv" % kind)
    with open(cells_path, "w", encoding="utf-8", newline="\n") as cells_fh:
        cells_fh.write("swept_value,metric,seed,mean_angle_error\n")

        def sink(value, metric, seed, err):
            cells_fh.write("%s,%s,%d,%s\n" % (repr(float(value)), metric, seed,
                                              repr(float(err))))
            cells_fh.flush()

        rows = harness.run_sweep(model, kind, values, metrics, seeds, sample,
                                 tracker, frames=args.frames, rate=args.rate,
                                 threads=args.threads, cell_sink=sink)
    harness.write_sweep_csv(out / ("sweep_%s.csv" % kind), rows)
    harness.write_sweep_figure(out / ("sweep_%s.png" % kind), rows, kind)
    for r in rows:
        print("%s=%s  %s  %.5f +- %.5f rad (%d seeds)"
              % (kind, r["swept_value"], r["metric"], r["mean_angle_error"],
                 r["std"], r["seeds"]))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="artrack",
                description="Articulated implicit-surface tracking experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--model", default="default",
                        help="'default' or a body-model JSON path")
        sp.add_argument("--relaxed", action="store_true",
                        help="allow triaxial ellipsoids (b != c) in the model")
        sp.add_argument("--config", default=None,
                        help="JSON with 'tracker' and 'sample' sections")

    sp = sub.add_parser("simulate", help="generate a motion script and point clouds")
    common(sp)
    sp.add_argument("--script", default="running",
                    help="'running' or a motion-script JSON path")
    sp.add_argument("--frames", type=int, default=100)
    sp.add_argument("--rate", type=float, default=25.0)
    sp.add_argument("--obs", type=int, default=None)
    sp.add_argument("--outliers", type=float, default=None)
    sp.add_argument("--noise-point", type=float, default=None)
    sp.add_argument("--noise-angle", type=float, default=None)
    sp.add_argument("--nu", type=float, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--labels", action="store_true",
                    help="append the inlier/outlier label column")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("track", help="register the model to saved clouds")
    common(sp)
    sp.add_argument("--clouds", required=True, help="directory of cloud_*.txt files")
    sp.add_argument("--script", default=None, help="ground-truth script for init")
    sp.add_argument("--init", choices=("previous", "script", "identity"),
                    default="previous")
    sp.add_argument("--metric", choices=("datum", "algebraic"), default="datum")
    sp.add_argument("--no-outlier-class", action="store_true",
                    help="ablation: force the outlier prior to zero")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("eval", help="compare a trajectory against ground truth")
    common(sp)
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--script", required=True)
    sp.add_argument("--plot-params", default=None,
                    help="comma-separated dof names to plot")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="run a study sweep and write CSV + figure")
    common(sp)
    sp.add_argument("--sweep", choices=tuple(harness.SWEEP_DEFAULTS), required=True)
    sp.add_argument("--values", default=None, help="comma-separated swept values")
    sp.add_argument("--metrics", default="datum,algebraic")
    sp.add_argument("--seeds", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--frames", type=int, default=100)
    sp.add_argument("--rate", type=float, default=25.0)
    sp.add_argument("--obs", type=int, default=250)
    sp.add_argument("--outliers", type=float, default=0.2)
    sp.add_argument("--nu", type=float, default=0.04)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 1
    try:
        return args.func(args)
    except (NonFiniteObjective, SingularCovariance, RootFindFailure,
            np.linalg.LinAlgError) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 3
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
