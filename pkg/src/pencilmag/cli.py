"""Command-line entry point.

Every subcommand reads an optional JSON config file (``--config``) whose
sections mirror :data:`DEFAULTS`; ``--set section.key=value`` overrides any
entry, and the dedicated flags override both. Results are printed as one
JSON record on stdout; failures print a JSON error line on stderr and exit
with status 1.
"""

from __future__ import annotations

import argparse
import copy
import glob
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import fieldmodel as fm
from .evaluation import render_trace, run_eval
from .geometry import AttitudeAngles, ScreenConfig
from .logs import (
    PoseLog,
    Trace,
    read_intervals,
    read_pose,
    read_session,
    read_trace,
    write_intervals,
    write_session,
    write_trace,
)
from .magmap import (
    ReconstructionConfig,
    ScreenMap2D,
    VoxelField,
    align_streams,
    build_2d_map,
    build_pencil_map,
    estimate_ambient,
    reconstruct,
)
from .smoothing import KalmanParams, QuatTrack, kalman_smooth_quats
from .strokedetect import ImuPeakConfig, StrokeInterval, StrokeWindowConfig, detect_strokes
from .tracker import (
    DegenerateWeightsError,
    TrackerConfig,
    WritingBehaviorModel,
    fit_behavior_model,
    knn_fit,
    knn_track,
    track_stroke,
    track_stroke_2d,
)

DEFAULTS = {
    "seed": None,
    "screen": {"width": 200.0, "height": 150.0, "magnetometer": [100.0, 110.0, 5.0]},
    "synth": {
        "kind": "glyph",  # glyph | wardrive | raster
        "glyphs": ["square"],
        "cell": 2,
        "size": 40.0,
        "speed": 40.0,
        "attitude": [60.0, 110.0, 0.0],
        "attitude_end": None,
        "duration": 120.0,
        "gap": 3.0,
        "sigma_mag": 0.1,
    },
    "map": {"cell": 5.0, "quiet": [0.0, 2.5], "smooth": True, "mode": "3d", "source": "session"},
    "reconstruction": {},
    "tracker": {},
    "stroke_window": {},
    "imu_peaks": {},
    "kalman": {},
    "max_restarts": 3,
}

MAX_GAP = 0.03  # s; pose samples further apart belong to different strokes


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _apply_set(cfg: dict, item: str) -> None:
    key, sep, raw = item.partition("=")
    if not sep:
        raise CliError(f"--set expects section.key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        if not os.path.exists(args.config):
            raise CliError(f"config file not found: {args.config}")
        with open(args.config) as fh:
            cfg = _merge(cfg, json.load(fh))
    for item in args.set or []:
        _apply_set(cfg, item)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _screen(cfg) -> ScreenConfig:
    s = cfg["screen"]
    return ScreenConfig(float(s["width"]), float(s["height"]), tuple(float(v) for v in s["magnetometer"]))


def _tracker_cfg(cfg) -> TrackerConfig:
    return TrackerConfig(**cfg["tracker"])


def _need(path, what):
    if path is None:
        raise CliError(f"missing {what}")
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _rngs(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg):
    screen = _screen(cfg)
    sc = cfg["synth"]
    kind = args.kind or sc["kind"]
    rng = np.random.default_rng(cfg["seed"])
    if kind == "glyph":
        glyphs = args.glyph or sc["glyphs"]
        a0 = AttitudeAngles(*sc["attitude"])
        a1 = AttitudeAngles(*sc["attitude_end"]) if sc["attitude_end"] else None
        script = fm.concatenate_scripts(
            [fm.script_glyph(g, screen, int(sc["cell"]), float(sc["size"]), float(sc["speed"]), a0, a1)
             for g in glyphs],
            gap=float(sc["gap"]))
    elif kind == "wardrive":
        script = fm.script_wardrive(screen, float(sc["duration"]), rng)
    elif kind == "raster":
        script = fm.script_raster(screen)
    else:
        raise CliError(f"unknown synth kind {kind!r}")
    noise = fm.SensorNoise(sigma_mag=float(sc["sigma_mag"]))
    session = fm.simulate_session(script, fm.DipoleSet(), screen, fm.AmbientField(), noise, rng)
    if kind == "raster":
        session.pose = PoseLog(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 4)))
    write_session(args.out, session)
    return {"command": "synth", "kind": kind, "out": args.out, "mag_samples": len(session.mag),
            "strokes": len(session.strokes)}


def _smoothed_pose(pose: PoseLog, cfg) -> PoseLog:
    if len(pose) < 2 or not cfg["map"]["smooth"]:
        return pose
    params = KalmanParams(**cfg["kalman"])
    quats = []
    for seg in pose.segments(MAX_GAP):
        if len(seg) < 2:
            quats.append(seg.quats)
        else:
            quats.append(kalman_smooth_quats(QuatTrack(seg.t, seg.quats), params).quats)
    return PoseLog(pose.t, pose.xy, np.vstack(quats))


def _ambient(session, cfg):
    return estimate_ambient(session.mag, tuple(cfg["map"]["quiet"]))


def cmd_build_map(args, cfg):
    mcfg = cfg["map"]
    mode = args.mode or mcfg["mode"]
    screen = _screen(cfg)
    cell = float(mcfg["cell"])
    if (args.source or mcfg["source"]) == "dipole":
        if mode != "3d":
            raise CliError("the dipole source only builds 3D maps")
        origin, dims = fm.pencil_map_extent(screen, cell)
        vf = fm.tabulate_pencil_map(fm.DipoleSet(), origin, dims, cell)
        vf.save(args.out)
        return {"command": "build-map", "source": "dipole", "cells": int(vf.valid.sum()), "out": args.out}
    session = read_session(_need(args.session, "session directory"))
    ambient = _ambient(session, cfg)
    if mode == "2d":
        log = align_streams(session.touch, None, session.mag, ambient)
        if len(log) == 0:
            raise CliError("no pen-down magnetometer samples in session")
        m2 = build_2d_map(log, cell)
        m2.save(args.out)
        return {"command": "build-map", "mode": "2d", "samples": len(log),
                "cells": int(m2.valid.sum()), "out": args.out}
    pose = _smoothed_pose(session.pose, cfg)
    log = align_streams(session.touch, pose, session.mag, ambient)
    if len(log) == 0:
        raise CliError("no pen-down magnetometer samples with poses in session")
    origin, dims = fm.pencil_map_extent(screen, cell)
    vf = build_pencil_map(log, screen.m_loc, cell, extent=(origin, dims))
    vf.save(args.out)
    return {"command": "build-map", "mode": "3d", "samples": len(log),
            "cells": int(vf.valid.sum()), "out": args.out}


def cmd_reconstruct(args, cfg):
    vf = VoxelField.load(_need(args.map, "map"))
    res = reconstruct(vf, ReconstructionConfig(**cfg["reconstruction"]))
    res.field.save(args.out)
    return {"command": "reconstruct", "converged": res.converged, "iterations": res.iterations,
            "energy_start": res.energies[0], "energy_end": res.energies[-1], "out": args.out}


def cmd_fit_behavior(args, cfg):
    poses = [read_pose(os.path.join(_need(d, "session directory"), "pose.csv")) for d in args.sessions]
    model = fit_behavior_model(poses, MAX_GAP)
    model.save(args.out)
    return {"command": "fit-behavior", "sessions": len(poses), "ridge": model.ridge, "out": args.out}


def _strokes(args, session, cfg) -> list[StrokeInterval]:
    if getattr(args, "strokes", None):
        return [StrokeInterval(float(b), float(e)) for b, e in read_intervals(_need(args.strokes, "strokes file"))]
    return detect_strokes(session.mag, session.accel, session.gyro,
                          StrokeWindowConfig(**cfg["stroke_window"]), ImuPeakConfig(**cfg["imu_peaks"]),
                          ambient=_ambient(session, cfg))


def cmd_detect(args, cfg):
    session = read_session(_need(args.session, "session directory"))
    strokes = _strokes(argparse.Namespace(), session, cfg)
    write_intervals(args.out, strokes)
    return {"command": "detect", "strokes": len(strokes), "out": args.out}


def _segments(args, cfg):
    session = read_session(_need(args.session, "session directory"))
    ambient = _ambient(session, cfg)
    strokes = _strokes(args, session, cfg)
    segs = []
    for iv in strokes:
        seg = session.mag.segment(iv.begin, iv.end).shifted(ambient)
        if len(seg):
            segs.append(seg)
    return segs


def _write_traces(out_dir, traces):
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, tr in enumerate(traces):
        p = os.path.join(out_dir, f"stroke_{i:03d}.csv")
        write_trace(p, tr)
        paths.append(p)
    return paths


def cmd_track(args, cfg):
    vf = VoxelField.load(_need(args.map, "map"))
    model = WritingBehaviorModel.load(_need(args.model, "behaviour model")) if args.model else None
    tcfg = _tracker_cfg(cfg)
    screen = _screen(cfg)
    segs = _segments(args, cfg)
    rngs = _rngs(int(cfg["seed"]), len(segs))
    traces, restarts = [], 0
    for seg, rng in zip(segs, rngs):
        for attempt in range(int(cfg["max_restarts"]) + 1):
            try:
                traces.append(track_stroke(seg, vf, screen, model, tcfg, rng).trace)
                break
            except DegenerateWeightsError:
                restarts += 1
                if attempt == int(cfg["max_restarts"]):
                    raise
    _write_traces(args.out, traces)
    return {"command": "track", "strokes": len(traces), "restarts": restarts, "out": args.out}


def cmd_track2d(args, cfg):
    m2 = ScreenMap2D.load(_need(args.map, "2D map"))
    tcfg = _tracker_cfg(cfg)
    segs = _segments(args, cfg)
    rngs = _rngs(int(cfg["seed"]), len(segs))
    traces = [track_stroke_2d(seg, m2, tcfg, rng) for seg, rng in zip(segs, rngs)]
    _write_traces(args.out, traces)
    return {"command": "track2d", "strokes": len(traces), "out": args.out}


def cmd_knn(args, cfg):
    train = read_session(_need(args.train, "training session"))
    log = align_streams(train.touch, _smoothed_pose(train.pose, cfg), train.mag, _ambient(train, cfg))
    model = knn_fit(log)
    traces = [knn_track(seg, model) for seg in _segments(args, cfg) if len(seg) >= 3]
    _write_traces(args.out, traces)
    return {"command": "knn", "k": model.k, "strokes": len(traces), "out": args.out}


def _trace_files(path):
    if os.path.isdir(path):
        return sorted(glob.glob(os.path.join(path, "*.csv")))
    return [_need(path, "trace file")]


def cmd_eval(args, cfg):
    pose = read_pose(os.path.join(_need(args.truth, "truth session"), "pose.csv"))
    truths = [Trace(p.t, p.xy) for p in pose.segments(MAX_GAP)]
    per = []
    for path in _trace_files(args.trace):
        tr = read_trace(path)
        # truth is the pen-down segment overlapping this trace the most
        overlap = [np.count_nonzero((tr.t >= t.t[0]) & (tr.t <= t.t[-1])) for t in truths]
        if not overlap or max(overlap) < 2:
            raise CliError(f"{path}: no matching truth segment")
        m = run_eval(tr, truths[int(np.argmax(overlap))])
        per.append({"trace": os.path.basename(path), **m.to_dict()})
    aligned = [p["aligned_rmse_mm"] for p in per]
    return {"command": "eval", "traces": per,
            "median_aligned_rmse_mm": float(np.median(aligned)) if aligned else None,
            "median_rmse_mm": float(np.median([p["rmse_mm"] for p in per])) if per else None}


def cmd_render(args, cfg):
    traces = [read_trace(p) for path in args.traces for p in _trace_files(path)]
    render_trace(traces, _screen(cfg), args.out)
    return {"command": "render", "traces": len(traces), "out": args.out}


def cmd_config(args, cfg):
    cfg = copy.deepcopy(cfg)
    cfg["tracker"] = _merge(asdict(TrackerConfig()), cfg["tracker"])
    cfg["reconstruction"] = _merge(asdict(ReconstructionConfig()), cfg["reconstruction"])
    cfg["stroke_window"] = _merge(asdict(StrokeWindowConfig()), cfg["stroke_window"])
    cfg["imu_peaks"] = _merge(asdict(ImuPeakConfig()), cfg["imu_peaks"])
    return cfg


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config entry (value parsed as JSON)")

    p = argparse.ArgumentParser(prog="pencilmag", description="Magnetometer-based pencil tracking toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="simulate a sensor session")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--kind", choices=["glyph", "wardrive", "raster"])
    s.add_argument("--glyph", action="append", help="glyph to write (repeatable)")
    s.add_argument("--out", required=True, help="session directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-map", parents=[common], help="build a voxel or 2D map from a session")
    s.add_argument("--session")
    s.add_argument("--mode", choices=["3d", "2d"])
    s.add_argument("--source", choices=["session", "dipole"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_map)

    s = sub.add_parser("reconstruct", parents=[common], help="fill and denoise a voxel map")
    s.add_argument("--map", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("fit-behavior", parents=[common], help="fit the writing-behaviour model")
    s.add_argument("--sessions", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_behavior)

    s = sub.add_parser("detect", parents=[common], help="detect strokes in a session")
    s.add_argument("--session", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    for name, func, helptext in (("track", cmd_track, "6D particle-filter tracking"),
                                 ("track2d", cmd_track2d, "2D particle-filter tracking")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--seed", type=int, required=True)
        s.add_argument("--session", required=True)
        s.add_argument("--map", required=True)
        if name == "track":
            s.add_argument("--model", help="behaviour model (default: no motion prior)")
        s.add_argument("--strokes", help="stroke intervals CSV (default: detect)")
        s.add_argument("--out", required=True, help="directory for trace CSVs")
        s.set_defaults(func=func)

    s = sub.add_parser("knn", parents=[common], help="k-nearest-neighbour baseline tracking")
    s.add_argument("--train", required=True, help="map-building session")
    s.add_argument("--session", required=True)
    s.add_argument("--strokes")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_knn)

    s = sub.add_parser("eval", parents=[common], help="RMSE of traces against a session's poses")
    s.add_argument("--trace", required=True, help="trace CSV or directory of them")
    s.add_argument("--truth", required=True, help="session directory holding pose.csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", parents=[common], help="draw traces as SVG")
    s.add_argument("--traces", nargs="*", default=[])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("config", parents=[common], help="print the effective configuration")
    s.set_defaults(func=cmd_config)
    return p


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        record = args.func(args, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1
    print(json.dumps(record, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
