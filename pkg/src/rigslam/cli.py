"""Command line front end: simulate, run, check-jacobians, evaluate.

Exit codes: 0 ok, 1 check failure, 2 usage or configuration error,
3 tracking lost before ten keyframes.
"""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import evaluation as ev
from . import synthetic as sy
from .errors import ConfigError, DegenerateGeometry, NoOverlap
from .jacobian_check import check_jacobians
from .mapping import MappingSettings
from .optimizer import format_trace
from .pipeline import PipelineSettings, SlamSystem
from .rig import PRESETS, dump_rig, load_preset, load_rig
from .tracking import TrackingSettings
from .vocabulary import train_vocabulary

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_LOST = 0, 1, 2, 3

CONFIG_PRESETS = ("stereo-circle", "square-loop-drift", "corridor", "quad-lissajous")
WORLDS = ("circle", "square-loop", "corridor", "lissajous")


# --- run configuration --------------------------------------------------------------

@dataclass
class RunConfig:
    rig_source: str
    world: str = "circle"
    trajectory: dict = field(default_factory=dict)     # TrajectorySpec overrides
    landmarks: int = None
    sigma: float = 1.0
    outlier_fraction: float = 0.0
    descriptor_flips: int = 4
    tracking_iterations: int = 10
    local_ba_iterations: int = 6
    global_ba_iterations: int = 30
    outlier_rounds: int = 4
    loop_closing: bool = False
    drift_yaw_per_meter: float = 0.0
    cameras: int = None
    seeds: list = field(default_factory=lambda: [0])
    out: Path = Path("rigslam-out")
    observations: Path = None
    vocabulary_k: int = 10
    vocabulary_depth: int = 3
    name: str = "config"

    def rig(self):
        if self.rig_source in PRESETS:
            return load_preset(self.rig_source)
        return load_rig(self.rig_source)

    def pipeline_settings(self):
        return PipelineSettings(
            tracking=TrackingSettings(max_iterations=self.tracking_iterations,
                                      outlier_rounds=self.outlier_rounds),
            mapping=MappingSettings(local_ba_iterations=self.local_ba_iterations),
            loop_closing=self.loop_closing,
            global_ba_iterations=self.global_ba_iterations,
            drift_yaw_per_meter=self.drift_yaw_per_meter)

    def world_spec(self, seed):
        scene, spec = sy.preset_world(self.world, seed, self.landmarks)
        return scene, replace(spec, **self.trajectory) if self.trajectory else spec


_TRAJECTORY_KEYS = {"duration": float, "rate": float, "size": float, "speed": float,
                    "height": float, "loops": float, "look": str}
_SECTIONS = {
    "noise": {"sigma": ("sigma", float), "outlier_fraction": ("outlier_fraction", float),
              "descriptor_flips": ("descriptor_flips", int)},
    "solver": {"tracking_iterations": ("tracking_iterations", int),
               "local_ba_iterations": ("local_ba_iterations", int),
               "global_ba_iterations": ("global_ba_iterations", int),
               "outlier_rounds": ("outlier_rounds", int)},
    "vocabulary": {"k": ("vocabulary_k", int), "depth": ("vocabulary_depth", int)},
}
_TOP = {"rig", "world", "trajectory", "landmarks", "noise", "solver", "loop_closing",
        "drift_yaw_per_meter", "cameras", "seeds", "out", "observations", "vocabulary"}


def _line(node):
    return node.start_mark.line + 1


def _value(node, key, kind):
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError("expected a single value", key=key, line=_line(node))
    text = node.value
    try:
        if kind is bool:
            low = text.lower()
            if low in ("on", "true", "yes"):
                return True
            if low in ("off", "false", "no"):
                return False
            raise ValueError
        if kind is int:
            v = float(text)
            if v != int(v):
                raise ValueError
            return int(v)
        return kind(text)
    except ValueError:
        raise ConfigError(f"invalid {kind.__name__} value {text!r}", key=key, line=_line(node)) from None


def _items(node, key):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError("expected a mapping", key=key, line=_line(node))
    return [(k.value, v) for k, v in node.value]


def parse_config(text, base_dir=Path("."), name="config"):
    """RunConfig from YAML text. Relative paths resolve against ``base_dir``."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed config: {getattr(exc, 'problem', exc)}",
                          line=None if mark is None else mark.line + 1) from None
    if root is None:
        raise ConfigError("empty config", key="rig", line=1)
    cfg = {}
    nodes = {}
    value_nodes = {}
    for key, node in _items(root, "<root>"):
        if key not in _TOP:
            raise ConfigError("unknown key", key=key, line=_line(node))
        nodes[key] = node
    if "rig" not in nodes:
        raise ConfigError("missing key", key="rig", line=_line(root))

    rig = _value(nodes["rig"], "rig", str)
    if rig not in PRESETS:
        path = (base_dir / rig).resolve()
        if not path.is_file():
            raise ConfigError(f"rig file {rig} not found", key="rig", line=_line(nodes["rig"]))
        rig = str(path)
    cfg["rig_source"] = rig

    if "world" in nodes:
        cfg["world"] = _value(nodes["world"], "world", str)
        if cfg["world"] not in WORLDS:
            raise ConfigError(f"unknown world; choose from {', '.join(WORLDS)}",
                              key="world", line=_line(nodes["world"]))
    if "trajectory" in nodes:
        over = {}
        for k, v in _items(nodes["trajectory"], "trajectory"):
            if k not in _TRAJECTORY_KEYS:
                raise ConfigError("unknown key", key=f"trajectory.{k}", line=_line(v))
            over[k] = _value(v, f"trajectory.{k}", _TRAJECTORY_KEYS[k])
        if "look" in over and over["look"] not in sy.LOOK_POLICIES:
            raise ConfigError("unknown look policy", key="trajectory.look", line=_line(nodes["trajectory"]))
        for k in ("duration", "rate"):
            if k in over and not over[k] > 0:
                raise ConfigError("must be positive", key=f"trajectory.{k}", line=_line(nodes["trajectory"]))
        cfg["trajectory"] = over
    for section, fields in _SECTIONS.items():
        if section in nodes:
            for k, v in _items(nodes[section], section):
                if k not in fields:
                    raise ConfigError("unknown key", key=f"{section}.{k}", line=_line(v))
                attr, kind = fields[k]
                cfg[attr] = _value(v, f"{section}.{k}", kind)
                value_nodes[f"{section}.{k}"] = v
    for key, kind in (("landmarks", int), ("loop_closing", bool), ("drift_yaw_per_meter", float),
                      ("cameras", int)):
        if key in nodes:
            cfg[key] = _value(nodes[key], key, kind)
    if "seeds" in nodes:
        node = nodes["seeds"]
        if not isinstance(node, yaml.SequenceNode) or not node.value:
            raise ConfigError("expected a non-empty list", key="seeds", line=_line(node))
        cfg["seeds"] = [_value(v, "seeds", int) for v in node.value]
    if "out" in nodes:
        cfg["out"] = base_dir / _value(nodes["out"], "out", str)
    if "observations" in nodes:
        path = base_dir / _value(nodes["observations"], "observations", str)
        if not path.is_file():
            raise ConfigError(f"observation dump {path} not found", key="observations",
                              line=_line(nodes["observations"]))
        cfg["observations"] = path

    checks = (("noise.sigma", cfg.get("sigma", 0.0) >= 0),
              ("noise.outlier_fraction", 0.0 <= cfg.get("outlier_fraction", 0.0) < 0.5),
              ("noise.descriptor_flips", cfg.get("descriptor_flips", 0) >= 0),
              ("cameras", cfg.get("cameras", 1) >= 1),
              ("landmarks", cfg.get("landmarks", 1) >= 1),
              ("drift_yaw_per_meter", cfg.get("drift_yaw_per_meter", 0.0) >= 0))
    for key, ok in checks:
        if not ok:
            node = value_nodes.get(key, nodes.get(key.split(".")[0]))
            raise ConfigError("value out of range", key=key, line=_line(node))
    return RunConfig(name=name, **cfg)


def load_config(source):
    """RunConfig from a file path or the name of a bundled config."""
    path = Path(source)
    if path.is_file():
        return parse_config(path.read_text(encoding="utf-8"), path.parent, path.stem)
    if source in CONFIG_PRESETS:
        text = (resources.files("rigslam") / "configs" / f"{source}.yaml").read_text(encoding="utf-8")
        return parse_config(text, Path("."), source)
    raise ConfigError(f"config {source} not found (bundled: {', '.join(CONFIG_PRESETS)})")


def apply_flags(cfg, args):
    if getattr(args, "seed", None):
        cfg.seeds = list(args.seed)
    if getattr(args, "out", None):
        cfg.out = Path(args.out)
    if getattr(args, "loop_closing", None):
        cfg.loop_closing = args.loop_closing == "on"
    if getattr(args, "cameras", None) is not None:
        cfg.cameras = args.cameras
    return cfg


# --- commands -----------------------------------------------------------------------

def _seed_dir(cfg, seed):
    d = Path(cfg.out) / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _frames(cfg, rig, seed):
    if cfg.observations is not None:
        with open(cfg.observations, encoding="utf-8") as fh:
            try:
                return sy.load_observations(fh, len(rig))
            except ValueError as exc:
                raise ConfigError(f"{cfg.observations}: {exc}", key="observations") from None
    scene, spec = cfg.world_spec(seed)
    return sy.simulate(scene, rig, spec, sigma=cfg.sigma, outlier_fraction=cfg.outlier_fraction,
                       seed=seed, descriptor_flips=cfg.descriptor_flips)


def cmd_simulate(cfg, log=print):
    rig = cfg.rig()
    for seed in cfg.seeds:
        frames = _frames(cfg, rig, seed)
        d = _seed_dir(cfg, seed)
        with open(d / "observations.txt", "w", encoding="utf-8") as fh:
            sy.dump_observations(frames, fh)
        gt = ev.TrajectoryRecord.from_rig_poses([f.true_pose for f in frames])
        ev.write_trajectory(gt, d / "ground_truth.txt")
        (d / "rig.yaml").write_text(dump_rig(rig), encoding="utf-8")
        n_obs = sum(len(c) for f in frames for c in f.cameras)
        log(f"seed {seed}: {len(frames)} frames, {n_obs} observations -> {d}")
    return EXIT_OK


def train_run_vocabulary(frames, cfg, seed, every=5):
    """Vocabulary trained on the run's own descriptor pool, pinned to the seed."""
    pool = np.concatenate([c.descriptors for f in frames[::every] for c in f.cameras])
    return train_vocabulary(pool, cfg.vocabulary_k, cfg.vocabulary_depth, seed=seed)


def run_once(cfg, seed, rig=None):
    """Run the pipeline for one seed. Returns (RunResult, ground-truth record)."""
    rig = rig or cfg.rig()
    frames = _frames(cfg, rig, seed)
    k = len(rig) if cfg.cameras is None else cfg.cameras
    used = rig.subset(k)
    vocab = train_run_vocabulary(frames, cfg, seed) if cfg.loop_closing else None
    system = SlamSystem(used, cfg.pipeline_settings(), vocab)
    result = system.run([sy.to_bundled_frame(f, used, cameras=k) for f in frames])
    gt = ev.TrajectoryRecord.from_rig_poses([f.true_pose for f in frames])
    return result, gt


def format_report(cfg, seed, result, ate, elapsed):
    on = "on" if cfg.loop_closing else "off"
    lines = ["# rigslam run report v1",
             f"config: {cfg.name}",
             f"seed: {seed}",
             f"cameras: {len(cfg.rig()) if cfg.cameras is None else cfg.cameras}",
             f"loop_closing: {on}",
             f"drift_yaw_per_meter: {cfg.drift_yaw_per_meter!r}",
             f"status: {result.status}",
             f"frames: {result.n_frames}",
             f"tracked_frames: {result.n_tracked}",
             f"lost_at_frame: {result.lost_at}",
             f"keyframes: {result.n_keyframes}",
             f"map_points: {result.n_points}",
             f"loop_events: {len(result.loop_events)}"]
    for n, e in enumerate(result.loop_events):
        note = e.message.replace(" ", "_") or "-"
        lines.append(f"loop_event.{n}: frame={e.frame} query={e.query} candidate={e.candidate} "
                     f"accepted={'yes' if e.accepted else 'no'} inliers={e.inliers} note={note}")
    lines.append(f"ate_rmse: {ate!r}" if ate is not None else "ate_rmse: nan")
    lines.append(f"solver_solves: {len(result.solver_reports)}")
    for stage in ("tracking", "mapping", "loop"):
        lines.append(f"time.{stage}_s: {result.timings.get(stage, 0.0):.3f}")
    lines.append(f"time.total_s: {elapsed:.3f}")
    return "\n".join(lines) + "\n"


def format_solver_traces(result):
    out = ["# rigslam solver traces v1", "# iteration lambda cost step_norm"]
    for n, (tier, kf, rep) in enumerate(result.solver_reports):
        out.append(f"## solve {n} tier={tier} keyframe={kf} iterations={rep.iterations} "
                   f"termination={rep.termination}")
        out.append(format_trace(rep).rstrip("\n"))
    return "\n".join(line for line in out if line) + "\n"


def cmd_run(cfg, log=print):
    rig = cfg.rig()
    code = EXIT_OK
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        result, gt = run_once(cfg, seed, rig)
        d = _seed_dir(cfg, seed)
        ev.write_trajectory(result.trajectory, d / "trajectory.txt")
        ev.write_trajectory(gt, d / "ground_truth.txt")
        ate = None
        if len(result.trajectory) >= 3:
            try:
                ate, ape, ts, _ = ev.evaluate(result.trajectory, gt)
                ev.write_ape_series(d / "ape.txt", ts, ape)
            except (NoOverlap, DegenerateGeometry):
                ate = None
        (d / "report.txt").write_text(format_report(cfg, seed, result, ate, time.perf_counter() - t0),
                                      encoding="utf-8")
        (d / "solver_traces.txt").write_text(format_solver_traces(result), encoding="utf-8")
        shown = "n/a" if ate is None else f"{ate:.6g}"
        log(f"seed {seed}: status {result.status}, {result.n_keyframes} keyframes, "
            f"{len(result.loop_events)} loop events, ATE {shown} -> {d}")
        if result.lost_early:
            log(f"seed {seed}: tracking lost at frame {result.lost_at} before 10 keyframes")
            code = EXIT_LOST
    return code


def cmd_check_jacobians(seed, trials, mutate=None, log=print):
    if trials < 1:
        log("check-jacobians: --trials must be at least 1")
        return EXIT_USAGE
    kwargs = {}
    if mutate == "negate":
        from . import optimizer as opt
        kwargs["jacobian_pose"] = lambda *a: -opt.jacobian_pose(*a)
    t0 = time.perf_counter()
    res = check_jacobians(seed, trials, **kwargs)
    verdict = "PASS" if res.passed else "FAIL"
    log(f"check-jacobians {verdict}: {res.trials} trials, max relative error {res.max_error:.3e} "
        f"(tolerance {res.tolerance:g}), {time.perf_counter() - t0:.2f} s")
    log(f"worst: seed={res.seed} index={res.worst_index} block={res.worst_block}")
    return EXIT_OK if res.passed else EXIT_CHECK


def format_table(method, rows, summary):
    out = ["run | ate_rmse | pairs"]
    out += [f"{name} | {rmse:.6g} | {n}" for name, rmse, n in rows]
    out.append("")
    out.append("method | best | average | median")
    out.append(f"{method} | {summary['best']:.6g} | {summary['average']:.6g} | {summary['median']:.6g}")
    return "\n".join(out) + "\n"


def cmd_evaluate(gt_path, est_paths, out=None, method="rigslam", max_dt=0.01, log=print):
    try:
        gt = ev.read_trajectory(gt_path)
        ests = [(Path(p), ev.read_trajectory(p)) for p in est_paths]
    except (OSError, ValueError) as exc:
        log(f"evaluate: {exc}")
        return EXIT_USAGE
    rows = []
    out_dir = Path(out) if out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for n, (path, est) in enumerate(ests):
        try:
            rmse, ape, ts, _ = ev.evaluate(est, gt, max_dt)
        except (NoOverlap, DegenerateGeometry) as exc:
            log(f"evaluate: {path}: {exc}")
            return EXIT_USAGE
        rows.append((str(path), rmse, len(ape)))
        if out_dir:
            ev.write_ape_series(out_dir / f"ape_{n}_{path.stem}.txt", ts, ape)
    table = format_table(method, rows, ev.summarize([r[1] for r in rows]))
    log(table.rstrip("\n"))
    if out_dir:
        (out_dir / "metrics.txt").write_text(table, encoding="utf-8")
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="rigslam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True,
                       help=f"config file, or a bundled one: {', '.join(CONFIG_PRESETS)}")
        p.add_argument("--seed", type=int, action="append", help="seed (repeatable); overrides the config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--cameras", type=int, metavar="K", help="use the first K rig cameras")

    p = sub.add_parser("simulate", help="write observation dumps and ground truth")
    common(p)
    p = sub.add_parser("run", help="run the SLAM pipeline")
    common(p)
    p.add_argument("--loop-closing", choices=("on", "off"))
    p = sub.add_parser("check-jacobians", help="finite-difference check of the analytic Jacobians")
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--mutate", choices=("negate",), help=argparse.SUPPRESS)
    p = sub.add_parser("evaluate", help="ATE of estimated trajectories against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth trajectory file")
    p.add_argument("estimates", nargs="+", help="estimated trajectory files")
    p.add_argument("--out", help="directory for APE series and the metrics table")
    p.add_argument("--method", default="rigslam", help="row label in the table")
    p.add_argument("--max-dt", type=float, default=0.01, help="association tolerance in seconds")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "check-jacobians":
            return cmd_check_jacobians((args.seed or [0])[0], args.trials, args.mutate)
        if args.command == "evaluate":
            return cmd_evaluate(args.gt, args.estimates, args.out, args.method, args.max_dt)
        cfg = apply_flags(load_config(args.config), args)
        rig = cfg.rig()
        if cfg.cameras is not None and not 1 <= cfg.cameras <= len(rig):
            raise ConfigError(f"rig has {len(rig)} cameras", key="cameras")
        if args.command == "simulate":
            return cmd_simulate(cfg)
        return cmd_run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
