"""Command-line front end: simulate | enhance | synthesize | evaluate | pipeline.

Every stage works inside one ``--out-dir``.  Values on the command line
override the config file, which overrides the built-in defaults.  All
randomness derives from ``--seed`` (or ``formation.seed`` in the config).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, formation, pipeline, synthesis
from ._accel import BACKEND
from .scene_io import (DepthImage, FormatError, RunConfig, load_config, read_depth_image,
                       read_point_cloud, storage_scale, write_depth_image, write_point_cloud)

log = logging.getLogger("mvdepth")

GT = ("left_gt.pgm", "right_gt.pgm")
OBS = ("left_obs.pgm", "right_obs.pgm")
ENH = ("left_enh.pgm", "right_enh.pgm")
CLOUDS = {"gt": "gt.ply", "noisy": "noisy.ply", "enhanced": "enhanced.ply"}
METRIC_KEYS = ("c2c_noisy", "c2c_enhanced", "c2p_noisy", "c2p_enhanced")


class CLIError(Exception):
    """A user-facing failure: bad inputs, missing upstream files."""


def default_config_path() -> Path:
    return Path(str(resources.files("mvdepth") / "data" / "default.json"))


def _versions() -> dict:
    import scipy

    out = {"mvdepth": __version__, "python": platform.python_version(),
           "numpy": np.__version__, "scipy": scipy.__version__, "backend": BACKEND}
    if BACKEND == "numba":
        import numba

        out["numba"] = numba.__version__
    return out


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# resolved settings
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class Settings:
    run: RunConfig
    config_path: str
    seed: int
    sigma_n2: float
    bits: int
    single_view: bool


def resolve(args) -> Settings:
    path = Path(args.config) if getattr(args, "config", None) else default_config_path()
    if not path.is_file():
        raise CLIError(f"config file not found: {path}")
    run = load_config(path)
    form = dict(run.formation)
    unknown = set(form) - {"sigma_n2", "bits", "seed", "depth_range"}
    if unknown:
        raise FormatError(f"unknown formation keys: {sorted(unknown)}")
    scene = getattr(args, "scene", None)
    if scene is not None and not Path(scene).is_dir():
        run.scene = dataclasses.replace(run.scene, kind=scene)
    seed = args.seed if getattr(args, "seed", None) is not None else int(form.get("seed", 0))
    sigma = getattr(args, "sigma_n2", None)
    if isinstance(sigma, list):
        sigma = sigma[0] if len(sigma) == 1 else None
    sigma_n2 = float(sigma if sigma is not None else form.get("sigma_n2", 50.0))
    bits = int(args.bits if getattr(args, "bits", None) is not None else form.get("bits", 8))
    single = bool(getattr(args, "single_view", False) or run.pipeline.get("single_view", False))
    form.update(seed=seed, sigma_n2=sigma_n2, bits=bits)
    run.formation = form
    run.pipeline = {**run.pipeline, "single_view": single}
    return Settings(run, str(path.resolve()), seed, sigma_n2, bits, single)


def _out_dir(args) -> Path:
    out = Path(args.out_dir).resolve()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(stage: str, st: Settings, inputs: list, outputs: list, extra=None) -> dict:
    m = {
        "subcommand": stage,
        "config_path": st.config_path,
        "config": st.run.to_dict(),
        "seed": st.seed,
        "inputs": [str(Path(p).resolve()) for p in inputs],
        "outputs": [str(Path(p).resolve()) for p in outputs],
        "versions": _versions(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        m.update(extra)
    return m


def _require(paths) -> None:
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise CLIError("missing input file(s): " + ", ".join(missing))


def _write_pair(out: Path, names, left: DepthImage, right: DepthImage, Q: float) -> None:
    top = max(left.values.max(initial=0.0), right.values.max(initial=0.0))
    scale = storage_scale(Q, top)
    write_depth_image(left, out / names[0], scale)
    write_depth_image(right, out / names[1], scale)


def _read_pair(out: Path, names):
    _require(out / n for n in names)
    return read_depth_image(out / names[0]), read_depth_image(out / names[1])


def _load_sim_manifest(out: Path) -> dict:
    path = out / "simulate_manifest.json"
    _require([path])
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _clean_pair(st: Settings, scene_arg):
    rig = st.run.rig
    if scene_arg is not None and Path(scene_arg).is_dir():
        left, right = _read_pair(Path(scene_arg), GT)
        left.check_rig(rig)
        right.check_rig(rig)
        return left, right
    return formation.render_scene_pair(formation.make_scene(st.run.scene, rig))


def do_simulate(st: Settings, out: Path, scene_arg=None) -> dict:
    gt_l, gt_r = _clean_pair(st, scene_arg)
    rng_range = st.run.formation.get("depth_range")
    lo, hi = rng_range if rng_range else formation.scene_depth_range(gt_l, gt_r)
    if not hi > lo:
        raise CLIError(f"scene depth range is degenerate ({lo:g}, {hi:g}); "
                       "set formation.depth_range in the config")
    Q = formation.quantization_step_for_bits((lo, hi), st.bits)
    seed_l, seed_r = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(st.seed).spawn(2))
    obs_l = formation.simulate_observation(gt_l, formation.FormationParams(Q, st.sigma_n2, seed_l))
    obs_r = formation.simulate_observation(gt_r, formation.FormationParams(Q, st.sigma_n2, seed_r))
    # ground truth is stored at the lattice-friendly scale too; it is not on the lattice
    _write_pair(out, GT, gt_l, gt_r, Q)
    _write_pair(out, OBS, obs_l, obs_r, Q)
    inputs = [scene_arg] if scene_arg is not None and Path(scene_arg).is_dir() else []
    man = _manifest("simulate", st, inputs, [out / n for n in GT + OBS],
                    {"Q": Q, "depth_range": [lo, hi]})
    _dump_json(man, out / "simulate_manifest.json")
    return man


def do_enhance(st: Settings, out: Path) -> dict:
    sim = _load_sim_manifest(out)
    obs_l, obs_r = _read_pair(out, OBS)
    Q = float(sim["Q"])
    lo, hi = sim["depth_range"]
    cfg = pipeline.config_from_run(st.run, st.sigma_n2, Q, hi - lo, st.single_view)
    enh_l, enh_r, report = pipeline.enhance_image_pair(obs_l, obs_r, st.run.rig, cfg)
    _write_pair(out, ENH, enh_l, enh_r, Q)
    _dump_json(report, out / "enhance_report.json")
    man = _manifest("enhance", st, [out / n for n in OBS], [out / n for n in ENH],
                    {"fallback_rows": report["fallback_rows"]})
    _dump_json(man, out / "enhance_manifest.json")
    return report


def _k(st: Settings) -> int:
    extra = set(st.run.synthesis) - {"k"}
    if extra:
        raise FormatError(f"unknown synthesis keys: {sorted(extra)}")
    return int(st.run.synthesis.get("k", 16))


def do_synthesize(st: Settings, out: Path) -> None:
    rig = st.run.rig
    k = _k(st)
    sources = {"gt": GT, "noisy": OBS, "enhanced": ENH}
    inputs, outputs = [], []
    for key, names in sources.items():
        left, right = _read_pair(out, names)
        cloud = synthesis.merge_views(left, right, rig)
        if key != "gt":
            cloud = synthesis.estimate_normals(cloud, k)
        write_point_cloud(cloud, out / CLOUDS[key])
        inputs += [out / n for n in names]
        outputs.append(out / CLOUDS[key])
    _dump_json(_manifest("synthesize", st, inputs, outputs), out / "synthesize_manifest.json")


def _write_metrics(metrics: dict, out: Path) -> None:
    _dump_json(metrics, out / "metrics.json")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for key in sorted(metrics):
            w.writerow([key, repr(metrics[key])])


def do_evaluate(st: Settings, out: Path, reference=None, test=None) -> dict:
    if (reference is None) != (test is None):
        raise CLIError("--reference and --test must be given together")
    if reference is not None:
        _require([reference, test])
        ref, tst = read_point_cloud(reference), read_point_cloud(test)
        if tst.normals is None:
            tst = synthesis.estimate_normals(tst, _k(st))
        rep = synthesis.evaluate(ref, tst)
        metrics = {"c2c": rep.c2c, "c2p": rep.c2p}
        inputs = [reference, test]
    else:
        paths = [out / CLOUDS[k] for k in ("gt", "noisy", "enhanced")]
        _require(paths)
        ref, noisy, enh = (read_point_cloud(p) for p in paths)
        r_n, r_e = synthesis.evaluate(ref, noisy), synthesis.evaluate(ref, enh)
        metrics = {"c2c_noisy": r_n.c2c, "c2c_enhanced": r_e.c2c,
                   "c2p_noisy": r_n.c2p, "c2p_enhanced": r_e.c2p}
        inputs = paths
    _write_metrics(metrics, out)
    _dump_json(_manifest("evaluate", st, inputs, [out / "metrics.json", out / "metrics.csv"]),
               out / "evaluate_manifest.json")
    return metrics


def run_pipeline(st: Settings, out: Path, scene_arg=None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    do_simulate(st, out, scene_arg)
    do_enhance(st, out)
    do_synthesize(st, out)
    return do_evaluate(st, out)


def _sweep_job(job):
    st, out, scene_arg = job
    return st.sigma_n2, run_pipeline(st, out, scene_arg)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: bundled config)")
    common.add_argument("--seed", type=int, help="master seed for all randomness")
    common.add_argument("--out-dir", default=".", help="working directory for all files")
    common.add_argument("--jobs", type=int, default=1, help="parallel image pairs (pipeline sweeps)")
    common.add_argument("-v", "--verbose", action="store_true")

    form = argparse.ArgumentParser(add_help=False)
    form.add_argument("--sigma-n2", type=float, help="noise variance")
    form.add_argument("--bits", type=int, help="quantiser bit depth")
    form.add_argument("--scene", help="scene kind (fronto, slanted, slanted_sinusoid) "
                                      "or a directory holding left_gt.pgm / right_gt.pgm")

    view = argparse.ArgumentParser(add_help=False)
    view.add_argument("--single-view", action="store_true",
                      help="drop the right-view terms (ablation)")

    p = argparse.ArgumentParser(prog="mvdepth", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mvdepth {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common, form], help="render and corrupt a scene pair")
    e = sub.add_parser("enhance", parents=[common, view], help="enhance the observed pair")
    e.add_argument("--sigma-n2", type=float, help="noise variance assumed by the model")
    sub.add_parser("synthesize", parents=[common], help="build point clouds")
    ev = sub.add_parser("evaluate", parents=[common], help="C2C / C2P metrics")
    ev.add_argument("--reference", help="reference PLY (with --test)")
    ev.add_argument("--test", help="test PLY (with --reference)")
    pp = sub.add_parser("pipeline", parents=[common, view], help="all stages in sequence")
    pp.add_argument("--sigma-n2", type=float, nargs="+",
                    help="noise variance; several values run a sweep in sub-directories")
    pp.add_argument("--bits", type=int, help="quantiser bit depth")
    pp.add_argument("--scene", help="scene kind or clean-pair directory")
    return p


def _sigma_for_enhance(st: Settings, out: Path, args) -> Settings:
    # the model assumes the simulated variance unless told otherwise
    if getattr(args, "sigma_n2", None) is None:
        path = out / "simulate_manifest.json"
        if path.is_file():
            st.sigma_n2 = float(json.loads(path.read_text())["config"]["formation"]["sigma_n2"])
            st.run.formation = {**st.run.formation, "sigma_n2": st.sigma_n2}
    return st


def dispatch(args) -> int:
    out = _out_dir(args)
    st = resolve(args)
    cmd = args.command
    if cmd == "simulate":
        do_simulate(st, out, args.scene)
    elif cmd == "enhance":
        report = do_enhance(_sigma_for_enhance(st, out, args), out)
        if report["fallback_rows"]:
            log.warning("%d rows fell back to the observation", len(report["fallback_rows"]))
    elif cmd == "synthesize":
        do_synthesize(st, out)
    elif cmd == "evaluate":
        print(json.dumps(do_evaluate(st, out, args.reference, args.test), sort_keys=True))
    elif cmd == "pipeline":
        sigmas = args.sigma_n2 or [st.sigma_n2]
        if len(sigmas) == 1:
            st.sigma_n2 = float(sigmas[0])
            st.run.formation = {**st.run.formation, "sigma_n2": st.sigma_n2}
            print(json.dumps(run_pipeline(st, out, args.scene), sort_keys=True))
            return 0
        jobs = []
        for s in sigmas:
            sub = dataclasses.replace(st, run=dataclasses.replace(st.run), sigma_n2=float(s))
            sub.run.formation = {**st.run.formation, "sigma_n2": float(s)}
            jobs.append((sub, out / f"sigma_{float(s):g}", args.scene))
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as ex:
                results = list(ex.map(_sweep_job, jobs))
        else:
            results = [_sweep_job(j) for j in jobs]
        summary = {f"{s:g}": m for s, m in results}
        _dump_json(summary, out / "sweep_metrics.json")
        print(json.dumps(summary, sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except (CLIError, FormatError, ValueError, OSError) as exc:
        print(f"mvdepth: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (CLIError, FormatError)) else 1


if __name__ == "__main__":
    sys.exit(main())
