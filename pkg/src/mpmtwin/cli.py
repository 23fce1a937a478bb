"""Command-line interface.

Subcommands:

- ``simulate <scene> --out <traj>``: roll the scene forward and write the
  frame-boundary particle positions as a trajectory file.
- ``synth <scene> --out <obs>``: simulate at ground-truth parameters
  (``--theta``) and degrade the result into an observation file (subsampling,
  noise, tracked markers, occlusion windows, silhouettes when the scene has
  cameras).
- ``identify <scene> <obs> --out <report>``: offline parameter identification;
  ``--method grad`` follows adjoint gradients with AdamW, ``--method cmaes``
  runs the evolution strategy. Writes a JSON-lines report (one record per
  iteration plus a summary).
- ``online <scene> <obs> --out <report>``: streaming twin with in-flight
  corrections; one record per frame plus a summary.
- ``gradcheck <scene> <obs> [--tol T]``: compare the adjoint parameter
  gradient against central finite differences and print a table; exits 3
  when the worst relative error is at or above the tolerance.

Exit codes: 0 success, 1 validation/input error, 2 numerical fault during
simulation, 3 gradient check over tolerance. Diagnostics go to stderr as a
single ``mpmtwin: <kind>: <message>`` line. The ``MPMTWIN_THREADS``
environment variable sets the transfer worker count; ``--deterministic``
forces serial execution and writes ``wall_time: null`` into reports so that
repeated invocations produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import replace

import numpy as np

from .core import MaterialParams, NumericalFault, ValidationError, \
    material_from_normalized
from .identify import identify_offline, online_loop
from .kernel import rollout, set_default_workers
from .diff import finite_diff_grad, rollout_grad
from .sceneio import PARAM_KEYS, load_scene, material_to_doc, parse_occlusion, \
    read_observations, synth_generate, write_observations, write_report, \
    write_trajectory

__all__ = ["main"]

_METHOD_BY_FLAG = {"grad": "gradient", "cmaes": "cma-es"}
_FLAG_BY_METHOD = {v: k for k, v in _METHOD_BY_FLAG.items()}


def _diag(kind: str, message) -> None:
    """Single-line machine-parsable diagnostic on stderr."""
    text = " ".join(str(message).split())
    print(f"mpmtwin: {kind}: {text}", file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors follow the exit-code contract (1)."""

    def error(self, message):
        _diag("usage-error", f"{self.prog}: {message}")
        raise SystemExit(1)


def _configure_workers(deterministic: bool) -> None:
    raw = os.environ.get("MPMTWIN_THREADS", "").strip()
    workers = 0
    if raw:
        try:
            workers = max(0, int(raw))
        except ValueError:
            raise ValidationError(
                f"MPMTWIN_THREADS must be an integer, got {raw!r}")
    if deterministic:
        workers = 0
    set_default_workers(workers)


def _parse_theta(spec: str, template: MaterialParams) -> MaterialParams:
    """Apply ``E=1e5,nu=0.3,...`` overrides (scene-file keys) to a material."""
    overrides = {}
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in PARAM_KEYS:
            raise ValidationError(
                f"--theta: expected KEY=VALUE with KEY in "
                f"{sorted(PARAM_KEYS)}, got {item!r}")
        try:
            overrides[PARAM_KEYS[key]] = float(value)
        except ValueError:
            raise ValidationError(f"--theta: {key}: not a number: {value!r}")
    return replace(template, **overrides)


def _params_doc(material: MaterialParams) -> dict:
    doc = material_to_doc(material)
    return {k: doc[k] for k in ("E", "nu", "rho", "y")}


# ---------------------------------------------------------------------------
# subcommands

def _cmd_simulate(args) -> int:
    loaded = load_scene(args.scene)
    scene = loaded.scene
    result = rollout(scene)
    write_trajectory(args.out, result.positions, dt=scene.dt,
                     substeps_per_frame=scene.substeps_per_frame)
    print(f"wrote {args.out} ({scene.frames} frames, "
          f"{scene.particles.x.shape[0]} particles)")
    return 0


def _cmd_synth(args) -> int:
    loaded = load_scene(args.scene)
    scene = loaded.scene
    material = _parse_theta(args.theta, scene.material) if args.theta \
        else scene.material
    occlusion = tuple(parse_occlusion(rule) for rule in args.occlude)
    obs = synth_generate(scene, material, noise=args.noise,
                         subsample=args.subsample,
                         tracked_fraction=args.tracked,
                         occlusion=occlusion, seed=args.seed)
    write_observations(args.out, obs, text=args.text)
    print(f"wrote {args.out} ({len(obs.frames)} frames, "
          f"{obs.frames[0].points.shape[0]} points/frame)")
    return 0


def _cmd_identify(args) -> int:
    loaded = load_scene(args.scene)
    observations = read_observations(args.obs)
    method = _METHOD_BY_FLAG[args.method] if args.method else loaded.method
    config = loaded.optimizer
    if args.max_iterations is not None:
        config = replace(config, max_iterations=args.max_iterations)
    t0 = time.perf_counter()
    result = identify_offline(loaded.scene, observations, method=method,
                              config=config, frozen=loaded.frozen,
                              bounds=loaded.bounds,
                              checkpoint_stride=loaded.checkpoint_stride)
    wall = None if args.deterministic else time.perf_counter() - t0
    template = loaded.scene.material
    records = []
    for rec in result.history:
        mat = material_from_normalized(rec.params, template)
        records.append({"type": "iteration", "iteration": rec.iteration,
                        "loss": rec.loss, "dist": rec.dist, "track": rec.track,
                        "grad_norm": rec.grad_norm,
                        "params": _params_doc(mat)})
    records.append({"type": "summary",
                    "method": _FLAG_BY_METHOD[method],
                    "iterations": len(result.history),
                    "best_loss": result.best_loss,
                    "best_params": _params_doc(result.best_material),
                    "aborted": result.aborted,
                    "abort_reason": result.abort_reason,
                    "wall_time": wall})
    write_report(args.out, records)
    if result.aborted:
        _diag("numerical-fault", f"identification aborted: {result.abort_reason}")
        return 2
    print(f"wrote {args.out} ({len(result.history)} iterations, "
          f"best loss {result.best_loss:.6e})")
    return 0


def _cmd_online(args) -> int:
    loaded = load_scene(args.scene)
    stream = read_observations(args.obs)
    t0 = time.perf_counter()
    result = online_loop(loaded.scene, stream, config=loaded.online,
                         frozen=loaded.frozen, bounds=loaded.bounds)
    wall = None if args.deterministic else time.perf_counter() - t0
    template = loaded.scene.material
    records = []
    for rec in result.records:
        mat = material_from_normalized(rec.params, template)
        records.append({"type": "frame", "frame": rec.frame,
                        "loss_dist": rec.loss_dist, "loss_mask": rec.loss_mask,
                        "speed": rec.speed, "pose_gap": rec.pose_gap,
                        "attempted": rec.attempted, "gated": rec.gated,
                        "optimized": rec.optimized,
                        "correction_before": rec.correction_before,
                        "correction_after": rec.correction_after,
                        "params": _params_doc(mat)})
    records.append({"type": "summary", "frames": len(result.records),
                    "swaps": result.swaps,
                    "final_params": _params_doc(result.final_material),
                    "wall_time": wall})
    write_report(args.out, records)
    print(f"wrote {args.out} ({len(result.records)} frames, "
          f"{result.swaps} corrections applied)")
    return 0


def _cmd_gradcheck(args) -> int:
    loaded = load_scene(args.scene)
    scene = loaded.scene
    observations = read_observations(args.obs)
    bd, adj = rollout_grad(scene, observations, frozen=loaded.frozen,
                           checkpoint_stride=loaded.checkpoint_stride)
    _, fd = finite_diff_grad(scene, observations, frozen=loaded.frozen)
    a, f = adj.as_array(), fd.as_array()
    frozen_mask = np.zeros(4, dtype=bool)
    names = ("E", "nu", "rho", "y")
    long_names = ("youngs_modulus", "poissons_ratio", "density", "yield_stress")
    for i, long in enumerate(long_names):
        if long in loaded.frozen:
            frozen_mask[i] = True
    if scene.material.is_elastic:
        frozen_mask[3] = True

    print(f"objective {bd.total:.9e}")
    print(f"{'param':6s} {'adjoint':>16s} {'finite-diff':>16s} "
          f"{'rel-err':>10s}  status")
    worst = 0.0
    for i, name in enumerate(names):
        if frozen_mask[i]:
            print(f"{name:6s} {'-':>16s} {'-':>16s} {'-':>10s}  frozen")
            continue
        if not fd.available[i]:
            print(f"{name:6s} {a[i]:+16.8e} {'-':>16s} {'-':>10s}  "
                  f"fd-unavailable")
            continue
        rel = abs(a[i] - f[i]) / max(abs(a[i]), abs(f[i]), 1e-12)
        worst = max(worst, rel)
        status = "ok" if rel < args.tol else "FAIL"
        print(f"{name:6s} {a[i]:+16.8e} {f[i]:+16.8e} {rel:10.3e}  {status}")
    print(f"max rel err {worst:.3e} (tolerance {args.tol:g})")
    if worst >= args.tol:
        _diag("gradcheck-tolerance",
              f"max rel err {worst:.3e} >= tolerance {args.tol:g}")
        return 3
    return 0


# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="mpmtwin",
        description="Differentiable MPM simulation and parameter identification.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def common(p):
        p.add_argument("--deterministic", action="store_true",
                       help="serial execution; wall_time written as null")

    p = sub.add_parser("simulate", help="roll a scene forward, write trajectory")
    p.add_argument("scene")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("synth", help="generate synthetic observations")
    p.add_argument("scene")
    p.add_argument("--out", required=True)
    p.add_argument("--theta", default=None,
                   help="ground-truth overrides, e.g. E=1e5,nu=0.3,y=inf")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0,
                   help="isotropic position noise sigma (m)")
    p.add_argument("--subsample", type=float, default=1.0,
                   help="fraction of particles observed")
    p.add_argument("--tracked", type=float, default=0.1,
                   help="fraction of particles carrying tracked markers")
    p.add_argument("--occlude", action="append", default=[],
                   metavar="RULE", help="e.g. all@7 or z<0.25@3:6 (repeatable)")
    p.add_argument("--text", action="store_true",
                   help="write point payloads as text instead of binary")
    common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("identify", help="offline parameter identification")
    p.add_argument("scene")
    p.add_argument("obs")
    p.add_argument("--method", choices=sorted(_METHOD_BY_FLAG), default=None,
                   help="override the scene's optimizer method")
    p.add_argument("--max-iterations", type=int, default=None,
                   help="override the scene's iteration/generation budget")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_identify)

    p = sub.add_parser("online", help="streaming twin with in-flight corrections")
    p.add_argument("scene")
    p.add_argument("obs")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=_cmd_online)

    p = sub.add_parser("gradcheck",
                       help="validate adjoint gradients against finite differences")
    p.add_argument("scene")
    p.add_argument("obs")
    p.add_argument("--tol", type=float, default=1e-3)
    common(p)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        _configure_workers(args.deterministic)
        return args.func(args)
    except ValidationError as err:
        _diag("validation-error", err)
        return 1
    except NumericalFault as err:
        _diag("numerical-fault", err)
        return 2
    except OSError as err:
        _diag("io-error", err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
