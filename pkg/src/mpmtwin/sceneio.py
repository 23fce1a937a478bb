"""Scene documents, observation and trajectory files, run reports, synth data.

Scene files are strict JSON: every object is checked against its allowed key
set (unknown keys are rejected with the offending names) and all quantities
are SI. Observation files (magic MPMOBS1) and trajectory files (MPMTRJ1) are
a magic line, one JSON header line, then per-frame payloads; numeric payloads
are little-endian 64-bit, masks are row-major bit-packed, and a text point
mode exists for fixtures and debugging. Every reader/writer pair round-trips
byte-identically. Run reports are JSON lines, one self-describing record per
line.
"""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (
    Controller,
    GroundPlane,
    LossWeights,
    MaterialParams,
    ObservationFrame,
    ObservationSet,
    ParticleState,
    PinholeCamera,
    Scene,
    ValidationError,
    look_at_camera,
    particles_from_ball,
    particles_from_box,
)
from .identify import OnlineConfig, OptimizerConfig
from .kernel import rollout
from .loss import render_soft_masks

__all__ = [
    "PARAM_KEYS",
    "LoadedScene",
    "load_scene",
    "scene_from_doc",
    "save_scene",
    "material_to_doc",
    "read_points_text",
    "write_points_text",
    "densify",
    "write_observations",
    "read_observations",
    "Trajectory",
    "write_trajectory",
    "read_trajectory",
    "write_report",
    "read_report",
    "parse_occlusion",
    "synth_generate",
]

OBS_MAGIC = b"MPMOBS1\n"
TRJ_MAGIC = b"MPMTRJ1\n"

# Scene-file material keys -> optimizer parameter names.
PARAM_KEYS = {"E": "youngs_modulus", "nu": "poissons_ratio",
              "rho": "density", "y": "yield_stress"}

TRACKED_DTYPE = np.dtype([("id", "<i8"), ("p", "<f8", (3,)), ("valid", "u1")])


# ---------------------------------------------------------------------------
# scene documents

def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ValidationError(f"{where}: expected an object, got {type(obj).__name__}")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ValidationError(f"{where}: unknown keys {unknown}")


def _get(obj: dict, key: str, where: str):
    if key not in obj:
        raise ValidationError(f"{where}: missing required key '{key}'")
    return obj[key]


def _finite_or_inf(value, where: str) -> float:
    """Accept a JSON number or the string "inf" (yield stress of elastic runs)."""
    if isinstance(value, str):
        if value.lower() in ("inf", "infinity", "+inf"):
            return math.inf
        raise ValidationError(f"{where}: expected a number or \"inf\", got {value!r}")
    return float(value)


def _vec3(value, where: str) -> tuple[float, float, float]:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,):
        raise ValidationError(f"{where}: expected 3 numbers, got shape {arr.shape}")
    return tuple(float(v) for v in arr)


@dataclass
class LoadedScene:
    """A parsed scene document: the scene plus its fitting configuration."""

    scene: Scene
    optimizer: OptimizerConfig
    online: OnlineConfig
    method: str = "gradient"
    checkpoint_stride: int = 8
    frozen: tuple[str, ...] = ()
    bounds: dict | None = None          # physical units, long parameter names


def _parse_material(doc: dict) -> tuple[MaterialParams, tuple[str, ...], dict | None]:
    _check_keys(doc, {"E", "nu", "rho", "y", "bounds", "frozen"}, "material")
    material = MaterialParams(
        youngs_modulus=float(_get(doc, "E", "material")),
        poissons_ratio=float(_get(doc, "nu", "material")),
        density=float(_get(doc, "rho", "material")),
        yield_stress=_finite_or_inf(doc.get("y", "inf"), "material.y"))
    frozen = []
    for name in doc.get("frozen", []):
        if name not in PARAM_KEYS:
            raise ValidationError(f"material.frozen: unknown parameter {name!r}, "
                                  f"expected one of {sorted(PARAM_KEYS)}")
        frozen.append(PARAM_KEYS[name])
    bounds = None
    if "bounds" in doc:
        _check_keys(doc["bounds"], set(PARAM_KEYS), "material.bounds")
        bounds = {}
        for key, pair in doc["bounds"].items():
            lo, hi = (float(v) for v in pair)
            bounds[PARAM_KEYS[key]] = (lo, hi)
    return material, tuple(frozen), bounds


def _parse_particles(doc: dict, material: MaterialParams, base: Path) -> ParticleState:
    source = _get(doc, "source", "particles")
    common = {"jitter": float(doc.get("jitter", 0.0)),
              "seed": int(doc.get("seed", 0)),
              "velocity": _vec3(doc.get("velocity", (0.0, 0.0, 0.0)),
                                "particles.velocity")}
    if source == "box":
        _check_keys(doc, {"source", "lo", "hi", "spacing", "jitter", "seed",
                          "velocity"}, "particles")
        return particles_from_box(_vec3(_get(doc, "lo", "particles"), "particles.lo"),
                                  _vec3(_get(doc, "hi", "particles"), "particles.hi"),
                                  float(_get(doc, "spacing", "particles")),
                                  material.density, **common)
    if source == "ball":
        _check_keys(doc, {"source", "center", "radius", "spacing", "jitter",
                          "seed", "velocity"}, "particles")
        return particles_from_ball(_vec3(_get(doc, "center", "particles"),
                                         "particles.center"),
                                   float(_get(doc, "radius", "particles")),
                                   float(_get(doc, "spacing", "particles")),
                                   material.density, **common)
    if source == "file":
        _check_keys(doc, {"source", "path", "target_spacing", "seed", "velocity"},
                    "particles")
        points = read_points_text(base / _get(doc, "path", "particles"))
        state = densify(points, float(_get(doc, "target_spacing", "particles")),
                        material.density, seed=int(doc.get("seed", 0)))
        state.v[:] = np.asarray(common["velocity"])[None, :]
        return state
    raise ValidationError(f"particles.source: unknown source {source!r}, "
                          "expected box | ball | file")


def _parse_controller(doc: dict, dt: float, n_steps: int, index: int) -> Controller:
    where = f"controllers[{index}]"
    _check_keys(doc, {"shape", "radius", "motion", "active_until"}, where)
    shape = _get(doc, "shape", where)
    if shape not in ("sphere", "capsule"):
        raise ValidationError(f"{where}.shape: expected sphere | capsule, got {shape!r}")
    motion = _get(doc, "motion", where)
    _check_keys(motion, {"times", "poses"}, f"{where}.motion")
    times = np.asarray(_get(motion, "times", f"{where}.motion"), dtype=float)
    poses = np.asarray(_get(motion, "poses", f"{where}.motion"), dtype=float)
    want = (times.shape[0], 2, 3) if shape == "capsule" else (times.shape[0], 3)
    if poses.shape != want:
        raise ValidationError(f"{where}.motion.poses: expected shape {want}, "
                              f"got {poses.shape}")
    active_until = doc.get("active_until")
    return Controller.from_waypoints(shape, float(_get(doc, "radius", where)),
                                     times, poses, dt, n_steps,
                                     active_until=None if active_until is None
                                     else float(active_until))


def _parse_camera(doc: dict, index: int) -> PinholeCamera:
    where = f"cameras[{index}]"
    _check_keys(doc, {"position", "target", "up", "fx", "fy", "cx", "cy",
                      "width", "height"}, where)
    return look_at_camera(_vec3(_get(doc, "position", where), f"{where}.position"),
                          _vec3(_get(doc, "target", where), f"{where}.target"),
                          fx=float(_get(doc, "fx", where)),
                          fy=float(_get(doc, "fy", where)),
                          cx=float(_get(doc, "cx", where)),
                          cy=float(_get(doc, "cy", where)),
                          width=int(_get(doc, "width", where)),
                          height=int(_get(doc, "height", where)),
                          up=_vec3(doc.get("up", (0.0, 0.0, 1.0)), f"{where}.up"))


def _parse_optimizer(doc: dict) -> tuple[OptimizerConfig, str, int]:
    _check_keys(doc, {"method", "lr", "betas", "eps", "weight_decay",
                      "max_iterations", "seed", "cma_population", "cma_sigma0",
                      "checkpoint_stride"}, "optimizer")
    method = doc.get("method", "gradient")
    if method not in ("gradient", "cma-es"):
        raise ValidationError(f"optimizer.method: expected gradient | cma-es, "
                              f"got {method!r}")
    kwargs = {}
    for key in ("lr", "eps", "weight_decay", "cma_sigma0"):
        if key in doc:
            kwargs[key] = float(doc[key])
    for key in ("max_iterations", "seed", "cma_population"):
        if key in doc:
            kwargs[key] = int(doc[key])
    if "betas" in doc:
        b = doc["betas"]
        kwargs["betas"] = (float(b[0]), float(b[1]))
    return (OptimizerConfig(**kwargs), method,
            int(doc.get("checkpoint_stride", 8)))


def _parse_online(doc: dict) -> OnlineConfig:
    _check_keys(doc, {"optimize_every", "horizon", "speed_threshold", "lr",
                      "iterations", "checkpoint_stride"}, "online")
    kwargs = {}
    for key in ("optimize_every", "horizon", "iterations", "checkpoint_stride"):
        if key in doc:
            kwargs[key] = int(doc[key])
    for key in ("speed_threshold", "lr"):
        if key in doc:
            kwargs[key] = float(doc[key])
    return OnlineConfig(**kwargs)


TOP_KEYS = {"grid", "dt", "substeps_per_frame", "frames", "gravity", "ground",
            "material", "particles", "controllers", "loss_weights", "cameras",
            "optimizer", "online"}


def load_scene(path, *, validate: bool = True) -> LoadedScene:
    """Parse and schema-check a scene document; relative paths resolve beside it."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ValidationError(f"{path.name}: not valid JSON ({err})") from err
    return scene_from_doc(doc, base_dir=path.parent, where=path.name,
                          validate=validate)


def scene_from_doc(doc: dict, *, base_dir=".", where: str = "scene document",
                   validate: bool = True) -> LoadedScene:
    """Build a LoadedScene from an in-memory scene document."""
    _check_keys(doc, TOP_KEYS, where)

    grid = _get(doc, "grid", "scene")
    _check_keys(grid, {"origin", "dx", "dims"}, "grid")
    dims = np.asarray(_get(grid, "dims", "grid"), dtype=int)
    if dims.shape != (3,):
        raise ValidationError(f"grid.dims: expected 3 integers, got {dims.shape}")

    dt = float(_get(doc, "dt", "scene"))
    spf = int(_get(doc, "substeps_per_frame", "scene"))
    frames = int(_get(doc, "frames", "scene"))

    material, frozen, bounds = _parse_material(_get(doc, "material", "scene"))

    ground = None
    if "ground" in doc:
        gd = doc["ground"]
        _check_keys(gd, {"height", "friction_mu"}, "ground")
        ground = GroundPlane(height=float(_get(gd, "height", "ground")))
        # ground friction is carried on the material (used only at the plane)
        material = replace(material, friction_mu=float(gd.get("friction_mu", 0.0)))

    particles = _parse_particles(_get(doc, "particles", "scene"), material,
                                 Path(base_dir))

    controllers = [_parse_controller(c, dt, frames * spf, i)
                   for i, c in enumerate(doc.get("controllers", []))]

    weights = LossWeights()
    if "loss_weights" in doc:
        lw = doc["loss_weights"]
        _check_keys(lw, {"dist", "track", "mask"}, "loss_weights")
        weights = LossWeights(dist=float(lw.get("dist", 1.0)),
                              track=float(lw.get("track", 1.0)),
                              mask=float(lw.get("mask", 1.0)))

    cameras = [_parse_camera(c, i) for i, c in enumerate(doc.get("cameras", []))]

    scene = Scene(grid_origin=_vec3(_get(grid, "origin", "grid"), "grid.origin"),
                  grid_dx=float(_get(grid, "dx", "grid")),
                  grid_dims=tuple(int(d) for d in dims),
                  dt=dt, substeps_per_frame=spf, frames=frames,
                  gravity=_vec3(doc.get("gravity", (0.0, 0.0, 0.0)), "gravity"),
                  material=material, particles=particles,
                  controllers=controllers, ground=ground,
                  loss_weights=weights, cameras=cameras)
    if validate:
        scene.validate()

    optimizer, method, stride = (OptimizerConfig(), "gradient", 8)
    if "optimizer" in doc:
        optimizer, method, stride = _parse_optimizer(doc["optimizer"])
    online = _parse_online(doc["online"]) if "online" in doc else OnlineConfig()

    return LoadedScene(scene=scene, optimizer=optimizer, online=online,
                       method=method, checkpoint_stride=stride,
                       frozen=frozen, bounds=bounds)


def save_scene(path, doc: dict) -> None:
    """Write a scene document in the canonical layout (sorted keys, 2-space indent)."""
    text = json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"
    Path(path).write_text(text)


def material_to_doc(material: MaterialParams) -> dict:
    """Material in scene-file key convention; infinite yield becomes "inf"."""
    return {"E": material.youngs_modulus, "nu": material.poissons_ratio,
            "rho": material.density,
            "y": "inf" if material.is_elastic else material.yield_stress}


# ---------------------------------------------------------------------------
# point text files and densification

def read_points_text(path) -> np.ndarray:
    """Read "x y z" lines; blank lines and '#' comments are skipped."""
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 3:
            raise ValidationError(f"{Path(path).name}:{ln}: expected 3 numbers, "
                                  f"got {len(parts)}")
        rows.append([float(p) for p in parts])
    if not rows:
        raise ValidationError(f"{Path(path).name}: no points found")
    return np.asarray(rows, dtype=np.float64)


def write_points_text(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    lines = [" ".join(repr(float(v)) for v in row) for row in pts]
    Path(path).write_text("\n".join(lines) + "\n")


def densify(points: np.ndarray, target_spacing: float, density: float, *,
            seed: int = 0) -> ParticleState:
    """Turn a point cloud into simulation particles.

    The cloud is voxelized at twice the target spacing; every occupied voxel is
    filled with 8 samples jittered inside their octant, each carrying rest
    volume voxel/8 and mass density * V0. Total rest volume therefore equals
    occupied-voxel count times voxel volume exactly.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
        raise ValidationError(f"densify: expected (m, 3) points, got {points.shape}")
    if target_spacing <= 0.0:
        raise ValidationError(f"densify: target_spacing must be > 0, got {target_spacing}")
    if density <= 0.0:
        raise ValidationError(f"densify: density must be > 0, got {density}")
    voxel = 2.0 * target_spacing
    keys = np.unique(np.floor(points / voxel).astype(np.int64), axis=0)
    if keys.shape[0] == 1:
        warnings.warn("densify: input occupies a single voxel", stacklevel=2)

    octants = np.array([[i, j, k] for i in (0.25, 0.75) for j in (0.25, 0.75)
                        for k in (0.25, 0.75)])
    centers = (keys[:, None, :] + octants[None, :, :]) * voxel
    rng = np.random.default_rng(seed)
    x = centers + rng.uniform(-0.125, 0.125, size=centers.shape) * voxel
    x = x.reshape(-1, 3)
    n = x.shape[0]
    v0 = np.full(n, voxel ** 3 / 8.0)
    return ParticleState(x=x, v=np.zeros((n, 3)),
                         f=np.tile(np.eye(3), (n, 1, 1)), c=np.zeros((n, 3, 3)),
                         m=density * v0, v0=v0)


# ---------------------------------------------------------------------------
# observation files

def _camera_to_doc(cam: PinholeCamera) -> dict:
    return {"cx": cam.cx, "cy": cam.cy,
            "extrinsic": np.asarray(cam.extrinsic, dtype=float).tolist(),
            "fx": cam.fx, "fy": cam.fy, "height": cam.height, "width": cam.width}


def _camera_from_doc(doc: dict) -> PinholeCamera:
    return PinholeCamera(fx=doc["fx"], fy=doc["fy"], cx=doc["cx"], cy=doc["cy"],
                         width=doc["width"], height=doc["height"],
                         extrinsic=tuple(tuple(row) for row in doc["extrinsic"]))


def _poses_to_doc(poses) -> list | None:
    if poses is None:
        return None
    out = []
    for p in poses:
        out.append(None if p is None else np.asarray(p, dtype=float).tolist())
    return out


def _poses_from_doc(doc) -> list | None:
    if doc is None:
        return None
    return [None if p is None else np.asarray(p, dtype=float) for p in doc]


def _meta_line(obj: dict) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"),
                       allow_nan=False) + "\n").encode()


def write_observations(path, obs: ObservationSet, *, text: bool = False) -> None:
    """Serialize an observation set; text=True stores point payloads as lines.

    Masks stay bit-packed in both modes. Floats in text mode are written with
    round-trip precision, so read-write-read is byte-identical either way.
    """
    with open(path, "wb") as f:
        f.write(OBS_MAGIC)
        f.write(_meta_line({"binary": not text,
                            "cameras": [_camera_to_doc(c) for c in obs.cameras],
                            "n_frames": len(obs.frames)}))
        for fr in obs.frames:
            pts = np.ascontiguousarray(fr.points, dtype="<f8")
            n_tracked = None if fr.tracked_ids is None else int(fr.tracked_ids.shape[0])
            masks_meta = None
            if fr.masks is not None:
                masks_meta = [[int(m.shape[0]), int(m.shape[1])] for m in fr.masks]
            f.write(_meta_line({"frame": int(fr.frame),
                                "masks": masks_meta,
                                "n_points": int(pts.shape[0]),
                                "n_tracked": n_tracked,
                                "poses": _poses_to_doc(fr.controller_poses)}))
            if text:
                for row in pts:
                    f.write((" ".join(repr(float(v)) for v in row) + "\n").encode())
            else:
                f.write(pts.tobytes())
            if n_tracked is not None:
                if text:
                    for i in range(n_tracked):
                        px, py, pz = (float(v) for v in fr.tracked_points[i])
                        f.write((f"{int(fr.tracked_ids[i])} {px!r} {py!r} {pz!r} "
                                 f"{int(fr.tracked_valid[i])}\n").encode())
                else:
                    rec = np.empty(n_tracked, dtype=TRACKED_DTYPE)
                    rec["id"] = fr.tracked_ids
                    rec["p"] = fr.tracked_points
                    rec["valid"] = fr.tracked_valid
                    f.write(rec.tobytes())
            if fr.masks is not None:
                for m in fr.masks:
                    h, w = m.shape
                    f.write(np.array([w, h], dtype="<u4").tobytes())
                    f.write(np.packbits(np.asarray(m, dtype=bool).ravel()).tobytes())


def _read_line(f, what: str) -> bytes:
    line = f.readline()
    if not line.endswith(b"\n"):
        raise ValidationError(f"observation file truncated while reading {what}")
    return line


def read_observations(path) -> ObservationSet:
    with open(path, "rb") as f:
        if f.read(len(OBS_MAGIC)) != OBS_MAGIC:
            raise ValidationError(f"{Path(path).name}: not an observation file "
                                  "(bad magic)")
        header = json.loads(_read_line(f, "header"))
        cameras = [_camera_from_doc(c) for c in header["cameras"]]
        text = not header["binary"]
        frames = []
        for _ in range(header["n_frames"]):
            meta = json.loads(_read_line(f, "frame metadata"))
            n_points = meta["n_points"]
            n_tracked = meta["n_tracked"]
            if text:
                pts = np.empty((n_points, 3))
                for i in range(n_points):
                    pts[i] = [float(v) for v in _read_line(f, "points").split()]
            else:
                buf = f.read(n_points * 24)
                if len(buf) != n_points * 24:
                    raise ValidationError("observation file truncated in points")
                pts = np.frombuffer(buf, dtype="<f8").reshape(n_points, 3).copy()
            tracked = {}
            if n_tracked is not None:
                if text:
                    ids = np.empty(n_tracked, dtype=np.int64)
                    tp = np.empty((n_tracked, 3))
                    tv = np.empty(n_tracked, dtype=bool)
                    for i in range(n_tracked):
                        parts = _read_line(f, "tracked").split()
                        ids[i] = int(parts[0])
                        tp[i] = [float(v) for v in parts[1:4]]
                        tv[i] = bool(int(parts[4]))
                else:
                    buf = f.read(n_tracked * TRACKED_DTYPE.itemsize)
                    if len(buf) != n_tracked * TRACKED_DTYPE.itemsize:
                        raise ValidationError("observation file truncated in tracked")
                    rec = np.frombuffer(buf, dtype=TRACKED_DTYPE)
                    ids = rec["id"].copy()
                    tp = rec["p"].copy()
                    tv = rec["valid"].astype(bool)
                tracked = {"tracked_ids": ids, "tracked_points": tp,
                           "tracked_valid": tv}
            masks = None
            if meta["masks"] is not None:
                masks = []
                for h, w in meta["masks"]:
                    buf8 = f.read(8)
                    if len(buf8) != 8:
                        raise ValidationError(
                            "observation file truncated in mask header")
                    wh = np.frombuffer(buf8, dtype="<u4")
                    if int(wh[0]) != w or int(wh[1]) != h:
                        raise ValidationError(
                            "mask size header disagrees with frame metadata")
                    nbytes = (h * w + 7) // 8
                    buf = f.read(nbytes)
                    if len(buf) != nbytes:
                        raise ValidationError("observation file truncated in mask")
                    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8),
                                         count=h * w)
                    masks.append(bits.astype(bool).reshape(h, w))
            frames.append(ObservationFrame(
                frame=meta["frame"], points=pts, masks=masks,
                controller_poses=_poses_from_doc(meta["poses"]), **tracked))
        return ObservationSet(frames=frames, cameras=cameras)


# ---------------------------------------------------------------------------
# trajectory files

@dataclass
class Trajectory:
    """Frame-boundary particle positions, including the initial state."""

    positions: np.ndarray   # (frames + 1, n, 3)
    dt: float
    substeps_per_frame: int

    @property
    def frames(self) -> int:
        return self.positions.shape[0] - 1

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]


def write_trajectory(path, positions: np.ndarray, *, dt: float,
                     substeps_per_frame: int) -> None:
    pos = np.ascontiguousarray(positions, dtype="<f8")
    if pos.ndim != 3 or pos.shape[2] != 3 or pos.shape[0] < 1:
        raise ValidationError(f"trajectory positions must be (frames + 1, n, 3), "
                              f"got {pos.shape}")
    with open(path, "wb") as f:
        f.write(TRJ_MAGIC)
        f.write(_meta_line({"dt": float(dt), "frames": pos.shape[0] - 1,
                            "n_particles": pos.shape[1],
                            "substeps_per_frame": int(substeps_per_frame)}))
        f.write(pos.tobytes())


def read_trajectory(path) -> Trajectory:
    with open(path, "rb") as f:
        if f.read(len(TRJ_MAGIC)) != TRJ_MAGIC:
            raise ValidationError(f"{Path(path).name}: not a trajectory file "
                                  "(bad magic)")
        header = json.loads(_read_line(f, "header"))
        shape = (header["frames"] + 1, header["n_particles"], 3)
        buf = f.read(shape[0] * shape[1] * 24)
        if len(buf) != shape[0] * shape[1] * 24:
            raise ValidationError("trajectory file truncated")
        positions = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        return Trajectory(positions=positions, dt=header["dt"],
                          substeps_per_frame=header["substeps_per_frame"])


# ---------------------------------------------------------------------------
# run reports

def write_report(path, records) -> None:
    """One self-describing JSON record per line."""
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True, allow_nan=False) + "\n")


def read_report(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out


# ---------------------------------------------------------------------------
# synthetic observations

_OCCLUDE_RE = re.compile(r"^(all|[xyz][<>]-?[0-9.eE+-]+)@(\d+)(?::(\d+))?$")


def parse_occlusion(spec: str):
    """Parse one occlusion rule: "all@7" or "z<0.25@3:6" (frames inclusive).

    Returns (first_frame, last_frame, predicate) where predicate maps true
    positions (k, 3) to a hidden-point mask.
    """
    m = _OCCLUDE_RE.match(spec.replace(" ", ""))
    if m is None:
        raise ValidationError(
            f"occlusion rule {spec!r} must look like 'all@F', 'z<VAL@F' or "
            "'x>VAL@F0:F1'")
    target, f0, f1 = m.group(1), int(m.group(2)), m.group(3)
    f1 = f0 if f1 is None else int(f1)
    if f1 < f0:
        raise ValidationError(f"occlusion rule {spec!r}: frame range is reversed")
    if target == "all":
        def predicate(points):
            return np.ones(points.shape[0], dtype=bool)
    else:
        axis = "xyz".index(target[0])
        below = target[1] == "<"
        value = float(target[2:])

        def predicate(points):
            col = points[:, axis]
            return col < value if below else col > value
    return f0, f1, predicate


def synth_generate(scene: Scene, material_true: MaterialParams, *,
                   noise: float = 0.0, subsample: float = 1.0,
                   tracked_fraction: float = 0.1, occlusion=(),
                   seed: int = 0, frames: int | None = None) -> ObservationSet:
    """Generate observations from a ground-truth rollout.

    Emits, per frame: a fixed random subsample of particle positions with
    Gaussian noise of standard deviation `noise` (meters), a fixed random
    tracked subset with occlusion rules applied to the true positions, pinhole
    silhouette masks for every configured camera, and the controller poses at
    the frame boundary. Fully deterministic for a given seed. A rollout fault
    propagates before anything is written.
    """
    if not 0.0 < subsample <= 1.0:
        raise ValidationError(f"subsample must lie in (0, 1], got {subsample}")
    if not 0.0 <= tracked_fraction <= 1.0:
        raise ValidationError(f"tracked_fraction must lie in [0, 1], got {tracked_fraction}")
    if noise < 0.0:
        raise ValidationError(f"noise must be >= 0, got {noise}")
    rules = [parse_occlusion(r) if isinstance(r, str) else r for r in occlusion]

    result = rollout(scene, frames, material=material_true)
    n_frames = result.positions.shape[0] - 1
    n = scene.particles.n
    rng = np.random.default_rng(seed)

    k = max(1, int(round(subsample * n)))
    sub_idx = np.arange(n) if k >= n else np.sort(rng.choice(n, size=k, replace=False))
    kt = int(round(tracked_fraction * n))
    tracked_ids = (np.sort(rng.choice(n, size=kt, replace=False))
                   if kt > 0 else None)
    spf = scene.substeps_per_frame

    out = []
    for f in range(1, n_frames + 1):
        true_pts = result.positions[f]
        pts = true_pts[sub_idx].copy()
        if noise > 0.0:
            pts += rng.normal(0.0, noise, size=pts.shape)
        kwargs = {}
        if tracked_ids is not None:
            tp = true_pts[tracked_ids].copy()
            if noise > 0.0:
                tp += rng.normal(0.0, noise, size=tp.shape)
            valid = np.ones(tracked_ids.shape[0], dtype=bool)
            for f0, f1, predicate in rules:
                if f0 <= f <= f1:
                    valid &= ~predicate(true_pts[tracked_ids])
            kwargs = {"tracked_ids": tracked_ids.copy(), "tracked_points": tp,
                      "tracked_valid": valid}
        masks = None
        if scene.cameras:
            masks = [m > 0.5 for m in render_soft_masks(true_pts, scene.cameras)]
        poses = None
        if scene.controllers:
            poses = [np.asarray(c.pose(f * spf), dtype=float).copy()
                     for c in scene.controllers]
        out.append(ObservationFrame(frame=f, points=pts, masks=masks,
                                    controller_poses=poses, **kwargs))
    return ObservationSet(frames=out, cameras=list(scene.cameras))
