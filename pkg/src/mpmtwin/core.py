"""Shared domain types for the hybrid particle/grid simulator and its identification stack.

Everything downstream (transfer kernels, constitutive updates, losses, the adjoint,
the optimizers, file IO) speaks in terms of the dataclasses defined here. Units are
SI throughout: meters, seconds, kilograms, Pascals. All arrays are float64.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "MpmError",
    "ValidationError",
    "NumericalFault",
    "CflWarning",
    "PARAM_NAMES",
    "PARAM_SCALES",
    "DEFAULT_BOUNDS",
    "MaterialParams",
    "lame_from_params",
    "normalize_params",
    "material_from_normalized",
    "normalized_bounds",
    "ParticleState",
    "particles_from_box",
    "particles_from_ball",
    "GridField",
    "GroundPlane",
    "Controller",
    "LossWeights",
    "PinholeCamera",
    "look_at_camera",
    "Scene",
    "ObservationFrame",
    "ObservationSet",
]


class MpmError(Exception):
    """Base class for all simulator errors."""


class ValidationError(MpmError):
    """Configuration, scene, or input-file contract violation."""


class NumericalFault(MpmError):
    """Simulation produced non-finite or out-of-domain state.

    Carries enough context to report which step and particle went bad.
    """

    def __init__(self, message: str, *, step: int | None = None,
                 particle: int | None = None, frame: int | None = None):
        self.base_message = message
        self.step = step
        self.particle = particle
        self.frame = frame
        parts = [message]
        if step is not None:
            parts.append(f"step={step}")
        if frame is not None:
            parts.append(f"last_valid_frame={frame}")
        if particle is not None:
            parts.append(f"particle={particle}")
        super().__init__(" ".join(parts))


class CflWarning(UserWarning):
    """Time step exceeds the advisory stability bound for the stiffest configured material."""


# Parameter vector layout used by the optimizers: (E, nu, rho, yield).
PARAM_NAMES = ("youngs_modulus", "poissons_ratio", "density", "yield_stress")

# Fixed normalization scales; optimizers work in units of these.
PARAM_SCALES = np.array([1.0e6, 1.0, 1.0e3, 1.0e5])

# Default physical search boxes per parameter.
DEFAULT_BOUNDS = {
    "youngs_modulus": (1.0e3, 1.0e8),
    "poissons_ratio": (0.01, 0.49),
    "density": (100.0, 5000.0),
    "yield_stress": (1.0e2, 1.0e7),
}


@dataclass(frozen=True)
class MaterialParams:
    """Homogeneous material description.

    yield_stress = +inf selects the purely elastic path (no plastic projection).
    friction_mu is the Coulomb coefficient used at the ground plane only.
    """

    youngs_modulus: float
    poissons_ratio: float
    density: float
    yield_stress: float = math.inf
    friction_mu: float = 0.0

    def __post_init__(self):
        if not (self.youngs_modulus > 0.0 and math.isfinite(self.youngs_modulus)):
            raise ValidationError(f"youngs_modulus must be finite and > 0, got {self.youngs_modulus}")
        if not (0.0 < self.poissons_ratio < 0.5):
            raise ValidationError(f"poissons_ratio must lie in (0, 0.5), got {self.poissons_ratio}")
        if not (self.density > 0.0 and math.isfinite(self.density)):
            raise ValidationError(f"density must be finite and > 0, got {self.density}")
        if not self.yield_stress > 0.0:
            raise ValidationError(f"yield_stress must be > 0 (+inf for elastic), got {self.yield_stress}")
        if self.friction_mu < 0.0:
            raise ValidationError(f"friction_mu must be >= 0, got {self.friction_mu}")

    @property
    def is_elastic(self) -> bool:
        return math.isinf(self.yield_stress)

    def lame(self) -> tuple[float, float]:
        return lame_from_params(self)

    def as_vector(self) -> np.ndarray:
        """Physical-unit parameter vector in PARAM_NAMES order."""
        return np.array([self.youngs_modulus, self.poissons_ratio,
                         self.density, self.yield_stress])


def lame_from_params(material: MaterialParams) -> tuple[float, float]:
    """Lame coefficients (mu, lam) from Young's modulus and Poisson's ratio."""
    e = material.youngs_modulus
    nu = material.poissons_ratio
    # MaterialParams already guards the domain; re-check so raw callers fail loudly.
    if not (0.0 < nu < 0.5):
        raise ValidationError(f"poissons_ratio must lie in (0, 0.5), got {nu}")
    mu = e / (2.0 * (1.0 + nu))
    lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def normalize_params(material: MaterialParams) -> np.ndarray:
    """Map physical parameters onto the optimizer's normalized vector."""
    return material.as_vector() / PARAM_SCALES


def material_from_normalized(q: np.ndarray, template: MaterialParams) -> MaterialParams:
    """Rebuild physical parameters from a normalized vector, keeping non-optimized fields."""
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValidationError(f"normalized parameter vector must have shape (4,), got {q.shape}")
    phys = q * PARAM_SCALES
    return replace(
        template,
        youngs_modulus=float(phys[0]),
        poissons_ratio=float(phys[1]),
        density=float(phys[2]),
        yield_stress=float(phys[3]),
    )


def normalized_bounds(physical: dict[str, tuple[float, float]] | None = None) -> np.ndarray:
    """(4, 2) array of [lo, hi] per parameter in normalized units."""
    merged = dict(DEFAULT_BOUNDS)
    if physical:
        unknown = set(physical) - set(PARAM_NAMES)
        if unknown:
            raise ValidationError(f"unknown bound names: {sorted(unknown)}")
        merged.update(physical)
    out = np.empty((4, 2))
    for i, name in enumerate(PARAM_NAMES):
        lo, hi = merged[name]
        if not lo < hi:
            raise ValidationError(f"bounds for {name} must satisfy lo < hi, got ({lo}, {hi})")
        out[i] = (lo / PARAM_SCALES[i], hi / PARAM_SCALES[i])
    return out


@dataclass
class ParticleState:
    """Per-particle simulation state.

    x: positions (n, 3); v: velocities (n, 3); f: elastic deformation gradients (n, 3, 3);
    c: affine velocity matrices (n, 3, 3); m: masses (n,); v0: rest volumes (n,).
    Masses satisfy m = density * v0 at construction time and never change.
    """

    x: np.ndarray
    v: np.ndarray
    f: np.ndarray
    c: np.ndarray
    m: np.ndarray
    v0: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.v = np.ascontiguousarray(self.v, dtype=np.float64)
        self.f = np.ascontiguousarray(self.f, dtype=np.float64)
        self.c = np.ascontiguousarray(self.c, dtype=np.float64)
        self.m = np.ascontiguousarray(self.m, dtype=np.float64)
        self.v0 = np.ascontiguousarray(self.v0, dtype=np.float64)
        n = self.x.shape[0]
        if self.x.shape != (n, 3) or self.v.shape != (n, 3):
            raise ValidationError("particle positions/velocities must have shape (n, 3)")
        if self.f.shape != (n, 3, 3) or self.c.shape != (n, 3, 3):
            raise ValidationError("particle F/C must have shape (n, 3, 3)")
        if self.m.shape != (n,) or self.v0.shape != (n,):
            raise ValidationError("particle masses/volumes must have shape (n,)")
        if n == 0:
            raise ValidationError("particle state must contain at least one particle")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def copy(self) -> "ParticleState":
        return ParticleState(self.x.copy(), self.v.copy(), self.f.copy(),
                             self.c.copy(), self.m.copy(), self.v0.copy())

    def check_finite(self, *, step: int | None = None) -> None:
        for name, arr in (("x", self.x), ("v", self.v), ("f", self.f),
                          ("c", self.c), ("m", self.m)):
            bad = ~np.isfinite(arr)
            if bad.any():
                idx = int(np.argwhere(bad)[0][0])
                raise NumericalFault(f"non-finite particle field '{name}'",
                                     step=step, particle=idx)


def particles_from_box(lo: Sequence[float], hi: Sequence[float], spacing: float,
                       density: float, *, jitter: float = 0.0, seed: int = 0,
                       velocity: Sequence[float] = (0.0, 0.0, 0.0)) -> ParticleState:
    """Fill an axis-aligned box with a regular particle lattice.

    Particles sit at cell centers of a `spacing`-pitch lattice; each carries rest
    volume spacing**3. jitter (fraction of spacing, in [0, 0.5)) displaces positions
    with a seeded uniform draw.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if spacing <= 0.0:
        raise ValidationError(f"spacing must be > 0, got {spacing}")
    if np.any(hi - lo < spacing):
        raise ValidationError("box must be at least one spacing wide per axis")
    counts = np.maximum(np.floor((hi - lo) / spacing + 1e-9).astype(int), 1)
    axes = [lo[a] + (np.arange(counts[a]) + 0.5) * spacing for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    x = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    if jitter:
        if not 0.0 <= jitter < 0.5:
            raise ValidationError(f"jitter must lie in [0, 0.5), got {jitter}")
        rng = np.random.default_rng(seed)
        x = x + rng.uniform(-jitter, jitter, size=x.shape) * spacing
    n = x.shape[0]
    v0 = np.full(n, spacing ** 3)
    state = ParticleState(
        x=x,
        v=np.tile(np.asarray(velocity, dtype=float), (n, 1)),
        f=np.tile(np.eye(3), (n, 1, 1)),
        c=np.zeros((n, 3, 3)),
        m=density * v0,
        v0=v0,
    )
    return state


def particles_from_ball(center: Sequence[float], radius: float, spacing: float,
                        density: float, *, jitter: float = 0.0, seed: int = 0,
                        velocity: Sequence[float] = (0.0, 0.0, 0.0)) -> ParticleState:
    """Fill a solid ball with the cell-centered lattice used by particles_from_box.

    Lattice sites whose centers fall outside the radius are dropped before the
    jitter draw, so each kept particle still carries rest volume spacing**3.
    """
    center = np.asarray(center, dtype=float)
    if radius < spacing:
        raise ValidationError(f"radius must be >= spacing, got {radius} < {spacing}")
    state = particles_from_box(center - radius, center + radius, spacing, density,
                               seed=seed, velocity=velocity)
    keep = np.sum((state.x - center[None, :]) ** 2, axis=1) <= radius * radius
    if not np.any(keep):
        raise ValidationError("ball contains no lattice sites; shrink the spacing")
    x = state.x[keep]
    if jitter:
        if not 0.0 <= jitter < 0.5:
            raise ValidationError(f"jitter must lie in [0, 0.5), got {jitter}")
        rng = np.random.default_rng(seed)
        x = x + rng.uniform(-jitter, jitter, size=x.shape) * spacing
    return ParticleState(x=x, v=state.v[keep], f=state.f[keep], c=state.c[keep],
                         m=state.m[keep], v0=state.v0[keep])


@dataclass
class GridField:
    """Dense background grid with flattened node storage (x-major order)."""

    origin: np.ndarray
    dx: float
    dims: np.ndarray  # (3,) node counts per axis
    mass: np.ndarray  # (n_nodes,)
    vel: np.ndarray   # (n_nodes, 3)

    @classmethod
    def zeros(cls, origin: Sequence[float], dx: float, dims: Sequence[int]) -> "GridField":
        dims = np.asarray(dims, dtype=np.int64)
        n = int(np.prod(dims))
        return cls(origin=np.asarray(origin, dtype=float), dx=float(dx), dims=dims,
                   mass=np.zeros(n), vel=np.zeros((n, 3)))

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.dims))

    def node_positions(self) -> np.ndarray:
        """(n_nodes, 3) world coordinates of every node."""
        ii, jj, kk = np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij")
        idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
        return self.origin[None, :] + idx * self.dx


@dataclass(frozen=True)
class GroundPlane:
    """Half-space collider with Coulomb friction applied to grid velocities."""

    height: float = 0.0
    normal: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def unit_normal(self) -> np.ndarray:
        n = np.asarray(self.normal, dtype=float)
        norm = float(np.linalg.norm(n))
        if norm == 0.0:
            raise ValidationError("ground normal must be nonzero")
        return n / norm


@dataclass
class Controller:
    """Rigid kinematic gripper driving no-slip Dirichlet conditions on the grid.

    Poses are stored densely at substep boundaries: positions has shape
    (steps + 1, 3) for spheres or (steps + 1, 2, 3) for capsule endpoints, and
    velocities (steps, 3) holds the rigid linear velocity over each substep.
    The finite difference of consecutive poses must match velocities to 1e-6
    relative. active marks the substeps during which the controller grips;
    releasing an object is modeled by deactivating its controller.
    """

    kind: str  # "sphere" | "capsule"
    radius: float
    positions: np.ndarray
    velocities: np.ndarray
    active: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("sphere", "capsule"):
            raise ValidationError(f"controller kind must be sphere or capsule, got {self.kind!r}")
        if self.radius <= 0.0:
            raise ValidationError(f"controller radius must be > 0, got {self.radius}")
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        want = (self.steps + 1, 3) if self.kind == "sphere" else (self.steps + 1, 2, 3)
        if self.positions.shape != want:
            raise ValidationError(
                f"controller positions shape {self.positions.shape} does not match {want}")
        if self.active is None:
            self.active = np.ones(self.steps, dtype=bool)
        else:
            self.active = np.asarray(self.active, dtype=bool)
            if self.active.shape != (self.steps,):
                raise ValidationError("controller active mask must have one entry per substep")

    @property
    def steps(self) -> int:
        return self.velocities.shape[0]

    def validate(self, dt: float) -> None:
        """Check pose/velocity finite-difference consistency to 1e-6 relative."""
        diff = np.diff(self.positions, axis=0) / dt
        if self.kind == "capsule":
            # Rigid translation: both endpoints share the velocity.
            if not np.allclose(diff[:, 0], diff[:, 1], rtol=1e-6, atol=1e-12):
                raise ValidationError("capsule endpoints must translate rigidly")
            diff = diff[:, 0]
        scale = np.maximum(np.abs(diff), np.abs(self.velocities)).max(initial=1.0)
        if not np.allclose(diff, self.velocities, rtol=1e-6, atol=1e-6 * scale):
            raise ValidationError("controller velocities inconsistent with pose finite differences")

    def pose(self, step: int) -> np.ndarray:
        return self.positions[step]

    def velocity(self, step: int) -> np.ndarray:
        return self.velocities[step]

    def is_active(self, step: int) -> bool:
        return bool(self.active[step])

    def contains(self, points: np.ndarray, step: int, inflate: float) -> np.ndarray:
        """Boolean mask of points inside the shape inflated by `inflate`."""
        r = self.radius + inflate
        if self.kind == "sphere":
            center = self.positions[step]
            d2 = np.sum((points - center[None, :]) ** 2, axis=1)
            return d2 <= r * r
        a, b = self.positions[step]
        ab = b - a
        denom = float(ab @ ab)
        if denom == 0.0:
            d2 = np.sum((points - a[None, :]) ** 2, axis=1)
            return d2 <= r * r
        t = np.clip((points - a[None, :]) @ ab / denom, 0.0, 1.0)
        closest = a[None, :] + t[:, None] * ab[None, :]
        d2 = np.sum((points - closest) ** 2, axis=1)
        return d2 <= r * r

    @staticmethod
    def from_waypoints(kind: str, radius: float, times: Sequence[float],
                       poses: np.ndarray, dt: float, n_steps: int,
                       active_until: float | None = None) -> "Controller":
        """Materialize a piecewise-linear waypoint motion onto substep boundaries.

        times must be increasing and span [0, n_steps * dt]; poses has shape
        (k, 3) for spheres or (k, 2, 3) for capsules. active_until deactivates
        the controller from that time onward (release).
        """
        times = np.asarray(times, dtype=float)
        poses = np.asarray(poses, dtype=float)
        if times.ndim != 1 or times.shape[0] < 1 or times.shape[0] != poses.shape[0]:
            raise ValidationError("waypoint times and poses must have matching length >= 1")
        if np.any(np.diff(times) <= 0.0):
            raise ValidationError("waypoint times must be strictly increasing")
        total = n_steps * dt
        if times[0] > 0.0 or times[-1] < total - 1e-12:
            raise ValidationError(
                f"waypoints must cover [0, {total:g}] s, got [{times[0]:g}, {times[-1]:g}]")
        t_grid = np.arange(n_steps + 1) * dt
        flat = poses.reshape(poses.shape[0], -1)
        interp = np.stack([np.interp(t_grid, times, flat[:, j])
                           for j in range(flat.shape[1])], axis=1)
        positions = interp.reshape((n_steps + 1,) + poses.shape[1:])
        vel = np.diff(positions.reshape(n_steps + 1, -1), axis=0) / dt
        if kind == "capsule":
            velocities = vel.reshape(n_steps, 2, 3)[:, 0]
        else:
            velocities = vel.reshape(n_steps, 3)
        active = None
        if active_until is not None:
            active = (t_grid[:-1] + 0.5 * dt) < active_until
        return Controller(kind=kind, radius=radius, positions=positions,
                          velocities=velocities, active=active)


@dataclass(frozen=True)
class LossWeights:
    """Scale factors for the objective terms."""

    dist: float = 1.0
    track: float = 1.0
    mask: float = 1.0

    def __post_init__(self):
        for name in ("dist", "track", "mask"):
            if getattr(self, name) < 0.0:
                raise ValidationError(f"loss weight {name} must be >= 0")


@dataclass(frozen=True)
class PinholeCamera:
    """Calibrated pinhole camera. extrinsic is the 3x4 world-to-camera [R|t]."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: tuple  # nested tuple, 3 rows x 4 cols

    def __post_init__(self):
        ext = np.asarray(self.extrinsic, dtype=float)
        if ext.shape != (3, 4):
            raise ValidationError(f"camera extrinsic must be 3x4, got {ext.shape}")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("camera resolution must be positive")
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValidationError("camera focal lengths must be positive")
        object.__setattr__(self, "extrinsic", tuple(map(tuple, ext.tolist())))

    def matrix(self) -> np.ndarray:
        return np.asarray(self.extrinsic, dtype=float)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points to pixel coordinates. Returns (uv (n,2), depth (n,))."""
        ext = self.matrix()
        cam = points @ ext[:, :3].T + ext[:, 3][None, :]
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z


def look_at_camera(position: Sequence[float], target: Sequence[float], *,
                   fx: float, fy: float, cx: float, cy: float,
                   width: int, height: int,
                   up: Sequence[float] = (0.0, 0.0, 1.0)) -> PinholeCamera:
    """Build a camera at `position` looking at `target` (x right, y down, z forward)."""
    p = np.asarray(position, dtype=float)
    q = np.asarray(target, dtype=float)
    fwd = q - p
    norm = np.linalg.norm(fwd)
    if norm == 0.0:
        raise ValidationError("camera position and target coincide")
    z = fwd / norm
    x = np.cross(z, np.asarray(up, dtype=float))
    xn = np.linalg.norm(x)
    if xn < 1e-12:
        raise ValidationError("camera viewing direction parallel to up vector")
    x = x / xn
    y = np.cross(z, x)
    r = np.stack([x, y, z], axis=0)
    t = -r @ p
    ext = np.concatenate([r, t[:, None]], axis=1)
    return PinholeCamera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                         extrinsic=tuple(map(tuple, ext.tolist())))


# Quadratic-stencil support means particles must keep this many cells of clearance
# from the outermost node layer for their 3x3x3 neighborhood to stay in bounds.
GRID_MARGIN_CELLS = 2.0

# Advisory CFL factor: warn when dt > CFL_FACTOR * dx / sound_speed.
CFL_FACTOR = 0.3


@dataclass
class Scene:
    """Complete simulation setup: grid, timestep, material, particles, boundaries."""

    grid_origin: np.ndarray
    grid_dx: float
    grid_dims: np.ndarray
    dt: float
    substeps_per_frame: int
    frames: int
    gravity: np.ndarray
    material: MaterialParams
    particles: ParticleState
    controllers: list[Controller] = field(default_factory=list)
    ground: GroundPlane | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    cameras: list[PinholeCamera] = field(default_factory=list)

    def __post_init__(self):
        self.grid_origin = np.asarray(self.grid_origin, dtype=float)
        self.grid_dims = np.asarray(self.grid_dims, dtype=np.int64)
        self.gravity = np.asarray(self.gravity, dtype=float)

    @property
    def n_steps(self) -> int:
        return self.frames * self.substeps_per_frame

    def with_material(self, material: MaterialParams) -> "Scene":
        return replace(self, material=material)

    def sound_speed(self, material: MaterialParams | None = None) -> float:
        m = material or self.material
        return math.sqrt(m.youngs_modulus / m.density)

    def grid_coords(self, x: np.ndarray) -> np.ndarray:
        return (x - self.grid_origin[None, :]) / self.grid_dx

    def validate(self, *, steps: int | None = None) -> None:
        """Reject ill-posed setups; warn (CflWarning) when dt exceeds the advisory bound."""
        if self.grid_dx <= 0.0:
            raise ValidationError(f"grid dx must be > 0, got {self.grid_dx}")
        if self.dt <= 0.0:
            raise ValidationError(f"dt must be > 0, got {self.dt}")
        if self.substeps_per_frame < 1 or self.frames < 0:
            raise ValidationError("substeps_per_frame must be >= 1 and frames >= 0")
        if np.any(self.grid_dims < 6):
            raise ValidationError(f"grid dims must be >= 6 nodes per axis, got {self.grid_dims}")
        xi = self.grid_coords(self.particles.x)
        lo_ok = xi >= GRID_MARGIN_CELLS
        hi_ok = xi <= (self.grid_dims[None, :] - 1) - GRID_MARGIN_CELLS
        bad = ~(lo_ok & hi_ok)
        if bad.any():
            idx = int(np.argwhere(bad.any(axis=1))[0][0])
            raise ValidationError(
                f"particle {idx} lies within {GRID_MARGIN_CELLS:g} cells of the grid boundary")
        n_steps = self.n_steps if steps is None else steps
        for i, ctrl in enumerate(self.controllers):
            if ctrl.steps < n_steps:
                raise ValidationError(
                    f"controller {i} trajectory covers {ctrl.steps} substeps but {n_steps} are needed")
            ctrl.validate(self.dt)
        if self.ground is not None:
            self.ground.unit_normal()
        dt_max = CFL_FACTOR * self.grid_dx / self.sound_speed()
        if self.dt > dt_max:
            warnings.warn(
                f"dt={self.dt:g} exceeds advisory stability bound {dt_max:g} "
                f"(0.3 dx / sqrt(E/rho))", CflWarning, stacklevel=2)


@dataclass
class ObservationFrame:
    """One observed frame: a point cloud, optional tracked markers, optional masks.

    tracked_ids index into the simulated particle array; tracked_valid flags
    occlusion. masks holds one boolean (h, w) array per camera.
    """

    frame: int
    points: np.ndarray
    tracked_ids: np.ndarray | None = None
    tracked_points: np.ndarray | None = None
    tracked_valid: np.ndarray | None = None
    masks: list[np.ndarray] | None = None
    controller_poses: list[np.ndarray] | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValidationError("observed points must have shape (m, 3)")
        if self.tracked_ids is not None:
            self.tracked_ids = np.asarray(self.tracked_ids, dtype=np.int64)
            self.tracked_points = np.asarray(self.tracked_points, dtype=np.float64)
            if self.tracked_valid is None:
                self.tracked_valid = np.ones(self.tracked_ids.shape[0], dtype=bool)
            self.tracked_valid = np.asarray(self.tracked_valid, dtype=bool)
            k = self.tracked_ids.shape[0]
            if self.tracked_points.shape != (k, 3) or self.tracked_valid.shape != (k,):
                raise ValidationError("tracked arrays must share leading dimension")


@dataclass
class ObservationSet:
    """Ordered observed frames plus the cameras the masks were rendered with."""

    frames: list[ObservationFrame]
    cameras: list[PinholeCamera] = field(default_factory=list)

    def __post_init__(self):
        indices = [f.frame for f in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValidationError("observation frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterable[ObservationFrame]:
        return iter(self.frames)
