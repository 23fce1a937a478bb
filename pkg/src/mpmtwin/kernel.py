"""Particle/grid transfer kernels and explicit time stepping.

The scheme is the affine transfer variant of the material point method on a
dense background grid with quadratic B-spline weights:

  scatter (p2g):  m_i = sum_p w_ip m_p
                  mom_i = sum_p w_ip m_p (v_p + C_p (x_i - x_p))
                  f_i = -sum_p V0_p P_p F_p^T grad(w_ip)
  grid update:    v_i <- mom_i / m_i + dt (f_i / m_i + g), then boundary conditions
  gather (g2p):   v_p = sum_i w_ip v_i
                  x_p <- x_p + dt v_p
                  C_p = (4 / dx^2) sum_i w_ip v_i (x_i - x_p)^T
  deformation:    F_trial = (I + dt sum_i v_i grad(w_ip)^T) F_p, then plastic projection

Forces use the stress of the step-start state (symplectic flavor); boundary
conditions apply in a fixed order: controller Dirichlet, ground Coulomb
friction, grid-border zeroing. All scatter reductions run in a fixed chunk
order so results are bit-reproducible, including in parallel mode.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .constitutive import Svd3, fixed_corotated_stress, svd3, von_mises_return_map
from .core import (
    Controller,
    GridField,
    MaterialParams,
    NumericalFault,
    ParticleState,
    Scene,
    lame_from_params,
)

__all__ = [
    "MASS_EPSILON",
    "CHUNK_SIZE",
    "STENCIL_OFFSETS",
    "set_default_workers",
    "get_default_workers",
    "quadratic_bspline",
    "quadratic_bspline_derivative",
    "bspline_coeffs",
    "StepWorkspace",
    "scatter_sum",
    "p2g",
    "grid_update",
    "g2p",
    "update_deformation",
    "step",
    "StepAux",
    "RolloutTape",
    "RolloutResult",
    "rollout",
]

# Grid nodes with scattered mass at or below this are treated as empty.
MASS_EPSILON = 1e-12

# Worker count used by workspaces that are not given one explicitly (0 = serial).
# Serial and parallel modes are bit-identical; this only trades wall time.
_default_workers = 0


def set_default_workers(n: int) -> None:
    """Set the scatter worker count for subsequently created workspaces."""
    global _default_workers
    _default_workers = max(0, int(n))


def get_default_workers() -> int:
    return _default_workers

# Fixed accumulation granularity for deterministic scatter, serial and parallel.
CHUNK_SIZE = 2048

# 3x3x3 stencil offsets in x-major order.
STENCIL_OFFSETS = np.array(
    [[i, j, k] for i in range(3) for j in range(3) for k in range(3)], dtype=np.int64)

# Second derivative of the quadratic B-spline per offset (constant per branch),
# selected per axis: value d2N/du2 at offsets 0, 1, 2.
_DD_BRANCH = np.array([1.0, -2.0, 1.0])
_DDSEL = _DD_BRANCH[STENCIL_OFFSETS.T]  # (3 axes, 27)


def quadratic_bspline(u: np.ndarray) -> np.ndarray:
    """Quadratic B-spline kernel N(u), piecewise on |u| < 0.5, 0.5 <= |u| < 1.5."""
    u = np.abs(np.asarray(u, dtype=np.float64))
    out = np.zeros_like(u)
    inner = u < 0.5
    outer = (u >= 0.5) & (u < 1.5)
    out[inner] = 0.75 - u[inner] ** 2
    out[outer] = 0.5 * (1.5 - u[outer]) ** 2
    return out


def quadratic_bspline_derivative(u: np.ndarray) -> np.ndarray:
    """dN/du of the quadratic B-spline."""
    u = np.asarray(u, dtype=np.float64)
    a = np.abs(u)
    out = np.zeros_like(u)
    inner = a < 0.5
    outer = (a >= 0.5) & (a < 1.5)
    out[inner] = -2.0 * u[inner]
    out[outer] = -np.sign(u[outer]) * (1.5 - a[outer])
    return out


def bspline_coeffs(fx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis weights and dN/dfx at the three stencil offsets.

    fx is the particle offset from the base node in cell units, in [0.5, 1.5).
    Returns (w, d), each (n, 3 axes, 3 offsets). Weights per axis sum to 1 and
    derivatives sum to 0 (partition of unity).
    """
    fx = np.asarray(fx, dtype=np.float64)
    w = np.empty(fx.shape + (3,))
    d = np.empty(fx.shape + (3,))
    w[..., 0] = 0.5 * (1.5 - fx) ** 2
    w[..., 1] = 0.75 - (fx - 1.0) ** 2
    w[..., 2] = 0.5 * (fx - 0.5) ** 2
    d[..., 0] = fx - 1.5
    d[..., 1] = -2.0 * (fx - 1.0)
    d[..., 2] = fx - 0.5
    return w, d


def scatter_sum(idx: np.ndarray, weights: np.ndarray, size: int, *,
                chunk_size: int = CHUNK_SIZE,
                pool: ThreadPoolExecutor | None = None) -> np.ndarray:
    """Deterministic scatter-add of per-particle stencil contributions.

    idx is (n, s) flat node indices; weights is (n, s) or (n, s, 3). The sum is
    accumulated per fixed-size particle chunk and the partials are reduced in
    chunk order, so the result does not depend on whether chunk partials were
    computed serially or by a thread pool.
    """
    n = idx.shape[0]
    vec = weights.ndim == 3
    out = np.zeros((size, 3)) if vec else np.zeros(size)

    def partial(lo: int, hi: int) -> np.ndarray:
        flat = idx[lo:hi].ravel()
        if vec:
            acc = np.empty((size, 3))
            for a in range(3):
                acc[:, a] = np.bincount(flat, weights[lo:hi, :, a].ravel(), minlength=size)
            return acc
        return np.bincount(flat, weights[lo:hi].ravel(), minlength=size)

    bounds = [(lo, min(lo + chunk_size, n)) for lo in range(0, n, chunk_size)]
    if pool is not None and len(bounds) > 1:
        partials = list(pool.map(lambda b: partial(*b), bounds))
    else:
        partials = [partial(*b) for b in bounds]
    for p in partials:
        out += p
    return out


def _flat_index(base_plus_off: np.ndarray, dims: np.ndarray) -> np.ndarray:
    return (base_plus_off[..., 0] * dims[1] + base_plus_off[..., 1]) * dims[2] + base_plus_off[..., 2]


@dataclass
class StepWorkspace:
    """Reusable buffers and per-step stencil data shared by the transfer kernels.

    refresh() must be called whenever particle positions change; p2g/g2p and the
    deformation update consume the cached weights, weight gradients, node
    indices, and node-to-particle offsets.
    """

    origin: np.ndarray
    dx: float
    dims: np.ndarray
    chunk_size: int = CHUNK_SIZE
    n_workers: int = 0  # 0 = serial

    # Filled by refresh():
    n: int = 0
    base: np.ndarray | None = None
    fx: np.ndarray | None = None
    wsel: np.ndarray | None = None   # (3, n, 27) per-axis weight factors
    dsel: np.ndarray | None = None   # (3, n, 27) per-axis dN/dfx factors
    weights: np.ndarray | None = None    # (n, 27)
    grad_weights: np.ndarray | None = None  # (n, 27, 3), physical units 1/m
    idx: np.ndarray | None = None    # (n, 27) flat node indices
    dpos: np.ndarray | None = None   # (n, 27, 3) node minus particle positions

    _pool: ThreadPoolExecutor | None = field(default=None, repr=False)
    _node_pos: np.ndarray | None = field(default=None, repr=False)
    _border: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def for_scene(cls, scene: Scene, *, n_workers: int | None = None) -> "StepWorkspace":
        return cls(origin=np.asarray(scene.grid_origin, dtype=float),
                   dx=float(scene.grid_dx),
                   dims=np.asarray(scene.grid_dims, dtype=np.int64),
                   n_workers=_default_workers if n_workers is None else n_workers)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.dims))

    @property
    def inv_dx(self) -> float:
        return 1.0 / self.dx

    def pool(self) -> ThreadPoolExecutor | None:
        if self.n_workers and self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.n_workers)
        return self._pool if self.n_workers else None

    def node_positions(self) -> np.ndarray:
        if self._node_pos is None:
            ii, jj, kk = np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij")
            nidx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
            self._node_pos = self.origin[None, :] + nidx * self.dx
        return self._node_pos

    def border_mask(self) -> np.ndarray:
        if self._border is None:
            ii, jj, kk = np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij")
            nidx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
            self._border = np.any((nidx == 0) | (nidx == self.dims[None, :] - 1), axis=1)
        return self._border

    def refresh(self, x: np.ndarray, *, step: int | None = None) -> None:
        """Recompute stencil weights, gradients, and node indices for positions x."""
        xi = (x - self.origin[None, :]) * self.inv_dx
        base = np.floor(xi - 0.5).astype(np.int64)
        bad = np.any((base < 0) | (base + 2 > self.dims[None, :] - 1), axis=1)
        if bad.any():
            p = int(np.argmax(bad))
            raise NumericalFault("particle stencil outside grid", step=step, particle=p)
        fx = xi - base
        w, d = bspline_coeffs(fx)  # (n, 3, 3)
        off = STENCIL_OFFSETS  # (27, 3)
        # Per-axis factors at each of the 27 offsets.
        wsel = np.stack([w[:, a, off[:, a]] for a in range(3)], axis=0)
        dsel = np.stack([d[:, a, off[:, a]] for a in range(3)], axis=0)
        weights = wsel[0] * wsel[1] * wsel[2]
        grad = np.empty((x.shape[0], 27, 3))
        grad[:, :, 0] = dsel[0] * wsel[1] * wsel[2]
        grad[:, :, 1] = wsel[0] * dsel[1] * wsel[2]
        grad[:, :, 2] = wsel[0] * wsel[1] * dsel[2]
        grad *= self.inv_dx
        nodes = base[:, None, :] + off[None, :, :]
        self.n = x.shape[0]
        self.base = base
        self.fx = fx
        self.wsel = wsel
        self.dsel = dsel
        self.weights = weights
        self.grad_weights = grad
        self.idx = _flat_index(nodes, self.dims)
        self.dpos = nodes * self.dx + self.origin[None, None, :] - x[:, None, :]

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def p2g(state: ParticleState, material: MaterialParams, ws: StepWorkspace, *,
        stress: np.ndarray | None = None, step_index: int | None = None,
        force_out: np.ndarray | None = None) -> tuple[GridField, np.ndarray]:
    """Scatter particle mass, affine momentum, and internal force to the grid.

    Returns (grid, force). Grid velocities are momentum divided by mass where
    mass exceeds MASS_EPSILON and zero elsewhere. Stencils in ws must be fresh
    for state.x.
    """
    state.check_finite(step=step_index)
    if stress is None:
        mu, lam = lame_from_params(material)
        stress = fixed_corotated_stress(state.f, mu, lam)
    w = ws.weights
    size = ws.n_nodes
    pool = ws.pool()

    mass = scatter_sum(ws.idx, w * state.m[:, None], size,
                       chunk_size=ws.chunk_size, pool=pool)
    # Affine momentum contribution v_p + C_p (x_i - x_p) per stencil node.
    v_aff = state.v[:, None, :] + np.einsum("nab,nob->noa", state.c, ws.dpos)
    mom = scatter_sum(ws.idx, (w * state.m[:, None])[:, :, None] * v_aff, size,
                      chunk_size=ws.chunk_size, pool=pool)
    # Internal force: -V0 P F^T grad(w).
    b = state.v0[:, None, None] * (stress @ np.swapaxes(state.f, 1, 2))
    f_contrib = -np.einsum("nab,nob->noa", b, ws.grad_weights)
    force = scatter_sum(ws.idx, f_contrib, size, chunk_size=ws.chunk_size, pool=pool)

    act = mass > MASS_EPSILON
    vel = np.zeros((size, 3))
    vel[act] = mom[act] / mass[act, None]
    grid = GridField(origin=ws.origin, dx=ws.dx, dims=ws.dims, mass=mass, vel=vel)
    if force_out is not None:
        force_out[:] = force
    return grid, force


@dataclass
class GroundAux:
    """Friction application record, kept for the adjoint."""

    normal: np.ndarray
    mu: float
    applied: np.ndarray      # nodes below plane and approaching
    slip: np.ndarray         # subset scaled tangentially
    stick: np.ndarray        # subset zeroed
    vn: np.ndarray           # normal speed at applied nodes (full-size array)
    vt: np.ndarray           # tangential velocity before friction (full-size)
    vt_norm: np.ndarray


@dataclass
class GridAux:
    """Everything grid_update did, in application order, for adjoint replay."""

    act: np.ndarray
    vel0: np.ndarray
    force: np.ndarray
    vel1: np.ndarray
    dirichlet: list[np.ndarray]
    vel_pre_friction: np.ndarray | None
    ground: GroundAux | None


def grid_update(grid: GridField, force: np.ndarray, scene: Scene, t: int,
                ws: StepWorkspace, *, material: MaterialParams | None = None,
                keep_aux: bool = False) -> GridAux | None:
    """Apply forces, gravity, and boundary conditions to grid velocities in place.

    Order: momentum update on nodes with mass above MASS_EPSILON (massless nodes
    are skipped even if they carry force), controller Dirichlet assignment,
    ground Coulomb friction, border zeroing.
    """
    act = grid.mass > MASS_EPSILON
    vel = grid.vel
    vel0 = vel.copy() if keep_aux else None
    vel[act] += scene.dt * (force[act] / grid.mass[act, None] + scene.gravity[None, :])
    vel1 = vel.copy() if keep_aux else None

    node_pos = ws.node_positions()
    dirichlet_masks: list[np.ndarray] = []
    for ctrl in scene.controllers:
        if not ctrl.is_active(t):
            continue
        mask = ctrl.contains(node_pos, t, inflate=ws.dx)
        vel[mask] = ctrl.velocity(t)[None, :]
        if keep_aux:
            dirichlet_masks.append(mask)

    vel_pre_friction = vel.copy() if keep_aux else None
    ground_aux = None
    if scene.ground is not None:
        normal = scene.ground.unit_normal()
        below = node_pos @ normal < scene.ground.height
        vn = vel @ normal
        applied = below & (vn < 0.0)
        if np.any(applied) or keep_aux:
            mu_f = (material or scene.material).friction_mu
            vt = vel - vn[:, None] * normal[None, :]
            vt_norm = np.linalg.norm(vt, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = 1.0 - mu_f * np.abs(vn) / vt_norm
            slip = applied & (vt_norm > 0.0) & (scale > 0.0)
            stick = applied & ~slip
            vel[slip] = scale[slip, None] * vt[slip]
            vel[stick] = 0.0
            if keep_aux:
                ground_aux = GroundAux(normal=normal, mu=mu_f, applied=applied,
                                       slip=slip, stick=stick, vn=vn, vt=vt,
                                       vt_norm=vt_norm)

    vel[ws.border_mask()] = 0.0
    if not keep_aux:
        return None
    return GridAux(act=act, vel0=vel0, force=force, vel1=vel1,
                   dirichlet=dirichlet_masks, vel_pre_friction=vel_pre_friction,
                   ground=ground_aux)


def _stencil_ok(xi: np.ndarray, dims: np.ndarray) -> np.ndarray:
    base = np.floor(xi - 0.5)
    return np.all((base >= 0) & (base + 2 <= dims[None, :] - 1), axis=1)


def g2p(grid: GridField, state: ParticleState, ws: StepWorkspace, dt: float, *,
        step_index: int | None = None,
        vg: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gather grid velocities back to particles and advect.

    Returns (v_new, x_new, c_new). Faults if any particle is advected outside
    the region where its next stencil stays in bounds.
    """
    if vg is None:
        vg = grid.vel[ws.idx]
    w = ws.weights
    v_new = np.einsum("no,noa->na", w, vg)
    x_new = state.x + dt * v_new
    gamma = 4.0 / (ws.dx * ws.dx)
    c_new = gamma * np.einsum("no,noa,nob->nab", w, vg, ws.dpos)
    xi = (x_new - ws.origin[None, :]) * ws.inv_dx
    ok = _stencil_ok(xi, ws.dims)
    if not ok.all():
        p = int(np.argmax(~ok))
        raise NumericalFault("particle advected outside safe grid margin",
                             step=step_index, particle=p)
    return v_new, x_new, c_new


def update_deformation(grid: GridField, state: ParticleState, ws: StepWorkspace,
                       dt: float, material: MaterialParams, *,
                       step_index: int | None = None, vg: np.ndarray | None = None,
                       return_trial: bool = False):
    """Advance elastic deformation gradients and apply the plastic projection.

    F_trial = (I + dt sum_i v_i grad(w)^T) F. Faults with "time step too large"
    if any trial determinant is non-positive. With a finite yield stress the
    von Mises return map projects F_trial; otherwise it passes through.
    """
    if vg is None:
        vg = grid.vel[ws.idx]
    gradv = np.einsum("noa,nob->nab", vg, ws.grad_weights)
    f_trial = (np.eye(3)[None, :, :] + dt * gradv) @ state.f
    det = np.linalg.det(f_trial)
    if np.any(det <= 0.0) or not np.all(np.isfinite(det)):
        p = int(np.argmax((det <= 0.0) | ~np.isfinite(det)))
        raise NumericalFault("deformation inverted: time step too large",
                             step=step_index, particle=p)
    if material.is_elastic:
        f_new = f_trial
    else:
        mu, _ = lame_from_params(material)
        f_new = von_mises_return_map(f_trial, mu, material.yield_stress)
    if return_trial:
        return f_new, f_trial, gradv
    return f_new


@dataclass
class StepAux:
    """Forward intermediates of one substep, the adjoint's replay record."""

    wsel: np.ndarray
    dsel: np.ndarray
    weights: np.ndarray
    grad_weights: np.ndarray
    idx: np.ndarray
    dpos: np.ndarray
    stress_decomp: Svd3
    stress: np.ndarray
    grid_mass: np.ndarray
    grid_aux: GridAux
    vel2: np.ndarray          # grid velocities after all boundary conditions
    vg: np.ndarray            # gathered per-particle node velocities
    gradv: np.ndarray
    f_trial: np.ndarray


def step(scene: Scene, state: ParticleState, t: int, ws: StepWorkspace | None = None,
         *, material: MaterialParams | None = None,
         keep_aux: bool = False) -> tuple[ParticleState, StepAux | None]:
    """One explicit substep. Returns the new particle state (masses shared)."""
    if ws is None:
        ws = StepWorkspace.for_scene(scene)
    material = material or scene.material
    ws.refresh(state.x, step=t)
    mu, lam = lame_from_params(material)
    decomp = svd3(state.f) if keep_aux else None
    stress = fixed_corotated_stress(state.f, mu, lam, decomp=decomp)
    grid, force = p2g(state, material, ws, stress=stress, step_index=t)
    grid_aux = grid_update(grid, force, scene, t, ws, material=material,
                           keep_aux=keep_aux)
    vg = grid.vel[ws.idx]
    v_new, x_new, c_new = g2p(grid, state, ws, scene.dt, step_index=t, vg=vg)
    if keep_aux:
        f_new, f_trial, gradv = update_deformation(
            grid, state, ws, scene.dt, material, step_index=t, vg=vg, return_trial=True)
    else:
        f_new = update_deformation(grid, state, ws, scene.dt, material,
                                   step_index=t, vg=vg)
    new_state = ParticleState(x=x_new, v=v_new, f=f_new, c=c_new,
                              m=state.m, v0=state.v0)
    if not keep_aux:
        return new_state, None
    aux = StepAux(wsel=ws.wsel, dsel=ws.dsel, weights=ws.weights,
                  grad_weights=ws.grad_weights, idx=ws.idx, dpos=ws.dpos,
                  stress_decomp=decomp, stress=stress, grid_mass=grid.mass,
                  grid_aux=grid_aux, vel2=grid.vel, vg=vg, gradv=gradv,
                  f_trial=f_trial)
    return new_state, aux


@dataclass
class RolloutTape:
    """Checkpointed substep states for reverse-mode replay.

    Stores every stride-th state plus the final one. state(s) returns the exact
    state at substep s, re-simulating deterministically from the nearest earlier
    checkpoint when s falls between checkpoints.
    """

    scene: Scene
    material: MaterialParams
    stride: int
    n_substeps: int
    start_step: int
    states: list[ParticleState]

    def checkpoint_count(self) -> int:
        return len(self.states)

    def state(self, s: int, ws: StepWorkspace | None = None) -> ParticleState:
        if not 0 <= s <= self.n_substeps:
            raise ValueError(f"substep {s} outside [0, {self.n_substeps}]")
        q, r = divmod(s, self.stride)
        if r == 0:
            return self.states[q]
        if s == self.n_substeps:
            return self.states[-1]
        if ws is None:
            ws = StepWorkspace.for_scene(self.scene)
        st = self.states[q].copy()
        for i in range(q * self.stride, s):
            st, _ = step(self.scene, st, self.start_step + i, ws, material=self.material)
        return st


@dataclass
class RolloutResult:
    """Frame-boundary positions (frames + 1 entries, initial state first)."""

    positions: np.ndarray
    final_state: ParticleState
    tape: RolloutTape | None = None


def rollout(scene: Scene, frames: int | None = None, *,
            material: MaterialParams | None = None,
            state: ParticleState | None = None,
            ws: StepWorkspace | None = None,
            start_step: int = 0,
            tape_stride: int | None = None) -> RolloutResult:
    """Simulate whole frames, recording particle positions at frame boundaries.

    A numerical fault mid-run aborts with the last completed frame index
    attached. frames=0 returns just the initial state.
    """
    frames = scene.frames if frames is None else frames
    if frames < 0:
        raise ValueError("frames must be >= 0")
    material = material or scene.material
    st = (state if state is not None else scene.particles).copy()
    if ws is None:
        ws = StepWorkspace.for_scene(scene)
    spf = scene.substeps_per_frame
    n_sub = frames * spf
    positions = np.empty((frames + 1, st.n, 3))
    positions[0] = st.x
    tape = None
    if tape_stride is not None:
        if tape_stride < 1:
            raise ValueError("tape_stride must be >= 1")
        tape = RolloutTape(scene=scene, material=material, stride=tape_stride,
                           n_substeps=n_sub, start_step=start_step,
                           states=[st.copy()])
    for s in range(n_sub):
        try:
            st, _ = step(scene, st, start_step + s, ws, material=material)
        except NumericalFault as err:
            raise NumericalFault(err.base_message, step=err.step,
                                 particle=err.particle, frame=s // spf) from err
        if tape is not None and ((s + 1) % tape_stride == 0 or s + 1 == n_sub):
            tape.states.append(st.copy())
        if (s + 1) % spf == 0:
            positions[(s + 1) // spf] = st.x
    return RolloutResult(positions=positions, final_state=st, tape=tape)
