"""Reverse-mode differentiation of rollouts with respect to material parameters.

The adjoint walks the substep chain backwards, replaying each substep forward
from the nearest checkpoint to rebuild intermediates, then pulling gradients
through gather/grid/scatter, the corotated stress (via the SVD differential),
and the plastic projection. Boundary Dirichlet assignments are detached (zero
adjoint through overwritten velocities); ground friction is differentiated
through its slip branch.

Parameter gradients are reported in normalized units (E/1e6, nu, rho/1e3,
y/1e5) for the four-vector (youngs_modulus, poissons_ratio, density,
yield_stress).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constitutive import Svd3, svd3
from .core import (
    MaterialParams,
    NumericalFault,
    ObservationFrame,
    ObservationSet,
    PARAM_NAMES,
    PARAM_SCALES,
    ParticleState,
    Scene,
    ValidationError,
    material_from_normalized,
    normalize_params,
)
from .kernel import StepWorkspace, _DDSEL, scatter_sum, step
from .loss import LossBreakdown, frame_objective

__all__ = [
    "ParamGradient",
    "svd3_backward",
    "corotated_stress_backward",
    "return_map_backward",
    "rollout_grad",
    "evaluate_objective",
    "finite_diff_grad",
    "OBJECTIVE_TERMS",
]

# Which loss terms each objective uses.
OBJECTIVE_TERMS = {
    "offline": ("dist", "track"),
    "online": ("dist", "mask"),
}

# Clamp for the inverse singular-value-gap factors in the SVD differential.
SVD_GAP_EPS = 1e-9


@dataclass
class ParamGradient:
    """Objective gradient in normalized parameter space.

    available marks components whose value could be computed; finite_diff_grad
    clears entries whose perturbed rollouts faulted.
    """

    d_youngs: float = 0.0
    d_poissons: float = 0.0
    d_density: float = 0.0
    d_yield: float = 0.0
    available: np.ndarray = field(default_factory=lambda: np.ones(4, dtype=bool))

    def as_array(self) -> np.ndarray:
        return np.array([self.d_youngs, self.d_poissons, self.d_density, self.d_yield])

    @staticmethod
    def from_array(a: np.ndarray, available: np.ndarray | None = None) -> "ParamGradient":
        g = ParamGradient(float(a[0]), float(a[1]), float(a[2]), float(a[3]))
        if available is not None:
            g.available = np.asarray(available, dtype=bool).copy()
        return g


def _clamped_gap(sigma: np.ndarray) -> np.ndarray:
    """K[i, j] = 1 / (sigma_j^2 - sigma_i^2) with the gap clamped away from zero."""
    s2 = sigma * sigma
    denom = s2[..., None, :] - s2[..., :, None]
    mag = np.maximum(np.abs(denom), SVD_GAP_EPS)
    denom_safe = np.where(denom >= 0.0, mag, -mag)
    k = 1.0 / denom_safe
    for i in range(3):
        k[..., i, i] = 0.0
    return k


def svd3_backward(decomp: Svd3, g_u: np.ndarray | None, g_sigma: np.ndarray | None,
                  g_v: np.ndarray | None) -> np.ndarray:
    """Pull cotangents of (U, sigma, V) back to the decomposed matrix.

    gA = U [ diag(g_sigma) + K o (U^T gU - gU^T U) Sigma
             + Sigma K o (V^T gV - gV^T V) ] V^T,  K_ij = 1/(sigma_j^2 - sigma_i^2).
    """
    u, s, v = decomp.u, decomp.sigma, decomp.v
    inner = np.zeros(u.shape)
    if g_sigma is not None:
        ii = np.arange(3)
        inner[..., ii, ii] = g_sigma
    if g_u is not None or g_v is not None:
        k = _clamped_gap(s)
        if g_u is not None:
            m_u = np.swapaxes(u, -1, -2) @ g_u
            m_u = m_u - np.swapaxes(m_u, -1, -2)
            inner += (k * m_u) * s[..., None, :]
        if g_v is not None:
            m_v = np.swapaxes(v, -1, -2) @ g_v
            m_v = m_v - np.swapaxes(m_v, -1, -2)
            inner += s[..., :, None] * (k * m_v)
    return u @ inner @ np.swapaxes(v, -1, -2)


def corotated_stress_backward(decomp: Svd3, mu: float, lam: float,
                              g_p: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Backward of P = U diag(p_hat(sigma)) V^T through the SVD of F.

    Returns (gF, d/dmu, d/dlam), the parameter derivatives summed over the batch.
    """
    u, s, v = decomp.u, decomp.sigma, decomp.v
    j = np.prod(s, axis=-1, keepdims=True)
    p_hat = 2.0 * mu * (s - 1.0) + lam * (j - 1.0) * j / s
    g_u = (g_p @ v) * p_hat[..., None, :]
    g_v = (np.swapaxes(g_p, -1, -2) @ u) * p_hat[..., None, :]
    t = np.swapaxes(u, -1, -2) @ g_p @ v
    g_phat = np.einsum("...ii->...i", t)
    g_mu = float(np.sum(g_phat * 2.0 * (s - 1.0)))
    g_lam = float(np.sum(g_phat * (j - 1.0) * j / s))
    # dp_hat_i/dsigma_j = 2 mu delta_ij + lam (2J-1) J/(sigma_i sigma_j)
    #                     - lam (J^2 - J)/sigma_i^2 delta_ij
    inv_s = 1.0 / s
    sum_term = np.sum(g_phat * inv_s, axis=-1, keepdims=True)
    g_sigma = (2.0 * mu * g_phat
               + lam * (2.0 * j - 1.0) * j * inv_s * sum_term
               - lam * (j * j - j) * inv_s * inv_s * g_phat)
    g_f = svd3_backward(decomp, g_u, g_sigma, g_v)
    return g_f, g_mu, g_lam


def return_map_backward(trial_decomp: Svd3, mu: float, yield_stress: float,
                        g_f_new: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Backward of the von Mises projection applied to F_trial.

    Returns (gF_trial, d/dmu, d/dy). Below-yield lanes pass the cotangent
    through unchanged; yielded lanes differentiate the radial Hencky-space
    projection, including its dependence on k = y / (2 mu).
    """
    u, s, v = trial_decomp.u, trial_decomp.sigma, trial_decomp.v
    eps = np.log(s)
    trace = np.sum(eps, axis=-1, keepdims=True)
    dev = eps - trace / 3.0
    dev_norm = np.linalg.norm(dev, axis=-1, keepdims=True)
    k = yield_stress / (2.0 * mu)
    yielded = dev_norm[..., 0] > k
    out = g_f_new.copy()
    if not np.any(yielded):
        return out, 0.0, 0.0
    uy, sy, vy = u[yielded], s[yielded], v[yielded]
    g_out = g_f_new[yielded]
    eta = dev_norm[yielded]  # > k > 0 on yielded lanes
    n_hat = dev[yielded] / eta
    eps_proj = trace[yielded] / 3.0 + k * n_hat
    sigma_new = np.exp(eps_proj)

    g_u = (g_out @ vy) * sigma_new[..., None, :]
    g_v = (np.swapaxes(g_out, -1, -2) @ uy) * sigma_new[..., None, :]
    t = np.swapaxes(uy, -1, -2) @ g_out @ vy
    g_sigma_new = np.einsum("...ii->...i", t)
    g_eps_proj = g_sigma_new * sigma_new

    g_k = float(np.sum(n_hat * g_eps_proj))
    g_y = g_k / (2.0 * mu)
    g_mu = -g_k * yield_stress / (2.0 * mu * mu)

    # d eps_proj / d eps = (1/3) 1 1^T + (k/||dev||) P_dev (I - n n^T).
    s_tr = np.sum(g_eps_proj, axis=-1, keepdims=True)
    w = g_eps_proj - np.sum(n_hat * g_eps_proj, axis=-1, keepdims=True) * n_hat
    w_dev = w - np.mean(w, axis=-1, keepdims=True)
    g_eps = s_tr / 3.0 + (k / eta) * w_dev
    g_sigma = g_eps / sy
    out[yielded] = svd3_backward(Svd3(u=uy, sigma=sy, v=vy), g_u, g_sigma, g_v)
    return out, g_mu, g_y


@dataclass
class _Adjoint:
    x: np.ndarray
    v: np.ndarray
    f: np.ndarray
    c: np.ndarray

    @staticmethod
    def zeros(n: int) -> "_Adjoint":
        return _Adjoint(np.zeros((n, 3)), np.zeros((n, 3)),
                        np.zeros((n, 3, 3)), np.zeros((n, 3, 3)))


@dataclass
class _ParamAccum:
    mu: float = 0.0
    lam: float = 0.0
    y: float = 0.0
    m_p: np.ndarray | None = None  # per-particle mass gradient


def _weight_hessian(wsel: np.ndarray, dsel: np.ndarray, inv_dx: float) -> np.ndarray:
    """Second derivatives of the 27 stencil weights w.r.t. particle position.

    Returns (n, 27, 3, 3): H[a, c] = d(grad w)_a / dx_c. Diagonal entries use
    the constant per-branch second derivative of the quadratic kernel.
    """
    n = wsel.shape[1]
    h = np.empty((n, 27, 3, 3))
    scale = inv_dx * inv_dx
    w0, w1, w2 = wsel[0], wsel[1], wsel[2]
    d0, d1, d2 = dsel[0], dsel[1], dsel[2]
    dd0 = _DDSEL[0][None, :]
    dd1 = _DDSEL[1][None, :]
    dd2 = _DDSEL[2][None, :]
    h[:, :, 0, 0] = dd0 * w1 * w2
    h[:, :, 1, 1] = w0 * dd1 * w2
    h[:, :, 2, 2] = w0 * w1 * dd2
    h[:, :, 0, 1] = h[:, :, 1, 0] = d0 * d1 * w2
    h[:, :, 0, 2] = h[:, :, 2, 0] = d0 * w1 * d2
    h[:, :, 1, 2] = h[:, :, 2, 1] = w0 * d1 * d2
    h *= scale
    return h


def _backward_substep(scene: Scene, material: MaterialParams, state: ParticleState,
                      t: int, ws: StepWorkspace, adj: _Adjoint,
                      accum: _ParamAccum) -> _Adjoint:
    """Replay substep t from `state` and pull the adjoint back through it."""
    _, aux = step(scene, state, t, ws, material=material, keep_aux=True)
    mu, lam = material.lame()
    dt = scene.dt
    n = state.n
    gamma = 4.0 / (ws.dx * ws.dx)

    g_x = np.zeros((n, 3))
    g_v = np.zeros((n, 3))
    g_c = np.zeros((n, 3, 3))
    g_w = np.zeros((n, 27))
    g_gw = np.zeros((n, 27, 3))
    g_dpos = np.zeros((n, 27, 3))
    g_vg = np.zeros((n, 27, 3))

    # Plastic projection.
    if material.is_elastic:
        g_f_trial = adj.f
    else:
        g_f_trial, d_mu, d_y = return_map_backward(
            svd3(aux.f_trial), mu, material.yield_stress, adj.f)
        accum.mu += d_mu
        accum.y += d_y

    # F_trial = (I + dt gradv) F.
    m_mat = np.eye(3)[None, :, :] + dt * aux.gradv
    g_gradv = dt * (g_f_trial @ np.swapaxes(state.f, 1, 2))
    g_f = np.swapaxes(m_mat, 1, 2) @ g_f_trial

    # gradv = sum_o vg grad_w^T.
    g_vg += np.einsum("nab,nob->noa", g_gradv, aux.grad_weights)
    g_gw += np.einsum("nab,noa->nob", g_gradv, aux.vg)

    # C' = gamma sum_o w vg dpos^T.
    g_vg += gamma * aux.weights[:, :, None] * np.einsum("nab,nob->noa", adj.c, aux.dpos)
    g_w += gamma * np.einsum("nab,noa,nob->no", adj.c, aux.vg, aux.dpos)
    g_dpos += gamma * aux.weights[:, :, None] * np.einsum("nab,noa->nob", adj.c, aux.vg)

    # x' = x + dt v', v' = sum_o w vg.
    g_x += adj.x
    g_vtot = adj.v + dt * adj.x
    g_vg += aux.weights[:, :, None] * g_vtot[:, None, :]
    g_w += np.einsum("noa,na->no", aux.vg, g_vtot)

    # Gather adjoint onto the grid.
    g_vel = scatter_sum(aux.idx, g_vg, ws.n_nodes, chunk_size=ws.chunk_size,
                        pool=ws.pool())

    # Boundary conditions, reverse order. Border zeroing first.
    g_vel[ws.border_mask()] = 0.0
    ga = aux.grid_aux
    if ga.ground is not None:
        gr = ga.ground
        if np.any(gr.slip):
            sl = gr.slip
            nrm = gr.normal
            vt = gr.vt[sl]
            vtn = gr.vt_norm[sl]
            vn = gr.vn[sl]
            scale = 1.0 - gr.mu * np.abs(vn) / vtn
            gout = g_vel[sl]
            dot_n = gout @ nrm
            term1 = scale[:, None] * (gout - dot_n[:, None] * nrm[None, :])
            d = np.einsum("na,na->n", vt, gout)
            # d scale / d v = mu (n / |vt| - vn vt / |vt|^3) on the approaching side.
            term2 = d[:, None] * gr.mu * (nrm[None, :] / vtn[:, None]
                                          - (vn / vtn ** 3)[:, None] * vt)
            g_vel[sl] = term1 + term2
        if np.any(gr.stick):
            g_vel[gr.stick] = 0.0
    for mask in ga.dirichlet:
        g_vel[mask] = 0.0  # Dirichlet assignments are detached

    # Momentum update: vel1 = vel0 + dt (force / m + g) on active nodes.
    act = ga.act
    mass = aux.grid_mass
    g_vel0 = np.where(act[:, None], g_vel, 0.0)
    g_force = np.zeros_like(g_vel)
    g_force[act] = dt * g_vel[act] / mass[act, None]
    g_mass_node = np.zeros(ws.n_nodes)
    g_mass_node[act] = -dt * np.einsum("na,na->n", ga.force[act], g_vel[act]) / (mass[act] ** 2)

    # Normalization: vel0 = mom / m.
    g_mom = np.zeros_like(g_vel)
    g_mom[act] = g_vel0[act] / mass[act, None]
    g_mass_node[act] += -np.einsum("na,na->n", ga.vel0[act], g_vel0[act]) / mass[act]

    # Scatter adjoints back to particle stencil contributions.
    g_force_po = g_force[aux.idx]
    b = state.v0[:, None, None] * (aux.stress @ np.swapaxes(state.f, 1, 2))
    g_b = -np.einsum("noa,nob->nab", g_force_po, aux.grad_weights)
    g_gw += -np.einsum("nab,noa->nob", b, g_force_po)
    g_stress = state.v0[:, None, None] * (g_b @ state.f)
    g_f += state.v0[:, None, None] * (np.swapaxes(g_b, 1, 2) @ aux.stress)
    g_f_stress, d_mu, d_lam = corotated_stress_backward(aux.stress_decomp, mu, lam, g_stress)
    g_f += g_f_stress
    accum.mu += d_mu
    accum.lam += d_lam

    g_mom_po = g_mom[aux.idx]
    wm = aux.weights * state.m[:, None]
    g_v += np.einsum("no,noa->na", wm, g_mom_po)
    g_c += np.einsum("no,noa,nob->nab", wm, g_mom_po, aux.dpos)
    g_dpos += wm[:, :, None] * np.einsum("nab,noa->nob", state.c, g_mom_po)
    v_aff = state.v[:, None, :] + np.einsum("nab,nob->noa", state.c, aux.dpos)
    aff_dot = np.einsum("noa,noa->no", v_aff, g_mom_po)
    g_w += state.m[:, None] * aff_dot
    g_mp = np.einsum("no,no->n", aux.weights, aff_dot)

    g_mass_po = g_mass_node[aux.idx]
    g_w += state.m[:, None] * g_mass_po
    g_mp += np.einsum("no,no->n", aux.weights, g_mass_po)
    accum.m_p += g_mp

    # dpos = node - x.
    g_x -= g_dpos.sum(axis=1)

    # Stencil weights: dW/dx is exactly grad_w; grad_w needs the weight Hessian.
    g_x += np.einsum("no,noa->na", g_w, aux.grad_weights)
    hess = _weight_hessian(aux.wsel, aux.dsel, ws.inv_dx)
    g_x += np.einsum("noa,noac->nc", g_gw, hess)

    return _Adjoint(x=g_x, v=g_v, f=g_f, c=g_c)


def _lame_chain(material: MaterialParams, g_mu: float, g_lam: float) -> tuple[float, float]:
    """Map (d/dmu, d/dlam) to (d/dE, d/dnu)."""
    e = material.youngs_modulus
    nu = material.poissons_ratio
    denom = (1.0 + nu) * (1.0 - 2.0 * nu)
    d_e = g_mu / (2.0 * (1.0 + nu)) + g_lam * nu / denom
    d_nu = (g_mu * (-e / (2.0 * (1.0 + nu) ** 2))
            + g_lam * e * (1.0 + 2.0 * nu * nu) / (denom * denom))
    return d_e, d_nu


def _frozen_mask(frozen: tuple[str, ...] | list[str]) -> np.ndarray:
    unknown = set(frozen) - set(PARAM_NAMES)
    if unknown:
        raise ValidationError(f"unknown frozen parameter names: {sorted(unknown)}")
    return np.array([name in frozen for name in PARAM_NAMES])


def _state_for_material(state: ParticleState, material: MaterialParams) -> ParticleState:
    """Copy of `state` with masses rebuilt as density * rest volume."""
    out = state.copy()
    out.m = material.density * out.v0
    return out


def _seed_substeps(scene: Scene, observations: ObservationSet | None,
                   objective: str, horizon: int | None,
                   online_frame: ObservationFrame | None) -> dict[int, ObservationFrame]:
    spf = scene.substeps_per_frame
    if objective == "offline":
        if observations is None or len(observations) == 0:
            raise ValidationError("offline objective requires observations")
        seeds = {}
        for fr in observations:
            if not 1 <= fr.frame <= scene.frames:
                raise ValidationError(
                    f"observation frame {fr.frame} outside rollout range 1..{scene.frames}")
            seeds[fr.frame * spf] = fr
        return seeds
    if objective == "online":
        if online_frame is None:
            raise ValidationError("online objective requires a target frame")
        h = spf if horizon is None else horizon
        return {h: online_frame}
    raise ValidationError(f"unknown objective {objective!r}")


def rollout_grad(scene: Scene, observations: ObservationSet | None = None, *,
                 material: MaterialParams | None = None,
                 objective: str = "offline",
                 horizon: int | None = None,
                 online_frame: ObservationFrame | None = None,
                 initial_state: ParticleState | None = None,
                 start_step: int = 0,
                 frozen: tuple[str, ...] = (),
                 checkpoint_stride: int = 1,
                 splat_radius: float = 2.0,
                 ws: StepWorkspace | None = None) -> tuple[LossBreakdown, ParamGradient]:
    """Loss and its parameter gradient through a full rollout.

    objective "offline" compares frame-boundary states against observations
    with the (dist, track) terms; "online" runs `horizon` substeps and compares
    only the final state with the (dist, mask) terms. The forward pass stores a
    checkpoint every `checkpoint_stride` substeps; intermediate states are
    recomputed during the backward sweep.
    """
    if checkpoint_stride < 1:
        raise ValidationError("checkpoint_stride must be >= 1")
    material = material or scene.material
    terms = OBJECTIVE_TERMS.get(objective)
    if terms is None:
        raise ValidationError(f"unknown objective {objective!r}")
    seeds = _seed_substeps(scene, observations, objective, horizon, online_frame)
    n_sub = (scene.frames * scene.substeps_per_frame if objective == "offline"
             else (scene.substeps_per_frame if horizon is None else horizon))
    if seeds and max(seeds) > n_sub:
        raise ValidationError("seed substep beyond rollout horizon")
    if ws is None:
        ws = StepWorkspace.for_scene(scene)
    cameras = observations.cameras if (observations and observations.cameras) else scene.cameras

    base = initial_state if initial_state is not None else scene.particles
    state0 = _state_for_material(base, material)

    # Forward sweep with checkpoints.
    checkpoints: dict[int, ParticleState] = {0: state0.copy()}
    breakdown = LossBreakdown()
    seed_grads: dict[int, np.ndarray] = {}
    st = state0.copy()
    if 0 in seeds:
        # Zero-length chain: the initial state carries no parameter dependence,
        # so this seed contributes loss but no gradient.
        bd, _ = frame_objective(st.x, seeds[0], scene.loss_weights, cameras,
                                terms=terms, splat_radius=splat_radius,
                                with_grad=False)
        breakdown = breakdown + bd
    for s in range(n_sub):
        st, _ = step(scene, st, start_step + s, ws, material=material)
        if (s + 1) % checkpoint_stride == 0 or (s + 1) == n_sub:
            checkpoints[s + 1] = st.copy()
        if (s + 1) in seeds:
            bd, g = frame_objective(st.x, seeds[s + 1], scene.loss_weights, cameras,
                                    terms=terms, splat_radius=splat_radius)
            breakdown = breakdown + bd
            seed_grads[s + 1] = g

    # Backward sweep.
    adj = _Adjoint.zeros(state0.n)
    accum = _ParamAccum(m_p=np.zeros(state0.n))
    segment: dict[int, ParticleState] = {}
    for s in range(n_sub - 1, -1, -1):
        if (s + 1) in seed_grads:
            adj.x = adj.x + seed_grads[s + 1]
        if s in checkpoints:
            state_s = checkpoints[s]
        elif s in segment:
            state_s = segment.pop(s)
        else:
            anchor = (s // checkpoint_stride) * checkpoint_stride
            cur = checkpoints[anchor].copy()
            segment = {anchor: cur}
            for i in range(anchor, s):
                cur, _ = step(scene, cur, start_step + i, ws, material=material)
                segment[i + 1] = cur.copy()
            state_s = segment.pop(s)
        adj = _backward_substep(scene, material, state_s, start_step + s, ws, adj, accum)

    d_e, d_nu = _lame_chain(material, accum.mu, accum.lam)
    d_rho = float(np.sum(accum.m_p * state0.v0))
    d_y = accum.y
    grad_phys = np.array([d_e, d_nu, d_rho, d_y])
    grad_norm = grad_phys * PARAM_SCALES
    grad_norm[_frozen_mask(frozen)] = 0.0
    if material.is_elastic:
        grad_norm[3] = 0.0
    return breakdown, ParamGradient.from_array(grad_norm)


def evaluate_objective(scene: Scene, material: MaterialParams,
                       observations: ObservationSet | None = None, *,
                       objective: str = "offline", horizon: int | None = None,
                       online_frame: ObservationFrame | None = None,
                       initial_state: ParticleState | None = None,
                       start_step: int = 0, splat_radius: float = 2.0,
                       ws: StepWorkspace | None = None) -> LossBreakdown:
    """Forward-only objective evaluation along the same code path as rollout_grad."""
    terms = OBJECTIVE_TERMS.get(objective)
    if terms is None:
        raise ValidationError(f"unknown objective {objective!r}")
    seeds = _seed_substeps(scene, observations, objective, horizon, online_frame)
    n_sub = (scene.frames * scene.substeps_per_frame if objective == "offline"
             else (scene.substeps_per_frame if horizon is None else horizon))
    if ws is None:
        ws = StepWorkspace.for_scene(scene)
    cameras = observations.cameras if (observations and observations.cameras) else scene.cameras
    base = initial_state if initial_state is not None else scene.particles
    st = _state_for_material(base, material)
    breakdown = LossBreakdown()
    if 0 in seeds:
        bd, _ = frame_objective(st.x, seeds[0], scene.loss_weights, cameras,
                                terms=terms, splat_radius=splat_radius,
                                with_grad=False)
        breakdown = breakdown + bd
    for s in range(n_sub):
        st, _ = step(scene, st, start_step + s, ws, material=material)
        if (s + 1) in seeds:
            bd, _ = frame_objective(st.x, seeds[s + 1], scene.loss_weights, cameras,
                                    terms=terms, splat_radius=splat_radius,
                                    with_grad=False)
            breakdown = breakdown + bd
    return breakdown


def finite_diff_grad(scene: Scene, observations: ObservationSet | None = None, *,
                     material: MaterialParams | None = None,
                     objective: str = "offline", horizon: int | None = None,
                     online_frame: ObservationFrame | None = None,
                     initial_state: ParticleState | None = None,
                     start_step: int = 0, frozen: tuple[str, ...] = (),
                     h: float = 1e-4,
                     splat_radius: float = 2.0) -> tuple[LossBreakdown, ParamGradient]:
    """Central finite differences of the objective in normalized parameter space.

    Components whose perturbed rollout faults are flagged unavailable instead of
    aborting the whole evaluation.
    """
    material = material or scene.material
    base = evaluate_objective(scene, material, observations, objective=objective,
                              horizon=horizon, online_frame=online_frame,
                              initial_state=initial_state, start_step=start_step,
                              splat_radius=splat_radius)
    q0 = normalize_params(material)
    mask = _frozen_mask(frozen)
    grad = np.zeros(4)
    available = np.ones(4, dtype=bool)
    for i in range(4):
        if mask[i] or (i == 3 and material.is_elastic):
            continue
        try:
            vals = []
            for sign in (+1.0, -1.0):
                q = q0.copy()
                q[i] += sign * h
                m = material_from_normalized(q, material)
                bd = evaluate_objective(scene, m, observations, objective=objective,
                                        horizon=horizon, online_frame=online_frame,
                                        initial_state=initial_state,
                                        start_step=start_step,
                                        splat_radius=splat_radius)
                vals.append(bd.total)
            grad[i] = (vals[0] - vals[1]) / (2.0 * h)
        except NumericalFault:
            available[i] = False
            grad[i] = 0.0
    return base, ParamGradient.from_array(grad, available)
