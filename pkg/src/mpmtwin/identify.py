"""Material parameter identification: offline batch fits and online correction.

Offline identification minimizes the trajectory objective over normalized
parameters with either projected AdamW on the adjoint gradient or a
derivative-free (mu/mu_w, lambda) evolution strategy. The online loop advances
a twin alongside a streamed observation sequence, replays streamed controller
poses, and hot-swaps corrected parameters whenever the scene is quasi-static.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    Controller,
    MaterialParams,
    NumericalFault,
    ObservationSet,
    PARAM_NAMES,
    ParticleState,
    Scene,
    ValidationError,
    material_from_normalized,
    normalize_params,
    normalized_bounds,
)
from .diff import evaluate_objective, rollout_grad
from .kernel import StepWorkspace, step
from .loss import chamfer_distance, mask_loss

__all__ = [
    "OptimizerConfig",
    "OnlineConfig",
    "IterationRecord",
    "IdentifyResult",
    "AdamW",
    "identify_offline",
    "CmaRun",
    "cma_es_core",
    "cma_es_minimize",
    "OnlineFrameRecord",
    "OnlineResult",
    "online_loop",
]


@dataclass
class OptimizerConfig:
    """Settings shared by the offline identification methods."""

    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_iterations: int = 100
    seed: int = 0
    cma_population: int = 8
    cma_sigma0: float = 0.1

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValidationError(f"learning rate must be > 0, got {self.lr}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValidationError(f"betas must lie in [0, 1), got {self.betas}")
        if self.max_iterations < 0:
            raise ValidationError("max_iterations must be >= 0")
        if self.cma_population < 2:
            raise ValidationError("cma_population must be >= 2")
        if self.cma_sigma0 <= 0.0:
            raise ValidationError(f"cma_sigma0 must be > 0, got {self.cma_sigma0}")


@dataclass
class IterationRecord:
    """One evaluated iterate of an offline fit, in normalized parameter space."""

    iteration: int
    loss: float
    dist: float
    track: float
    params: np.ndarray
    grad_norm: float | None = None


@dataclass
class IdentifyResult:
    method: str
    best_material: MaterialParams
    best_params: np.ndarray     # normalized
    best_loss: float
    history: list[IterationRecord]
    aborted: bool = False
    abort_reason: str | None = None


class AdamW:
    """Decoupled-weight-decay Adam with box projection after each update.

    Operates on the normalized parameter vector; frozen components are never
    moved. Moments restart from zero when reset() is called after a fault.
    """

    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 bounds: np.ndarray | None = None,
                 frozen_mask: np.ndarray | None = None):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.bounds = bounds
        self.frozen = (np.zeros(4, dtype=bool) if frozen_mask is None
                       else np.asarray(frozen_mask, dtype=bool))
        self.reset()

    def reset(self, lr: float | None = None) -> None:
        if lr is not None:
            self.lr = lr
        self.m = np.zeros(4)
        self.v = np.zeros(4)
        self.t = 0

    def step(self, q: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        g = np.where(self.frozen, 0.0, np.asarray(grad, dtype=float))
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        update = m_hat / (np.sqrt(v_hat) + self.eps)
        if self.weight_decay != 0.0:
            # frozen lanes may be infinite (elastic yield stress); keep them out
            update = update + self.weight_decay * np.where(self.frozen, 0.0, q)
        q_new = q - self.lr * np.where(self.frozen, 0.0, update)
        if self.bounds is not None:
            lo, hi = self.bounds[:, 0], self.bounds[:, 1]
            q_new = np.where(self.frozen, q_new, np.clip(q_new, lo, hi))
        return q_new


def _frozen_mask(frozen) -> np.ndarray:
    unknown = set(frozen) - set(PARAM_NAMES)
    if unknown:
        raise ValidationError(f"unknown frozen parameter names: {sorted(unknown)}")
    return np.array([name in frozen for name in PARAM_NAMES])


def _effective_frozen(material: MaterialParams, frozen) -> tuple[tuple[str, ...], np.ndarray]:
    """Yield stress is implicitly frozen for purely elastic materials."""
    names = tuple(frozen)
    if material.is_elastic and "yield_stress" not in names:
        names = names + ("yield_stress",)
    return names, _frozen_mask(names)


def identify_offline(scene: Scene, observations: ObservationSet, *,
                     method: str = "gradient",
                     config: OptimizerConfig | None = None,
                     frozen=(), bounds: dict | None = None,
                     checkpoint_stride: int = 8,
                     callback=None) -> IdentifyResult:
    """Fit material parameters to recorded observations of one rollout.

    method "gradient" runs projected AdamW on the adjoint gradient; "cma-es"
    runs the derivative-free strategy on forward evaluations only. The best
    evaluated iterate (not the last) is returned. callback, if given, receives
    each IterationRecord as it is produced.
    """
    config = config or OptimizerConfig()
    if method == "cma-es":
        return cma_es_minimize(scene, observations, config=config, frozen=frozen,
                               bounds=bounds, callback=callback)
    if method != "gradient":
        raise ValidationError(f"unknown identification method {method!r}")

    template = scene.material
    frozen_names, fmask = _effective_frozen(template, frozen)
    nb = normalized_bounds(bounds)
    q = normalize_params(template).copy()
    free = ~fmask
    if np.any((q[free] < nb[free, 0]) | (q[free] > nb[free, 1])):
        raise ValidationError("initial parameters lie outside the search bounds")

    opt = AdamW(config.lr, config.betas, config.eps, config.weight_decay,
                bounds=nb, frozen_mask=fmask)
    history: list[IterationRecord] = []
    best_q, best_loss = q.copy(), math.inf
    prev_q = q.copy()
    faults = 0
    aborted = False
    reason = None

    it = 0
    while it < config.max_iterations:
        material = material_from_normalized(q, template)
        try:
            bd, grad = rollout_grad(scene, observations, material=material,
                                    frozen=frozen_names,
                                    checkpoint_stride=checkpoint_stride)
        except NumericalFault as err:
            faults += 1
            if faults > 1 or it == 0:
                aborted = True
                reason = f"rollout fault: {err}"
                break
            # One retry: back off to the previous iterate at half the rate.
            q = prev_q.copy()
            opt.reset(opt.lr * 0.5)
            it += 1
            continue
        loss = bd.total
        if not math.isfinite(loss):
            aborted = True
            reason = f"non-finite loss {loss} at iteration {it}"
            break
        rec = IterationRecord(iteration=it, loss=loss, dist=bd.dist, track=bd.track,
                              params=q.copy(),
                              grad_norm=float(np.linalg.norm(grad.as_array())))
        history.append(rec)
        if callback is not None:
            callback(rec)
        if loss < best_loss:
            best_loss, best_q = loss, q.copy()
        prev_q = q.copy()
        q = opt.step(q, grad.as_array())
        it += 1

    if not history and not aborted:
        # Zero-iteration run: report the starting point without touching it.
        bd = evaluate_objective(scene, template, observations)
        best_loss, best_q = bd.total, q.copy()
        history.append(IterationRecord(0, bd.total, bd.dist, bd.track, q.copy()))
    return IdentifyResult(method="gradient",
                          best_material=material_from_normalized(best_q, template),
                          best_params=best_q, best_loss=best_loss, history=history,
                          aborted=aborted, abort_reason=reason)


@dataclass
class CmaRun:
    """Raw outcome of the evolution-strategy core, in the free subspace."""

    best_x: np.ndarray
    best_loss: float
    generations: list[tuple[int, float, np.ndarray]]  # (gen, best f, best x)
    aborted: bool = False
    abort_reason: str | None = None


def cma_es_core(score, mean0: np.ndarray, lo: np.ndarray, hi: np.ndarray, *,
                population: int, sigma0: float, max_generations: int,
                seed: int = 0, on_generation=None) -> CmaRun:
    """(mu/mu_w, lambda) evolution strategy with cumulative step-size adaptation.

    score maps an n-vector inside [lo, hi] to a float (+inf marks an infeasible
    or failed evaluation). Candidates outside the box are redrawn up to 100
    times, then clamped. A generation in which every candidate scores +inf
    aborts the run.
    """
    n = mean0.size
    lam = population
    mu = lam // 2
    w_raw = np.log((lam + 1.0) / 2.0) - np.log(np.arange(1, mu + 1))
    w = w_raw / np.sum(w_raw)
    mueff = 1.0 / np.sum(w * w)
    cc = (4.0 + mueff / n) / (n + 4.0 + 2.0 * mueff / n)
    cs = (mueff + 2.0) / (n + mueff + 5.0)
    c1 = 2.0 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1.0 - c1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((n + 2.0) ** 2 + mueff))
    damps = 1.0 + 2.0 * max(0.0, math.sqrt((mueff - 1.0) / (n + 1.0)) - 1.0) + cs
    chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))

    rng = np.random.default_rng(seed)
    mean = mean0.astype(float).copy()
    sigma = sigma0
    cov = np.eye(n)
    ps = np.zeros(n)
    pc = np.zeros(n)

    best_x, best_loss = mean.copy(), math.inf
    generations: list[tuple[int, float, np.ndarray]] = []
    aborted = False
    reason = None

    for gen in range(max_generations):
        eigvals, eigvecs = np.linalg.eigh(cov)
        d = np.sqrt(np.maximum(eigvals, 1e-20))
        inv_sqrt_c = eigvecs @ np.diag(1.0 / d) @ eigvecs.T

        xs = np.empty((lam, n))
        for i in range(lam):
            x = None
            for _ in range(100):
                cand = mean + sigma * (eigvecs @ (d * rng.standard_normal(n)))
                if np.all((cand >= lo) & (cand <= hi)):
                    x = cand
                    break
            if x is None:
                cand = mean + sigma * (eigvecs @ (d * rng.standard_normal(n)))
                x = np.clip(cand, lo, hi)
            xs[i] = x
        fs = np.array([float(score(xs[i])) for i in range(lam)])
        if not np.any(np.isfinite(fs)):
            aborted = True
            reason = f"every candidate evaluation failed in generation {gen}"
            break

        order = np.argsort(fs, kind="stable")
        gbest = int(order[0])
        if fs[gbest] < best_loss:
            best_loss = float(fs[gbest])
            best_x = xs[gbest].copy()
        generations.append((gen, float(fs[gbest]), xs[gbest].copy()))
        if on_generation is not None:
            on_generation(gen, float(fs[gbest]), xs[gbest].copy())

        parents = xs[order[:mu]]
        old_mean = mean
        mean = np.clip(w @ parents, lo, hi)
        y_w = (mean - old_mean) / sigma
        ps = (1.0 - cs) * ps + math.sqrt(cs * (2.0 - cs) * mueff) * (inv_sqrt_c @ y_w)
        hsig = (np.linalg.norm(ps)
                / math.sqrt(1.0 - (1.0 - cs) ** (2 * (gen + 1))) / chi_n
                < 1.4 + 2.0 / (n + 1.0))
        pc = (1.0 - cc) * pc + hsig * math.sqrt(cc * (2.0 - cc) * mueff) * y_w
        art = (parents - old_mean) / sigma
        rank_mu = art.T @ (w[:, None] * art)
        cov = ((1.0 - c1 - cmu) * cov
               + c1 * (np.outer(pc, pc) + (not hsig) * cc * (2.0 - cc) * cov)
               + cmu * rank_mu)
        cov = 0.5 * (cov + cov.T)
        sigma *= math.exp((cs / damps) * (np.linalg.norm(ps) / chi_n - 1.0))

    return CmaRun(best_x=best_x, best_loss=best_loss, generations=generations,
                  aborted=aborted, abort_reason=reason)


def cma_es_minimize(scene: Scene, observations: ObservationSet, *,
                    config: OptimizerConfig | None = None,
                    frozen=(), bounds: dict | None = None,
                    callback=None) -> IdentifyResult:
    """Derivative-free identification over the free normalized parameters.

    Wraps cma_es_core around forward objective evaluations; faulting rollouts
    score +inf and are never selected.
    """
    config = config or OptimizerConfig()
    template = scene.material
    _, fmask = _effective_frozen(template, frozen)
    free = np.flatnonzero(~fmask)
    if free.size == 0:
        raise ValidationError("all parameters are frozen, nothing to identify")
    nb = normalized_bounds(bounds)
    lo, hi = nb[free, 0], nb[free, 1]
    q_full = normalize_params(template).copy()
    if np.any((q_full[free] < lo) | (q_full[free] > hi)):
        raise ValidationError("initial parameters lie outside the search bounds")

    def full_q(x: np.ndarray) -> np.ndarray:
        q = q_full.copy()
        q[free] = x
        return q

    cache: dict[bytes, tuple[float, float, float]] = {}

    def breakdown_of(x: np.ndarray) -> tuple[float, float, float]:
        key = x.tobytes()
        if key not in cache:
            material = material_from_normalized(full_q(x), template)
            try:
                bd = evaluate_objective(scene, material, observations)
            except NumericalFault:
                cache[key] = (math.inf, math.inf, math.inf)
            else:
                if math.isfinite(bd.total):
                    cache[key] = (bd.total, bd.dist, bd.track)
                else:
                    cache[key] = (math.inf, math.inf, math.inf)
        return cache[key]

    history: list[IterationRecord] = []

    def on_generation(gen: int, f: float, x: np.ndarray) -> None:
        _, dd, tt = breakdown_of(x)
        rec = IterationRecord(iteration=gen, loss=f, dist=dd, track=tt,
                              params=full_q(x))
        history.append(rec)
        if callback is not None:
            callback(rec)

    run = cma_es_core(lambda x: breakdown_of(x)[0], q_full[free], lo, hi,
                      population=config.cma_population, sigma0=config.cma_sigma0,
                      max_generations=config.max_iterations, seed=config.seed,
                      on_generation=on_generation)

    if not history and not run.aborted:
        bd = evaluate_objective(scene, template, observations)
        history.append(IterationRecord(0, bd.total, bd.dist, bd.track, q_full.copy()))
        best_q, best_loss = q_full.copy(), bd.total
    else:
        best_q, best_loss = full_q(run.best_x), run.best_loss
    return IdentifyResult(method="cma-es",
                          best_material=material_from_normalized(best_q, template),
                          best_params=best_q, best_loss=best_loss, history=history,
                          aborted=run.aborted, abort_reason=run.abort_reason)


@dataclass
class OnlineConfig:
    """Streaming correction settings."""

    optimize_every: int = 5       # frames between correction attempts; 0 disables
    horizon: int = 10             # substeps simulated per correction evaluation
    speed_threshold: float = 0.05  # quasi-static gate on mean particle speed, m/s
    lr: float = 1e-2
    iterations: int = 3           # AdamW steps per accepted correction
    checkpoint_stride: int = 1

    def __post_init__(self):
        if self.optimize_every < 0:
            raise ValidationError("optimize_every must be >= 0 (0 disables)")
        if self.horizon < 1:
            raise ValidationError("correction horizon must be >= 1 substep")
        if self.speed_threshold < 0.0:
            raise ValidationError("speed_threshold must be >= 0")
        if self.lr <= 0.0 or self.iterations < 1:
            raise ValidationError("correction lr must be > 0 and iterations >= 1")


@dataclass
class OnlineFrameRecord:
    """Twin-versus-stream losses and correction activity for one frame."""

    frame: int
    loss_dist: float
    loss_mask: float | None
    speed: float
    pose_gap: bool
    attempted: bool = False
    gated: bool = False        # attempted but rejected by the quasi-static gate
    optimized: bool = False
    params: np.ndarray | None = None
    correction_before: float | None = None
    correction_after: float | None = None


@dataclass
class OnlineResult:
    records: list[OnlineFrameRecord]
    final_material: MaterialParams
    final_params: np.ndarray
    final_state: ParticleState
    swaps: int


def _interp_controller(template: Controller, p0: np.ndarray, p1: np.ndarray,
                       steps: int, dt: float) -> Controller:
    """Linear motion from p0 to p1 over `steps` substeps."""
    tau = np.linspace(0.0, 1.0, steps + 1).reshape((-1,) + (1,) * p0.ndim)
    positions = p0[None] + (p1 - p0)[None] * tau
    ref0 = p0[0] if template.kind == "capsule" else p0
    ref1 = p1[0] if template.kind == "capsule" else p1
    v = (ref1 - ref0) / (steps * dt)
    velocities = np.broadcast_to(v, (steps, 3)).copy()
    return Controller(kind=template.kind, radius=template.radius,
                      positions=positions, velocities=velocities)


def _hold_controller(template: Controller, pose: np.ndarray, vel: np.ndarray,
                     steps: int, dt: float) -> Controller:
    """Extrapolate the current pose at constant velocity for `steps` substeps."""
    k = np.arange(steps + 1).reshape((-1,) + (1,) * pose.ndim)
    positions = pose[None] + k * dt * np.broadcast_to(vel, pose.shape)[None]
    velocities = np.broadcast_to(vel, (steps, 3)).copy()
    return Controller(kind=template.kind, radius=template.radius,
                      positions=positions, velocities=velocities)


def online_loop(scene: Scene, stream: ObservationSet, *,
                config: OnlineConfig | None = None,
                frozen=(), bounds: dict | None = None,
                callback=None) -> OnlineResult:
    """Track a streamed observation sequence and correct parameters in flight.

    Each streamed frame supplies the controller poses for the coming frame
    interval; the twin replays them, records its chamfer and silhouette losses
    against the stream, and every optimize_every frames attempts a short
    gradient correction. The correction simulates `horizon` substeps from the
    current state holding controller velocities, compares against the latest
    observation, and is only applied while the scene is quasi-static (mean
    particle speed below speed_threshold). Accepted corrections hot-swap the
    material mid-stream; particle masses follow the density swap.

    A frame whose controller_poses is None reuses the previous poses with zero
    velocity and is flagged pose_gap.
    """
    config = config or OnlineConfig()
    if len(stream) == 0:
        raise ValidationError("observation stream is empty")
    expected = list(range(1, len(stream.frames) + 1))
    got = [f.frame for f in stream.frames]
    if got != expected:
        raise ValidationError(
            f"stream frames must be contiguous starting at 1, got {got[:5]}...")

    template = scene.material
    frozen_names, fmask = _effective_frozen(template, frozen)
    nb = normalized_bounds(bounds)
    q = normalize_params(template).copy()
    material = template
    spf = scene.substeps_per_frame
    dt = scene.dt
    cameras = stream.cameras if stream.cameras else scene.cameras

    state = scene.particles.copy()
    state.m = material.density * state.v0
    ws = StepWorkspace.for_scene(scene)

    prev_poses = [np.asarray(c.positions[0], dtype=float) for c in scene.controllers]
    active = [True] * len(scene.controllers)
    records: list[OnlineFrameRecord] = []
    swaps = 0

    for obs in stream:
        t = obs.frame
        pose_gap = obs.controller_poses is None and len(scene.controllers) > 0
        cur_poses = list(prev_poses)
        if not pose_gap and obs.controller_poses is not None:
            if len(obs.controller_poses) != len(scene.controllers):
                raise ValidationError(
                    f"frame {t}: expected {len(scene.controllers)} controller "
                    f"poses, got {len(obs.controller_poses)}")
            for i, p in enumerate(obs.controller_poses):
                if p is None:
                    active[i] = False
                else:
                    active[i] = True
                    cur_poses[i] = np.asarray(p, dtype=float)

        ctrls = []
        vels = []
        for i, tmpl in enumerate(scene.controllers):
            if not active[i]:
                vels.append(np.zeros(3))
                continue
            ctrl = _interp_controller(tmpl, prev_poses[i], cur_poses[i], spf, dt)
            ctrls.append(ctrl)
            vels.append(ctrl.velocities[0].copy())
        frame_scene = replace(scene, controllers=ctrls)

        try:
            for s in range(spf):
                state, _ = step(frame_scene, state, s, ws, material=material)
        except NumericalFault as err:
            raise NumericalFault(err.base_message, step=err.step,
                                 particle=err.particle, frame=t) from err

        loss_dist = chamfer_distance(state.x, obs.points)
        loss_mask = None
        if obs.masks is not None and cameras:
            loss_mask = mask_loss(state.x, obs.masks, cameras)
        speed = float(np.mean(np.linalg.norm(state.v, axis=1)))

        rec = OnlineFrameRecord(frame=t, loss_dist=loss_dist, loss_mask=loss_mask,
                                speed=speed, pose_gap=pose_gap, params=q.copy())
        attempt = config.optimize_every > 0 and t % config.optimize_every == 0
        if attempt:
            rec.attempted = True
            if speed >= config.speed_threshold:
                rec.gated = True
            else:
                hold = [_hold_controller(tmpl, cur_poses[i], vels[i],
                                         config.horizon, dt)
                        for i, tmpl in enumerate(scene.controllers) if active[i]]
                corr_scene = replace(scene, controllers=hold)
                opt = AdamW(config.lr, bounds=nb, frozen_mask=fmask)
                q_try = q.copy()
                applied = False
                before = after = None
                for _ in range(config.iterations):
                    mat_try = material_from_normalized(q_try, template)
                    try:
                        bd, grad = rollout_grad(
                            corr_scene, objective="online", horizon=config.horizon,
                            online_frame=obs, initial_state=state,
                            material=mat_try, frozen=frozen_names,
                            checkpoint_stride=config.checkpoint_stride, ws=ws)
                    except NumericalFault:
                        break
                    if not math.isfinite(bd.total):
                        break
                    if before is None:
                        before = bd.total
                    after = bd.total
                    q_try = opt.step(q_try, grad.as_array())
                    applied = True
                if applied:
                    q = q_try
                    material = material_from_normalized(q, template)
                    state.m = material.density * state.v0
                    swaps += 1
                    rec.optimized = True
                    rec.correction_before = before
                    rec.correction_after = after
                    rec.params = q.copy()
        records.append(rec)
        if callback is not None:
            callback(rec)
        prev_poses = cur_poses

    return OnlineResult(records=records, final_material=material, final_params=q,
                        final_state=state, swaps=swaps)
