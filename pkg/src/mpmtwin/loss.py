"""Observation losses: point-cloud Chamfer, tracked-marker distance, silhouette masks.

Every loss has a value-only path and a value-plus-gradient path; gradients are
taken with respect to the simulated particle positions (first argument). The
Chamfer nearest-neighbor search switches from brute force to a binned
uniform-grid search above a size threshold; both paths evaluate the same
per-pair arithmetic, so the switch does not change results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LossWeights, ObservationFrame, PinholeCamera, ValidationError

__all__ = [
    "BRUTE_FORCE_LIMIT",
    "chamfer_distance",
    "chamfer_distance_grad",
    "tracking_loss",
    "tracking_loss_grad",
    "mask_loss",
    "mask_loss_grad",
    "render_soft_masks",
    "LossBreakdown",
    "frame_objective",
]

# Point counts at or below this use the brute-force nearest-neighbor path.
BRUTE_FORCE_LIMIT = 4096

_BRUTE_CHUNK = 256


def _nn_brute(queries: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbors by chunked exhaustive search.

    Returns (indices, distances). Distances use the elementwise squared-difference
    form, the same expression the grid path evaluates.
    """
    n = queries.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    for lo in range(0, n, _BRUTE_CHUNK):
        hi = min(lo + _BRUTE_CHUNK, n)
        diff = queries[lo:hi, None, :] - points[None, :, :]
        d2 = np.einsum("qma,qma->qm", diff, diff)
        best = np.argmin(d2, axis=1)
        idx[lo:hi] = best
        dist[lo:hi] = np.sqrt(d2[np.arange(hi - lo), best])
    return idx, dist


def _nn_grid(queries: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbors via a uniform-grid binning of `points`.

    Queries sharing a cell are resolved together; rings of cells are expanded
    until no unvisited cell could beat the best distance found, which keeps the
    search exact. Per-pair distance arithmetic matches the brute-force path.
    """
    m = points.shape[0]
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    extent = float(np.max(hi - lo))
    # Aim at a handful of points per cell; guard degenerate (flat) clouds.
    cells_per_axis = max(1, int(np.cbrt(m / 4.0)))
    h = max(extent / cells_per_axis, 1e-12)
    dims = np.maximum(((hi - lo) / h).astype(np.int64) + 1, 1)

    def cell_of(p):
        c = np.floor((p - lo[None, :]) / h).astype(np.int64)
        return np.clip(c, 0, dims[None, :] - 1)

    pc = cell_of(points)
    flat = (pc[:, 0] * dims[1] + pc[:, 1]) * dims[2] + pc[:, 2]
    order = np.argsort(flat, kind="stable")
    sorted_flat = flat[order]
    uniq, starts = np.unique(sorted_flat, return_index=True)
    ends = np.append(starts[1:], m)
    cell_slices = {int(u): (int(s), int(e)) for u, s, e in zip(uniq, starts, ends)}

    qc = cell_of(queries)
    qflat = (qc[:, 0] * dims[1] + qc[:, 1]) * dims[2] + qc[:, 2]
    idx_out = np.empty(queries.shape[0], dtype=np.int64)
    dist_out = np.empty(queries.shape[0])

    max_radius = int(dims.max())
    for cell in np.unique(qflat):
        qsel = np.nonzero(qflat == cell)[0]
        q = queries[qsel]
        ci = cell // (dims[1] * dims[2])
        cj = (cell // dims[2]) % dims[1]
        ck = cell % dims[2]
        best_d2 = np.full(qsel.shape[0], np.inf)
        best_i = np.full(qsel.shape[0], -1, dtype=np.int64)
        for r in range(0, max_radius + 2):
            if best_i.min() >= 0 and (r - 1) * h >= np.sqrt(best_d2.max()):
                break
            cand: list[np.ndarray] = []
            r0i, r1i = max(ci - r, 0), min(ci + r, dims[0] - 1)
            r0j, r1j = max(cj - r, 0), min(cj + r, dims[1] - 1)
            r0k, r1k = max(ck - r, 0), min(ck + r, dims[2] - 1)
            for i in range(r0i, r1i + 1):
                for j in range(r0j, r1j + 1):
                    for k in range(r0k, r1k + 1):
                        if max(abs(i - ci), abs(j - cj), abs(k - ck)) != r:
                            continue  # shell only; inner cells already visited
                        key = int((i * dims[1] + j) * dims[2] + k)
                        sl = cell_slices.get(key)
                        if sl is not None:
                            cand.append(order[sl[0]:sl[1]])
            if not cand:
                continue
            cidx = np.concatenate(cand)
            diff = q[:, None, :] - points[cidx][None, :, :]
            d2 = np.einsum("qma,qma->qm", diff, diff)
            arg = np.argmin(d2, axis=1)
            d2min = d2[np.arange(qsel.shape[0]), arg]
            better = d2min < best_d2
            best_d2[better] = d2min[better]
            best_i[better] = cidx[arg[better]]
        idx_out[qsel] = best_i
        dist_out[qsel] = np.sqrt(best_d2)
    return idx_out, dist_out


def _nearest(queries: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if max(queries.shape[0], points.shape[0]) <= BRUTE_FORCE_LIMIT:
        return _nn_brute(queries, points)
    return _nn_grid(queries, points)


def _check_cloud(name: str, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise ValidationError(f"{name} must be a nonempty (n, 3) point cloud")
    return pts


def chamfer_distance(sim: np.ndarray, obs: np.ndarray) -> float:
    """Symmetric unsquared Chamfer distance, mean-reduced on both sides."""
    sim = _check_cloud("sim", sim)
    obs = _check_cloud("obs", obs)
    _, d_ab = _nearest(sim, obs)
    _, d_ba = _nearest(obs, sim)
    return float(d_ab.mean() + d_ba.mean())


def chamfer_distance_grad(sim: np.ndarray, obs: np.ndarray) -> tuple[float, np.ndarray]:
    """Chamfer distance and its gradient with respect to the simulated points.

    Nearest-neighbor assignments are held fixed (envelope form); zero-distance
    pairs contribute zero gradient.
    """
    sim = _check_cloud("sim", sim)
    obs = _check_cloud("obs", obs)
    i_ab, d_ab = _nearest(sim, obs)
    i_ba, d_ba = _nearest(obs, sim)
    grad = np.zeros_like(sim)
    safe = d_ab > 0.0
    grad[safe] += (sim[safe] - obs[i_ab[safe]]) / (d_ab[safe, None] * sim.shape[0])
    safe_b = d_ba > 0.0
    contrib = (sim[i_ba[safe_b]] - obs[safe_b]) / (d_ba[safe_b, None] * obs.shape[0])
    np.add.at(grad, i_ba[safe_b], contrib)
    return float(d_ab.mean() + d_ba.mean()), grad


def tracking_loss(sim: np.ndarray, tracked_ids: np.ndarray, targets: np.ndarray,
                  valid: np.ndarray) -> tuple[float, bool]:
    """Mean squared distance between tracked particles and their targets.

    Invalid (occluded) ids are excluded; if none are valid the loss is 0.0 and
    the returned flag is True.
    """
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        return 0.0, True
    ids = np.asarray(tracked_ids, dtype=np.int64)[valid]
    if ids.size and (ids.min() < 0 or ids.max() >= sim.shape[0]):
        raise ValidationError("tracked ids outside simulated particle range")
    diff = sim[ids] - np.asarray(targets, dtype=np.float64)[valid]
    return float(np.mean(np.sum(diff * diff, axis=1))), False


def tracking_loss_grad(sim: np.ndarray, tracked_ids: np.ndarray, targets: np.ndarray,
                       valid: np.ndarray) -> tuple[float, np.ndarray, bool]:
    valid = np.asarray(valid, dtype=bool)
    grad = np.zeros_like(sim)
    if not valid.any():
        return 0.0, grad, True
    ids = np.asarray(tracked_ids, dtype=np.int64)[valid]
    if ids.size and (ids.min() < 0 or ids.max() >= sim.shape[0]):
        raise ValidationError("tracked ids outside simulated particle range")
    diff = sim[ids] - np.asarray(targets, dtype=np.float64)[valid]
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    np.add.at(grad, ids, 2.0 * diff / ids.shape[0])
    return loss, grad, False


_SPLAT_CHUNK = 512


def _soft_mask_terms(x: np.ndarray, cam: PinholeCamera, splat_radius: float):
    """Projection and occupancy product for one camera.

    Returns (uv, depth, front mask, q) with q the per-pixel product of
    (1 - splat) over all particles in front of the camera.
    """
    uv, z = cam.project(x)
    front = z > 0.0
    hw = cam.height * cam.width
    px_u = np.tile(np.arange(cam.width, dtype=np.float64), cam.height)
    px_v = np.repeat(np.arange(cam.height, dtype=np.float64), cam.width)
    q = np.ones(hw)
    inv2r2 = 1.0 / (2.0 * splat_radius * splat_radius)
    fidx = np.nonzero(front)[0]
    for lo in range(0, fidx.shape[0], _SPLAT_CHUNK):
        sel = fidx[lo:lo + _SPLAT_CHUNK]
        du = px_u[:, None] - uv[sel, 0][None, :]
        dv = px_v[:, None] - uv[sel, 1][None, :]
        g = np.exp(-(du * du + dv * dv) * inv2r2)
        q *= np.prod(1.0 - np.minimum(g, 1.0 - 1e-12), axis=1)
    return uv, z, front, q, px_u, px_v, inv2r2


def render_soft_masks(x: np.ndarray, cameras: list[PinholeCamera],
                      splat_radius: float = 2.0) -> list[np.ndarray]:
    """Soft silhouettes S = 1 - prod_p (1 - exp(-d^2 / 2 r^2)), one per camera."""
    out = []
    for cam in cameras:
        _, _, _, q, _, _, _ = _soft_mask_terms(np.asarray(x, dtype=np.float64),
                                               cam, splat_radius)
        out.append((1.0 - q).reshape(cam.height, cam.width))
    return out


def _check_mask_inputs(x, masks, cameras):
    x = _check_cloud("sim", x)
    if len(masks) != len(cameras) or not cameras:
        raise ValidationError("need one mask per camera and at least one camera")
    any_in_frame = False
    for cam, m in zip(cameras, masks):
        if m.shape != (cam.height, cam.width):
            raise ValidationError(
                f"mask shape {m.shape} does not match camera ({cam.height}, {cam.width})")
        uv, z = cam.project(x)
        inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width - 1) \
            & (uv[:, 1] >= 0) & (uv[:, 1] <= cam.height - 1)
        any_in_frame = any_in_frame or bool(inside.any())
    if not any_in_frame:
        raise ValidationError("no particle projects inside any camera frame")
    return x


def mask_loss(x: np.ndarray, masks: list[np.ndarray], cameras: list[PinholeCamera],
              splat_radius: float = 2.0) -> float:
    """Mean squared error between soft silhouettes and binary masks, averaged over cameras."""
    x = _check_mask_inputs(x, masks, cameras)
    total = 0.0
    for cam, m in zip(cameras, masks):
        _, _, _, q, _, _, _ = _soft_mask_terms(x, cam, splat_radius)
        s = 1.0 - q
        total += float(np.mean((s - m.astype(np.float64).ravel()) ** 2))
    return total / len(cameras)


def mask_loss_grad(x: np.ndarray, masks: list[np.ndarray], cameras: list[PinholeCamera],
                   splat_radius: float = 2.0) -> tuple[float, np.ndarray]:
    """Mask loss plus gradient with respect to particle positions."""
    x = _check_mask_inputs(x, masks, cameras)
    total = 0.0
    grad = np.zeros_like(x)
    inv2r2 = 1.0 / (2.0 * splat_radius * splat_radius)
    for cam, m in zip(cameras, masks):
        uv, z, front, q, px_u, px_v, _ = _soft_mask_terms(x, cam, splat_radius)
        s = 1.0 - q
        target = m.astype(np.float64).ravel()
        hw = target.shape[0]
        total += float(np.mean((s - target) ** 2))
        ds = 2.0 * (s - target) / (hw * len(cameras))  # dL/dS per pixel
        ext = cam.matrix()
        r_mat = ext[:, :3]
        cam_pts = x @ r_mat.T + ext[:, 3][None, :]
        fidx = np.nonzero(front)[0]
        for lo in range(0, fidx.shape[0], _SPLAT_CHUNK):
            sel = fidx[lo:lo + _SPLAT_CHUNK]
            du = px_u[:, None] - uv[sel, 0][None, :]
            dv = px_v[:, None] - uv[sel, 1][None, :]
            g = np.minimum(np.exp(-(du * du + dv * dv) * inv2r2), 1.0 - 1e-12)
            # dS/dg_p = q / (1 - g_p); dg/du_p = 2 c g (px_u - u_p) since both
            # the exponent derivative and d(du)/du_p contribute a sign.
            dg = ds[:, None] * (q[:, None] / (1.0 - g))
            common = dg * g * (2.0 * inv2r2)
            gu = np.einsum("xp,xp->p", common, du)
            gv = np.einsum("xp,xp->p", common, dv)
            xs, ys, zs = cam_pts[sel, 0], cam_pts[sel, 1], cam_pts[sel, 2]
            d_cam = np.empty((sel.shape[0], 3))
            d_cam[:, 0] = gu * cam.fx / zs
            d_cam[:, 1] = gv * cam.fy / zs
            d_cam[:, 2] = -(gu * cam.fx * xs + gv * cam.fy * ys) / (zs * zs)
            grad[sel] += d_cam @ r_mat
    return total / len(cameras), grad


@dataclass
class LossBreakdown:
    """Weighted objective terms for one comparison."""

    dist: float = 0.0
    track: float = 0.0
    mask: float = 0.0
    all_tracks_invalid: bool = False

    @property
    def total(self) -> float:
        return self.dist + self.track + self.mask

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(self.dist + other.dist, self.track + other.track,
                             self.mask + other.mask,
                             self.all_tracks_invalid or other.all_tracks_invalid)


def frame_objective(x: np.ndarray, frame: ObservationFrame, weights: LossWeights,
                    cameras: list[PinholeCamera], *, terms: tuple[str, ...],
                    splat_radius: float = 2.0,
                    with_grad: bool = True) -> tuple[LossBreakdown, np.ndarray | None]:
    """Weighted per-frame objective and (optionally) its position gradient.

    terms selects which components participate ("dist", "track", "mask");
    components with zero weight are skipped entirely, so an all-zero weighting
    yields exactly (0, 0).
    """
    bd = LossBreakdown()
    grad = np.zeros_like(x) if with_grad else None
    if "dist" in terms and weights.dist != 0.0:
        if with_grad:
            val, g = chamfer_distance_grad(x, frame.points)
            grad += weights.dist * g
        else:
            val = chamfer_distance(x, frame.points)
        bd.dist = weights.dist * val
    if "track" in terms and weights.track != 0.0:
        if frame.tracked_ids is None:
            raise ValidationError(f"frame {frame.frame} has no tracked markers")
        if with_grad:
            val, g, flag = tracking_loss_grad(x, frame.tracked_ids,
                                              frame.tracked_points, frame.tracked_valid)
            grad += weights.track * g
        else:
            val, flag = tracking_loss(x, frame.tracked_ids, frame.tracked_points,
                                      frame.tracked_valid)
        bd.track = weights.track * val
        bd.all_tracks_invalid = flag
    if "mask" in terms and weights.mask != 0.0:
        if frame.masks is None:
            raise ValidationError(f"frame {frame.frame} has no masks")
        if with_grad:
            val, g = mask_loss_grad(x, frame.masks, cameras, splat_radius)
            grad += weights.mask * g
        else:
            val = mask_loss(x, frame.masks, cameras, splat_radius)
        bd.mask = weights.mask * val
    return bd, grad
