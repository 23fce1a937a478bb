"""Constitutive models: corotated hyperelasticity and von Mises plasticity.

All routines are batched over a leading particle axis and operate in the
diagonal (principal-stretch) space exposed by `svd3`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import NumericalFault

__all__ = [
    "Svd3",
    "svd3",
    "fixed_corotated_stress",
    "fixed_corotated_energy",
    "von_mises_return_map",
    "hencky_deviator_norm",
]


@dataclass
class Svd3:
    """Batched 3x3 SVD with rotation-only factors.

    u and v are proper rotations (det = +1); any reflection is pushed into the
    last singular value, so sigma[..., 2] may be negative while
    sigma[..., 0] >= sigma[..., 1] >= |sigma[..., 2]|.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return np.einsum("...ik,...k,...jk->...ij", self.u, self.sigma, self.v)


def svd3(mats: np.ndarray) -> Svd3:
    """Sign-corrected SVD of a (..., 3, 3) stack."""
    mats = np.asarray(mats, dtype=np.float64)
    if mats.shape[-2:] != (3, 3):
        raise ValueError(f"expected trailing (3, 3), got {mats.shape}")
    if not np.all(np.isfinite(mats)):
        raise NumericalFault("non-finite matrix passed to svd3")
    u, s, vh = np.linalg.svd(mats)
    v = np.swapaxes(vh, -1, -2)
    s = s.copy()
    # Push a reflection in u into (sigma[2], v[:, 2]) first, then fix v the same
    # way; both factors end as proper rotations and only sigma[2] can flip sign.
    det_u = np.linalg.det(u)
    flip_u = det_u < 0.0
    if np.any(flip_u):
        u[flip_u, :, 2] *= -1.0
        s[flip_u, 2] *= -1.0
    det_v = np.linalg.det(v)
    flip_v = det_v < 0.0
    if np.any(flip_v):
        v[flip_v, :, 2] *= -1.0
        s[flip_v, 2] *= -1.0
    return Svd3(u=u, sigma=s, v=v)


def _corotated_principal_stress(sigma: np.ndarray, mu: float, lam: float) -> np.ndarray:
    """Principal first Piola-Kirchhoff stresses of the fixed corotated model."""
    j = np.prod(sigma, axis=-1, keepdims=True)
    return 2.0 * mu * (sigma - 1.0) + lam * (j - 1.0) * j / sigma


def fixed_corotated_stress(f: np.ndarray, mu: float, lam: float,
                           decomp: Svd3 | None = None) -> np.ndarray:
    """First Piola-Kirchhoff stress P = 2 mu (F - R) + lam (J - 1) J F^-T.

    Evaluated in diagonal space: P = U diag(p_hat) V^T with
    p_hat_i = 2 mu (sigma_i - 1) + lam (J - 1) J / sigma_i.
    """
    d = decomp if decomp is not None else svd3(f)
    p_hat = _corotated_principal_stress(d.sigma, mu, lam)
    return np.einsum("...ik,...k,...jk->...ij", d.u, p_hat, d.v)


def fixed_corotated_energy(f: np.ndarray, mu: float, lam: float) -> np.ndarray:
    """Energy density psi = mu sum_i (sigma_i - 1)^2 + lam/2 (J - 1)^2."""
    d = svd3(f)
    j = np.prod(d.sigma, axis=-1)
    return mu * np.sum((d.sigma - 1.0) ** 2, axis=-1) + 0.5 * lam * (j - 1.0) ** 2


def hencky_deviator_norm(f: np.ndarray) -> np.ndarray:
    """Norm of the deviatoric logarithmic strain, the von Mises yield measure."""
    d = svd3(f)
    eps = np.log(d.sigma)
    dev = eps - np.mean(eps, axis=-1, keepdims=True)
    return np.linalg.norm(dev, axis=-1)


def von_mises_return_map(f_trial: np.ndarray, mu: float, yield_stress: float) -> np.ndarray:
    """Project trial elastic deformation gradients back onto the yield surface.

    Works in principal logarithmic (Hencky) strain space: with eps = log(sigma)
    and eps_hat its deviator, the surface is ||eps_hat|| <= y / (2 mu). States
    beyond it are pulled radially onto the surface at fixed trace (volume
    preserved); states inside pass through unchanged.
    """
    if math.isinf(yield_stress):
        return np.asarray(f_trial, dtype=np.float64)
    d = svd3(f_trial)
    if np.any(d.sigma <= 0.0):
        bad = int(np.argwhere(np.any(d.sigma <= 0.0, axis=-1))[0][0])
        raise NumericalFault("non-positive principal stretch in return map "
                             "(time step too large)", particle=bad)
    eps = np.log(d.sigma)
    trace = np.sum(eps, axis=-1, keepdims=True)
    dev = eps - trace / 3.0
    dev_norm = np.linalg.norm(dev, axis=-1, keepdims=True)
    k = yield_stress / (2.0 * mu)
    delta_gamma = dev_norm - k
    yielded = delta_gamma[..., 0] > 0.0
    out = np.array(f_trial, dtype=np.float64)  # below-yield lanes bit-exact
    if not np.any(yielded):
        return out
    eta = dev_norm[yielded]  # > k > 0 here
    eps_proj = trace[yielded] / 3.0 + dev[yielded] * (k / eta)
    sigma_new = np.exp(eps_proj)
    out[yielded] = np.einsum("...ik,...k,...jk->...ij",
                             d.u[yielded], sigma_new, d.v[yielded])
    return out
