"""Rotation machinery for coefficient vectors.

A spatial rotation acts on the angular part of the signal basis; on
coefficients this is a block-diagonal matrix with one dense block per
even degree.  Blocks are built numerically by projecting rotated basis
samples onto the basis with a degree-exact sphere quadrature, which is
exact to machine precision and immune to sign-convention drift between
harmonic conventions.

Also houses the finite-strain rotation (polar factor of a deformation
Jacobian) and its exact differential, used to reorient signals under
diffeomorphisms and to differentiate that reorientation.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import sphharm
from .errors import DegenerateJacobianError, FoldingError, InputError, InvalidRotationError


@lru_cache(maxsize=8)
def _projection_samples(L: int):
    """Quadrature points, weights, and basis samples for block construction.

    The product of two degree-L harmonics has polynomial degree 2L, so the
    quadrature is chosen exact to that degree.
    """
    points, weights = sphharm.sphere_quadrature(2 * L)
    Y = sphharm.sh_eval_many(L, points)
    return points, weights, Y


def rotation_exp(v: np.ndarray) -> np.ndarray:
    """Rodrigues map: rotation matrix exp(skew(v)) for a 3-vector v."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    K = skew(v)
    if theta < 1e-12:
        return np.eye(3) + K + 0.5 * (K @ K)
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / theta**2 * (K @ K))


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def axial(K: np.ndarray) -> np.ndarray:
    """Inverse of skew: the vector w with skew(w) = (K - K^T)/2."""
    K = np.asarray(K, dtype=float)
    return 0.5 * np.array([K[2, 1] - K[1, 2], K[0, 2] - K[2, 0], K[1, 0] - K[0, 1]])


def _check_rotation(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise InvalidRotationError(f"rotation must be 3x3, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-8:
        raise InvalidRotationError("matrix is not orthogonal within 1e-8")
    if np.linalg.det(R) <= 0:
        raise InvalidRotationError("matrix is orientation-reversing")
    return R


def rotation_blocks(rotations: np.ndarray, L: int) -> np.ndarray:
    """Coefficient-rotation matrices for a batch of rotations.

    For each rotation R the returned (n_sh, n_sh) matrix M satisfies: the
    signal reconstructed from M @ c, evaluated at direction u, equals the
    original signal at R^-1 u.  M is block diagonal across degrees, each
    block orthogonal, and M is a group homomorphism in R.

    rotations: (..., 3, 3) -> blocks (..., n_sh, n_sh).
    """
    rots = np.asarray(rotations, dtype=float)
    squeeze = rots.ndim == 2
    rots = rots[None] if squeeze else rots
    points, weights, Y = _projection_samples(L)
    # Y at rotated sample directions, batched over rotations.
    rotated = np.einsum("rab,kb->rka", rots, points)
    flat = rotated.reshape(-1, 3)
    Yrot = sphharm.sh_eval_many(L, flat).reshape(rots.shape[0], points.shape[0], -1)
    M = np.einsum("rkj,k,ki->rji", Yrot, weights, Y)
    # Zero the (analytically vanishing) cross-degree entries so the block
    # structure is exact rather than merely 1e-15 small.
    degrees = sphharm.sh_degrees(L)
    same_degree = degrees[:, None] == degrees[None, :]
    M *= same_degree[None, :, :]
    return M[0] if squeeze else M


@dataclass(frozen=True)
class WignerBlock:
    """Block-diagonal coefficient rotation for one spatial rotation."""

    R: np.ndarray
    L: int
    matrix: np.ndarray  # (n_sh, n_sh), block diagonal across degrees

    def block(self, l: int) -> np.ndarray:
        degrees = sphharm.sh_degrees(self.L)
        sel = np.flatnonzero(degrees == l)
        return self.matrix[np.ix_(sel, sel)]


def wigner_from_rotation(R: np.ndarray, L: int) -> WignerBlock:
    """Build the coefficient rotation operator for a proper rotation R."""
    R = _check_rotation(R)
    return WignerBlock(R=R, L=L, matrix=rotation_blocks(R, L))


def reorient(coeffs: np.ndarray, W: WignerBlock) -> np.ndarray:
    """Apply a coefficient rotation; the same block acts at every radial index."""
    c = np.asarray(coeffs, dtype=float)
    n_sh = W.matrix.shape[0]
    if c.shape[-1] % n_sh != 0:
        raise InputError(
            f"coefficient length {c.shape[-1]} is not a multiple of n_sh={n_sh}")
    shape = c.shape
    blocks = c.reshape(-1, n_sh)
    return (blocks @ W.matrix.T).reshape(shape)


def reorient_many(coeffs: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    """Per-voxel reorientation: coeffs (V, n_radial, n_sh), blocks (V, n_sh, n_sh)."""
    return np.einsum("vji,vni->vnj", blocks, coeffs)


def finite_strain_rotation(jac: np.ndarray) -> np.ndarray:
    """Orthogonal polar factor of a deformation Jacobian.

    Raises FoldingError for singular or orientation-reversing Jacobians;
    registration treats that as a line-search rejection.
    """
    R, _ = polar_factors(jac)
    return R


def polar_factors(jac: np.ndarray):
    """Rotation R and symmetric stretch S = (J J^T)^(1/2) with J = S R.

    Accepts a single 3x3 matrix or a batch (..., 3, 3).
    """
    J = np.asarray(jac, dtype=float)
    U, sig, Vt = np.linalg.svd(J)
    det = np.linalg.det(J)
    if np.any(det <= 0):
        raise FoldingError("Jacobian is singular or orientation-reversing")
    R = U @ Vt
    S = np.einsum("...ij,...j,...kj->...ik", U, sig, U)
    return R, S


@lru_cache(maxsize=8)
def perturbation_blocks(L: int, delta: float):
    """Coefficient rotations of the three axis perturbations exp(delta * U_i).

    Computed once and shared across all voxels of a gradient evaluation.
    """
    mats = [rotation_blocks(rotation_exp(delta * np.eye(3)[i]), L) for i in range(3)]
    return np.stack(mats)


def rotated_coeff_gradient(c_hat: np.ndarray, L: int, delta: float = 1e-4) -> np.ndarray:
    """Forward-difference derivative of reoriented coefficients w.r.t. the
    three rotation tangent parameters.

    c_hat: already-reoriented coefficients, (..., n_radial, n_sh) or a flat
    (n_coeff,) vector.  Returns rows i = (M(exp(delta U_i)) c - c) / delta,
    shape (..., 3, n_coeff).
    """
    if delta <= 0:
        raise InputError(f"delta must be positive, got {delta}")
    c = np.asarray(c_hat, dtype=float)
    flat_in = c.ndim == 1
    n_sh = sphharm.sh_count(L)
    blocks = c.reshape(*c.shape[:-1], -1, n_sh) if flat_in or c.shape[-1] != n_sh else c
    P = perturbation_blocks(L, delta)
    out = np.empty((*blocks.shape[:-2], 3, blocks.shape[-2] * n_sh))
    for i in range(3):
        rotated = np.einsum("ji,...ni->...nj", P[i], blocks)
        out[..., i, :] = ((rotated - blocks) / delta).reshape(*blocks.shape[:-2], -1)
    return out


def finite_strain_differential(jac: np.ndarray, R: np.ndarray = None) -> np.ndarray:
    """The matrix F = -R^T (tr(S) I - S)^(-1) R with S the stretch factor.

    Contracted against the rotation-tangent of a Jacobian perturbation (see
    :func:`finite_strain_tangent`) it gives the derivative of the polar
    factor; the tangent function carries the sign/frame fix validated by
    the finite-difference oracle in the suite.
    """
    J = np.asarray(jac, dtype=float)
    Rp, S = polar_factors(J)
    if R is None:
        R = Rp
    trS = np.trace(S, axis1=-2, axis2=-1)
    phi = trS[..., None, None] * np.eye(3) - S
    if np.min(np.abs(np.linalg.eigvalsh(phi))) < 1e-12:
        raise DegenerateJacobianError("two singular values of the Jacobian vanish")
    swap = np.swapaxes(R, -2, -1)
    return -swap @ np.linalg.inv(phi) @ R


def finite_strain_tangent(jac: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Rotation-tangent parameters of the polar factor under J -> J + eps H.

    Returns the 3-vector mu with d/deps R(J + eps H)|_0 = skew(mu) R(J).
    Equivalent to contracting finite_strain_differential with the
    cross-product sum of H against the rows of R, up to the frame fix.
    """
    R, S = polar_factors(jac)
    phi = np.trace(S) * np.eye(3) - S
    s = axial(H @ R.T - R @ H.T)
    return np.linalg.solve(phi, s)
