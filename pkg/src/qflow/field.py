"""Coefficient volumes on 3D grids and the diffeomorphic group action.

A coefficient field stores one basis-coefficient vector per voxel.
Deformations are dense per-voxel maps in world (mm) coordinates.  The
group action resamples a field through the inverse map and reorients
each coefficient vector by the finite-strain rotation of the local
Jacobian, i.e. reorient-then-resample.

Interpolation outside the grid blends into a caller-supplied boundary
vector (by convention the fitted coefficients of isotropic free water),
so edge voxels never compare against an unphysical zero signal.
"""

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import bfor, wigner
from .errors import FoldingError, InputError, InversionQualityError


@dataclass
class CoefficientField:
    """Per-voxel coefficient vectors: data (nx, ny, nz, n_coeff)."""

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    spec: bfor.BforBasisSpec
    boundary: np.ndarray = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        self.spacing = np.asarray(self.spacing, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float)
        if self.data.ndim != 4:
            raise InputError(f"data must be 4D (nx,ny,nz,channels), got {self.data.shape}")
        if np.any(self.spacing <= 0):
            raise InputError(f"spacing must be positive, got {self.spacing}")
        if self.spec is not None and self.data.shape[3] != self.spec.n_coeff:
            raise InputError(
                f"{self.data.shape[3]} channels but spec has {self.spec.n_coeff}")
        if self.boundary is None:
            self.boundary = np.zeros(self.data.shape[3])
        else:
            self.boundary = np.asarray(self.boundary, dtype=float)

    @property
    def dims(self):
        return self.data.shape[:3]

    @property
    def n_coeff(self):
        return self.data.shape[3]

    def grid_points(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape (nvox, 3)."""
        return grid_coordinates(self.dims, self.spacing, self.origin)

    def copy(self):
        return CoefficientField(self.data.copy(), self.spacing.copy(),
                                self.origin.copy(), self.spec, self.boundary.copy())


@dataclass
class DeformationField:
    """Dense map phi(x) in mm on the voxel grid: map (nx, ny, nz, 3)."""

    map: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    inversion_residual: float = dataclass_field(default=None, compare=False)

    def __post_init__(self):
        self.map = np.asarray(self.map, dtype=float)
        self.spacing = np.asarray(self.spacing, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float)
        if self.map.ndim != 4 or self.map.shape[3] != 3:
            raise InputError(f"map must be (nx,ny,nz,3), got {self.map.shape}")

    @property
    def dims(self):
        return self.map.shape[:3]

    def copy(self):
        return DeformationField(self.map.copy(), self.spacing.copy(), self.origin.copy())


def grid_coordinates(dims, spacing, origin) -> np.ndarray:
    axes = [origin[a] + spacing[a] * np.arange(dims[a]) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])


def identity_deformation(dims, spacing, origin) -> DeformationField:
    pts = grid_coordinates(dims, spacing, origin).reshape(*dims, 3)
    return DeformationField(pts.copy(), np.asarray(spacing, float), np.asarray(origin, float))


def _to_index(points, spacing, origin):
    return (np.asarray(points, dtype=float) - origin) / spacing


def trilinear(data: np.ndarray, idx: np.ndarray, boundary: np.ndarray,
              want_gradient: bool = False):
    """Trilinear interpolation of (nx,ny,nz,C) data at fractional indices.

    Corners outside the grid take the boundary vector, which makes the
    interpolant continuous everywhere and constant (= boundary) beyond one
    voxel outside the hull.  With ``want_gradient`` also returns the
    derivative w.r.t. the index coordinates, shape (P, 3, C).
    """
    dims = np.array(data.shape[:3])
    C = data.shape[3]
    idx = np.atleast_2d(idx)
    base = np.floor(idx).astype(np.int64)
    frac = idx - base
    vals = np.zeros((idx.shape[0], C))
    grad = np.zeros((idx.shape[0], 3, C)) if want_gradient else None
    flat = data.reshape(-1, C)
    strides = np.array([dims[1] * dims[2], dims[2], 1])
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        pos = base + off
        inside = np.all((pos >= 0) & (pos < dims), axis=1)
        lin = np.clip(pos, 0, dims - 1) @ strides
        cvals = np.where(inside[:, None], flat[lin], boundary[None, :])
        w_axis = np.where(off[None, :] == 1, frac, 1.0 - frac)  # (P, 3)
        w = w_axis.prod(axis=1)
        vals += w[:, None] * cvals
        if want_gradient:
            sign = np.where(off == 1, 1.0, -1.0)
            for a in range(3):
                others = [b for b in range(3) if b != a]
                wa = sign[a] * w_axis[:, others[0]] * w_axis[:, others[1]]
                grad[:, a, :] += wa[:, None] * cvals
    return (vals, grad) if want_gradient else vals


def interpolate(field_obj: CoefficientField, points) -> np.ndarray:
    """Coefficient vector(s) of a field at world point(s)."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    idx = _to_index(pts[None, :] if single else pts, field_obj.spacing, field_obj.origin)
    vals = trilinear(field_obj.data, idx, field_obj.boundary)
    return vals[0] if single else vals


def interpolate_map(phi: DeformationField, points) -> np.ndarray:
    """phi evaluated at arbitrary world points.

    The displacement (phi - id) is edge-clamped outside the grid, so the
    map extends continuously as identity-plus-constant-shift.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    disp = phi.map - grid_coordinates(phi.dims, phi.spacing, phi.origin).reshape(phi.map.shape)
    idx = np.clip(_to_index(pts, phi.spacing, phi.origin),
                  0.0, np.array(phi.dims) - 1.0)
    d = trilinear(disp, idx, np.zeros(3))
    return pts + d


def gradient_axis(arr: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Finite-difference derivative along one spatial axis.

    Central differences in the interior, one-sided at the two boundary
    slices (same stencil family as np.gradient).  arr has shape
    (nx,ny,nz,...) and the derivative is taken over the given spatial axis.
    """
    out = np.empty_like(arr)
    n = arr.shape[axis]
    if n < 2:
        raise InputError("need at least 2 voxels along each axis")
    sl = lambda i: tuple(i if a == axis else slice(None) for a in range(arr.ndim))
    out[sl(0)] = (arr[sl(1)] - arr[sl(0)]) / h
    out[sl(n - 1)] = (arr[sl(n - 1)] - arr[sl(n - 2)]) / h
    if n > 2:
        inner = tuple(slice(1, n - 1) if a == axis else slice(None) for a in range(arr.ndim))
        upper = tuple(slice(2, n) if a == axis else slice(None) for a in range(arr.ndim))
        lower = tuple(slice(0, n - 2) if a == axis else slice(None) for a in range(arr.ndim))
        out[inner] = (arr[upper] - arr[lower]) / (2.0 * h)
    return out


def gradient_axis_adjoint(w: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Exact adjoint of gradient_axis: <D g, w> = <g, D^T w> for all g."""
    out = np.zeros_like(w)
    n = w.shape[axis]
    sl = lambda i: tuple(i if a == axis else slice(None) for a in range(w.ndim))
    # boundary one-sided stencils
    out[sl(0)] += -w[sl(0)] / h
    out[sl(1)] += w[sl(0)] / h
    out[sl(n - 2)] += -w[sl(n - 1)] / h
    out[sl(n - 1)] += w[sl(n - 1)] / h
    if n > 2:
        inner = tuple(slice(1, n - 1) if a == axis else slice(None) for a in range(w.ndim))
        upper = tuple(slice(2, n) if a == axis else slice(None) for a in range(w.ndim))
        lower = tuple(slice(0, n - 2) if a == axis else slice(None) for a in range(w.ndim))
        out[upper] += w[inner] / (2.0 * h)
        out[lower] += -w[inner] / (2.0 * h)
    return out


def jacobian_field(phi: DeformationField) -> np.ndarray:
    """Jacobian of the map at every voxel, shape (nx,ny,nz,3,3).

    J[..., k, a] = d phi_k / d x_a, central differences scaled by voxel
    spacing, one-sided at the boundary.
    """
    J = np.empty((*phi.dims, 3, 3))
    for a in range(3):
        J[..., :, a] = gradient_axis(phi.map, a, float(phi.spacing[a]))
    return J


def jacobian(phi: DeformationField, voxel_index) -> np.ndarray:
    """Jacobian matrix at one grid point (3-tuple of voxel indices)."""
    i, j, k = voxel_index
    return jacobian_field(phi)[i, j, k]


def invert_deformation(phi: DeformationField, max_iter: int = 50,
                       tol_factor: float = 0.01) -> DeformationField:
    """Inverse map by per-voxel fixed-point iteration.

    Iterates until the round-trip error |phi(phi^-1(x)) - x| falls below
    tol_factor * min(spacing) everywhere, or max_iter sweeps.  More than
    0.1% non-converged voxels is an error; the worst residual is kept on
    the returned field.
    """
    grid = grid_coordinates(phi.dims, phi.spacing, phi.origin)
    tol = tol_factor * float(np.min(phi.spacing))
    psi = grid.copy()
    for _ in range(max_iter):
        fwd = interpolate_map(phi, psi)
        residual = grid - fwd
        err = np.linalg.norm(residual, axis=1)
        if err.max() < tol:
            break
        psi = psi + residual
    fwd = interpolate_map(phi, psi)
    err = np.linalg.norm(grid - fwd, axis=1)
    bad = np.count_nonzero(err >= tol)
    if bad > max(1, err.size) * 1e-3:
        raise InversionQualityError(
            f"inversion failed on {bad}/{err.size} voxels (max residual {err.max():.3g})")
    out = DeformationField(psi.reshape(*phi.dims, 3), phi.spacing.copy(), phi.origin.copy())
    out.inversion_residual = float(err.max())
    return out


def _check_positive_dets(J: np.ndarray) -> np.ndarray:
    det = np.linalg.det(J)
    if np.any(det <= 0):
        raise FoldingError(
            f"{np.count_nonzero(det <= 0)} voxel(s) with non-positive Jacobian determinant")
    return det


def group_action(atlas: CoefficientField, phi: DeformationField) -> CoefficientField:
    """Deform a coefficient field: resample through phi^-1 and reorient.

    At each output voxel x the result is M(R_y) c(y) with y = phi^-1(x)
    and R_y the finite-strain rotation of the Jacobian of phi at y.
    """
    if atlas.dims != phi.dims:
        raise InputError("field and deformation grids differ")
    J_grid = jacobian_field(phi)
    _check_positive_dets(J_grid)
    psi = invert_deformation(phi)
    y = psi.map.reshape(-1, 3)

    y_idx = np.clip(_to_index(y, phi.spacing, phi.origin), 0.0, np.array(phi.dims) - 1.0)
    J_at_y = trilinear(J_grid.reshape(*phi.dims, 9), y_idx, np.eye(3).ravel()).reshape(-1, 3, 3)
    R, _ = wigner.polar_factors(J_at_y)
    # Exact-identity Jacobians keep an exact-identity rotation operator, so
    # the identity deformation is a bit-level no-op.
    exact_id = np.all(J_at_y == np.eye(3), axis=(1, 2))
    blocks = wigner.rotation_blocks(R, atlas.spec.L)
    if np.any(exact_id):
        blocks[exact_id] = np.eye(blocks.shape[1])

    c_at_y = trilinear(atlas.data, _to_index(y, atlas.spacing, atlas.origin), atlas.boundary)
    c_blocks = c_at_y.reshape(-1, atlas.spec.n_radial, atlas.spec.n_sh)
    out = wigner.reorient_many(c_blocks, blocks).reshape(*atlas.dims, atlas.n_coeff)
    return CoefficientField(out, atlas.spacing.copy(), atlas.origin.copy(),
                            atlas.spec, atlas.boundary.copy())


def compose_deformations(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """The map x -> outer(inner(x)) on inner's grid."""
    pts = interpolate_map(outer, inner.map.reshape(-1, 3))
    return DeformationField(pts.reshape(inner.map.shape), inner.spacing.copy(),
                            inner.origin.copy())
