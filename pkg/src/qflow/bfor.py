"""Orthonormal q-space signal basis: spherical Bessel radial functions times
real symmetric spherical harmonics, supported on the ball |q| < tau.

Includes least-squares fitting of sampled multi-shell signals, signal
reconstruction, field norms, and displacement-PDF (EAP) derived scalar
features.  The basis is normalized to unit L2 norm on the ball; the Gram
matrix test in the suite verifies this numerically rather than trusting
the printed constant.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import jv, spherical_jn

from . import sphharm
from .errors import (
    DegeneratePdfError,
    DomainError,
    InputError,
    InvalidOrderError,
    RankDeficiencyError,
)

# Count of basis-function evaluations, used by the architecture test that
# asserts registration never discretizes q-space.
_BASIS_EVALS = 0


def basis_eval_count() -> int:
    return _BASIS_EVALS


def reset_basis_eval_count() -> None:
    global _BASIS_EVALS
    _BASIS_EVALS = 0


def _count_evals(n: int) -> None:
    global _BASIS_EVALS
    _BASIS_EVALS += n


def bessel_root(n: int, l: int) -> float:
    """n-th positive root of the spherical Bessel function j_l (n >= 1)."""
    if n < 1 or l < 0:
        raise InputError(f"need n >= 1 and l >= 0, got n={n}, l={l}")
    f = lambda x: spherical_jn(l, x)
    # First root of j_l lies beyond l; scan in steps small enough that
    # consecutive roots (spaced ~pi apart) cannot be skipped.
    step = 0.5
    x = max(l, 1e-3)
    found = 0
    fx = f(x)
    while found < n:
        x_next = x + step
        fx_next = f(x_next)
        if fx == 0.0:
            root = x
            found += 1
        elif fx * fx_next < 0.0:
            root = brentq(f, x, x_next, xtol=1e-14, rtol=1e-15)
            found += 1
        x, fx = x_next, fx_next
    return float(root)


@dataclass(frozen=True)
class BforBasisSpec:
    """Basis truncation orders and radial support.

    L : even SH truncation order.
    n_radial : number of radial (spherical Bessel) terms.
    tau : q-space support radius in 1/mm; the radial functions vanish there.
    """

    L: int
    n_radial: int
    tau: float
    roots: np.ndarray = field(repr=False, default=None)  # (n_radial, n_degrees)

    def __post_init__(self):
        if self.L % 2 != 0 or self.L < 0:
            raise InvalidOrderError(f"L must be even and >= 0, got {self.L}")
        if self.n_radial < 1:
            raise InputError(f"need at least one radial term, got {self.n_radial}")
        if self.tau <= 0:
            raise InputError(f"tau must be positive, got {self.tau}")
        if self.roots is None:
            degrees = range(0, self.L + 1, 2)
            tab = np.array(
                [[bessel_root(n, l) for l in degrees]
                 for n in range(1, self.n_radial + 1)]
            )
            object.__setattr__(self, "roots", tab)

    @property
    def n_sh(self) -> int:
        return sphharm.sh_count(self.L)

    @property
    def n_coeff(self) -> int:
        return self.n_radial * self.n_sh

    def root(self, n: int, l: int) -> float:
        return float(self.roots[n - 1, l // 2])

    def degree_of_channel(self) -> np.ndarray:
        """Degree l of each entry of a coefficient vector (n-major layout)."""
        return np.tile(sphharm.sh_degrees(self.L), self.n_radial)


def default_spec(L: int = 4, n_radial: int = 6, q_max: float = 78.95) -> BforBasisSpec:
    """Default truncation (L=4, six radial terms) with tau = 1.25 * q_max."""
    return BforBasisSpec(L=L, n_radial=n_radial, tau=1.25 * q_max)


def _radial_prefactors(spec: BforBasisSpec) -> np.ndarray:
    """Unit-normalization constants, shape (n_radial, n_degrees)."""
    degrees = np.arange(0, spec.L + 1, 2)
    alpha = spec.roots
    out = np.empty_like(alpha)
    for di, l in enumerate(degrees):
        out[:, di] = 2.0 * np.sqrt(alpha[:, di]) / (
            np.sqrt(np.pi * spec.tau**3) * jv(l + 1.5, alpha[:, di])
        )
    return out


def design_matrix(spec: BforBasisSpec, qvecs: np.ndarray,
                  outside: str = "error") -> np.ndarray:
    """Basis functions evaluated at q-space points, shape (K, n_coeff).

    Columns are n-major: radial index n owns one contiguous block of
    sh_count(L) angular channels.  ``outside`` controls points with
    |q| >= tau: "error" raises, "zero" returns zero rows (the signal has
    no support there).
    """
    q = np.atleast_2d(np.asarray(qvecs, dtype=float))
    if q.shape[1] != 3:
        raise InputError(f"q must be (K, 3), got {q.shape}")
    qnorm = np.linalg.norm(q, axis=1)
    in_ball = qnorm < spec.tau
    if not np.all(in_ball):
        if outside == "error":
            raise DomainError(
                f"{np.count_nonzero(~in_ball)} sample(s) at |q| >= tau={spec.tau}")
    dirs = np.where(qnorm[:, None] > 0, q / np.where(qnorm == 0, 1.0, qnorm)[:, None],
                    np.array([0.0, 0.0, 1.0]))
    Y = sphharm.sh_eval_many(spec.L, dirs)
    degrees = np.arange(0, spec.L + 1, 2)
    pref = _radial_prefactors(spec)
    # radial factor per (sample, n, degree)
    rad = np.empty((q.shape[0], spec.n_radial, degrees.size))
    for di, l in enumerate(degrees):
        for n in range(spec.n_radial):
            rad[:, n, di] = spherical_jn(l, spec.roots[n, di] * qnorm / spec.tau)
    rad *= pref[None, :, :]
    rad[~in_ball] = 0.0
    deg_col = sphharm.sh_degrees(spec.L) // 2
    A = (rad[:, :, deg_col] * Y[:, None, :]).reshape(q.shape[0], spec.n_coeff)
    _count_evals(A.size)
    return A


def basis_eval(spec: BforBasisSpec, n: int, l: int, m: int, q) -> float:
    """Single basis function at q (1/mm).  Raises outside the support ball."""
    if not (1 <= n <= spec.n_radial):
        raise InputError(f"radial index n={n} out of range 1..{spec.n_radial}")
    table = sphharm.sh_index_table(spec.L)
    if (l, m) not in table:
        raise InvalidOrderError(f"(l={l}, m={m}) not in the basis for L={spec.L}")
    col = (n - 1) * spec.n_sh + table.index((l, m))
    A = design_matrix(spec, np.asarray(q, dtype=float)[None, :])
    return float(A[0, col])


def laplace_beltrami_penalty(spec: BforBasisSpec) -> np.ndarray:
    """Diagonal of the angular roughness penalty, l^2 (l+1)^2 per channel."""
    l = spec.degree_of_channel().astype(float)
    return (l * (l + 1.0)) ** 2


class FitDesign:
    """Shared normal-equation factorization for fitting many voxels.

    Built once per encoding scheme; ``solve`` then maps sampled signal
    values (K,) or (K, V) to coefficients.
    """

    def __init__(self, spec: BforBasisSpec, qvecs: np.ndarray, ridge: float = 1e-6):
        qvecs = np.atleast_2d(np.asarray(qvecs, dtype=float))
        if qvecs.shape[0] == 0:
            raise InputError("empty sample list")
        if ridge < 0:
            raise InputError(f"ridge must be nonnegative, got {ridge}")
        self.spec = spec
        self.ridge = ridge
        self.A = design_matrix(spec, qvecs)
        gram = self.A.T @ self.A + ridge * np.diag(laplace_beltrami_penalty(spec))
        # Cholesky both solves and detects rank deficiency; with ridge > 0 a
        # failure can still occur (the l=0 channels carry no penalty), so the
        # fallback below keeps underdetermined fits usable via min-norm lstsq.
        try:
            self._chol = np.linalg.cholesky(gram)
            self._use_lstsq = False
        except np.linalg.LinAlgError:
            if ridge == 0:
                raise RankDeficiencyError(
                    "normal matrix is singular and no ridge was requested")
            self._chol = None
            self._use_lstsq = True
            self._aug = np.vstack(
                [self.A, np.sqrt(ridge) * np.diag(np.sqrt(laplace_beltrami_penalty(spec)))])

    def solve(self, values: np.ndarray) -> np.ndarray:
        """Coefficients for one voxel (K,) or a batch (K, V) -> (n_coeff, V)."""
        values = np.asarray(values, dtype=float)
        squeeze = values.ndim == 1
        vals = values[:, None] if squeeze else values
        if vals.shape[0] != self.A.shape[0]:
            raise InputError(
                f"got {vals.shape[0]} samples per voxel, design has {self.A.shape[0]}")
        if self._use_lstsq:
            rhs = np.vstack([vals, np.zeros((self.spec.n_coeff, vals.shape[1]))])
            c = np.linalg.lstsq(self._aug, rhs, rcond=None)[0]
        else:
            rhs = self.A.T @ vals
            y = np.linalg.solve(self._chol, rhs)
            c = np.linalg.solve(self._chol.T, y)
        return c[:, 0] if squeeze else c

    def residual_rms(self, values: np.ndarray, coeffs: np.ndarray) -> float:
        values = np.asarray(values, dtype=float)
        pred = self.A @ coeffs
        return float(np.sqrt(np.mean((values - pred) ** 2)))


def fit_coefficients(qvecs, values, spec: BforBasisSpec, ridge: float = 1e-6):
    """Least-squares coefficients of a sampled signal (one voxel)."""
    return FitDesign(spec, qvecs, ridge).solve(values)


def reconstruct(coeffs: np.ndarray, spec: BforBasisSpec, qvecs) -> np.ndarray:
    """Signal value(s) at q-space point(s) from a coefficient vector."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[-1] != spec.n_coeff:
        raise InputError(
            f"coefficient length {coeffs.shape[-1]} != {spec.n_coeff}")
    q = np.asarray(qvecs, dtype=float)
    single = q.ndim == 1
    A = design_matrix(spec, q[None, :] if single else q)
    out = A @ coeffs if coeffs.ndim == 1 else np.einsum("kc,...c->...k", A, coeffs)
    return float(out[0]) if (single and coeffs.ndim == 1) else out


def l2_norm(field_obj) -> float:
    """L2 norm of a coefficient field under the discrete image measure.

    Orthonormality of the basis makes this the plain Euclidean norm of all
    coefficients scaled by sqrt(voxel volume).
    """
    vol = float(np.prod(field_obj.spacing))
    return float(np.sqrt(np.sum(field_obj.data**2) * vol))


def eap_grid(coeffs: np.ndarray, spec: BforBasisSpec, grid_size: int = 35,
             q_extent: float = None) -> np.ndarray:
    """Displacement PDF on a centered cubic grid via discrete Fourier transform.

    The reconstructed signal is sampled on a grid_size^3 Cartesian q-grid
    spanning [-q_extent, q_extent] per axis (points outside the support
    ball contribute zero), Fourier transformed, clamped at zero, and
    normalized to unit sum.
    """
    if grid_size % 2 == 0 or grid_size < 3:
        raise InputError(f"grid size must be odd and >= 3, got {grid_size}")
    if q_extent is None:
        q_extent = spec.tau
    if q_extent > spec.tau:
        raise DomainError(f"q_extent {q_extent} exceeds tau {spec.tau}")
    axis = np.linspace(-q_extent, q_extent, grid_size)
    qx, qy, qz = np.meshgrid(axis, axis, axis, indexing="ij")
    qpts = np.column_stack([qx.ravel(), qy.ravel(), qz.ravel()])
    A = design_matrix(spec, qpts, outside="zero")
    signal = (A @ np.asarray(coeffs, dtype=float)).reshape(grid_size, grid_size, grid_size)
    pdf = np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(signal))).real
    pdf = np.clip(pdf, 0.0, None)
    total = pdf.sum()
    if total <= 0.0:
        raise DegeneratePdfError("displacement PDF vanished; cannot normalize")
    return pdf / total


def eap_spacing_um(grid_size: int, q_extent: float) -> float:
    """Displacement-grid spacing in micrometers for eap_grid output."""
    dq = 2.0 * q_extent / (grid_size - 1)  # 1/mm
    return 1.0 / (grid_size * dq) * 1e3


def scalar_features(coeffs: np.ndarray, spec: BforBasisSpec, radii_um,
                    grid_size: int = 35, q_extent: float = None):
    """Zero-displacement probability, mean squared displacement, and GFA.

    Returns (Po, MSD in um^2, list of GFA values, one per sphere radius in
    um).  GFA is std/rms of the PDF sampled on the sphere, in [0, 1].
    """
    if q_extent is None:
        q_extent = spec.tau
    pdf = eap_grid(coeffs, spec, grid_size, q_extent)
    dp = eap_spacing_um(grid_size, q_extent)
    center = grid_size // 2
    po = float(pdf[center, center, center])

    idx = (np.arange(grid_size) - center) * dp
    px, py, pz = np.meshgrid(idx, idx, idx, indexing="ij")
    msd = float(np.sum((px**2 + py**2 + pz**2) * pdf))

    dirs, _ = sphharm.sphere_quadrature(11)
    gfa = []
    for r in np.atleast_1d(radii_um):
        if r / dp > center:
            raise DomainError(f"radius {r} um outside the displacement grid")
        pts = center + dirs * (r / dp)
        vals = _trilinear_scalar(pdf, pts)
        rms = np.sqrt(np.mean(vals**2))
        if rms == 0.0:
            gfa.append(0.0)
            continue
        n = vals.size
        g = np.sqrt(n * np.sum((vals - vals.mean()) ** 2) / ((n - 1) * np.sum(vals**2)))
        gfa.append(float(g))
    return po, msd, gfa


def _trilinear_scalar(vol: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a scalar volume at fractional indices."""
    base = np.floor(pts).astype(int)
    frac = pts - base
    out = np.zeros(pts.shape[0])
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        w = np.prod(np.where(off, frac, 1.0 - frac), axis=1)
        ix = np.clip(base + off, 0, np.array(vol.shape) - 1)
        out += w * vol[ix[:, 0], ix[:, 1], ix[:, 2]]
    return out


def free_water_vector(spec: BforBasisSpec, qvecs, bvals,
                      diffusivity: float = 3e-3) -> np.ndarray:
    """Coefficients of an isotropic free-water signal exp(-b d).

    Used as the out-of-grid boundary value of coefficient fields, so edge
    voxels never match against an unphysical zero signal.
    """
    values = np.exp(-np.asarray(bvals, dtype=float) * diffusivity)
    return fit_coefficients(qvecs, values, spec)
