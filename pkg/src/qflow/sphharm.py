"""Real, symmetric (even-degree) spherical harmonic basis.

The basis follows the modified real SH convention used throughout the
HARDI literature: for order m < 0 the (scaled) imaginary part of the
complex harmonic, for m = 0 the plain zonal harmonic, and for m > 0 the
(scaled) real part.  Only even degrees appear, so every basis function
is antipodally symmetric.  Associated Legendre values come from
``scipy.special.lpmv`` (Condon-Shortley phase included), which is stable
well past the L <= 16 range supported here.
"""

import numpy as np
from scipy.special import gammaln, lpmv

from .errors import DomainError, InvalidOrderError

MAX_DEGREE = 16


def _check_order(L):
    if L < 0 or L % 2 != 0:
        raise InvalidOrderError(f"truncation order must be even and >= 0, got {L}")
    if L > MAX_DEGREE:
        raise InvalidOrderError(f"degrees above {MAX_DEGREE} are not supported, got {L}")


def sh_count(L: int) -> int:
    """Number of even-degree real SH up to degree L: (L+1)(L+2)/2."""
    _check_order(L)
    return (L + 1) * (L + 2) // 2


def sh_index_table(L: int):
    """(l, m) pairs in basis order: l ascending over even degrees, m from -l to l."""
    _check_order(L)
    return [(l, m) for l in range(0, L + 1, 2) for m in range(-l, l + 1)]


def sh_degrees(L: int) -> np.ndarray:
    """Degree l of each basis function, as an int array of length sh_count(L)."""
    return np.array([l for l, _ in sh_index_table(L)], dtype=int)


def _normalization(l, m):
    # sqrt((2l+1)/(4pi) * (l-|m|)!/(l+|m|)!)
    m = abs(m)
    return np.sqrt(
        (2 * l + 1) / (4.0 * np.pi) * np.exp(gammaln(l - m + 1) - gammaln(l + m + 1))
    )


def sh_eval_many(L: int, points: np.ndarray) -> np.ndarray:
    """Evaluate all basis functions at unit vectors ``points`` (P, 3).

    Returns an array of shape (P, sh_count(L)).  Directions are assumed
    unit-norm; use :func:`sh_eval` for a checked single evaluation.
    """
    _check_order(L)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cos_theta = np.clip(pts[:, 2], -1.0, 1.0)
    phi = np.arctan2(pts[:, 1], pts[:, 0])
    out = np.empty((pts.shape[0], sh_count(L)), dtype=float)
    for col, (l, m) in enumerate(sh_index_table(L)):
        plm = lpmv(abs(m), l, cos_theta)
        norm = _normalization(l, m)
        if m == 0:
            out[:, col] = norm * plm
        elif m > 0:
            out[:, col] = np.sqrt(2.0) * norm * plm * np.cos(m * phi)
        else:
            out[:, col] = np.sqrt(2.0) * norm * plm * np.sin(-m * phi)
    return out


def sh_eval(l: int, m: int, u) -> float:
    """Single basis function Y_{l,m} at a unit vector u."""
    _check_order(l)
    if abs(m) > l:
        raise InvalidOrderError(f"order m={m} out of range for degree l={l}")
    u = np.asarray(u, dtype=float)
    if abs(np.linalg.norm(u) - 1.0) > 1e-10:
        raise DomainError(f"direction must be unit length, |u|={np.linalg.norm(u)!r}")
    table = sh_index_table(l)
    col = table.index((l, m))
    return float(sh_eval_many(l, u[None, :])[0, col])


def sphere_quadrature(degree: int):
    """Quadrature on S^2 exact for spherical polynomials up to ``degree``.

    Product rule: Gauss-Legendre in cos(theta) times a uniform azimuthal
    grid.  Returns (points (K, 3), weights (K,)) with weights summing to
    4*pi.
    """
    n_polar = degree // 2 + 1
    n_azim = degree + 1
    mu, w_mu = np.polynomial.legendre.leggauss(n_polar)
    phi = 2.0 * np.pi * np.arange(n_azim) / n_azim
    w_phi = 2.0 * np.pi / n_azim
    sin_theta = np.sqrt(1.0 - mu**2)
    x = np.outer(sin_theta, np.cos(phi)).ravel()
    y = np.outer(sin_theta, np.sin(phi)).ravel()
    z = np.outer(mu, np.ones(n_azim)).ravel()
    points = np.column_stack([x, y, z])
    weights = np.outer(w_mu, np.full(n_azim, w_phi)).ravel()
    return points, weights
