"""Diffeomorphic registration of coefficient fields.

Deformations are flows of Gaussian-kernel velocity fields parameterized
by momentum vectors at control points (the voxel grid, optionally
strided for speed).  The objective is the kinetic energy of the flow
plus a matching energy between the deformed-and-reoriented atlas and the
subject.  The matching term and its gradient are evaluated in material
coordinates (change of variables by the flow), which keeps the analytic
gradient consistent with finite differences of the discrete objective.

The gradient has two channels: the resampling/volume channel (the
scalar-image term) and the reorientation channel, which differentiates
the per-voxel rotation operator through the polar factor of the local
Jacobian.  The latter can be switched off for ablation studies.

No basis functions are ever evaluated here; everything runs on
coefficient vectors.
"""

import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.spatial.distance import cdist

from . import field as fld
from . import sphharm, wigner
from .errors import DivergenceError, FoldingError, InputError


# ---------------------------------------------------------------------------
# kernels


def kernel_matrix(points_a, points_b, sigma_v: float) -> np.ndarray:
    """Gaussian kernel exp(-|a-b|^2 / sigma_v^2) between two point sets."""
    if sigma_v <= 0:
        raise InputError(f"sigma_v must be positive, got {sigma_v}")
    d2 = cdist(points_a, points_b, "sqeuclidean")
    return np.exp(-d2 / sigma_v**2)


def kernel_apply(points_a, points_b, vectors_b, sigma_v: float) -> np.ndarray:
    """Velocity at points_a induced by momentum vectors at points_b."""
    return kernel_matrix(points_a, points_b, sigma_v) @ vectors_b


def _kernel_adjoints(a, x, alpha, p, sigma_v, K=None):
    """Adjoint pieces of the map (a, x) -> K(a, x) alpha.

    Returns (target, source): target[i] = sum_c p_i^c d/da_i sum_j k alpha_j^c
    and source[l] = transpose part w.r.t. the source points x_l.
    """
    if K is None:
        K = kernel_matrix(a, x, sigma_v)
    diff = a[:, None, :] - x[None, :, :]
    dots = K * (p @ alpha.T)
    target = (-2.0 / sigma_v**2) * np.einsum("ij,ijd->id", dots, diff)
    source = (2.0 / sigma_v**2) * np.einsum("ij,ijd->jd", dots, diff)
    return target, source


# ---------------------------------------------------------------------------
# momentum trajectories and flows


@dataclass
class MomentumTrajectory:
    """Per-step momentum 3-vectors at control points; dt = 1/T on [0, 1]."""

    alpha: np.ndarray  # (T, N, 3)
    points: np.ndarray  # (N, 3) control points at t=0
    sigma_v: float

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.points = np.asarray(self.points, dtype=float)
        if self.alpha.ndim != 3 or self.alpha.shape[1:] != (self.points.shape[0], 3):
            raise InputError(
                f"alpha must be (T, {self.points.shape[0]}, 3), got {self.alpha.shape}")

    @property
    def n_steps(self) -> int:
        return self.alpha.shape[0]

    @property
    def dt(self) -> float:
        return 1.0 / self.alpha.shape[0]


def flow_forward(m: MomentumTrajectory, passive=None):
    """Forward-Euler integration of the flow.

    Returns the control-point trajectory (T+1, N, 3) and, when ``passive``
    points are given, their carried trajectory (T+1, P, 3).
    """
    T = m.n_steps
    if T < 1:
        raise InputError("need at least one time step")
    dt = m.dt
    xt = np.empty((T + 1, *m.points.shape))
    xt[0] = m.points
    yt = None
    if passive is not None:
        passive = np.asarray(passive, dtype=float)
        yt = np.empty((T + 1, *passive.shape))
        yt[0] = passive
    for t in range(T):
        K = kernel_matrix(xt[t], xt[t], m.sigma_v)
        xt[t + 1] = xt[t] + dt * (K @ m.alpha[t])
        if yt is not None:
            yt[t + 1] = yt[t] + dt * kernel_apply(yt[t], xt[t], m.alpha[t], m.sigma_v)
    if not np.all(np.isfinite(xt)) or (yt is not None and not np.all(np.isfinite(yt))):
        raise DivergenceError("flow integration diverged (step size too large)")
    return xt, yt


def kinetic_energy(m: MomentumTrajectory, traj=None, per_step: bool = False):
    """Integral of <m_t, k_V m_t> dt along the flow."""
    if traj is None:
        traj, _ = flow_forward(m)
    vals = np.empty(m.n_steps)
    for t in range(m.n_steps):
        K = kernel_matrix(traj[t], traj[t], m.sigma_v)
        vals[t] = np.sum(m.alpha[t] * (K @ m.alpha[t]))
    total = float(np.sum(vals) * m.dt)
    return (total, vals) if per_step else total


def flow_deformation(m: MomentumTrajectory, dims, spacing, origin) -> fld.DeformationField:
    """Deformation field at t=1 on a voxel grid carried by the flow."""
    grid = fld.grid_coordinates(dims, spacing, origin)
    _, yt = flow_forward(m, passive=grid)
    return fld.DeformationField(yt[-1].reshape(*dims, 3),
                                np.asarray(spacing, float), np.asarray(origin, float))


# ---------------------------------------------------------------------------
# matching energy and its gradient (material coordinates)


def matching_energy(atlas: fld.CoefficientField, subject: fld.CoefficientField,
                    phi: fld.DeformationField) -> float:
    """Squared L2 difference between the deformed atlas and the subject.

    Evaluated in deformed coordinates through the group action (inverse
    map plus reorientation); the optimizer uses the material-coordinates
    form below, equal up to interpolation error.
    """
    deformed = fld.group_action(atlas, phi)
    vol = float(np.prod(atlas.spacing))
    return float(np.sum((deformed.data - subject.data) ** 2) * vol)


def _material_terms(atlas, subject, phi_points, dims, spacing, origin,
                    want_gradient, with_term_b=True, weights=None, delta_mu=1e-4):
    """Shared pipeline for the material-form energy and gradient."""
    nvox = int(np.prod(dims))
    phi_grid = phi_points.reshape(*dims, 3)
    J = np.empty((*dims, 3, 3))
    for a in range(3):
        J[..., :, a] = fld.gradient_axis(phi_grid, a, float(spacing[a]))
    Jv = J.reshape(nvox, 3, 3)
    det = np.linalg.det(Jv)
    if np.any(det <= 0):
        raise FoldingError("candidate deformation folds (det <= 0)")
    R, S = wigner.polar_factors(Jv)
    blocks = wigner.rotation_blocks(R, atlas.spec.L)
    n_sh = atlas.spec.n_sh
    c_blocks = atlas.data.reshape(nvox, atlas.spec.n_radial, n_sh)
    chat = wigner.reorient_many(c_blocks, blocks)
    chat_flat = chat.reshape(nvox, -1)

    idx = (phi_points - origin) / spacing
    if want_gradient:
        s_vals, s_grad = fld.trilinear(subject.data, idx, subject.boundary,
                                       want_gradient=True)
    else:
        s_vals = fld.trilinear(subject.data, idx, subject.boundary)
        s_grad = None
    r = chat_flat - s_vals
    w_vox = det if weights is None else det * weights
    vol = float(np.prod(spacing))
    r2 = np.sum(r * r, axis=1)
    energy = float(vol * np.sum(w_vox * r2))
    if not want_gradient:
        return energy, None

    # pointwise channel: variation of the subject sample at phi(y)
    s_grad_world = s_grad / np.asarray(spacing, float)[None, :, None]
    G = -2.0 * vol * w_vox[:, None] * np.einsum("vac,vc->va", s_grad_world, r)

    # volume channel: variation of det J
    Jinv_t = np.swapaxes(np.linalg.inv(Jv), 1, 2)
    W = vol * (w_vox * r2)[:, None, None] * Jinv_t

    if with_term_b:
        # reorientation channel: rotation tangent through the polar factor
        GR = wigner.rotated_coeff_gradient(chat, atlas.spec.L, delta_mu)
        v = np.einsum("vic,vc->vi", GR.reshape(nvox, 3, -1), r)
        trS = np.trace(S, axis1=1, axis2=2)
        phi_mat = trS[:, None, None] * np.eye(3)[None] - S
        q = np.linalg.solve(phi_mat, v[:, :, None])[:, :, 0]
        skew_q = np.zeros((nvox, 3, 3))
        skew_q[:, 0, 1] = -q[:, 2]; skew_q[:, 1, 0] = q[:, 2]
        skew_q[:, 0, 2] = q[:, 1]; skew_q[:, 2, 0] = -q[:, 1]
        skew_q[:, 1, 2] = -q[:, 0]; skew_q[:, 2, 1] = q[:, 0]
        W = W + 2.0 * vol * w_vox[:, None, None] * (skew_q @ R)

    Wg = W.reshape(*dims, 3, 3)
    scatter = np.zeros((*dims, 3))
    for a in range(3):
        scatter += fld.gradient_axis_adjoint(Wg[..., :, a], a, float(spacing[a]))
    return energy, (G + scatter.reshape(nvox, 3))


def matching_energy_material(atlas, subject, phi: fld.DeformationField,
                             weights=None) -> float:
    """Matching energy in material coordinates (no inverse map needed)."""
    e, _ = _material_terms(atlas, subject, phi.map.reshape(-1, 3), atlas.dims,
                           atlas.spacing, atlas.origin, want_gradient=False,
                           weights=weights)
    return e


def gradient_E(atlas, subject, phi: fld.DeformationField, with_term_b: bool = True,
               weights=None, delta_mu: float = 1e-4) -> np.ndarray:
    """Gradient of the material matching energy w.r.t. the map values.

    Returns per-grid-point 3-vectors, shape (nx, ny, nz, 3).  The
    ``with_term_b=False`` ablation drops the reorientation channel while
    the energy itself still reorients.
    """
    _, g = _material_terms(atlas, subject, phi.map.reshape(-1, 3), atlas.dims,
                           atlas.spacing, atlas.origin, want_gradient=True,
                           with_term_b=with_term_b, weights=weights,
                           delta_mu=delta_mu)
    return g.reshape(*atlas.dims, 3)


# ---------------------------------------------------------------------------
# adjoint integration


def adjoint_backward(m: MomentumTrajectory, traj: np.ndarray,
                     grad_e_at_1: np.ndarray) -> np.ndarray:
    """Backward-Euler adjoint along a control-point flow.

    eta[T] = grad_e_at_1; stepping back,
    eta[t] = eta[t+1] + dt * ([d_phi (k_V m)]^T eta[t+1] + grad_phi <m, k_V m>)
    evaluated on the time-t state, which is the exact transpose of the
    forward-Euler recursion.
    """
    T = m.n_steps
    eta = np.empty_like(traj)
    eta[T] = np.asarray(grad_e_at_1, dtype=float)
    for t in range(T - 1, -1, -1):
        x = traj[t]
        a = m.alpha[t]
        K = kernel_matrix(x, x, m.sigma_v)
        tgt, src = _kernel_adjoints(x, x, a, eta[t + 1], m.sigma_v, K=K)
        ktgt, ksrc = _kernel_adjoints(x, x, a, a, m.sigma_v, K=K)
        eta[t] = eta[t + 1] + m.dt * (tgt + src + ktgt + ksrc)
    return eta


# ---------------------------------------------------------------------------
# the registration problem


@dataclass
class RegistrationParams:
    sigma_v: float = 12.0
    lam: float = 1.0
    n_steps: int = 10
    max_iter: int = 100
    tol: float = 1e-4
    control_stride: int = None  # None: stride 2 on grids above 12^3
    with_term_b: bool = True
    delta_mu: float = 1e-4
    ls_evals: int = 20
    verbose: bool = False


@dataclass
class RegistrationResult:
    momentum: MomentumTrajectory
    phi: fld.DeformationField
    report: list
    status: str
    energy: float
    kinetic: float
    objective: float

    def report_text(self) -> str:
        lines = ["iter\tJ\tmetric\tE\tstep"]
        for row in self.report:
            lines.append("{iter}\t{J:.8g}\t{metric:.8g}\t{E:.8g}\t{step:.3g}".format(**row))
        return "\n".join(lines)


class RegistrationProblem:
    """Objective and exact gradient for one atlas/subject pair."""

    def __init__(self, atlas: fld.CoefficientField, subject: fld.CoefficientField,
                 params: RegistrationParams, weights=None):
        if atlas.dims != subject.dims or atlas.n_coeff != subject.n_coeff:
            raise InputError("atlas and subject must share grid and basis")
        self.atlas = atlas
        self.subject = subject
        self.params = params
        self.weights = None if weights is None else np.asarray(weights, float).reshape(-1)
        self.grid = atlas.grid_points()
        stride = params.control_stride
        if stride is None:
            stride = 2 if self.grid.shape[0] > 12**3 else 1
        self.stride = stride
        if stride == 1:
            self.control = self.grid
            self.passive_separate = False
        else:
            nx, ny, nz = atlas.dims
            mask = np.zeros(atlas.dims, dtype=bool)
            mask[::stride, ::stride, ::stride] = True
            self.control = self.grid[mask.ravel()]
            self.passive_separate = True

    def zero_momentum(self) -> MomentumTrajectory:
        return MomentumTrajectory(
            np.zeros((self.params.n_steps, self.control.shape[0], 3)),
            self.control, self.params.sigma_v)

    def _flow(self, alpha):
        m = MomentumTrajectory(alpha, self.control, self.params.sigma_v)
        passive = self.grid if self.passive_separate else None
        xt, yt = flow_forward(m, passive=passive)
        return m, xt, (yt if self.passive_separate else xt)

    def objective(self, alpha):
        """(J, kinetic, E); raises FoldingError on folded candidates."""
        m, xt, yt = self._flow(alpha)
        kin = kinetic_energy(m, traj=xt)
        e, _ = _material_terms(self.atlas, self.subject, yt[-1], self.atlas.dims,
                               self.atlas.spacing, self.atlas.origin,
                               want_gradient=False, weights=self.weights)
        return kin + self.params.lam * e, kin, e

    def gradient(self, alpha):
        """Exact discrete gradient of the objective w.r.t. alpha.

        Returns (grad (T,N,3), J, kinetic, E).
        """
        p = self.params
        m, xt, yt = self._flow(alpha)
        T = m.n_steps
        dt = m.dt
        kin = kinetic_energy(m, traj=xt)
        e, ge = _material_terms(self.atlas, self.subject, yt[-1], self.atlas.dims,
                                self.atlas.spacing, self.atlas.origin,
                                want_gradient=True, with_term_b=p.with_term_b,
                                weights=self.weights, delta_mu=p.delta_mu)
        grad = np.empty_like(alpha)
        if not self.passive_separate:
            eta = adjoint_backward(m, xt, p.lam * ge)
            for t in range(T):
                K = kernel_matrix(xt[t], xt[t], p.sigma_v)
                grad[t] = dt * (2.0 * (K @ m.alpha[t]) + K @ eta[t + 1])
        else:
            px = np.zeros_like(xt[-1])
            py = p.lam * ge
            for t in range(T - 1, -1, -1):
                x, y, a = xt[t], yt[t], m.alpha[t]
                Kxx = kernel_matrix(x, x, p.sigma_v)
                Kyx = kernel_matrix(y, x, p.sigma_v)
                grad[t] = dt * (2.0 * (Kxx @ a) + Kxx @ px + Kyx.T @ py)
                tgt_y, src_y = _kernel_adjoints(y, x, a, py, p.sigma_v, K=Kyx)
                tgt_x, src_x = _kernel_adjoints(x, x, a, px, p.sigma_v, K=Kxx)
                ktgt, ksrc = _kernel_adjoints(x, x, a, a, p.sigma_v, K=Kxx)
                px = px + dt * (tgt_x + src_x + src_y + ktgt + ksrc)
                py = py + dt * tgt_y
        return grad, kin + p.lam * e, kin, e

    def deformation(self, alpha) -> fld.DeformationField:
        _, _, yt = self._flow(alpha)
        return fld.DeformationField(yt[-1].reshape(*self.atlas.dims, 3),
                                    self.atlas.spacing.copy(), self.atlas.origin.copy())


def _golden_section(f, eps_max, max_evals):
    """Minimize f on [0, eps_max]; returns (best_s, best_f, n_evals).

    f may raise FoldingError/DivergenceError for infeasible steps, which
    count as +inf.
    """
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0

    cache = {}

    def feval(s):
        if s not in cache:
            try:
                cache[s] = f(s)
            except (FoldingError, DivergenceError):
                cache[s] = math.inf
        return cache[s]

    a, b = 0.0, eps_max
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    evals = 0
    while evals < max_evals - 2 and (b - a) > 1e-3 * eps_max:
        fc, fd = feval(c), feval(d)
        evals = len(cache)
        if fc < fd:
            b, d = d, c
            c = b - inv_phi * (b - a)
        else:
            a, c = c, d
            d = a + inv_phi * (b - a)
    for s in (c, d):
        feval(s)
    best_s = min(cache, key=cache.get)
    return best_s, cache[best_s], len(cache)


def register(atlas: fld.CoefficientField, subject: fld.CoefficientField,
             params: RegistrationParams = None, weights=None) -> RegistrationResult:
    """Nonlinear conjugate-gradient minimization of the flow objective.

    Each iteration integrates the flow, evaluates the matching gradient,
    runs the adjoint, and takes a golden-section step along a
    Polak-Ribiere direction (restarted every 10 iterations or on loss of
    descent).  Accepted iterates never increase the objective.
    """
    params = params or RegistrationParams()
    prob = RegistrationProblem(atlas, subject, params, weights=weights)
    alpha = prob.zero_momentum().alpha.copy()

    j_cur, kin_cur, e_cur = prob.objective(alpha)
    report = [dict(iter=0, J=j_cur, metric=kin_cur, E=e_cur, step=0.0)]
    status = "converged"
    g_prev = None
    d = None
    eps_max = None
    history = [j_cur]

    for it in range(1, params.max_iter + 1):
        g, j_chk, kin_chk, e_chk = prob.gradient(alpha)
        gnorm = float(np.max(np.abs(g)))
        if gnorm < 1e-14:
            break
        if g_prev is None or (it - 1) % 10 == 0:
            d = -g
        else:
            beta = max(0.0, float(np.sum(g * (g - g_prev)) / np.sum(g_prev * g_prev)))
            d = -g + beta * d
            if np.sum(d * g) >= 0:
                d = -g
        g_prev = g

        if eps_max is None:
            dmax = float(np.max(np.abs(d)))
            eps_max = 0.5 * float(np.min(atlas.spacing)) / max(dmax, 1e-12)

        def f(s, d=d, alpha=alpha):
            return prob.objective(alpha + s * d)[0]

        s_best, f_best, _ = _golden_section(f, eps_max, params.ls_evals)
        if not (f_best < j_cur) or s_best == 0.0:
            status = "line_search_failure"
            break
        alpha = alpha + s_best * d
        j_cur, kin_cur, e_cur = prob.objective(alpha)
        report.append(dict(iter=it, J=j_cur, metric=kin_cur, E=e_cur, step=s_best))
        if params.verbose:
            print(f"iter {it}: J={j_cur:.6g} kinetic={kin_cur:.6g} "
                  f"E={e_cur:.6g} step={s_best:.3g}")
        if s_best > 0.6 * eps_max:
            eps_max *= 2.0
        elif s_best < 0.1 * eps_max:
            eps_max = max(eps_max * 0.5, 1e-8)

        history.append(j_cur)
        if len(history) >= 4:
            recent = history[-4:]
            if all(abs(recent[i + 1] - recent[i]) < params.tol * max(abs(recent[0]), 1e-30)
                   for i in range(3)):
                break
    else:
        status = "max_iter"

    momentum = MomentumTrajectory(alpha, prob.control, params.sigma_v)
    phi = prob.deformation(alpha)
    return RegistrationResult(momentum=momentum, phi=phi, report=report,
                              status=status, energy=e_cur, kinetic=kin_cur,
                              objective=j_cur)
