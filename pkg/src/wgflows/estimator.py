"""Closed-form kernel estimator of potential and interaction functions.

Given trajectory data, the inverse solver regresses the flow's forcing
operator onto kernel sections.  With node weights a = (d+ rho)_l^n and
r = rho_l^n, the forward operator acting on a candidate pair (phi, psi) is

    Op(phi, psi)(t_l, x_n) = a d/dx (phi + psi conv rho_l)(x_n)
                           + r d2/dx2 (phi + psi conv rho_l)(x_n),

and the data side f collects the forward-differenced time derivatives plus,
for Hamiltonian data, the geodesic correction term.  The regularized least
squares over the product RKHS has the closed-form solution

    (G + l1 l2 / (dt dx) C) z = C f,      C = diag(rho),
    coef_V = l2 z,   coef_W = l1 z,

with G the density-weighted Gram of the two section families.  Both section
families are spanned by few generators (2N for plain sections, 2(2N-1) for
convolved ones), so G factors exactly as C (l2 F1 Kt1 F1' + l1 F2 Kt2 F2') C
with tall-skinny F factors.  Large problems are solved through that
factorization (Woodbury identity) without materializing G; small ones can
also go through the dense Cholesky path, and the two agree to roundoff.

A third kernel turns the solver into the three-function variant that learns
the internal-energy contribution as an additional x-dependent term inside
the operator, with coefficient products of the complementary regularizers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .flows import InternalEnergy, NO_INTERNAL_ENERGY, christoffel_term
from .kernels import SmoothKernel
from .mesh import PERIODIC, DensityTrajectory, diff_space
from .rkhs import CONVOLVED, PLAIN, RkhsFunction, difference_grid, rkhs_inner

DENSE_CEILING = 4096  # largest node count for materialized Gram matrices

GRADIENT = "gradient"
HAMILTONIAN = "hamiltonian"


class EstimatorError(RuntimeError):
    """Ill-posed problem setup or linear-algebra failure."""


@dataclass
class EstimationProblem:
    """Inputs of one inverse solve.

    ``drop_last_time_rows`` removes trailing time rows from the fitted node
    set (their forward time differences have no successor sample and carry
    O(1/dt) truncation error); the dropped rows still feed the time
    differences of the remaining rows.  Default 0 keeps every row.

    ``spatial_slope_override`` replaces the forward-differenced density
    slopes by caller-supplied values (e.g. spectral derivatives) and
    ``f_override`` replaces the assembled data functional; both exist for
    error-decomposition diagnostics.
    """

    traj: DensityTrajectory
    kernel1: SmoothKernel
    kernel2: SmoothKernel
    lambda1: float
    lambda2: float
    flow_kind: str = GRADIENT
    known_u: InternalEnergy = NO_INTERNAL_ENERGY
    kernel3: SmoothKernel | None = None
    lambda3: float | None = None
    drop_last_time_rows: int = 0
    spatial_slope_override: np.ndarray | None = None
    f_override: np.ndarray | None = None

    def __post_init__(self):
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise EstimatorError("regularization parameters must be positive")
        if (self.kernel3 is None) != (self.lambda3 is None):
            raise EstimatorError("kernel3 and lambda3 must be supplied together")
        if self.lambda3 is not None and self.lambda3 <= 0:
            raise EstimatorError("lambda3 must be positive")
        if self.flow_kind not in (GRADIENT, HAMILTONIAN):
            raise EstimatorError(f"unknown flow kind {self.flow_kind!r}")
        if self.flow_kind == HAMILTONIAN:
            if self.traj.mesh.L < 3:
                raise EstimatorError("Hamiltonian estimation needs L >= 3")
            if self.traj.boundary_mode != PERIODIC:
                raise EstimatorError(
                    "Hamiltonian estimation needs periodic data (the geodesic "
                    "correction solves an elliptic problem on the torus)"
                )
        if not self.known_u.pointwise:
            raise EstimatorError(
                f"internal energy {self.known_u.kind!r} has no pointwise "
                "derivatives; the data functional cannot be assembled"
            )
        if not 0 <= self.drop_last_time_rows < self.traj.mesh.L:
            raise EstimatorError("drop_last_time_rows must leave at least one row")

    @property
    def learn_internal(self) -> bool:
        return self.kernel3 is not None

    @property
    def fit_rows(self) -> int:
        return self.traj.mesh.L - self.drop_last_time_rows

    @property
    def node_count(self) -> int:
        return self.fit_rows * self.traj.mesh.N

    @property
    def node_weight(self) -> float:
        """Riemann weight dt*dx of one space-time node (= T|Omega|/NL)."""
        return self.traj.mesh.dt * self.traj.mesh.dx


@dataclass
class EstimatorResult:
    """Coefficients, reconstructed functions, and diagnostics of one solve."""

    C1: np.ndarray
    C2: np.ndarray
    Vhat: RkhsFunction
    What: RkhsFunction
    rkhs_norms: dict
    loss_value: float
    residual_vector: np.ndarray
    gram_condition: float
    lambdas: tuple
    method: str
    C3: np.ndarray | None = None
    Uhat: RkhsFunction | None = None
    operator_image: np.ndarray = field(default=None, repr=False)
    data_vector: np.ndarray = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# Data functional
# ---------------------------------------------------------------------------

def assemble_data_functional(traj: DensityTrajectory, flow_kind: str,
                             known_u: InternalEnergy = NO_INTERNAL_ENERGY,
                             include_internal: bool = True) -> np.ndarray:
    """Data side f of the regression, shape (L, N).

    gradient:     f = d+_t rho - a d/dx U'(rho) - rho d2/dx2 U'(rho)
    hamiltonian:  adds d+_tt rho and the geodesic correction on the
                  forward-differenced time slices.

    Spatial derivatives of U'(rho) use the chain rule with the same forward
    differences as the operator: d/dx U'(rho) ~ U''(rho) (d+ rho), second
    derivative by differencing that product again.  For the three-function
    estimator (``include_internal=False``) the internal-energy terms are
    omitted because that contribution is learned.
    """
    mesh = traj.mesh
    if flow_kind == GRADIENT:
        f = traj.dt_plus().copy()
    elif flow_kind == HAMILTONIAN:
        if mesh.L < 3:
            raise EstimatorError("Hamiltonian data functional needs L >= 3")
        if traj.boundary_mode != PERIODIC:
            raise EstimatorError("Hamiltonian data functional needs periodic data")
        f = traj.dtt_plus().copy()
        slopes = traj.dt_plus()
        for l in range(mesh.L):
            sdot = slopes[l]
            # geodesic correction is defined on zero-mean tangent slices;
            # project out the (discretization-induced) mean component
            f[l] += christoffel_term(traj.values[l], sdot - sdot.mean(), mesh)
    else:
        raise EstimatorError(f"unknown flow kind {flow_kind!r}")
    if include_internal and known_u.kind != "none":
        if not known_u.pointwise:
            raise EstimatorError(f"{known_u.kind!r} energy not supported here")
        a = traj.dx_plus()
        g1 = known_u.d2u(traj.values) * a
        g2 = diff_space(g1, mesh.dx, traj.boundary_mode)
        f = f - a * g1 - traj.values * g2
    return f


# ---------------------------------------------------------------------------
# Section factors
# ---------------------------------------------------------------------------

@dataclass
class SectionFactors:
    """Exact low-rank factorization of the section Gram matrices.

    Plain sections of a kernel K over nodes (l, n) satisfy
    section_{ln} = a d1K(x_n, .) + r d11K(x_n, .), so their Gram is
    F K~ F' with F the (nodes x 2N) coefficient matrix onto the generators
    d1^i K(x_n, .) and K~ the generator Gram of mixed partials.  Convolved
    sections reduce the same way over the 2N-1 difference-grid centers.
    """

    a: np.ndarray          # (Lf, N) density slopes entering the operator
    r: np.ndarray          # (Lf, N) density values
    rho_flat: np.ndarray   # (M,)
    F1: np.ndarray         # (M, 2N)
    K1t: np.ndarray        # (2N, 2N)
    F2: np.ndarray         # (M, 4N-2)
    K2t: np.ndarray        # (4N-2, 4N-2)
    centers1: np.ndarray   # grid points
    centers2: np.ndarray   # difference grid
    F3: np.ndarray | None = None
    K3t: np.ndarray | None = None


def _plain_factor(a: np.ndarray, r: np.ndarray) -> np.ndarray:
    Lf, N = a.shape
    M = Lf * N
    F = np.zeros((M, 2 * N))
    rows = np.arange(M)
    ncol = np.tile(np.arange(N), Lf)
    F[rows, ncol] = a.ravel()
    F[rows, N + ncol] = r.ravel()
    return F

def _generator_gram(kernel: SmoothKernel, centers: np.ndarray) -> np.ndarray:
    m = centers.size
    out = np.empty((2 * m, 2 * m))
    for oi in (0, 1):
        for oj in (0, 1):
            out[oi * m:(oi + 1) * m, oj * m:(oj + 1) * m] = kernel.gram(
                centers, centers, i=oi + 1, j=oj + 1
            )
    return out


def _convolved_factor(a: np.ndarray, r: np.ndarray, rho: np.ndarray, dx: float) -> np.ndarray:
    Lf, N = a.shape
    M = Lf * N
    ncols = 2 * N - 1
    F = np.zeros((M, 2 * ncols))
    for s in range(-(N - 1), N):
        col = s + N - 1
        lo, hi = max(0, s), N + min(0, s)   # nodes n with 0 <= n - s < N
        block_a = np.zeros((Lf, N))
        block_r = np.zeros((Lf, N))
        block_a[:, lo:hi] = dx * a[:, lo:hi] * rho[:, lo - s:hi - s]
        block_r[:, lo:hi] = dx * r[:, lo:hi] * rho[:, lo - s:hi - s]
        F[:, col] = block_a.ravel()
        F[:, ncols + col] = block_r.ravel()
    return F


def build_factors(problem: EstimationProblem) -> SectionFactors:
    traj = problem.traj
    mesh = traj.mesh
    Lf = problem.fit_rows
    a_full = traj.dx_plus()
    if problem.spatial_slope_override is not None:
        a_full = np.asarray(problem.spatial_slope_override, dtype=float)
        if a_full.shape != traj.values.shape:
            raise EstimatorError("spatial_slope_override shape mismatch")
    a = a_full[:Lf]
    r = traj.values[:Lf]
    x = mesh.x
    dgrid = difference_grid(traj)
    factors = SectionFactors(
        a=a,
        r=r,
        rho_flat=r.ravel(),
        F1=_plain_factor(a, r),
        K1t=_generator_gram(problem.kernel1, x),
        F2=_convolved_factor(a, r, r, mesh.dx),
        K2t=_generator_gram(problem.kernel2, dgrid),
        centers1=x,
        centers2=dgrid,
    )
    if problem.learn_internal:
        factors.F3 = factors.F1
        factors.K3t = _generator_gram(problem.kernel3, x)
    return factors


def section_grams(problem: EstimationProblem,
                  factors: SectionFactors | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Dense unweighted section Grams (plain, convolved); small problems only."""
    if problem.node_count > DENSE_CEILING:
        raise EstimatorError(
            f"dense section Grams limited to {DENSE_CEILING} nodes, "
            f"got {problem.node_count}"
        )
    fac = factors or build_factors(problem)
    G1 = fac.F1 @ fac.K1t @ fac.F1.T
    G2 = fac.F2 @ fac.K2t @ fac.F2.T
    return G1, G2


def assemble_gram(problem: EstimationProblem,
                  factors: SectionFactors | None = None) -> np.ndarray:
    """Density-weighted Gram C (l2 G_plain + l1 G_conv [+ ...]) C, dense."""
    fac = factors or build_factors(problem)
    G1, G2 = section_grams(problem, fac)
    C = fac.rho_flat
    if problem.learn_internal:
        l1, l2, l3 = problem.lambda1, problem.lambda2, problem.lambda3
        G3 = fac.F3 @ fac.K3t @ fac.F3.T
        core = l2 * l3 * G1 + l1 * l3 * G2 + l1 * l2 * G3
    else:
        core = problem.lambda2 * G1 + problem.lambda1 * G2
    return C[:, None] * core * C[None, :]


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

def _regularizer_coefficient(problem: EstimationProblem) -> float:
    if problem.learn_internal:
        lam = problem.lambda1 * problem.lambda2 * problem.lambda3
    else:
        lam = problem.lambda1 * problem.lambda2
    return lam / problem.node_weight


def _cholesky_with_jitter(mat: np.ndarray):
    """Cholesky factor with escalating relative diagonal jitter."""
    scale = float(np.max(np.diag(mat)))
    for jitter in (0.0, 1e-12, 1e-10, 1e-8):
        try:
            return sla.cho_factor(
                mat + jitter * scale * np.eye(mat.shape[0]) if jitter else mat,
                lower=True,
            )
        except np.linalg.LinAlgError:
            continue
    raise EstimatorError(
        "system matrix not positive definite even after jitter escalation; "
        f"diagonal scale {scale:.3g}"
    )


def _stacked_factor(problem: EstimationProblem, fac: SectionFactors):
    """Weighted generator factor P with G = P P' and the K~ blocks, stacked."""
    if problem.learn_internal:
        l1, l2, l3 = problem.lambda1, problem.lambda2, problem.lambda3
        blocks = [
            (np.sqrt(l2 * l3) * fac.F1, fac.K1t),
            (np.sqrt(l1 * l3) * fac.F2, fac.K2t),
            (np.sqrt(l1 * l2) * fac.F3, fac.K3t),
        ]
    else:
        blocks = [
            (np.sqrt(problem.lambda2) * fac.F1, fac.K1t),
            (np.sqrt(problem.lambda1) * fac.F2, fac.K2t),
        ]
    cols = []
    for F, Kt in blocks:
        w, V = np.linalg.eigh(Kt)
        keep = w > max(w[-1], 0.0) * 1e-14
        cols.append((fac.rho_flat[:, None] * F) @ (V[:, keep] * np.sqrt(w[keep])))
    return np.hstack(cols)


def _solve_lowrank(problem: EstimationProblem, fac: SectionFactors,
                   f_flat: np.ndarray) -> tuple[np.ndarray, float]:
    c = _regularizer_coefficient(problem)
    P = _stacked_factor(problem, fac)
    dinv = 1.0 / (c * fac.rho_flat)
    b = fac.rho_flat * f_flat
    db = dinv * b
    core = P.T @ (dinv[:, None] * P)
    gram_top = float(np.linalg.eigvalsh(P.T @ P)[-1]) if P.shape[1] else 0.0
    core[np.diag_indices_from(core)] += 1.0
    cho = _cholesky_with_jitter(core)
    z = db - dinv * (P @ sla.cho_solve(cho, P.T @ db))
    rho = fac.rho_flat
    cond = (gram_top + c * float(rho.max())) / (c * float(rho.min()))
    return z, cond


def _solve_dense(problem: EstimationProblem, fac: SectionFactors,
                 f_flat: np.ndarray) -> tuple[np.ndarray, float]:
    G = assemble_gram(problem, fac)
    c = _regularizer_coefficient(problem)
    system = G + c * np.diag(fac.rho_flat)
    cho = _cholesky_with_jitter(system)
    z = sla.cho_solve(cho, fac.rho_flat * f_flat)
    if system.shape[0] <= 2048:
        eig = np.linalg.eigvalsh(system)
        cond = float(eig[-1] / eig[0])
    else:
        cond = float(np.linalg.cond(system))
    return z, cond


def solve(problem: EstimationProblem, method: str = "auto") -> EstimatorResult:
    """Solve the regularized regression in closed form.

    ``method`` is "auto" (dense Cholesky up to DENSE_CEILING nodes, exact
    low-rank factorization beyond), "dense", or "lowrank"; both routes solve
    the same normal equations and agree to roundoff.
    """
    fac = build_factors(problem)
    if problem.f_override is not None:
        f_full = np.asarray(problem.f_override, dtype=float)
        if f_full.shape != problem.traj.values.shape:
            raise EstimatorError("f_override shape mismatch")
    else:
        f_full = assemble_data_functional(
            problem.traj, problem.flow_kind, problem.known_u,
            include_internal=not problem.learn_internal,
        )
    f_flat = f_full[:problem.fit_rows].ravel()

    if method == "auto":
        method = "dense" if problem.node_count <= DENSE_CEILING else "lowrank"
    if method == "dense":
        z, cond = _solve_dense(problem, fac, f_flat)
    elif method == "lowrank":
        z, cond = _solve_lowrank(problem, fac, f_flat)
    else:
        raise EstimatorError(f"unknown solve method {method!r}")

    if problem.learn_internal:
        l1, l2, l3 = problem.lambda1, problem.lambda2, problem.lambda3
        C1, C2, C3 = l2 * l3 * z, l1 * l3 * z, l1 * l2 * z
    else:
        C1, C2 = problem.lambda2 * z, problem.lambda1 * z
        C3 = None

    beta_v = fac.F1.T @ (fac.rho_flat * C1)
    beta_w = fac.F2.T @ (fac.rho_flat * C2)
    N = problem.traj.mesh.N
    orders1 = np.repeat([1, 2], N)
    orders2 = np.repeat([1, 2], 2 * N - 1)
    Vhat = RkhsFunction.from_generators(
        problem.kernel1, orders1, np.tile(fac.centers1, 2), beta_v, PLAIN)
    What = RkhsFunction.from_generators(
        problem.kernel2, orders2, np.tile(fac.centers2, 2), beta_w, CONVOLVED)
    norms = {
        "V": float(np.sqrt(max(beta_v @ fac.K1t @ beta_v, 0.0))),
        "W": float(np.sqrt(max(beta_w @ fac.K2t @ beta_w, 0.0))),
    }
    image = fac.F1 @ (fac.K1t @ beta_v) + fac.F2 @ (fac.K2t @ beta_w)
    Uhat = None
    if problem.learn_internal:
        beta_u = fac.F3.T @ (fac.rho_flat * C3)
        Uhat = RkhsFunction.from_generators(
            problem.kernel3, orders1, np.tile(fac.centers1, 2), beta_u, PLAIN)
        norms["U"] = float(np.sqrt(max(beta_u @ fac.K3t @ beta_u, 0.0)))
        image = image + fac.F3 @ (fac.K3t @ beta_u)

    residual = image - f_flat
    loss = problem.node_weight * float(residual**2 @ fac.rho_flat)
    loss += problem.lambda1 * norms["V"]**2 + problem.lambda2 * norms["W"]**2
    if problem.learn_internal:
        loss += problem.lambda3 * norms["U"]**2

    return EstimatorResult(
        C1=C1, C2=C2, C3=C3,
        Vhat=Vhat, What=What, Uhat=Uhat,
        rkhs_norms=norms,
        loss_value=loss,
        residual_vector=residual,
        gram_condition=cond,
        lambdas=(problem.lambda1, problem.lambda2, problem.lambda3),
        method=method,
        operator_image=image,
        data_vector=f_flat,
    )


# ---------------------------------------------------------------------------
# Forward operator on arbitrary candidate pairs
# ---------------------------------------------------------------------------

def apply_flow_operator(traj: DensityTrajectory, phi, psi, l: int, n: int,
                        spatial_slope: float | None = None) -> float:
    """Pointwise forward operator at node (l, n) for evaluable (phi, psi)."""
    mesh = traj.mesh
    a = traj.dx_plus()[l, n] if spatial_slope is None else spatial_slope
    r = traj.values[l, n]
    x = mesh.x[n]
    d1 = d2 = 0.0
    if phi is not None:
        d1 += float(phi.value(x, order=1))
        d2 += float(phi.value(x, order=2))
    if psi is not None:
        rho = traj.values[l]
        diffs = x - mesh.x
        d1 += mesh.dx * float(np.asarray(psi.value(diffs, order=1)) @ rho)
        d2 += mesh.dx * float(np.asarray(psi.value(diffs, order=2)) @ rho)
    return a * d1 + r * d2


def operator_image(problem: EstimationProblem, phi, psi,
                   upsilon=None) -> np.ndarray:
    """Forward operator applied at every fit node, flattened (time-major)."""
    traj = problem.traj
    mesh = traj.mesh
    Lf = problem.fit_rows
    a = traj.dx_plus()[:Lf]
    if problem.spatial_slope_override is not None:
        a = np.asarray(problem.spatial_slope_override, dtype=float)[:Lf]
    r = traj.values[:Lf]
    x = mesh.x
    d1 = np.zeros((Lf, mesh.N))
    d2 = np.zeros((Lf, mesh.N))
    for fn in (phi, upsilon):
        if fn is not None:
            d1 += np.asarray(fn.value(x, order=1), dtype=float)
            d2 += np.asarray(fn.value(x, order=2), dtype=float)
    if psi is not None:
        dgrid = difference_grid(traj)
        N = mesh.N
        idx = np.arange(N)[:, None] - np.arange(N)[None, :] + (N - 1)
        t1 = np.asarray(psi.value(dgrid, order=1), dtype=float)[idx]
        t2 = np.asarray(psi.value(dgrid, order=2), dtype=float)[idx]
        d1 += mesh.dx * r @ t1.T
        d2 += mesh.dx * r @ t2.T
    return (a * d1 + r * d2).ravel()


def loss_at(problem: EstimationProblem, phi: RkhsFunction, psi: RkhsFunction,
            upsilon: RkhsFunction | None = None,
            f_flat: np.ndarray | None = None) -> float:
    """Regularized empirical loss at an explicit candidate tuple."""
    if f_flat is None:
        f_full = assemble_data_functional(
            problem.traj, problem.flow_kind, problem.known_u,
            include_internal=not problem.learn_internal,
        )
        f_flat = f_full[:problem.fit_rows].ravel()
    rho_flat = problem.traj.values[:problem.fit_rows].ravel()
    resid = operator_image(problem, phi, psi, upsilon) - f_flat
    loss = problem.node_weight * float(resid**2 @ rho_flat)
    loss += problem.lambda1 * rkhs_inner(phi, phi)
    loss += problem.lambda2 * rkhs_inner(psi, psi)
    if upsilon is not None:
        loss += problem.lambda3 * rkhs_inner(upsilon, upsilon)
    return loss


def stationarity_residual(result: EstimatorResult, problem: EstimationProblem,
                          directions) -> float:
    """Largest directional derivative of the loss at the returned minimizer.

    ``directions`` is an iterable of (phi, psi) RkhsFunction pairs drawn
    from the section span.  At a true minimizer every closed-form Gateaux
    derivative vanishes.
    """
    rho_flat = problem.traj.values[:problem.fit_rows].ravel()
    worst = 0.0
    for fdir, gdir in directions:
        image = operator_image(problem, fdir, gdir)
        deriv = 2.0 * problem.node_weight * float(
            (result.residual_vector * image) @ rho_flat
        )
        deriv += 2.0 * problem.lambda1 * rkhs_inner(result.Vhat, fdir)
        deriv += 2.0 * problem.lambda2 * rkhs_inner(result.What, gdir)
        worst = max(worst, abs(deriv))
    return worst
