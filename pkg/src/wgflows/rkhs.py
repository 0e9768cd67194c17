"""Kernel sections, density convolutions, and RKHS inner products.

The estimator works with three kinds of kernel sections:

    point:      K(z, .)
    plain:      a * d1K(x_n, .) + r * d11K(x_n, .)
    convolved:  a * d1(K conv rho_l)(x_n, .) + r * d11(K conv rho_l)(x_n, .)

where a = (d+ rho)_l^n is the forward-differenced density slope and
r = rho_l^n, i.e. the discrete weighted-Laplacian operator applied to the
first kernel slot.  Density convolutions difference the first argument,

    (K conv rho)(x, y) = dx * sum_m K(x - x_m, y) rho_m,

with the same left Riemann rule as the loss functional.

Every finite combination of such sections collapses onto a small set of
*generators* d1^i K(c, .): plain sections use the N grid points as centers,
convolved sections the 2N-1 difference-grid points x_n - x_m.  RkhsFunction
stores that reduced form, which makes evaluation and inner products cheap
(pairwise mixed partials between generators) even when thousands of sections
are combined.
"""

from __future__ import annotations

import numpy as np

from .kernels import KernelError, SmoothKernel
from .mesh import DensityTrajectory

PLAIN = "plain"
CONVOLVED = "convolved"
POINT = "point"

_ORDER_AXIS = (1, 2)  # slot orders carried by a weighted-Laplacian section


def difference_grid(traj: DensityTrajectory) -> np.ndarray:
    """Centers x_n - x_m of convolved sections: d*dx for d = -(N-1)..N-1."""
    N = traj.mesh.N
    return traj.mesh.dx * np.arange(-(N - 1), N)


class ConvolvedKernel:
    """(K conv rho_l)(x, y) with mixed partials, via grid quadrature."""

    def __init__(self, kernel: SmoothKernel, traj: DensityTrajectory, l: int):
        if not 0 <= l < traj.mesh.L:
            raise IndexError(f"time index {l} outside 0..{traj.mesh.L - 1}")
        self.kernel = kernel
        self.traj = traj
        self.l = l

    def eval(self, i: int, j: int, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xm = self.traj.mesh.x
        rho = self.traj.values[self.l]
        # quadrature over the first slot; broadcast x, y against the grid
        diff = x[..., None] - xm
        vals = self.kernel.eval(i, j, diff, y[..., None])
        out = self.traj.mesh.dx * (vals * rho).sum(axis=-1)
        return float(out) if np.ndim(out) == 0 else out

    def __call__(self, x, y):
        return self.eval(0, 0, x, y)


class DoubleConvolvedKernel:
    """(K conv conv (rho_l, rho_k))(x, y) with mixed partials."""

    def __init__(self, kernel: SmoothKernel, traj: DensityTrajectory, l: int, k: int):
        for idx in (l, k):
            if not 0 <= idx < traj.mesh.L:
                raise IndexError(f"time index {idx} outside 0..{traj.mesh.L - 1}")
        self.kernel = kernel
        self.traj = traj
        self.l = l
        self.k = k

    def eval(self, i: int, j: int, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xm = self.traj.mesh.x
        rho_l = self.traj.values[self.l]
        rho_k = self.traj.values[self.k]
        diff_x = x[..., None, None] - xm[:, None]
        diff_y = y[..., None, None] - xm[None, :]
        vals = self.kernel.eval(i, j, diff_x, diff_y)
        out = self.traj.mesh.dx**2 * np.einsum("...pq,p,q->...", vals, rho_l, rho_k)
        return float(out) if np.ndim(out) == 0 else out

    def __call__(self, x, y):
        return self.eval(0, 0, x, y)


def convolve_with_density(kernel: SmoothKernel, traj: DensityTrajectory, l: int) -> ConvolvedKernel:
    return ConvolvedKernel(kernel, traj, l)


def double_convolve(kernel: SmoothKernel, traj: DensityTrajectory, l: int, k: int) -> DoubleConvolvedKernel:
    return DoubleConvolvedKernel(kernel, traj, l, k)


class RkhsFunction:
    """Weighted combination of kernel sections, stored in generator form.

    Generators are the functions d1^order K(center, .); ``orders``,
    ``centers`` and ``coeffs`` are parallel arrays describing the
    combination.  Use the classmethod constructors; the raw constructor is
    the reduction target they all share.
    """

    def __init__(self, kernel: SmoothKernel, orders: np.ndarray,
                 centers: np.ndarray, coeffs: np.ndarray,
                 section_kind: str = POINT):
        orders = np.asarray(orders, dtype=int)
        centers = np.asarray(centers, dtype=float)
        coeffs = np.asarray(coeffs, dtype=float)
        if not orders.shape == centers.shape == coeffs.shape:
            raise ValueError("orders, centers, coeffs must be parallel 1-D arrays")
        self.kernel = kernel
        self.orders = orders
        self.centers = centers
        self.coeffs = coeffs
        self.section_kind = section_kind

    # -- constructors --------------------------------------------------------

    @classmethod
    def zero(cls, kernel: SmoothKernel) -> "RkhsFunction":
        e = np.empty(0)
        return cls(kernel, e.astype(int), e, e)

    @classmethod
    def from_points(cls, kernel: SmoothKernel, centers, weights) -> "RkhsFunction":
        """sum_i w_i K(z_i, .)"""
        centers = np.atleast_1d(np.asarray(centers, dtype=float))
        weights = np.atleast_1d(np.asarray(weights, dtype=float))
        if centers.shape != weights.shape:
            raise ValueError("centers and weights must have equal length")
        return cls(kernel, np.zeros_like(centers, dtype=int), centers, weights, POINT)

    @classmethod
    def from_plain_sections(cls, kernel: SmoothKernel, traj: DensityTrajectory,
                            nodes, weights) -> "RkhsFunction":
        """sum over nodes (l, n) of w * [a d1K(x_n,.) + r d11K(x_n,.)].

        ``nodes`` is a sequence of 0-based (l, n) pairs.
        """
        ls, ns, weights = _as_nodes(nodes, weights, traj)
        a = traj.dx_plus()[ls, ns]
        r = traj.values[ls, ns]
        x = traj.mesh.x
        N = traj.mesh.N
        beta = np.zeros((2, N))
        np.add.at(beta[0], ns, weights * a)
        np.add.at(beta[1], ns, weights * r)
        return cls(
            kernel,
            np.repeat(np.array(_ORDER_AXIS), N),
            np.tile(x, 2),
            beta.reshape(-1),
            PLAIN,
        )

    @classmethod
    def from_convolved_sections(cls, kernel: SmoothKernel, traj: DensityTrajectory,
                                nodes, weights) -> "RkhsFunction":
        """Convolved analogue; centers live on the difference grid."""
        ls, ns, weights = _as_nodes(nodes, weights, traj)
        a = traj.dx_plus()[ls, ns]
        r = traj.values[ls, ns]
        N = traj.mesh.N
        dgrid = difference_grid(traj)
        beta = np.zeros((2, 2 * N - 1))
        # section (l, n) contributes dx * rho_l[m] at difference index n - m
        for li, ni, wi, ai, ri in zip(ls, ns, weights, a, r):
            rho = traj.values[li]
            didx = (N - 1) + ni - np.arange(N)
            np.add.at(beta[0], didx, wi * ai * traj.mesh.dx * rho)
            np.add.at(beta[1], didx, wi * ri * traj.mesh.dx * rho)
        return cls(
            kernel,
            np.repeat(np.array(_ORDER_AXIS), 2 * N - 1),
            np.tile(dgrid, 2),
            beta.reshape(-1),
            CONVOLVED,
        )

    @classmethod
    def from_generators(cls, kernel: SmoothKernel, orders, centers, coeffs,
                        section_kind: str = POINT) -> "RkhsFunction":
        return cls(kernel, np.asarray(orders), np.asarray(centers),
                   np.asarray(coeffs), section_kind)

    # -- evaluation and algebra ----------------------------------------------

    def value(self, x, order: int = 0):
        """Evaluate the function (or its order-th derivative) at x."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(np.broadcast_shapes(x.shape, ()), dtype=float)
        for slot in np.unique(self.orders):
            mask = self.orders == slot
            vals = self.kernel.eval(int(slot), order,
                                    self.centers[mask], x[..., None])
            out = out + vals @ self.coeffs[mask]
        return float(out) if np.ndim(out) == 0 else out

    def __call__(self, x, order: int = 0):
        return self.value(x, order=order)

    def combine(self, other: "RkhsFunction", alpha: float = 1.0) -> "RkhsFunction":
        """self + alpha * other (same kernel required)."""
        _require_same_kernel(self.kernel, other.kernel)
        return RkhsFunction(
            self.kernel,
            np.concatenate([self.orders, other.orders]),
            np.concatenate([self.centers, other.centers]),
            np.concatenate([self.coeffs, alpha * other.coeffs]),
            self.section_kind if self.section_kind == other.section_kind else POINT,
        )

    def scaled(self, alpha: float) -> "RkhsFunction":
        return RkhsFunction(self.kernel, self.orders, self.centers,
                            alpha * self.coeffs, self.section_kind)

    def __add__(self, other):
        return self.combine(other)

    def __sub__(self, other):
        return self.combine(other, alpha=-1.0)

    def __mul__(self, alpha: float):
        return self.scaled(alpha)

    __rmul__ = __mul__


def _as_nodes(nodes, weights, traj):
    nodes = np.atleast_2d(np.asarray(nodes, dtype=int))
    weights = np.atleast_1d(np.asarray(weights, dtype=float))
    if nodes.shape[1] != 2 or nodes.shape[0] != weights.shape[0]:
        raise ValueError("nodes must be (m, 2) index pairs matching weights")
    ls, ns = nodes[:, 0], nodes[:, 1]
    if np.any(ls < 0) or np.any(ls >= traj.mesh.L):
        raise IndexError("time index outside trajectory")
    if np.any(ns < 0) or np.any(ns >= traj.mesh.N):
        raise IndexError("space index outside trajectory")
    return ls, ns, weights


def _require_same_kernel(k1: SmoothKernel, k2: SmoothKernel) -> None:
    if not k1.same_kernel(k2):
        raise KernelError(f"kernel mismatch: {k1} vs {k2}")


def diff_section(kernel: SmoothKernel, traj: DensityTrajectory, l: int, n: int,
                 kind: str = PLAIN) -> RkhsFunction:
    """Single weighted-Laplacian kernel section anchored at node (l, n)."""
    if kind == PLAIN:
        return RkhsFunction.from_plain_sections(kernel, traj, [(l, n)], [1.0])
    if kind == CONVOLVED:
        return RkhsFunction.from_convolved_sections(kernel, traj, [(l, n)], [1.0])
    raise ValueError(f"unknown section kind {kind!r}")


def rkhs_inner(f: RkhsFunction, g: RkhsFunction) -> float:
    """RKHS inner product via pairwise mixed partials of the generators."""
    _require_same_kernel(f.kernel, g.kernel)
    if f.coeffs.size == 0 or g.coeffs.size == 0:
        return 0.0
    total = 0.0
    for oi in np.unique(f.orders):
        mi = f.orders == oi
        for oj in np.unique(g.orders):
            mj = g.orders == oj
            block = f.kernel.eval(int(oi), int(oj),
                                  f.centers[mi][:, None], g.centers[mj][None, :])
            total += f.coeffs[mi] @ block @ g.coeffs[mj]
    return float(total)


def rkhs_norm_sq(f: RkhsFunction, g: RkhsFunction | None = None) -> float:
    """Inner product <f, g>; the squared norm when g is omitted."""
    return rkhs_inner(f, f if g is None else g)


def rkhs_norm(f: RkhsFunction) -> float:
    return float(np.sqrt(max(rkhs_norm_sq(f), 0.0)))


def weighted_laplacian_section_apply(f: RkhsFunction, traj: DensityTrajectory,
                                     l: int, n: int) -> float:
    """Discrete weighted Laplacian of f at node (l, n): a f' + r f''."""
    a = traj.dx_plus()[l, n]
    r = traj.values[l, n]
    x = traj.mesh.x[n]
    return a * f.value(x, order=1) + r * f.value(x, order=2)


def convolved_values(f: RkhsFunction, traj: DensityTrajectory, l: int,
                     x, order: int = 0):
    """Grid-quadrature convolution (f conv rho_l) and its x-derivatives."""
    x = np.asarray(x, dtype=float)
    xm = traj.mesh.x
    rho = traj.values[l]
    vals = f.value(x[..., None] - xm, order=order)
    out = traj.mesh.dx * (vals * rho).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def weighted_laplacian_convolved_apply(f: RkhsFunction, traj: DensityTrajectory,
                                       l: int, n: int) -> float:
    """Discrete weighted Laplacian of (f conv rho_l) at node (l, n)."""
    a = traj.dx_plus()[l, n]
    r = traj.values[l, n]
    x = traj.mesh.x[n]
    return a * convolved_values(f, traj, l, x, order=1) + \
        r * convolved_values(f, traj, l, x, order=2)
