"""One-dimensional quadrature, Lagrange basis tables, and sum-factorization
sweeps over tensor-product cells.

Cell data lives in C-ordered numpy arrays indexed ``[z, y, x]`` (x fastest in
memory, i.e. lexicographic layout); direction 0 is x, 1 is y, 2 is z.  All
sweeps accept arbitrary leading batch axes, so a whole batch of cells (or the
three gradient components) can be pushed through one contraction.  The
reference cell is the unit cube [0,1]^3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuadratureRule1D",
    "TensorBasis1D",
    "CellTensor",
    "gauss_quadrature",
    "gauss_lobatto_quadrature",
    "lagrange_basis",
    "lagrange_values_1d",
    "lagrange_gradients_1d",
    "apply_1d",
    "even_odd_apply",
    "evaluate_values",
    "evaluate_gradients",
    "integrate_values",
    "integrate_gradients",
]

# A cell tensor is just an ndarray; the alias documents intent in signatures.
CellTensor = np.ndarray

_NEWTON_TOL = 1e-15


@dataclass(frozen=True)
class QuadratureRule1D:
    """A 1D quadrature rule on [0,1]: strictly increasing points, positive
    weights summing to 1 (the interval length)."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        wts = np.asarray(self.weights, dtype=float)
        if pts.ndim != 1 or pts.shape != wts.shape:
            raise ValueError("points and weights must be 1D arrays of equal length")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("quadrature points must be strictly increasing")
        if pts[0] < -1e-14 or pts[-1] > 1 + 1e-14:
            raise ValueError("quadrature points must lie in [0,1]")
        if np.any(wts <= 0):
            raise ValueError("quadrature weights must be positive")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)

    def __len__(self):
        return len(self.points)


def _legendre(n: int, x: np.ndarray):
    """Evaluate the Legendre polynomial P_n and its derivative at x on [-1,1]
    via the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    p_prev = np.ones_like(x)
    if n == 0:
        return p_prev, np.zeros_like(x)
    p = x.copy()
    for k in range(1, n):
        p, p_prev = ((2 * k + 1) * x * p - k * p_prev) / (k + 1), p
    # (1-x^2) P_n' = n (P_{n-1} - x P_n); the derivative is only consumed at
    # interior points, so guard the endpoint division
    denom = 1.0 - x * x
    safe = np.where(denom == 0.0, 1.0, denom)
    dp = n * (p_prev - x * p) / safe
    return p, dp


def gauss_quadrature(n: int) -> QuadratureRule1D:
    """n-point Gauss-Legendre rule mapped to [0,1]; exact to degree 2n-1.

    Nodes are found by Newton iteration on P_n seeded with Chebyshev
    estimates, converged to 1e-15.
    """
    if n < 1:
        raise ValueError("gauss_quadrature requires n >= 1")
    if n == 1:
        return QuadratureRule1D(np.array([0.5]), np.array([1.0]))
    i = np.arange(n)
    x = np.cos(np.pi * (i + 0.75) / (n + 0.5))
    for _ in range(100):
        p, dp = _legendre(n, x)
        dx = p / dp
        x = x - dx
        if np.max(np.abs(dx)) < _NEWTON_TOL:
            break
    _, dp = _legendre(n, x)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    order = np.argsort(x)
    return QuadratureRule1D((x[order] + 1.0) / 2.0, w[order] / 2.0)


def gauss_lobatto_quadrature(n: int) -> QuadratureRule1D:
    """n-point Gauss-Lobatto rule on [0,1] including both endpoints; exact to
    degree 2n-3.  Interior nodes are the roots of P'_{n-1}, found by Newton
    iteration from Chebyshev-Lobatto seeds."""
    if n < 2:
        raise ValueError("gauss_lobatto_quadrature requires n >= 2")
    m = n - 1
    if n == 2:
        x = np.array([-1.0, 1.0])
    else:
        i = np.arange(1, m)
        x = -np.cos(np.pi * i / m)
        for _ in range(100):
            p, dp = _legendre(m, x)
            # Legendre ODE: (1-x^2) P'' = 2x P' - m(m+1) P
            ddp = (2.0 * x * dp - m * (m + 1) * p) / (1.0 - x * x)
            dx = dp / ddp
            x = x - dx
            if np.max(np.abs(dx)) < _NEWTON_TOL:
                break
        x = np.concatenate(([-1.0], np.sort(x), [1.0]))
    p, _ = _legendre(m, x)
    w = 2.0 / (m * (m + 1) * p * p)
    return QuadratureRule1D((x + 1.0) / 2.0, w / 2.0)


def lagrange_values_1d(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Matrix of Lagrange basis values phi_i(x_q) for basis nodes `nodes`,
    shape (len(x), len(nodes))."""
    nodes = np.asarray(nodes, dtype=float)
    x = np.asarray(x, dtype=float)
    n = len(nodes)
    out = np.ones((len(x), n))
    for i in range(n):
        for j in range(n):
            if j != i:
                out[:, i] *= (x - nodes[j]) / (nodes[i] - nodes[j])
    return out


def lagrange_gradients_1d(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Matrix of Lagrange basis derivatives phi_i'(x_q), shape
    (len(x), len(nodes))."""
    nodes = np.asarray(nodes, dtype=float)
    x = np.asarray(x, dtype=float)
    n = len(nodes)
    out = np.zeros((len(x), n))
    for i in range(n):
        for m in range(n):
            if m == i:
                continue
            term = np.full(len(x), 1.0 / (nodes[i] - nodes[m]))
            for j in range(n):
                if j != i and j != m:
                    term *= (x - nodes[j]) / (nodes[i] - nodes[j])
            out[:, i] += term
    return out


def _even_odd_halves(matrix: np.ndarray):
    """Split a matrix into the half-size blocks acting on the symmetric and
    antisymmetric parts of the input (even-odd decomposition)."""
    m, n = matrix.shape
    mh = (m + 1) // 2
    nh = n // 2
    top = matrix[:mh]
    even = top[:, :nh] + top[:, ::-1][:, :nh]
    if n % 2 == 1:
        even = np.hstack([even, top[:, nh : nh + 1]])
    odd = top[:, :nh] - top[:, ::-1][:, :nh]
    return np.ascontiguousarray(even), np.ascontiguousarray(odd)


@dataclass(frozen=True)
class _EvenOddKernel:
    """Precomputed half matrices for one interpolation matrix (forward and
    transposed application)."""

    shape: tuple
    fw_even: np.ndarray
    fw_odd: np.ndarray
    tr_even: np.ndarray
    tr_odd: np.ndarray
    sign: int  # +1 persymmetric (values), -1 anti-persymmetric (gradients)

    @classmethod
    def build(cls, matrix: np.ndarray, sign: int) -> "_EvenOddKernel":
        fe, fo = _even_odd_halves(matrix)
        te, to = _even_odd_halves(matrix.T)
        return cls(matrix.shape, fe, fo, te, to, sign)


@dataclass(frozen=True)
class TensorBasis1D:
    """1D Lagrange basis of degree p on Gauss-Lobatto support points,
    tabulated at the quadrature points of `quadrature`.

    shape_values[q, i] = phi_i(x_q); shape_gradients[q, i] = phi_i'(x_q).
    The even-odd kernels exploit the point symmetry of nodes and quadrature
    about 0.5 to halve the multiplication count of 1D sweeps.
    """

    degree: int
    node_points: np.ndarray
    quadrature: QuadratureRule1D
    shape_values: np.ndarray
    shape_gradients: np.ndarray
    value_kernel: _EvenOddKernel
    gradient_kernel: _EvenOddKernel

    @property
    def n_q(self) -> int:
        return len(self.quadrature)


def lagrange_basis(p: int, quad: QuadratureRule1D) -> TensorBasis1D:
    """Build the degree-p Lagrange basis (Gauss-Lobatto nodes) tabulated at
    the points of `quad`, with even-odd factors populated."""
    if p < 1:
        raise ValueError("polynomial degree must be >= 1")
    nodes = gauss_lobatto_quadrature(p + 1).points
    values = lagrange_values_1d(nodes, quad.points)
    gradients = lagrange_gradients_1d(nodes, quad.points)
    return TensorBasis1D(
        degree=p,
        node_points=nodes,
        quadrature=quad,
        shape_values=values,
        shape_gradients=gradients,
        value_kernel=_EvenOddKernel.build(values, +1),
        gradient_kernel=_EvenOddKernel.build(gradients, -1),
    )


def apply_1d(matrix: np.ndarray, tensor: CellTensor, direction: int,
             transpose: bool = False) -> CellTensor:
    """Contract `matrix` (or its transpose) with `tensor` along the given
    direction (0 = x = last axis).  Leading batch axes pass through."""
    if direction not in (0, 1, 2):
        raise ValueError("direction must be 0, 1 or 2")
    mat = matrix.T if transpose else matrix
    axis = tensor.ndim - 1 - direction
    if tensor.shape[axis] != mat.shape[1]:
        raise ValueError(
            f"tensor extent {tensor.shape[axis]} in direction {direction} "
            f"does not match matrix columns {mat.shape[1]}")
    if direction == 0:
        return np.einsum("qi,...i->...q", mat, tensor)
    if direction == 1:
        return np.einsum("qi,...ix->...qx", mat, tensor)
    return np.einsum("qi,...iyx->...qyx", mat, tensor)


def _even_odd_1d(kernel: _EvenOddKernel, data: np.ndarray, transpose: bool) -> np.ndarray:
    """Apply one even-odd factorized matrix along the LAST axis of `data`."""
    if transpose:
        even, odd = kernel.tr_even, kernel.tr_odd
        m = kernel.shape[1]
    else:
        even, odd = kernel.fw_even, kernel.fw_odd
        m = kernel.shape[0]
    n = data.shape[-1]
    nh = n // 2
    lo = data[..., :nh]
    hi = data[..., ::-1][..., :nh]
    u_sym = 0.5 * (lo + hi)
    u_asym = 0.5 * (lo - hi)
    if n % 2 == 1:
        u_sym = np.concatenate([u_sym, data[..., nh : nh + 1]], axis=-1)
    a = u_sym @ even.T
    b = u_asym @ odd.T
    out = np.empty(data.shape[:-1] + (m,), dtype=data.dtype)
    mh = (m + 1) // 2
    out[..., :mh] = a + b
    tail = kernel.sign * (a[..., : m // 2] - b[..., : m // 2])
    out[..., mh:] = tail[..., ::-1]
    return out


def even_odd_apply(basis: TensorBasis1D, tensor: CellTensor, direction: int,
                   kind: str = "value", transpose: bool = False) -> CellTensor:
    """Same contraction as apply_1d with the basis' value or gradient matrix,
    computed through the even-odd decomposition (about half the
    multiplications; agrees with apply_1d to reassociation tolerance)."""
    if kind == "value":
        kernel = basis.value_kernel
    elif kind == "gradient":
        kernel = basis.gradient_kernel
    else:
        raise ValueError("kind must be 'value' or 'gradient'")
    n_expected = kernel.shape[0] if transpose else kernel.shape[1]
    axis = tensor.ndim - 1 - direction
    if direction not in (0, 1, 2):
        raise ValueError("direction must be 0, 1 or 2")
    if tensor.shape[axis] != n_expected:
        raise ValueError(
            f"tensor extent {tensor.shape[axis]} in direction {direction} "
            f"does not match matrix extent {n_expected}")
    if direction == 0:
        return _even_odd_1d(kernel, tensor, transpose)
    moved = np.moveaxis(tensor, axis, -1)
    result = _even_odd_1d(kernel, moved, transpose)
    return np.ascontiguousarray(np.moveaxis(result, -1, axis))


def _sweep(basis: TensorBasis1D, tensor: CellTensor, kinds, transpose: bool,
           even_odd: bool) -> CellTensor:
    """Apply one 1D matrix per direction; kinds is a (x, y, z) tuple of
    'value'/'gradient'."""
    out = tensor
    for direction in range(3):
        kind = kinds[direction]
        if even_odd:
            out = even_odd_apply(basis, out, direction, kind, transpose)
        else:
            mat = basis.shape_values if kind == "value" else basis.shape_gradients
            out = apply_1d(mat, out, direction, transpose)
    return out


def evaluate_values(basis: TensorBasis1D, cell_dofs: CellTensor,
                    even_odd: bool = True) -> CellTensor:
    """Interpolate nodal coefficients to the quadrature points (value sweeps
    in all three directions)."""
    return _sweep(basis, cell_dofs, ("value",) * 3, False, even_odd)


def evaluate_gradients(basis: TensorBasis1D, cell_dofs: CellTensor,
                       even_odd: bool = True) -> CellTensor:
    """Reference-space gradient of the interpolant at all quadrature points.

    Returns the three derivative components stacked on a new leading axis:
    output[c] = d/dx_c of the field, each of shape (n_q, n_q, n_q) (plus any
    leading batch axes of the input).
    """
    comps = []
    for c in range(3):
        kinds = tuple("gradient" if d == c else "value" for d in range(3))
        comps.append(_sweep(basis, cell_dofs, kinds, False, even_odd))
    return np.stack(comps)


def integrate_values(basis: TensorBasis1D, quad_data: CellTensor,
                     even_odd: bool = True) -> CellTensor:
    """Adjoint of evaluate_values: sum phi_i(x_q) * quad_data[q] over q
    (transposed value sweeps)."""
    return _sweep(basis, quad_data, ("value",) * 3, True, even_odd)


def integrate_gradients(basis: TensorBasis1D, quad_data: CellTensor,
                        even_odd: bool = True) -> CellTensor:
    """Adjoint of evaluate_gradients: per-cell residual
    sum_q grad phi_i(x_q) . quad_data[:, q].  Expects the three gradient
    components stacked on the leading axis (after any batch axes the
    component axis must be axis 0)."""
    if quad_data.shape[0] != 3:
        raise ValueError("quad_data must stack 3 gradient components on axis 0")
    out = None
    for c in range(3):
        kinds = tuple("gradient" if d == c else "value" for d in range(3))
        part = _sweep(basis, quad_data[c], kinds, True, even_odd)
        out = part if out is None else out + part
    return out
