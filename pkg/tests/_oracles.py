"""Shared independent oracles and problem builders for the test suite.

The dense CG/PCG implementations below are deliberately plain 10-line
textbook loops on explicit matrices, kept free of any package machinery so
they can arbitrate the instrumented solvers.
"""

import math

import numpy as np

from mfcg.dofs import distribute_dofs, make_batches
from mfcg.mesh import GeometryVariant, build_cartesian_mesh, deform_mesh
from mfcg.operator import MatrixFreeOperator, OperatorSpec


def build_fem(cells=(2, 2, 2), p=3, comp=1, eq="laplace", nq=None,
              deformed=0.05, variant=GeometryVariant.FINAL_TENSOR_LOAD,
              quadrature="gauss", constrain=True, batch=3,
              traversal="lexicographic", scaling=1.0, numbering="default"):
    mesh = build_cartesian_mesh(cells)
    if deformed:
        mesh = deform_mesh(mesh, deformed)
    handler = distribute_dofs(mesh, p, components=comp,
                              constrain_boundary=constrain)
    plan = make_batches(mesh, batch, traversal)
    if numbering == "optimized":
        from mfcg.dofs import renumber_optimized
        handler = renumber_optimized(handler, plan)
    spec = OperatorSpec(eq, comp, p, nq if nq else p + 2, variant,
                        quadrature_kind=quadrature, scaling=scaling)
    return MatrixFreeOperator(spec, mesh, handler, plan), handler


def fem_rhs(handler, seed=0):
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(handler.n_dofs)
    b[handler.constrained_dofs] = 0.0
    return b


def dense_cg(A, b, tol=1e-8, maxit=500):
    """Plain conjugate gradients on an explicit matrix, relative-residual
    termination; returns the full scalar trace."""
    x = np.zeros(len(b))
    r = b.astype(float).copy()
    p = r.copy()
    gamma = r @ r
    bnorm = math.sqrt(float(b @ b))
    alphas, betas, gammas, residuals = [], [], [], []
    iters = maxit
    for k in range(1, maxit + 1):
        v = A @ p
        alpha = gamma / (p @ v)
        x += alpha * p
        r -= alpha * v
        gamma_new = r @ r
        beta = gamma_new / gamma
        alphas.append(alpha)
        betas.append(beta)
        gammas.append(gamma)
        residuals.append(math.sqrt(gamma_new) / bnorm)
        gamma = gamma_new
        if residuals[-1] < tol:
            iters = k
            break
        p = r + beta * p
    return {"x": x, "iterations": iters, "alpha": alphas, "beta": betas,
            "gamma": gammas, "residual": residuals}


def dense_pcg(A, b, minv_full, tol=1e-8, maxit=500):
    """Plain Jacobi-PCG on an explicit matrix; termination on the
    unpreconditioned residual norm."""
    x = np.zeros(len(b))
    r = b.astype(float).copy()
    z = minv_full * r
    p = z.copy()
    gamma = r @ z
    bnorm = math.sqrt(float(b @ b))
    alphas, betas, residuals = [], [], []
    iters = maxit
    for k in range(1, maxit + 1):
        v = A @ p
        alpha = gamma / (p @ v)
        x += alpha * p
        r -= alpha * v
        residuals.append(math.sqrt(r @ r) / bnorm)
        z = minv_full * r
        gamma_new = r @ z
        beta = gamma_new / gamma
        alphas.append(alpha)
        betas.append(beta)
        gamma = gamma_new
        if residuals[-1] < tol:
            iters = k
            break
        p = z + beta * p
    return {"x": x, "iterations": iters, "alpha": alphas, "beta": betas,
            "residual": residuals}
