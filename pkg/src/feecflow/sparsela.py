"""SPD sparse solvers and the static-condensation engine.

``cholesky`` wraps SuperLU in Cholesky mode (diagonal pivoting on a symmetric
permutation) and exposes the genuine lower-triangular factor together with
the fill-reducing permutation; non-positive pivots are reported with the
offending row.  ``condense`` eliminates the element-local (p, m) blocks of
the hybridized saddle system and assembles the negated Schur complement on
the facet multipliers, which is symmetric positive definite, so every global
solve in the time loop is SPD.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import CsrMatrix


class NotSpdError(Exception):
    pass


@dataclass
class CholeskyFactor:
    """Permuted Cholesky factorization of an SPD matrix.

    Convention: ``A[i, j] == (L @ L.T)[perm[i], perm[j]]`` with all pivots
    strictly positive.
    """

    perm: np.ndarray
    lower: sp.csc_matrix
    _lu: spla.SuperLU = field(repr=False, default=None)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(rhs, dtype=float))


def cholesky(a: CsrMatrix | sp.spmatrix) -> CholeskyFactor:
    """Factor an SPD matrix; raises NotSpdError with the pivot row on failure."""
    mat = a.mat if isinstance(a, CsrMatrix) else a
    if isinstance(a, CsrMatrix) and not a.symmetric:
        raise ValueError("cholesky requires a matrix with the symmetry flag set")
    n = mat.shape[0]
    csc = mat.tocsc()
    try:
        lu = spla.splu(csc, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
    except RuntimeError as exc:  # singular factor
        raise NotSpdError(f"matrix not SPD: {exc}") from None
    diag = lu.U.diagonal()
    bad = np.nonzero(diag <= 0)[0]
    if bad.size:
        row = int(lu.perm_r[bad[0]]) if lu.perm_r is not None else int(bad[0])
        raise NotSpdError(f"matrix not SPD: non-positive pivot at row {row}")
    # L_chol = L sqrt(D) with D = diag(U); valid because row and column
    # permutations coincide in symmetric mode
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise NotSpdError("matrix not SPD: unsymmetric pivoting was required")
    lower = (lu.L @ sp.diags(np.sqrt(diag))).tocsc()
    return CholeskyFactor(perm=lu.perm_c.copy(), lower=lower, _lu=lu)


def solve(factor: CholeskyFactor, rhs: np.ndarray) -> np.ndarray:
    return factor.solve(rhs)


def cg_solve(a: CsrMatrix | sp.spmatrix, rhs: np.ndarray, tol: float = 1e-12,
             maxit: int = 10000, jacobi_precondition: bool = True,
             x0: np.ndarray | None = None, precondition=None,
             return_iterations: bool = False):
    """Conjugate gradients with optional Jacobi (or caller-supplied) preconditioning.

    Converges when ||r||_2 <= tol * ||b||_2; raises on breakdown or maxit.
    """
    mat = a.mat if isinstance(a, CsrMatrix) else a
    b = np.asarray(rhs, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        x = np.zeros_like(b)
        return (x, 0) if return_iterations else x
    if precondition is None and jacobi_precondition:
        d = mat.diagonal()
        if np.any(d <= 0):
            raise NotSpdError("non-positive diagonal in Jacobi preconditioner")
        dinv = 1.0 / d
        precondition = lambda r: dinv * r
    elif precondition is None:
        precondition = lambda r: r

    x = np.zeros_like(b) if x0 is None else np.asarray(x0, dtype=float).copy()
    r = b - mat @ x
    z = precondition(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, maxit + 1):
        ap = mat @ p
        pap = p @ ap
        if pap <= 0:
            raise NotSpdError("CG breakdown: matrix not positive definite")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= tol * bnorm:
            return (x, it) if return_iterations else x
        z = precondition(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NotSpdError(f"CG did not converge in {maxit} iterations")


@dataclass
class BlockDiagMatrix:
    """Per-element dense blocks over the local (p, m) DOF layout."""

    blocks: np.ndarray  # (nelem, k, k)

    @property
    def n_blocks(self) -> int:
        return self.blocks.shape[0]


@dataclass
class CondensedSystem:
    """Negated Schur complement of the hybridized local solver.

    ``schur`` acts on the non-essential multiplier DOFs and is SPD; the
    cached local inverses make back-substitution a batched matmul.
    """

    local_inv: np.ndarray  # (nelem, k, k)
    elem_lam: np.ndarray  # (nelem, nl) global lambda DOFs per element
    coupling: np.ndarray  # (nelem, nl, k) local constraint blocks B_T
    schur: CsrMatrix  # SPD on free lambda DOFs (already reduced)
    free: np.ndarray  # free lambda indices
    ess: np.ndarray  # essential lambda indices
    schur_ess: sp.csr_matrix  # coupling of free to essential DOFs
    n_lam: int
    pinned: int | None = None  # DOF pinned to remove the constant-pressure kernel
    factor: CholeskyFactor | None = None

    def solve_schur(self, rhs_free: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        if self.factor is None:
            self.factor = cholesky(self.schur)
        return self.factor.solve(rhs_free)


def condense(blocks: BlockDiagMatrix, elem_lam: np.ndarray, coupling: np.ndarray,
             n_lam: int, ess: np.ndarray | None = None, pin_kernel: bool = False) -> CondensedSystem:
    """Form the negated multiplier Schur complement -B L^{-1} B^T.

    ``coupling`` holds the per-element blocks B_T of <m.n, xi>_{dT}; ``ess``
    lists multiplier DOFs carrying essential (outflow) data.  ``pin_kernel``
    removes the constant-multiplier kernel that appears when the pressure
    mass weight vanishes identically and no multiplier is essential.
    """
    nelem, k, _ = blocks.blocks.shape
    try:
        local_inv = np.linalg.inv(blocks.blocks)
    except np.linalg.LinAlgError:
        for e in range(nelem):
            if abs(np.linalg.det(blocks.blocks[e])) < 1e-300:
                raise NotSpdError(f"singular local solver block on element {e}") from None
        raise
    # element contribution to the negated Schur complement: B_T Linv B_T^T
    contrib = np.matmul(np.matmul(coupling, local_inv), coupling.transpose(0, 2, 1))
    nl = elem_lam.shape[1]
    rows = np.repeat(elem_lam, nl, axis=1).ravel()
    cols = np.tile(elem_lam, (1, nl)).ravel()
    full = sp.coo_matrix((-contrib.ravel(), (rows, cols)), shape=(n_lam, n_lam)).tocsr()

    ess = np.asarray(ess if ess is not None else [], dtype=np.int64)
    mask = np.ones(n_lam, dtype=bool)
    mask[ess] = False
    pinned = None
    if pin_kernel and ess.size == 0:
        pinned = 0
        mask[pinned] = False
    free = np.nonzero(mask)[0]
    fixed = np.nonzero(~mask)[0]
    schur = CsrMatrix(full[np.ix_(free, free)].tocsr(), symmetric=True)
    schur_ess = full[np.ix_(free, fixed)].tocsr()
    return CondensedSystem(local_inv=local_inv, elem_lam=elem_lam, coupling=coupling,
                           schur=schur, free=free, ess=fixed, schur_ess=schur_ess, n_lam=n_lam,
                           pinned=pinned)


def solve_condensed(sys: CondensedSystem, rhs_local: np.ndarray, rhs_lam: np.ndarray,
                    lam_ess_values: np.ndarray | None = None,
                    use_cg: bool = False, cg_tol: float = 1e-12):
    """Solve the full hybridized system for (local unknowns, multiplier).

    rhs_local: (nelem, k) right-hand sides of the local rows;
    rhs_lam: (n_lam,) constraint data (zero on interior facets).
    Returns (x_local (nelem, k), lam (n_lam,)).
    """
    lam = np.zeros(sys.n_lam)
    if lam_ess_values is not None and sys.ess.size:
        lam[sys.ess] = lam_ess_values
    linv_b = np.matmul(sys.local_inv, rhs_local[..., None])[..., 0]
    # multiplier equation: -B Linv B^T lam = rhs_lam - B Linv b  (negated SPD form)
    bl = np.bincount(sys.elem_lam.ravel(),
                     weights=np.matmul(sys.coupling, linv_b[..., None])[..., 0].ravel(),
                     minlength=sys.n_lam)
    rhs_free = (bl - rhs_lam)[sys.free]
    if sys.ess.size:
        rhs_free -= sys.schur_ess @ lam[sys.ess]
    if use_cg:
        lam_free = cg_solve(sys.schur, rhs_free, tol=cg_tol)
    else:
        lam_free = sys.solve_schur(rhs_free)
    lam[sys.free] = lam_free
    # back substitution: x = Linv (b + B^T lam)
    bt_lam = np.matmul(sys.coupling.transpose(0, 2, 1), lam[sys.elem_lam][..., None])[..., 0]
    x = np.matmul(sys.local_inv, (rhs_local + bt_lam)[..., None])[..., 0]
    return x, lam


def back_substitute(sys: CondensedSystem, lam: np.ndarray, rhs_local: np.ndarray) -> np.ndarray:
    """Recover the local unknowns for a given multiplier."""
    bt_lam = np.matmul(sys.coupling.transpose(0, 2, 1), lam[sys.elem_lam][..., None])[..., 0]
    return np.matmul(sys.local_inv, (rhs_local + bt_lam)[..., None])[..., 0]


def dense_solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense Cholesky-based oracle used in tests."""
    c = np.linalg.cholesky(a)
    y = np.linalg.solve(c, b)
    return np.linalg.solve(c.T, y)
