"""Small dense linear programs and polytope projections.

Everything at this scale (tens of variables, tens of rows) is solved with a
two-phase tableau simplex under Bland's rule: no cycling, no randomness, and
the pivot sequence is a pure function of the input, which the reproducibility
requirements elsewhere in the package rely on.  The projection helper does
exact active-set enumeration, affordable in the low dimensions used here.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = ["LPResult", "solve_lp", "project_point"]

_TOL = 1e-9


class LPResult:
    """Outcome of a small LP solve."""

    def __init__(self, status, x=None, fun=None, basis=None):
        self.status = status
        self.x = x
        self.fun = fun
        self.basis = basis

    def __repr__(self):
        return "LPResult(status=%r, fun=%r)" % (self.status, self.fun)


def _pivot(T, basis, row, col):
    T[row] /= T[row, col]
    piv = T[row]
    for i in range(T.shape[0]):
        if i != row and T[i, col] != 0.0:
            T[i] -= T[i, col] * piv
    basis[row] = col


def _bland_entering(cost_row, allowed, tol):
    for j in allowed:
        if cost_row[j] < -tol:
            return j
    return -1


def _bland_leaving(T, basis, col, tol):
    rows = np.where(T[:-1, col] > tol)[0]
    if rows.size == 0:
        return -1
    ratios = T[rows, -1] / T[rows, col]
    best = ratios.min()
    ties = rows[ratios <= best + tol * (1.0 + abs(best))]
    # Bland: among minimum-ratio rows leave the smallest basic index.
    return ties[np.argmin(basis[ties])]


def _run_simplex(T, basis, allowed, tol, maxiter):
    for _ in range(maxiter):
        col = _bland_entering(T[-1], allowed, tol)
        if col < 0:
            return "optimal"
        row = _bland_leaving(T, basis, col, tol)
        if row < 0:
            return "unbounded"
        _pivot(T, basis, row, col)
    raise RuntimeError("simplex exceeded %d iterations" % maxiter)


def _lex_shrink_basis(T, basis, allowed, tol):
    """Pivot among optimal bases toward the lexicographically smallest one.

    Only zero-reduced-cost columns enter, so the objective row is unchanged;
    each accepted pivot strictly lowers the sorted basis tuple, so this
    terminates.  Used as the deterministic tie rule between optimal vertices.
    """
    improved = True
    while improved:
        improved = False
        in_basis = set(basis.tolist())
        for j in allowed:
            if j in in_basis or abs(T[-1, j]) > tol:
                continue
            rows = np.where(T[:-1, j] > tol)[0]
            if rows.size == 0:
                continue
            ratios = T[rows, -1] / T[rows, j]
            best = ratios.min()
            ties = rows[ratios <= best + tol * (1.0 + abs(best))]
            row = ties[np.argmax(basis[ties])]
            if basis[row] > j:
                _pivot(T, basis, row, j)
                improved = True
                break


def solve_lp(c, A, b, maxiter=None, lex_ties=False):
    """Minimize ``c @ x`` subject to ``A @ x <= b`` and ``x >= 0``.

    Two-phase dense simplex with Bland's rule.  ``lex_ties=True`` adds a
    post-pass that walks to the lexicographically smallest optimal basis.
    Returns :class:`LPResult` with status ``optimal``, ``infeasible`` or
    ``unbounded``.
    """
    c = np.asarray(c, dtype=float).ravel()
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    if A.ndim != 2 or A.shape != (b.size, c.size):
        raise ValueError("inconsistent LP shapes")
    m, n = A.shape
    if maxiter is None:
        maxiter = 100 * (n + m + 10)

    scale = max(1.0, np.abs(A).max() if A.size else 1.0, np.abs(b).max() if b.size else 1.0)
    tol = _TOL * scale

    neg = b < 0.0
    n_art = int(neg.sum())
    ncols = n + m + n_art
    T = np.zeros((m + 1, ncols + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    basis = np.empty(m, dtype=int)
    art_cols = []
    k = 0
    for i in range(m):
        if neg[i]:
            T[i, :] *= -1.0
            col = n + m + k
            T[i, col] = 1.0
            basis[i] = col
            art_cols.append(col)
            k += 1
        else:
            basis[i] = n + i
    allowed = list(range(n + m))

    if n_art:
        # Phase 1: minimize the sum of artificials.
        T[-1, :] = 0.0
        for i in range(m):
            if basis[i] >= n + m:
                T[-1] -= T[i]
        T[-1, art_cols] = 0.0
        status = _run_simplex(T, basis, allowed, tol, maxiter)
        if status != "optimal" or T[-1, -1] < -tol * 10:
            return LPResult("infeasible")
        # Drive leftover artificials out of the basis where possible.
        for i in range(m):
            if basis[i] >= n + m:
                cols = np.where(np.abs(T[i, :n + m]) > tol)[0]
                if cols.size:
                    _pivot(T, basis, i, cols[0])
        T[:, n + m:ncols] = 0.0

    # Phase 2 objective row: reduced costs of c under the current basis.
    T[-1, :] = 0.0
    T[-1, :n] = c
    for i in range(m):
        bi = basis[i]
        if bi < n and c[bi] != 0.0:
            T[-1] -= c[bi] * T[i]
    status = _run_simplex(T, basis, allowed, tol, maxiter)
    if status != "optimal":
        return LPResult(status)
    if lex_ties:
        _lex_shrink_basis(T, basis, allowed, tol)

    x = np.zeros(n + m)
    for i in range(m):
        if basis[i] < n + m:
            x[basis[i]] = T[i, -1]
    xv = x[:n].copy()
    return LPResult("optimal", x=xv, fun=float(c @ xv), basis=tuple(sorted(basis.tolist())))


def project_point(point, A, b, metric=None, tol=1e-9):
    """Exact projection of ``point`` onto ``{p : A p <= b}``.

    Distance is measured as ``||inv(metric) @ (p - point)||`` when a square
    nonsingular ``metric`` matrix is given (Euclidean otherwise).  Active-set
    enumeration over constraint subsets; the KKT conditions are sufficient
    here, so the first subset that satisfies them yields the projection.
    Returns ``(projection, distance)``.
    """
    x0 = np.asarray(point, dtype=float).ravel()
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    m, n = A.shape
    scale = max(1.0, np.abs(b).max() if b.size else 1.0)
    slack = b - A @ x0
    if np.all(slack >= -tol * scale):
        return x0.copy(), 0.0

    W = np.eye(n) if metric is None else np.asarray(metric, dtype=float)
    Winv = np.linalg.inv(W)
    AW = A @ W  # rows a_i^T W

    def dist_of(p):
        return float(np.linalg.norm(Winv @ (p - x0)))

    max_size = min(n, m)
    best = None
    for size in range(1, max_size + 1):
        for S in itertools.combinations(range(m), size):
            S = list(S)
            M = AW[S] @ AW[S].T
            rhs = A[S] @ x0 - b[S]
            try:
                nu = np.linalg.solve(M, rhs)
            except np.linalg.LinAlgError:
                continue
            if np.any(nu < -tol * scale):
                continue
            p = x0 - W @ (AW[S].T @ nu)
            if np.all(A @ p - b <= tol * scale * 10):
                d = dist_of(p)
                if best is None or d < best[1] - tol:
                    best = (p, d)
                    # KKT point of a strictly convex QP: global optimum.
                    return best
    if best is not None:
        return best
    raise RuntimeError("projection active-set search failed")
