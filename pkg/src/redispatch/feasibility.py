"""Feasibility regions, load shedding costs, and running-cost models.

A feasibility region is a convex compact polytope over joint production and
demand vectors, written row-wise as ``a_gen . p_G + a_load . p_D <= b`` with
``a_load >= 0`` componentwise (load over-satisfaction is always acceptable,
so the region is downward closed in demand).  Index 0 of a collection is the
base case; the rest are contingencies with occurrence intensities.

The shedding program for a region is

    min  c . z   s.t.  (p_G, p_D - z) in G,  z >= 0,

solved here two ways: a dense simplex per call (reference path, returns the
shedding vector itself), and a bulk path that precomputes the vertices of the
dual feasible set ``{lam >= 0 : a_load^T lam <= c}`` once per region, after
which the cost is a maximum of affine forms in (p_G, p_D).  Both are exact;
tests cross-check them.
"""

from __future__ import annotations

import itertools

import numpy as np

from .simplex import solve_lp, project_point

__all__ = [
    "FeasibilitySet",
    "DisruptionModel",
    "load_disruption_cost",
    "support_value",
    "signed_distance",
    "zeta_eta_cost",
]


class FeasibilitySet:
    """One polytope ``a_gen . p_G + a_load . p_D <= offset``."""

    def __init__(self, a_gen, a_load, offset, label=""):
        self.a_gen = np.atleast_2d(np.asarray(a_gen, dtype=float))
        self.a_load = np.atleast_2d(np.asarray(a_load, dtype=float))
        self.offset = np.asarray(offset, dtype=float).ravel()
        self.label = label
        m = self.offset.size
        if self.a_gen.shape[0] != m or self.a_load.shape[0] != m:
            raise ValueError("row count mismatch in feasibility set %r" % label)
        if np.any(self.a_load < 0.0):
            raise ValueError(
                "feasibility set %r has a negative load coefficient; regions "
                "must be downward closed in demand" % label)
        if np.any(np.all(np.abs(self.a_load) < 1e-12, axis=1)):
            raise ValueError(
                "feasibility set %r has a row not involving the load side" % label)
        self._dual_vertices = None

    @property
    def n_gen(self):
        return self.a_gen.shape[1]

    @property
    def n_load(self):
        return self.a_load.shape[1]

    @property
    def n_rows(self):
        return self.offset.size

    def slice_offset(self, p_gen):
        """Right-hand side of the demand-space slice at production p_gen."""
        return self.offset - self.a_gen @ np.asarray(p_gen, dtype=float)

    def contains(self, p_gen, p_load, tol=1e-9):
        s = self.slice_offset(p_gen) - self.a_load @ np.asarray(p_load, dtype=float)
        return bool(np.all(s >= -tol * max(1.0, np.abs(self.offset).max())))

    # -- bulk shedding-cost machinery -------------------------------------

    def dual_vertices(self, shed_cost, max_subsets=200000):
        """Vertices of ``{lam >= 0 : a_load^T lam <= shed_cost}``.

        Cached on first use.  The shedding cost at any state is the maximum
        over these vertices of ``lam . (a_gen p_G + a_load p_D - offset)``.
        """
        if self._dual_vertices is not None:
            return self._dual_vertices
        c = np.asarray(shed_cost, dtype=float).ravel()
        m, nl = self.n_rows, self.n_load
        G = np.vstack([-np.eye(m), self.a_load.T])
        h = np.concatenate([np.zeros(m), c])
        n_comb = 1
        for i in range(m):
            n_comb = n_comb * (m + nl - i) // (i + 1)
            if n_comb > max_subsets:
                raise RuntimeError(
                    "dual vertex enumeration too large for region %r" % self.label)
        verts = [np.zeros(m)]
        for S in itertools.combinations(range(m + nl), m):
            M = G[list(S)]
            try:
                v = np.linalg.solve(M, h[list(S)])
            except np.linalg.LinAlgError:
                continue
            if np.all(G @ v <= h + 1e-7 * (1.0 + np.abs(h))):
                verts.append(v)
        V = np.unique(np.round(np.array(verts), 9), axis=0)
        self._dual_vertices = {
            "lam": V,
            "on_gen": V @ self.a_gen,
            "on_load": V @ self.a_load,
            "off": V @ self.offset,
        }
        return self._dual_vertices


class DisruptionModel:
    """Feasibility regions with intensities, shedding prices, production cost.

    ``intensity[0]`` weights the base case, the rest the contingencies.
    ``shed_cost`` is the per-MW shedding price vector (strictly positive).
    ``marginal_cost`` is the per-minute marginal production cost per
    generator, so running costs integrate against time in minutes.
    """

    def __init__(self, sets, intensity, shed_cost, marginal_cost):
        self.sets = list(sets)
        self.intensity = np.asarray(intensity, dtype=float).ravel()
        self.shed_cost = np.asarray(shed_cost, dtype=float).ravel()
        self.marginal_cost = np.asarray(marginal_cost, dtype=float).ravel()
        if len(self.sets) != self.intensity.size:
            raise ValueError("one intensity per feasibility set required")
        if np.any(self.intensity < 0.0):
            raise ValueError("intensities must be nonnegative")
        if np.any(self.shed_cost <= 0.0):
            raise ValueError("shedding prices must be strictly positive")
        for fs in self.sets:
            if fs.n_load != self.shed_cost.size:
                raise ValueError("load dimension mismatch in %r" % fs.label)
            if fs.n_gen != self.marginal_cost.size:
                raise ValueError("generator dimension mismatch in %r" % fs.label)

    @property
    def n_load(self):
        return self.shed_cost.size

    @property
    def n_gen(self):
        return self.marginal_cost.size

    def production_cost(self, p_gen):
        """Per-minute production cost; p_gen may be (..., n_gen)."""
        return np.asarray(p_gen, dtype=float) @ self.marginal_cost

    def running_cost(self, p_gen, demand):
        """Scalar running cost f at one production/demand pair.

        Expected shedding over the base case and contingencies, priced at
        ``shed_cost`` and weighted by the intensities, plus production cost.
        Demand is floored at zero componentwise before shedding.
        """
        p_gen = np.asarray(p_gen, dtype=float).ravel()
        x = np.maximum(np.asarray(demand, dtype=float).ravel(), 0.0)
        total = float(self.production_cost(p_gen))
        for q, fs in zip(self.intensity, self.sets):
            if q == 0.0:
                continue
            cost, _ = load_disruption_cost(fs, self.shed_cost, p_gen, x)
            total += q * cost
        return total

    def running_cost_bulk(self, p_gen, demand):
        """Vectorized running cost via dual vertices.

        ``p_gen``: (..., n_gen), ``demand``: (..., n_load); broadcasting
        shapes must agree.  Returns an array of the broadcast shape.
        """
        p_gen = np.asarray(p_gen, dtype=float)
        x = np.maximum(np.asarray(demand, dtype=float), 0.0)
        total = p_gen @ self.marginal_cost
        for q, fs in zip(self.intensity, self.sets):
            if q == 0.0:
                continue
            dv = fs.dual_vertices(self.shed_cost)
            # (..., n_vert) affine forms, then max over vertices.
            forms = p_gen @ dv["on_gen"].T + x @ dv["on_load"].T - dv["off"]
            total = total + q * forms.max(axis=-1)
        return total


def load_disruption_cost(fset, shed_cost, p_gen, p_load):
    """Cheapest shedding that restores feasibility of one region.

    Returns ``(cost, z)`` where ``z`` is an optimal shedding vector, with
    ties between optimal vertices broken toward the lexicographically
    smallest basis.  Raises if the program is infeasible, which a
    well-formed instance never is.
    """
    c = np.asarray(shed_cost, dtype=float).ravel()
    rhs = fset.slice_offset(p_gen) - fset.a_load @ np.asarray(p_load, dtype=float).ravel()
    res = solve_lp(c, -fset.a_load, rhs, lex_ties=True)
    if res.status != "optimal":
        raise RuntimeError("shedding program %s for region %r" % (res.status, fset.label))
    return max(res.fun, 0.0), res.x


def support_value(fset, eta_gen, eta_load, gen_lo, gen_hi):
    """Support of the region over the production box in a joint direction.

    Maximizes ``eta_gen . p_G + eta_load . p_D`` over the region intersected
    with ``gen_lo <= p_G <= gen_hi`` and ``p_D >= 0``.
    """
    eta_gen = np.asarray(eta_gen, dtype=float).ravel()
    eta_load = np.asarray(eta_load, dtype=float).ravel()
    lo = np.asarray(gen_lo, dtype=float).ravel()
    hi = np.asarray(gen_hi, dtype=float).ravel()
    ng, nl = fset.n_gen, fset.n_load
    # Variables [s, p_D] with p_G = lo + s, 0 <= s <= hi - lo.
    A = np.zeros((fset.n_rows + ng, ng + nl))
    A[:fset.n_rows, :ng] = fset.a_gen
    A[:fset.n_rows, ng:] = fset.a_load
    A[fset.n_rows:, :ng] = np.eye(ng)
    b = np.concatenate([fset.offset - fset.a_gen @ lo, hi - lo])
    c = -np.concatenate([eta_gen, eta_load])
    res = solve_lp(c, A, b)
    if res.status != "optimal":
        raise RuntimeError("support program %s for region %r" % (res.status, fset.label))
    return float(eta_gen @ lo - res.fun)


def signed_distance(fset, p_gen, point, metric=None):
    """Signed distance from a demand point to the slice boundary.

    The slice is ``{p_D : a_load p_D <= offset - a_gen p_G}``.  Positive
    inside, negative outside, measured as ``||inv(metric)(p - point)||``
    (Euclidean when metric is None).  Inside, for a polytope, the distance
    is the smallest scaled row slack; outside it is an exact projection.
    """
    point = np.asarray(point, dtype=float).ravel()
    rhs = fset.slice_offset(p_gen)
    slack = rhs - fset.a_load @ point
    if metric is None:
        norms = np.linalg.norm(fset.a_load, axis=1)
    else:
        W = np.asarray(metric, dtype=float)
        norms = np.linalg.norm(fset.a_load @ W, axis=1)
    scale = max(1.0, np.abs(fset.offset).max())
    if np.all(slack >= -1e-9 * scale):
        return float(np.min(slack / norms))
    _, d = project_point(point, fset.a_load, rhs, metric=metric)
    return -d


def zeta_eta_cost(support, proj_prod, proj_demand, shed_cost, eta_load):
    """Shedding cost against the outer half-space of one region/direction.

    ``support`` is the support value of the region in the joint direction,
    ``proj_prod`` the production projected on the direction's generator
    part, ``proj_demand`` the demand projected on the load part.  All the
    shedding rides on the cheapest load component, so the cost underestimates
    the true shedding cost of the region.  Accepts arrays.
    """
    eta_load = np.asarray(eta_load, dtype=float).ravel()
    pos = eta_load > 1e-12
    if not np.any(pos):
        raise ValueError("direction must have a positive load component")
    rate = np.min(np.asarray(shed_cost, dtype=float).ravel()[pos] / eta_load[pos])
    gap = np.asarray(proj_demand) + np.asarray(proj_prod) - support
    return np.maximum(gap, 0.0) * rate
