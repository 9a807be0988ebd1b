"""Value bounds from low-dimensional dynamic programs.

The lower bound projects the demand on a load direction, pools the
execution clocks into one scalar progress variable, relaxes completion
timing, and runs a surrogate running cost that never exceeds the true
one.  The upper bound keeps only the whitened demand radius, freezes
switching while any transition runs, and uses a surrogate cost that
never falls below the true one.  Both solve small backward recursions
on Markov chains and share the ValueGrid container.
"""

import itertools
import logging

import numpy as np

from .feasibility import signed_distance, support_value
from .stochastic import build_chain, build_radius_chain, project_eta, radial_model

log = logging.getLogger("redispatch.bounds")

__all__ = [
    "EtaFamily", "RelaxedStates", "ValueGrid", "build_eta_families",
    "solve_lower_bound", "solve_upper_bound", "lb_expectation",
    "lower_envelope_value", "xi_worst_rate",
]

_PARALLEL_TOL = 1e-9


class EtaFamily:
    """One load direction with its production directions and supports.

    ``eta_load`` is normalized and nonnegative; ``prod_dirs`` holds one
    production direction per row, ``supports[i, j]`` the support value of
    region i in joint direction (prod_dirs[j], eta_load).  ``rate`` is the
    cheapest shedding cost per unit of projected load.
    """

    def __init__(self, eta_load, prod_dirs, supports, rate, model):
        self.eta_load = np.asarray(eta_load, dtype=float)
        self.prod_dirs = np.asarray(prod_dirs, dtype=float)
        self.supports = np.asarray(supports, dtype=float)
        self.rate = float(rate)
        self.model = model

    @property
    def n_dirs(self):
        return self.prod_dirs.shape[0]

    def surrogate_cost(self, dis, zeta, y):
        """Running-cost minorant at production ``zeta`` (..., n_G) and
        absolute projected demand ``y`` (...,); shapes broadcast."""
        zeta = np.asarray(zeta, dtype=float)
        y = np.asarray(y, dtype=float)
        base = dis.production_cost(zeta)
        proj = zeta @ self.prod_dirs.T                      # (..., n_j)
        gap = y[..., None, None] + proj[..., None, :] - self.supports
        shed = (dis.intensity[:, None] * np.maximum(gap, 0.0)).sum(axis=-2)
        return base + self.rate * shed.max(axis=-1)


def build_eta_families(instance, explicit=None):
    """Load directions from the feasibility boundaries at stationary points.

    Every distinct load-normal of the half-space rows is a direction; its
    production directions collect, per stationary production level, the
    most binding row parallel to it (plus the pure-load direction).
    ``explicit`` overrides the load directions with given vectors.
    """
    net, dis, dem = instance.network, instance.disruption, instance.demand
    lo, hi = net.gen_box()
    if explicit is not None:
        dirs = []
        for v in explicit:
            v = np.asarray(v, dtype=float).ravel()
            if v.min() < -1e-12 or np.linalg.norm(v) <= 0.0:
                raise ValueError("load directions must be nonnegative and nonzero")
            dirs.append(v / np.linalg.norm(v))
    else:
        dirs, seen = [], set()
        for fs in dis.sets:
            for r in range(fs.n_rows):
                d = fs.a_load[r] / np.linalg.norm(fs.a_load[r])
                key = tuple(np.round(d, 9))
                if key not in seen:
                    seen.add(key)
                    dirs.append(d)

    tref = np.unique(np.clip(dem.forecast.knots, 0.0, instance.horizon))
    tref = np.union1d(tref, [0.0, 0.5 * instance.horizon, instance.horizon])
    mref = np.stack([dem.forecast(t) for t in tref])        # (n_t, n_L)
    stat_prods = [net.production(i, np.zeros(net.n_gen))
                  for i in np.where(net.stationary)[0]]

    fams = []
    for d in dirs:
        jdirs = [np.zeros(net.n_gen)]
        jseen = {tuple(np.round(jdirs[0], 9))}
        for p in stat_prods:
            for fs in dis.sets:
                best, bslack = None, np.inf
                for r in range(fs.n_rows):
                    nrm = np.linalg.norm(fs.a_load[r])
                    if np.linalg.norm(fs.a_load[r] / nrm - d) > _PARALLEL_TOL:
                        continue
                    wsc = np.linalg.norm(instance.demand.sigma.T @ fs.a_load[r])
                    slack = (fs.offset[r] - fs.a_gen[r] @ p - mref @ fs.a_load[r])
                    s = np.abs(slack).min() / max(wsc, 1e-12)
                    if s < bslack:
                        bslack, best = s, fs.a_gen[r] / nrm
                if best is not None:
                    key = tuple(np.round(best, 9))
                    if key not in jseen:
                        jseen.add(key)
                        jdirs.append(best)
        prod_dirs = np.stack(jdirs)
        supports = np.empty((len(dis.sets), len(jdirs)))
        for i, fs in enumerate(dis.sets):
            for j in range(len(jdirs)):
                supports[i, j] = support_value(fs, prod_dirs[j], d, lo, hi)
        pos = d > 1e-12
        rate = float(np.min(dis.shed_cost[pos] / d[pos]))
        fams.append(EtaFamily(d, prod_dirs, supports, rate, project_eta(dem, d)))
    return fams


class RelaxedStates:
    """Flat index over (mode, execution-progress) pairs.

    kind "total": progress is the pooled elapsed work, multiples of dt in
    [0, sigma_total(a)] inclusive.  kind "residual": progress is the worst
    remaining delay; stationary modes hold only 0, transiting modes
    dt..psi_max(a).
    """

    def __init__(self, network, dt, kind):
        if kind not in ("total", "residual"):
            raise ValueError("kind must be 'total' or 'residual'")
        self.network = network
        self.dt = float(dt)
        self.kind = kind
        nm = network.n_modes
        counts = np.empty(nm, dtype=int)
        for a in range(nm):
            if kind == "total":
                counts[a] = int(round(network.sigma_total[a] / dt)) + 1
            else:
                counts[a] = 1 if network.stationary[a] \
                    else int(round(network.psi_max[a] / dt))
        self.counts = counts
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(int)
        self.n_flat = int(self.offsets[-1])
        self.flat_mode = np.repeat(np.arange(nm), counts)
        self.flat_wsteps = np.concatenate([
            np.arange(counts[a]) + (0 if kind == "total" or network.stationary[a] else 1)
            for a in range(nm)])

    def flat(self, mode_idx, wsteps):
        """Flat row of (mode, progress-in-steps); vectorized over wsteps."""
        wsteps = np.asarray(wsteps, dtype=int)
        base = 0 if self.kind == "total" or self.network.stationary[mode_idx] else 1
        idx = self.offsets[mode_idx] + wsteps - base
        lo, hi = self.offsets[mode_idx], self.offsets[mode_idx + 1]
        if np.any(idx < lo) or np.any(idx >= hi):
            raise IndexError("progress out of range for mode %d" % mode_idx)
        return int(idx) if idx.ndim == 0 else idx

    def w_minutes(self, flat):
        return self.flat_wsteps[flat] * self.dt


class ValueGrid:
    """Backward-solved values over (time, demand statistic, mode, progress).

    ``values`` has shape (N+1, n_flat, n_y); ``actions`` (N, n_flat, n_y)
    holds small integer codes whose meaning is row-specific (0 always means
    continue).  ``chains`` lists one demand chain per step.
    """

    def __init__(self, kind, times, ygrid, states, values, actions, chains, meta):
        self.kind = kind
        self.times = np.asarray(times, dtype=float)
        self.ygrid = np.asarray(ygrid, dtype=float)
        self.states = states
        self.values = values
        self.actions = actions
        self.chains = chains
        self.meta = meta
        self.clamped = 0

    @property
    def n_y(self):
        return self.ygrid.size

    def _locate(self, y):
        y = np.asarray(y, dtype=float)
        out = np.clip(y, self.ygrid[0], self.ygrid[-1])
        n_out = int(np.sum((y < self.ygrid[0]) | (y > self.ygrid[-1])))
        if n_out:
            if self.clamped == 0:
                log.warning("%s grid queried outside range; clamping", self.kind)
            self.clamped += n_out
        j = np.clip(np.searchsorted(self.ygrid, out) - 1, 0, self.n_y - 2)
        w = (out - self.ygrid[j]) / (self.ygrid[j + 1] - self.ygrid[j])
        return j, np.clip(w, 0.0, 1.0)

    def value_at(self, m, y, flat):
        """Linear interpolation along the demand axis; y outside is clamped."""
        j, w = self._locate(y)
        row = self.values[m, flat]
        if np.ndim(flat) == 0:
            return (1.0 - w) * row[..., j] + w * row[..., j + 1]
        return (1.0 - w) * row[np.arange(len(j)), j] + w * row[np.arange(len(j)), j + 1]

    def expectation_next(self, m, y, flat_next):
        """One-step conditional expectation of slice m+1 at row ``flat_next``,
        as a function of the current statistic ``y`` (vectorized)."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        flat_next = np.atleast_1d(np.asarray(flat_next, dtype=int))
        if flat_next.size == 1 and y.size > 1:
            flat_next = np.repeat(flat_next, y.size)
        chain = self.chains[m]
        out = np.empty(y.size)
        for f in np.unique(flat_next):
            sel = flat_next == f
            stateexp = chain.apply(self.values[m + 1, f])
            j, w = self._locate(y[sel])
            out[sel] = (1.0 - w) * stateexp[j] + w * stateexp[j + 1]
        return out if out.size > 1 else float(out[0])

    def to_csv(self, path, mode_labels=None):
        """One row per (t, y, mode, progress) state; large for real grids."""
        st = self.states
        with open(path, "w") as fh:
            fh.write("# value grid kind=%s\n" % self.kind)
            fh.write("t_min,y,mode,w_min,value,action\n")
            for m in range(self.values.shape[0]):
                for f in range(st.n_flat):
                    lab = st.flat_mode[f] if mode_labels is None \
                        else mode_labels[st.flat_mode[f]]
                    wmin = st.flat_wsteps[f] * st.dt
                    act = self.actions[m, f] if m < self.actions.shape[0] else None
                    for k in range(self.n_y):
                        a = -1 if act is None else int(act[k])
                        fh.write("%g,%.10g,%s,%g,%.10g,%d\n" % (
                            self.times[m], self.ygrid[k], lab, wmin,
                            self.values[m, f, k], a))


# -- lower bound -----------------------------------------------------------

def _ramp_curve(net, mode_idx, gen, s):
    """Production of one transiting generator at elapsed time s (array ok)."""
    v0 = net.level_from[mode_idx, gen]
    v1 = net.level_to[mode_idx, gen]
    pl = net.plateau[mode_idx, gen]
    dl = net.delta[mode_idx, gen]
    u = np.clip((np.asarray(s, dtype=float) - pl) / (dl - pl), 0.0, 1.0)
    return v0 + u * (v1 - v0)


def _fiber_pair_min(instance, fam, mode_idx, rho, ygrid):
    """Exact min of the surrogate cost over a two-transition fiber.

    The fiber {r1 + r2 = rho} is cut at the ramp kinks; on each cell the
    cost is convex in the fiber coordinate, so a bracketing search plus a
    Lipschitz margin gives a certified minorant (the margin is far below
    float noise of the values involved).
    """
    net, dis = instance.network, instance.disruption
    g1, g2 = net.trans_gens[mode_idx]
    d1, d2 = net.delta[mode_idx, g1], net.delta[mode_idx, g2]
    lo = max(0.0, rho - d2)
    hi = min(d1, rho)
    base = net.level_from[mode_idx].astype(float)

    def cost(svec):
        P = np.tile(base, (svec.size, 1))
        P[:, g1] = _ramp_curve(net, mode_idx, g1, svec)
        P[:, g2] = _ramp_curve(net, mode_idx, g2, rho - svec)
        return fam.surrogate_cost(dis, P, ygrid)

    if hi - lo < 1e-12:
        return cost(np.full(ygrid.size, lo))
    cuts = [lo, hi]
    for c in (net.plateau[mode_idx, g1], d1, rho - net.plateau[mode_idx, g2], rho - d2):
        if lo + 1e-12 < c < hi - 1e-12:
            cuts.append(float(c))
    cuts = np.unique(np.array(cuts, dtype=float))

    # Lipschitz bound of the cost in the fiber coordinate.
    sl1 = abs(net.level_to[mode_idx, g1] - net.level_from[mode_idx, g1]) / \
        max(d1 - net.plateau[mode_idx, g1], 1e-12)
    sl2 = abs(net.level_to[mode_idx, g2] - net.level_from[mode_idx, g2]) / \
        max(d2 - net.plateau[mode_idx, g2], 1e-12)
    mderiv = dis.marginal_cost / 60.0
    gslope = np.abs(fam.prod_dirs[:, g1]) * sl1 + np.abs(fam.prod_dirs[:, g2]) * sl2
    lip = mderiv[g1] * sl1 + mderiv[g2] * sl2 + \
        fam.rate * dis.intensity.sum() * float(gslope.max(initial=0.0))

    best = np.full(ygrid.size, np.inf)
    for c0, c1 in zip(cuts[:-1], cuts[1:]):
        lo_v = np.full(ygrid.size, c0)
        hi_v = np.full(ygrid.size, c1)
        for _ in range(64):
            m1 = lo_v + (hi_v - lo_v) / 3.0
            m2 = hi_v - (hi_v - lo_v) / 3.0
            take = cost(m1) <= cost(m2)
            hi_v = np.where(take, m2, hi_v)
            lo_v = np.where(take, lo_v, m1)
        cand = np.minimum(cost(lo_v), cost(hi_v)) - lip * (hi_v - lo_v)
        cand = np.minimum(cand, np.minimum(cost(np.full(ygrid.size, c0)),
                                           cost(np.full(ygrid.size, c1))))
        best = np.minimum(best, cand)
    return best


def _fiber_loose_min(instance, fam, mode_idx, rho, ygrid):
    """Separable minorant for three or more transitions: each clock is
    minimized independently over its fiber-consistent range."""
    net, dis = instance.network, instance.disruption
    tg = net.trans_gens[mode_idx]
    deltas = net.delta[mode_idx, tg]
    cmin = 0.0
    projmin = np.zeros(fam.n_dirs)
    mrate = dis.marginal_cost / 60.0
    for k in range(net.n_gen):
        if not net.trans_mask[mode_idx, k]:
            cmin += mrate[k] * net.level_from[mode_idx, k]
            projmin += fam.prod_dirs[:, k] * net.level_from[mode_idx, k]
    for j, k in enumerate(tg):
        others = deltas.sum() - deltas[j]
        r_lo = max(0.0, rho - others)
        r_hi = min(deltas[j], rho)
        ends = np.array([_ramp_curve(net, mode_idx, k, r_lo),
                         _ramp_curve(net, mode_idx, k, r_hi)])
        cmin += mrate[k] * ends.min()
        projmin += np.minimum(fam.prod_dirs[:, k] * ends[0],
                              fam.prod_dirs[:, k] * ends[1])
    gap = ygrid[None, None, :] + projmin[None, :, None] - fam.supports[:, :, None]
    shed = (dis.intensity[:, None, None] * np.maximum(gap, 0.0)).sum(axis=0)
    return cmin + fam.rate * shed.max(axis=0)


def _lower_cost_table(instance, states, fam, ygrid):
    """Surrogate running cost per (mode, progress) row over the demand grid."""
    net, dis = instance.network, instance.disruption
    tab = np.empty((states.n_flat, ygrid.size))
    for a in range(net.n_modes):
        tg = net.trans_gens[a]
        for k in range(states.counts[a]):
            f = states.offsets[a] + k
            rho = k * states.dt
            if tg.size == 0:
                zeta = net.production(a, np.zeros(net.n_gen))
                tab[f] = fam.surrogate_cost(dis, zeta, ygrid)
            elif tg.size == 1:
                r = np.zeros(net.n_gen)
                r[tg[0]] = rho
                tab[f] = fam.surrogate_cost(dis, net.production(a, r), ygrid)
            elif tg.size == 2:
                tab[f] = _fiber_pair_min(instance, fam, a, rho, ygrid)
            else:
                tab[f] = _fiber_loose_min(instance, fam, a, rho, ygrid)
    return tab


def _lb_rows(instance, states):
    """Per-row action structure: continue target, completions, requests.

    Rows are ordered progress-ascending then transit-count-descending so
    that same-instant jumps always point at already-computed rows.
    """
    net = instance.network
    dt = states.dt
    rows = []
    for a in range(net.n_modes):
        tg = net.trans_gens[a]
        nt = tg.size
        for k in range(states.counts[a]):
            f = states.offsets[a] + k
            cont = -1
            if k + nt <= states.counts[a] - 1:
                cont = states.offsets[a] + k + nt
            comps = []
            for j, g in enumerate(tg):
                dsteps = int(round(net.delta[a, g] / dt))
                if k >= dsteps:
                    tgt_mode = int(net.complete_lut[a][1 << j])
                    comps.append(states.offsets[tgt_mode] + (k - dsteps))
            reqs = []
            for sw in sorted(net.switches[a], key=lambda s: s["coord"]):
                reqs.append((sw["cost"], states.offsets[sw["target"]] + k))
            rows.append({"flat": f, "order": (k, -nt), "cont": cont,
                         "comps": comps, "reqs": reqs})
    rows.sort(key=lambda r: r["order"])
    return rows


def _lb_slice(rows, ftab, dt, econt, v_out, act_out):
    """One backward time slice of the lower-bound recursion, in place."""
    for r in rows:
        f = r["flat"]
        cands = []
        if r["cont"] >= 0:
            cands.append(ftab[f] * dt + econt[r["cont"]])
        for tgt in r["comps"]:
            cands.append(v_out[tgt])
        for cost, tgt in r["reqs"]:
            cands.append(cost + v_out[tgt])
        stack = np.stack(cands)
        pick = np.argmin(stack, axis=0)
        v_out[f] = stack[pick, np.arange(stack.shape[1])]
        act_out[f] = pick if r["cont"] >= 0 else pick + 1


def solve_lower_bound(instance, fam, n_y=None, width=None):
    """Backward recursion of the projected, progress-pooled relaxation."""
    cfg = instance.bounds_cfg
    n_y = int(n_y or cfg.get("grid_points", 601))
    width = float(width or cfg.get("grid_width_std", 6.0))
    net, dt = instance.network, instance.dt
    times = instance.times
    n_steps = len(times) - 1

    states = RelaxedStates(net, dt, "total")
    my = np.array([fam.model.forecast(t) for t in times])
    sd = max(fam.model.noise_std_at(instance.horizon), 1e-9)
    ygrid = np.linspace(my.min() - width * sd, my.max() + width * sd, n_y)

    kdec = np.exp(-fam.model.gamma * dt)
    var = fam.model.step_var(0.0, dt)
    chains = []
    for m in range(n_steps):
        mean = my[m + 1] + kdec * (ygrid - my[m])
        chains.append(build_chain(ygrid, mean, np.full(n_y, var)))

    ftab = _lower_cost_table(instance, states, fam, ygrid)
    rows = _lb_rows(instance, states)

    values = np.zeros((n_steps + 1, states.n_flat, n_y))
    actions = np.zeros((n_steps, states.n_flat, n_y), dtype=np.int16)
    for m in range(n_steps - 1, -1, -1):
        econt = chains[m].apply(values[m + 1].T).T
        _lb_slice(rows, ftab, dt, econt, values[m], actions[m])

    meta = {"eta": fam.eta_load, "prod_dirs": fam.prod_dirs,
            "supports": fam.supports, "rate": fam.rate,
            "cost_table": ftab, "rows": rows, "width": width}
    return ValueGrid("lower", times, ygrid, states, values, actions, chains, meta)


def lb_expectation(grid, m, y, mode_idx, w_minutes):
    """One-step conditional expectation of the lower-bound slice m+1 for
    mode ``mode_idx`` at pooled progress ``w_minutes`` (vectorized in y/w)."""
    st = grid.states
    wsteps = np.rint(np.asarray(w_minutes, dtype=float) / st.dt).astype(int)
    flat = st.offsets[mode_idx] + wsteps
    return grid.expectation_next(m, y, flat)


def lower_envelope_value(grids, instance):
    """Best lower bound at the initial state across projection directions."""
    best = -np.inf
    for g in grids:
        y0 = float(g.meta["eta"] @ instance.x0)
        f0 = g.states.flat(instance.initial_mode, 0)
        best = max(best, float(g.value_at(0, y0, f0)))
    return best


# -- upper bound -----------------------------------------------------------

def xi_worst_rate(sigma, shed_cost):
    """Exact worst shedding cost per unit of whitened demand distance.

    Maximizes ``sum_k c_k max(sigma_k . xi, 0)`` over unit xi; the optimum
    is attained at the normalized sum of an active subset of rows, so a
    subset sweep is exact.
    """
    sigma = np.asarray(sigma, dtype=float)
    c = np.asarray(shed_cost, dtype=float).ravel()
    n = c.size
    if n > 20:
        raise ValueError("subset sweep limited to 20 load dimensions")
    rows = c[:, None] * sigma
    best = 0.0
    for bits in range(1, 1 << n):
        mask = [(bits >> k) & 1 == 1 for k in range(n)]
        best = max(best, float(np.linalg.norm(rows[mask].sum(axis=0))))
    return best


def _ub_batches(net, states):
    """Per stationary mode: simultaneous order batches (cost, target row)."""
    out = {}
    for a in range(net.n_modes):
        if not net.stationary[a]:
            continue
        per_gen = [[] for _ in range(net.n_gen)]
        for sw in net.switches[a]:
            per_gen[sw["gen"]].append(sw)
        batches = []
        for combo in itertools.product(*[[None] + g for g in per_gen]):
            chosen = [sw for sw in combo if sw is not None]
            if not chosen:
                continue
            mode = list(net.modes[a])
            cost, psi = 0.0, 0.0
            for sw in chosen:
                g = net.gens[sw["gen"]]
                mode[sw["gen"]] = g.n_levels + sw["tidx"]
                cost += sw["cost"]
                psi = max(psi, g.transitions[sw["tidx"]].delay)
            tgt = net.mode_index[tuple(mode)]
            wsteps = int(round(psi / states.dt))
            batches.append((tuple(sw["coord"] for sw in chosen), cost,
                            states.flat(tgt, wsteps)))
        batches.sort(key=lambda b: (len(b[0]), b[0]))
        out[a] = [(c, f) for _, c, f in batches]
    return out


def _ub_cost_tables(instance, states, ygrid, knots, mxi):
    """Cost majorant per knot time and (mode, residual) row over the radius
    grid: worst production in the reachable box times the worst shedding
    direction, against the whitened distance to each region boundary."""
    net, dis, dem = instance.network, instance.disruption, instance.demand
    memo = {}

    def dist(i, ki, p):
        key = (i, ki, tuple(np.round(p, 9)))
        if key not in memo:
            memo[key] = signed_distance(dis.sets[i], p, dem.forecast(knots[ki]),
                                        metric=dem.sigma)
        return memo[key]

    tabs = np.empty((len(knots), states.n_flat, ygrid.size))
    for a in range(net.n_modes):
        tg = net.trans_gens[a]
        for k in range(states.counts[a]):
            f = states.offsets[a] + k
            w = states.flat_wsteps[f] * states.dt
            axes = []
            for g in range(net.n_gen):
                if net.trans_mask[a, g]:
                    e0 = max(0.0, net.delta[a, g] - w)
                    pv = _ramp_curve(net, a, g, np.linspace(e0, net.delta[a, g], 5))
                    axes.append(np.unique(np.round(pv, 12)))
                else:
                    axes.append(np.array([net.level_from[a, g]]))
            cands = np.array(list(itertools.product(*axes)))
            for ki in range(len(knots)):
                rows = np.empty((len(cands), ygrid.size))
                for ci, p in enumerate(cands):
                    d = np.array([dist(i, ki, p) for i in range(len(dis.sets))])
                    viol = np.maximum(ygrid[None, :] - d[:, None], 0.0)
                    rows[ci] = dis.production_cost(p) + \
                        mxi * (dis.intensity[:, None] * viol).sum(axis=0)
                tabs[ki, f] = rows.max(axis=0)
    return tabs


def solve_upper_bound(instance, n_y=None, width=None, knot_spacing=6.0):
    """Backward recursion of the radial, frozen-switching restriction."""
    cfg = instance.bounds_cfg
    n_y = int(n_y or cfg.get("grid_points", 601))
    width = float(width or cfg.get("grid_width_std", 6.0))
    net, dem, dt = instance.network, instance.demand, instance.dt
    times = instance.times
    n_steps = len(times) - 1

    states = RelaxedStates(net, dt, "residual")
    rad = radial_model(dem)
    r0 = float(np.linalg.norm(dem.sigma_inv @ instance.z0) ** 2)
    rT = rad.noise_mean_at(r0, instance.horizon)
    sT = rad.noise_std_at(r0, instance.horizon)
    # e^{-2*gamma*t} interpolation makes E[R_t] monotone, so the mean peaks
    # at an endpoint; pad in radius units (delta method), not squared units,
    # else the top sits only ~3 radial sigmas out for one load.
    mR = max(r0, rT, 1e-12)
    ygrid = np.linspace(0.0, np.sqrt(mR) + width * sT / (2.0 * np.sqrt(mR)), n_y)
    chain = build_radius_chain(ygrid, rad, dt)

    knots = np.unique(np.concatenate([
        np.arange(0.0, instance.horizon + 1e-9, knot_spacing),
        np.clip(dem.forecast.knots, 0.0, instance.horizon),
        [instance.horizon]]))
    mxi = xi_worst_rate(dem.sigma, instance.disruption.shed_cost)
    ktabs = _ub_cost_tables(instance, states, ygrid, knots, mxi)

    batches = _ub_batches(net, states)
    trans_rows = [f for f in range(states.n_flat)
                  if not net.stationary[states.flat_mode[f]]]
    stat_rows = [f for f in range(states.n_flat)
                 if net.stationary[states.flat_mode[f]]]

    values = np.zeros((n_steps + 1, states.n_flat, n_y))
    actions = np.zeros((n_steps, states.n_flat, n_y), dtype=np.int16)
    seg = np.clip(np.searchsorted(knots, times[:-1], side="right") - 1,
                  0, len(knots) - 2)
    for m in range(n_steps - 1, -1, -1):
        lam = (times[m] - knots[seg[m]]) / (knots[seg[m] + 1] - knots[seg[m]])
        fm = (1.0 - lam) * ktabs[seg[m]] + lam * ktabs[seg[m] + 1]
        econt = chain.apply(values[m + 1].T).T
        v, act = values[m], actions[m]
        for f in trans_rows:
            a = states.flat_mode[f]
            k = states.flat_wsteps[f]
            if k > 1:
                tgt = states.flat(a, k - 1)
            else:
                done = int(net.complete_lut[a][(1 << net.trans_gens[a].size) - 1])
                tgt = states.flat(done, 0)
            v[f] = fm[f] * dt + econt[tgt]
        for f in stat_rows:
            a = states.flat_mode[f]
            cands = [fm[f] * dt + econt[f]]
            for cost, tgt in batches[a]:
                cands.append(cost + v[tgt])
            stack = np.stack(cands)
            pick = np.argmin(stack, axis=0)
            v[f] = stack[pick, np.arange(n_y)]
            act[f] = pick

    meta = {"m_xi": mxi, "knots": knots, "knot_tables": ktabs,
            "batches": batches, "width": width, "r0": r0}
    return ValueGrid("upper", times, ygrid, states,
                     values, actions, [chain] * n_steps, meta)


def bellman_residual(grid, steps=None):
    """Largest value change from re-applying one backward step.

    Recomputes whole time slices from the stored slice above them and
    compares against the stored values; a solved grid must reproduce
    itself exactly up to float associativity.
    """
    st = grid.states
    net = st.network
    n_steps = grid.values.shape[0] - 1
    if steps is None:
        steps = range(n_steps)
    worst = 0.0
    for m in steps:
        v = np.empty_like(grid.values[m])
        act = np.empty((st.n_flat, grid.n_y), dtype=np.int16)
        if grid.kind == "lower":
            econt = grid.chains[m].apply(grid.values[m + 1].T).T
            _lb_slice(grid.meta["rows"], grid.meta["cost_table"], st.dt,
                      econt, v, act)
        else:
            knots = grid.meta["knots"]
            ktabs = grid.meta["knot_tables"]
            batches = grid.meta["batches"]
            t = grid.times[m]
            seg = int(np.clip(np.searchsorted(knots, t, side="right") - 1,
                              0, len(knots) - 2))
            lam = (t - knots[seg]) / (knots[seg + 1] - knots[seg])
            fm = (1.0 - lam) * ktabs[seg] + lam * ktabs[seg + 1]
            econt = grid.chains[m].apply(grid.values[m + 1].T).T
            dt = st.dt
            for f in range(st.n_flat):
                a = st.flat_mode[f]
                if not net.stationary[a]:
                    k = st.flat_wsteps[f]
                    if k > 1:
                        tgt = st.flat(a, k - 1)
                    else:
                        done = int(net.complete_lut[a][(1 << net.trans_gens[a].size) - 1])
                        tgt = st.flat(done, 0)
                    v[f] = fm[f] * dt + econt[tgt]
            for f in range(st.n_flat):
                a = st.flat_mode[f]
                if net.stationary[a]:
                    cands = [fm[f] * dt + econt[f]]
                    for cost, tgt in batches[a]:
                        cands.append(cost + v[tgt])
                    v[f] = np.min(np.stack(cands), axis=0)
        worst = max(worst, float(np.abs(v - grid.values[m]).max()))
    return worst
