"""Demand noise, seeded path storage, and 1-D chain approximations.

Demand is a deterministic forecast plus a mean-reverting Gaussian noise
``dZ = -gamma Z dt + sigma dW`` simulated with the exact transition (Euler is
available behind a flag).  The centered noise is autonomous, so all chains
built here are time-homogeneous; the forecast is added back only where costs
are evaluated.

Path storage keeps one RNG seed per step instead of the paths themselves.
Any time slice is recovered by replaying the seeded recurrence from the
start, which is bit-identical to the forward pass by construction and keeps
one live slice in memory.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Forecast",
    "DemandModel",
    "Model1D",
    "CIRModel",
    "SeededPathStore",
    "Chain1D",
    "build_chain",
    "build_radius_chain",
    "project_eta",
    "radial_model",
]


class Forecast:
    """Piecewise-linear forecast over time knots, vector valued."""

    def __init__(self, knots, values):
        self.knots = np.asarray(knots, dtype=float).ravel()
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        if self.values.shape[0] != self.knots.size:
            raise ValueError("one forecast row per knot required")
        if np.any(np.diff(self.knots) <= 0):
            raise ValueError("knots must be strictly increasing")

    @property
    def n_load(self):
        return self.values.shape[1]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.empty(t.shape + (self.n_load,))
        for j in range(self.n_load):
            out[..., j] = np.interp(t, self.knots, self.values[:, j])
        return out

    def project(self, eta):
        eta = np.asarray(eta, dtype=float).ravel()
        return Forecast(self.knots, (self.values @ eta)[:, None])


def _ou_step_scale(gamma, dt):
    """Standard deviation multiplier of the exact OU step."""
    if gamma < 1e-14:
        return np.sqrt(dt)
    return np.sqrt((1.0 - np.exp(-2.0 * gamma * dt)) / (2.0 * gamma))


class DemandModel:
    """Forecast plus vector OU noise with scalar reversion gamma."""

    def __init__(self, forecast, gamma, sigma):
        self.forecast = forecast
        self.gamma = float(gamma)
        if self.gamma < 0.0:
            raise ValueError("gamma must be nonnegative")
        self.sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        if self.sigma.shape[0] != self.sigma.shape[1]:
            raise ValueError("sigma must be square")
        if abs(np.linalg.det(self.sigma)) < 1e-12:
            raise ValueError("sigma must be nonsingular")
        if self.sigma.shape[0] != forecast.n_load:
            raise ValueError("sigma and forecast dimensions differ")
        self.sigma_inv = np.linalg.inv(self.sigma)

    @property
    def n_load(self):
        return self.forecast.n_load

    def step_exact(self, z, dt, draws):
        k = np.exp(-self.gamma * dt)
        s = _ou_step_scale(self.gamma, dt)
        return k * z + s * (draws @ self.sigma.T)

    def step_euler(self, z, dt, draws):
        return z - self.gamma * z * dt + np.sqrt(dt) * (draws @ self.sigma.T)

    def noise_std_at(self, t):
        """Std multiplier of the centered noise at time t from a zero start."""
        return _ou_step_scale(self.gamma, t)


class Model1D:
    """Scalar OU noise model (projection of the vector model)."""

    def __init__(self, forecast, gamma, sigma):
        self.forecast = forecast
        self.gamma = float(gamma)
        self.sigma = float(sigma)

    def step_mean(self, z, dt):
        return np.exp(-self.gamma * dt) * np.asarray(z)

    def step_var(self, z, dt):
        v = (_ou_step_scale(self.gamma, dt) * self.sigma) ** 2
        return np.full(np.shape(z), v) if np.ndim(z) else v

    def step_third(self, z, dt):
        mu = self.step_mean(z, dt)
        return mu ** 3 + 3.0 * mu * self.step_var(z, dt)

    def noise_std_at(self, t):
        return _ou_step_scale(self.gamma, t) * self.sigma


class CIRModel:
    """Squared sigma-whitened noise radius; a square-root diffusion.

    ``dR = (n_load - 2 gamma R) dt + 2 sqrt(R) dW``; exact conditional
    moments are used for the chain construction.
    """

    def __init__(self, n_load, gamma):
        self.n_load = int(n_load)
        self.gamma = float(gamma)

    def step_mean(self, r, dt):
        r = np.asarray(r, dtype=float)
        if self.gamma < 1e-14:
            return r + self.n_load * dt
        k = np.exp(-2.0 * self.gamma * dt)
        return r * k + self.n_load * (1.0 - k) / (2.0 * self.gamma)

    def step_var(self, r, dt):
        r = np.asarray(r, dtype=float)
        if self.gamma < 1e-14:
            return 4.0 * r * dt + 2.0 * self.n_load * dt * dt
        kap = 2.0 * self.gamma
        ek = np.exp(-kap * dt)
        theta = self.n_load / kap
        return r * 4.0 * ek * (1.0 - ek) / kap + theta * 4.0 * (1.0 - ek) ** 2 / (2.0 * kap)

    def _chi_params(self, r, dt):
        """Scale s2 and noncentrality lam of the one-step conditional law:
        next value = s2 * noncentral-chi-square(n_load, lam)."""
        r = np.asarray(r, dtype=float)
        if self.gamma < 1e-14:
            s2 = dt
            k2 = 1.0
        else:
            s2 = (1.0 - np.exp(-2.0 * self.gamma * dt)) / (2.0 * self.gamma)
            k2 = np.exp(-2.0 * self.gamma * dt)
        return s2, k2 * r / s2

    def step_third(self, r, dt):
        """Third raw conditional moment, from noncentral chi-square moments."""
        s2, lam = self._chi_params(r, dt)
        n = self.n_load
        m1 = n + lam
        m3c = 8.0 * (n + 3.0 * lam)
        v = 2.0 * (n + 2.0 * lam)
        return s2 ** 3 * (m3c + 3.0 * m1 * v + m1 ** 3)

    def noise_mean_at(self, r0, t):
        return self.step_mean(r0, t)

    def noise_std_at(self, r0, t):
        return np.sqrt(self.step_var(r0, t))


def project_eta(model, eta_load):
    """Scalar model for the demand projected on a load direction."""
    eta = np.asarray(eta_load, dtype=float).ravel()
    sig = float(np.linalg.norm(model.sigma.T @ eta))
    return Model1D(model.forecast.project(eta), model.gamma, sig)


def radial_model(model):
    return CIRModel(model.n_load, model.gamma)


class SeededPathStore:
    """Seed-per-step storage of OU noise paths.

    ``recover_slice(m)`` replays the recurrence from the start with the
    stored per-step seeds, so recovered slices equal the forward pass bit for
    bit while only one slice is ever held.
    """

    def __init__(self, model, times, n_paths, seed, z0=None, exact=True):
        self.model = model
        self.times = np.asarray(times, dtype=float).ravel()
        self.n_paths = int(n_paths)
        self.seed = int(seed)
        self.exact = bool(exact)
        self.z0 = np.zeros(model.n_load) if z0 is None else np.asarray(z0, dtype=float)
        root = np.random.SeedSequence(self.seed)
        self._children = root.spawn(self.times.size - 1)

    @property
    def n_steps(self):
        return self.times.size - 1

    def step_draws(self, m):
        gen = np.random.Generator(np.random.Philox(self._children[m]))
        return gen.standard_normal((self.n_paths, self.model.n_load))

    def _advance(self, z, m):
        dt = self.times[m + 1] - self.times[m]
        draws = self.step_draws(m)
        if self.exact:
            return self.model.step_exact(z, dt, draws)
        return self.model.step_euler(z, dt, draws)

    def recover_slice(self, m):
        """Centered noise at times[m] for all paths, by seeded replay."""
        z = np.broadcast_to(self.z0, (self.n_paths, self.model.n_load)).copy()
        for j in range(m):
            z = self._advance(z, j)
        return z

    def demand_slice(self, m):
        return self.model.forecast(self.times[m]) + self.recover_slice(m)

    def simulate_paths(self, keep_full=False):
        """Run forward; returns the terminal slice, or all slices if asked."""
        z = np.broadcast_to(self.z0, (self.n_paths, self.model.n_load)).copy()
        if keep_full:
            out = np.empty((self.times.size, self.n_paths, self.model.n_load))
            out[0] = z
        for m in range(self.n_steps):
            z = self._advance(z, m)
            if keep_full:
                out[m + 1] = z
        return out if keep_full else z


class Chain1D:
    """Time-homogeneous trinomial chain on a uniform 1-D grid."""

    def __init__(self, states, idx, prob):
        self.states = states
        self.idx = idx      # (n, 3) successor indices
        self.prob = prob    # (n, 3) probabilities

    @property
    def n_states(self):
        return self.states.size

    def apply(self, values):
        """One-step conditional expectation: values (n,...) -> (n,...)."""
        v = np.asarray(values)
        return (self.prob[:, 0].reshape((-1,) + (1,) * (v.ndim - 1)) * v[self.idx[:, 0]]
                + self.prob[:, 1].reshape((-1,) + (1,) * (v.ndim - 1)) * v[self.idx[:, 1]]
                + self.prob[:, 2].reshape((-1,) + (1,) * (v.ndim - 1)) * v[self.idx[:, 2]])

    def push(self, dist):
        """One-step marginal update of a distribution over states."""
        out = np.zeros_like(dist)
        for j in range(3):
            np.add.at(out, self.idx[:, j], dist * self.prob[:, j])
        return out

    def locate(self, y):
        """Bracketing indices and linear weights for arbitrary points."""
        g = self.states
        j = np.clip(np.searchsorted(g, y) - 1, 0, g.size - 2)
        wt = np.clip((np.asarray(y) - g[j]) / (g[j + 1] - g[j]), 0.0, 1.0)
        return j, wt

    def step_mean(self):
        return (self.prob * self.states[self.idx]).sum(axis=1)

    def step_var(self):
        m = self.step_mean()
        return (self.prob * self.states[self.idx] ** 2).sum(axis=1) - m * m


def _fit3(s0, s1, s2, mu, m2):
    """Probabilities on s0 <= s1 <= s2 with exact mean (when reachable) and
    the closest feasible second moment.

    The mean-feasible set is a segment in the probability simplex; the
    second moment is affine along it, so the fit is a scalar clamp.
    """
    if s2 - s0 < 1e-300:
        return 1.0, 0.0, 0.0
    mu = min(max(mu, s0), s2)
    w = (mu - s0) / (s2 - s0)
    if s1 - s0 < 1e-300 or s2 - s1 < 1e-300:
        return 1.0 - w, 0.0, w
    # p(t) = (1-w, 0, w) + t (s1-s2, s2-s0, s0-s1) keeps sum and mean.
    t_max = min((1.0 - w) / (s2 - s1), w / (s1 - s0))
    m_top = (1.0 - w) * s0 * s0 + w * s2 * s2
    slope = (s1 - s0) * (s2 - s0) * (s2 - s1)
    t = min(max((m_top - m2) / slope, 0.0), t_max)
    return 1.0 - w + t * (s1 - s2), t * (s2 - s0), w + t * (s0 - s1)


def _best_support(svals, c, mu, m2, m3, extra=6):
    """Pick (lo, hi) around center c so that two moments match exactly and
    the third raw moment is as close as possible; return (lo, hi, probs).

    Support values ``svals`` are increasing but need not be equispaced (the
    radius chain matches moments of the squared variable).  Falls back to a
    clamped two-moment fit on the widest window when nothing is feasible.
    """
    n = svals.size
    lo0, hi0 = max(c - 1, 0), min(c + 1, n - 1)
    while lo0 > 0 or hi0 < n - 1:
        if svals[lo0] <= mu <= svals[hi0]:
            w = (mu - svals[lo0]) / (svals[hi0] - svals[lo0])
            if (1 - w) * svals[lo0] ** 2 + w * svals[hi0] ** 2 >= m2:
                break
        lo0, hi0 = max(lo0 - 1, 0), min(hi0 + 1, n - 1)
    pad = (hi0 - lo0) + extra
    los = np.arange(max(c - pad, 0), c)
    his = np.arange(c + 1, min(c + pad, n - 1) + 1)
    if los.size == 0 or his.size == 0:
        return lo0, hi0, _fit3(svals[lo0], svals[c], svals[hi0], mu, m2)
    sl = svals[los][:, None]
    sh = svals[his][None, :]
    sc = svals[c]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = (mu - sl) / (sh - sl)
        m_top = (1.0 - w) * sl * sl + w * sh * sh
        t = (m_top - m2) / ((sc - sl) * (sh - sl) * (sh - sc))
        t_max = np.minimum((1.0 - w) / (sh - sc), w / (sc - sl))
        ok = (sl <= mu) & (mu <= sh) & (t >= 0.0) & (t <= t_max)
    if not ok.any():
        return lo0, hi0, _fit3(svals[lo0], svals[c], svals[hi0], mu, m2)
    p0 = 1.0 - w + t * (sc - sh)
    p1 = t * (sh - sl)
    p2 = w + t * (sl - sc)
    m3got = p0 * sl ** 3 + p1 * sc ** 3 + p2 * sh ** 3
    err = np.where(ok, np.abs(m3got - m3), np.inf)
    # Prefer coprime leg lengths outright: constant strides trap the chain
    # on a sublattice and its marginal grows comb artifacts.
    cop = np.gcd((c - los)[:, None], (his - c)[None, :]) == 1
    if (ok & cop).any():
        err = np.where(cop, err, np.inf)
    i, j = np.unravel_index(np.argmin(err), err.shape)
    return int(los[i]), int(his[j]), (p0[i, j], p1[i, j], p2[i, j])


def build_chain(states, mean, var, third=None):
    """Local moment-matched trinomial chain on a uniform grid.

    ``mean``/``var`` are the one-step conditional moments per grid state.
    Both match exactly wherever a three-point stencil fits inside the grid;
    when the third raw moment is supplied, the stencil asymmetry is chosen
    to track it as well.  On boundary states the mean is still matched
    exactly whenever it lies inside the grid and the variance is clamped to
    the nearest feasible value.
    """
    g = np.asarray(states, dtype=float)
    n = g.size
    h = g[1] - g[0]
    if n < 3 or np.max(np.abs(np.diff(g) - h)) > 1e-9 * max(h, 1.0):
        raise ValueError("need a uniform grid with at least 3 states")
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    if third is None:
        third = mean ** 3 + 3.0 * mean * var
    third = np.asarray(third, dtype=float)
    idx = np.zeros((n, 3), dtype=int)
    prob = np.zeros((n, 3))
    for i in range(n):
        c = int(np.clip(np.rint((mean[i] - g[0]) / h), 0, n - 1))
        mu2 = max(var[i], 0.0) + mean[i] * mean[i]
        lo, hi, p = _best_support(g, c, mean[i], mu2, third[i])
        idx[i] = (lo, c, hi)
        prob[i] = p
    return Chain1D(g, idx, prob)


def build_radius_chain(states, model, dt):
    """Trinomial chain on a uniform radius grid (clipped at 0).

    Support points are radius states but the matched moments are those of
    the squared radius, which has closed-form conditional moments (see
    CIRModel).  Matching in the squared variable keeps the expected squared
    radius exact under iteration while the grid resolves the law near zero,
    where the squared variable's density blows up.
    """
    y = np.asarray(states, dtype=float)
    n = y.size
    if y[0] < 0.0 or n < 3:
        raise ValueError("radius grid must be nonnegative with >= 3 states")
    s = y * y
    mu = model.step_mean(s, dt)
    m2 = model.step_var(s, dt) + mu * mu
    m3 = model.step_third(s, dt)
    idx = np.zeros((n, 3), dtype=int)
    prob = np.zeros((n, 3))
    for i in range(n):
        c = int(np.clip(np.searchsorted(s, mu[i]), 1, n - 1))
        if mu[i] - s[c - 1] < s[c] - mu[i]:
            c -= 1
        lo, hi, p = _best_support(s, c, mu[i], m2[i], m3[i])
        idx[i] = (lo, c, hi)
        prob[i] = p
    return Chain1D(y, idx, prob)
