"""Generator switching structure: levels, delayed transitions, mode space.

A generator holds a strictly increasing list of set-point levels and a set of
directed transitions between them.  A transition ordered at time ``tau`` holds
the old level for ``plateau`` minutes, ramps linearly until ``delay`` minutes,
and the generator is unavailable for new orders throughout.  An operation mode
assigns every generator either a level or an in-flight transition; the mode
space is the product over generators.

Progressions are carried as per-generator vectors (entry ``k`` is the elapsed
time of generator ``k``'s transition, zero when stationary).  The flat
progression coordinates used by the sampling scheme enumerate every
transition of every generator once; ``iota_offsets`` fixes that ordering.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = ["Transition", "GeneratorSpec", "SwitchNetwork", "ramp_value"]

_COMPLETE_TOL = 1e-9


class Transition:
    """Directed level change with a plateau-then-linear ramp."""

    def __init__(self, frm, to, plateau, delay, cost):
        if frm == to:
            raise ValueError("transition must change level")
        if not (0.0 <= plateau < delay):
            raise ValueError("need 0 <= plateau < delay")
        if cost < 0.0:
            raise ValueError("switching cost must be nonnegative")
        self.frm = int(frm)
        self.to = int(to)
        self.plateau = float(plateau)
        self.delay = float(delay)
        self.cost = float(cost)

    def __repr__(self):
        return "Transition(%d->%d, plateau=%g, delay=%g, cost=%g)" % (
            self.frm, self.to, self.plateau, self.delay, self.cost)


class GeneratorSpec:
    """Levels plus the directed transitions between them."""

    def __init__(self, levels, transitions, name=""):
        self.levels = tuple(float(v) for v in levels)
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("levels must be strictly increasing")
        trs = sorted(transitions, key=lambda t: (t.frm, t.to))
        seen = set()
        for t in trs:
            if not (0 <= t.frm < len(self.levels) and 0 <= t.to < len(self.levels)):
                raise ValueError("transition endpoint out of range")
            if (t.frm, t.to) in seen:
                raise ValueError("duplicate transition %d->%d" % (t.frm, t.to))
            seen.add((t.frm, t.to))
        self.transitions = trs
        self.name = name

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def n_entries(self):
        return len(self.levels) + len(self.transitions)


def ramp_value(gen, tidx, s):
    """Production of one transition at elapsed time ``s`` (array ok).

    Old level until the plateau ends, then linear; the new level is reached
    exactly at the full delay and held beyond it.
    """
    t = gen.transitions[tidx]
    v0, v1 = gen.levels[t.frm], gen.levels[t.to]
    s = np.asarray(s, dtype=float)
    u = np.clip((s - t.plateau) / (t.delay - t.plateau), 0.0, 1.0)
    out = v0 + u * (v1 - v0)
    return float(out) if out.ndim == 0 else out


class SwitchNetwork:
    """Mode space and per-mode tables for a set of generators."""

    def __init__(self, gens):
        self.gens = list(gens)
        ng = len(self.gens)
        self.n_gen = ng

        # Flat progression coordinates: one per (generator, transition).
        self.iota_offsets = np.concatenate(
            [[0], np.cumsum([len(g.transitions) for g in self.gens])]).astype(int)
        self.d_h = int(self.iota_offsets[-1])
        self.coord_delay = np.array(
            [t.delay for g in self.gens for t in g.transitions], dtype=float)
        self.coord_gen = np.array(
            [k for k, g in enumerate(self.gens) for _ in g.transitions], dtype=int)

        self.modes = [tuple(m) for m in itertools.product(
            *[range(g.n_entries) for g in self.gens])]
        self.mode_index = {m: i for i, m in enumerate(self.modes)}
        nm = len(self.modes)

        self.trans_mask = np.zeros((nm, ng), dtype=bool)
        self.delta = np.zeros((nm, ng))
        self.plateau = np.zeros((nm, ng))
        self.level_from = np.zeros((nm, ng))
        self.level_to = np.zeros((nm, ng))
        self.mode_coord = -np.ones((nm, ng), dtype=int)  # flat coord per transiting gen

        for i, mode in enumerate(self.modes):
            for k, e in enumerate(mode):
                g = self.gens[k]
                if e < g.n_levels:
                    self.level_from[i, k] = g.levels[e]
                    self.level_to[i, k] = g.levels[e]
                else:
                    t = g.transitions[e - g.n_levels]
                    self.trans_mask[i, k] = True
                    self.delta[i, k] = t.delay
                    self.plateau[i, k] = t.plateau
                    self.level_from[i, k] = g.levels[t.frm]
                    self.level_to[i, k] = g.levels[t.to]
                    self.mode_coord[i, k] = self.iota_offsets[k] + (e - g.n_levels)

        self.n_transiting = self.trans_mask.sum(axis=1).astype(int)
        self.sigma_total = self.delta.sum(axis=1)          # total progression budget
        self.psi_max = self.delta.max(axis=1)              # worst-case residual at start
        self.stationary = self.n_transiting == 0

        # Completion lookups: per mode, bitmask over its transiting generators
        # (in generator order) of which ones finish -> resulting mode index.
        self.trans_gens = [np.where(self.trans_mask[i])[0] for i in range(nm)]
        self.complete_lut = []
        for i, mode in enumerate(self.modes):
            tg = self.trans_gens[i]
            lut = np.empty(1 << tg.size, dtype=int)
            for bits in range(1 << tg.size):
                nxt = list(mode)
                for j, k in enumerate(tg):
                    if bits >> j & 1:
                        g = self.gens[k]
                        nxt[k] = g.transitions[mode[k] - g.n_levels].to
                lut[bits] = self.mode_index[tuple(nxt)]
            self.complete_lut.append(lut)

        # Admissible switch orders per mode: stationary generators only.
        self.switches = []
        for i, mode in enumerate(self.modes):
            opts = []
            for k, e in enumerate(mode):
                g = self.gens[k]
                if e >= g.n_levels:
                    continue
                for j, t in enumerate(g.transitions):
                    if t.frm == e:
                        nxt = list(mode)
                        nxt[k] = g.n_levels + j
                        opts.append({
                            "gen": k,
                            "tidx": j,
                            "coord": int(self.iota_offsets[k] + j),
                            "cost": t.cost,
                            "target": self.mode_index[tuple(nxt)],
                        })
            self.switches.append(opts)

    @property
    def n_modes(self):
        return len(self.modes)

    def mode_label(self, idx):
        parts = []
        for k, e in enumerate(self.modes[idx]):
            g = self.gens[k]
            if e < g.n_levels:
                parts.append(str(e))
            else:
                t = g.transitions[e - g.n_levels]
                parts.append("%d>%d" % (t.frm, t.to))
        return "|".join(parts)

    def gen_box(self):
        """Componentwise production range over all levels (ramps stay inside)."""
        lo = np.array([g.levels[0] for g in self.gens])
        hi = np.array([g.levels[-1] for g in self.gens])
        return lo, hi

    def delta_min(self):
        return float(min(t.delay for g in self.gens for t in g.transitions))

    def switch_count_bound(self, horizon):
        """Hard cap on the number of orders any control can issue."""
        return self.n_gen * horizon / self.delta_min()

    # -- progression mechanics ---------------------------------------------

    def production(self, mode_idx, r):
        """Production vector(s) at progression ``r``; r is (n_gen,) or (M, n_gen)."""
        r = np.asarray(r, dtype=float)
        v0 = self.level_from[mode_idx]
        v1 = self.level_to[mode_idx]
        dl = self.delta[mode_idx]
        pl = self.plateau[mode_idx]
        span = np.where(dl > 0.0, dl - pl, 1.0)
        u = np.clip((r - pl) / span, 0.0, 1.0)
        u = np.where(dl > 0.0, u, 0.0)
        return v0 + u * (v1 - v0)

    def progression_sum(self, mode_idx, r):
        r = np.asarray(r, dtype=float)
        return (r * self.trans_mask[mode_idx]).sum(axis=-1)

    def residual(self, mode_idx, r):
        """Largest remaining delay over transiting generators (0 if none)."""
        r = np.asarray(r, dtype=float)
        rem = (self.delta[mode_idx] - r) * self.trans_mask[mode_idx]
        out = np.maximum(rem, 0.0).max(axis=-1) if rem.ndim else max(rem, 0.0)
        return out

    def flow(self, mode_idx, r, dt):
        """Uncontrolled evolution over one step: advance, complete at delay.

        ``r`` is a single (n_gen,) vector.  Returns (mode_idx', r').
        """
        r = np.array(r, dtype=float)
        mask = self.trans_mask[mode_idx]
        r[mask] += dt
        done = mask & (r >= self.delta[mode_idx] - _COMPLETE_TOL)
        tg = self.trans_gens[mode_idx]
        bits = 0
        for j, k in enumerate(tg):
            if done[k]:
                bits |= 1 << j
        nxt = int(self.complete_lut[mode_idx][bits])
        r[~self.trans_mask[nxt]] = 0.0
        return nxt, r

    def flow_bulk(self, mode_idx, R, dt):
        """Vectorized flow for R of shape (M, n_gen): (mode indices, R')."""
        R = np.array(R, dtype=float)
        mask = self.trans_mask[mode_idx]
        R[:, mask] += dt
        done = R[:, mask] >= self.delta[mode_idx][mask] - _COMPLETE_TOL
        bits = np.zeros(R.shape[0], dtype=int)
        for j in range(done.shape[1]):
            bits |= done[:, j].astype(int) << j
        nxt = self.complete_lut[mode_idx][bits]
        keep = self.trans_mask[nxt]          # (M, n_gen)
        R *= keep
        return nxt, R

    def mode_progression_view(self, mode_idx, flat):
        """Per-generator progression from flat coordinates (M, d_h) -> (M, n_gen)."""
        flat = np.atleast_2d(np.asarray(flat, dtype=float))
        out = np.zeros((flat.shape[0], self.n_gen))
        coords = self.mode_coord[mode_idx]
        for k in range(self.n_gen):
            if coords[k] >= 0:
                out[:, k] = flat[:, coords[k]]
        return out
