"""Orthonormal function families on [0, T] and sampling of their Ito integrals.

Two families are supported:

* piecewise-constant: h_i = 1_{(s_{i-1}, s_i]} / sqrt(delta_i) on a strictly
  increasing grid 0 = s_0 < ... < s_M = T (half-open cells, so t = s_u belongs
  to cell u);
* Legendre: h_i(s) = sqrt((2i-1)/T) * L_{i-1}(2s/T - 1), L_k the Legendre
  polynomial on [-1, 1].

The Gram tail G(t) = int_t^T h_i h_k ds drives the Dyson conditional
expectation.  For the piecewise family it is diagonal with entries
0 (i < u), (s_u - t)/delta_u (i = u), 1 (i > u); for the Legendre family the
integrand of each entry is a polynomial of degree <= 2(M-1), so a fixed
Gauss-Legendre rule with M nodes integrates it exactly.

BrownianDriver wraps the counter-based Philox generator: streams are keyed by
(seed, stream, *tags) through SeedSequence, so any (seed, stream, tag) triple
reproduces its draws bit-for-bit regardless of what else was sampled.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import eval_legendre, roots_legendre

from .errors import ConfigError, ValidationError

# Paths are generated in fixed-size blocks so that a given (seed, stream, tag)
# yields the same array regardless of platform threading; numpy reductions and
# the Philox bit stream are already deterministic, the block size just bounds
# peak memory.
_PATH_BLOCK = 1 << 16


@dataclass(frozen=True)
class PiecewiseConstantBasis:
    grid: tuple

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 1 or g.size < 2:
            raise ValidationError("grid needs at least two points")
        if g[0] != 0.0 or np.any(np.diff(g) <= 0):
            raise ValidationError("grid must be strictly increasing from 0")
        object.__setattr__(self, "grid", tuple(float(x) for x in g))

    @classmethod
    def uniform(cls, horizon, m):
        return cls(tuple(np.linspace(0.0, float(horizon), m + 1)))

    @property
    def horizon(self):
        return self.grid[-1]

    @property
    def size(self):
        return len(self.grid) - 1

    @property
    def widths(self):
        return np.diff(np.asarray(self.grid))


@dataclass(frozen=True)
class LegendreBasis:
    horizon: float
    size: int

    def __post_init__(self):
        if self.horizon <= 0 or self.size < 1:
            raise ValidationError("need horizon > 0 and size >= 1")


@dataclass(frozen=True)
class BrownianDriver:
    """Counter-based Gaussian source; `steps_per_unit_time` is the fine-grid
    resolution used for non-piecewise Ito sums."""

    seed: int
    stream: int = 0
    steps_per_unit_time: int = 2048

    def generator(self, *tags):
        return np.random.Generator(
            np.random.Philox(np.random.SeedSequence((self.seed, self.stream) + tags))
        )


def cell_index(spec, t):
    """Cell u with t in (s_{u-1}, s_u], for t in (0, horizon]."""
    grid = np.asarray(spec.grid)
    if not 0.0 < t <= spec.horizon:
        raise ValidationError(f"t={t} outside (0, {spec.horizon}]")
    return int(np.searchsorted(grid, t, side="left"))


def basis_eval(spec, i, s):
    """Value h_i(s); i is 1-based. Piecewise cells are half-open (s_{i-1}, s_i]."""
    if not 1 <= i <= spec.size:
        raise ValidationError(f"basis index {i} outside 1..{spec.size}")
    if isinstance(spec, PiecewiseConstantBasis):
        s = np.asarray(s, dtype=float)
        lo, hi = spec.grid[i - 1], spec.grid[i]
        val = ((s > lo) & (s <= hi)) / np.sqrt(spec.widths[i - 1])
        return float(val) if val.ndim == 0 else val
    x = 2.0 * np.asarray(s, dtype=float) / spec.horizon - 1.0
    val = np.sqrt((2 * i - 1) / spec.horizon) * eval_legendre(i - 1, x)
    return float(val) if np.ndim(val) == 0 else val


def gram_tail(spec, t):
    """G_{ik}(t) = int_t^T h_i h_k ds, an M x M symmetric PSD matrix."""
    if not 0.0 <= t <= spec.horizon:
        raise ValidationError(f"t={t} outside [0, {spec.horizon}]")
    m = spec.size
    if isinstance(spec, PiecewiseConstantBasis):
        if t == 0.0:
            return np.eye(m)
        u = cell_index(spec, t)
        diag = np.ones(m)
        diag[: u - 1] = 0.0
        diag[u - 1] = (spec.grid[u] - t) / spec.widths[u - 1]
        return np.diag(diag)
    if t == spec.horizon:
        return np.zeros((m, m))
    # Polynomial integrand of degree <= 2(M-1): an M-node rule is exact.
    x, w = roots_legendre(m)
    s = 0.5 * (spec.horizon - t) * (x + 1.0) + t
    w = 0.5 * (spec.horizon - t) * w
    vals = np.array([basis_eval(spec, i, s) for i in range(1, m + 1)])
    g = (vals * w) @ vals.T
    return 0.5 * (g + g.T)


def sample_integrals(spec, driver, times, n_paths, d=1, tags=()):
    """Sample I^t = (int_0^t h_1 dB^1, ..., int_0^t h_M dB^d) jointly over times.

    Returns an array of shape (len(times), n_paths, M*d) in the flat j-major
    layout.  All requested times share one Brownian path per path index.
    Piecewise-constant bases are sampled exactly from Gaussian increments;
    the Legendre family uses left-point Ito sums on the driver's fine grid
    (requested times are inserted as grid points).
    """
    times = [float(t) for t in times]
    if any(t < 0 or t > spec.horizon for t in times):
        raise ValidationError(f"times must lie in [0, {spec.horizon}]")
    if sorted(times) != times:
        raise ValidationError("times must be sorted ascending")
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    m = spec.size

    if isinstance(spec, PiecewiseConstantBasis):
        pts = np.union1d(np.asarray(spec.grid), np.asarray(times))
        pts = pts[pts <= spec.horizon]
        if pts[0] != 0.0:
            pts = np.concatenate([[0.0], pts])
    else:
        dt = 1.0 / driver.steps_per_unit_time
        pos = [t for t in times if t > 0]
        if len(pos) >= 1:
            gaps = np.diff(np.concatenate([[0.0], pos]))
            gaps = gaps[gaps > 0]
            if gaps.size and dt > gaps.min():
                raise ConfigError(
                    f"fine grid step {dt} coarser than min time spacing {gaps.min()}"
                )
        n = int(np.ceil(spec.horizon * driver.steps_per_unit_time))
        pts = np.union1d(np.linspace(0.0, spec.horizon, n + 1), np.asarray(times))

    dt = np.diff(pts)  # (n_int,)
    n_int = dt.size
    sqdt = np.sqrt(dt)

    if isinstance(spec, PiecewiseConstantBasis):
        grid = np.asarray(spec.grid)
        inv_sqw = 1.0 / np.sqrt(spec.widths)
        # I_i^t = (B_{min(s_i, t)} - B_{min(s_{i-1}, t)}) / sqrt(delta_i)
        lo = np.minimum.outer(grid[:-1], np.asarray(times))  # (m, n_t)
        hi = np.minimum.outer(grid[1:], np.asarray(times))
        lo_ix = np.searchsorted(pts, lo)
        hi_ix = np.searchsorted(pts, hi)
    else:
        hvals = np.array(
            [basis_eval(spec, i, pts[:-1]) for i in range(1, m + 1)]
        )  # left-point values, (m, n_int)
        t_ix = np.searchsorted(pts, np.asarray(times))

    gen = driver.generator(*tags)
    out = np.empty((len(times), n_paths, m * d))
    done = 0
    while done < n_paths:
        nb = min(_PATH_BLOCK, n_paths - done)
        z = gen.standard_normal((nb, n_int, d))
        dB = z * sqdt[None, :, None]
        B = np.concatenate(
            [np.zeros((nb, 1, d)), np.cumsum(dB, axis=1)], axis=1
        )  # (nb, n_pts, d)
        for ti in range(len(times)):
            if isinstance(spec, PiecewiseConstantBasis):
                vals = (B[:, hi_ix[:, ti], :] - B[:, lo_ix[:, ti], :]) * inv_sqw[
                    None, :, None
                ]  # (nb, m, d)
            else:
                k = t_ix[ti]
                if k == 0:
                    vals = np.zeros((nb, m, d))
                else:
                    vals = np.einsum("pnj,in->pij", dB[:, :k, :], hvals[:, :k])
            out[ti, done : done + nb] = vals.transpose(0, 2, 1).reshape(nb, m * d)
        done += nb
    return out
