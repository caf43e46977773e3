"""Conditional expectations E[Phi_a | F_t] of chaos basis elements.

Two routes, cross-validated against each other:

* closed form for the piecewise-constant basis: with t in cell u and
  tau = (t - s_{u-1}) / delta_u,

      E[Phi_a | F_t] = prod_j [ prod_{i<u} H_{a_i^j}(Z_i^j) ]
                       * tau^{a_u^j / 2} H_{a_u^j}(Ztilde_u^j),

  where Z_i^j are the normalized full-cell increments and Ztilde_u^j the
  normalized partial increment of the running cell; the value is 0 whenever
  any a_i^j > 0 for i > u;

* the Dyson series for any basis: with G = gram_tail(spec, t) expanded
  block-diagonally over components and A_t = sum_{i,k} G_ik d_i d_k acting on
  Hermite monomials via H_n' = H_{n-1},

      E[Phi_a | F_t] = sum_{n=0}^{floor(|a|/2)} (1 / (2^n n!)) (A_t)^n f_a (I^t).

The series terminates because each application of A_t lowers total degree
by two.  The symbolic expansion is run once per (a, t) and the resulting
polynomial combination is evaluated across all paths.
"""

from dataclasses import dataclass

import numpy as np

from .bases import cell_index
from .errors import ValidationError
from .hermite import hermite_upto


@dataclass
class HermitePolyCombo:
    """Sparse linear combination sum_b c_b * prod_e H_{b_e}(x_e)."""

    terms: dict  # exponent tuple -> coefficient

    def scaled(self, c):
        return HermitePolyCombo({b: c * v for b, v in self.terms.items()})

    def add_into(self, other, c=1.0):
        for b, v in other.terms.items():
            self.terms[b] = self.terms.get(b, 0.0) + c * v


def dyson_operator_apply(f, g):
    """One application of A = sum_{i,k} G_ik d_i d_k to a Hermite combo.

    On a monomial with exponents b, the pair (i, k), i != k, contributes
    G_ik * (b with b_i - 1, b_k - 1) twice (once per ordering), and i = k
    contributes G_ii * (b with b_i - 2); exponents driven negative kill the
    term.
    """
    g = np.asarray(g)
    nz = [(i, k) for i in range(g.shape[0]) for k in range(i, g.shape[1]) if g[i, k] != 0.0]
    out = {}
    for b, c in f.terms.items():
        for i, k in nz:
            mult = g[i, k] if i == k else 2.0 * g[i, k]
            if i == k:
                if b[i] < 2:
                    continue
                nb = list(b)
                nb[i] -= 2
            else:
                if b[i] < 1 or b[k] < 1:
                    continue
                nb = list(b)
                nb[i] -= 1
                nb[k] -= 1
            nb = tuple(nb)
            out[nb] = out.get(nb, 0.0) + c * mult
    return HermitePolyCombo(out)


def dyson_combo(a, g):
    """The full (terminating) Dyson series of Phi_a as one Hermite combo."""
    total = HermitePolyCombo({tuple(a.exponents): 1.0})
    current = HermitePolyCombo(dict(total.terms))
    fact = 1.0
    for n in range(1, a.order // 2 + 1):
        current = dyson_operator_apply(current, g)
        if not current.terms:
            break
        fact *= 2.0 * n
        total.add_into(current, 1.0 / fact)
    return total


def evaluate_combo(combo, x):
    """Evaluate a Hermite combo at x with basis positions on the last axis."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1])
    if not combo.terms:
        return out if out.ndim else 0.0
    n_max = max(max(b) for b in combo.terms)
    table = hermite_upto(n_max, x)  # (n_max+1, ..., n_pos)
    for b, c in combo.terms.items():
        term = np.full(x.shape[:-1], c)
        for pos, n in enumerate(b):
            if n > 0:
                term = term * table[n][..., pos]
        out += term
    return out if out.ndim else float(out)


def expand_gram(g, d):
    """Block-diagonal expansion of an M x M Gram matrix to M*d positions."""
    m = g.shape[0]
    full = np.zeros((m * d, m * d))
    for j in range(d):
        full[j * m : (j + 1) * m, j * m : (j + 1) * m] = g
    return full


def dyson_cond_exp(a, t, integrals, g):
    """E[Phi_a | F_t] via the Dyson series; g must be gram_tail at t, expanded
    to the M*d layout when d > 1."""
    del t  # the time dependence is entirely inside g and integrals
    return evaluate_combo(dyson_combo(a, g), integrals)


def cond_exp_piecewise(spec, a, t, increments, d=1):
    """Closed-form E[Phi_a | F_t] for the piecewise-constant basis.

    `increments` has the flat M*d layout on its last axis and holds
    (B_{s_i} - B_{s_{i-1}})/sqrt(delta_i) for cells i < u and
    (B_t - B_{s_{u-1}})/sqrt(t - s_{u-1}) at the running cell u; entries for
    i > u are ignored.
    """
    u = cell_index(spec, t)
    m = spec.size
    z = np.asarray(increments, dtype=float)
    if z.shape[-1] != m * d:
        raise ValidationError(f"increments last axis {z.shape[-1]} != M*d = {m * d}")
    if len(a) != m * d:
        raise ValidationError(f"index length {len(a)} != M*d = {m * d}")
    tau = (t - spec.grid[u - 1]) / spec.widths[u - 1]

    scalar = z.ndim == 1
    exps = a.exponents
    for e, n in enumerate(exps):
        if n > 0 and (e % m) + 1 > u:
            out = np.zeros(z.shape[:-1])
            return 0.0 if scalar else out

    out = np.ones(z.shape[:-1])
    n_max = max(exps)
    table = None
    pow_u = 0
    for e, n in enumerate(exps):
        if n == 0:
            continue
        if table is None:
            table = hermite_upto(n_max, z)
        out = out * table[n][..., e]
        if (e % m) + 1 == u:
            pow_u += n
    out = out * tau ** (0.5 * pow_u)
    return float(out) if scalar else out


def piecewise_features(spec, indices, t, z, d=1):
    """Matrix of E[Phi_a | F_t] values for many indices at once.

    z: (n_paths, M*d) normalized increments as in cond_exp_piecewise.
    Returns (n_paths, len(indices)); columns of indices annihilated at t
    (some a_i^j > 0 with i > u) are exact zeros.
    """
    u = cell_index(spec, t)
    m = spec.size
    z = np.atleast_2d(np.asarray(z, dtype=float))
    tau = (t - spec.grid[u - 1]) / spec.widths[u - 1]
    n_max = max(max(a.exponents) for a in indices)
    table = hermite_upto(n_max, z)  # (n_max+1, n_paths, m*d)
    out = np.zeros((z.shape[0], len(indices)))
    for col, a in enumerate(indices):
        pow_u = 0
        dead = False
        acc = None
        for e, n in enumerate(a.exponents):
            if n == 0:
                continue
            i = (e % m) + 1
            if i > u:
                dead = True
                break
            acc = table[n][:, e] if acc is None else acc * table[n][:, e]
            if i == u:
                pow_u += n
        if not dead:
            out[:, col] = acc * tau ** (0.5 * pow_u)
    return out


def dyson_features(indices, g, integrals):
    """Like piecewise_features but via the Dyson series (any basis).

    g: Gram tail already expanded to the M*d layout; integrals: (n_paths, M*d).
    """
    x = np.atleast_2d(np.asarray(integrals, dtype=float))
    out = np.empty((x.shape[0], len(indices)))
    combos = [dyson_combo(a, g) for a in indices]
    n_max = max(
        (max(b) for c in combos for b in c.terms if c.terms), default=0
    )
    table = hermite_upto(max(n_max, 1), x)
    for col, combo in enumerate(combos):
        acc = np.zeros(x.shape[0])
        for b, cf in combo.terms.items():
            term = np.full(x.shape[0], cf)
            for pos, n in enumerate(b):
                if n > 0:
                    term = term * table[n][:, pos]
            acc += term
        out[:, col] = acc
    return out
