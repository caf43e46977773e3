"""European call pricing under the chaos model.

Two engines:

* Monte Carlo on an offline feature block, optionally with one or two
  control variates, both zero-mean by construction:
      X_1 = S_T - S_0,          beta = Cov(Y, X_1) / Var(X_1),
      X_2 = S_T^2 - E[S_T^2]    (closed-form second moment),
  with (beta_1, beta_2) = Sigma_X^{-1} Sigma_YX in the two-variate case; the
  betas are estimated on an independent sample and treated as constants, so
  the CV estimator stays unbiased and the calibration gradient is exact;

* Gauss-Hermite tensor quadrature for maturities in an early cell: with T in
  cell u only u*d Gaussian coordinates enter S_T, so the price is a
  u*d-dimensional integral of (S_0 + g_theta(z) - K)_+ against the standard
  normal density, done with the probabilists' rule (weights sum to 1).

Prices are deterministic functions of (seed, stream, tag); reductions use
numpy's fixed-order pairwise summation on single arrays, so results are
bit-stable across BLAS thread settings (covered by a determinism test).
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .bases import PiecewiseConstantBasis, cell_index
from .conditional import piecewise_features
from .errors import ConfigError, ValidationError
from .model import sample_features, second_moment, terminal_values

QUAD_DIM_CAP = 4


@dataclass(frozen=True)
class PricingMethod:
    kind: str  # "mc" | "quad"
    n_paths: int = 100_000
    cv_degree: int = 2
    beta_samples: int = 10_000
    n_nodes: int = 40

    def __post_init__(self):
        if self.kind not in ("mc", "quad"):
            raise ValidationError(f"unknown pricing method {self.kind!r}")
        if self.cv_degree not in (0, 1, 2):
            raise ValidationError("cv_degree must be 0, 1, or 2")
        if self.n_paths < 1 or self.beta_samples < 1 or not 1 <= self.n_nodes <= 128:
            raise ValidationError("invalid pricing-method sizes")


@dataclass(frozen=True)
class PricingSchedule:
    """Per-maturity engine choice with a default fallback."""

    default: PricingMethod = PricingMethod("mc")
    entries: tuple = ()  # ((maturity, PricingMethod), ...)

    def for_maturity(self, t):
        for mat, method in self.entries:
            if abs(mat - t) < 1e-9:
                return method
        return self.default


@dataclass(frozen=True)
class CvState:
    degree: int
    beta: np.ndarray
    sigma_x: np.ndarray
    sigma_yx: np.ndarray
    r_squared: float
    stream_tag: tuple


def gauss_hermite_rule(n):
    """Nodes/weights with sum w_m p(z_m) = E[p(Z)], Z ~ N(0,1); weights sum 1."""
    if not 1 <= n <= 128:
        raise ValidationError(f"node count {n} outside [1, 128]")
    z, w = hermegauss(n)
    return z, w / np.sqrt(2.0 * np.pi)


def quad_nodes_features(model, t, n):
    """Tensor-product quadrature nodes embedded as feature rows.

    Returns (weights, features) with features shaped (n^(u*d), n_indices);
    reusable across strikes and calibration iterations since nodes do not
    depend on the coefficients.
    """
    if not isinstance(model.basis, PiecewiseConstantBasis):
        raise ConfigError("quadrature pricing needs the piecewise-constant basis")
    u = cell_index(model.basis, t)
    dims = u * model.d
    if dims > QUAD_DIM_CAP:
        raise ConfigError(
            f"active dimension u*d = {dims} exceeds quadrature cap {QUAD_DIM_CAP}"
        )
    z, w = gauss_hermite_rule(n)
    grids = np.meshgrid(*([z] * dims), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)  # (n^dims, dims)
    wgrids = np.meshgrid(*([w] * dims), indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    # scatter node coordinates into the flat M*d layout (cells 1..u per component)
    zfull = np.zeros((pts.shape[0], model.m * model.d))
    col = 0
    for j in range(model.d):
        for i in range(u):
            zfull[:, j * model.m + i] = pts[:, col]
            col += 1
    feats = piecewise_features(model.basis, model.indices, t, zfull, model.d)
    return weights, feats


def quad_call_price(model, t, k, n):
    """Gauss-Hermite tensor price of (S_0 + g_theta(z) - K)_+."""
    weights, feats = quad_nodes_features(model, t, n)
    s = model.s0 + feats @ model.coefficients
    return float(weights @ np.maximum(s - k, 0.0))


def estimate_cv(model, block, k, degree, driver, beta_samples=10_000, tags=()):
    """Estimate control-variate coefficients on an independent sample.

    Degenerate Sigma_X (e.g. theta = 0) degrades to degree 0 with a warning.
    """
    if degree not in (1, 2):
        raise ValidationError("cv degree must be 1 or 2 when estimating")
    est_block = sample_features(model, block.maturity, beta_samples, driver, tags=tags)
    s = terminal_values(model, est_block)
    y = np.maximum(s - k, 0.0)
    xs = [s - model.s0]
    if degree == 2:
        xs.append(s**2 - second_moment(model, block.maturity))
    x = np.stack(xs, axis=1)
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    sigma_x = xc.T @ xc / (len(y) - 1)
    sigma_yx = xc.T @ yc / (len(y) - 1)
    # scale-free singularity test on the correlation structure
    dg = np.sqrt(np.diag(sigma_x))
    bad = (dg < 1e-12 * max(1.0, model.s0)).any()
    if not bad:
        corr = sigma_x / np.outer(dg, dg)
        bad = np.linalg.cond(corr) > 1e10
    if bad:
        warnings.warn(
            "control-variate covariance is singular; degrading to degree 0",
            RuntimeWarning,
        )
        return CvState(0, np.zeros(0), sigma_x, sigma_yx, 0.0, tuple(tags))
    beta = np.linalg.solve(sigma_x, sigma_yx)
    var_y = float(yc @ yc / (len(y) - 1))
    r2 = float(sigma_yx @ beta / var_y) if var_y > 0 else 0.0
    return CvState(degree, beta, sigma_x, sigma_yx, r2, tuple(tags))


def mc_call_price(model, block, k, cv=None):
    """MC estimate of the call price with optional CV adjustment.

    Returns (price, standard error).
    """
    s = terminal_values(model, block)
    y = np.maximum(s - k, 0.0)
    if cv is not None and cv.degree >= 1:
        y = y - cv.beta[0] * (s - model.s0)
        if cv.degree == 2:
            y = y - cv.beta[1] * (s**2 - second_moment(model, block.maturity))
    price = float(y.mean())
    se = float(y.std(ddof=1) / np.sqrt(y.size)) if y.size > 1 else 0.0
    return price, se


def price_surface(model, quotes, schedule, driver, stream_tag=0):
    """Price every quote with the scheduled engine per maturity.

    Quotes are converted to the model's zero-rate world through their
    (discount factor, forward): strike K~ = K S_0 / F prices to C~, and the
    market price is C = C~ DF F / S_0.  One feature block (and one
    independent CV block) is sampled per MC maturity and shared across its
    strikes.  Returns a price array aligned with quotes.
    """
    mats = sorted({q.maturity for q in quotes.quotes})
    bad = [t for t in mats if t > model.horizon + 1e-12]
    if bad:
        raise ValidationError(f"maturities beyond model horizon {model.horizon}: {bad}")
    out = np.empty(len(quotes.quotes))
    for mi, t in enumerate(mats):
        rows = [(i, q) for i, q in enumerate(quotes.quotes) if q.maturity == t]
        method = schedule.for_maturity(t)
        if method.kind == "quad":
            weights, feats = quad_nodes_features(model, t, method.n_nodes)
            s = model.s0 + feats @ model.coefficients
            for i, q in rows:
                k_model = q.strike * model.s0 / q.forward
                c_model = float(weights @ np.maximum(s - k_model, 0.0))
                out[i] = c_model * q.discount_factor * q.forward / model.s0
        else:
            block = sample_features(
                model, t, method.n_paths, driver, tags=(stream_tag, mi, 0)
            )
            for i, q in rows:
                k_model = q.strike * model.s0 / q.forward
                cv = None
                if method.cv_degree >= 1:
                    cv = estimate_cv(
                        model,
                        block,
                        k_model,
                        method.cv_degree,
                        driver,
                        method.beta_samples,
                        tags=(stream_tag, mi, 1),
                    )
                c_model, _ = mc_call_price(model, block, k_model, cv)
                out[i] = c_model * q.discount_factor * q.forward / model.s0
    return out
