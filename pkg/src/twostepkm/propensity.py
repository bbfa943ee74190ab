"""First-step estimators of a treatment (or instrument) probability given covariates.

Three estimators are available:

``logit``
    Logistic regression on an intercept and the raw covariates.
``series``
    Logistic regression on a power-series basis: monomials of the
    covariates, ordered by total degree (ties with larger powers of
    earlier covariates first). Covariates are rescaled to ``[-1, 1]``
    before powering, which changes the parameterisation but not the span.
``kernel``
    Leave-one-out Nadaraya-Watson ratio with a product kernel.

Every prediction is clamped to ``[trim_epsilon, 1 - trim_epsilon]``.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit

from .exceptions import EstimationError, SeparationError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_TRIM = 0.01
SCORE_TOL = 1e-8
MAX_ITER = 100
SEPARATION_NORM = 1e4
SEPARATED_PROB = 1e-10


@dataclass(frozen=True)
class PropensitySpec:
    """How to fit a propensity model; ``order`` may be ``"auto"`` for series."""

    method: str = "series"
    order: int | str = "auto"
    bandwidth: float | None = None
    kernel: str = "epanechnikov"
    trim_epsilon: float = DEFAULT_TRIM

    def __post_init__(self):
        if self.method not in ("logit", "series", "kernel"):
            raise ValidationError(f"unknown propensity method {self.method!r}")
        if not 0 < self.trim_epsilon < 0.5:
            raise ValidationError("trim_epsilon must lie in (0, 0.5)")
        if self.method == "kernel" and (self.bandwidth is None or not self.bandwidth > 0):
            raise ValidationError("kernel propensity needs a positive bandwidth")

    def fit(self, x, d) -> PropensityFit:
        if self.method == "logit":
            return fit_parametric_logit(x, d, trim_epsilon=self.trim_epsilon)
        if self.method == "series":
            return fit_series_logit(x, d, self.order, trim_epsilon=self.trim_epsilon)
        return fit_nw_kernel(x, d, self.bandwidth, self.kernel, trim_epsilon=self.trim_epsilon)

    def to_dict(self) -> dict:
        return {"method": self.method, "order": self.order, "bandwidth": self.bandwidth,
                "kernel": self.kernel, "trim_epsilon": self.trim_epsilon}


@dataclass(frozen=True, eq=False)
class PropensityFit:
    method: str
    trim_epsilon: float
    fitted: np.ndarray
    clamp_count: int
    coefficients: np.ndarray | None = None
    loglik_path: tuple[float, ...] = ()
    iterations: int = 0
    # series basis: multi-indices and the affine map into [-1, 1]
    exponents: np.ndarray | None = None
    center: np.ndarray | None = None
    halfwidth: np.ndarray | None = None
    # kernel: retained training data
    train_x: np.ndarray | None = None
    train_d: np.ndarray | None = None
    bandwidth: float | None = None
    kernel: str | None = None
    k: int = 0
    extra: dict = field(default_factory=dict)

    def raw_predict(self, x) -> np.ndarray:
        x = _as_matrix(x, self.k)
        if self.method == "kernel":
            return _nw_ratio(x, self.train_x, self.train_d, self.bandwidth, self.kernel, leave_one_out=False)
        return expit(self.design(x) @ self.coefficients)

    def design(self, x) -> np.ndarray:
        x = _as_matrix(x, self.k)
        if self.method == "logit":
            return np.column_stack([np.ones(x.shape[0]), x])
        return _power_basis((x - self.center) / self.halfwidth, self.exponents)

    def predict(self, x) -> np.ndarray:
        return np.clip(self.raw_predict(x), self.trim_epsilon, 1.0 - self.trim_epsilon)

    def summary(self) -> dict:
        out = {"method": self.method, "trim_epsilon": self.trim_epsilon, "clamp_count": self.clamp_count}
        if self.coefficients is not None:
            out["coefficients"] = [float(c) for c in self.coefficients]
            out["iterations"] = self.iterations
        if self.exponents is not None:
            out["basis"] = [list(map(int, e)) for e in self.exponents]
        if self.bandwidth is not None:
            out["bandwidth"] = self.bandwidth
            out["kernel"] = self.kernel
        return out


def predict(fit: PropensityFit, x) -> float | np.ndarray:
    """Clamped probability for one covariate row, or an array for a 2-D matrix."""
    x_arr = np.asarray(x, dtype=float)
    if x_arr.ndim == 2:
        return fit.predict(x_arr)
    if x_arr.size != fit.k:
        raise ValidationError(f"covariate row has dimension {x_arr.size}, model expects {fit.k}")
    return float(fit.predict(x_arr.reshape(1, fit.k))[0])


def _as_matrix(x, k: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if k == 1 else x.reshape(1, -1)
    if x.shape[1] != k:
        raise ValidationError(f"covariates have dimension {x.shape[1]}, model expects {k}")
    return x


def _check_binary(x, d) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(d, dtype=float).ravel()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1) if x.size == d.size and x.size else np.zeros((d.size, 0))
    if x.shape[0] != d.size:
        raise ValidationError(f"covariate matrix has {x.shape[0]} rows for {d.size} outcomes")
    if not np.all((d == 0) | (d == 1)):
        raise ValidationError("propensity outcome must be binary")
    return x, d


def loglik(design: np.ndarray, d: np.ndarray, beta: np.ndarray) -> float:
    eta = design @ beta
    return float(np.dot(d, eta) - np.logaddexp(0.0, eta).sum())


def irls(design: np.ndarray, d: np.ndarray, max_iter: int = MAX_ITER, tol: float = SCORE_TOL):
    """Newton-Raphson (IRLS) for the logit likelihood with step halving.

    Returns ``(beta, loglik_path, iterations)``. Step halving keeps the
    log-likelihood nondecreasing. Raises :class:`SeparationError` when the
    coefficients diverge without the score vanishing.
    """
    n, p = design.shape
    if p == 0:
        raise ValidationError("empty design matrix")
    if d.min() == d.max():
        raise ValidationError("binary outcome is constant; the logit has no finite maximiser")
    beta = np.zeros(p)
    mean = d.mean()
    if np.allclose(design[:, 0], 1.0):
        beta[0] = math.log(mean / (1 - mean))
    ll = loglik(design, d, beta)
    path = [ll]
    for it in range(1, max_iter + 1):
        prob = expit(design @ beta)
        score = design.T @ (d - prob)
        if np.max(np.abs(score)) < tol:
            _check_not_separated(prob)
            return beta, tuple(path), it - 1
        w = prob * (1 - prob)
        hess = design.T @ (design * w[:, None])
        try:
            step = scipy.linalg.solve(hess, score, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            if np.linalg.norm(beta) > 10 or np.min(w) < 1e-12:
                raise SeparationError("separation detected: information matrix became singular") from None
            raise EstimationError("singular weighted design in logistic fit") from None
        scale = 1.0
        if 0.5 * float(score @ step) < 1e-9:
            # predicted gain below the resolution of the log-likelihood sum
            beta = beta + step
            ll = loglik(design, d, beta)
            path.append(ll)
            continue
        for _ in range(60):
            cand = beta + scale * step
            ll_new = loglik(design, d, cand)
            if ll_new >= ll:
                break
            scale *= 0.5
        else:
            # no ascent possible: at the maximum up to rounding
            if np.max(np.abs(score)) < 1e-6 * max(1.0, n):
                return beta, tuple(path), it
            raise EstimationError("logistic fit failed to improve the likelihood")
        beta, ll = cand, ll_new
        path.append(ll)
        if np.linalg.norm(beta) > SEPARATION_NORM:
            raise SeparationError("separation detected: coefficients diverge")
    prob = expit(design @ beta)
    score = design.T @ (d - prob)
    if np.max(np.abs(score)) < tol:
        _check_not_separated(prob)
        return beta, tuple(path), max_iter
    if np.min(np.minimum(prob, 1 - prob)) < 1e-8:
        raise SeparationError("separation detected: fitted probabilities reach 0 or 1")
    raise EstimationError(f"logistic fit did not converge in {max_iter} iterations")


def _check_not_separated(prob: np.ndarray) -> None:
    # under (quasi-)separation the score vanishes only because the fitted
    # probabilities have reached 0 or 1 while the coefficients keep growing
    if np.min(np.minimum(prob, 1 - prob)) < SEPARATED_PROB:
        raise SeparationError("separation detected: fitted probabilities reach 0 or 1")


def _finish(method, result, x, d, trim_epsilon, **attrs) -> PropensityFit:
    beta, path, iters = result
    fit = PropensityFit(method=method, trim_epsilon=trim_epsilon, fitted=np.empty(0), clamp_count=0,
                        coefficients=beta, loglik_path=path, iterations=iters, k=x.shape[1], **attrs)
    raw = fit.raw_predict(x)
    return _with_fitted(fit, raw)


def _with_fitted(fit: PropensityFit, raw: np.ndarray) -> PropensityFit:
    eps = fit.trim_epsilon
    clamped = np.clip(raw, eps, 1 - eps)
    count = int(np.count_nonzero((raw < eps) | (raw > 1 - eps)))
    if count:
        logger.info("%s propensity: clamped %d of %d fitted values to [%g, %g]", fit.method, count, raw.size, eps, 1 - eps)
    clamped.setflags(write=False)
    object.__setattr__(fit, "fitted", clamped)
    object.__setattr__(fit, "clamp_count", count)
    return fit


def fit_parametric_logit(x, d, trim_epsilon: float = DEFAULT_TRIM) -> PropensityFit:
    """Maximum-likelihood logit of ``d`` on an intercept and the columns of ``x``."""
    x, d = _check_binary(x, d)
    design = np.column_stack([np.ones(d.size), x])
    return _finish("logit", irls(design, d), x, d, trim_epsilon)


def multi_indices(k: int, count: int) -> np.ndarray:
    """First ``count`` exponent vectors of length ``k`` in nondecreasing total degree."""
    out: list[tuple[int, ...]] = []
    degree = 0
    while len(out) < count:
        if k == 0:
            if degree > 0:
                break
            out.append(())
        else:
            level = [c for c in itertools.product(range(degree + 1), repeat=k) if sum(c) == degree]
            out.extend(sorted(level, reverse=True))
        degree += 1
    return np.array(out[:count], dtype=int).reshape(len(out[:count]), k)


def _power_basis(xs: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    if exponents.shape[1] == 0:
        return np.ones((xs.shape[0], exponents.shape[0]))
    return np.prod(xs[:, None, :] ** exponents[None, :, :], axis=2)


def default_series_order(k: int) -> int:
    """Intercept, linear, quadratic and cubic terms (for ``k = 1``: 1, x, x^2, x^3)."""
    return math.comb(k + 3, 3)


def fit_series_logit(x, d, order: int | str = "auto", trim_epsilon: float = DEFAULT_TRIM) -> PropensityFit:
    """Logit on the first ``order`` power-series terms of the covariates."""
    x, d = _check_binary(x, d)
    n, k = x.shape
    L = default_series_order(k) if order == "auto" else int(order)
    if L < 1:
        raise ValidationError("series order must be at least 1")
    if k == 0 and L > 1:
        raise ValidationError("without covariates the series basis holds only the intercept")
    if L > n / 10:
        raise ValidationError(f"series order {L} exceeds n/10 = {n / 10:g}")
    lo, hi = (x.min(axis=0), x.max(axis=0)) if k else (np.zeros(0), np.zeros(0))
    center = (hi + lo) / 2
    halfwidth = np.where(hi > lo, (hi - lo) / 2, 1.0)
    exponents = multi_indices(k, L)
    design = _power_basis((x - center) / halfwidth, exponents)
    exponents = _drop_collinear(design, exponents)
    design = _power_basis((x - center) / halfwidth, exponents)
    return _finish("series", irls(design, d), x, d, trim_epsilon,
                   exponents=exponents, center=center, halfwidth=halfwidth)


def _drop_collinear(design: np.ndarray, exponents: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    if design.shape[1] <= 1:
        return exponents
    _, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > rtol * diag[0]))
    if rank == design.shape[1]:
        return exponents
    keep = np.sort(piv[:rank])
    dropped = [list(map(int, exponents[j])) for j in sorted(set(range(design.shape[1])) - set(keep))]
    warnings.warn(f"series basis is collinear; dropping terms with exponents {dropped}", stacklevel=3)
    return exponents[keep]


KERNELS = {
    # order-2, compact support on [-1, 1]
    "epanechnikov": lambda u: np.where(np.abs(u) <= 1, 0.75 * (1 - u * u), 0.0),
    "uniform": lambda u: np.where(np.abs(u) <= 1, 0.5, 0.0),
    "biweight": lambda u: np.where(np.abs(u) <= 1, (15 / 16) * (1 - u * u) ** 2, 0.0),
    "gaussian": lambda u: np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi),
}


def _nw_ratio(points, train_x, train_d, bandwidth, kernel, leave_one_out: bool, chunk: int = 2048) -> np.ndarray:
    kern = KERNELS[kernel]
    m = points.shape[0]
    out = np.empty(m)
    for start in range(0, m, chunk):
        stop = min(start + chunk, m)
        u = (train_x[None, :, :] - points[start:stop, None, :]) / bandwidth
        K = np.prod(kern(u), axis=2) if u.shape[2] else np.ones(u.shape[:2])
        if leave_one_out:
            rows = np.arange(start, stop)
            K[rows - start, rows] = 0.0
        den = K.sum(axis=1)
        empty = np.flatnonzero(den <= 0)
        if empty.size:
            raise EstimationError(f"bandwidth too small at point {start + int(empty[0])}: empty kernel window")
        out[start:stop] = (K @ train_d) / den
    return out


def fit_nw_kernel(x, d, bandwidth: float, kernel: str = "epanechnikov",
                  trim_epsilon: float = DEFAULT_TRIM) -> PropensityFit:
    """Leave-one-out Nadaraya-Watson estimate of ``P(d = 1 | x)``.

    Fitted values at training points exclude the point itself from both the
    numerator and the denominator; predictions at new points use every
    training point.
    """
    x, d = _check_binary(x, d)
    if not bandwidth or bandwidth <= 0:
        raise ValidationError("bandwidth must be positive")
    if kernel not in KERNELS:
        raise ValidationError(f"unknown kernel {kernel!r}; choose from {sorted(KERNELS)}")
    if d.size < 2:
        raise ValidationError("kernel propensity needs at least two observations")
    x = np.array(x, dtype=float)
    x.setflags(write=False)
    fit = PropensityFit(method="kernel", trim_epsilon=trim_epsilon, fitted=np.empty(0), clamp_count=0,
                        train_x=x, train_d=d.copy(), bandwidth=float(bandwidth), kernel=kernel, k=x.shape[1])
    return _with_fitted(fit, _nw_ratio(x, x, d, bandwidth, kernel, leave_one_out=True))
