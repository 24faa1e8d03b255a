"""Station comparison metrics: PCC, R2, MSE/RMSE and paired t-tests.

The t-distribution tail probability is computed from the regularized
incomplete beta function (continued-fraction evaluation), so the module has
no dependency beyond numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class LengthMismatch(ValueError):
    pass


class ConstantSeries(ValueError):
    """Correlation is undefined when a series has zero variance."""


class ConstantTruth(ValueError):
    """R2 is undefined when the reference series is constant."""


class ZeroVariance(ValueError):
    """Paired differences are all identical; t is undefined."""


def _as_pair(x, y):
    a = np.asarray(x, dtype=float)
    b = np.asarray(y, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"shapes {a.shape} vs {b.shape}")
    return a, b


def pcc(x, y) -> float:
    """Pearson correlation coefficient."""
    a, b = _as_pair(x, y)
    if a.size < 2:
        raise LengthMismatch("need at least 2 points")
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float(da @ da)) * math.sqrt(float(db @ db))
    if denom == 0.0:
        raise ConstantSeries("a series is constant")
    r = float(da @ db) / denom
    return max(-1.0, min(1.0, r))   # rounding can overshoot the bound


def r2(y, yhat) -> float:
    """Coefficient of determination of yhat against reference y.

    1 is a perfect fit, 0 matches the mean predictor, negative is worse
    than the mean predictor.
    """
    a, b = _as_pair(y, yhat)
    if a.size < 2:
        raise LengthMismatch("need at least 2 points")
    ss_res = float(((a - b) ** 2).sum())
    ss_tot = float(((a - a.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ConstantTruth("reference series is constant")
    return 1.0 - ss_res / ss_tot


def mse_rmse(y, yhat) -> tuple[float, float]:
    a, b = _as_pair(y, yhat)
    if a.size == 0:
        raise LengthMismatch("need at least 1 point")
    mse = float(((a - b) ** 2).mean())
    return mse, math.sqrt(mse)


def _betacf(x: float, a: float, b: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise RuntimeError("incomplete beta did not converge")


def reg_inc_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x out of [0, 1]: {x}")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    # continued fraction converges fast below the distribution mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(x, a, b) / a
    return 1.0 - front * _betacf(1.0 - x, b, a) / b


def t_two_sided_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t with df degrees of freedom."""
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    if math.isinf(t):
        return 0.0
    p = reg_inc_beta(df / (df + t * t), df / 2.0, 0.5)
    return 0.0 if p < 1e-300 else min(p, 1.0)


def t_cdf(t: float, df: int) -> float:
    half_tail = 0.5 * t_two_sided_p(t, df)
    return 1.0 - half_tail if t >= 0 else half_tail


def paired_t_test(a, b) -> tuple[float, float, int]:
    """Two-sided paired t-test; returns (t_value, p_value, df).

    Uses the sample (n-1) standard deviation of the differences.
    """
    x, y = _as_pair(a, b)
    if x.size < 2:
        raise LengthMismatch("need at least 2 pairs")
    d = x - y
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise ZeroVariance("all paired differences are identical")
    n = d.size
    t = float(d.mean()) / (sd / math.sqrt(n))
    return t, t_two_sided_p(t, n - 1), n - 1


def significance_code(p: float) -> str:
    """Footnote codes: ** <= 0.001, * <= 0.01, . <= 0.05."""
    if p <= 0.001:
        return "**"
    if p <= 0.01:
        return "*"
    if p <= 0.05:
        return "."
    return ""


@dataclass(frozen=True)
class MetricsReport:
    """Comparison of a candidate series against a reference series."""

    n: int
    pcc: float
    r2: float
    mse: float
    rmse: float
    t_value: float
    p_value: float
    zero_variance: bool = False

    def as_dict(self) -> dict:
        return {
            "n": self.n, "pcc": self.pcc, "r2": self.r2, "mse": self.mse,
            "rmse": self.rmse, "t_value": self.t_value,
            "p_value": self.p_value,
            "significance": significance_code(self.p_value)
            if not self.zero_variance else "zero-variance",
        }


def build_report(candidate, reference) -> MetricsReport:
    """Metrics of candidate vs reference: reference is treated as truth.

    Degenerate inputs do not abort the report: a constant candidate has no
    defined correlation (pcc is NaN) and identical series have no defined t
    statistic (flagged via zero_variance).
    """
    cand, ref = _as_pair(candidate, reference)
    mse, rmse = mse_rmse(ref, cand)
    try:
        t_value, p_value, _ = paired_t_test(cand, ref)
        zero_var = False
    except ZeroVariance:
        t_value, p_value, zero_var = math.nan, math.nan, True
    try:
        correlation = pcc(cand, ref)
    except ConstantSeries:
        correlation = math.nan
    return MetricsReport(
        n=int(cand.size),
        pcc=correlation,
        r2=r2(ref, cand),
        mse=mse,
        rmse=rmse,
        t_value=t_value,
        p_value=p_value,
        zero_variance=zero_var,
    )
