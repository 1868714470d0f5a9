"""Classification metrics, rank correlation, fixed-effects OLS and t intervals."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import solve_triangular

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class ScoredLabels:
    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        scores = np.asarray(self.scores, dtype=float)
        if labels.shape != scores.shape or labels.ndim != 1:
            raise ValueError("labels and scores must be parallel 1-d sequences")
        if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
            raise ValueError("scores must lie in [0, 1]")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "scores", scores)

    def __len__(self):
        return len(self.labels)


def midranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the average of their positions."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(len(x), dtype=float)
    boundaries = np.flatnonzero(np.diff(sx)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(x)]))
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b + 1)
    return ranks


def auc(data: ScoredLabels) -> float:
    """Mann-Whitney AUC: P(s+ > s-) + P(s+ = s-)/2."""
    pos = data.labels == 1
    n_pos = int(pos.sum())
    n_neg = len(data) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    r = midranks(data.scores)
    u = r[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def log_loss(data: ScoredLabels) -> float:
    if len(data) == 0:
        raise ValueError("log loss of an empty set")
    p = np.clip(data.scores, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = data.labels
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1.0 - p)))


def f1_score(data: ScoredLabels, threshold: float = 0.5) -> float:
    if len(data) == 0:
        raise ValueError("F1 of an empty set")
    pred = data.scores >= threshold
    truth = data.labels == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


# -- t distribution via the regularized incomplete beta ---------------------

def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10_000) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise RuntimeError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float, x_comp: float | None = None) -> float:
    """Regularized incomplete beta I_x(a, b).

    ``x_comp`` may carry 1 - x when the caller can form it without cancellation.
    """
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    y = 1.0 - x if x_comp is None else x_comp
    if x <= 0.0:
        return 0.0
    if y <= 0.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log(y))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, y) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    if math.isnan(t):
        return float("nan")
    t2 = t * t
    return betainc(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))


def t_cdf(t: float, df: float) -> float:
    half = 0.5 * t_sf_two_sided(t, df)
    return 1.0 - half if t >= 0 else half


def t_ppf(q: float, df: float) -> float:
    """Quantile of Student's t by bisection on the CDF."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile must be in (0, 1)")
    if q == 0.5:
        return 0.0
    lo, hi = -1.0, 1.0
    while t_cdf(lo, df) > q:
        lo *= 2.0
    while t_cdf(hi, df) < q:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


# -- correlation and intervals ---------------------------------------------

def spearman(x, y) -> tuple[float, float]:
    """Spearman's rho with a two-sided p-value from the t approximation."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n != len(y):
        raise ValueError("spearman needs parallel sequences")
    if n < 3:
        raise ValueError("spearman needs at least 3 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("rank correlation is undefined for a constant input")
    rx = midranks(x) - (n + 1) / 2.0
    ry = midranks(y) - (n + 1) / 2.0
    rho = float(np.dot(rx, ry) / math.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    rho = min(1.0, max(-1.0, rho))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, t_sf_two_sided(t, n - 2)


def mean_ci(values, level: float = 0.95) -> tuple[float, float, float]:
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        raise ValueError("a confidence interval needs at least 2 values")
    m = float(v.mean())
    s = float(v.std(ddof=1))
    half = t_ppf((1.0 + level) / 2.0, len(v) - 1) * s / math.sqrt(len(v))
    return m, m - half, m + half


# -- fixed-effects regression ----------------------------------------------

@dataclass(frozen=True)
class RegressionResult:
    names: list
    estimates: list
    std_errors: list
    p_values: list
    adj_r2: float
    df_resid: int
    n_obs: int
    metric: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def to_text(self) -> str:
        width = max(len(n) for n in self.names + ["Coefficients"])
        lines = [f"{'Coefficients':<{width}}  {'Estimate':>12}  {'Std. Err':>10}  {'p-value':>10}"]
        lines.append("-" * len(lines[0]))
        for n, e, s, p in zip(self.names, self.estimates, self.std_errors, self.p_values):
            lines.append(f"{n:<{width}}  {e:>12.4g}  {s:>10.3g}  {p:>10.3g}")
        lines.append(f"adjusted R^2 = {self.adj_r2:.3f}  (n = {self.n_obs}, residual df = {self.df_resid})")
        return "\n".join(lines)


YB = "Years Between (YB)"


def fixed_effects_design(families, years_between, family_order=None, reference=None):
    """Design matrix: one indicator per family (no global intercept), YB, and YB x family.

    The reference family (BKT when present) gets no interaction column.
    """
    families = list(families)
    yb = np.asarray(years_between, dtype=float)
    present = list(dict.fromkeys(family_order or sorted(set(families))))
    present = [f for f in present if f in set(families)]
    if reference is None:
        reference = "BKT" if "BKT" in present else present[0]
    names = [YB] + present + [f"YB×{f}" for f in present if f != reference]
    X = np.zeros((len(families), len(names)))
    X[:, 0] = yb
    for j, fam in enumerate(present):
        X[:, 1 + j] = [f == fam for f in families]
    col = 1 + len(present)
    for fam in present:
        if fam == reference:
            continue
        X[:, col] = yb * X[:, 1 + present.index(fam)]
        col += 1
    return X, names


def ols(X, y, names, metric: str = "") -> RegressionResult:
    """Least squares by QR with classical standard errors and t-test p-values.

    The adjusted R^2 is measured against the grand-mean model.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n <= p:
        raise ValueError(f"need more observations ({n}) than columns ({p})")
    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    scale = max(diag.max(initial=0.0), 1.0)
    bad = [names[j] for j in np.flatnonzero(diag <= 1e-10 * scale)]
    if bad:
        raise np.linalg.LinAlgError(f"rank-deficient design; collinear column(s): {', '.join(bad)}")
    beta = solve_triangular(R, Q.T @ y)
    resid = y - X @ beta
    df = n - p
    ssr = float(resid @ resid)
    sigma2 = ssr / df
    r_inv = solve_triangular(R, np.eye(p))
    cov = sigma2 * (r_inv @ r_inv.T)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    pvals = []
    for b, s in zip(beta, se):
        if s == 0.0:
            pvals.append(0.0 if b != 0.0 else 1.0)
        else:
            pvals.append(t_sf_two_sided(b / s, df))
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        adj = 1.0 if ssr == 0.0 else float("-inf")
    else:
        adj = 1.0 - (ssr / sst) * (n - 1) / df
    return RegressionResult(list(names), [float(b) for b in beta], [float(s) for s in se],
                            pvals, float(adj), df, n, metric)


def ols_fixed_effects(records, metric: str = "auc", family_order=None) -> RegressionResult:
    """Regress one metric on family fixed effects, years between, and their interactions."""
    records = list(records)
    families = [r.family for r in records]
    yb = [r.years_between for r in records]
    if len(set(yb)) < 2:
        raise ValueError("fixed-effects regression needs at least two distinct years-between values")
    X, names = fixed_effects_design(families, yb, family_order)
    y = [getattr(r, metric) for r in records]
    return ols(X, y, names, metric)
