"""Evaluation battery: correlation, confusion counts, variance tests and
distribution summaries, plus the on-disk report layout."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .dataset import CLASS_NAMES


class StatsError(ValueError):
    pass


def _series(x, min_len: int = 1, name: str = "series") -> np.ndarray:
    a = np.asarray(x, dtype=float).reshape(-1)
    if len(a) < min_len:
        raise StatsError(f"{name} needs at least {min_len} values, got {len(a)}")
    if not np.all(np.isfinite(a)):
        raise StatsError(f"{name} contains non-finite values")
    return a


def pearson(x, y) -> float:
    """Pearson product-moment correlation."""
    x = _series(x, 2, "x")
    y = _series(y, 2, "y")
    if len(x) != len(y):
        raise StatsError(f"length mismatch: {len(x)} vs {len(y)}")
    dx = x - math.fsum(x) / len(x)
    dy = y - math.fsum(y) / len(y)
    if not dx.any() or not dy.any():
        raise StatsError("constant series: correlation undefined")
    denom = math.sqrt(math.fsum(dx * dx) * math.fsum(dy * dy))
    if not 1e-250 < denom < 1e250:
        # extreme magnitudes: rescale so the squared sums neither underflow nor overflow
        dx = dx / np.max(np.abs(dx))
        dy = dy / np.max(np.abs(dy))
        denom = math.sqrt(math.fsum(dx * dx) * math.fsum(dy * dy))
    r = math.fsum(dx * dy) / denom
    return min(1.0, max(-1.0, r))


class Confusion(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    precision_defined: bool = True
    recall_defined: bool = True

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(scores, labels, threshold: float = 0.5) -> Confusion:
    """Counts with malicious (1) as the positive class; score >= threshold predicts positive.

    An empty denominator reports the ratio as 0 and clears its ``*_defined`` flag.
    """
    s = _series(scores, 1, "scores")
    y = np.asarray(labels).reshape(-1)
    if len(s) != len(y):
        raise StatsError("scores and labels differ in length")
    pred = s >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    n = len(s)
    return Confusion(
        tp, fp, tn, fn,
        accuracy=(tp + tn) / n,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        precision_defined=bool(tp + fp),
        recall_defined=bool(tp + fn),
    )


# --- F distribution -----------------------------------------------------------


def _betacf(a: float, b: float, x: float, tol: float = 1e-16, max_iter: int = 100_000) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
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
        if abs(delta - 1.0) < tol:
            return h
    raise StatsError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _stirling_rem(x: float) -> float:
    """lgamma(x) - ((x - 0.5) ln x - x + ln(2 pi)/2), for x >= 8."""
    x2 = 1.0 / (x * x)
    return (1.0 / x) * (1 / 12 - x2 * (1 / 360 - x2 * (1 / 1260 - x2 * (1 / 1680 - x2 / 1188))))


def _rlog1(e: float) -> float:
    """e - ln(1 + e) without cancellation for small |e|."""
    if abs(e) < 0.1:
        total, term = 0.0, -e
        for k in range(2, 40):
            term *= -e
            total += term / k
        return total
    return e - math.log1p(e)


def _log_front(a: float, b: float, x: float, y: float) -> float:
    """ln(x^a y^b / B(a, b)) with y = 1 - x supplied separately.

    Large shape parameters would make lgamma(a + b) - lgamma(a) - lgamma(b)
    cancel catastrophically, so those cases use Stirling remainders and
    log1p forms instead.
    """
    lo, hi = min(a, b), max(a, b)
    if lo >= 8:
        if a <= b:
            h = a / b
            x0, y0 = h / (1 + h), 1 / (1 + h)
            lam = a - (a + b) * x
        else:
            h = b / a
            x0, y0 = 1 / (1 + h), h / (1 + h)
            lam = (a + b) * y - b
        e = -lam / a
        u = e - math.log(x / x0) if abs(e) > 0.6 else _rlog1(e)
        e = lam / b
        v = e - math.log(y / y0) if abs(e) > 0.6 else _rlog1(e)
        corr = _stirling_rem(a) + _stirling_rem(b) - _stirling_rem(a + b)
        return -_HALF_LOG_2PI + 0.5 * math.log(b * x0) - (a * u + b * v) - corr
    if hi >= 8:
        # ln(Gamma(hi) / Gamma(lo + hi)) written to avoid cancellation
        s = lo + hi
        log_ratio = -((hi - 0.5) * math.log1p(lo / hi) + lo * math.log(s) - lo
                      + _stirling_rem(s) - _stirling_rem(hi))
        log_beta = math.lgamma(lo) + log_ratio
    else:
        log_beta = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    return a * math.log(x) + b * math.log(y) - log_beta


def _betainc_pair(a: float, b: float, x: float, y: float | None = None) -> tuple[float, float]:
    """(I_x(a, b), 1 - I_x(a, b)), each computed without cancellation."""
    if y is None:
        y = 1.0 - x
    if x <= 0.0:
        return 0.0, 1.0
    if y <= 0.0:
        return 1.0, 0.0
    front = math.exp(_log_front(a, b, x, y))
    if x < (a + 1.0) / (a + b + 2.0):
        lower = front * _betacf(a, b, x) / a
        return lower, 1.0 - lower
    upper = front * _betacf(b, a, y) / b
    return 1.0 - upper, upper


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise StatsError("betainc needs a, b > 0")
    return _betainc_pair(a, b, x)[0]


def _f_args(x, df1, df2):
    for v in (x, df1, df2):
        if not math.isfinite(v):
            raise StatsError("non-finite input to the F distribution")
    if df1 < 1 or df2 < 1:
        raise StatsError("degrees of freedom must be >= 1")
    if x < 0:
        raise StatsError("F statistic must be non-negative")


def _f_tails(x: float, df1: float, df2: float) -> tuple[float, float]:
    _f_args(x, df1, df2)
    if x == 0:
        return 0.0, 1.0
    # both tails from the same argument pair avoid 1 - cdf cancellation
    denom = df1 * x + df2
    u = df1 * x / denom
    v = df2 / denom
    lo, hi = _betainc_pair(df1 / 2.0, df2 / 2.0, u, v)
    return min(max(lo, 0.0), 1.0), min(max(hi, 0.0), 1.0)


def f_cdf(x: float, df1: float, df2: float) -> float:
    """P(F' <= x) for F' ~ F(df1, df2)."""
    return _f_tails(float(x), float(df1), float(df2))[0]


def f_sf(x: float, df1: float, df2: float) -> float:
    """P(F' > x) for F' ~ F(df1, df2)."""
    return _f_tails(float(x), float(df1), float(df2))[1]


class TestResult(NamedTuple):
    statistic: float
    df1: float
    df2: float
    p_value: float


def f_test(a, b) -> TestResult:
    """Two-sample variance-ratio test, two-tailed."""
    a = _series(a, 2, "a")
    b = _series(b, 2, "b")
    va = float(np.var(a, ddof=1))
    vb = float(np.var(b, ddof=1))
    if va == 0 or vb == 0:
        raise StatsError("zero variance: F-test undefined")
    F = va / vb
    df1, df2 = len(a) - 1, len(b) - 1
    lo, hi = _f_tails(F, df1, df2)
    return TestResult(F, df1, df2, min(1.0, 2.0 * min(lo, hi)))


def levene(a, b, center: str = "median") -> TestResult:
    """Levene's test for two groups on absolute deviations from the group
    median (Brown-Forsythe, default) or mean."""
    a = _series(a, 2, "a")
    b = _series(b, 2, "b")
    if center == "median":
        loc = np.median
    elif center == "mean":
        loc = np.mean
    else:
        raise ValueError(f"center must be 'median' or 'mean', not {center!r}")
    groups = [np.abs(g - loc(g)) for g in (a, b)]
    n = sum(len(g) for g in groups)
    k = len(groups)
    means = [math.fsum(g) / len(g) for g in groups]
    grand = math.fsum(np.concatenate(groups)) / n
    between = math.fsum(len(g) * (m - grand) ** 2 for g, m in zip(groups, means))
    within = math.fsum(math.fsum((g - m) ** 2) for g, m in zip(groups, means))
    df1, df2 = k - 1, n - k
    if within == 0:
        if between == 0:
            return TestResult(0.0, df1, df2, 1.0)
        raise StatsError("degenerate groups: no spread within groups")
    W = (df2 / df1) * between / within
    return TestResult(W, df1, df2, f_sf(W, df1, df2))


# --- distributions ---------------------------------------------------------------


class FiveNumber(NamedTuple):
    min: float
    q1: float
    median: float
    q3: float
    max: float


def _quantile_sorted(s: np.ndarray, q: float) -> float:
    h = (len(s) - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, len(s) - 1)
    frac = h - lo
    return float(s[lo] + (s[hi] - s[lo]) * frac)


def five_number(series) -> FiveNumber:
    """Min, quartiles (linear interpolation at h = (n-1) q) and max."""
    s = np.sort(_series(series, 1))
    return FiveNumber(float(s[0]), _quantile_sorted(s, 0.25), _quantile_sorted(s, 0.5),
                      _quantile_sorted(s, 0.75), float(s[-1]))


def histogram(series, bins: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width bins over [min, max], right edge inclusive."""
    if bins < 1:
        raise StatsError("bins must be >= 1")
    s = _series(series, 1)
    counts, edges = np.histogram(s, bins=bins)
    return edges, counts


def pr_curve(scores, labels, step: float = 0.01) -> list[tuple[float, float, float]]:
    """(threshold, precision, recall) for thresholds 0, step, ..., 1."""
    n = int(round(1.0 / step))
    out = []
    for i in range(n + 1):
        thr = round(i * step, 10)
        c = confusion(scores, labels, thr)
        out.append((thr, c.precision, c.recall))
    return out


@dataclass
class EvalReport:
    n: int
    threshold: float
    pearson_r: float | None
    confusion: Confusion
    f_test: TestResult | None
    levene: TestResult | None
    five_number: dict[str, FiveNumber]
    histogram: dict[str, tuple[np.ndarray, np.ndarray]]
    pr_curve: list[tuple[float, float, float]]
    class_counts: dict[str, tuple[int, int]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.confusion.accuracy

    @property
    def precision(self) -> float:
        return self.confusion.precision

    @property
    def recall(self) -> float:
        return self.confusion.recall


def evaluate(scores, labels, threshold: float = 0.5, bins: int = 10) -> EvalReport:
    """Build the full report for predicted ``scores`` against 0/1 ``labels``.

    The "experimental" series is the labels and the "predicted" series the
    scores; tests that are undefined for the data (e.g. a single-class label
    series) are recorded as ``None`` with a note instead of failing.
    """
    s = _series(scores, 1, "scores")
    y = np.asarray(labels, dtype=float).reshape(-1)
    if len(y) != len(s):
        raise StatsError("scores and labels differ in length")
    notes = []

    def attempt(fn, name):
        try:
            return fn()
        except StatsError as exc:
            notes.append(f"{name}: {exc}")
            return None

    r = attempt(lambda: pearson(y, s), "pearson")
    ft = attempt(lambda: f_test(y, s), "f_test")
    lv = attempt(lambda: levene(y, s), "levene")
    conf = confusion(s, y, threshold)
    five = {"experimental": five_number(y), "predicted": five_number(s)}
    hist = {}
    counts = {}
    pred = s >= threshold
    for cls, name in enumerate(CLASS_NAMES):
        members = s[y == cls]
        if len(members):
            hist[name] = histogram(members, bins)
        counts[name] = (int(np.sum(y == cls)), int(np.sum(pred == bool(cls))))
    return EvalReport(len(s), threshold, r, conf, ft, lv, five, hist, pr_curve(s, y), counts, notes)


# --- report files -----------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def emit_report(report: EvalReport, path) -> list[Path]:
    """Write report.txt, boxplot.csv, histogram_<class>.csv and pr_curve.csv."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    c = report.confusion
    lines = [
        ("instances", report.n),
        ("threshold", report.threshold),
        ("pearson_r", report.pearson_r),
        ("tp", c.tp), ("fp", c.fp), ("tn", c.tn), ("fn", c.fn),
        ("accuracy", c.accuracy),
        ("precision", c.precision),
        ("precision_defined", c.precision_defined),
        ("recall", c.recall),
        ("recall_defined", c.recall_defined),
    ]
    for name, res in (("f_test", report.f_test), ("levene", report.levene)):
        for fld in ("statistic", "df1", "df2", "p_value"):
            lines.append((f"{name}_{fld}", None if res is None else getattr(res, fld)))
    for cls, (actual, predicted) in report.class_counts.items():
        lines.append((f"count_{cls}_experimental", actual))
        lines.append((f"count_{cls}_predicted", predicted))
    text = "".join(f"{k}: {_fmt(v)}\n" for k, v in lines)
    text += "".join(f"note: {n}\n" for n in report.notes)
    written = []
    p = out / "report.txt"
    p.write_text(text, encoding="utf-8")
    written.append(p)

    p = out / "boxplot.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "min", "q1", "median", "q3", "max"])
        # C1 = experimental labels, C2 = predicted scores
        for series, fn in report.five_number.items():
            w.writerow([series] + [_fmt(v) for v in fn])
    written.append(p)

    for cls, (edges, counts) in report.histogram.items():
        p = out / f"histogram_{cls}.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, n in zip(edges[:-1], edges[1:], counts):
                w.writerow([_fmt(lo), _fmt(hi), int(n)])
        written.append(p)

    p = out / "pr_curve.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall"])
        for thr, prec, rec in report.pr_curve:
            w.writerow([_fmt(thr), _fmt(prec), _fmt(rec)])
    written.append(p)
    return written


def read_report_txt(path) -> dict[str, float | int | bool | None]:
    """Parse report.txt back into a mapping (notes are dropped)."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition(": ")
        if key == "note":
            continue
        if value == "NA":
            out[key] = None
        elif value in ("true", "false"):
            out[key] = value == "true"
        else:
            try:
                out[key] = int(value)
            except ValueError:
                out[key] = float(value)
    return out


def read_series_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


__all__: Sequence[str] = [
    "StatsError", "pearson", "Confusion", "confusion", "betainc", "f_cdf", "f_sf",
    "TestResult", "f_test", "levene", "FiveNumber", "five_number", "histogram",
    "pr_curve", "EvalReport", "evaluate", "emit_report", "read_report_txt", "read_series_csv",
]
