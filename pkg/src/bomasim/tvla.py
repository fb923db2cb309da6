"""Fixed-versus-random Welch t-tests, first and second order.

:class:`MomentAccumulator` keeps per-class count, mean and central moments up
to order four for every sample index, updated batch-wise and merged with the
pairwise formulas of Chan et al. and Pébay. Memory is ``O(n_samples)``
whatever the number of traces.

Second order uses the centred square ``(x - mean)^2`` of each class. From the
accumulated moments its mean is ``M2 / n`` and its unbiased variance is
``(M4 - M2^2 / n) / (n - 1)``, so one pass suffices; :func:`t_second_order`
also offers the two-pass route over an in-memory trace set.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

THRESHOLD = 4.5
CLAMP = 1e6


class DegenerateClass(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass
class _Moments:
    n: int
    mean: np.ndarray
    m2: np.ndarray
    m3: np.ndarray
    m4: np.ndarray

    @classmethod
    def empty(cls, m: int) -> "_Moments":
        z = np.zeros(m)
        return cls(0, z, z.copy(), z.copy(), z.copy())

    @classmethod
    def of(cls, x: np.ndarray) -> "_Moments":
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=0)
        c = x - mean
        c2 = c * c
        return cls(len(x), mean, c2.sum(axis=0), (c2 * c).sum(axis=0), (c2 * c2).sum(axis=0))

    def combine(self, o: "_Moments") -> "_Moments":
        if o.n == 0:
            return _Moments(self.n, self.mean.copy(), self.m2.copy(), self.m3.copy(), self.m4.copy())
        if self.n == 0:
            return o.combine(self)
        na, nb = float(self.n), float(o.n)
        n = na + nb
        d = o.mean - self.mean
        d2 = d * d
        mean = self.mean + d * nb / n
        m2 = self.m2 + o.m2 + d2 * na * nb / n
        m3 = (self.m3 + o.m3 + d2 * d * na * nb * (na - nb) / n**2
              + 3.0 * d * (na * o.m2 - nb * self.m2) / n)
        m4 = (self.m4 + o.m4 + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / n**3
              + 6.0 * d2 * (na * na * o.m2 + nb * nb * self.m2) / n**2
              + 4.0 * d * (na * o.m3 - nb * self.m3) / n)
        return _Moments(self.n + o.n, mean, m2, m3, m4)


class MomentAccumulator:
    """Streaming per-class moments; class 0 is the fixed input, class 1 random."""

    def __init__(self, n_samples: int):
        self.n_samples = n_samples
        self.classes = [_Moments.empty(n_samples), _Moments.empty(n_samples)]

    @property
    def counts(self) -> tuple[int, int]:
        return self.classes[0].n, self.classes[1].n

    def accumulate(self, traces, labels) -> "MomentAccumulator":
        traces = np.atleast_2d(np.asarray(traces, dtype=np.float64))
        labels = np.atleast_1d(np.asarray(labels))
        if traces.shape[1] != self.n_samples:
            raise ShapeMismatch(f"trace has {traces.shape[1]} samples, accumulator {self.n_samples}")
        if len(labels) != len(traces):
            raise ShapeMismatch("one label per trace required")
        for cls in (0, 1):
            sel = traces[labels == cls]
            if len(sel):
                self.classes[cls] = self.classes[cls].combine(_Moments.of(sel))
        return self

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.n_samples != self.n_samples:
            raise ShapeMismatch(f"cannot merge {self.n_samples}- and {other.n_samples}-sample accumulators")
        out = MomentAccumulator(self.n_samples)
        out.classes = [a.combine(b) for a, b in zip(self.classes, other.classes)]
        return out

    def _check(self):
        for cls, m in enumerate(self.classes):
            if m.n < 2:
                raise DegenerateClass(f"class {cls} has {m.n} traces; need at least 2")

    def t_first(self) -> tuple[np.ndarray, np.ndarray]:
        self._check()
        f, r = self.classes
        return welch(f.mean, f.m2 / (f.n - 1), f.n, r.mean, r.m2 / (r.n - 1), r.n)

    def t_second(self) -> tuple[np.ndarray, np.ndarray]:
        self._check()
        stats = []
        for m in self.classes:
            var = np.maximum((m.m4 - m.m2 * m.m2 / m.n) / (m.n - 1), 0.0)
            stats += [m.m2 / m.n, var, m.n]
        return welch(*stats)


def welch(mean_a, var_a, n_a, mean_b, var_b, n_b) -> tuple[np.ndarray, np.ndarray]:
    """Welch t per sample plus a mask of zero-variance samples with unequal means."""
    num = np.asarray(mean_a - mean_b, dtype=np.float64)
    den = np.sqrt(np.maximum(var_a, 0.0) / n_a + np.maximum(var_b, 0.0) / n_b)
    zero = den == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(zero, 0.0, num / np.where(zero, 1.0, den))
    flagged = zero & (num != 0)
    t[flagged] = np.sign(num[flagged]) * CLAMP
    return t, flagged


@dataclass
class TvlaReport:
    t: np.ndarray
    threshold: float = THRESHOLD
    windows: list = field(default_factory=list)
    clamped: np.ndarray | None = None
    order: int = 1

    @property
    def max_abs_t(self) -> float:
        return float(np.max(np.abs(self.t))) if self.t.size else 0.0

    @property
    def exceeding(self) -> np.ndarray:
        return np.nonzero(np.abs(self.t) > self.threshold)[0]

    def mask(self, windows=None) -> np.ndarray:
        keep = np.ones(self.t.shape, dtype=bool)
        for lo, hi in (self.windows if windows is None else windows):
            keep[lo:hi + 1] = False
        return keep

    def max_abs_t_outside(self, windows=None) -> float:
        keep = self.mask(windows)
        return float(np.max(np.abs(self.t[keep]))) if keep.any() else 0.0


def _two_class(samples, labels):
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels)
    out = []
    for cls in (0, 1):
        x = samples[labels == cls]
        if len(x) < 2:
            raise DegenerateClass(f"class {cls} has {len(x)} traces; need at least 2")
        out.append(x)
    return out


def t_first_order(ts, threshold: float = THRESHOLD) -> TvlaReport:
    """Two-pass first-order test on an in-memory trace set."""
    f, r = _two_class(ts.samples, ts.labels)
    t, flag = welch(f.mean(0), f.var(0, ddof=1), len(f), r.mean(0), r.var(0, ddof=1), len(r))
    return TvlaReport(t, threshold, list(ts.windows), flag, 1)


def t_second_order(ts, threshold: float = THRESHOLD) -> TvlaReport:
    """Centre each class on its own mean, square, then run the first-order test."""
    f, r = _two_class(ts.samples, ts.labels)
    yf = (f - f.mean(0)) ** 2
    yr = (r - r.mean(0)) ** 2
    t, flag = welch(yf.mean(0), yf.var(0, ddof=1), len(yf), yr.mean(0), yr.var(0, ddof=1), len(yr))
    return TvlaReport(t, threshold, list(ts.windows), flag, 2)


def report_from(acc: MomentAccumulator, order: int = 1, threshold: float = THRESHOLD, windows=()) -> TvlaReport:
    t, flag = acc.t_first() if order == 1 else acc.t_second()
    return TvlaReport(t, threshold, list(windows), flag, order)


def verdict(report: TvlaReport, excluded_windows=None) -> tuple[str, list[int]]:
    """PASS iff every sample outside the excluded windows satisfies |t| <= threshold.

    Returns the verdict and the offending indices; exceedances inside excluded
    windows are reported through a warning.
    """
    keep = report.mask(excluded_windows)
    over = np.abs(report.t) > report.threshold
    inside = np.nonzero(over & ~keep)[0]
    if inside.size:
        warnings.warn(f"|t| above {report.threshold} inside excluded windows at samples {inside.tolist()[:20]}",
                      stacklevel=2)
    bad = np.nonzero(over & keep)[0]
    return ("FAIL" if bad.size else "PASS"), bad.tolist()
