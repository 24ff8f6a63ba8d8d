"""Distribution gaps before and after discretization.

Densities are piecewise constant on [lo, hi], so every integral is exact.
The continuous gap is ``B * integral |P - Q|`` and the gap after mapping each
interval of a uniform partition to its midpoint is
``B * sum_v |P(I_v) - Q(I_v)|``.  Since the absolute value of an integral
never exceeds the integral of the absolute value, the discrete gap can never
be larger, with equality on an interval exactly when ``P - Q`` keeps one sign
there.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .rng import Rng

NORM_TOL = 1e-12
GAP_TOL = 1e-12


class TheoremViolation(AssertionError):
    """The discrete gap exceeded the continuous gap; always an implementation bug."""


@dataclass(frozen=True)
class PiecewiseDensity:
    breakpoints: np.ndarray  # strictly increasing, length k + 1
    densities: np.ndarray  # length k, nonnegative

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=np.float64)
        d = np.asarray(self.densities, dtype=np.float64)
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "densities", d)
        if b.ndim != 1 or b.size < 2 or d.shape != (b.size - 1,):
            raise ValueError("need k+1 breakpoints for k densities")
        if not np.all(np.diff(b) > 0):
            raise ValueError("breakpoints must be strictly increasing")
        if not np.all(np.isfinite(d)) or (d < 0).any():
            raise ValueError("densities must be finite and nonnegative")
        total = float((d * np.diff(b)).sum())
        if abs(total - 1.0) > NORM_TOL:
            raise ValueError(f"density integrates to {total!r}, not 1")

    @property
    def lo(self) -> float:
        return float(self.breakpoints[0])

    @property
    def hi(self) -> float:
        return float(self.breakpoints[-1])

    def mass(self, a: float, b: float) -> float:
        """Integral over [a, b]."""
        edges = self.breakpoints
        left = np.clip(edges[:-1], a, b)
        right = np.clip(edges[1:], a, b)
        return float((self.densities * (right - left)).sum())

    @classmethod
    def normalized(cls, breakpoints, weights) -> "PiecewiseDensity":
        """Scale nonnegative cell weights into a density."""
        b = np.asarray(breakpoints, dtype=np.float64)
        w = np.asarray(weights, dtype=np.float64)
        d = w / (w * np.diff(b)).sum()
        return cls(b, d)


def uniform(lo: float, hi: float, support: tuple[float, float] | None = None) -> PiecewiseDensity:
    """Uniform on [lo, hi], optionally padded with zero density out to ``support``."""
    s_lo, s_hi = support if support else (lo, hi)
    edges = [s_lo] + [x for x in (lo, hi) if s_lo < x < s_hi] + [s_hi]
    dens = [1.0 / (hi - lo) if lo <= 0.5 * (a + b) <= hi else 0.0 for a, b in zip(edges[:-1], edges[1:])]
    return PiecewiseDensity(np.array(edges), np.array(dens))


@dataclass(frozen=True)
class Partition:
    edges: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64)
        object.__setattr__(self, "edges", e)
        if e.ndim != 1 or e.size < 2 or not np.all(np.diff(e) > 0):
            raise ValueError("partition edges must be strictly increasing")

    @classmethod
    def uniform(cls, lo: float, hi: float, k: int) -> "Partition":
        if k < 1:
            raise ValueError("need at least one interval")
        return cls(np.linspace(lo, hi, k + 1))

    @property
    def centroids(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def refines(self, coarse: "Partition") -> bool:
        """True when every coarse edge is also an edge of this partition."""
        return bool(np.all(np.isin(coarse.edges, self.edges)))


@dataclass(frozen=True)
class DiscreteDistribution:
    atoms: np.ndarray
    masses: np.ndarray
    partition: Partition


def _merged_cells(p: PiecewiseDensity, q: PiecewiseDensity, lo: float, hi: float):
    edges = np.union1d(np.union1d(p.breakpoints, q.breakpoints), [lo, hi])
    edges = edges[(edges >= lo) & (edges <= hi)]
    mids = 0.5 * (edges[:-1] + edges[1:])
    return edges, _density_at(p, mids), _density_at(q, mids)


def _density_at(p: PiecewiseDensity, x: np.ndarray) -> np.ndarray:
    cell = np.searchsorted(p.breakpoints, x, side="right") - 1
    inside = (cell >= 0) & (cell < p.densities.size)
    return np.where(inside, p.densities[np.clip(cell, 0, p.densities.size - 1)], 0.0)


def _check_support(p: PiecewiseDensity, q: PiecewiseDensity) -> None:
    if p.lo != q.lo or p.hi != q.hi:
        raise ValueError("densities must share the same support")


def continuous_gap(p: PiecewiseDensity, q: PiecewiseDensity, b_phi: float = 1.0) -> float:
    """``b_phi * integral |P - Q|`` over the shared support."""
    _check_support(p, q)
    edges, dp, dq = _merged_cells(p, q, p.lo, p.hi)
    return float(b_phi * (np.abs(dp - dq) * np.diff(edges)).sum())


def discretize(p: PiecewiseDensity, partition: Partition) -> DiscreteDistribution:
    """One atom per interval, at its midpoint, carrying the interval's mass."""
    if partition.edges[0] != p.lo or partition.edges[-1] != p.hi:
        raise ValueError("partition must cover exactly the density's support")
    masses = np.array([p.mass(a, b) for a, b in zip(partition.edges[:-1], partition.edges[1:])])
    return DiscreteDistribution(partition.centroids, masses, partition)


def discrete_gap(pd: DiscreteDistribution, qd: DiscreteDistribution, b_phi: float = 1.0) -> float:
    if pd.partition.edges.shape != qd.partition.edges.shape or not np.array_equal(pd.partition.edges, qd.partition.edges):
        raise ValueError("discrete distributions live on different partitions")
    return float(b_phi * np.abs(pd.masses - qd.masses).sum())


@dataclass
class GapReport:
    continuous_gap: float
    discrete_gap: float
    b_phi: float
    interval_continuous: list[float] = field(default_factory=list)
    interval_discrete: list[float] = field(default_factory=list)
    interval_equality: list[bool] = field(default_factory=list)

    @property
    def equality(self) -> bool:
        return abs(self.continuous_gap - self.discrete_gap) <= GAP_TOL

    def to_dict(self) -> dict:
        return {
            "continuous_gap": self.continuous_gap,
            "discrete_gap": self.discrete_gap,
            "b_phi": self.b_phi,
            "equality": self.equality,
            "intervals": [
                {"continuous": c, "discrete": d, "sign_constant": e}
                for c, d, e in zip(self.interval_continuous, self.interval_discrete, self.interval_equality)
            ],
        }


def theorem_check(p: PiecewiseDensity, q: PiecewiseDensity, partition: Partition,
                  b_phi: float = 1.0) -> GapReport:
    """Both gaps with per-interval contributions; raises on W_d > W + tol."""
    if b_phi < 0:
        raise ValueError("b_phi must be nonnegative")
    _check_support(p, q)
    pd, qd = discretize(p, partition), discretize(q, partition)
    w = continuous_gap(p, q, b_phi)
    wd = discrete_gap(pd, qd, b_phi)
    per_c, per_d, per_eq = [], [], []
    for a, b in zip(partition.edges[:-1], partition.edges[1:]):
        edges, dp, dq = _merged_cells(p, q, a, b)
        diff = dp - dq
        per_c.append(float(b_phi * (np.abs(diff) * np.diff(edges)).sum()))
        per_d.append(float(b_phi * abs(((dp - dq) * np.diff(edges)).sum())))
        per_eq.append(bool((diff >= 0).all() or (diff <= 0).all()))
    if wd > w + GAP_TOL:
        raise TheoremViolation(f"discrete gap {wd!r} exceeds continuous gap {w!r}")
    return GapReport(w, wd, b_phi, per_c, per_d, per_eq)


# -- randomized suites ---------------------------------------------------

def random_density(rng: Rng, lo: float = 0.0, hi: float = 1.0, max_cells: int = 12) -> PiecewiseDensity:
    k = 1 + int(rng.integers(1, max_cells)[0])
    inner = np.sort(rng.uniform(k - 1, lo, hi))
    edges = np.unique(np.concatenate([[lo], inner, [hi]]))
    weights = rng.uniform(edges.size - 1)
    # some empty cells so P - Q changes sign often
    weights[rng.uniform(weights.size) < 0.2] = 0.0
    if weights.sum() == 0:
        weights[0] = 1.0
    return PiecewiseDensity.normalized(edges, weights)


def sign_constant_pair(rng: Rng, partition: Partition, sub_cells: int = 4) -> tuple[PiecewiseDensity, PiecewiseDensity]:
    """Densities whose difference keeps one sign inside every partition interval.

    Q is P rescaled inside each interval to new random interval masses, so
    ``P - Q = P * (1 - Q_v / P_v)`` has a fixed sign per interval.
    """
    k = partition.edges.size - 1
    edges = np.concatenate([np.linspace(a, b, sub_cells + 1)[:-1] for a, b in zip(partition.edges[:-1], partition.edges[1:])]
                           + [partition.edges[-1:]])
    w = rng.uniform(k * sub_cells) + 0.05
    p = PiecewiseDensity.normalized(edges, w)
    p_mass = np.array([p.mass(a, b) for a, b in zip(partition.edges[:-1], partition.edges[1:])])
    q_mass = rng.uniform(k) + 0.05
    q_mass /= q_mass.sum()
    factor = np.repeat(q_mass / p_mass, sub_cells)
    q = PiecewiseDensity.normalized(edges, p.densities * factor)
    return p, q


@dataclass
class SuiteResult:
    cases: int
    violations: int
    equality_cases: int
    equality_failures: int
    max_excess: float
    max_equality_error: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def randomized_suite(seed: int = 0, n_pairs: int = 200, b_values: Sequence[float] = (0.5, 1.0, 3.0),
                     max_intervals: int = 16) -> SuiteResult:
    """Random density pairs x random uniform partitions x several B, plus equality cases."""
    rng = Rng(seed)
    violations = 0
    max_excess = -np.inf
    cases = 0
    eq_fail = 0
    eq_cases = 0
    max_eq_err = 0.0
    for _ in range(n_pairs):
        p, q = random_density(rng), random_density(rng)
        k = 1 + int(rng.integers(1, max_intervals)[0])
        part = Partition.uniform(0.0, 1.0, k)
        for b in b_values:
            cases += 1
            w = continuous_gap(p, q, b)
            wd = discrete_gap(discretize(p, part), discretize(q, part), b)
            max_excess = max(max_excess, wd - w)
            if wd > w + GAP_TOL:
                violations += 1
        ps, qs = sign_constant_pair(rng, part)
        for b in b_values:
            eq_cases += 1
            rep = theorem_check(ps, qs, part, b)
            err = abs(rep.continuous_gap - rep.discrete_gap)
            max_eq_err = max(max_eq_err, err)
            if err > GAP_TOL or not all(rep.interval_equality):
                eq_fail += 1
    return SuiteResult(cases, violations, eq_cases, eq_fail, float(max_excess), float(max_eq_err))


# -- empirical histograms ------------------------------------------------

def _histogram(labels: np.ndarray, keys: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(keys, labels)
    return np.bincount(pos, minlength=keys.size) / labels.size


def histogram_l1(labels_a, labels_b) -> float:
    """L1 distance between the normalized label histograms of two samples."""
    a = np.asarray(labels_a).reshape(-1)
    b = np.asarray(labels_b).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    keys = np.union1d(a, b)
    return float(np.abs(_histogram(a, keys) - _histogram(b, keys)).sum())


def interval_labels(x: np.ndarray, partition: Partition) -> np.ndarray:
    """Cell index per value; values beyond the ends fall in the end cells."""
    k = partition.edges.size - 1
    return np.clip(np.searchsorted(partition.edges, np.asarray(x), side="right") - 1, 0, k - 1)


Labeler = Callable[[np.ndarray], np.ndarray]


def _refines(coarse: np.ndarray, fine: np.ndarray) -> bool:
    """Every fine label occurs with a single coarse label."""
    order = np.lexsort((coarse, fine))
    f, c = fine[order], coarse[order]
    same_fine = f[1:] == f[:-1]
    return bool(np.all(c[1:][same_fine] == c[:-1][same_fine]))


def empirical_refinement_check(features_a, features_b, coarse, fine) -> tuple[float, float]:
    """Histogram L1 between two samples under a coarse and a finer partition.

    ``coarse``/``fine`` are 1-D :class:`Partition` objects or callables that
    map a feature array to integer cell labels.  Raises when ``fine`` does not
    refine ``coarse`` on the pooled samples.
    """
    a = np.asarray(features_a)
    b = np.asarray(features_b)
    if isinstance(coarse, Partition) and isinstance(fine, Partition):
        if not fine.refines(coarse):
            raise ValueError("fine partition does not refine the coarse one")
        ca, cb_ = interval_labels(a, coarse), interval_labels(b, coarse)
        fa, fb = interval_labels(a, fine), interval_labels(b, fine)
    else:
        ca, cb_ = np.asarray(coarse(a)), np.asarray(coarse(b))
        fa, fb = np.asarray(fine(a)), np.asarray(fine(b))
        if not _refines(np.concatenate([ca, cb_]), np.concatenate([fa, fb])):
            raise ValueError("fine partition does not refine the coarse one")
    l1_coarse = histogram_l1(ca, cb_)
    l1_fine = histogram_l1(fa, fb)
    if l1_coarse > l1_fine + GAP_TOL:
        raise TheoremViolation(f"coarse L1 {l1_coarse!r} exceeds fine L1 {l1_fine!r}")
    return l1_coarse, l1_fine


def dyadic_partition(lo: float, hi: float, depth: int) -> Partition:
    return Partition.uniform(lo, hi, 2 ** depth)


# -- generalization stability --------------------------------------------

def gs_metric(accuracies) -> float:
    """Square root of the summed squared deviations from the mean accuracy."""
    x = np.asarray(accuracies, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("gs_metric needs at least one accuracy")
    dev = x - x.mean()
    return float(np.sqrt((dev * dev).sum()))
