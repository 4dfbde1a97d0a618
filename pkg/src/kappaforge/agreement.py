"""Agreement statistics: observed agreement, Cohen's kappa, Krippendorff's alpha."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


class AgreementError(Exception):
    pass


class NoSharedUnits(AgreementError):
    pass


class FewerThanTwoUnits(AgreementError):
    pass


class OutOfRange(AgreementError):
    pass


class NoPairableValues(AgreementError):
    pass


class ZeroExpectedDisagreement(AgreementError):
    """All pairable values are identical, so alpha is undefined."""


class DegenerateData(AgreementError):
    pass


@dataclass(frozen=True)
class LabelVector:
    coder_id: str
    labels: Mapping[str, str]
    domain: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.domain is not None:
            stray = {v for v in self.labels.values() if v not in self.domain}
            if stray:
                raise AgreementError(f"{self.coder_id}: labels outside domain: {sorted(stray)}")


def _shared(a: LabelVector, b: LabelVector) -> list[str]:
    units = sorted(a.labels.keys() & b.labels.keys())
    if not units:
        raise NoSharedUnits(f"{a.coder_id} and {b.coder_id} share no units")
    return units


def observed_agreement(a: LabelVector, b: LabelVector) -> float:
    units = _shared(a, b)
    return sum(a.labels[u] == b.labels[u] for u in units) / len(units)


BANDS = (
    # (upper bound inclusive, name)
    (0.20, "Slight"),
    (0.40, "Fair"),
    (0.60, "Moderate"),
    (0.80, "Substantial"),
    (1.00, "AlmostPerfect"),
)


def landis_koch_band(kappa: float) -> str:
    if math.isnan(kappa) or kappa < -1.0 or kappa > 1.0:
        raise OutOfRange(f"kappa {kappa} outside [-1, 1]")
    if kappa < 0:
        return "NoAgreement"
    for upper, name in BANDS:
        if kappa <= upper:
            return name
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class KappaResult:
    p_o: float
    p_e: float
    kappa: float
    band: str
    degenerate: bool
    n_units: int


def cohen_kappa(a: LabelVector, b: LabelVector) -> KappaResult:
    units = _shared(a, b)
    n = len(units)
    if n < 2:
        raise FewerThanTwoUnits(f"{a.coder_id} and {b.coder_id} share only {n} unit")
    xs = [a.labels[u] for u in units]
    ys = [b.labels[u] for u in units]
    agree = sum(x == y for x, y in zip(xs, ys))
    rows, cols = Counter(xs), Counter(ys)
    # Integer arithmetic until the final divisions.
    chance = sum(rows[c] * cols[c] for c in rows)
    p_o = agree / n
    p_e = chance / (n * n)
    if chance == n * n:
        kappa = 1.0 if agree == n else 0.0
        return KappaResult(p_o, p_e, kappa, landis_koch_band(kappa), True, n)
    kappa = (agree * n - chance) / (n * n - chance)
    return KappaResult(p_o, p_e, kappa, landis_koch_band(kappa), False, n)


@dataclass(frozen=True)
class BootstrapCI:
    lo: float
    hi: float
    level: float
    n_resamples: int
    seed: int


@dataclass(frozen=True)
class AlphaResult:
    alpha: float
    observed_disagreement: float
    expected_disagreement: float
    n_pairable: int
    ci: BootstrapCI | None = None


@dataclass(frozen=True)
class ReliabilityData:
    """Units x categories value counts; only units with >= 2 values kept."""

    unit_ids: tuple[str, ...]
    categories: tuple[str, ...]
    counts: np.ndarray


def reliability_data(vectors: Sequence[LabelVector], domain: Sequence[str] | None = None) -> ReliabilityData:
    if len(vectors) < 2:
        raise AgreementError("need at least two coders")
    seen = sorted({v for vec in vectors for v in vec.labels.values()})
    if domain is None:
        categories = tuple(seen)
    else:
        categories = tuple(domain)
        stray = set(seen) - set(categories)
        if stray:
            raise AgreementError(f"labels outside domain: {sorted(stray)}")
    index = {c: i for i, c in enumerate(categories)}
    units = sorted({u for vec in vectors for u in vec.labels})
    counts = np.zeros((len(units), len(categories)), dtype=np.int64)
    row = {u: i for i, u in enumerate(units)}
    for vec in vectors:
        for unit, value in vec.labels.items():
            counts[row[unit], index[value]] += 1
    keep = counts.sum(axis=1) >= 2
    return ReliabilityData(tuple(u for u, k in zip(units, keep) if k), categories, counts[keep])


def _alpha_components(counts: np.ndarray) -> tuple[float, float, float, int]:
    m = counts.sum(axis=1)
    counts = counts[m >= 2]
    m = m[m >= 2]
    n = int(m.sum())
    if n == 0:
        raise NoPairableValues("no unit has two or more values")
    # Coincidences: o_ck = sum_u n_uc (n_uk - [c == k]) / (m_u - 1)
    weights = counts / (m - 1)[:, None]
    coincidence = weights.T @ counts - np.diag(weights.sum(axis=0))
    n_c = coincidence.sum(axis=0)
    off_diagonal = ~np.eye(len(n_c), dtype=bool)
    observed = coincidence[off_diagonal].sum() / n
    expected = (n_c.sum() ** 2 - (n_c**2).sum()) / (n * (n - 1))
    if expected <= 0:
        raise ZeroExpectedDisagreement("all pairable values identical; alpha undefined")
    return 1.0 - observed / expected, float(observed), float(expected), n


def alpha_from_counts(counts: np.ndarray) -> float:
    return _alpha_components(np.asarray(counts))[0]


def krippendorff_alpha(vectors: Sequence[LabelVector], domain: Sequence[str] | None = None) -> AlphaResult:
    """Nominal Krippendorff's alpha over any number of coders.

    Units missing from a coder's labels are missing values; units with fewer
    than two values are not pairable and drop out.
    """
    data = reliability_data(vectors, domain)
    alpha, d_o, d_e, n = _alpha_components(data.counts)
    return AlphaResult(float(alpha), d_o, d_e, n)


def nearest_rank(sorted_values: Sequence[float], p: float) -> float:
    n = len(sorted_values)
    # round() guards against 0.025 * 1000 -> 25.000000000000004
    rank = max(1, math.ceil(round(p * n, 9)))
    return sorted_values[min(rank, n) - 1]


def bootstrap_ci(
    vectors: Sequence[LabelVector],
    domain: Sequence[str] | None = None,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    max_redraws: int | None = None,
) -> BootstrapCI:
    """Percentile bootstrap CI for alpha, resampling units with replacement.

    Resample ``i`` draws from its own generator seeded with ``(seed, i, try)``,
    so the result depends only on ``seed``. Resamples where alpha is undefined
    are redrawn, at most ``max_redraws`` times in total.
    """
    data = reliability_data(vectors, domain)
    _alpha_components(data.counts)
    return bootstrap_counts(data.counts, n_resamples, level, seed, max_redraws)


def bootstrap_counts(
    counts: np.ndarray,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    max_redraws: int | None = None,
) -> BootstrapCI:
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if max_redraws is None:
        max_redraws = 10 * n_resamples
    n_units = counts.shape[0]
    stats = []
    redraws = 0
    for i in range(n_resamples):
        attempt = 0
        while True:
            rng = np.random.default_rng([seed, i, attempt])
            sample = counts[rng.integers(0, n_units, size=n_units)]
            try:
                stats.append(alpha_from_counts(sample))
                break
            except (ZeroExpectedDisagreement, NoPairableValues):
                redraws += 1
                attempt += 1
                if redraws > max_redraws:
                    raise DegenerateData(f"gave up after {redraws} undefined resamples")
    stats.sort()
    tail = (1 - level) / 2
    return BootstrapCI(nearest_rank(stats, tail), nearest_rank(stats, 1 - tail), level, n_resamples, seed)


@dataclass
class AgreementMatrix:
    coders: tuple[str, ...]
    kappa: list[list[float | None]]
    observed: list[list[float | None]]
    n: list[list[int | None]]
    errors: dict[tuple[str, str], str] = field(default_factory=dict)

    def cell(self, metric: str, a: str, b: str):
        grid = getattr(self, metric)
        return grid[self.coders.index(a)][self.coders.index(b)]

    def to_csv(self, metric: str, digits: int = 4) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["coder", *self.coders])
        for name, row in zip(self.coders, getattr(self, metric)):
            writer.writerow([name, *(_fmt(v, digits) for v in row)])
        return buf.getvalue()

    def bands_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["coder_a", "coder_b", "kappa", "band", "observed", "n"])
        for i, a in enumerate(self.coders):
            for j in range(i + 1, len(self.coders)):
                k = self.kappa[i][j]
                band = landis_koch_band(k) if k is not None else "unavailable"
                writer.writerow([a, self.coders[j], _fmt(k, 4), band, _fmt(self.observed[i][j], 4), _fmt(self.n[i][j], 0)])
        return buf.getvalue()


def _fmt(value, digits: int) -> str:
    if value is None:
        return "NA"
    if isinstance(value, int):
        return str(value)
    return f"{value:.{digits}f}"


def pairwise_matrix(vectors: Sequence[LabelVector]) -> AgreementMatrix:
    if len(vectors) < 2:
        raise AgreementError("need at least two coders")
    size = len(vectors)
    kappa = [[None] * size for _ in range(size)]
    observed = [[None] * size for _ in range(size)]
    n = [[None] * size for _ in range(size)]
    errors = {}
    for i in range(size):
        for j in range(i, size):
            a, b = vectors[i], vectors[j]
            try:
                result = cohen_kappa(a, b)
            except AgreementError as exc:
                errors[(a.coder_id, b.coder_id)] = type(exc).__name__
                continue
            for x, y in ((i, j), (j, i)):
                kappa[x][y] = result.kappa
                observed[x][y] = result.p_o
                n[x][y] = result.n_units
    return AgreementMatrix(tuple(v.coder_id for v in vectors), kappa, observed, n, errors)
