"""Dataless quality metrics over prototype feature vectors.

``metric_g`` is one minus the mean pairwise cosine similarity of the class
prototypes' features; ``metric_adv`` is one minus the mean cosine similarity
between each prototype's features and those of its DeepFool adversary. Both
are computed per seed and then averaged across seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DEFAULT_THRESHOLD_G = 0.8
DEFAULT_THRESHOLD_ADV = 0.35


class DegenerateFeatures(ValueError):
    pass


def cosine_similarity(v1, v2) -> float:
    a = np.asarray(v1, dtype=np.float64).ravel()
    b = np.asarray(v2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = math.sqrt(a @ a), math.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateFeatures("degenerate feature vector (zero norm)")
    return float(a @ b / (na * nb))


# Row norms, Gram entries and the Gram mean use math.fsum (correctly rounded),
# so every value is independent of class order bit for bit.


def gram_rows(features) -> np.ndarray:
    """Normalise each class's feature vector (rows of a K x D array) to unit length."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    norms = np.array([math.sqrt(math.fsum(row * row)) for row in f])
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateFeatures(f"degenerate feature vector for class {int(zero[0])}")
    return f / norms[:, None]


def gram_matrix(g: np.ndarray) -> np.ndarray:
    """G G^T: cosine similarities between all pairs of unit rows."""
    k = g.shape[0]
    out = np.empty((k, k))
    for a in range(k):
        for b in range(a, k):
            out[a, b] = out[b, a] = math.fsum(g[a] * g[b])
    return out


def metric_g(g: np.ndarray) -> float:
    """1 - mean of all K^2 entries of G G^T (diagonal included)."""
    ggt = gram_matrix(g)
    return float(1.0 - math.fsum(ggt.ravel()) / ggt.size)


def adversary_similarities(proto_features, adv_features) -> np.ndarray:
    return np.array([cosine_similarity(p, a) for p, a in zip(proto_features, adv_features)])


def metric_adv(proto_features, adv_features) -> float:
    """1 - mean cosine similarity over prototype/adversary pairs (failed attacks already removed)."""
    proto_features = list(proto_features)
    adv_features = list(adv_features)
    if len(proto_features) != len(adv_features):
        raise ValueError("prototype and adversary lists differ in length")
    if not proto_features:
        raise ValueError("no adversaries available")
    return float(1.0 - adversary_similarities(proto_features, adv_features).mean())


@dataclass(frozen=True)
class Aggregate:
    mean: float
    min: float
    max: float
    count: int


def aggregate_over_seeds(values: Sequence[float]) -> Aggregate:
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("no per-seed values to aggregate")
    return Aggregate(sum(vals) / len(vals), min(vals), max(vals), len(vals))


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-d sequences of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("undefined correlation (zero variance)")
    r = (dx @ dy) / math.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def verdicts(m_g: float, m_adv: float, threshold_g: float = DEFAULT_THRESHOLD_G,
             threshold_adv: float = DEFAULT_THRESHOLD_ADV) -> tuple[bool, bool]:
    """(accuracy verdict, robustness verdict); both thresholds are inclusive."""
    return bool(m_g >= threshold_g), bool(m_adv >= threshold_adv)


@dataclass
class MetricReport:
    classes: int
    seeds: tuple[int, ...]
    m_g: float
    m_g_spread: tuple[float, float]
    m_adv: float
    m_adv_spread: tuple[float, float]
    ggt: np.ndarray = field(repr=False)  # seed-averaged K x K similarity matrix
    per_class_adv_similarity: np.ndarray = field(repr=False)  # NaN where every attack failed
    attacks_total: int
    excluded_attack_failures: int
    nonnegative_features: bool
    threshold_g: float = DEFAULT_THRESHOLD_G
    threshold_adv: float = DEFAULT_THRESHOLD_ADV

    @property
    def verdict_accuracy(self) -> bool:
        return verdicts(self.m_g, self.m_adv, self.threshold_g, self.threshold_adv)[0]

    @property
    def verdict_robustness(self) -> bool:
        return verdicts(self.m_g, self.m_adv, self.threshold_g, self.threshold_adv)[1]

    @property
    def m_g_ceiling(self) -> float:
        # the diagonal ones in the K^2 mean cap M_g at 1 - 1/K
        return 1.0 - 1.0 / self.classes

    def summary_line(self) -> str:
        a, r = self.verdict_accuracy, self.verdict_robustness
        return f"M_g={self.m_g:.6f} M_adv={self.m_adv:.6f} verdicts={str(a).lower()},{str(r).lower()}"


def compute_report(proto_features: dict, adv_features: dict, classes: int, seeds: Sequence[int],
                   threshold_g: float = DEFAULT_THRESHOLD_G,
                   threshold_adv: float = DEFAULT_THRESHOLD_ADV) -> MetricReport:
    """Per-seed M_g / M_adv averaged over seeds.

    ``proto_features`` maps (class, seed) to a feature vector.
    ``adv_features`` maps (class, seed) to the adversary's feature vector, or
    to None when the attack failed; failed pairs are excluded and counted.
    """
    seeds = tuple(seeds)
    grams, g_vals, adv_vals = [], [], []
    sims = np.zeros((classes, len(seeds)))
    sims[:] = np.nan
    nonneg = True
    failures = 0
    for j, s in enumerate(seeds):
        feats = np.stack([np.asarray(proto_features[(k, s)], dtype=np.float64) for k in range(classes)])
        nonneg &= bool(np.all(feats >= 0))
        g = gram_rows(feats)
        grams.append(gram_matrix(g))
        g_vals.append(metric_g(g))
        pairs = []
        for k in range(classes):
            adv = adv_features.get((k, s))
            if adv is None:
                failures += 1
                continue
            adv = np.asarray(adv, dtype=np.float64)
            nonneg &= bool(np.all(adv >= 0))
            sims[k, j] = cosine_similarity(feats[k], adv)
            pairs.append(sims[k, j])
        if pairs:
            adv_vals.append(1.0 - float(np.mean(pairs)))
    if not adv_vals:
        raise ValueError("no adversaries available")
    mg = aggregate_over_seeds(g_vals)
    ma = aggregate_over_seeds(adv_vals)
    with np.errstate(invalid="ignore"):
        per_class = np.array([np.nan if np.all(np.isnan(r)) else np.nanmean(r) for r in sims])
    return MetricReport(
        classes=classes, seeds=seeds,
        m_g=mg.mean, m_g_spread=(mg.min, mg.max),
        m_adv=ma.mean, m_adv_spread=(ma.min, ma.max),
        ggt=np.mean(grams, axis=0), per_class_adv_similarity=per_class,
        attacks_total=classes * len(seeds), excluded_attack_failures=failures,
        nonnegative_features=nonneg, threshold_g=threshold_g, threshold_adv=threshold_adv,
    )


def format_report(report: MetricReport, header: Optional[dict] = None, timestamp: Optional[str] = None) -> str:
    """Text report: commented header, Gram block, per-class adversary block, summary line.

    ``timestamp`` (if any) is the only non-deterministic field and sits on its own line.
    """
    out = ["# protoprobe metric report"]
    if timestamp is not None:
        out.append(f"# generated={timestamp}")
    for key, value in (header or {}).items():
        out.append(f"# {key}={value}")
    out.append(f"# classes={report.classes} seeds={','.join(map(str, report.seeds))}")
    out.append(f"# thresholds: M_g>={report.threshold_g} M_adv>={report.threshold_adv}")
    out.append(f"# M_g ceiling for K={report.classes}: {report.m_g_ceiling:.6f}")
    if not report.nonnegative_features:
        out.append("# WARNING: feature layer has negative activations; metrics range over [0, 2]")
    if report.excluded_attack_failures:
        out.append(f"# WARNING: {report.excluded_attack_failures} of {report.attacks_total} "
                   f"attacks failed and were excluded from M_adv")
    out.append("[gram]")
    out.append("class," + ",".join(str(k) for k in range(report.classes)))
    for k, row in enumerate(report.ggt):
        out.append(f"{k}," + ",".join(f"{v:.6f}" for v in row))
    out.append("[adversary]")
    out.append("class,similarity")
    for k, v in enumerate(report.per_class_adv_similarity):
        out.append(f"{k}," + ("" if np.isnan(v) else f"{v:.6f}"))
    out.append("[summary]")
    out.append(f"m_g_min={report.m_g_spread[0]:.6f} m_g_max={report.m_g_spread[1]:.6f} "
               f"m_adv_min={report.m_adv_spread[0]:.6f} m_adv_max={report.m_adv_spread[1]:.6f} "
               f"attacks={report.attacks_total - report.excluded_attack_failures}/{report.attacks_total}")
    out.append(report.summary_line())
    return "\n".join(out) + "\n"
