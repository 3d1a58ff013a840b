"""Ranking evaluation, composer probe, and the summary statistics for both.

The p-values rest on a local regularized incomplete beta function so the
statistics here stay independent of the reference libraries the test suite
compares them against.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .errors import DegenerateSamples, EmptyInput, InsufficientData
from .nn import ELU, SGD, Linear, Sequential, softmax, softmax_cross_entropy

# --------------------------------------------------------------------------
# ranking
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RankOutcome:
    trial: int
    rank: int


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def rank_trial(prediction, true_embedding, negatives, trial: int = 0) -> RankOutcome:
    """1 + number of negatives at least as similar to the prediction as the target.

    Ties count against the target.
    """
    p = _unit_rows(np.asarray(prediction, dtype=np.float64))
    sim_true = float(_unit_rows(np.asarray(true_embedding, dtype=np.float64)) @ p)
    sims = _unit_rows(np.asarray(negatives, dtype=np.float64)) @ p
    return RankOutcome(trial, 1 + int(np.count_nonzero(sims >= sim_true)))


def sample_pool(rng: np.random.Generator, pool_size: int, n_candidates: int, exclude: int) -> np.ndarray:
    """``n_candidates`` distinct pool indices, never ``exclude``."""
    if n_candidates > pool_size - 1:
        raise InsufficientData(f"pool of {pool_size} cannot supply {n_candidates} negatives")
    pick = rng.choice(pool_size - 1, size=n_candidates, replace=False)
    return pick + (pick >= exclude)


def run_ranking(predictions, targets, target_pool_idx, pool, n_negatives: int, seed: int, trial_ids=None):
    """Rank each prediction against its target plus ``n_negatives`` pool draws.

    ``target_pool_idx[i]`` is the pool position whose content equals the
    target, excluded from the draw. Each trial seeds its own stream from
    ``(seed, trial id)``.
    """
    trial_ids = range(len(predictions)) if trial_ids is None else trial_ids
    out = []
    for k, tid in enumerate(trial_ids):
        rng = np.random.default_rng([int(seed), int(tid)])
        neg = pool[sample_pool(rng, len(pool), n_negatives, int(target_pool_idx[k]))]
        out.append(rank_trial(predictions[k], targets[k], neg, int(tid)))
    return out


# --------------------------------------------------------------------------
# descriptive statistics
# --------------------------------------------------------------------------


@dataclass
class RankSummary:
    n: int
    median: float
    spread: float  # interquartile range
    skew: float  # adjusted Fisher-Pearson
    mean: float
    std: float
    q1: float
    q3: float

    def to_dict(self) -> dict:
        return asdict(self)


def quantile(sorted_values, p: float) -> float:
    """Linear interpolation between order statistics at position (n-1)p."""
    n = len(sorted_values)
    h = (n - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, n - 1)
    return float(sorted_values[lo] + (h - lo) * (sorted_values[hi] - sorted_values[lo]))


def adjusted_skew(values) -> float:
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    d = x - x.mean()
    m2 = float(np.mean(d**2))
    if n < 3 or m2 == 0.0:
        return 0.0
    g1 = float(np.mean(d**3)) / m2**1.5
    return g1 * math.sqrt(n * (n - 1)) / (n - 2)


def summarize_ranks(outcomes) -> RankSummary:
    ranks = [o.rank if isinstance(o, RankOutcome) else o for o in outcomes]
    if len(ranks) < 2:
        raise InsufficientData("need at least two ranks")
    s = sorted(float(r) for r in ranks)
    q1, q3 = quantile(s, 0.25), quantile(s, 0.75)
    arr = np.array(s)
    return RankSummary(
        n=len(s),
        median=quantile(s, 0.5),
        spread=q3 - q1,
        skew=adjusted_skew(arr),
        mean=float(arr.mean()),
        std=float(arr.std(ddof=1)),
        q1=q1,
        q3=q3,
    )


def boxplot_stats(values) -> dict:
    """Quartiles, 1.5-IQR whiskers and outliers for one sample."""
    s = sorted(float(v) for v in values)
    q1, med, q3 = quantile(s, 0.25), quantile(s, 0.5), quantile(s, 0.75)
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = [v for v in s if lo_fence <= v <= hi_fence]
    return {
        "q1": q1,
        "median": med,
        "q3": q3,
        "whisker_low": inside[0],
        "whisker_high": inside[-1],
        "outliers": [v for v in s if v < lo_fence or v > hi_fence],
    }


# --------------------------------------------------------------------------
# special functions
# --------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float, max_iter: int = 100000, eps: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided(t: float, df: float) -> float:
    if not math.isfinite(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def f_sf(w: float, d1: float, d2: float) -> float:
    """Upper tail P(F > w) of the F(d1, d2) distribution."""
    if w <= 0.0:
        return 1.0
    return betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * w))


# --------------------------------------------------------------------------
# hypothesis tests
# --------------------------------------------------------------------------


def welch_t_test(a, b) -> tuple[float, float]:
    """Welch's unequal-variance t statistic and two-sided p-value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DegenerateSamples("each sample needs at least two values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0.0:
        raise DegenerateSamples("both samples have zero variance")
    t = float((a.mean() - b.mean()) / math.sqrt(se2))
    df = float(se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1)))
    return t, student_t_two_sided(t, df)


def levene_test(groups, center: str = "mean") -> tuple[float, float]:
    """Levene's W for equal variances (``center="median"`` for Brown-Forsythe)."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    k = len(groups)
    if k < 2 or any(g.size < 2 for g in groups):
        raise DegenerateSamples("need at least two groups of at least two values")
    loc = np.mean if center == "mean" else np.median
    z = [np.abs(g - loc(g)) for g in groups]
    n_i = np.array([g.size for g in z], dtype=np.float64)
    n = float(n_i.sum())
    zbar_i = np.array([g.mean() for g in z])
    zbar = float(sum(g.sum() for g in z)) / n
    num = (n - k) * float(np.sum(n_i * (zbar_i - zbar) ** 2))
    den = (k - 1) * float(sum(np.sum((g - m) ** 2) for g, m in zip(z, zbar_i)))
    if den == 0.0:
        raise DegenerateSamples("all absolute deviations are equal within groups")
    w = num / den
    return w, f_sf(w, k - 1, n - k)


@dataclass
class BonferroniResult:
    alpha: float
    m: int
    threshold: float
    significant: list[bool]


def bonferroni(p_values, m: int, alpha: float = 0.05, threshold: float | None = None) -> BonferroniResult:
    """Flag ``p < alpha / m`` (or an explicit ``threshold``)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    thr = alpha / m if threshold is None else threshold
    return BonferroniResult(alpha, m, thr, [float(p) < thr for p in p_values])


def pairwise_comparisons(samples: dict, alpha: float = 0.05, m: int | None = None) -> list[dict]:
    names = list(samples)
    pairs = list(combinations(names, 2))
    m = len(pairs) if m is None else m
    rows = []
    for x, y in pairs:
        t, p = welch_t_test(samples[x], samples[y])
        rows.append({"a": x, "b": y, "t": t, "p": p})
    flags = bonferroni([r["p"] for r in rows], m, alpha)
    for r, f in zip(rows, flags.significant):
        r.update(alpha=alpha, m=m, threshold=flags.threshold, significant=f)
    return rows


# --------------------------------------------------------------------------
# classification metrics and the composer probe
# --------------------------------------------------------------------------


@dataclass
class F1Report:
    micro_f1: float
    macro_f1: float  # unweighted mean over classes
    weighted_f1: float  # support-weighted mean over classes
    per_class: list[float] = field(default_factory=list)
    support: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def f1_scores(predictions, labels, n_classes: int) -> F1Report:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.size == 0 or pred.shape != true.shape:
        raise EmptyInput("need equal-length, non-empty prediction and label lists")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    per_class = np.divide(2 * tp, denom, out=np.zeros(n_classes), where=denom > 0)
    support = conf.sum(axis=1)
    micro_den = 2 * tp.sum() + fp.sum() + fn.sum()
    micro = float(2 * tp.sum() / micro_den) if micro_den else 0.0
    weighted = float((per_class * support).sum() / support.sum())
    return F1Report(micro, float(per_class.mean()), weighted, per_class.tolist(), support.tolist())


@dataclass
class ProbeHParams:
    hidden: int = 50
    lr: float = 0.1
    epochs: int = 100
    batch: int = 100
    clip: float = 5.0


class ComposerProbe:
    """Embedding -> 50 ELU units -> softmax over composers."""

    def __init__(self, input_dim: int, n_classes: int, hidden: int = 50, seed: int = 0):
        rng = np.random.default_rng([seed, 11])
        self.net = Sequential(
            [Linear(input_dim, hidden, rng, name="probe.hidden"), ELU(), Linear(hidden, n_classes, rng, name="probe.out")]
        )

    def fit(self, x, y, hp: ProbeHParams, seed: int = 0) -> list[float]:
        rng = np.random.default_rng([seed, 12])
        opt = SGD(self.net.parameters(), lr=hp.lr, clip_norm=hp.clip)
        history = []
        for _ in range(hp.epochs):
            perm = rng.permutation(len(x))
            total = 0.0
            for s in range(0, len(x), hp.batch):
                idx = perm[s : s + hp.batch]
                opt.zero_grad()
                loss, d = softmax_cross_entropy(self.net.forward(x[idx]), y[idx])
                self.net.backward(d)
                opt.step()
                total += loss * len(idx)
            history.append(total / len(x))
        return history

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.net.forward(np.asarray(x, dtype=np.float64), train=False))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)


def eval_classifier(train_x, train_y, test_x, test_y, n_classes: int, seed: int = 0, hp: ProbeHParams | None = None):
    """Train a probe on frozen embeddings; returns ``(probe, F1Report, loss history)``."""
    hp = hp or ProbeHParams()
    probe = ComposerProbe(train_x.shape[1], n_classes, hp.hidden, seed)
    history = probe.fit(np.asarray(train_x, dtype=np.float64), np.asarray(train_y), hp, seed)
    report = f1_scores(probe.predict(test_x), test_y, n_classes)
    return probe, report, history
