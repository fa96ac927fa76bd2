"""Verification scoring backend: cosine scores, EER, minDCF and DET points.

Decision rule everywhere: a trial is accepted when ``score >= threshold``.
False-alarm and miss rates are counted at every distinct score and at
``+inf``, which yields the full set of achievable operating points.
"""
import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass
class Trial:
    enroll_id: str
    test_id: str
    is_target: bool


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    rho: float = 0.0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels, dtype=bool).ravel()
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")

    def check_both_classes(self):
        n_tar = int(self.labels.sum())
        if n_tar == 0 or n_tar == self.labels.size:
            raise ValueError("metric needs at least one target and one non-target trial")


@dataclass(frozen=True)
class DETPoint:
    threshold: float
    far: float
    frr: float


def _vec(x):
    x = np.asarray(x.detach() if hasattr(x, "detach") else x, dtype=np.float64)
    return x.ravel()


def cosine(a, b):
    a, b = _vec(a), _vec(b)
    aa, bb = a @ a, b @ b
    if aa == 0 or bb == 0:
        raise ValueError("cosine of a zero vector")
    # one square root of the product: sqrt(fl(x * x)) == x, so cosine(a, a) is exactly 1
    denom = np.sqrt(aa * bb)
    if not np.isfinite(denom):
        denom = np.sqrt(aa) * np.sqrt(bb)
    return float(np.clip((a @ b) / denom, -1.0, 1.0))


def uncertainty_cosine(e1, e2, rho):
    """Cosine with each norm measured under ``(I + rho * Sigma)^-1``.

    Reduces to :func:`cosine` when ``rho`` is 0 or both covariances vanish;
    otherwise scores may exceed 1.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    p1, p2 = _vec(e1.phi_s), _vec(e2.phi_s)
    if rho == 0:
        return cosine(p1, p2)
    s1, s2 = _vec(e1.sigma_s), _vec(e2.sigma_s)
    if not (s1.any() or s2.any()):
        return cosine(p1, p2)
    q1 = p1 @ (p1 / (1.0 + rho * s1))
    q2 = p2 @ (p2 / (1.0 + rho * s2))
    if q1 <= 0 or q2 <= 0:
        raise ValueError("zero denominator in uncertainty-aware cosine")
    return float((p2 @ p1) / (np.sqrt(q2) * np.sqrt(q1)))


def error_counts(score_set: ScoreSet):
    """Thresholds with false-alarm and miss counts at each.

    Thresholds are the sorted unique scores followed by ``+inf``; the first
    accepts everything, the last rejects everything.
    """
    score_set.check_both_classes()
    s, lab = score_set.scores, score_set.labels
    order = np.argsort(s, kind="stable")
    s, lab = s[order], lab[order]
    uniq, first = np.unique(s, return_index=True)
    tar_below = np.concatenate([[0], np.cumsum(lab)])
    non_below = np.concatenate([[0], np.cumsum(~lab)])
    n_tar, n_non = int(lab.sum()), int((~lab).sum())
    idx = np.concatenate([first, [s.size]])
    misses = tar_below[idx]
    fas = n_non - non_below[idx]
    thresholds = np.concatenate([uniq, [np.inf]])
    return thresholds, fas.astype(np.int64), misses.astype(np.int64), n_non, n_tar


def det_curve(score_set: ScoreSet):
    thr, fa, miss, n_non, n_tar = error_counts(score_set)
    return [DETPoint(float(t), f / n_non, m / n_tar) for t, f, m in zip(thr, fa, miss)]


def eer_from_counts(fa, miss, n_non, n_tar):
    """EER by linear interpolation where FRR - FAR first becomes >= 0.

    Counts are integers ordered by increasing threshold; the crossing is
    located and interpolated in exact rational arithmetic.
    """
    fa, miss = [int(v) for v in fa], [int(v) for v in miss]
    # sign of FRR - FAR without rounding: miss/n_tar - fa/n_non
    gap = [m * n_non - f * n_tar for f, m in zip(fa, miss)]
    k = next(i for i, g in enumerate(gap) if g >= 0)
    if gap[k] == 0 or k == 0:
        return float(Fraction(fa[k], n_non))
    far1, frr1 = Fraction(fa[k - 1], n_non), Fraction(miss[k - 1], n_tar)
    far2, frr2 = Fraction(fa[k], n_non), Fraction(miss[k], n_tar)
    d1, d2 = frr1 - far1, frr2 - far2
    t = d1 / (d1 - d2)
    return float(far1 + t * (far2 - far1))


def eer(score_set: ScoreSet):
    _, fa, miss, n_non, n_tar = error_counts(score_set)
    return eer_from_counts(fa, miss, n_non, n_tar)


def min_dcf(score_set: ScoreSet, p_target=0.01, c_miss=1.0, c_fa=1.0):
    """Normalized minimum detection cost over all operating points.

    The sweep is evaluated in exact rational arithmetic (float inputs are
    converted exactly), so the minimum does not depend on summation order.
    """
    if not 0 < p_target < 1:
        raise ValueError("p_target must lie in (0, 1)")
    if c_miss <= 0 or c_fa <= 0:
        raise ValueError("costs must be positive")
    _, fa, miss, n_non, n_tar = error_counts(score_set)
    w_miss = Fraction(c_miss) * Fraction(p_target) / n_tar
    w_fa = Fraction(c_fa) * (1 - Fraction(p_target)) / n_non
    best = min(w_miss * int(m) + w_fa * int(f) for f, m in zip(fa, miss))
    norm = min(Fraction(c_miss) * Fraction(p_target), Fraction(c_fa) * (1 - Fraction(p_target)))
    return float(best / norm)


def read_trials(path):
    trials = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                raise ValueError(f"{path}:{n}: expected 'enroll test target|nontarget'")
            trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
    return trials


def write_trials(path, trials):
    with open(path, "w") as fh:
        for t in trials:
            fh.write(f"{t.enroll_id} {t.test_id} {'target' if t.is_target else 'nontarget'}\n")


def score_trials(trials, embeddings, rho=0.0):
    """Score every trial; ``embeddings`` maps utterance id to an embedding."""
    scores = np.empty(len(trials))
    for i, t in enumerate(trials):
        try:
            e1, e2 = embeddings[t.enroll_id], embeddings[t.test_id]
        except KeyError as err:
            raise KeyError(f"trial {i}: unknown utterance {err.args[0]!r}") from None
        scores[i] = uncertainty_cosine(e1, e2, rho)
    return ScoreSet(scores, np.array([t.is_target for t in trials]), rho)


def write_scores(path, trials, score_set: ScoreSet):
    with open(path, "w") as fh:
        for t, s in zip(trials, score_set.scores):
            fh.write(f"{t.enroll_id} {t.test_id} {float(s)!r}\n")


def write_metrics(path, record):
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_det_csv(path, points):
    with open(path, "w") as fh:
        fh.write("threshold,far,frr\n")
        for p in points:
            fh.write(f"{p.threshold!r},{p.far!r},{p.frr!r}\n")
