"""Evaluation metrics: Dice, detection matching/F1/FROC, Pearson r, C-index, Cox fit.

Conventions: Dice of two empty masks is 1.0; the C-index is Harrell's
(pairs tied in time are not comparable, ties in risk score count one half);
tied event times in the Cox partial likelihood use Breslow's approximation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .detection import Detection, priority_order
from .errors import ConvergenceError, DivergingBetaError, ShapeError, UndefinedMetricError
from .raster import LABEL_IGNORE, LABEL_STROMA, LABEL_TUMOR, Raster, Resolution

DEFAULT_FP_RATES = (10.0, 20.0, 50.0, 100.0, 200.0, 300.0)


def _arr(m):
    return np.asarray(m.data if isinstance(m, Raster) else m)


def dice(a, b) -> float:
    a, b = _arr(a).astype(bool), _arr(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"dice needs equal shapes, got {a.shape} and {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def tumor_stroma_dice(pred, gt) -> float:
    """Mean of tumor-vs-rest and stroma-vs-rest Dice; ignore-labelled pixels are excluded."""
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    valid = (g != LABEL_IGNORE) & (p != LABEL_IGNORE)
    tumor = dice((p == LABEL_TUMOR) & valid, (g == LABEL_TUMOR) & valid)
    stroma = dice((p == LABEL_STROMA) & valid, (g == LABEL_STROMA) & valid)
    return (tumor + stroma) / 2.0


@dataclass
class MatchResult:
    tp_pairs: list  # (pred index, gt index)
    false_positives: list  # pred indices
    false_negatives: list  # gt indices
    hit_radius_um: float = 4.0

    @property
    def tp(self):
        return len(self.tp_pairs)

    @property
    def fp(self):
        return len(self.false_positives)

    @property
    def fn(self):
        return len(self.false_negatives)


def _points(items):
    out = []
    for it in items:
        if isinstance(it, Detection):
            out.append((it.x, it.y))
        else:
            out.append((float(it[0]), float(it[1])))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _as_detections(pred):
    return [p if isinstance(p, Detection) else Detection(float(p[0]), float(p[1]), float(p[2]) if len(p) > 2 else 1.0)
            for p in pred]


def match_detections(pred, gt, hit_radius_um: float = 4.0, res: Resolution | None = None) -> MatchResult:
    """Greedy one-to-one matching.

    Predictions are visited by descending probability; each claims the
    nearest still-unclaimed ground-truth point within the hit radius.
    """
    res = res or Resolution()
    pred = _as_detections(pred)
    gt_pts = _points(gt)
    radius = hit_radius_um / res.mpp_x
    claimed = np.zeros(len(gt_pts), dtype=bool)
    pairs, fps = [], []
    tree = cKDTree(gt_pts) if len(gt_pts) else None
    for i in (priority_order(pred) if pred else []):
        d = pred[i]
        best = None
        if tree is not None:
            cand = tree.query_ball_point((d.x, d.y), radius * (1 + 1e-9) + 1e-9)
            best_d2 = None
            for j in sorted(cand):
                if claimed[j]:
                    continue
                d2 = (gt_pts[j, 0] - d.x) ** 2 + (gt_pts[j, 1] - d.y) ** 2
                if d2 <= radius * radius and (best_d2 is None or d2 < best_d2):
                    best, best_d2 = j, d2
        if best is None:
            fps.append(int(i))
        else:
            claimed[best] = True
            pairs.append((int(i), int(best)))
    fns = [int(j) for j in np.flatnonzero(~claimed)]
    return MatchResult(pairs, fps, fns, hit_radius_um)


def detection_f1(match: MatchResult) -> float:
    denom = 2 * match.tp + match.fp + match.fn
    if denom == 0:
        return 1.0
    return 2 * match.tp / denom


@dataclass
class FrocCurve:
    thresholds: np.ndarray
    sensitivity: np.ndarray
    fp_per_mm2: np.ndarray
    fp_rates: tuple = DEFAULT_FP_RATES
    sensitivities_at_rates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def score(self) -> float:
        return float(np.mean(self.sensitivities_at_rates))


def froc_curve(preds_per_slide, gts_per_slide, areas_mm2, fp_rates=DEFAULT_FP_RATES,
               hit_radius_um: float = 4.0, resolutions=None) -> FrocCurve:
    """Cohort FROC operating points from a sweep over prediction probabilities.

    The first operating point (threshold +inf) has no detections. The
    sensitivity at a listed FP density is the best sensitivity among
    operating points at or below that density.
    """
    if not (len(preds_per_slide) == len(gts_per_slide) == len(areas_mm2)):
        raise ShapeError("FROC needs one prediction list, ground-truth list and area per slide")
    if not len(fp_rates):
        raise UndefinedMetricError("FROC needs at least one FP rate")
    total_gt = sum(len(g) for g in gts_per_slide)
    if total_gt == 0:
        raise UndefinedMetricError("FROC is undefined without ground-truth detections")
    total_area = float(sum(areas_mm2))
    if total_area <= 0:
        raise UndefinedMetricError("FROC needs a positive total area")
    resolutions = resolutions or [Resolution()] * len(preds_per_slide)

    probs, is_tp = [], []
    for pred, gt, res in zip(preds_per_slide, gts_per_slide, resolutions):
        pred = _as_detections(pred)
        m = match_detections(pred, gt, hit_radius_um, res)
        hit = np.zeros(len(pred), dtype=bool)
        hit[[i for i, _ in m.tp_pairs]] = True
        probs.extend(d.probability for d in pred)
        is_tp.extend(hit.tolist())
    probs = np.asarray(probs, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)

    order = np.argsort(-probs, kind="stable")
    probs, is_tp = probs[order], is_tp[order]
    cum_tp = np.cumsum(is_tp)
    cum_fp = np.cumsum(~is_tp)
    # keep the last index of each run of equal probability: a threshold admits all ties
    if len(probs):
        last = np.flatnonzero(np.append(probs[1:] != probs[:-1], True))
    else:
        last = np.zeros(0, dtype=np.int64)
    thresholds = np.concatenate([[np.inf], probs[last]])
    sens = np.concatenate([[0.0], cum_tp[last] / total_gt])
    fpd = np.concatenate([[0.0], cum_fp[last] / total_area])

    at_rates = np.array([sens[fpd <= r].max() for r in fp_rates])
    return FrocCurve(thresholds, sens, fpd, tuple(fp_rates), at_rates)


def froc_score(preds_per_slide, gts_per_slide, areas_mm2, fp_rates=DEFAULT_FP_RATES,
               hit_radius_um: float = 4.0, resolutions=None) -> float:
    return froc_curve(preds_per_slide, gts_per_slide, areas_mm2, fp_rates, hit_radius_um, resolutions).score


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("pearson_r needs two 1-D sequences of equal length")
    if len(x) < 2:
        raise UndefinedMetricError("pearson_r needs at least two samples")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("pearson_r is undefined for a constant sequence")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


@dataclass(frozen=True)
class SurvivalRecord:
    risk_score: float
    time: float
    event: bool

    def __post_init__(self):
        if not self.time > 0:
            raise ValueError(f"survival time must be positive, got {self.time}")


def _survival_arrays(records):
    if isinstance(records, tuple) and len(records) == 3 and not isinstance(records[0], SurvivalRecord):
        risk, time, event = (np.asarray(a) for a in records)
    else:
        risk = np.array([r.risk_score for r in records], dtype=np.float64)
        time = np.array([r.time for r in records], dtype=np.float64)
        event = np.array([bool(r.event) for r in records], dtype=bool)
    return risk.astype(np.float64), time.astype(np.float64), event.astype(bool)


def concordance_counts(records):
    """``(concordant, tied_risk, comparable)`` pair counts in O(n log n).

    Subjects are visited from the latest time backwards; a Fenwick tree over
    risk ranks holds everyone with a strictly later time.
    """
    risk, time, event = _survival_arrays(records)
    n = len(risk)
    uniq, rank = np.unique(risk, return_inverse=True)
    tree = np.zeros(len(uniq) + 1, dtype=np.int64)

    def add(i):
        i += 1
        while i < len(tree):
            tree[i] += 1
            i += i & -i

    def prefix(i):  # count of inserted ranks < i
        s = 0
        while i > 0:
            s += tree[i]
            i -= i & -i
        return int(s)

    order = np.argsort(-time, kind="stable")
    concordant = tied = comparable = 0
    inserted = 0
    k = 0
    while k < n:
        group_end = k
        while group_end + 1 < n and time[order[group_end + 1]] == time[order[k]]:
            group_end += 1
        group = order[k:group_end + 1]
        for i in group:
            if event[i]:
                below = prefix(rank[i])
                equal = prefix(rank[i] + 1) - below
                concordant += below
                tied += equal
                comparable += inserted
        for i in group:
            add(rank[i])
        inserted += len(group)
        k = group_end + 1
    return concordant, tied, comparable


def concordance_index(records) -> float:
    """Harrell's C: a comparable pair's earlier-failing subject should carry the higher risk."""
    concordant, tied, comparable = concordance_counts(records)
    if comparable == 0:
        raise UndefinedMetricError("C-index needs at least one comparable pair")
    return (2 * concordant + tied) / (2 * comparable)


class CoxFit(NamedTuple):
    beta: float
    log_likelihood: float


def _risk_set_terms(beta, x, time, event):
    """Breslow log-likelihood, score and information for one covariate."""
    order = np.argsort(-time, kind="stable")
    xs, ts, es = x[order], time[order], event[order]
    a = beta * xs
    log_s0 = np.logaddexp.accumulate(a)
    with np.errstate(divide="ignore"):
        xp, xn = np.log(np.maximum(xs, 0)), np.log(np.maximum(-xs, 0))
        x2 = np.log(xs * xs)
    log_s1p = np.logaddexp.accumulate(a + xp)
    log_s1n = np.logaddexp.accumulate(a + xn)
    log_s2 = np.logaddexp.accumulate(a + x2)
    # risk set of a subject = everyone up to the last position with the same time
    last = np.searchsorted(-ts, -ts, side="right") - 1
    idx = last[es]
    ls0 = log_s0[idx]
    mean = np.exp(log_s1p[idx] - ls0) - np.exp(log_s1n[idx] - ls0)
    second = np.exp(log_s2[idx] - ls0)
    loglik = float(np.sum(a[es] - ls0))
    score = float(np.sum(xs[es] - mean))
    info = float(np.sum(second - mean * mean))
    return loglik, score, info


def cox_partial_loglik(beta, records) -> float:
    risk, time, event = _survival_arrays(records)
    return _risk_set_terms(beta, risk - risk.mean(), time, event)[0]


def cox_score(beta, records) -> float:
    """First derivative of the partial log-likelihood at ``beta``."""
    risk, time, event = _survival_arrays(records)
    return _risk_set_terms(beta, risk - risk.mean(), time, event)[1]


def _monotone_direction(x, time, event) -> int:
    """+1/-1 when the partial likelihood increases/decreases for all beta, else 0.

    That happens when every event subject holds the largest (smallest)
    covariate of its risk set and at least one risk set is not constant.
    Newton then only stalls numerically, so the case is detected up front.
    """
    order = np.argsort(-time, kind="stable")
    xs, ts, es = x[order], time[order], event[order]
    last = np.searchsorted(-ts, -ts, side="right") - 1
    hi = np.maximum.accumulate(xs)[last][es]
    lo = np.minimum.accumulate(xs)[last][es]
    xe = xs[es]
    if np.all(hi == lo):
        return 0
    if np.all(xe >= hi):
        return 1
    if np.all(xe <= lo):
        return -1
    return 0


def cox_fit_single(records, max_iter: int = 50, tol: float = 1e-8, beta_limit: float = 50.0) -> CoxFit:
    """Newton-Raphson fit of a one-covariate Cox model starting from beta = 0.

    The covariate is the record's ``risk_score``. Steps that lower the
    likelihood are halved. Raises :class:`DivergingBetaError` once
    ``|beta|`` exceeds ``beta_limit`` (monotone likelihood).
    """
    risk, time, event = _survival_arrays(records)
    if not event.any():
        raise UndefinedMetricError("Cox fit needs at least one event")
    if np.any(time <= 0):
        raise ValueError("survival times must be positive")
    x = risk - risk.mean()
    direction = _monotone_direction(x, time, event)
    if direction:
        raise DivergingBetaError(direction * np.inf, 0)
    beta = 0.0
    loglik, score, info = _risk_set_terms(beta, x, time, event)
    for it in range(1, max_iter + 1):
        if info <= 0:
            if abs(score) < 1e-12:
                return CoxFit(beta, loglik)
            raise ConvergenceError("partial likelihood has zero curvature; covariate is constant")
        step = score / info
        new_beta = beta + step
        new = _risk_set_terms(new_beta, x, time, event)
        halvings = 0
        while new[0] < loglik - 1e-12 and halvings < 30:
            step /= 2
            new_beta = beta + step
            new = _risk_set_terms(new_beta, x, time, event)
            halvings += 1
        beta = new_beta
        loglik, score, info = new
        if abs(beta) > beta_limit:
            raise DivergingBetaError(beta, it)
        if abs(step) < tol:
            return CoxFit(beta, loglik)
    raise ConvergenceError(f"Cox fit did not converge in {max_iter} iterations (beta={beta})")
