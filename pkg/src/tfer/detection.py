"""OOD scoring and the Forget-as-OOD metric suite.

Every scorer follows "higher = more in-distribution". Metrics treat
retained-class test samples as positives and forget / external samples as
negatives.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import rankdata

from .errors import (
    DegenerateLabels,
    InsufficientSamples,
    MissingPartition,
    SingularCovariance,
    TooFewPositives,
)
from .geometry import logsumexp
from .model import forward

SCORE_KINDS = ("neg_free_energy", "max_similarity", "mahalanobis")


@dataclass(frozen=True)
class BinaryScoreSample:
    score: float
    is_id: bool


def _split(scores, is_id):
    scores = np.asarray(scores, dtype=np.float64)
    is_id = np.asarray(is_id, dtype=bool)
    if scores.shape != is_id.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return scores, is_id


def auroc(scores, is_id):
    """P(random ID score > random OOD score), ties counted one half."""
    scores, is_id = _split(scores, is_id)
    n_pos = int(is_id.sum())
    n_neg = is_id.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUROC needs at least one ID and one OOD sample")
    ranks = rankdata(scores)  # average ranks: ties contribute 1/2
    u = ranks[is_id].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def fpr_at_95_tpr(scores, is_id, min_positives=20):
    """Fraction of OOD scores >= t, with t the largest observed score keeping >= 95% of ID."""
    scores, is_id = _split(scores, is_id)
    pos = np.sort(scores[is_id])[::-1]
    neg = scores[~is_id]
    if pos.size < min_positives:
        raise TooFewPositives(f"FPR95 needs >= {min_positives} ID samples, got {pos.size}")
    if neg.size == 0:
        raise DegenerateLabels("FPR95 needs at least one OOD sample")
    k = (95 * pos.size + 99) // 100  # ceil(0.95 n) in exact integer arithmetic
    t = pos[k - 1]
    return float(np.count_nonzero(neg >= t) / neg.size)


def samples_metrics(samples):
    """(AUROC, FPR95) from a list of :class:`BinaryScoreSample`."""
    s = np.array([x.score for x in samples], dtype=np.float64)
    y = np.array([x.is_id for x in samples], dtype=bool)
    return auroc(s, y), fpr_at_95_tpr(s, y)


class ScoreFunction:
    """OOD scorer over retained classes.

    Energy and max-similarity kinds read unit features z through the bank;
    the Mahalanobis kind measures distances of z to retained class means.
    """

    def __init__(self, kind, bank=None, means=None, precision_chol=None, shrinkage=None, classes=None, space="z"):
        if kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {kind!r}")
        self.kind = kind
        self.bank = bank
        self.means = means
        self.precision_chol = precision_chol
        self.shrinkage = shrinkage
        self.classes = classes
        self.space = space

    def __call__(self, z):
        z = np.atleast_2d(z)
        if self.kind == "neg_free_energy":
            return logsumexp(self.bank.logits(z), axis=1)
        if self.kind == "max_similarity":
            P = self.bank.prototypes[list(self.bank.retained)]
            return np.einsum("nd,mkd->nmk", z, P).max(axis=(1, 2))
        return -self.distances(z).min(axis=1)

    def distances(self, x):
        """Squared Mahalanobis distance of each row of x to each class mean."""
        x = np.atleast_2d(x)
        out = np.empty((x.shape[0], self.means.shape[0]))
        for j, mu in enumerate(self.means):
            # ||L^{-1}(x - mu)||^2 with Sigma = L L^T
            w = solve_triangular(self.precision_chol, (x - mu).T, lower=True)
            out[:, j] = (w**2).sum(axis=0)
        return out


def fit_mahalanobis(features, labels, shrinkage=None):
    """Class means plus a shared within-class covariance with ridge ``shrinkage``.

    ``shrinkage=None`` uses 1e-3 * trace(Sigma) / D.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    means = np.empty((classes.size, X.shape[1]))
    centered = np.empty_like(X)
    for i, c in enumerate(classes):
        mask = y == c
        if mask.sum() < 2:
            raise InsufficientSamples(f"class {c} has fewer than 2 samples")
        means[i] = X[mask].mean(axis=0)
        centered[mask] = X[mask] - means[i]
    cov = centered.T @ centered / X.shape[0]
    if shrinkage is None:
        shrinkage = 1e-3 * np.trace(cov) / X.shape[1]
    if shrinkage < 0:
        raise ValueError("shrinkage must be >= 0")
    try:
        chol = np.linalg.cholesky(cov + shrinkage * np.eye(X.shape[1]))
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("shared covariance is not positive definite") from exc
    return ScoreFunction("mahalanobis", means=means, precision_chol=chol, shrinkage=float(shrinkage), classes=classes)


def make_scorer(kind, projector, stack, bank, train_x=None, train_y=None, shrinkage=None, space="h"):
    """Build a scorer for the current model; Mahalanobis is fitted on retained train samples.

    ``space`` picks the Mahalanobis feature: unit z or pre-normalization h.
    """
    if kind != "mahalanobis":
        return ScoreFunction(kind, bank=bank)
    if space not in ("z", "h"):
        raise ValueError(f"unknown feature space {space!r}")
    keep = np.isin(train_y, bank.retained)
    z, h = forward(projector, stack, train_x[keep], return_hidden=True)
    sf = fit_mahalanobis(z if space == "z" else h, train_y[keep], shrinkage)
    sf.space = space
    return sf


def score_inputs(scorer, projector, stack, x):
    z, h = forward(projector, stack, np.atleast_2d(x), return_hidden=True)
    return scorer(h if scorer.space == "h" else z)


def retain_accuracy(projector, stack, bank, x, y, retained=None):
    """Fraction of samples whose argmax retained-class logit equals the label."""
    y = np.asarray(y)
    if y.size == 0:
        return float("nan")
    z = forward(projector, stack, np.atleast_2d(x))
    return float(np.mean(bank.predict(z, retained) == y))


@dataclass
class EvalReport:
    method: str
    scorer: str
    forget_auroc: float
    forget_fpr95: float
    retain_acc: float
    ood: dict = field(default_factory=dict)  # name -> (auroc, fpr95)
    extra: dict = field(default_factory=dict)

    @property
    def avg_auroc(self):
        return float(np.mean([v[0] for v in self.ood.values()])) if self.ood else float("nan")

    @property
    def avg_fpr95(self):
        return float(np.mean([v[1] for v in self.ood.values()])) if self.ood else float("nan")


def evaluate(projector, stack, bank, dataset, score_kind="mahalanobis", method="model", forget_classes=None, space="h"):
    """Forget-as-OOD report for the model under ``bank``'s retained/forgotten split.

    ``forget_classes`` defaults to the bank's forgotten set.
    """
    if not dataset.ood:
        raise MissingPartition("evaluation needs at least one external OOD set")
    forget = sorted(bank.forgotten if forget_classes is None else forget_classes)
    retained = bank.retained
    test_x, test_y = dataset.test_x.astype(np.float64), dataset.test_y
    r_mask = np.isin(test_y, retained)
    f_mask = np.isin(test_y, forget)
    if not r_mask.any():
        raise MissingPartition("no retained-class test samples")
    if not f_mask.any():
        raise MissingPartition("no forget-class test samples")
    scorer = make_scorer(score_kind, projector, stack, bank, dataset.train_x.astype(np.float64), dataset.train_y, space=space)
    s_id = score_inputs(scorer, projector, stack, test_x[r_mask])
    s_f = score_inputs(scorer, projector, stack, test_x[f_mask])

    def pair(s_ood):
        s = np.concatenate([s_id, s_ood])
        lab = np.r_[np.ones(s_id.size, bool), np.zeros(s_ood.size, bool)]
        return auroc(s, lab), fpr_at_95_tpr(s, lab)

    f_auc, f_fpr = pair(s_f)
    ood = {name: pair(score_inputs(scorer, projector, stack, x.astype(np.float64))) for name, x in dataset.ood.items()}
    acc = retain_accuracy(projector, stack, bank, test_x[r_mask], test_y[r_mask])
    return EvalReport(method, score_kind, f_auc, f_fpr, acc, ood)
