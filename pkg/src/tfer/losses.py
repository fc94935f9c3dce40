"""Push (energy repulsion), protect (prototype anchoring) and orthogonality losses.

All feature-space gradients are ambient gradients w.r.t. z; the model's
sphere-projection Jacobian removes the radial part during backprop.
"""
from dataclasses import dataclass

import numpy as np

from .errors import EmptyRetainSet, ForgetLabelInProtect, NonFiniteLoss, ShapeMismatch, UnknownClass
from .geometry import logsumexp, softmax
from .model import forward_with_jacobian


@dataclass(frozen=True)
class LossWeights:
    lambda_f: float = 1.0
    lambda_orth: float = 1.0
    tau: float = 0.1

    def __post_init__(self):
        if self.lambda_f < 0:
            raise ValueError("lambda_f must be >= 0")
        if self.lambda_orth < 0:
            raise ValueError("lambda_orth must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


@dataclass
class PushGradientDecomposition:
    alpha: np.ndarray  # (m,) importance weight of each retained class
    per_class_grads: np.ndarray  # (m, D) gradient of each class logit
    total: np.ndarray  # (D,)

    def reconstruct(self):
        return self.alpha @ self.per_class_grads


def _retained(bank, retained):
    classes = bank.retained if retained is None else tuple(retained)
    if not classes:
        raise EmptyRetainSet("push loss needs at least one retained class")
    return classes


def push_loss_batch(Z, bank, retained=None):
    """Per-sample log-sum-exp of retained logits and its gradient.

    The gradient is taken as a single softmax over every (class, prototype)
    pair, which equals the class-level convex combination sum_j alpha_j grad L_j.
    """
    classes = _retained(bank, retained)
    P = bank.prototypes[list(classes)]
    m, K, D = P.shape
    Z = np.atleast_2d(Z)
    sims = bank.kappa * (Z @ P.reshape(m * K, D).T)
    loss = logsumexp(sims, axis=1) - np.log(K)
    grad = bank.kappa * (softmax(sims, axis=1) @ P.reshape(m * K, D))
    return loss, grad


def push_loss(z, bank, retained=None):
    """Push loss for one feature: (loss, grad w.r.t. z, decomposition)."""
    classes = _retained(bank, retained)
    z = np.asarray(z, dtype=np.float64)
    loss, grad = push_loss_batch(z[None, :], bank, classes)
    logits, grads = bank.logits_and_grads(z[None, :], classes)
    alpha = softmax(logits[0])
    dec = PushGradientDecomposition(alpha, grads[0], grad[0])
    return float(loss[0]), grad[0], dec


def _class_positions(classes, labels):
    classes = np.asarray(classes)
    labels = np.asarray(labels, dtype=np.int64)
    order = np.argsort(classes, kind="stable")
    j = np.searchsorted(classes[order], labels)
    j = np.minimum(j, classes.size - 1)
    hit = classes[order][j] == labels
    if not hit.all():
        raise UnknownClass(f"label {int(labels[~hit][0])} not among scored classes")
    return order[j]


def protect_loss_batch(Z, labels, bank, tau, classes=None, soft=False):
    """Per-sample cross-entropy of z.p_j / tau over ``classes`` (default: retained).

    ``soft=False`` uses each class's maximal-similarity prototype; ``soft=True``
    uses the mixture logit scaled by 1/kappa, which coincides when K = 1.
    """
    if classes is None:
        if bank.forgotten:
            lab = np.atleast_1d(labels)
            bad = lab[np.isin(lab, sorted(bank.forgotten))]
            if bad.size:
                raise ForgetLabelInProtect(f"label {int(bad[0])} belongs to a forgotten class")
        classes = bank.retained
    classes = tuple(classes)
    if not classes:
        raise EmptyRetainSet("protect loss needs at least one class")
    Z = np.atleast_2d(Z)
    idx = _class_positions(classes, np.atleast_1d(labels))
    rows = np.arange(Z.shape[0])
    if soft:
        logits, lgrads = bank.logits_and_grads(Z, classes)
        s = logits / (bank.kappa * tau)
        sgrads = lgrads / (bank.kappa * tau)
    elif bank.k == 1:
        P = bank.prototypes[list(classes), 0]  # shared by every sample
        s = Z @ P.T / tau
        sgrads = None
    else:
        Phat = bank.nearest(Z, classes)
        s = np.einsum("nd,nmd->nm", Z, Phat) / tau
        sgrads = Phat / tau
    pi = softmax(s, axis=1)
    loss = logsumexp(s, axis=1) - s[rows, idx]
    coef = pi
    coef[rows, idx] -= 1.0
    grad = coef @ P / tau if sgrads is None else np.einsum("nm,nmd->nd", coef, sgrads)
    return loss, grad


def protect_loss(z, label, bank, tau, soft=False):
    loss, grad = protect_loss_batch(np.asarray(z, dtype=np.float64)[None, :], [label], bank, tau, soft=soft)
    return float(loss[0]), grad[0]


def orthogonality_loss(a_t, a_ref):
    """||(A_t - A_ref) A_ref^T||_F^2 and its gradient w.r.t. A_t.

    Zero exactly when the rows of the update A_t - A_ref are orthogonal to
    the row space of A_ref (contraction over the input dimension).
    """
    a_t = np.asarray(a_t, dtype=np.float64)
    a_ref = np.asarray(a_ref, dtype=np.float64)
    if a_t.shape != a_ref.shape:
        raise ShapeMismatch(f"A_t {a_t.shape} vs A_ref {a_ref.shape}")
    cross = (a_t - a_ref) @ a_ref.T  # r x r
    return float(np.sum(cross**2)), 2.0 * cross @ a_ref


@dataclass
class ObjectiveParts:
    push: float = 0.0
    protect: float = 0.0
    orth: float = 0.0
    forget_ce: float = 0.0


def total_objective(
    forget_x,
    retain_x,
    retain_y,
    projector,
    stack,
    bank,
    weights,
    ref_adapters=None,
    use_protect=True,
    soft_protect=False,
    forget_term="push",
    forget_y=None,
):
    """lambda_f * mean push + mean protect (+ lambda_orth * orth), with adapter gradients.

    ``forget_term="neg_ce"`` swaps the push term for the negated cross-entropy of
    the forget samples' true labels over all bank classes (gradient-ascent
    baseline). ``ref_adapters`` maps layer index -> reference A (or a list of
    them) for the orthogonality term; the active adapter's A is the update on
    top of each reference, so the penalty is ||A A_ref^T||_F^2. Returns (J, {layer: (dA, dB)}, ObjectiveParts).
    """
    retain_x = np.atleast_2d(np.asarray(retain_x, dtype=np.float64))
    n_r = retain_x.shape[0]
    if n_r == 0:
        raise EmptyRetainSet("retain batch must be non-empty")
    forget_x = np.asarray(forget_x, dtype=np.float64).reshape(-1, retain_x.shape[1])
    n_f = forget_x.shape[0]
    X = np.concatenate([forget_x, retain_x]) if n_f else retain_x
    Z, tape = forward_with_jacobian(projector, stack, X)
    G = np.zeros_like(Z)
    parts = ObjectiveParts()
    J = 0.0

    if n_f and weights.lambda_f > 0:
        zf = Z[:n_f]
        if forget_term == "push":
            l, g = push_loss_batch(zf, bank)
            parts.push = float(l.mean())
        elif forget_term == "neg_ce":
            l, g = protect_loss_batch(zf, forget_y, bank, weights.tau, classes=bank.all_classes, soft=soft_protect)
            parts.forget_ce = float(l.mean())
            l, g = -l, -g
        else:
            raise ValueError(f"unknown forget term {forget_term!r}")
        J += weights.lambda_f * float(l.mean())
        G[:n_f] = (weights.lambda_f / n_f) * g

    if use_protect:
        l, g = protect_loss_batch(Z[n_f:], retain_y, bank, weights.tau, soft=soft_protect)
        parts.protect = float(l.mean())
        J += parts.protect
        G[n_f:] = g / n_r

    grads = tape.vjp(G)

    if ref_adapters and weights.lambda_orth > 0:
        task = stack.active()
        for ad in task.adapters:
            refs = ref_adapters.get(ad.layer_index, ())
            if isinstance(refs, np.ndarray):
                refs = (refs,)
            for a_ref in refs:
                l, g = orthogonality_loss(a_ref + ad.a, a_ref)
                parts.orth += l
                J += weights.lambda_orth * l
                dA, dB = grads[ad.layer_index]
                grads[ad.layer_index] = (dA + weights.lambda_orth * g, dB)

    if not np.isfinite(J):
        raise NonFiniteLoss(f"objective evaluated to {J}")
    return J, grads, parts
