"""Prototype fitting, adapter-only unlearning, continual unlearning and baselines."""
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .bank import PrototypeBank
from .data import validation_split
from .detection import auroc, evaluate, fpr_at_95_tpr, make_scorer, score_inputs
from .errors import (
    EmptyForgetSet,
    EmptyRetainSet,
    InsufficientSamples,
    NonFiniteLoss,
    OverlappingForgetSets,
    UnknownClass,
)
from .geometry import logsumexp, normalize
from .losses import LossWeights, protect_loss_batch, total_objective
from .model import AdapterStack, Projector, backprop, forward, forward_arrays

__all__ = [
    "PrototypeBank",
    "UnlearnConfig",
    "PretrainConfig",
    "TrainLog",
    "fit_prototypes",
    "fit_bank",
    "pretrain",
    "unlearn_tfer",
    "unlearn_continual",
    "baseline_grad_ascent",
    "baseline_random_label",
    "baseline_retrain",
]


@dataclass
class UnlearnConfig:
    lambda_f: float = 1.0
    lambda_orth: float = 1.0
    tau: float = 0.03
    lr: float = 0.2
    epochs: int = 100
    batch_size: int = 64
    rank: int = 4
    placement: str = "both"
    scale: float = None  # None -> 1 / rank
    seed: int = 0
    use_protect: bool = True
    soft_protect: bool = False
    gradasc_clip: float = 10.0  # None disables clipping
    orth_reference: str = "previous"  # or "all"
    continual_retain: str = "request"  # or "cumulative"
    val_frac: float = 0.2

    @property
    def weights(self):
        return LossWeights(self.lambda_f, self.lambda_orth, self.tau)


@dataclass
class PretrainConfig:
    d_h: int = 128
    d_out: int = 128
    epochs: int = 30
    lr: float = 0.5
    batch_size: int = 64
    tau: float = 0.1
    kappa: float = 10.0
    k: int = 1
    ema: float = 0.9
    seed: int = 0


LOG_FIELDS = ("epoch", "loss_push", "loss_protect", "loss_orth", "retain_acc", "forget_fpr95")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, **rec):
        vals = [rec[k] for k in LOG_FIELDS[1:]]
        if not all(math.isfinite(v) for v in vals):
            raise NonFiniteLoss(f"non-finite training record at epoch {rec['epoch']}: {rec}")
        if self.records and rec["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epoch index must increase")
        self.records.append({k: rec[k] for k in LOG_FIELDS})

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, TrainLog) and self.records == other.records

    def last(self):
        return self.records[-1] if self.records else None

    def to_csv(self, fh=None):
        out = fh if fh is not None else io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in self.records:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])
        return out.getvalue() if fh is None else None


# -- prototypes -------------------------------------------------------------


def _spherical_kmeans(Z, k, rng, max_iter=100):
    n = Z.shape[0]
    centres = [Z[rng.integers(n)]]
    for _ in range(1, k):
        dist = np.min(1.0 - Z @ np.array(centres).T, axis=1).clip(min=0.0)
        total = dist.sum()
        p = dist / total if total > 0 else np.full(n, 1.0 / n)
        centres.append(Z[rng.choice(n, p=p)])
    C = np.array(centres)
    assign = None
    for _ in range(max_iter):
        new = np.argmax(Z @ C.T, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = Z[assign == j]
            if members.shape[0] == 0:
                # re-seed an empty cluster at the worst-served point
                C[j] = Z[np.argmin(np.max(Z @ C.T, axis=1))]
                continue
            s = members.sum(axis=0)
            nrm = np.linalg.norm(s)
            C[j] = s / nrm if nrm > 1e-12 else members[0]
    return C


def fit_prototypes(z, labels, k=1, kappa=10.0, seed=0, n_classes=None, max_iter=100):
    """Normalized class means (K=1) or per-class spherical k-means (K>1)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    P = np.empty((n_classes, k, z.shape[1]))
    for c in range(n_classes):
        zc = z[labels == c]
        if zc.shape[0] < k:
            raise InsufficientSamples(f"class {c} has {zc.shape[0]} samples, need >= {k}")
        if k == 1:
            P[c, 0] = normalize(zc.sum(axis=0))
        else:
            P[c] = _spherical_kmeans(normalize(zc), k, np.random.default_rng([seed, c]), max_iter)
    return PrototypeBank(P, kappa)


def fit_bank(projector, stack, x, y, k=1, kappa=10.0, seed=0, n_classes=None):
    return fit_prototypes(forward(projector, stack, np.asarray(x, dtype=np.float64)), y, k, kappa, seed, n_classes)


# -- full-projector training (pretrain / retrain) ---------------------------


def _epoch_rng(seed, epoch):
    return np.random.default_rng([seed, epoch])


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def train_projector(x, y, classes, d_h, d_out, epochs, lr, batch_size, tau, seed, ema=0.9, kappa=10.0, n_classes=None):
    """Train a fresh projector with the prototype cross-entropy over ``classes``.

    Prototypes start as random unit vectors and track an exponential moving
    average of normalized per-batch class means. Returns (projector, bank).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    classes = tuple(sorted(int(c) for c in classes))
    keep = np.isin(y, classes)
    x, y = x[keep], y[keep]
    if x.shape[0] == 0:
        raise EmptyRetainSet("no training samples for the requested classes")
    init = np.random.default_rng([seed, 0xBA5E])
    base = Projector.random(x.shape[1], d_h, d_out, init)
    w1, b1, w2, b2 = (a.copy() for a in base.arrays())
    n_cls = max(classes) + 1 if n_classes is None else n_classes
    protos = normalize(init.standard_normal((n_cls, d_out)))
    for epoch in range(epochs):
        for bi in _batches(x.shape[0], batch_size, _epoch_rng(seed, epoch)):
            _, cache = forward_arrays(w1, b1, w2, b2, x[bi])
            bank = PrototypeBank(protos, kappa)
            loss, g = protect_loss_batch(cache.z, y[bi], bank, tau, classes=classes)
            if not np.all(np.isfinite(loss)):
                raise NonFiniteLoss("non-finite loss while training projector")
            dw1, db1, dw2, db2 = backprop(cache, g / len(bi))
            w1 -= lr * dw1
            b1 -= lr * db1
            w2 -= lr * dw2
            b2 -= lr * db2
            for c in np.unique(y[bi]):
                m = cache.z[y[bi] == c].sum(axis=0)
                protos[c] = normalize(ema * protos[c] + (1.0 - ema) * normalize(m))
    if not all(np.all(np.isfinite(a)) for a in (w1, b1, w2, b2)):
        raise NonFiniteLoss("projector weights diverged")
    return Projector(w1, b1, w2, b2), PrototypeBank(protos, kappa, forgotten=set(range(n_cls)) - set(classes))


def pretrain(dataset, config=None):
    """Train the base projector on all classes and fit the prototype bank."""
    config = config or PretrainConfig()
    x = dataset.train_x.astype(np.float64)
    y = dataset.train_y
    projector, _ = train_projector(
        x, y, range(dataset.class_count), config.d_h, config.d_out, config.epochs, config.lr,
        config.batch_size, config.tau, config.seed, config.ema, config.kappa,
    )
    bank = fit_bank(projector, None, x, y, config.k, config.kappa, config.seed, dataset.class_count)
    return projector, bank


# -- adapter-only engine -----------------------------------------------------


@dataclass
class _TaskData:
    xf: np.ndarray
    yf: np.ndarray
    xr: np.ndarray
    yr: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray


def _task_data(dataset, bank_task, forget, val_frac, seed):
    x = dataset.train_x.astype(np.float64)
    y = dataset.train_y
    fit_idx, val_idx = validation_split(y, val_frac, seed)
    f = fit_idx[np.isin(y[fit_idx], sorted(forget))]
    r = fit_idx[np.isin(y[fit_idx], bank_task.retained)]
    if r.size == 0:
        raise EmptyRetainSet("no retained training samples")
    return _TaskData(x[f], y[f], x[r], y[r], x[val_idx], y[val_idx])


def _check_forget(bank, forget):
    forget = frozenset(int(c) for c in forget)
    if not forget:
        raise EmptyForgetSet("forget set is empty")
    bad = sorted(c for c in forget if not 0 <= c < bank.n_classes)
    if bad:
        raise UnknownClass(f"unknown class ids {bad}")
    if forget & bank.forgotten:
        raise OverlappingForgetSets(f"classes {sorted(forget & bank.forgotten)} were already forgotten")
    return forget


def _val_metrics(projector, stack, bank_task, forget, data):
    z = forward(projector, stack, data.val_x)
    r_mask = np.isin(data.val_y, bank_task.retained)
    f_mask = np.isin(data.val_y, sorted(forget))
    acc = float(np.mean(bank_task.predict(z[r_mask]) == data.val_y[r_mask]))
    score = logsumexp(bank_task.logits(z), axis=1)
    if f_mask.any():
        s = np.concatenate([score[r_mask], score[f_mask]])
        lab = np.r_[np.ones(r_mask.sum(), bool), np.zeros(f_mask.sum(), bool)]
        fpr = fpr_at_95_tpr(s, lab)
    else:
        fpr = 0.0
    return acc, fpr


def _adapter_sgd(projector, stack, bank_task, forget, data, config, method, ref_adapters=None, log=None):
    weights = config.weights
    clip = config.gradasc_clip if method == "gradasc" else None
    task = stack.active()
    n_r, n_f = data.xr.shape[0], data.xf.shape[0]
    n_steps = math.ceil(n_r / config.batch_size)
    fb = math.ceil(n_f / n_steps) if n_f else 0
    retained = np.array(bank_task.retained)
    log = log if log is not None else TrainLog()
    epoch0 = log.last()["epoch"] + 1 if len(log) else 0
    for e in range(config.epochs):
        rng = _epoch_rng(config.seed, e)
        r_batches = _batches(n_r, config.batch_size, rng)
        f_perm = rng.permutation(n_f)
        if method == "rlft":
            rand_y = retained[rng.integers(retained.size, size=n_f)]
        sums = np.zeros(3)
        for s, ri in enumerate(r_batches):
            fi = f_perm[s * fb : (s + 1) * fb]
            if method == "rlft":
                J, grads, parts = total_objective(
                    [], np.concatenate([data.xf[fi], data.xr[ri]]), np.concatenate([rand_y[fi], data.yr[ri]]),
                    projector, stack, bank_task, weights, soft_protect=config.soft_protect,
                )
            else:
                J, grads, parts = total_objective(
                    data.xf[fi], data.xr[ri], data.yr[ri], projector, stack, bank_task, weights,
                    ref_adapters=ref_adapters,
                    use_protect=config.use_protect,
                    soft_protect=config.soft_protect,
                    forget_term="neg_ce" if method == "gradasc" else "push",
                    forget_y=data.yf[fi],
                )
            # gradient ascent logs its negated forget cross-entropy in the push column
            sums += (parts.push - parts.forget_ce, parts.protect, parts.orth)
            if clip is not None:
                norm = math.sqrt(sum(float(np.sum(dA**2) + np.sum(dB**2)) for dA, dB in grads.values()))
                if norm > clip:
                    grads = {k: (dA * (clip / norm), dB * (clip / norm)) for k, (dA, dB) in grads.items()}
            for ad in task.adapters:
                dA, dB = grads[ad.layer_index]
                ad.a -= config.lr * dA
                ad.b -= config.lr * dB
                if not (np.all(np.isfinite(ad.a)) and np.all(np.isfinite(ad.b))):
                    raise NonFiniteLoss(f"adapter parameters diverged at epoch {e}, step {s}")
        acc, fpr = _val_metrics(projector, stack, bank_task, forget, data)
        m = sums / len(r_batches)
        log.append(epoch=epoch0 + e, loss_push=m[0], loss_protect=m[1], loss_orth=m[2], retain_acc=acc, forget_fpr95=fpr)
    return log


def _prepare_stack(projector, stack, config, task_id, new_adapter):
    stack = AdapterStack() if stack is None else stack.copy()
    if new_adapter or stack.active() is None:
        task_id = len(stack.tasks) if task_id is None else task_id
        stack.new_task(task_id, projector, config.placement, config.rank, rng=[config.seed, 0xADA, task_id], scale=config.scale)
    return stack


def _run_method(method, projector, bank, dataset, forget, config, stack=None, task_id=None, new_adapter=True, ref_adapters=None, log=None):
    forget = _check_forget(bank, forget)
    bank_task = bank.with_forgotten(forget)
    if not bank_task.retained:
        raise EmptyRetainSet("forgetting every class leaves nothing to retain")
    data = _task_data(dataset, bank_task, forget, config.val_frac, config.seed)
    stack = _prepare_stack(projector, stack, config, task_id, new_adapter)
    log = _adapter_sgd(projector, stack, bank_task, forget, data, config, method, ref_adapters, log)
    return stack, log


def unlearn_tfer(projector, bank, dataset, forget, config, stack=None, task_id=None, new_adapter=True, ref_adapters=None):
    """Adapter-only SGD on lambda_f * push + protect for forgetting ``forget``.

    Returns (stack, log); the input stack is not modified.
    """
    return _run_method("tfer", projector, bank, dataset, forget, config, stack, task_id, new_adapter, ref_adapters)


def baseline_grad_ascent(projector, bank, dataset, forget, config, stack=None, task_id=None, new_adapter=True):
    """Negated cross-entropy on forget samples (all classes) plus protect; clipped at ``gradasc_clip``."""
    return _run_method("gradasc", projector, bank, dataset, forget, config, stack, task_id, new_adapter)


def baseline_random_label(projector, bank, dataset, forget, config, stack=None, task_id=None, new_adapter=True):
    """Cross-entropy on retain data plus forget data relabeled uniformly at random each epoch."""
    return _run_method("rlft", projector, bank, dataset, forget, config, stack, task_id, new_adapter)


def baseline_retrain(dataset, retained, config, pretrain_config=None):
    """Fresh projector trained on ``retained`` classes under the unlearning epoch budget.

    Returns (projector, bank). Prototypes are the ones tracked during
    training (random directions at zero epochs); every other class is marked
    forgotten.
    """
    pc = pretrain_config or PretrainConfig()
    retained = tuple(sorted(int(c) for c in retained))
    y = dataset.train_y
    fit_idx, _ = validation_split(y, config.val_frac, config.seed)
    r = fit_idx[np.isin(y[fit_idx], retained)]
    x = dataset.train_x[r].astype(np.float64)
    return train_projector(
        x, y[r], retained, pc.d_h, pc.d_out, config.epochs, config.lr, config.batch_size,
        config.tau, config.seed, pc.ema, pc.kappa, n_classes=dataset.class_count,
    )


# -- continual ---------------------------------------------------------------


def orthonormal_rows(a):
    """Orthonormal basis (as rows) of the row space of ``a``, same shape.

    Used as the orthogonality reference so the penalty measures subspace
    overlap independently of how large the earlier adapter grew.
    """
    q, _ = np.linalg.qr(np.asarray(a, dtype=np.float64).T)
    return q.T.copy()


@dataclass
class ContinualStep:
    task_index: int
    report: object  # EvalReport for the current task
    history: dict  # task index -> (auroc, fpr95) of that task's forget set
    log: TrainLog


def forget_set_metrics(projector, stack, bank, dataset, forget_sets, score_kind="mahalanobis", space="h"):
    """(AUROC, FPR95) of each forget set against retained-class test samples."""
    scorer = make_scorer(score_kind, projector, stack, bank, dataset.train_x.astype(np.float64), dataset.train_y, space=space)
    tx, ty = dataset.test_x.astype(np.float64), dataset.test_y
    s_id = score_inputs(scorer, projector, stack, tx[np.isin(ty, bank.retained)])
    out = []
    for fs in forget_sets:
        s_f = score_inputs(scorer, projector, stack, tx[np.isin(ty, sorted(fs))])
        s = np.concatenate([s_id, s_f])
        lab = np.r_[np.ones(s_id.size, bool), np.zeros(s_f.size, bool)]
        out.append((auroc(s, lab), fpr_at_95_tpr(s, lab)))
    return out


def unlearn_continual(projector, bank, dataset, plan, config, strategy="orthogonal", score_kind="mahalanobis", space="h"):
    """Run the forget plan task by task.

    ``orthogonal``: a fresh adapter per task, earlier ones frozen, with the
    orthogonality penalty against the previous task's A (or all earlier tasks
    when ``config.orth_reference == "all"``). ``naive``: one adapter shared
    and updated across tasks.
    """
    if strategy not in ("orthogonal", "naive"):
        raise ValueError(f"unknown continual strategy {strategy!r}")
    if config.continual_retain not in ("request", "cumulative"):
        raise ValueError(f"unknown continual_retain {config.continual_retain!r}")
    tasks = [frozenset(t) for t in plan]
    seen = set()
    for t in tasks:
        if t & seen:
            raise OverlappingForgetSets(f"classes {sorted(t & seen)} appear in more than one task")
        seen |= t
    stack = None
    bank_t = bank
    steps = []
    log = TrainLog()
    for i, forget in enumerate(tasks):
        ref = None
        if strategy == "orthogonal" and stack is not None and len(stack.tasks):
            prev = stack.tasks if config.orth_reference == "all" else stack.tasks[-1:]
            ref = {}
            for t in prev:
                for ad in t.adapters:
                    ref.setdefault(ad.layer_index, []).append(orthonormal_rows(ad.a))
        new_adapter = strategy == "orthogonal" or stack is None
        task_log = TrainLog() if strategy == "orthogonal" else log
        # "request": each request retains every class except its own forget set
        bank_train = bank if config.continual_retain == "request" else bank_t
        stack, task_log = _run_method(
            "tfer", projector, bank_train, dataset, forget, config, stack, task_id=i, new_adapter=new_adapter,
            ref_adapters=ref, log=task_log,
        )
        bank_t = bank_t.with_forgotten(forget)
        report = evaluate(projector, stack, bank_t, dataset, score_kind, method=f"tfer-{strategy}", forget_classes=forget, space=space)
        hist = forget_set_metrics(projector, stack, bank_t, dataset, tasks[: i + 1], score_kind, space)
        steps.append(ContinualStep(i, report, dict(enumerate(hist)), task_log))
    return stack, steps
