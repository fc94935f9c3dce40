"""End-to-end acceptance checks on small exact oracles and the synthetic default.

Each test prints one PASS/FAIL line. Directional checks run five seeds and
pass when at least four agree.
"""
import dataclasses
import json
import time

import numpy as np
import pytest

from tfer.bank import PrototypeBank
from tfer.cli import main
from tfer.data import dataset_crc32, dataset_from_bytes, dataset_to_bytes, generate_synthetic
from tfer.detection import auroc, evaluate, fpr_at_95_tpr
from tfer.errors import FormatError, TferError
from tfer.geometry import normalize
from tfer.losses import LossWeights, push_loss, total_objective
from tfer.model import AdapterStack, Projector, model_from_bytes, model_to_bytes, trainable_param_count
from tfer.training import PretrainConfig, UnlearnConfig, baseline_retrain, pretrain, unlearn_continual, unlearn_tfer

SEEDS = range(5)
FORGET = [0, 1]
PLAN = [[0, 1], [2, 3]]


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


class SeedRun:
    """Lazily computed results for one seed on the synthetic default."""

    def __init__(self, seed):
        self.seed = seed
        self.ds = generate_synthetic(seed=seed)
        self.proj, self.bank = pretrain(self.ds, PretrainConfig(seed=seed))
        self.base = evaluate(self.proj, None, self.bank.with_forgotten(FORGET), self.ds)
        self._cache = {}

    def unlearned(self, **kw):
        key = ("single", tuple(sorted(kw.items())))
        if key not in self._cache:
            cfg = dataclasses.replace(UnlearnConfig(seed=self.seed), **kw)
            stack, _ = unlearn_tfer(self.proj, self.bank, self.ds, FORGET, cfg)
            self._cache[key] = evaluate(self.proj, stack, self.bank.with_forgotten(FORGET), self.ds)
        return self._cache[key]

    def continual(self, strategy):
        key = ("continual", strategy)
        if key not in self._cache:
            self._cache[key] = unlearn_continual(self.proj, self.bank, self.ds, PLAN, UnlearnConfig(seed=self.seed), strategy)
        return self._cache[key]


@pytest.fixture(scope="module")
def runs():
    cache = {}

    def get(seed):
        if seed not in cache:
            cache[seed] = SeedRun(seed)
        return cache[seed]

    return get


# -- 1. gradients ---------------------------------------------------------------


def _fd_check(rng, D_in, D_h, D_out, C, r, weights, use_protect, with_ref, h=1e-4):
    P = Projector.random(D_in, D_h, D_out, rng)
    P = Projector(P.w1, rng.normal(size=D_h) * 0.1, P.w2, rng.normal(size=D_out) * 0.1)
    stack = AdapterStack()
    stack.new_task(0, P, "both", r, rng=int(rng.integers(1 << 30)))
    for ad in stack.active().adapters:
        ad.a[:] = rng.normal(size=ad.a.shape) * 0.5
        ad.b[:] = rng.normal(size=ad.b.shape) * 0.5
    bank = PrototypeBank(normalize(rng.standard_normal((C, 2, D_out))), 3.0, forgotten=(0,))
    xf, xr = rng.standard_normal((3, D_in)), rng.standard_normal((4, D_in))
    yr = rng.integers(1, C, size=4)
    refs = {ad.layer_index: rng.standard_normal(ad.a.shape) for ad in stack.active().adapters} if with_ref else None

    def J():
        return total_objective(xf, xr, yr, P, stack, bank, weights, ref_adapters=refs, use_protect=use_protect)[0]

    grads = total_objective(xf, xr, yr, P, stack, bank, weights, ref_adapters=refs, use_protect=use_protect)[1]
    worst = 0.0
    for ad in stack.active().adapters:
        for arr, ana in zip((ad.a, ad.b), grads[ad.layer_index]):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                fp = J()
                arr[idx] = old - h
                fm = J()
                arr[idx] = old
                num[idx] = (fp - fm) / (2 * h)
            scale = np.abs(num).max()
            if scale > 1e-8:
                worst = max(worst, np.abs(ana - num).max() / scale)
            else:
                worst = max(worst, np.abs(ana).max())
    return worst


def test_criterion_1_gradients(capsys):
    rng = np.random.default_rng(2024)
    # the four objectives: push only, protect only, orthogonality only, all together
    variants = {
        "push": (LossWeights(1.0, 0.0, 0.5), False, False),
        "protect": (LossWeights(0.0, 0.0, 0.5), True, False),
        "orth": (LossWeights(0.0, 1.0, 0.5), False, True),
        "total": (LossWeights(1.3, 0.7, 0.5), True, True),
    }
    worst = {k: 0.0 for k in variants}
    for _ in range(20):
        D_in, D_out = int(rng.integers(3, 7)), int(rng.integers(3, 7))
        D_h = int(rng.integers(4, 9))
        r = int(rng.integers(1, max(2, min(D_in, D_h, D_out) // 2 + 1)))
        C = int(rng.integers(2, 5))
        for name, (w, up, ref) in variants.items():
            worst[name] = max(worst[name], _fd_check(rng, D_in, D_h, D_out, C, r, w, up, ref))
    ok = all(v < 1e-4 for v in worst.values())
    verdict(capsys, 1, ok, "20 configs, max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# -- 2. decomposition -------------------------------------------------------------


def test_criterion_2_decomposition(capsys):
    rng = np.random.default_rng(7)
    err, simplex, bound = 0.0, True, True
    for _ in range(1000):
        C, K, D = rng.integers(2, 7), rng.integers(1, 4), rng.integers(3, 12)
        bank = PrototypeBank(normalize(rng.standard_normal((C, K, D))), rng.uniform(0.5, 30))
        z = normalize(rng.standard_normal(D))
        _, grad, dec = push_loss(z, bank)
        err = max(err, np.abs(dec.reconstruct() - grad).max())
        simplex &= bool(np.all(dec.alpha > 0) and np.all(dec.alpha < 1) and abs(dec.alpha.sum() - 1) < 1e-12)
        bound &= bool(np.linalg.norm(grad) <= np.linalg.norm(dec.per_class_grads, axis=1).max() + 1e-12)
    P = normalize(rng.standard_normal((1, 3, 6)))
    _, _, dec = push_loss(normalize(np.ones(6)), PrototypeBank(np.repeat(P, 5, axis=0), 9.0))
    tie = np.abs(dec.alpha - 0.2).max()
    ok = err < 1e-10 and simplex and bound and tie < 1e-6
    verdict(capsys, 2, ok, f"recon err {err:.1e}, simplex {simplex}, norm bound {bound}, tie dev {tie:.1e}")


# -- 3. metrics ---------------------------------------------------------------------


def _brute(s, y):
    pos, neg = s[y], s[~y]
    auc = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg) / (pos.size * neg.size)
    thr = max(t for t in np.unique(s) if np.mean(pos >= t) >= 0.95)
    return auc, np.mean(neg >= thr)


def test_criterion_3_metrics(capsys):
    rng = np.random.default_rng(11)
    exact, invariant = 0, True
    for _ in range(100):
        n = int(rng.integers(25, 201))
        s = np.round(rng.normal(size=n), 1)
        y = rng.permutation(n) < int(rng.integers(20, n))
        s[y] += rng.uniform(0, 2)
        exact += (auroc(s, y), fpr_at_95_tpr(s, y)) == _brute(s, y)
        for f in (np.exp, lambda v: 3 * v + 7):
            invariant &= auroc(f(s), y) == auroc(s, y) and fpr_at_95_tpr(f(s), y) == fpr_at_95_tpr(s, y)
    verdict(capsys, 3, exact == 100 and invariant, f"{exact}/100 exact, monotone invariant {invariant}")


# -- 4-7, 9. directional checks on the synthetic default ----------------------------


def test_criterion_4_forget_as_ood(capsys, runs):
    drops = [100 * (runs(s).base.forget_fpr95 - runs(s).unlearned().forget_fpr95) for s in SEEDS]
    hits = sum(d >= 30 for d in drops)
    verdict(capsys, 4, hits >= 4, f"forget FPR95 drop (points) per seed {[round(d, 1) for d in drops]}, {hits}/5 >= 30")


def test_criterion_5_utility(capsys, runs):
    rows = []
    for s in SEEDS:
        b, u = runs(s).base, runs(s).unlearned()
        rows.append((100 * (u.retain_acc - b.retain_acc), 100 * (u.avg_auroc - b.avg_auroc)))
    # a gain is never a violation; only losses beyond 2 points count
    hits = sum(da >= -2 and dauc >= -2 for da, dauc in rows)
    detail = ", ".join(f"acc {da:+.1f} auc {dauc:+.1f}" for da, dauc in rows)
    verdict(capsys, 5, hits >= 4, f"{detail}; {hits}/5 within 2 points")


def test_criterion_6_ablation(capsys, runs):
    rows = []
    for s in SEEDS:
        r = runs(s)
        no_push = r.unlearned(lambda_f=0.0)
        no_protect = r.unlearned(use_protect=False)
        full = r.unlearned()
        fpr_shift = 100 * abs(no_push.forget_fpr95 - r.base.forget_fpr95)
        acc_full = r.base.retain_acc - full.retain_acc
        acc_np = r.base.retain_acc - no_protect.retain_acc
        rows.append((fpr_shift, 100 * acc_full, 100 * acc_np))
    hits = sum(f <= 5 and np_ > af for f, af, np_ in rows)
    detail = ", ".join(f"[lf=0 shift {f:.1f}, acc drop full {af:.1f} vs no-protect {np_:.1f}]" for f, af, np_ in rows)
    verdict(capsys, 6, hits >= 4, f"{detail}; {hits}/5")


def test_criterion_7_continual(capsys, runs):
    rows = []
    for s in SEEDS:
        r = runs(s)
        _, naive = r.continual("naive")
        stack, orth = r.continual("orthogonal")
        # frozen task-1 adapters: retrain task 1 alone and compare bit for bit
        alone, _ = unlearn_tfer(r.proj, r.bank, r.ds, PLAN[0], UnlearnConfig(seed=s), task_id=0)
        frozen = all(
            np.array_equal(a, a2) and np.array_equal(b, b2)
            for (_, _, a, b), (_, _, a2, b2) in zip(alone.parameter_arrays(), [p for p in stack.parameter_arrays() if p[0] == 0])
        )
        f1_orth_t2 = 100 * orth[1].history[0][1]
        f1_orth_t1 = 100 * orth[0].history[0][1]
        f1_naive_t2 = 100 * naive[1].history[0][1]
        rows.append((f1_orth_t1, f1_orth_t2, f1_naive_t2, frozen))
    hits = sum(n - o2 >= 20 and abs(o2 - o1) <= 10 and fr for o1, o2, n, fr in rows)
    detail = ", ".join(f"[F1 orth {o1:.1f}->{o2:.1f}, naive {n:.1f}, frozen {fr}]" for o1, o2, n, fr in rows)
    verdict(capsys, 7, hits >= 4, f"{detail}; {hits}/5")


def _best_time(fn, repeats=2):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def test_criterion_8_efficiency(capsys, runs):
    cfg = UnlearnConfig()
    pc = PretrainConfig()
    D = 32
    full = pc.d_h * D + pc.d_h + pc.d_out * pc.d_h + pc.d_out
    adapter = (cfg.rank * D + pc.d_h * cfg.rank) + (cfg.rank * pc.d_h + pc.d_out * cfg.rank)
    r = runs(0)
    stack, _ = unlearn_tfer(r.proj, r.bank, r.ds, FORGET, dataclasses.replace(cfg, epochs=0))
    counted = trainable_param_count(stack)
    frac_ok = counted == adapter and r.proj.param_count == full and 10 * adapter <= full
    # same epochs, lr and batch size for both; best of two runs to damp timer noise
    t_unlearn = _best_time(lambda: unlearn_tfer(r.proj, r.bank, r.ds, FORGET, cfg))
    t_retrain = _best_time(lambda: baseline_retrain(r.ds, [c for c in range(10) if c not in FORGET], cfg, pc))
    ok = frac_ok and t_unlearn < t_retrain
    verdict(capsys, 8, ok, f"params {counted}/{full} = {100 * counted / full:.1f}%, wall unlearn {t_unlearn:.2f}s vs retrain {t_retrain:.2f}s")


def test_criterion_9_lambda_stability(capsys, runs):
    med = {}
    for lam in (0.1, 1.0, 10.0):
        kw = {} if lam == 1.0 else {"lambda_f": lam}
        med[lam] = 100 * float(np.median([runs(s).unlearned(**kw).forget_fpr95 for s in range(3)]))
    span = max(med.values()) - min(med.values())
    verdict(capsys, 9, span <= 10, f"median forget FPR95 {', '.join(f'{k:g}: {v:.1f}' for k, v in med.items())}; span {span:.1f}")


# -- 10. determinism and formats ------------------------------------------------------


def test_criterion_10_determinism(capsys, tmp_path):
    checks = {}
    a, b = generate_synthetic(per_class=60, seed=5), generate_synthetic(per_class=60, seed=5)
    checks["dataset crc"] = dataset_crc32(a) == dataset_crc32(b) and dataset_to_bytes(a) == dataset_to_bytes(b)
    buf = dataset_to_bytes(a)
    checks["dataset roundtrip"] = dataset_to_bytes(dataset_from_bytes(buf)) == buf

    cfg = {"per_class": 80, "ood_per_set": 100, "pretrain_epochs": 5, "epochs": 5, "d_h": 32, "d_out": 32}
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    for name in ("x", "y"):
        assert main(["unlearn", "--config", str(p), "--out", str(tmp_path / name)]) == 0
    checks["csv reports"] = all(
        (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes() for f in ("report.csv", "delta.csv", "trainlog.csv")
    )
    mbuf = (tmp_path / "x" / "model.bin").read_bytes()
    checks["checkpoint roundtrip"] = model_to_bytes(*model_from_bytes(mbuf)) == mbuf

    typed = True
    for data, loader in ((buf, dataset_from_bytes), (mbuf, model_from_bytes)):
        rng = np.random.default_rng(0)
        for cut in list(range(0, 64, 3)) + list(rng.integers(0, len(data), 30)):
            try:
                loader(data[:cut])
                typed = False
            except FormatError:
                pass
        for pos in rng.integers(0, len(data), 30):
            bad = bytearray(data)
            bad[pos] ^= 0x5A
            try:
                loader(bytes(bad))
                typed = False
            except TferError:
                pass
    checks["typed errors"] = typed
    verdict(capsys, 10, all(checks.values()), ", ".join(f"{k} {v}" for k, v in checks.items()))
