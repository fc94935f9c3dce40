import numpy as np
import pytest

from tfer.bank import PrototypeBank
from tfer.errors import EmptyRetainSet, ForgetLabelInProtect, ShapeMismatch
from tfer.geometry import normalize
from tfer.losses import (
    LossWeights,
    orthogonality_loss,
    protect_loss,
    protect_loss_batch,
    push_loss,
    push_loss_batch,
    total_objective,
)
from tfer.model import AdapterStack, Projector


def _bank(seed, C=3, K=2, D=8, kappa=4.0, forgotten=()):
    rng = np.random.default_rng(seed)
    return PrototypeBank(normalize(rng.standard_normal((C, K, D))), kappa, forgotten)


def _fd(f, z, h=1e-4):
    g = np.zeros_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        g[i] = (f(z + e) - f(z - e)) / (2 * h)
    return g


def test_push_brute_force_and_fd():
    # 3 classes, K=2, D=8: LSE_j log(0.5 sum_k exp(kappa p.z))
    bank = _bank(0)
    z = normalize(np.random.default_rng(1).standard_normal(8))

    def brute(v):
        L = [np.log(0.5 * sum(np.exp(bank.kappa * p @ v) for p in bank.prototypes[j])) for j in range(3)]
        return np.log(np.sum(np.exp(L)))

    loss, grad, _ = push_loss(z, bank)
    assert loss == pytest.approx(brute(z), rel=1e-12)
    num = _fd(brute, z)
    assert np.abs(grad - num).max() / np.abs(num).max() < 1e-4


def test_push_decomposition_identity():
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(1000):
        C, K, D = rng.integers(2, 6), rng.integers(1, 4), rng.integers(3, 10)
        bank = PrototypeBank(normalize(rng.standard_normal((C, K, D))), rng.uniform(0.5, 30))
        z = normalize(rng.standard_normal(D))
        _, grad, dec = push_loss(z, bank)
        worst = max(worst, np.abs(dec.reconstruct() - grad).max())
        assert np.all(dec.alpha > 0) and dec.alpha.sum() == pytest.approx(1.0)
        norms = np.linalg.norm(dec.per_class_grads, axis=1)
        assert np.linalg.norm(grad) <= norms.max() + 1e-12
    assert worst < 1e-10


def test_push_equal_logits_uniform_alpha():
    # every class has the same prototype set -> identical logits
    P = normalize(np.random.default_rng(3).standard_normal((1, 2, 5)))
    bank = PrototypeBank(np.repeat(P, 4, axis=0), 7.0)
    _, _, dec = push_loss(normalize(np.ones(5)), bank)
    assert np.abs(dec.alpha - 0.25).max() < 1e-6


def test_push_empty_retained():
    bank = _bank(0, forgotten=(0, 1, 2))
    with pytest.raises(EmptyRetainSet):
        push_loss_batch(np.ones((1, 8)) / np.sqrt(8), bank)


@pytest.mark.parametrize("soft", [False, True])
def test_protect_fd(soft):
    bank = _bank(4, C=4, K=2, D=6)
    z0 = normalize(np.random.default_rng(5).standard_normal(6))
    loss, grad = protect_loss(z0, 2, bank, 0.3, soft=soft)

    def f(v):
        return protect_loss(v, 2, bank, 0.3, soft=soft)[0]

    num = _fd(f, z0)
    # the hard variant picks a max prototype; fd is valid away from ties
    assert np.abs(grad - num).max() / np.abs(num).max() < 1e-4
    assert loss > 0


def test_protect_soft_equals_hard_for_k1():
    bank = _bank(6, C=4, K=1, D=6)
    Z = normalize(np.random.default_rng(7).standard_normal((10, 6)))
    y = np.arange(10) % 4
    a = protect_loss_batch(Z, y, bank, 0.2)
    b = protect_loss_batch(Z, y, bank, 0.2, soft=True)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def test_protect_zero_limit():
    # z = p_y and every other similarity lower: loss decreases toward 0 as tau shrinks
    P = np.eye(4)
    bank = PrototypeBank(P, 1.0)
    losses = [protect_loss(P[1], 1, bank, t)[0] for t in (1.0, 0.3, 0.1, 0.03)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-12


def test_protect_rejects_forgotten_label():
    bank = _bank(0, forgotten=(1,))
    with pytest.raises(ForgetLabelInProtect):
        protect_loss_batch(normalize(np.ones((2, 8))), [0, 1], bank, 0.1)


def test_orthogonality_examples():
    a_ref = np.array([[1.0, 0.0]])
    assert orthogonality_loss(a_ref, a_ref)[0] == 0.0
    assert orthogonality_loss(np.array([[2.0, 0.0]]), a_ref)[0] == pytest.approx(1.0)
    # update rows along e2, reference rows along e1
    assert orthogonality_loss(a_ref + np.array([[0.0, 3.0]]), a_ref)[0] == 0.0
    with pytest.raises(ShapeMismatch):
        orthogonality_loss(np.zeros((2, 2)), np.zeros((1, 2)))


def test_orthogonality_fd():
    rng = np.random.default_rng(8)
    a_t, a_ref = rng.standard_normal((3, 7)), rng.standard_normal((3, 7))
    loss, g = orthogonality_loss(a_t, a_ref)
    # brute force: sum over (i, j) of ((a_t - a_ref)_i . a_ref_j)^2
    d = a_t - a_ref
    assert loss == pytest.approx(sum((d[i] @ a_ref[j]) ** 2 for i in range(3) for j in range(3)))
    num = _fd(lambda v: orthogonality_loss(v.reshape(3, 7), a_ref)[0], a_t.ravel()).reshape(3, 7)
    assert np.abs(g - num).max() / np.abs(num).max() < 1e-6


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_f=-1)
    with pytest.raises(ValueError):
        LossWeights(tau=0)


def _setup(seed, D_in, D_h, D_out, C, r, placement="both"):
    rng = np.random.default_rng(seed)
    P = Projector.random(D_in, D_h, D_out, rng)
    P = Projector(P.w1, rng.normal(size=D_h) * 0.1, P.w2, rng.normal(size=D_out) * 0.1)
    stack = AdapterStack()
    stack.new_task(0, P, placement, r, rng=seed)
    for ad in stack.active().adapters:
        ad.a[:] = rng.normal(size=ad.a.shape) * 0.5
        ad.b[:] = rng.normal(size=ad.b.shape) * 0.5
    bank = PrototypeBank(normalize(rng.standard_normal((C, 2, D_out))), 3.0, forgotten=(0,))
    xf = rng.standard_normal((3, D_in))
    xr = rng.standard_normal((5, D_in))
    yr = rng.integers(1, C, size=5)
    refs = {ad.layer_index: [rng.standard_normal(ad.a.shape)] for ad in stack.active().adapters}
    return P, stack, bank, xf, xr, yr, refs


def fd_objective_check(seed, D_in, D_h, D_out, C, r, h=1e-4):
    P, stack, bank, xf, xr, yr, refs = _setup(seed, D_in, D_h, D_out, C, r)
    w = LossWeights(1.3, 0.7, 0.5)
    J, grads, _ = total_objective(xf, xr, yr, P, stack, bank, w, ref_adapters=refs)
    worst = 0.0
    for ad in stack.active().adapters:
        for arr, ana in zip((ad.a, ad.b), grads[ad.layer_index]):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                fp = total_objective(xf, xr, yr, P, stack, bank, w, ref_adapters=refs)[0]
                arr[idx] = old - h
                fm = total_objective(xf, xr, yr, P, stack, bank, w, ref_adapters=refs)[0]
                arr[idx] = old
                num[idx] = (fp - fm) / (2 * h)
            worst = max(worst, np.abs(ana - num).max() / max(np.abs(num).max(), 1e-8))
    return worst


def test_total_objective_fd_small():
    assert fd_objective_check(0, 4, 6, 5, 3, 1) < 1e-4


def test_total_objective_empty_forget_is_pure_protect():
    P, stack, bank, xf, xr, yr, _ = _setup(1, 4, 6, 5, 3, 1)
    w = LossWeights()
    J, _, parts = total_objective(np.empty((0, 4)), xr, yr, P, stack, bank, w)
    assert parts.push == 0.0 and J == pytest.approx(parts.protect)


def test_total_objective_empty_retain():
    P, stack, bank, xf, xr, yr, _ = _setup(1, 4, 6, 5, 3, 1)
    with pytest.raises(EmptyRetainSet):
        total_objective(xf, np.empty((0, 4)), [], P, stack, bank, LossWeights())
