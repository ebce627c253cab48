import numpy as np
import pytest

from fedcmh.errors import ConfigError, ShapeError
from fedcmh.hashopt import (
    LossWeights,
    dcc_objective,
    default_aux_hash,
    loss_o1,
    loss_o2,
    sign_pm1,
    total_loss,
    update_b,
    update_y_dcc,
)
from fedcmh.modalitynets import Prototypes, init_modality_net

from oracles import (
    aux_grad_error,
    composite_grad_error,
    dcc_instance,
    enumerate_pm1,
    o1_grad_error,
    o2_grad_error,
)


def test_o1_equal_prototypes_is_zero():
    P = Prototypes(np.arange(6.0).reshape(2, 3))
    v, g = loss_o1(P, Prototypes(P.matrix.copy()))
    assert v == 0.0 and not g.any()


def test_o1_absent_global_is_zero():
    P = Prototypes(np.ones((2, 3)))
    assert loss_o1(P, None)[0] == 0.0
    assert loss_o1(P, Prototypes.empty(2, 3))[0] == 0.0


def test_o1_hand_example():
    # only class 0 is shared: diff (1, 3) -> mean of squares 5
    local = Prototypes(np.array([[2.0, 9.0], [4.0, 9.0]]), [True, True])
    glob = Prototypes(np.array([[1.0, 0.0], [1.0, 0.0]]), [True, False])
    v, g = loss_o1(local, glob)
    assert v == pytest.approx(5.0)
    np.testing.assert_allclose(g, [[1.0, 0.0], [3.0, 0.0]])


def test_o2_perfect_codes_give_zero():
    # F = G = B = Y L^T with Y^T Y = r I makes the class-code fit exact
    Y = np.array([[1.0, 1.0], [1.0, -1.0]])
    L = np.array([[1.0, 0], [0, 1.0], [1.0, 0]])
    F = Y @ L.T
    w = LossWeights(beta=0.0)
    v, gF, gG = loss_o2(F, F.copy(), Y, F.copy(), L, None, None, w)
    assert v == pytest.approx(0.0, abs=1e-12)
    assert not gF.any() and not gG.any()


def test_o2_quantization_term_alone():
    w = LossWeights(alpha=0.0, beta=0.0, mu=2.0)
    F = np.full((1, 2), 0.5)
    B = np.ones((1, 2))
    v, _, _ = loss_o2(F, F.copy(), np.ones((1, 1)), B, np.ones((2, 1)), None, None, w)
    assert v == pytest.approx(2.0 * (0.5 + 0.5))


def test_o2_shape_errors():
    w = LossWeights()
    with pytest.raises(ShapeError):
        loss_o2(np.zeros((2, 3)), np.zeros((2, 4)), np.ones((2, 2)), np.ones((2, 3)), np.eye(3, 2), None, None, w)


def test_aux_perfect_agreement_is_zero():
    L = np.array([[1.0, 0], [0, 1.0]])
    r = 2
    # orthogonal columns of norm r make F^T F / r = r I = r S
    F = np.array([[1.0, 1.0], [1.0, -1.0]]) * np.sqrt(r)
    v, gF, gG = default_aux_hash(F, F.copy(), L)
    assert v == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_term_gradients(seed):
    assert o1_grad_error(seed) < 1e-5
    assert o2_grad_error(seed) < 1e-5
    assert aux_grad_error(seed) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_composite_gradient(seed):
    assert composite_grad_error(seed) < 1e-4


def test_total_loss_weight_zeroing():
    rng = np.random.default_rng(5)
    nx = init_modality_net(3, 2, hidden=(4,), seed=1)
    nt = init_modality_net(3, 2, hidden=(4,), seed=2)
    X, T = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    lab = np.array([0, 1, 1, 0, 1])
    Y, B = np.ones((2, 2)), np.ones((2, 5))
    P = Prototypes(rng.normal(size=(2, 2)))
    off = LossWeights(alpha=0, beta=0, mu=0, eta=0, xi=0, use_o1=False)
    v, gx, _, parts = total_loss(nx, nt, X, T, lab, Y, B, P, P, off)
    assert v == 0.0
    assert all(not gw.any() and not gb.any() for gw, gb in gx)
    only_hash = LossWeights(eta=0, use_o1=False)
    v, _, _, parts = total_loss(nx, nt, X, T, lab, Y, B, P, P, only_hash)
    assert parts.o1 == 0.0 and parts.o2 == 0.0 and v == pytest.approx(parts.o_hash)


def test_negative_weight_rejected():
    with pytest.raises(ConfigError):
        LossWeights(alpha=-1.0)


def test_update_b_examples():
    np.testing.assert_array_equal(update_b([[0.3, -0.2]], [[-0.1, -0.5]]), [[1.0, -1.0]])
    np.testing.assert_array_equal(update_b([[0.0]], [[0.0]]), [[1.0]])
    np.testing.assert_array_equal(sign_pm1(np.array([-0.0, 2.0, -3.0])), [1.0, 1.0, -1.0])


def test_update_b_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(20):
        F, G = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
        best = min(enumerate_pm1((2, 2)), key=lambda B: np.sum((B - F) ** 2) + np.sum((B - G) ** 2))
        np.testing.assert_array_equal(update_b(F, G), best)


def test_dcc_hand_example():
    # one class, one bit: field is positive so Y = +1
    F = np.array([[1.0, 2.0]])
    L = np.ones((2, 1))
    Y = update_y_dcc(F, F.copy(), L, -np.ones((1, 1)))
    assert Y[0, 0] == 1.0


def test_dcc_row_updates_never_increase_objective():
    F, G, L, Y0 = dcc_instance(1, 4, 3, 8)
    seen = [dcc_objective(F, G, L, Y0)]
    update_y_dcc(F, G, L, Y0, sweeps=20, on_update=lambda s, k, Y: seen.append(dcc_objective(F, G, L, Y)))
    assert all(b <= a + 1e-9 for a, b in zip(seen, seen[1:]))


def test_dcc_one_flip_optimal():
    F, G, L, Y0 = dcc_instance(2, 4, 3, 8)
    Y = update_y_dcc(F, G, L, Y0, sweeps=100)
    base = dcc_objective(F, G, L, Y)
    for i in range(Y.shape[0]):
        for j in range(Y.shape[1]):
            Z = Y.copy()
            Z[i, j] *= -1
            assert dcc_objective(F, G, L, Z) >= base - 1e-9


def test_dcc_vs_enumeration():
    hits = 0
    for seed in range(20):
        F, G, L, Y0 = dcc_instance(seed, 3, 2, 6)
        Y = update_y_dcc(F, G, L, Y0, sweeps=100)
        v = dcc_objective(F, G, L, Y)
        assert v <= dcc_objective(F, G, L, Y0) + 1e-9
        best = min(dcc_objective(F, G, L, Z) for Z in enumerate_pm1((3, 2)))
        hits += v <= best + 1e-9
    assert hits >= 16


def test_dcc_rejects_non_binary_start():
    F, G, L, _ = dcc_instance(0, 2, 2, 4)
    with pytest.raises(ValueError):
        update_y_dcc(F, G, L, np.zeros((2, 2)))
