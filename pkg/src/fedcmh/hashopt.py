"""Composite local hashing objective and the discrete B / Y updates.

Shapes follow the columns-as-samples convention: ``F, G, B`` are ``r x m``,
``Y`` and prototype matrices are ``r x c`` and ``L`` is the ``m x c`` one-hot
label matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .modalitynets import ModalityNet, Prototypes, net_backward, net_forward_cached


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    mu: float = 10.0
    eta: float = 1e-5
    xi: float = 1.0
    # switches off O1 independently of beta (used by the no-prototype ablation)
    use_o1: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, bool) and not v >= 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0, got {v}")


AuxHashLoss = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[float, np.ndarray, np.ndarray]]


def sign_pm1(a: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1."""
    return np.where(np.asarray(a) >= 0.0, 1.0, -1.0)


def _check_same(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def loss_o1(p_local: Prototypes, p_global: Optional[Prototypes]) -> tuple[float, np.ndarray]:
    """MSE between local and global prototypes over classes both sides have."""
    grad = np.zeros_like(p_local.matrix)
    if p_global is None:
        return 0.0, grad
    _check_same(p_local.matrix, p_global.matrix, "loss_o1")
    shared = p_local.mask & p_global.mask
    n = int(shared.sum()) * p_local.code_length
    if n == 0:
        return 0.0, grad
    diff = (p_local.matrix - p_global.matrix)[:, shared]
    grad[:, shared] = 2.0 * diff / n
    return float(np.sum(diff * diff) / n), grad


def _fit_term(
    codes: np.ndarray, anchors: np.ndarray, target: np.ndarray, cols: Optional[np.ndarray] = None
) -> tuple[float, np.ndarray]:
    """``||target - codes^T anchors||_F^2`` over selected class columns, with grad wrt codes."""
    if cols is not None:
        anchors = anchors[:, cols]
        target = target[:, cols]
    resid = target - codes.T @ anchors
    return float(np.sum(resid * resid)), -2.0 * anchors @ resid.T


def loss_o2(
    F: np.ndarray,
    G: np.ndarray,
    Y: np.ndarray,
    B: np.ndarray,
    L: np.ndarray,
    p_global_x: Optional[Prototypes],
    p_global_t: Optional[Prototypes],
    weights: LossWeights,
) -> tuple[float, np.ndarray, np.ndarray]:
    r, m = F.shape
    _check_same(F, G, "loss_o2 F/G")
    _check_same(F, B, "loss_o2 F/B")
    if L.shape[0] != m or Y.shape != (r, L.shape[1]):
        raise ShapeError(f"loss_o2: Y {Y.shape} / L {L.shape} inconsistent with F {F.shape}")
    rL = r * L
    value = 0.0
    gF = np.zeros_like(F)
    gG = np.zeros_like(G)

    if weights.alpha:
        vf, df = _fit_term(F, Y, rL)
        vg, dg = _fit_term(G, Y, rL)
        value += weights.alpha * (vf + vg)
        gF += weights.alpha * df
        gG += weights.alpha * dg

    if weights.beta:
        for codes, grad, proto in ((F, gF, p_global_x), (G, gG, p_global_t)):
            if proto is None or not proto.mask.any():
                continue
            _check_same(proto.matrix, Y, "loss_o2 prototype")
            v, d = _fit_term(codes, proto.matrix, rL, proto.mask)
            value += weights.beta * v
            grad += weights.beta * d

    if weights.mu:
        df = B - F
        dg = B - G
        value += weights.mu * (float(np.sum(df * df)) + float(np.sum(dg * dg)))
        gF += -2.0 * weights.mu * df
        gG += -2.0 * weights.mu * dg

    return value, gF, gG


def default_aux_hash(F: np.ndarray, G: np.ndarray, L: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Inter-modal pairwise term ``(1/m^2) ||r S - F^T G / r||_F^2`` with ``S = L L^T``."""
    _check_same(F, G, "default_aux_hash")
    r, m = F.shape
    if L.shape[0] != m:
        raise ShapeError("default_aux_hash: label rows must equal sample count")
    S = L @ L.T
    resid = r * S - (F.T @ G) / r
    scale = 1.0 / (m * m)
    value = scale * float(np.sum(resid * resid))
    gF = -2.0 * scale / r * (G @ resid.T)
    gG = -2.0 * scale / r * (F @ resid)
    return value, gF, gG


@dataclass
class LossBreakdown:
    o1: float
    o2: float
    o_hash: float

    def total(self, weights: LossWeights) -> float:
        return self.o1 + weights.eta * self.o2 + weights.xi * self.o_hash


def total_loss(
    net_x: ModalityNet,
    net_t: ModalityNet,
    X: np.ndarray,
    T: np.ndarray,
    labels: np.ndarray,
    Y: np.ndarray,
    B: np.ndarray,
    p_global_x: Optional[Prototypes],
    p_global_t: Optional[Prototypes],
    weights: LossWeights,
    aux: AuxHashLoss = default_aux_hash,
    class_count: Optional[int] = None,
):
    """Evaluate ``O1 + eta*O2 + xi*O_hash`` on a batch and backpropagate into both nets.

    O1 compares the batch class means of the net outputs against the global
    prototypes, so its gradient reaches the parameters through the mean.

    Returns ``(value, grads_x, grads_t, breakdown)``.
    """
    c = Y.shape[1] if class_count is None else class_count
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    L = np.zeros((lab.size, c))
    L[np.arange(lab.size), lab] = 1.0

    F, cache_x = net_forward_cached(net_x, X)
    G, cache_t = net_forward_cached(net_t, T)
    gF = np.zeros_like(F)
    gG = np.zeros_like(G)

    o1 = 0.0
    if weights.use_o1:
        counts = L.sum(axis=0)
        present = counts > 0
        # column-normalised one-hot: F @ M gives the class means
        M = np.divide(L, counts[None, :], out=np.zeros_like(L), where=present[None, :])
        for codes, grad, proto in ((F, gF, p_global_x), (G, gG, p_global_t)):
            v, dP = loss_o1(Prototypes(codes @ M, present), proto)
            o1 += v
            grad += dP @ M.T

    o2 = 0.0
    if weights.eta:
        o2, dF, dG = loss_o2(F, G, Y, B, L, p_global_x, p_global_t, weights)
        gF += weights.eta * dF
        gG += weights.eta * dG

    oh = 0.0
    if weights.xi:
        oh, dF, dG = aux(F, G, L)
        gF += weights.xi * dF
        gG += weights.xi * dG

    parts = LossBreakdown(o1, o2, oh)
    grads_x = net_backward(net_x, cache_x, gF)
    grads_t = net_backward(net_t, cache_t, gG)
    return parts.total(weights), grads_x, grads_t, parts


def update_b(F: np.ndarray, G: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    _check_same(F, G, "update_b")
    return sign_pm1(F + G)


def dcc_objective(F: np.ndarray, G: np.ndarray, L: np.ndarray, Y: np.ndarray) -> float:
    """``||rL - F^T Y||^2 + ||rL - G^T Y||^2``."""
    r = F.shape[0]
    ef = r * L - F.T @ Y
    eg = r * L - G.T @ Y
    return float(np.sum(ef * ef) + np.sum(eg * eg))


def update_y_dcc(
    F: np.ndarray,
    G: np.ndarray,
    L: np.ndarray,
    Y_init: np.ndarray,
    sweeps: int = 5,
    on_update: Optional[Callable[[int, int, np.ndarray], None]] = None,
) -> np.ndarray:
    """Discrete cyclic coordinate descent over the rows of the class-code matrix.

    Each row ``k`` is replaced by its exact minimiser given the other rows,
    ``sign(q_k - sum_{l != k} A_kl y_l)`` with ``Q = r (F + G) L`` and
    ``A = F F^T + G G^T``. Stops after ``sweeps`` passes or a pass with no
    change. ``on_update(sweep, row, Y)`` is called after every row update.
    """
    F = np.asarray(F, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    _check_same(F, G, "update_y_dcc")
    r, m = F.shape
    Y = np.array(Y_init, dtype=np.float64)
    if L.shape[0] != m or Y.shape != (r, L.shape[1]):
        raise ShapeError(f"update_y_dcc: Y {Y.shape} / L {L.shape} inconsistent with F {F.shape}")
    if not np.all(np.abs(Y) == 1.0):
        raise ValueError("Y_init must have entries in {-1, +1}")
    Q = r * (F @ L + G @ L)
    A = F @ F.T + G @ G.T
    for sweep in range(sweeps):
        changed = False
        for k in range(r):
            # A[k] @ Y includes the l == k term; remove it
            field_k = Q[k] - (A[k] @ Y - A[k, k] * Y[k])
            row = sign_pm1(field_k)
            if not np.array_equal(row, Y[k]):
                Y[k] = row
                changed = True
            if on_update is not None:
                on_update(sweep, k, Y)
        if not changed:
            break
    return Y
