"""Independent reference implementations used only by the tests."""

import itertools

import numpy as np


def central_diff(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (x is perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def brute_force_ap(query, q_label, gallery, g_labels):
    """AP by explicit (distance, index) sorting and a running precision loop."""
    r = len(query)
    items = []
    for j in range(gallery.shape[1]):
        d = sum(1 for k in range(r) if query[k] != gallery[k, j])
        items.append((d, j))
    items.sort()
    hits, precisions = 0, []
    for rank, (_, j) in enumerate(items, start=1):
        if g_labels[j] == q_label:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions) if precisions else None


def enumerate_pm1(shape):
    n = int(np.prod(shape))
    for bits in itertools.product((-1.0, 1.0), repeat=n):
        yield np.array(bits).reshape(shape)


# ---------------------------------------------------------------------------
# random instances for the gradient checks (shared by unit and acceptance tests)


def _pm1(rng, shape):
    return np.where(rng.random(shape) < 0.5, -1.0, 1.0)


def _labels(rng, m, c):
    lab = rng.integers(0, c, size=m)
    L = np.zeros((m, c))
    L[np.arange(m), lab] = 1.0
    return lab, L


def _proto(rng, r, c):
    from fedcmh.modalitynets import Prototypes

    mask = rng.random(c) < 0.7
    mask[0] = True
    return Prototypes(rng.normal(size=(r, c)), mask)


def o1_grad_error(seed):
    from fedcmh.hashopt import loss_o1
    from fedcmh.modalitynets import Prototypes

    rng = np.random.default_rng(seed)
    r, c = rng.integers(2, 6), rng.integers(2, 5)
    local = _proto(rng, r, c)
    glob = _proto(rng, r, c)
    M = local.matrix.copy()

    def f():
        return loss_o1(Prototypes(M, local.mask), glob)[0]

    return rel_err(loss_o1(Prototypes(M, local.mask), glob)[1], central_diff(f, M))


def o2_grad_error(seed):
    from fedcmh.hashopt import LossWeights, loss_o2

    rng = np.random.default_rng(seed)
    r, m, c = rng.integers(2, 6), rng.integers(3, 9), rng.integers(2, 5)
    F, G = rng.normal(size=(r, m)), rng.normal(size=(r, m))
    Y, B = _pm1(rng, (r, c)), _pm1(rng, (r, m))
    _, L = _labels(rng, m, c)
    px, pt = _proto(rng, r, c), _proto(rng, r, c)
    w = LossWeights(alpha=rng.uniform(0.1, 1), beta=rng.uniform(0.1, 1), mu=rng.uniform(0.1, 2))
    _, gF, gG = loss_o2(F, G, Y, B, L, px, pt, w)

    def f():
        return loss_o2(F, G, Y, B, L, px, pt, w)[0]

    return max(rel_err(gF, central_diff(f, F)), rel_err(gG, central_diff(f, G)))


def aux_grad_error(seed):
    from fedcmh.hashopt import default_aux_hash

    rng = np.random.default_rng(seed)
    r, m, c = rng.integers(2, 6), rng.integers(3, 9), rng.integers(2, 5)
    F, G = rng.normal(size=(r, m)), rng.normal(size=(r, m))
    _, L = _labels(rng, m, c)
    _, gF, gG = default_aux_hash(F, G, L)

    def f():
        return default_aux_hash(F, G, L)[0]

    return max(rel_err(gF, central_diff(f, F)), rel_err(gG, central_diff(f, G)))


def composite_grad_error(seed):
    """Full objective through two 2-layer nets, all terms switched on."""
    from fedcmh.hashopt import LossWeights, total_loss
    from fedcmh.modalitynets import init_modality_net

    rng = np.random.default_rng(seed)
    r, m, c, dx, dt = 4, 7, 3, 5, 6
    nx = init_modality_net(dx, r, hidden=(6,), seed=seed * 2 + 1)
    nt = init_modality_net(dt, r, hidden=(6,), seed=seed * 2 + 2, modality="text")
    X, T = rng.normal(size=(dx, m)), rng.normal(size=(dt, m))
    lab, _ = _labels(rng, m, c)
    Y, B = _pm1(rng, (r, c)), _pm1(rng, (r, m))
    px, pt = _proto(rng, r, c), _proto(rng, r, c)
    w = LossWeights(alpha=0.5, beta=0.5, mu=1.0, eta=0.1, xi=1.0)

    def f():
        return total_loss(nx, nt, X, T, lab, Y, B, px, pt, w)[0]

    _, gx, gt, _ = total_loss(nx, nt, X, T, lab, Y, B, px, pt, w)
    errs = []
    for net, grads in ((nx, gx), (nt, gt)):
        for layer, (gw, gb) in zip(net.layers, grads):
            errs.append(rel_err(gw, central_diff(f, layer.weight)))
            errs.append(rel_err(gb, central_diff(f, layer.bias)))
    return max(errs)


def dcc_instance(seed, r, c, m):
    rng = np.random.default_rng(seed)
    F, G = rng.normal(size=(r, m)), rng.normal(size=(r, m))
    _, L = _labels(rng, m, c)
    return F, G, L, _pm1(rng, (r, c))


def random_retrieval_set(seed):
    """Small random query/gallery instance with g <= 12; every query has a relevant item."""
    rng = np.random.default_rng(seed)
    r = int(rng.integers(2, 7))
    g = int(rng.integers(2, 13))
    c = int(rng.integers(1, 4))
    nq = int(rng.integers(1, 6))
    q_labels = rng.integers(0, c, size=nq)
    g_labels = rng.integers(0, c, size=g)
    g_labels[: min(c, g)] = np.arange(min(c, g))
    q_labels = q_labels % min(c, g)
    return _pm1(rng, (r, nq)), q_labels, _pm1(rng, (r, g)), g_labels


def brute_force_map(q_codes, q_labels, g_codes, g_labels):
    aps = [brute_force_ap(q_codes[:, i], q_labels[i], g_codes, g_labels) for i in range(len(q_labels))]
    aps = [a for a in aps if a is not None]
    return sum(aps) / len(aps)
