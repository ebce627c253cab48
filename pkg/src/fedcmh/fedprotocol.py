"""Federated rounds: hypernetwork layer weights, client local updates, prototype aggregation.

The server side only ever sees parameter snapshots, parameter deltas,
hypernetwork state and class prototypes. Sample features and labels stay
inside :class:`ClientHandle`.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .datamodel import Dataset, one_hot_labels
from .errors import ConfigError, ShapeError
from .hashopt import AuxHashLoss, LossWeights, default_aux_hash, sign_pm1, total_loss, update_b, update_y_dcc
from .modalitynets import (
    IMAGE,
    TEXT,
    ModalityNet,
    Prototypes,
    SgdOptimizer,
    apply_gradients,
    class_means,
    init_modality_net,
    net_forward,
)
from .numkernel import Activation, AffineLayer, layer_backward, layer_forward

log = logging.getLogger(__name__)

ParamDelta = list  # list of (dW, db) pairs, one per layer

METHODS = ("plfedcmh", "pfedcmh", "lfedcmh", "fedavg", "local_only", "centralized")


# ---------------------------------------------------------------------------
# parameter arithmetic


def net_delta(after: ModalityNet, before: ModalityNet) -> ParamDelta:
    return [(a.weight - b.weight, a.bias - b.bias) for a, b in zip(after.layers, before.layers)]


def net_add(net: ModalityNet, delta: ParamDelta) -> ModalityNet:
    layers = [
        AffineLayer(l.weight + dw, l.bias + db, l.activation) for l, (dw, db) in zip(net.layers, delta)
    ]
    return ModalityNet(layers, net.modality, net.seed)


def delta_is_zero(delta: ParamDelta) -> bool:
    return all(not dw.any() and not db.any() for dw, db in delta)


def weighted_average(nets: list[ModalityNet], weights) -> ModalityNet:
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    layers = []
    for k, ref in enumerate(nets[0].layers):
        wk = sum(wi * n.layers[k].weight for wi, n in zip(w, nets))
        bk = sum(wi * n.layers[k].bias for wi, n in zip(w, nets))
        layers.append(AffineLayer(wk, bk, ref.activation))
    return ModalityNet(layers, nets[0].modality, nets[0].seed)


def apply_layered_weights(net: ModalityNet, layer_weights) -> ModalityNet:
    """Scale every parameter of layer ``k`` (weight and bias) by ``layer_weights[k]``."""
    w = np.asarray(layer_weights, dtype=np.float64).reshape(-1)
    if w.size != net.depth:
        raise ShapeError(f"got {w.size} layer weights for a {net.depth}-layer net")
    layers = [AffineLayer(wk * l.weight, wk * l.bias, l.activation) for wk, l in zip(w, net.layers)]
    return ModalityNet(layers, net.modality, net.seed)


# ---------------------------------------------------------------------------
# hypernetworks


@dataclass
class Hypernetwork:
    """Maps a learnable client embedding to one scalar weight per modality-net layer."""

    embedding: np.ndarray
    layers: list[AffineLayer]
    learning_rate: float = 1e-3

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "Hypernetwork":
        return Hypernetwork(self.embedding.copy(), [l.copy() for l in self.layers], self.learning_rate)


def init_hypernetwork(
    n_outputs: int,
    embed_dim: int = 32,
    hidden: int = 64,
    n_layers: int = 4,
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> Hypernetwork:
    """Fresh hypernetwork whose output is exactly all ones.

    The final layer starts with zero weights and unit bias, so the first round
    leaves client parameters untouched.
    """
    if n_layers < 1:
        raise ConfigError("hypernetwork needs at least one layer")
    rng = np.random.default_rng(seed)
    dims = [embed_dim] + [hidden] * (n_layers - 1) + [n_outputs]
    layers = []
    for din, dout in zip(dims[:-2], dims[1:-1]):
        bound = 1.0 / np.sqrt(din)
        layers.append(
            AffineLayer(
                rng.uniform(-bound, bound, (dout, din)), rng.uniform(-bound, bound, dout), Activation.RELU
            )
        )
    layers.append(AffineLayer(np.zeros((n_outputs, dims[-2])), np.ones(n_outputs), Activation.IDENTITY))
    return Hypernetwork(rng.standard_normal(embed_dim), layers, learning_rate)


def _hn_forward_cached(hn: Hypernetwork):
    h = hn.embedding.reshape(-1, 1)
    inputs = []
    for layer in hn.layers:
        inputs.append(h)
        h = layer_forward(layer, h)
    return h.reshape(-1), inputs


def hn_forward(hn: Hypernetwork) -> np.ndarray:
    return _hn_forward_cached(hn)[0]


def layer_weight_gradient(theta: ModalityNet, delta: ParamDelta) -> np.ndarray:
    """Gradient of ``<theta_bar(w), -delta>`` wrt the layer weights ``w``."""
    if len(delta) != theta.depth:
        raise ShapeError("delta depth does not match the net")
    return np.array(
        [
            -(float(np.sum(l.weight * dw)) + float(np.sum(l.bias * db)))
            for l, (dw, db) in zip(theta.layers, delta)
        ]
    )


def hn_gradients(hn: Hypernetwork, theta: ModalityNet, delta: ParamDelta):
    """Return ``(grad_embedding, [(grad_W, grad_b), ...])`` of the delta surrogate.

    ``theta`` is the unscaled parameter snapshot the layer weights multiply;
    ``-delta`` stands in for the gradient of the local objective wrt the
    scaled parameters.
    """
    if hn.n_outputs != theta.depth:
        raise ShapeError(f"hypernetwork emits {hn.n_outputs} weights for a {theta.depth}-layer net")
    g = layer_weight_gradient(theta, delta).reshape(-1, 1)
    _, inputs = _hn_forward_cached(hn)
    grads = [None] * len(hn.layers)
    for k in range(len(hn.layers) - 1, -1, -1):
        gw, gb, g = layer_backward(hn.layers[k], inputs[k], g)
        grads[k] = (gw, gb)
    return g.reshape(-1), grads


def hn_update(hn: Hypernetwork, theta: ModalityNet, delta: ParamDelta) -> Hypernetwork:
    if delta_is_zero(delta):
        return hn.copy()
    g_s, grads = hn_gradients(hn, theta, delta)
    lr = hn.learning_rate
    layers = [
        AffineLayer(l.weight - lr * gw, l.bias - lr * gb, l.activation) for l, (gw, gb) in zip(hn.layers, grads)
    ]
    return Hypernetwork(hn.embedding - lr * g_s, layers, lr)


# ---------------------------------------------------------------------------
# prototypes


def aggregate_prototypes(local: list[Prototypes]) -> Prototypes:
    """Unweighted per-class mean over the clients that have the class."""
    if not local:
        raise ValueError("no prototypes to aggregate")
    shape = local[0].matrix.shape
    total = np.zeros(shape)
    count = np.zeros(shape[1])
    for p in local:
        if p.matrix.shape != shape:
            raise ShapeError("prototype shapes differ across clients")
        total += np.where(p.mask[None, :], p.matrix, 0.0)
        count += p.mask
    mask = count > 0
    mean = np.divide(total, count[None, :], out=np.zeros(shape), where=mask[None, :])
    return Prototypes(mean, mask)


# ---------------------------------------------------------------------------
# clients


@dataclass
class LocalConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    dcc_sweeps: int = 5
    # "epoch": O1 uses batch class means; "batch": O1 uses full-shard means every step
    prototype_mode: str = "epoch"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.prototype_mode not in ("epoch", "batch"):
            raise ConfigError(f"prototype_mode must be 'epoch' or 'batch', got {self.prototype_mode!r}")


@dataclass
class HashState:
    B: np.ndarray
    Y: np.ndarray

    @property
    def code_length(self) -> int:
        return self.Y.shape[0]


@dataclass
class LocalResult:
    client_id: int
    delta_x: ParamDelta
    delta_t: ParamDelta
    proto_x: Prototypes
    proto_t: Prototypes
    loss_trace: list[float]
    sample_count: int


class ClientHandle:
    """One client: private shard, current nets, hash codes and local prototypes."""

    def __init__(self, client_id: int, data: Dataset, net_x: ModalityNet, net_t: ModalityNet, seed: int = 0):
        self.client_id = int(client_id)
        self._data = data
        self.net_x = net_x
        self.net_t = net_t
        self.seed = seed
        self._L = one_hot_labels(data.labels, data.class_count)
        r, c = net_x.output_dim, data.class_count
        if self.size:
            F, G = self.encode()
            rng = np.random.default_rng([seed, self.client_id, 0xC0DE])
            Y0 = sign_pm1(rng.standard_normal((r, c)))
            self.hash_state = HashState(update_b(F, G), update_y_dcc(F, G, self._L, Y0))
            self.proto_x, self.proto_t = self._prototypes(F, G)
        else:
            self.hash_state = HashState(np.ones((r, 0)), np.ones((r, c)))
            self.proto_x = self.proto_t = Prototypes.empty(r, c)

    @property
    def size(self) -> int:
        return self._data.sample_count

    @property
    def class_count(self) -> int:
        return self._data.class_count

    def encode(self) -> tuple[np.ndarray, np.ndarray]:
        return net_forward(self.net_x, self._data.image_features), net_forward(self.net_t, self._data.text_features)

    def _prototypes(self, F, G) -> tuple[Prototypes, Prototypes]:
        mx, cnt = class_means(F, self._data.labels, self.class_count)
        mt, _ = class_means(G, self._data.labels, self.class_count)
        return Prototypes(mx, cnt > 0), Prototypes(mt, cnt > 0)

    def objective(self, p_global_x, p_global_t, weights: LossWeights, aux: AuxHashLoss = default_aux_hash) -> float:
        """Full-shard value of the local objective at the current nets and codes."""
        value, *_ = total_loss(
            self.net_x,
            self.net_t,
            self._data.image_features,
            self._data.text_features,
            self._data.labels,
            self.hash_state.Y,
            self.hash_state.B,
            p_global_x,
            p_global_t,
            weights,
            aux,
        )
        return value

    def local_update(
        self,
        theta_x: ModalityNet,
        theta_t: ModalityNet,
        p_global_x: Optional[Prototypes],
        p_global_t: Optional[Prototypes],
        cfg: LocalConfig,
        rng: np.random.Generator,
        aux: AuxHashLoss = default_aux_hash,
    ) -> LocalResult:
        self.net_x = theta_x.copy()
        self.net_t = theta_t.copy()
        opt = SgdOptimizer(cfg.learning_rate)
        data, st = self._data, self.hash_state
        trace = [self.objective(p_global_x, p_global_t, cfg.weights, aux)]
        for _ in range(cfg.epochs):
            order = rng.permutation(self.size)
            for start in range(0, self.size, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                _, gx, gt, _ = total_loss(
                    self.net_x,
                    self.net_t,
                    data.image_features[:, batch],
                    data.text_features[:, batch],
                    data.labels[batch],
                    st.Y,
                    st.B[:, batch],
                    p_global_x,
                    p_global_t,
                    replace(cfg.weights, use_o1=False) if cfg.prototype_mode == "batch" else cfg.weights,
                    aux,
                    self.class_count,
                )
                if cfg.prototype_mode == "batch" and cfg.weights.use_o1:
                    hx, ht = self._full_shard_o1_grads(p_global_x, p_global_t)
                    gx = [(a + c, b + d) for (a, b), (c, d) in zip(gx, hx)]
                    gt = [(a + c, b + d) for (a, b), (c, d) in zip(gt, ht)]
                self.net_x = apply_gradients(self.net_x, gx, opt)
                self.net_t = apply_gradients(self.net_t, gt, opt)
            F, G = self.encode()
            self.proto_x, self.proto_t = self._prototypes(F, G)
            st.B = update_b(F, G)
            st.Y = update_y_dcc(F, G, self._L, st.Y, cfg.dcc_sweeps)
            trace.append(self.objective(p_global_x, p_global_t, cfg.weights, aux))
        if cfg.epochs == 0:
            F, G = self.encode()
            self.proto_x, self.proto_t = self._prototypes(F, G)
        return LocalResult(
            self.client_id,
            net_delta(self.net_x, theta_x),
            net_delta(self.net_t, theta_t),
            self.proto_x,
            self.proto_t,
            trace,
            self.size,
        )

    def _full_shard_o1_grads(self, p_global_x, p_global_t):
        only_o1 = LossWeights(alpha=0, beta=0, mu=0, eta=0, xi=0, use_o1=True)
        _, hx, ht, _ = total_loss(
            self.net_x,
            self.net_t,
            self._data.image_features,
            self._data.text_features,
            self._data.labels,
            self.hash_state.Y,
            self.hash_state.B,
            p_global_x,
            p_global_t,
            only_o1,
            class_count=self.class_count,
        )
        return hx, ht


# ---------------------------------------------------------------------------
# server


@dataclass
class MethodSwitches:
    prototypes: bool = True
    layered_weights: bool = True
    average_params: bool = False

    @classmethod
    def for_method(cls, method: str) -> "MethodSwitches":
        table = {
            "plfedcmh": cls(True, True, False),
            "pfedcmh": cls(True, False, False),
            "lfedcmh": cls(False, True, False),
            "fedavg": cls(False, False, True),
            "local_only": cls(False, False, False),
            "centralized": cls(False, False, False),
        }
        if method not in table:
            raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
        return table[method]


@dataclass
class RoundState:
    """Everything the server holds between rounds; contains no sample-level data."""

    round_index: int
    params: dict[int, tuple[ModalityNet, ModalityNet]]
    hypernets: dict[int, tuple[Hypernetwork, Hypernetwork]]
    global_x: Optional[Prototypes] = None
    global_t: Optional[Prototypes] = None
    deltas: dict[int, tuple[ParamDelta, ParamDelta]] = field(default_factory=dict)
    sample_counts: dict[int, int] = field(default_factory=dict)


@dataclass
class RoundLog:
    round_index: int
    loss_traces: dict[int, list[float]]
    layer_weights: dict[int, tuple[list[float], list[float]]]
    prototype_norms: dict[str, float]


class Federation:
    """Server-side driver for one method over a fixed set of clients."""

    def __init__(
        self,
        clients: list[ClientHandle],
        init_x: ModalityNet,
        init_t: ModalityNet,
        local_cfg: LocalConfig,
        switches: MethodSwitches,
        *,
        seed: int = 0,
        hn_lr: float = 1e-3,
        hn_embed_dim: int = 32,
        hn_hidden: int = 64,
        threads: int = 1,
        aux: AuxHashLoss = default_aux_hash,
    ):
        self.clients = sorted([c for c in clients if c.size > 0], key=lambda c: c.client_id)
        for c in clients:
            if c.size == 0:
                log.warning("client %d has an empty shard and is skipped", c.client_id)
        if not switches.prototypes:
            w = local_cfg.weights
            local_cfg = replace(local_cfg, weights=replace(w, beta=0.0, use_o1=False))
        self.local_cfg = local_cfg
        self.switches = switches
        self.seed = seed
        self.threads = max(1, int(threads))
        self.aux = aux
        params = {c.client_id: (init_x.copy(), init_t.copy()) for c in self.clients}
        hns = {
            c.client_id: (
                init_hypernetwork(init_x.depth, hn_embed_dim, hn_hidden, 4, hn_lr, seed=[seed, c.client_id, 0]),
                init_hypernetwork(init_t.depth, hn_embed_dim, hn_hidden, 4, hn_lr, seed=[seed, c.client_id, 1]),
            )
            for c in self.clients
        }
        self.state = RoundState(0, params, hns, sample_counts={c.client_id: c.size for c in self.clients})
        self.history: list[RoundLog] = []

    def personalised_params(self, client_id: int) -> tuple[ModalityNet, ModalityNet]:
        """Parameters the server sends to a client: snapshot scaled by its layer weights."""
        theta_x, theta_t = self.state.params[client_id]
        if not self.switches.layered_weights:
            return theta_x, theta_t
        hx, ht = self.state.hypernets[client_id]
        return apply_layered_weights(theta_x, hn_forward(hx)), apply_layered_weights(theta_t, hn_forward(ht))

    def _client_work(self, client: ClientHandle, round_index: int) -> LocalResult:
        bar_x, bar_t = self.personalised_params(client.client_id)
        rng = np.random.default_rng([self.seed, round_index, client.client_id])
        return client.local_update(
            bar_x, bar_t, self.state.global_x, self.state.global_t, self.local_cfg, rng, self.aux
        )

    def run_round(self) -> RoundState:
        st = self.state
        r = st.round_index + 1
        layer_w = {}
        for c in self.clients:
            if self.switches.layered_weights:
                hx, ht = st.hypernets[c.client_id]
                layer_w[c.client_id] = (hn_forward(hx).tolist(), hn_forward(ht).tolist())
            else:
                layer_w[c.client_id] = ([1.0] * st.params[c.client_id][0].depth, [1.0] * st.params[c.client_id][1].depth)

        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(lambda c: self._client_work(c, r), self.clients))
        else:
            results = [self._client_work(c, r) for c in self.clients]

        # barrier: server phase in ascending client id
        params, hns, deltas = {}, {}, {}
        for res in sorted(results, key=lambda x: x.client_id):
            cid = res.client_id
            theta_x, theta_t = st.params[cid]
            params[cid] = (net_add(theta_x, res.delta_x), net_add(theta_t, res.delta_t))
            deltas[cid] = (res.delta_x, res.delta_t)
            hx, ht = st.hypernets[cid]
            if self.switches.layered_weights:
                hns[cid] = (hn_update(hx, theta_x, res.delta_x), hn_update(ht, theta_t, res.delta_t))
            else:
                hns[cid] = (hx, ht)

        if self.switches.average_params:
            ids = sorted(params)
            counts = [st.sample_counts[i] for i in ids]
            avg_x = weighted_average([params[i][0] for i in ids], counts)
            avg_t = weighted_average([params[i][1] for i in ids], counts)
            params = {i: (avg_x.copy(), avg_t.copy()) for i in ids}

        gx, gt = st.global_x, st.global_t
        if self.switches.prototypes:
            ordered = sorted(results, key=lambda x: x.client_id)
            gx = aggregate_prototypes([res.proto_x for res in ordered])
            gt = aggregate_prototypes([res.proto_t for res in ordered])

        self.state = RoundState(r, params, hns, gx, gt, deltas, dict(st.sample_counts))
        norms = {}
        if gx is not None:
            norms = {"image": float(np.linalg.norm(gx.matrix)), "text": float(np.linalg.norm(gt.matrix))}
        self.history.append(RoundLog(r, {res.client_id: res.loss_trace for res in results}, layer_w, norms))
        return self.state

    def run(self, rounds: int) -> RoundState:
        for _ in range(rounds):
            self.run_round()
        return self.state

    def final_models(self) -> dict[int, tuple[ModalityNet, ModalityNet]]:
        """Trained personalised models: each stored snapshot scaled by its current layer weights.

        Without layered weights this is the stored snapshot itself, i.e. the
        client's nets after its last local update (or the FedAvg average).
        """
        return {cid: self.personalised_params(cid) for cid in sorted(self.state.params)}


def build_clients(
    shards: dict[int, Dataset], init_x: ModalityNet, init_t: ModalityNet, seed: int = 0
) -> list[ClientHandle]:
    return [ClientHandle(cid, data, init_x.copy(), init_t.copy(), seed) for cid, data in sorted(shards.items())]


def init_models(
    image_dim: int, text_dim: int, code_length: int, hidden=(128, 128), seed: int = 0
) -> tuple[ModalityNet, ModalityNet]:
    return (
        init_modality_net(image_dim, code_length, hidden, seed=seed * 2 + 1, modality=IMAGE),
        init_modality_net(text_dim, code_length, hidden, seed=seed * 2 + 2, modality=TEXT),
    )


def run_method(
    method: str,
    shards: dict[int, Dataset],
    code_length: int,
    rounds: int,
    local_cfg: LocalConfig,
    *,
    seed: int = 0,
    hidden=(128, 128),
    hn_lr: float = 1e-3,
    hn_embed_dim: int = 32,
    hn_hidden: int = 64,
    threads: int = 1,
    aux: AuxHashLoss = default_aux_hash,
) -> Federation:
    """Train ``method`` over the given client shards and return the finished federation.

    ``centralized`` pools every shard into a single client.
    """
    switches = MethodSwitches.for_method(method)
    if method == "centralized":
        parts = [shards[k] for k in sorted(shards)]
        pooled = Dataset(
            np.concatenate([p.image_features for p in parts], axis=1),
            np.concatenate([p.text_features for p in parts], axis=1),
            np.concatenate([p.labels for p in parts]),
            parts[0].class_count,
        )
        shards = {0: pooled}
    any_shard = next(iter(shards.values()))
    init_x, init_t = init_models(any_shard.image_dim, any_shard.text_dim, code_length, hidden, seed)
    clients = build_clients(shards, init_x, init_t, seed)
    fed = Federation(
        clients,
        init_x,
        init_t,
        local_cfg,
        switches,
        seed=seed,
        hn_lr=hn_lr,
        hn_embed_dim=hn_embed_dim,
        hn_hidden=hn_hidden,
        threads=threads,
        aux=aux,
    )
    fed.run(rounds)
    return fed


def run_baseline(mode: str, shards: dict[int, Dataset], code_length: int, rounds: int, local_cfg: LocalConfig, **kw) -> Federation:
    if mode not in ("fedavg", "local_only", "centralized"):
        raise ConfigError(f"unknown baseline {mode!r}")
    return run_method(mode, shards, code_length, rounds, local_cfg, **kw)
