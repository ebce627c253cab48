"""Paired image/text datasets, synthetic generation and federated partitioners."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, LabelRangeError, LengthMismatchError
from .fmat import read_flbl, read_fmat, write_flbl, write_fmat


@dataclass(frozen=True)
class Dataset:
    """Column-per-sample features for both modalities plus one class id per sample."""

    image_features: np.ndarray
    text_features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        img = np.asarray(self.image_features, dtype=np.float64)
        txt = np.asarray(self.text_features, dtype=np.float64)
        lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if img.ndim != 2 or txt.ndim != 2:
            raise DataError("feature matrices must be 2-D (dim x samples)")
        if img.shape[1] != lab.size or txt.shape[1] != lab.size:
            raise LengthMismatchError(
                f"feature columns ({img.shape[1]}, {txt.shape[1]}) != label count {lab.size}"
            )
        if lab.size and (lab.min() < 0 or lab.max() >= self.class_count):
            raise LabelRangeError(f"labels must lie in [0, {self.class_count})")
        if not (np.all(np.isfinite(img)) and np.all(np.isfinite(txt))):
            raise DataError("features contain non-finite values")
        for arr in (img, txt, lab):
            arr.setflags(write=False)
        object.__setattr__(self, "image_features", img)
        object.__setattr__(self, "text_features", txt)
        object.__setattr__(self, "labels", lab)

    @property
    def sample_count(self) -> int:
        return int(self.labels.size)

    @property
    def image_dim(self) -> int:
        return self.image_features.shape[0]

    @property
    def text_dim(self) -> int:
        return self.text_features.shape[0]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def validate_all_classes_present(self) -> None:
        missing = np.flatnonzero(self.class_counts() == 0)
        if missing.size:
            raise DataError(f"classes without samples: {missing.tolist()}")

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.image_features[:, idx],
            self.text_features[:, idx],
            self.labels[idx],
            self.class_count,
        )


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    sample_indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        idx = np.asarray(self.sample_indices, dtype=np.int64).reshape(-1)
        idx.setflags(write=False)
        object.__setattr__(self, "sample_indices", idx)

    @property
    def size(self) -> int:
        return int(self.sample_indices.size)


def generate_synthetic(
    class_count: int,
    samples_per_class: int,
    image_dim: int,
    text_dim: int,
    cluster_spread: float,
    seed: int,
) -> Dataset:
    """Gaussian clusters around unit-norm class centers, one center per modality."""
    for name, v in (
        ("class_count", class_count),
        ("samples_per_class", samples_per_class),
        ("image_dim", image_dim),
        ("text_dim", text_dim),
    ):
        if int(v) < 1:
            raise ConfigError(f"{name} must be >= 1, got {v}")
    if not cluster_spread > 0:
        raise ConfigError(f"cluster_spread must be > 0, got {cluster_spread}")

    rng = np.random.default_rng(seed)

    def centers(dim):
        c = rng.standard_normal((dim, class_count))
        return c / np.linalg.norm(c, axis=0, keepdims=True)

    img_centers = centers(image_dim)
    txt_centers = centers(text_dim)
    labels = np.repeat(np.arange(class_count), samples_per_class)
    image = img_centers[:, labels] + cluster_spread * rng.standard_normal((image_dim, labels.size))
    text = txt_centers[:, labels] + cluster_spread * rng.standard_normal((text_dim, labels.size))
    return Dataset(image, text, labels, class_count)


def save_features(dataset: Dataset, path_images, path_texts, path_labels) -> None:
    write_fmat(path_images, dataset.image_features)
    write_fmat(path_texts, dataset.text_features)
    write_flbl(path_labels, dataset.labels)


def load_features(path_images, path_texts, path_labels, class_count: int | None = None) -> Dataset:
    images = read_fmat(path_images)
    texts = read_fmat(path_texts)
    labels = read_flbl(path_labels)
    if images.shape[1] != labels.size or texts.shape[1] != labels.size:
        raise LengthMismatchError(
            f"label count {labels.size} does not match feature columns "
            f"({images.shape[1]} image, {texts.shape[1]} text)"
        )
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    ds = Dataset(images, texts, labels, class_count)
    ds.validate_all_classes_present()
    return ds


def _check_clients(n_clients: int, dataset: Dataset) -> None:
    if n_clients < 1:
        raise ConfigError(f"n_clients must be >= 1, got {n_clients}")
    if n_clients > dataset.sample_count:
        raise ConfigError(f"n_clients={n_clients} exceeds sample count {dataset.sample_count}")


def partition_iid(dataset: Dataset, n_clients: int, seed: int) -> list[ClientShard]:
    _check_clients(n_clients, dataset)
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.sample_count)
    return [ClientShard(i, np.sort(part)) for i, part in enumerate(np.array_split(order, n_clients))]


def partition_noniid_equal(
    dataset: Dataset,
    n_clients: int,
    classes_per_client: int,
    samples_per_class: int,
    seed: int,
) -> list[ClientShard]:
    """Every client gets the same number of classes with the same per-class quota.

    Classes are drawn independently per client, so clients may share classes;
    samples are taken from a common pool so shards stay disjoint.
    """
    _check_clients(n_clients, dataset)
    c = dataset.class_count
    if not 1 <= classes_per_client <= c:
        raise ConfigError(f"classes_per_client must lie in [1, {c}], got {classes_per_client}")
    if samples_per_class < 1:
        raise ConfigError("samples_per_class must be >= 1")
    counts = dataset.class_counts()
    if samples_per_class > counts.min():
        raise ConfigError(
            f"samples_per_class={samples_per_class} exceeds smallest class size {counts.min()}"
        )
    rng = np.random.default_rng(seed)
    pools = [rng.permutation(np.flatnonzero(dataset.labels == j)).tolist() for j in range(c)]
    shards = []
    for client in range(n_clients):
        eligible = np.array([j for j in range(c) if len(pools[j]) >= samples_per_class])
        if eligible.size < classes_per_client:
            raise ConfigError(
                f"not enough remaining samples to give client {client} "
                f"{classes_per_client} classes of {samples_per_class} samples"
            )
        chosen = rng.choice(eligible, size=classes_per_client, replace=False)
        idx = []
        for j in sorted(chosen.tolist()):
            idx.extend(pools[j][:samples_per_class])
            del pools[j][:samples_per_class]
        shards.append(ClientShard(client, np.sort(np.array(idx, dtype=np.int64))))
    return shards


def _round_to_total(shares: np.ndarray, total: int) -> np.ndarray:
    counts = np.rint(shares * total).astype(np.int64)
    counts[np.argmax(shares)] += total - counts.sum()
    # a large negative correction on the biggest share can only happen for tiny totals
    while counts.min() < 0:
        neg = np.argmin(counts)
        counts[np.argmax(counts)] += counts[neg]
        counts[neg] = 0
    return counts


def partition_noniid_unequal(
    dataset: Dataset, n_clients: int, concentration: float, seed: int
) -> list[ClientShard]:
    """Split each class across clients by a Dirichlet(concentration) draw."""
    _check_clients(n_clients, dataset)
    if n_clients < 2:
        raise ConfigError("nonIID-unequal needs at least 2 clients")
    if not concentration > 0:
        raise ConfigError(f"concentration must be > 0, got {concentration}")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for j in range(dataset.class_count):
        members = rng.permutation(np.flatnonzero(dataset.labels == j))
        shares = rng.dirichlet(np.full(n_clients, float(concentration)))
        counts = _round_to_total(shares, members.size)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for i in range(n_clients):
            buckets[i].append(members[bounds[i] : bounds[i + 1]])
    return [
        ClientShard(i, np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64))
        for i, parts in enumerate(buckets)
    ]


def one_hot_labels(labels, class_count: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((lab.size, class_count), dtype=np.float64)
    out[np.arange(lab.size), lab] = 1.0
    return out


def partition_to_json(shards: list[ClientShard], seed: int, scheme: str) -> str:
    doc = {
        "clients": [{"id": s.client_id, "indices": s.sample_indices.tolist()} for s in shards],
        "seed": int(seed),
        "scheme": scheme,
    }
    return json.dumps(doc)


def partition_from_json(text: str) -> tuple[list[ClientShard], int, str]:
    try:
        doc = json.loads(text)
        shards = [ClientShard(int(c["id"]), c["indices"]) for c in doc["clients"]]
        return shards, int(doc["seed"]), str(doc["scheme"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"invalid partition document: {exc}") from exc


def save_partition(path, shards: list[ClientShard], seed: int, scheme: str) -> None:
    Path(path).write_text(partition_to_json(shards, seed, scheme))


def load_partition(path) -> tuple[list[ClientShard], int, str]:
    return partition_from_json(Path(path).read_text())
