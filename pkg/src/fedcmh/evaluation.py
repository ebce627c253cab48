"""Hamming-ranking retrieval metrics for cross-modal hash codes."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .datamodel import Dataset
from .errors import ShapeError
from .hashopt import sign_pm1
from .modalitynets import ModalityNet, net_forward

I2T = "I2T"
T2I = "T2I"


def _codes(a) -> np.ndarray:
    c = np.asarray(a, dtype=np.float64)
    if c.ndim == 1:
        c = c.reshape(-1, 1)
    if not np.all(np.abs(c) == 1.0):
        raise ValueError("hash codes must have entries in {-1, +1}")
    return c


@dataclass
class RetrievalSet:
    query_codes: np.ndarray
    query_labels: np.ndarray
    gallery_codes: np.ndarray
    gallery_labels: np.ndarray
    direction: str = I2T

    def __post_init__(self):
        self.query_codes = _codes(self.query_codes)
        self.gallery_codes = _codes(self.gallery_codes)
        self.query_labels = np.asarray(self.query_labels, dtype=np.int64).reshape(-1)
        self.gallery_labels = np.asarray(self.gallery_labels, dtype=np.int64).reshape(-1)
        if self.query_codes.shape[0] != self.gallery_codes.shape[0]:
            raise ShapeError("query and gallery code lengths differ")
        if self.query_codes.shape[1] != self.query_labels.size:
            raise ShapeError("query codes and labels disagree on count")
        if self.gallery_codes.shape[1] != self.gallery_labels.size:
            raise ShapeError("gallery codes and labels disagree on count")

    @property
    def bits(self) -> int:
        return self.query_codes.shape[0]


@dataclass
class MapReport:
    direction: str
    bits: int
    map: float
    per_query_ap: np.ndarray = field(repr=False)
    excluded_queries: int = 0


def hamming_distance(a, b) -> int:
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if a.size != b.size:
        raise ShapeError(f"code lengths differ: {a.size} vs {b.size}")
    return int(np.count_nonzero(a != b))


def hamming_distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Distances from one ±1 query code to every gallery column, via ``(r - q^T g) / 2``."""
    r = gallery.shape[0]
    return np.rint((r - query.reshape(-1) @ gallery) / 2).astype(np.int64)


def average_precision(query_code, query_label, gallery_codes, gallery_labels) -> float | None:
    """AP over the full Hamming ranking; ``None`` when no gallery item is relevant.

    Ties are broken by ascending gallery index.
    """
    relevant = np.asarray(gallery_labels).reshape(-1) == query_label
    n_rel = int(relevant.sum())
    if n_rel == 0:
        return None
    dist = hamming_distances(np.asarray(query_code, dtype=np.float64), np.asarray(gallery_codes, dtype=np.float64))
    order = np.argsort(dist, kind="stable")
    hits = relevant[order]
    ranks = np.flatnonzero(hits) + 1
    precision_at_hits = np.arange(1, n_rel + 1) / ranks
    return float(precision_at_hits.mean())


def mean_average_precision(rs: RetrievalSet) -> MapReport:
    aps = []
    excluded = 0
    for q in range(rs.query_labels.size):
        ap = average_precision(rs.query_codes[:, q], rs.query_labels[q], rs.gallery_codes, rs.gallery_labels)
        if ap is None:
            excluded += 1
        else:
            aps.append(ap)
    if not aps:
        raise ValueError("no query has a relevant gallery item; MAP undefined")
    aps = np.array(aps)
    return MapReport(rs.direction, rs.bits, float(aps.mean()), aps, excluded)


def encode_for_eval(net_image: ModalityNet, net_text: ModalityNet, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return (
        sign_pm1(net_forward(net_image, dataset.image_features)),
        sign_pm1(net_forward(net_text, dataset.text_features)),
    )


def split_query_gallery(n: int, query_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Seeded split of ``range(n)`` into sorted query and gallery index arrays."""
    if n < 2:
        return np.arange(0), np.arange(n)
    n_query = min(n - 1, max(1, int(round(query_fraction * n))))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_query]), np.sort(perm[n_query:])


def cross_modal_map(net_image: ModalityNet, net_text: ModalityNet, query: Dataset, gallery: Dataset) -> dict[str, MapReport]:
    """I2T: image queries against text gallery; T2I: text queries against image gallery."""
    qi, qt = encode_for_eval(net_image, net_text, query)
    gi, gt = encode_for_eval(net_image, net_text, gallery)
    return {
        I2T: mean_average_precision(RetrievalSet(qi, query.labels, gt, gallery.labels, I2T)),
        T2I: mean_average_precision(RetrievalSet(qt, query.labels, gi, gallery.labels, T2I)),
    }


@dataclass
class MapRow:
    method: str
    split: str
    direction: str
    bits: int
    seed: int
    map: float


CSV_FIELDS = ["method", "split", "direction", "bits", "seed", "map"]


def rows_to_csv(rows: list[MapRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        d = asdict(row)
        d["map"] = repr(float(d["map"]))
        writer.writerow(d)
    return buf.getvalue()


def rows_from_csv(text: str) -> list[MapRow]:
    reader = csv.DictReader(io.StringIO(text))
    return [
        MapRow(r["method"], r["split"], r["direction"], int(r["bits"]), int(r["seed"]), float(r["map"]))
        for r in reader
    ]


def rows_to_json(rows: list[MapRow]) -> str:
    return json.dumps([asdict(r) for r in rows], indent=2)
