"""Glue between configs, data, federated training and evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .datamodel import (
    ClientShard,
    Dataset,
    generate_synthetic,
    load_features,
    partition_iid,
    partition_noniid_equal,
    partition_noniid_unequal,
)
from .evaluation import I2T, T2I, MapRow, cross_modal_map, rows_to_csv, rows_to_json, split_query_gallery
from .fedprotocol import Federation, LocalConfig, build_clients, init_models, MethodSwitches
from .fmat import write_fmat
from .modalitynets import ModalityNet, save_net

log = logging.getLogger(__name__)

PARTITION_SEED_OFFSET = 10_007


def load_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    if cfg.files is not None:
        f = cfg.files
        return load_features(f.images, f.texts, f.labels)
    s = cfg.synthetic
    return generate_synthetic(s.class_count, s.samples_per_class, s.image_dim, s.text_dim, s.cluster_spread, seed)


def make_partition(dataset: Dataset, cfg: ExperimentConfig, split: str, seed: int) -> list[ClientShard]:
    p = cfg.partition
    pseed = seed + PARTITION_SEED_OFFSET
    if split == "iid":
        return partition_iid(dataset, cfg.n_clients, pseed)
    if split == "noniid-equal":
        return partition_noniid_equal(dataset, cfg.n_clients, p.classes_per_client, p.samples_per_class, pseed)
    return partition_noniid_unequal(dataset, cfg.n_clients, p.concentration, pseed)


@dataclass
class ClientData:
    train: Dataset
    query: Dataset


def split_shards(dataset: Dataset, shards: list[ClientShard], query_fraction: float, seed: int) -> dict[int, ClientData]:
    """Hold out a seeded query fraction of every shard; the rest is training data and gallery."""
    out = {}
    for shard in shards:
        q, g = split_query_gallery(shard.size, query_fraction, [seed, shard.client_id, 2])
        idx = shard.sample_indices
        out[shard.client_id] = ClientData(dataset.subset(idx[g]), dataset.subset(idx[q]))
    return out


def cell_data(dataset: Dataset, cfg: ExperimentConfig, method: str, split: str, seed: int) -> dict[int, ClientData]:
    """Client train/query data for one grid cell; ``centralized`` holds the whole dataset as one client."""
    if method == "centralized":
        shards = [ClientShard(0, np.arange(dataset.sample_count))]
    else:
        shards = make_partition(dataset, cfg, split, seed)
    return split_shards(dataset, shards, cfg.query_fraction, seed)


def pooled(parts: list[Dataset]) -> Dataset:
    return Dataset(
        np.concatenate([p.image_features for p in parts], axis=1),
        np.concatenate([p.text_features for p in parts], axis=1),
        np.concatenate([p.labels for p in parts]),
        parts[0].class_count,
    )


def local_config(cfg: ExperimentConfig) -> LocalConfig:
    return LocalConfig(
        epochs=cfg.local_epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        weights=cfg.weights,
        dcc_sweeps=cfg.dcc_sweeps,
        prototype_mode=cfg.prototype_mode,
    )


def evaluate_models(
    models: dict[int, tuple[ModalityNet, ModalityNet]], data: dict[int, ClientData]
) -> dict[str, float]:
    """Each client's models retrieve within its own held-out queries and training gallery.

    Returns the unweighted mean over evaluable clients per direction.
    """
    scores = {I2T: [], T2I: []}
    for cid in sorted(models):
        d = data[cid]
        if d.query.sample_count == 0 or d.train.sample_count == 0:
            continue
        try:
            reports = cross_modal_map(*models[cid], d.query, d.train)
        except ValueError:
            log.warning("client %d has no evaluable query", cid)
            continue
        for k, rep in reports.items():
            scores[k].append(rep.map)
    return {k: float(np.mean(v)) if v else float("nan") for k, v in scores.items()}


@dataclass
class CellResult:
    method: str
    split: str
    bits: int
    seed: int
    federation: Federation
    maps: dict[str, float]

    def rows(self) -> list[MapRow]:
        return [MapRow(self.method, self.split, d, self.bits, self.seed, self.maps[d]) for d in (I2T, T2I)]


def build_federation(cfg: ExperimentConfig, method: str, train: dict[int, Dataset], bits: int, seed: int) -> Federation:
    """Fresh federation for ``method``; ``centralized`` pools whatever shards it gets into one client."""
    if method == "centralized" and len(train) > 1:
        train = {0: pooled([train[k] for k in sorted(train)])}
    first = train[min(train)]
    init_x, init_t = init_models(first.image_dim, first.text_dim, bits, tuple(cfg.hidden), seed)
    return Federation(
        build_clients(train, init_x, init_t, seed),
        init_x,
        init_t,
        local_config(cfg),
        MethodSwitches.for_method(method),
        seed=seed,
        hn_lr=cfg.hn_learning_rate,
        hn_embed_dim=cfg.hn_embed_dim,
        hn_hidden=cfg.hn_hidden,
        threads=cfg.threads,
    )


def _finish_cell(method, split, bits, seed, fed: Federation, data: dict[int, ClientData]) -> CellResult:
    return CellResult(method, split, bits, seed, fed, evaluate_models(fed.final_models(), data))


def run_cell(cfg: ExperimentConfig, method: str, split: str, bits: int, seed: int, dataset: Dataset | None = None) -> CellResult:
    dataset = load_dataset(cfg, seed) if dataset is None else dataset
    data = cell_data(dataset, cfg, method, split, seed)
    fed = build_federation(cfg, method, {cid: d.train for cid, d in data.items()}, bits, seed)
    fed.run(cfg.rounds)
    return _finish_cell(method, split, bits, seed, fed, data)


# ---------------------------------------------------------------------------
# run directories


def input_hash(cfg: ExperimentConfig) -> str:
    """Content hash of the data inputs; file sources hash the raw bytes."""
    h = hashlib.sha256()
    if cfg.files is not None:
        for p in (cfg.files.images, cfg.files.texts, cfg.files.labels):
            h.update(Path(p).read_bytes())
    else:
        h.update(json.dumps(asdict(cfg.synthetic), sort_keys=True).encode())
    h.update(json.dumps(asdict(cfg.partition), sort_keys=True).encode())
    h.update(f"n_clients={cfg.n_clients};query_fraction={cfg.query_fraction}".encode())
    return h.hexdigest()


def cell_dir(root: Path, method: str, split: str, bits: int, seed: int) -> Path:
    return root / method / split / f"bits{bits}" / f"seed{seed}"


def write_checkpoint(root: Path, fed: Federation) -> None:
    """``round_<r>/client_<i>/{image,text}.net`` plus ``round_<r>/global_prototypes.fmat``."""
    st = fed.state
    rdir = root / f"round_{st.round_index}"
    for cid, (nx, nt) in fed.final_models().items():
        save_net(rdir / f"client_{cid}" / "image.net", nx)
        save_net(rdir / f"client_{cid}" / "text.net", nt)
    rdir.mkdir(parents=True, exist_ok=True)
    if st.global_x is not None:
        write_fmat(rdir / "global_prototypes.fmat", np.vstack([st.global_x.matrix, st.global_t.matrix]))
        (rdir / "global_prototypes.json").write_text(
            json.dumps({"rows": "image then text", "mask_image": st.global_x.mask.tolist(),
                        "mask_text": st.global_t.mask.tolist()})
        )


def _history_json(fed: Federation) -> list[dict]:
    return [
        {
            "round": h.round_index,
            "loss_traces": {str(k): v for k, v in sorted(h.loss_traces.items())},
            "layer_weights": {str(k): {"image": v[0], "text": v[1]} for k, v in sorted(h.layer_weights.items())},
            "prototype_norms": h.prototype_norms,
        }
        for h in fed.history
    ]


def run_experiment(cfg: ExperimentConfig, out_dir) -> list[MapRow]:
    """Run every grid cell, writing checkpoints, traces and MAP reports under ``out_dir``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows: list[MapRow] = []
    cells = []
    for seed in cfg.seeds:
        dataset = load_dataset(cfg, seed)
        for split in cfg.splits:
            for bits in cfg.bits:
                for method in cfg.methods:
                    log.info("running %s split=%s bits=%d seed=%d", method, split, bits, seed)
                    res = run_cell_with_checkpoints(cfg, method, split, bits, seed, dataset, cell_dir(root, method, split, bits, seed))
                    rows.extend(res.rows())
                    cells.append(
                        {
                            "method": method,
                            "split": split,
                            "bits": bits,
                            "seed": seed,
                            "map": res.maps,
                            "rounds": _history_json(res.federation),
                        }
                    )
    manifest = {
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "input_hash": input_hash(cfg),
        "cells": cells,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (root / "report.csv").write_text(rows_to_csv(rows))
    (root / "report.json").write_text(rows_to_json(rows))
    return rows


def run_cell_with_checkpoints(cfg, method, split, bits, seed, dataset, out: Path) -> CellResult:
    data = cell_data(dataset, cfg, method, split, seed)
    train = {cid: d.train for cid, d in data.items()}
    fed = build_federation(cfg, method, train, bits, seed)
    write_checkpoint(out, fed)
    for r in range(1, cfg.rounds + 1):
        fed.run_round()
        if r == cfg.rounds or (cfg.checkpoint_every and r % cfg.checkpoint_every == 0):
            write_checkpoint(out, fed)
    return _finish_cell(method, split, bits, seed, fed, data)
