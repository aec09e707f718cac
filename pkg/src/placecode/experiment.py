"""Desk-scale disentanglement experiment: train the full objective and an
entangled baseline (place-disentanglement terms zeroed) on the synthetic
factor grid, then compare place-retrieval accuracy, similarity-matrix
diagonality, and the auxiliary domain classifier.
"""

from __future__ import annotations

import dataclasses
import json
import os
from collections import defaultdict

import numpy as np
import torch

from . import networks as N
from . import retrieval as R
from . import synthdata as S
from .losses import LossWeights
from .networks import ImageBatch
from .training import TrainConfig, load_checkpoint, run_training


def entangled_weights(base: LossWeights | None = None) -> LossWeights:
    """Weights for the entangled baseline: no feature-level place
    adversary, no geometry constraints, no place latent regression."""
    base = base or LossWeights()
    return dataclasses.replace(base, adv_place=0.0, gc=0.0, cgc=0.0, lat_place=0.0)


def desk_config(seed: int, steps: int, **overrides) -> TrainConfig:
    return TrainConfig(seed=seed, total_steps=steps, **overrides)


def ensure_dataset(data_dir: str, n_places: int = 32, domain_count: int = 3,
                   views_per_place: int = 4, size: int = 64,
                   data_seed: int = 0) -> str:
    """Build the synthetic grid once; reuse it if the manifests exist."""
    train_manifest = os.path.join(data_dir, "train.txt")
    if not os.path.exists(train_manifest):
        S.build_synthetic_dataset(n_places, domain_count, views_per_place,
                                  np.random.default_rng(data_seed), data_dir, size=size)
    return data_dir


def place_accuracy(model, cfg: TrainConfig, database: S.FolderDataset,
                   queries: S.FolderDataset) -> tuple[float, dict]:
    """Top-1 place-identity retrieval accuracy over all query cells."""
    index = R.build_index(model, cfg, database)
    query_desc = R.encode_dataset(model, cfg, queries)
    top1 = R.rank_matrix(index, query_desc)
    per_cell: dict = defaultdict(lambda: [0, 0])
    correct = 0
    for qi, db_row in enumerate(top1):
        spec = queries.records[qi].spec
        hit = spec.place_id == database.records[db_row].spec.place_id
        correct += int(hit)
        cell = per_cell[(spec.appearance_domain, spec.occluded)]
        cell[0] += int(hit)
        cell[1] += 1
    breakdown = {f"a{a}_o{int(o)}": c[0] / c[1] for (a, o), c in sorted(per_cell.items())}
    return correct / len(queries), breakdown


def diagonality_statistic(model, cfg: TrainConfig, database: S.FolderDataset,
                          queries: S.FolderDataset) -> float:
    """mean(diag) - mean(offdiag) of the place-ordered cross-similarity
    between the database sequence and each query cell's sequence, averaged
    over cells."""
    db_order = sorted(range(len(database)),
                      key=lambda i: database.records[i].spec.place_id)
    db_desc = R.encode_dataset(model, cfg, database)[db_order]
    by_cell: dict = defaultdict(list)
    for i, record in enumerate(queries.records):
        by_cell[(record.spec.appearance_domain, record.spec.occluded)].append(i)
    query_desc = R.encode_dataset(model, cfg, queries)
    stats = []
    for cell, indices in sorted(by_cell.items()):
        ordered = sorted(indices, key=lambda i: queries.records[i].spec.place_id)
        cross = R.cross_similarity(query_desc[ordered], db_desc)
        stats.append(R.diagonal_dominance(cross))
    return float(np.mean(stats))


def domain_classifier_accuracy(model, cfg: TrainConfig,
                               datasets: list[S.FolderDataset]) -> float:
    """Accuracy of the shared discriminator's domain head on held-out
    images."""
    correct = 0
    total = 0
    with torch.no_grad():
        for dataset in datasets:
            for start in range(0, len(dataset), 16):
                rows = list(range(start, min(start + 16, len(dataset))))
                pixels = torch.stack([dataset.load_pixels(i, cfg.crop_size) for i in rows])
                labels = torch.tensor(
                    [dataset.records[i].spec.appearance_domain for i in rows])
                batch = ImageBatch(pixels=pixels, appearance_domain=labels,
                                   occlusion_flag=torch.zeros(len(rows), dtype=torch.bool))
                _, logits = N.discriminate_appearance(model, batch)
                correct += int((logits.argmax(dim=1) == labels).sum())
                total += len(rows)
    return correct / total


def run_disentanglement_experiment(data_dir: str, out_dir: str,
                                   seeds=(0, 1, 2), steps: int = 1500,
                                   quiet: bool = True) -> dict:
    """Train full + entangled models per seed and evaluate the contrasts.

    Returns and writes (out_dir/results.json) per-seed metrics: retrieval
    accuracy for both models, diagonality statistics, localization rows,
    and the domain-classifier accuracy of the full model.
    """
    ensure_dataset(data_dir)
    train_ds = S.load_image_folder(os.path.join(data_dir, "train.txt"))
    database = S.load_image_folder(os.path.join(data_dir, "database.txt"))
    queries = S.load_image_folder(os.path.join(data_dir, "query.txt"))

    results = {"steps": steps, "seeds": list(seeds), "per_seed": []}
    for seed in seeds:
        row = {"seed": seed}
        for kind in ("full", "entangled"):
            weights = LossWeights() if kind == "full" else entangled_weights()
            cfg = desk_config(seed=seed, steps=steps, weights=weights)
            run_dir = os.path.join(out_dir, f"seed{seed}", kind)
            ckpt = run_training(cfg, train_ds, run_dir, quiet=quiet)
            model, cfg, _ = load_checkpoint(ckpt)
            model.eval()
            acc, breakdown = place_accuracy(model, cfg, database, queries)
            row[f"{kind}_accuracy"] = acc
            row[f"{kind}_accuracy_by_cell"] = breakdown
            row[f"{kind}_diagonality"] = diagonality_statistic(model, cfg,
                                                               database, queries)
            row[f"{kind}_checkpoint"] = ckpt
            if kind == "full":
                index = R.build_index(model, cfg, database)
                loc = R.evaluate_localization(index, queries, model, cfg)
                row["full_localization"] = list(loc.accuracies)
                row["full_domain_accuracy"] = domain_classifier_accuracy(
                    model, cfg, [queries, database])
        results["per_seed"].append(row)
        if not quiet:
            print(json.dumps(row, indent=2), flush=True)

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2)
    return results
