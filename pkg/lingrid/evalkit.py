"""Retrieval metrics, text-to-image retrieval and attention heat maps."""
import csv
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from lingrid.association import attention_weights
from lingrid.datagen import TORSO_ROWS, Dataset, DatasetReader
from lingrid.encoders import pool_neighbors
from lingrid.errors import ConfigError
from lingrid.textpipe import Phrase, encode

PathT = os.PathLike

logger = logging.getLogger(__name__)

CMC_RANKS = (1, 5, 10)
METRIC_COLUMNS = ("variant", "seed", "mAP", "top1", "top5", "top10")
GROUNDING_THRESHOLD = 0.6


def euclid_dist(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"euclid_dist: shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def distance_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if queries.shape[1:] != gallery.shape[1:]:
        raise ConfigError(f"feature dims differ: {queries.shape} vs {gallery.shape}")
    diff = queries[:, None, :] - gallery[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


@dataclass
class Metrics:
    mAP: float
    top1: float
    top5: float
    top10: float
    num_queries: int = 0

    def as_row(self, variant: str, seed: int) -> Dict:
        return {
            "variant": variant,
            "seed": seed,
            "mAP": self.mAP,
            "top1": self.top1,
            "top5": self.top5,
            "top10": self.top10,
        }


@dataclass
class RankingResult:
    """Per query: gallery indices in ascending distance and their relevance."""

    order: List[np.ndarray]
    distances: List[np.ndarray]
    relevant: List[np.ndarray]


def rank_gallery(
    dist: np.ndarray,
    query_ids: Sequence[int],
    gallery_ids: Sequence[int],
    query_keys: Optional[Sequence] = None,
    gallery_keys: Optional[Sequence] = None,
) -> RankingResult:
    """Stable ascending sort; ties keep gallery index order.

    When keys are given, a gallery entry with the query's own key is dropped.
    """
    gallery_ids = np.asarray(gallery_ids)
    order, distances, relevant = [], [], []
    for q, row in enumerate(np.asarray(dist)):
        ranked = np.argsort(row, kind="stable")
        if query_keys is not None and gallery_keys is not None:
            keys = np.asarray(gallery_keys)
            ranked = ranked[keys[ranked] != query_keys[q]]
        order.append(ranked)
        distances.append(row[ranked])
        relevant.append(gallery_ids[ranked] == query_ids[q])
    return RankingResult(order, distances, relevant)


def average_precision(relevant: np.ndarray) -> float:
    hits = np.flatnonzero(relevant)
    if len(hits) == 0:
        return 0.0
    precision = np.arange(1, len(hits) + 1) / (hits + 1)
    return float(precision.mean())


def metrics_from_ranking(ranking: RankingResult) -> Metrics:
    aps = []
    first_hits = []
    for q, relevant in enumerate(ranking.relevant):
        if not relevant.any():
            logger.warning(f"query {q} has no relevant gallery item, skipped")
            continue
        aps.append(average_precision(relevant))
        first_hits.append(int(np.argmax(relevant)) + 1)
    if not aps:
        raise ConfigError("no query has a relevant gallery item")
    first_hits = np.array(first_hits)
    top = {k: float(np.mean(first_hits <= k)) for k in CMC_RANKS}
    return Metrics(float(np.mean(aps)), top[1], top[5], top[10], len(aps))


def compute_metrics(
    query_feats: np.ndarray,
    query_ids: Sequence[int],
    gallery_feats: np.ndarray,
    gallery_ids: Sequence[int],
    query_keys: Optional[Sequence] = None,
    gallery_keys: Optional[Sequence] = None,
) -> Metrics:
    dist = distance_matrix(query_feats, gallery_feats)
    return metrics_from_ranking(
        rank_gallery(dist, query_ids, gallery_ids, query_keys, gallery_keys)
    )


def chance_metrics(
    query_ids: Sequence[int], gallery_ids: Sequence[int], trials: int = 200, seed: int = 0
) -> Metrics:
    """Monte-Carlo metrics of random rankings over the same split."""
    rng = np.random.default_rng(seed)
    runs = []
    for _ in range(trials):
        dist = rng.random((len(query_ids), len(gallery_ids)))
        runs.append(metrics_from_ranking(rank_gallery(dist, query_ids, gallery_ids)))
    return Metrics(
        float(np.mean([m.mAP for m in runs])),
        float(np.mean([m.top1 for m in runs])),
        float(np.mean([m.top5 for m in runs])),
        float(np.mean([m.top10 for m in runs])),
        runs[0].num_queries,
    )


def evaluate_model(model, reader: DatasetReader) -> Metrics:
    """Image-only protocol: the text encoder is locked for the whole pass."""
    with model.image_only():
        query = model.embed_images(reader.images("query"))
        gallery = model.embed_images(reader.images("gallery"))
    return compute_metrics(query, reader.labels("query"), gallery, reader.labels("gallery"))


def write_metrics_csv(path: PathT, rows: Iterable[Dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def format_metrics(metrics: Metrics) -> str:
    return (
        f"mAP {100 * metrics.mAP:.2f} | top-1 {100 * metrics.top1:.2f} | "
        f"top-5 {100 * metrics.top5:.2f} | top-10 {100 * metrics.top10:.2f} "
        f"({metrics.num_queries} queries)"
    )


# text to image


def text_to_image_retrieve(
    sequence: Sequence[int], images: np.ndarray, model
) -> Tuple[np.ndarray, np.ndarray]:
    """Gallery order by descending relevance; equal scores keep index order."""
    scores = model.score(images, list(sequence))
    order = np.argsort(-scores, kind="stable")
    return order, scores[order]


@dataclass
class TextRetrievalReport:
    queries: int
    top1_accuracy: float
    chance: float


def text_retrieval_report(model, dataset: Dataset) -> TextRetrievalReport:
    gallery = dataset.gallery
    images = np.stack([dataset.image(t) for t in gallery])
    gallery_ids = np.array([t.identity for t in gallery])
    hits, chance = [], []
    for item in dataset.query + gallery:
        order, _ = text_to_image_retrieve(dataset.sequence(item), images, model)
        hits.append(gallery_ids[order[0]] == item.identity)
        chance.append(np.mean(gallery_ids == item.identity))
    return TextRetrievalReport(len(hits), float(np.mean(hits)), float(np.mean(chance)))


# heat maps


@dataclass
class HeatMap:
    weights: np.ndarray  # pooled attention, (K'_h, K'_w)
    upsampled: np.ndarray  # raw weights at image resolution
    grid: np.ndarray  # min-max normalized upsampled weights

    def metadata(self, phrase: str) -> Dict:
        return {
            "phrase": phrase,
            "pooled_shape": list(self.weights.shape),
            "weights": self.weights.round(8).tolist(),
            "upsampling": "nearest",
            "normalization": "min-max, constant maps to 0",
        }


def cell_index(size: int, grid: int, window: int) -> np.ndarray:
    """Pooled cell of each pixel along one axis."""
    grid_cell = np.arange(size) * grid // size
    return np.minimum(grid_cell // window, grid // window - 1)


def upsample_nearest(
    weights: np.ndarray, size: Tuple[int, int], grid: Tuple[int, int], window: Tuple[int, int]
) -> np.ndarray:
    rows = cell_index(size[0], grid[0], window[0])
    cols = cell_index(size[1], grid[1], window[1])
    return weights[rows[:, None], cols[None, :]]


def min_max(grid: np.ndarray) -> np.ndarray:
    lo, hi = grid.min(), grid.max()
    if hi - lo <= 0:
        return np.zeros_like(grid, dtype=np.float64)
    return (grid - lo) / (hi - lo)


def attention_heatmap(image: np.ndarray, phrase_sequence: Sequence[int], model) -> HeatMap:
    if model.attention is None:
        raise ConfigError(f"a {model.mode} checkpoint has no phrase attention")
    fmap, _, _ = model.image_features(np.asarray(image)[None])
    pooled = pool_neighbors(fmap, model.pool_window)
    theta_l = model.text.encode_phrases([list(phrase_sequence)])
    r = attention_weights(pooled.bins[0], theta_l[0], model.attention).numpy()
    weights = r.astype(np.float64).reshape(pooled.height, pooled.width)
    upsampled = upsample_nearest(
        weights, image.shape[:2], (fmap.height, fmap.width), model.pool_window
    )
    return HeatMap(weights, upsampled, min_max(upsampled))


def write_heatmap(heatmap: HeatMap, out_prefix: PathT, phrase: str = "") -> List[Path]:
    """``<prefix>.pgm`` (8-bit P5), ``<prefix>.csv`` and a ``<prefix>.json`` sidecar."""
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    pgm, table, meta = (prefix.with_suffix(s) for s in (".pgm", ".csv", ".json"))
    pixels = np.round(heatmap.grid * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(pgm, format="PPM")
    np.savetxt(table, heatmap.grid, fmt="%.6f", delimiter=",")
    with open(meta, "w", encoding="utf-8") as f:
        json.dump(heatmap.metadata(phrase), f, indent=2, sort_keys=True)
    return [pgm, table, meta]


def read_pgm(path: PathT) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def mass_in_region(
    weights: np.ndarray, rows: Tuple[int, int], cols: Optional[Tuple[int, int]] = None
) -> float:
    weights = np.asarray(weights, dtype=np.float64)
    cols = cols if cols is not None else (0, weights.shape[1])
    (r0, r1), (c0, c1) = rows, cols
    if r0 < 0 or c0 < 0 or r1 > weights.shape[0] or c1 > weights.shape[1]:
        raise ConfigError(f"region rows {rows} cols {cols} outside grid {weights.shape}")
    if r1 <= r0 or c1 <= c0:
        raise ConfigError(f"empty region rows {rows} cols {cols}")
    total = weights.sum()
    if total <= 0:
        raise ConfigError("weights have no mass")
    return float(weights[r0:r1, c0:c1].sum() / total)


@dataclass
class GroundingReport:
    phrases: int
    above_threshold: float
    mean_mass: float
    chance: float
    threshold: float = GROUNDING_THRESHOLD

    def as_dict(self) -> Dict:
        return asdict(self)


def is_shirt_phrase(phrase: Phrase) -> bool:
    return "shirt" in phrase.words


def grounding_report(model, dataset: Dataset) -> GroundingReport:
    """Torso-row attention mass of every test shirt phrase."""
    masses = []
    for item in dataset.query + dataset.gallery:
        image = dataset.image(item)
        height = image.shape[0]
        rows = (TORSO_ROWS[0] * height // 64, TORSO_ROWS[1] * height // 64)
        for phrase in filter(is_shirt_phrase, item.phrases):
            heatmap = attention_heatmap(image, encode(phrase.words, dataset.vocab), model)
            masses.append(mass_in_region(heatmap.upsampled, rows))
    if not masses:
        raise ConfigError("no shirt phrases in the test split")
    masses = np.array(masses)
    chance = (TORSO_ROWS[1] - TORSO_ROWS[0]) / 64
    return GroundingReport(
        len(masses),
        float(np.mean(masses >= GROUNDING_THRESHOLD)),
        float(masses.mean()),
        chance,
    )
