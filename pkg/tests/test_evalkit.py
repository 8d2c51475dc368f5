import csv
import json
import logging
from unittest.mock import patch

import numpy as np
import pytest

from lingrid.datagen import DatasetReader, GenParams, gen_dataset
from lingrid.errors import ConfigError
from lingrid.evalkit import (
    METRIC_COLUMNS,
    HeatMap,
    Metrics,
    attention_heatmap,
    average_precision,
    chance_metrics,
    compute_metrics,
    distance_matrix,
    euclid_dist,
    evaluate_model,
    is_shirt_phrase,
    mass_in_region,
    metrics_from_ranking,
    min_max,
    rank_gallery,
    read_pgm,
    text_to_image_retrieve,
    upsample_nearest,
    write_heatmap,
    write_metrics_csv,
)
from lingrid.gradcheck import micro_vocab
from lingrid.network import LinGridModel, ModelDims
from lingrid.textpipe import extract_phrases


def small_model(vocab, mode="proposed", num_classes=4, input_size=(32, 16)):
    dims = ModelDims(
        vocab_size=len(vocab),
        num_classes=num_classes,
        input_size=input_size,
        conv_widths=[3, 4, 4],
        embed_dim=6,
        out_dim=5,
        word_dim=4,
        hidden_dim=5,
        pool_window=(2, 1),
    )
    return LinGridModel(dims, mode, vocab, seed=0)


class FixedScores:
    def __init__(self, scores):
        self.scores = np.asarray(scores)

    def score(self, images, sequence):
        return self.scores


def test_euclid_dist():
    assert euclid_dist([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert euclid_dist([0.0, 0.0], [3.0, 4.0]) == 5.0
    with pytest.raises(ConfigError):
        euclid_dist([0.0, 0.0], [1.0, 2.0, 3.0])
    gallery = np.array([[3.0, 4.0], [0.0, 1.0]])
    assert np.allclose(distance_matrix(np.zeros((1, 2)), gallery), [[5.0, 1.0]])


def test_average_precision():
    assert average_precision(np.array([True, True, False])) == 1.0
    assert average_precision(np.array([True, False, True])) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision(np.array([False, False])) == 0.0


def test_first_match_at_rank_two():
    metrics = compute_metrics(
        np.array([[0.0]]), [3], np.array([[1.0], [2.0], [5.0]]), [9, 3, 3]
    )
    assert (metrics.top1, metrics.top5, metrics.top10) == (0.0, 1.0, 1.0)
    assert metrics.mAP == pytest.approx((1 / 2 + 2 / 3) / 2)
    assert metrics.num_queries == 1


def test_queries_without_matches_are_skipped(caplog):
    gallery = np.array([[0.0], [1.0]])
    with caplog.at_level(logging.WARNING):
        metrics = compute_metrics(np.array([[0.0], [0.0]]), [1, 7], gallery, [1, 2])
    assert metrics.num_queries == 1
    assert metrics.top1 == 1.0
    assert "query 1" in caplog.text
    with pytest.raises(ConfigError):
        compute_metrics(np.array([[0.0]]), [7], gallery, [1, 2])


def test_metrics_ignore_monotone_rescaling_of_distances():
    rng = np.random.default_rng(8)
    query_ids = rng.integers(0, 6, size=12)
    gallery_ids = np.concatenate([np.arange(6), rng.integers(0, 6, size=24)])
    dist = rng.uniform(0.1, 3.0, size=(12, 30))
    base = metrics_from_ranking(rank_gallery(dist, query_ids, gallery_ids))
    for warped in (np.exp(dist), dist**3 + 2 * dist, np.log1p(dist), 7.5 * dist):
        assert metrics_from_ranking(rank_gallery(warped, query_ids, gallery_ids)) == base

    query_feats = rng.normal(size=(12, 4))
    gallery_feats = rng.normal(size=(30, 4))
    plain = compute_metrics(query_feats, query_ids, gallery_feats, gallery_ids)
    scaled = compute_metrics(4.0 * query_feats, query_ids, 4.0 * gallery_feats, gallery_ids)
    assert scaled == plain


def test_perfectly_separated_identities():
    rng = np.random.default_rng(9)
    centres = 100.0 * np.eye(5)
    query_ids = np.arange(5)
    gallery_ids = np.repeat(np.arange(5), 3)
    query_feats = centres[query_ids] + rng.normal(scale=0.1, size=(5, 5))
    gallery_feats = centres[gallery_ids] + rng.normal(scale=0.1, size=(15, 5))
    metrics = compute_metrics(query_feats, query_ids, gallery_feats, gallery_ids)
    assert (metrics.mAP, metrics.top1, metrics.top5, metrics.top10) == (1.0, 1.0, 1.0, 1.0)
    assert metrics.num_queries == 5


def test_ties_keep_gallery_order():
    ranking = rank_gallery(np.array([[1.0, 0.5, 0.5, 0.5]]), [0], [1, 0, 1, 0])
    assert ranking.order[0].tolist() == [1, 2, 3, 0]
    assert ranking.relevant[0].tolist() == [True, False, True, False]


def test_own_key_is_excluded():
    ranking = rank_gallery(np.array([[0.0, 1.0]]), [5], [5, 5], ["a"], ["a", "b"])
    assert ranking.order[0].tolist() == [1]


def test_chance_metrics_are_seeded():
    query, gallery = [0, 1, 2, 3], [0, 0, 1, 1, 2, 2, 3, 3]
    a = chance_metrics(query, gallery, trials=50, seed=3)
    assert a == chance_metrics(query, gallery, trials=50, seed=3)
    assert 0.0 < a.top1 < a.top5 <= 1.0


def test_write_metrics_csv(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, [Metrics(0.5, 0.25, 0.75, 1.0, 4).as_row("GDA", 2)])
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert rows[1] == ["GDA", "2", "0.5", "0.25", "0.75", "1.0"]


def test_evaluate_model_reads_no_text():
    dataset = gen_dataset(GenParams(n_train_ids=4, n_test_ids=2, images_per_id=2, seed=1))
    model = small_model(dataset.vocab, input_size=(64, 32))
    with patch.object(DatasetReader, "texts") as texts:
        metrics = evaluate_model(model, DatasetReader(dataset))
    texts.assert_not_called()
    assert metrics.num_queries == 2
    assert 0.0 <= metrics.mAP <= 1.0


def test_retrieval_ties_keep_index_order():
    model = FixedScores([0.2, 0.7, 0.7, 0.1])
    order, scores = text_to_image_retrieve([3], np.zeros((4, 1)), model)
    assert order.tolist() == [1, 2, 0, 3]
    assert scores.tolist() == [0.7, 0.7, 0.2, 0.1]


def test_retrieval_needs_a_score_head():
    vocab = micro_vocab()
    model = small_model(vocab, mode="LRA")
    with pytest.raises(ConfigError, match="score head"):
        text_to_image_retrieve([3, 4], np.zeros((2, 32, 16, 3)), model)


def test_retrieval_ranks_every_image():
    vocab = micro_vocab()
    model = small_model(vocab, mode="GDA")
    images = np.random.default_rng(0).uniform(size=(5, 32, 16, 3))
    order, scores = text_to_image_retrieve([3, 4, 5], images, model)
    assert sorted(order.tolist()) == list(range(5))
    assert np.all(np.diff(scores) <= 0)
    assert np.all((scores > 0) & (scores < 1))


def test_min_max():
    assert not min_max(np.full((3, 2), 0.4)).any()
    assert min_max(np.array([[1.0, 3.0]])).tolist() == [[0.0, 1.0]]


def test_one_hot_weights_light_one_cell():
    weights = np.zeros((2, 2))
    weights[1, 0] = 1.0
    grid = min_max(upsample_nearest(weights, (32, 16), (4, 2), (2, 1)))
    assert grid.shape == (32, 16)
    assert np.all(grid[16:, :8] == 1.0)
    assert grid.sum() == 16 * 8


def test_uniform_attention_gives_a_zero_grid(tmp_path):
    vocab = micro_vocab()
    model = small_model(vocab)
    model.attention.w.data = np.zeros_like(model.attention.w.data)
    image = np.random.default_rng(1).uniform(size=(32, 16, 3))
    heatmap = attention_heatmap(image, [3, 4], model)
    assert heatmap.weights.shape == (2, 2)
    assert np.allclose(heatmap.weights, 0.25)
    assert not heatmap.grid.any()

    written = write_heatmap(heatmap, tmp_path / "blue_shirt", "w0 w1")
    assert [p.suffix for p in written] == [".pgm", ".csv", ".json"]
    assert written[0].read_bytes().startswith(b"P5")
    assert not read_pgm(written[0]).any()
    assert np.loadtxt(written[1], delimiter=",").shape == (32, 16)
    meta = json.loads(written[2].read_text())
    assert meta["phrase"] == "w0 w1"
    assert meta["pooled_shape"] == [2, 2]


def test_heatmap_export_scales_to_8_bit(tmp_path):
    grid = np.zeros((4, 2))
    grid[0, 0] = 1.0
    heatmap = HeatMap(np.array([[1.0], [0.0]]), grid, grid)
    pgm, table, _ = write_heatmap(heatmap, tmp_path / "map")
    assert np.array_equal(read_pgm(pgm), grid)
    assert np.array_equal(np.loadtxt(table, delimiter=","), grid)


def test_heatmap_needs_attention():
    vocab = micro_vocab()
    with pytest.raises(ConfigError, match="attention"):
        attention_heatmap(np.zeros((32, 16, 3)), [3], small_model(vocab, mode="GDA"))


def test_mass_in_region():
    grid = np.array([[0.4, 0.1], [0.4, 0.1]])
    assert mass_in_region(grid, (0, 2)) == pytest.approx(1.0)
    assert mass_in_region(grid, (0, 2), (0, 1)) == pytest.approx(0.8)
    assert mass_in_region(np.full((4, 4), 1 / 16), (0, 2)) == pytest.approx(0.5)
    with pytest.raises(ConfigError, match="empty"):
        mass_in_region(grid, (1, 1))
    with pytest.raises(ConfigError, match="outside"):
        mass_in_region(grid, (0, 3))


def test_shirt_phrases():
    text = "the man wears a red shirt and black pants and a blue hat on the head."
    phrases = extract_phrases(text)
    assert [is_shirt_phrase(p) for p in phrases] == [True, False, False]
