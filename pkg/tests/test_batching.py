import numpy as np
import pytest

from lingrid.batching import compose_batch
from lingrid.datagen import GenParams, gen_dataset
from lingrid.errors import ConfigError


@pytest.fixture(scope="module")
def dataset():
    return gen_dataset(GenParams(n_train_ids=40, n_test_ids=2, images_per_id=2, seed=5))


def test_pair_counts(dataset):
    batch = compose_batch(dataset, np.random.default_rng(0), 32, 2, 6)
    assert len(batch) == 64
    assert len(batch.positives) == 128
    assert len(batch.negatives) == 384

    batch = compose_batch(dataset, np.random.default_rng(0), 2, 2, 3)
    assert len(batch.positives) == 8
    assert len(batch.negatives) == 12


def test_pair_labels_follow_identity(dataset):
    batch = compose_batch(dataset, np.random.default_rng(1), 4, 2, 6)
    for row, text, label in batch.pairs:
        same = batch.identities[row] == batch.text_identities[text]
        assert label == int(same)
    # the pool starts with the batch's own descriptions
    assert batch.text_identities[: len(batch)].tolist() == batch.identities.tolist()


def test_batch_layout(dataset):
    batch = compose_batch(dataset, np.random.default_rng(2), 3, 2, 2)
    assert batch.images.shape == (6, 64, 32, 3)
    ids = batch.identities.tolist()
    assert ids[0::2] == ids[1::2]
    assert len(set(ids)) == 3
    classes = dataset.class_index()
    assert batch.labels.tolist() == [classes[i] for i in ids]
    assert len(batch.phrases) == 6
    assert all(batch.phrases)


def test_negatives_are_distinct_per_image(dataset):
    batch = compose_batch(dataset, np.random.default_rng(3), 4, 2, 6)
    for row in range(len(batch)):
        texts = batch.negatives[batch.negatives[:, 0] == row][:, 1]
        assert len(set(texts.tolist())) == 6


def test_same_rng_same_batch(dataset):
    a = compose_batch(dataset, np.random.default_rng(9), 4, 2, 3)
    b = compose_batch(dataset, np.random.default_rng(9), 4, 2, 3)
    assert np.array_equal(a.pairs, b.pairs)
    assert a.texts == b.texts


def test_not_enough_identities(dataset):
    with pytest.raises(ConfigError, match="identities"):
        compose_batch(dataset, np.random.default_rng(0), 41, 2, 3)
    with pytest.raises(ConfigError, match="identities"):
        compose_batch(dataset, np.random.default_rng(0), 2, 3, 3)
