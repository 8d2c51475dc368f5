import numpy as np
import pytest

from lingrid.datagen import (
    BACKGROUND,
    COLORS,
    LEG_ROWS,
    TORSO_ROWS,
    DataTuple,
    Dataset,
    DatasetReader,
    GenParams,
    PersonSpec,
    dataset_hash,
    fill_missing_descriptions,
    gen_dataset,
    load_dataset,
    paint_person,
    read_ppm,
    region_color,
    render_description,
    render_image,
    save_dataset,
    summarize,
    write_ppm,
)
from lingrid.describer import CardDealer, Describer
from lingrid.errors import ConfigError

TORSO = (slice(*TORSO_ROWS), slice(8, 24))
LEGS = (slice(*LEG_ROWS), slice(10, 22))
# rows and columns covered under every jitter shift and flip
HAT = (slice(2, 3), slice(12, 20))
BAG_ROWS = slice(20, 30)
BAG_SIDES = (slice(27, 30), slice(2, 5))


def small_params(**kwargs):
    params = dict(n_train_ids=6, n_test_ids=3, images_per_id=3, seed=11)
    params.update(kwargs)
    return GenParams(**params)


def test_blue_shirt_torso_is_blue():
    spec = PersonSpec(0, shirt="blue", pants="red", gender="man")
    image = render_image(spec, np.random.default_rng(0))
    mean = image[TORSO].reshape(-1, 3).mean(axis=0)
    assert int(np.argmax(mean)) == 2
    assert region_color(image, *TORSO) == "blue"
    assert region_color(image, *LEGS) == "red"


def test_render_is_deterministic_without_noise():
    spec = PersonSpec(3, shirt="green", pants="black", gender="woman", hat="white")
    a = render_image(spec, np.random.default_rng(1), noise=0.0, jitter=0, flip_prob=0.0)
    b = render_image(spec, np.random.default_rng(2), noise=0.0, jitter=0, flip_prob=0.0)
    assert np.array_equal(a, b)


def test_flip_reverses_columns():
    spec = PersonSpec(1, shirt="red", pants="blue", gender="man", bag="yellow")
    plain = paint_person(spec)
    flipped = paint_person(spec, flip=True)
    assert np.array_equal(flipped, plain[:, ::-1])


def test_jitter_shifts_rows():
    spec = PersonSpec(1, shirt="red", pants="blue", gender="man")
    plain = paint_person(spec)
    down = paint_person(spec, shift=2)
    assert np.array_equal(down[2:], plain[:-2])


def test_unknown_attribute_values():
    with pytest.raises(ConfigError, match="shirt"):
        PersonSpec(0, shirt="plaid", pants="red", gender="man")
    with pytest.raises(ConfigError, match="gender"):
        PersonSpec(0, shirt="red", pants="red", gender="robot")


def test_description_names_the_attributes():
    spec = PersonSpec(0, shirt="blue", pants="white", gender="woman", hat="red")
    text = render_description(spec, np.random.default_rng(4))
    assert "blue shirt" in text
    assert "red hat" in text
    assert "bag" not in text
    assert text == render_description(spec, np.random.default_rng(4))


def test_describer_fills_every_template(tmp_path):
    (tmp_path / "templates.txt").write_text("a __gender__ in a {shirt} shirt__hat__\n")
    (tmp_path / "hat.txt").write_text(" and a {hat} hat\n")
    describer = Describer(CardDealer(tmp_path))
    attributes = {"shirt": "cyan", "pants": "black", "gender": "man", "hat": None, "bag": None}
    assert describer.describe(attributes, np.random.default_rng(0)) == "a man in a cyan shirt"
    attributes["hat"] = "black"
    text = describer.describe(attributes, np.random.default_rng(0))
    assert text == "a man in a cyan shirt and a black hat"


def test_unknown_wildcard(tmp_path):
    (tmp_path / "templates.txt").write_text("a __shoes__ person\n")
    dealer = CardDealer(tmp_path)
    with pytest.raises(ConfigError, match="__shoes__"):
        dealer.replace_wildcards("a __shoes__ person", np.random.default_rng(0))


def test_default_counts():
    dataset = gen_dataset(GenParams(n_train_ids=64, n_test_ids=16, images_per_id=4))
    summary = summarize(dataset)
    assert summary["train_tuples"] == 256
    assert summary["test_tuples"] == 64
    assert len(dataset.query) == 16
    assert len(dataset.gallery) == 48
    assert set(dataset.train_identities).isdisjoint(dataset.test_identities)


def test_descriptions_are_grounded():
    dataset = gen_dataset(small_params(n_train_ids=12, noise=0.05, jitter=2))
    seen = {"hat": 0, "bag": 0}
    for item in dataset.tuples:
        image = dataset.image(item)
        shirt = item.attributes["shirt"]
        assert f"{shirt} shirt" in item.text
        assert region_color(image, *TORSO) == shirt
        assert region_color(image, *LEGS) == item.attributes["pants"]
        assert any("shirt" in p.words for p in item.phrases)

        hat = item.attributes["hat"]
        if hat is None:
            assert "hat" not in item.tokens
        else:
            seen["hat"] += 1
            assert f"{hat} hat" in item.text
            assert region_color(image, *HAT) == hat
            assert any("hat" in p.words for p in item.phrases)

        bag = item.attributes["bag"]
        sides = [image[BAG_ROWS, cols].reshape(-1, 3).mean(axis=0) for cols in BAG_SIDES]
        if bag is None:
            assert "bag" not in item.tokens
            assert all(np.allclose(side, BACKGROUND, atol=0.02) for side in sides)
        else:
            seen["bag"] += 1
            assert f"{bag} bag" in item.text
            # mirrored renders carry the bag on the other side
            assert bag in {region_color(image, BAG_ROWS, cols) for cols in BAG_SIDES}
            assert any("bag" in p.words for p in item.phrases)
    assert seen["hat"] > 0 and seen["bag"] > 0


def test_vocab_comes_from_train_texts():
    dataset = gen_dataset(small_params())
    train_words = {w for item in dataset.train for w in item.tokens}
    assert set(dataset.vocab.words[3:]) == train_words


def test_same_seed_same_files(tmp_path):
    save_dataset(gen_dataset(small_params()), tmp_path / "a")
    save_dataset(gen_dataset(small_params()), tmp_path / "b")
    assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")
    save_dataset(gen_dataset(small_params(seed=12)), tmp_path / "c")
    assert dataset_hash(tmp_path / "a") != dataset_hash(tmp_path / "c")


def test_save_refuses_non_empty_dir(tmp_path):
    out = tmp_path / "data"
    save_dataset(gen_dataset(small_params()), out)
    with pytest.raises(ConfigError, match="force"):
        save_dataset(gen_dataset(small_params()), out)
    save_dataset(gen_dataset(small_params(seed=3)), out, force=True)


def test_load_round_trip(tmp_path):
    original = gen_dataset(small_params())
    save_dataset(original, tmp_path)
    loaded = load_dataset(tmp_path)
    assert [t.to_record() for t in loaded.tuples] == [t.to_record() for t in original.tuples]
    assert loaded.vocab.words == original.vocab.words
    for a, b in zip(original.tuples, loaded.tuples):
        assert np.array_equal(loaded.image(b), original.image(a))


def test_ppm_is_8_bit(tmp_path):
    image = np.random.default_rng(0).uniform(size=(8, 4, 3))
    write_ppm(tmp_path / "x.ppm", image)
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6")
    assert np.allclose(read_ppm(tmp_path / "x.ppm"), image, atol=0.5 / 255 + 1e-12)


def test_missing_descriptions_are_filled(tmp_path):
    dataset = gen_dataset(small_params(missing_text_rate=0.5))
    missing = [t.tuple_id for t in dataset.tuples if not t.text]
    assert missing
    save_dataset(dataset, tmp_path)
    loaded = load_dataset(tmp_path)
    for tuple_id in missing:
        item = loaded.tuples[tuple_id]
        assert f"{item.attributes['shirt']} shirt" in item.text
        assert item.phrases
    assert fill_missing_descriptions(loaded) == 0


def test_missing_rate_must_leave_texts():
    with pytest.raises(ConfigError):
        small_params(missing_text_rate=1.0)


def test_bad_split_sizes():
    with pytest.raises(ConfigError, match="n_test_ids"):
        GenParams(n_test_ids=1)
    with pytest.raises(ConfigError, match="gallery"):
        GenParams(images_per_id=2, queries_per_id=2)


def test_reader_splits():
    dataset = gen_dataset(small_params())
    reader = DatasetReader(dataset)
    assert reader.images("gallery").shape == (6, 64, 32, 3)
    assert reader.labels("query").tolist() == [6, 7, 8]
    assert len(reader.texts("train")) == 18


def test_dataset_without_images():
    dataset = gen_dataset(small_params())
    bare = Dataset(
        [
            DataTuple(t.tuple_id, t.identity, t.split, t.image_file, t.text, t.attributes)
            for t in dataset.tuples
        ],
        dataset.vocab,
    )
    with pytest.raises(ConfigError, match="no image data"):
        bare.image(bare.tuples[0])


def test_colors_are_distinct():
    values = np.array(list(COLORS.values()))
    dists = np.sum((values[:, None] - values[None]) ** 2, axis=-1)
    assert np.all(dists[~np.eye(len(values), dtype=bool)] >= 1.0)
