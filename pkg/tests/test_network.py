import numpy as np
import pytest

from lingrid.errors import ConfigError, VerificationError
from lingrid.gradcheck import micro_vocab
from lingrid.network import LinGridModel, ModelDims


def dims(vocab, **kwargs):
    base = dict(
        vocab_size=len(vocab),
        num_classes=4,
        input_size=(32, 16),
        conv_widths=[3, 4, 4],
        embed_dim=6,
        out_dim=5,
        word_dim=4,
        hidden_dim=5,
        pool_window=(2, 1),
    )
    base.update(kwargs)
    return ModelDims(**base)


def component(name):
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[0] == "head" else parts[0]


def test_components_per_mode():
    vocab = micro_vocab()
    expected = {
        "basel": {"visual", "head.image"},
        "rank1": {"visual", "head.image", "text", "head.text"},
        "rank2": {"visual", "head.image", "text", "head.text"},
        "GDA": {"visual", "head.image", "text", "head.text", "head.score"},
        "LRA": {"visual", "head.image", "text", "head.attention", "decoder"},
        "proposed": {
            "visual", "head.image", "text", "head.text", "head.score", "head.attention", "decoder",
        },
    }
    for mode, parts in expected.items():
        names = LinGridModel(dims(vocab), mode, vocab).store.names()
        found = {component(n) for n in names}
        assert found == parts, mode


def test_lra_has_no_global_projection():
    vocab = micro_vocab()
    names = LinGridModel(dims(vocab), "LRA", vocab).store.names()
    assert "text.local.W_l" in names
    assert "text.global.W_g" not in names


def test_same_seed_same_parameters():
    vocab = micro_vocab()
    a = LinGridModel(dims(vocab), "proposed", vocab, seed=3).store.state()
    b = LinGridModel(dims(vocab), "proposed", vocab, seed=3).store.state()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_vocab_size_must_match():
    vocab = micro_vocab()
    with pytest.raises(ConfigError, match="vocabulary"):
        LinGridModel(dims(vocab, vocab_size=99), "basel", vocab)


def test_pool_window_must_fit():
    vocab = micro_vocab()
    with pytest.raises(ConfigError):
        LinGridModel(dims(vocab, pool_window=(5, 1)), "LRA", vocab)


def test_image_only_blocks_the_text_path():
    vocab = micro_vocab()
    model = LinGridModel(dims(vocab), "proposed", vocab)
    images = np.random.default_rng(0).uniform(size=(3, 32, 16, 3))
    with model.image_only():
        assert model.embed_images(images, batch_size=2).shape == (3, 5)
        with pytest.raises(VerificationError):
            model.score(images, [3, 4])
    assert model.score(images, [3, 4]).shape == (3,)


def test_score_needs_the_score_head():
    vocab = micro_vocab()
    model = LinGridModel(dims(vocab), "LRA", vocab)
    with pytest.raises(ConfigError, match="score head"):
        model.score(np.zeros((1, 32, 16, 3)), [3])
