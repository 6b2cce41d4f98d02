import numpy as np
import pytest

import latentseg as ls

TINY = """
corpus.samples_per_class = 2
corpus.slices_per_volume = 8
codec.steps = 10
codec.base_width = 4
codec.max_width = 8
model.base_channels = 16
model.text_dim = 16
model.groups = 4
model.time_embed_dim = 16
model.vision_feature_dim = 16
model.vision_blocks = 1
model.projector_hidden = 16
train.iterations = 4
"""


@pytest.fixture(scope="module")
def corpus():
    return ls.synthesize(TINY)


def test_config_round_trip_and_rejection():
    text = ls.default_config()
    assert ls.normalize_config(text) == text
    assert "model.tau" in ls.config_keys()
    with pytest.raises(ls.ConfigError, match="model.tua"):
        ls.normalize_config("model.tua = 0.5")


def test_corpus_layout(corpus, tmp_path):
    assert len(corpus) == 6
    vol = corpus[0]
    assert 1 in vol.class_ids and len(vol.class_ids) == 2
    img = vol.image(0)
    assert img.shape == (64, 64) and img.dtype == np.float64
    assert vol.mask(1, 0).shape == (64, 64)
    ls.write_dataset(str(tmp_path / "d"), corpus)
    back = ls.read_dataset(str(tmp_path / "d"))
    assert [v.patient_id for v in back] == [v.patient_id for v in corpus]


def test_metrics_match_numpy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.random((12, 12)) < 0.3
        b = rng.random((12, 12)) < 0.3
        expected = 2 * np.logical_and(a, b).sum() / (a.sum() + b.sum()) if a.sum() + b.sum() else 1.0
        assert ls.dice(a, b) == pytest.approx(expected, abs=1e-12)
    square = np.zeros((16, 16), np.uint8)
    square[4:10, 4:10] = 1
    assert ls.hd95(square, square) == 0.0
    assert ls.assd(square, square) == 0.0
    shifted = np.roll(square, 2, axis=1)
    assert ls.hd95(square, shifted) == pytest.approx(2.0)


def test_split_three_covers():
    for n in range(3, 31):
        parts = ls.split_three(n)
        assert parts[0][0] == 0 and parts[-1][1] == n
        sizes = [e - b for b, e, _ in parts]
        assert max(sizes) - min(sizes) <= 1
        for b, e, mid in parts:
            assert mid == b + (e - b - 1) // 2


def test_query_enhancement_contract():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(1, 4, 8, 8))
    mask = np.zeros((64, 64), np.uint8)
    mask[8:40, 8:40] = 1
    proto = ls.masked_average_pool(z, mask)
    assert len(proto) == 4
    prob = ls.cosine_similarity_map(proto, z)
    assert prob.shape == (1, 8, 8)
    qp = ls.extract_query_prototype(z, prob, 0.7)
    enhanced = ls.enhance_query(z, qp)
    assert enhanced.shape == (1, 8, 8, 8)
    np.testing.assert_array_equal(enhanced[:, :4], z)
    np.testing.assert_allclose(enhanced[0, 4:, 3, 5], qp)
    with pytest.raises(ls.EmptyMaskError):
        ls.masked_average_pool(z, np.zeros((64, 64), np.uint8))


def test_identity_codec_round_trip(corpus):
    codec = ls.LatentCodec.identity()
    mask = corpus[0].mask(1, 4)
    assert np.array_equal(codec.decode_mask(codec.encode_mask(mask)), mask)


def test_train_predict_evaluate(corpus, tmp_path):
    codec = ls.train_codec(corpus, TINY)
    assert codec.downsample_factor == 8
    model = ls.SegmentationModel(codec, TINY)
    vol, other = corpus[0], corpus[1]
    before = model.predict([vol.image(3)], [vol.mask(1, 3)], other.image(3))
    assert before.shape == (64, 64)
    losses = ls.train(model, corpus, TINY, str(tmp_path / "ckpt"))
    assert len(losses) == 4 and all(np.isfinite(losses))
    path = str(tmp_path / "model.bin")
    model.save(path)
    loaded = ls.SegmentationModel.load(path)
    a = model.predict([vol.image(3)], [vol.mask(1, 3)], other.image(3))
    b = loaded.predict([vol.image(3)], [vol.mask(1, 3)], other.image(3), condition="projected")
    np.testing.assert_array_equal(a, b)
    report = ls.evaluate(loaded, corpus, TINY)
    assert 0.0 <= report["dice"] <= 1.0
    assert "Dice" in report["text"]
    with pytest.raises(ls.ShapeError):
        model.predict([vol.image(3)], [np.zeros((32, 32), np.uint8)], other.image(3))
