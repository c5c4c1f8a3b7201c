import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from paraclap.errors import CheckpointError, ContractViolationError, DegenerateEmbeddingError, ShapeError
from paraclap.features import FeatureVector
from paraclap.model import (ClapModel, EmbeddingBatch, ModelConfig, ModelParams, Standardizer, Vocab, batch_loss,
                            check_gradients, contrastive_softmax, encode_audio, encode_text, forward_backward, gelu,
                            init_params, layer_norm, normalize, project, similarity_matrix, symmetric_ce_loss, tokenize)
from paraclap.querygen import DEFAULT_BANK

TINY = ModelConfig(dim=4, text_embed=3, text_hidden=4, audio_embed=3, audio_hidden=4, expansion=2)
TINY_VOCAB = Vocab(["speaker", "is", "angry", "sad", "loud"])
BANK_VOCAB = Vocab.from_texts(DEFAULT_BANK.vocabulary_text())


def tiny_params(seed: int) -> ModelParams:
    """Random tiny model moved off the symmetric initial point."""
    rng = np.random.default_rng(seed)
    params = init_params(TINY, len(TINY_VOCAB), rng)
    for side in ("text", "audio"):
        params[f"proj_{side}_bias"] = rng.normal(0.0, 0.5, size=TINY.dim)
        params[f"proj_{side}_gain"] = rng.uniform(0.5, 1.5, size=TINY.dim)
        params[f"{side}_b1"] = rng.normal(0.0, 0.1, size=params[f"{side}_b1"].shape)
    params["log_tau"] = np.array(1.0)
    return params


def tiny_batch(n: int, seed: int):
    rng = np.random.default_rng(seed + 100)
    batch = []
    for _ in range(n):
        tokens = rng.integers(0, len(TINY_VOCAB), size=int(rng.integers(1, 4)))
        batch.append((rng.standard_normal(TINY.n_features), [int(t) for t in tokens]))
    return batch


def test_tokenize():
    ids = tokenize("speaker is angry", BANK_VOCAB)
    assert len(ids) == 3 and 0 not in ids
    assert tokenize("Speaker IS angry", BANK_VOCAB) == ids
    assert tokenize("zxqv", BANK_VOCAB) == [0]


def test_vocab_starts_with_unknown_and_hashes_stably():
    assert TINY_VOCAB.tokens == ["<unk>", "angry", "is", "loud", "sad", "speaker"]
    assert Vocab(reversed(TINY_VOCAB.tokens)).hash == TINY_VOCAB.hash


def test_gelu_values():
    assert gelu(0.0) == 0.0
    assert gelu(1.0) == pytest.approx(0.841345, abs=1e-6)
    assert abs(gelu(-10.0)) < 1e-8


def test_layer_norm_values():
    assert np.allclose(layer_norm(np.full(5, 3.0), np.ones(5), np.zeros(5)), 0.0)
    assert layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2)) == pytest.approx([0.999995, -0.999995],
                                                                                          abs=1e-6)
    assert np.allclose(layer_norm(np.array([1.0, 5.0, 2.0]), np.zeros(3), np.full(3, 0.7)), 0.7)
    with pytest.raises(ShapeError):
        layer_norm(np.array([1.0]), np.ones(1), np.zeros(1))


def test_normalize_values():
    assert normalize(np.array([3.0, 4.0])) == pytest.approx([0.6, 0.8])
    assert normalize(np.array([0.0, 1.0])) == pytest.approx([0.0, 1.0])
    with pytest.raises(DegenerateEmbeddingError):
        normalize(np.zeros(3))


def test_project_shapes_and_zero_path(rng):
    params = init_params(ModelConfig(), len(BANK_VOCAB), rng)
    head = params.head("audio")
    out = project(rng.standard_normal(32), head)
    assert out.shape == (64,)
    centered = (out - head.bias) / head.gain
    assert np.var(centered) == pytest.approx(1.0, abs=1e-4)

    for name in ("w1", "b1", "w2", "b2", "bias"):
        getattr(head, name)[...] = 0.0
    assert np.allclose(project(rng.standard_normal(32), head), 0.0)
    with pytest.raises(ShapeError):
        project(np.ones(7), head)


def test_encoders(rng):
    params = init_params(ModelConfig(), len(BANK_VOCAB), rng)
    t = BANK_VOCAB.ids["angry"]
    assert np.allclose(encode_text([t, t], params), encode_text([t], params))
    with pytest.raises(ValueError):
        encode_text([], params)

    features = rng.standard_normal(6)
    assert np.array_equal(encode_audio(features, params), encode_audio(features.copy(), params))
    assert np.allclose(encode_audio(np.zeros(6), params), params["audio_b2"])
    with pytest.raises(ValueError):
        encode_audio(np.array([0.0, 1.0, np.nan, 0.0, 0.0, 0.0]), params)


def test_encode_text_with_zero_embeddings(rng):
    params = init_params(ModelConfig(), len(BANK_VOCAB), rng)
    params["text_embedding"] = np.zeros_like(params["text_embedding"])
    expected = gelu(params["text_b1"]) @ params["text_w2"] + params["text_b2"]
    assert np.allclose(encode_text([1, 2, 3], params), expected)


def test_similarity_matrix_examples():
    e = np.eye(3)
    assert similarity_matrix(EmbeddingBatch(e[:1], e[:1]), 1.0) == pytest.approx(np.array([[1.0]]))
    assert np.allclose(similarity_matrix(EmbeddingBatch(e[:1], e[1:2]), 5.0), 0.0)
    s = similarity_matrix(EmbeddingBatch(e, normalize(np.ones((3, 3)))), 2.0)
    assert np.allclose(similarity_matrix(EmbeddingBatch(e, normalize(np.ones((3, 3)))), 4.0), 2 * s)
    with pytest.raises(ContractViolationError):
        similarity_matrix(EmbeddingBatch(2 * e, e), 1.0)


def test_symmetric_loss_examples():
    assert symmetric_ce_loss(np.array([[3.7]])) == 0.0
    assert symmetric_ce_loss(np.zeros((4, 4))) == pytest.approx(math.log(4), abs=1e-12)
    assert symmetric_ce_loss(100 * np.eye(4)) < 1e-6
    with pytest.raises(ShapeError):
        symmetric_ce_loss(np.zeros((2, 3)))


square = st.integers(1, 6).flatmap(
    lambda n: arrays(np.float64, (n, n), elements=st.floats(-50, 50, allow_nan=False)))


@given(square, st.randoms())
def test_loss_symmetries(s, shuffler):
    loss = symmetric_ce_loss(s)
    assert loss >= 0.0
    assert symmetric_ce_loss(s.T) == pytest.approx(loss, rel=1e-12, abs=1e-12)
    order = list(range(s.shape[0]))
    shuffler.shuffle(order)
    assert symmetric_ce_loss(s[np.ix_(order, order)]) == pytest.approx(loss, rel=1e-12, abs=1e-12)


@given(square)
def test_contrastive_softmax_rows_and_columns_sum_to_one(s):
    rows, cols = contrastive_softmax(s)
    n = s.shape[0]
    assert np.all(np.abs(rows.sum(axis=1) - 1.0) <= 1e-9)
    assert np.all(np.abs(cols.sum(axis=0) - 1.0) <= 1e-9)
    assert rows.shape == cols.shape == (n, n)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("n", [2, 4, 8])
def test_gradients_match_finite_differences(seed, n):
    errors = check_gradients(tiny_batch(n, seed), tiny_params(seed), step=1e-4)
    assert set(errors) == set(tiny_params(seed).names())
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, f"{worst}: {errors[worst]}"


def test_gradients_mirror_parameter_shapes():
    params = tiny_params(0)
    loss, grads = forward_backward(tiny_batch(4, 0), params)
    assert list(grads) == params.names()
    assert all(np.shape(grads[name]) == np.shape(params[name]) for name in params.names())
    assert loss == batch_loss(tiny_batch(4, 0), params)


def test_temperature_gradient_vanishes_at_uniform_similarity():
    params = tiny_params(1)
    params["proj_audio_bias"] = np.zeros(TINY.dim)
    params["proj_text_bias"] = np.zeros(TINY.dim)
    for name in ("proj_audio_w2", "proj_text_w2", "proj_audio_b2", "proj_text_b2"):
        params[name] = np.zeros_like(params[name])
    # every item of a tower now maps to the same embedding
    params["proj_audio_b2"] = np.array([1.0, -1.0, 0.5, -0.5])
    params["proj_text_b2"] = np.array([1.0, -1.0, 0.5, -0.5])
    _, grads = forward_backward(tiny_batch(4, 1), params)
    assert float(grads["log_tau"]) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("n", [4, 64])
def test_initial_loss_is_near_log_n(n, rng):
    model = ClapModel.initialize(ModelConfig(), BANK_VOCAB, Standardizer(np.zeros(6), np.ones(6)), rng)
    captions = DEFAULT_BANK.vocabulary_text()
    batch = [(rng.standard_normal(6), tokenize(captions[int(rng.integers(len(captions)))], BANK_VOCAB))
             for _ in range(n)]
    assert batch_loss(batch, model.params) == pytest.approx(math.log(n), abs=0.3)


def test_standardizer_imputes_absent_features():
    vectors = [FeatureVector(100.0, 1.0, -20.0, None, 0.1, 1.0), FeatureVector(300.0, 3.0, -20.0, None, 0.3, 2.0)]
    standardizer = Standardizer.fit(vectors)
    assert standardizer.mean == pytest.approx([200.0, 2.0, -20.0, 0.0, 0.2, 1.5])
    assert standardizer.std == pytest.approx([100.0, 1.0, 1.0, 1.0, 0.1, 0.5])
    out = standardizer.transform(FeatureVector(None, 3.0, -20.0, None, 0.1, 2.0))
    assert out == pytest.approx([0.0, 1.0, 0.0, 0.0, -1.0, 1.0])


def test_checkpoint_round_trip(tmp_path, rng):
    model = ClapModel.initialize(ModelConfig(dim=8), BANK_VOCAB, Standardizer(np.arange(6.0), np.ones(6)), rng)
    model.save(tmp_path / "m.ckpt.json")
    loaded = ClapModel.load(tmp_path / "m.ckpt.json")
    fv = FeatureVector(200.0, 10.0, -20.0, 0.004, 0.02, 1.2)
    assert np.array_equal(loaded.embed_audio([fv]), model.embed_audio([fv]))
    assert np.array_equal(loaded.embed_texts(["speaker is sad"]), model.embed_texts(["speaker is sad"]))
    assert loaded.params.tau == model.params.tau


def test_checkpoint_rejects_tampered_vocabulary(tmp_path, rng):
    model = ClapModel.initialize(ModelConfig(dim=8), BANK_VOCAB, Standardizer(np.zeros(6), np.ones(6)), rng)
    raw = model.to_dict()
    raw["vocab"] = raw["vocab"] + ["zzz"]
    with pytest.raises(CheckpointError):
        ClapModel.from_dict(raw)
    (tmp_path / "broken.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        ClapModel.load(tmp_path / "broken.json")
