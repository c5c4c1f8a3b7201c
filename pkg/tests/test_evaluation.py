import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_feature_pairs, sine
from paraclap.corpus import UtteranceRecord
from paraclap.errors import UnknownLabelError
from paraclap.evaluation import (EvalReport, QueryMode, _argmax_with_tie, build_label_queries, classify,
                                 classify_embedding, classify_features, confusion_matrix, evaluate, per_class_recall,
                                 templated_query, uar)
from paraclap.model import ClapModel, ModelConfig, Standardizer, Vocab, encode_audio, project
from paraclap.querygen import DEFAULT_BANK

VOCAB = Vocab.from_texts(DEFAULT_BANK.vocabulary_text())


@pytest.fixture
def model(rng):
    return ClapModel.initialize(ModelConfig(), VOCAB, Standardizer(np.zeros(6), np.ones(6)), rng)


def test_build_label_queries_raw(model):
    queries = build_label_queries(["angry", "happy", "neutral", "sad"], model)
    assert queries.labels == ["angry", "happy", "neutral", "sad"]
    assert queries.query_texts == queries.labels
    assert queries.embeddings.shape == (4, 64)
    assert np.allclose(np.linalg.norm(queries.embeddings, axis=1), 1.0)
    assert queries.warnings == []


def test_build_label_queries_templated(model):
    queries = build_label_queries(["anger", "sadness"], model, QueryMode.TEMPLATED)
    assert queries.query_texts == ["speaker is angry", "speaker is sad"]
    assert templated_query("intoxicated") == "speaker is intoxicated"


def test_build_label_queries_validation(model):
    with pytest.raises(ValueError):
        build_label_queries(["anger"], model)
    with pytest.raises(ValueError):
        build_label_queries(["anger", "anger"], model)
    assert build_label_queries(["anger", "zxqv"], model).warnings


def test_argmax_tie_rule():
    assert _argmax_with_tie(np.array([0.0, 0.0, 1.0, 0.0])) == (2, False)
    assert _argmax_with_tie(np.array([0.3, 0.3, 0.3])) == (0, True)
    assert _argmax_with_tie(14.3 * np.array([0.1, 0.7, -0.2]))[0] == _argmax_with_tie(np.array([0.1, 0.7, -0.2]))[0]


def test_classify_waveform(model):
    queries = build_label_queries(["anger", "sadness"], model)
    assert classify(sine(220.0), queries, model) in (0, 1)


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 1e4))
def test_classify_ignores_embedding_scale(scale):
    model = ClapModel.initialize(ModelConfig(), VOCAB, Standardizer(np.zeros(6), np.ones(6)),
                                 np.random.default_rng(3))
    queries = build_label_queries(["anger", "happiness", "neutral", "sadness"], model)
    for _, fv in make_feature_pairs(2, seed=6):
        raw = encode_audio(model.standardizer.transform(fv), model.params)
        projected = project(raw, model.params.head("audio"))
        expected = classify_features(fv, queries, model)[0]
        assert classify_embedding(projected, queries)[0] == expected
        assert classify_embedding(scale * projected, queries)[0] == expected


def test_confusion_matrix_examples():
    assert np.array_equal(confusion_matrix([0, 0, 1], [0, 1, 1], 2), [[1, 1], [0, 1]])
    assert np.array_equal(confusion_matrix([], [], 3), np.zeros((3, 3)))
    labels = [i % 4 for i in range(10)]
    diagonal = confusion_matrix(labels, labels, 4)
    assert diagonal.sum() == 10 and np.count_nonzero(diagonal - np.diag(np.diag(diagonal))) == 0
    with pytest.raises(ValueError):
        confusion_matrix([0, 2], [0, 1], 2)


@pytest.mark.parametrize("confusion, expected", [
    (np.eye(3, dtype=int) * 7, 1.0),
    (np.array([[50, 50], [0, 100]]), 0.75),
    (np.array([[10, 0, 0, 0]] * 4), 0.25),
    (np.array([[3, 1], [0, 0]]), 0.75),
])
def test_uar_fixtures(confusion, expected):
    assert uar(confusion) == expected


def test_uar_of_empty_matrix_is_undefined():
    with pytest.raises(ValueError):
        uar(np.zeros((2, 2)))
    assert per_class_recall(np.array([[1, 1], [0, 0]])) == [0.5, None]


@given(st.integers(2, 5).flatmap(lambda k: arrays(np.int64, (k, k), elements=st.integers(0, 50))),
       st.randoms())
def test_uar_bounds_and_permutation(confusion, shuffler):
    assume(confusion.sum() > 0)
    value = uar(confusion)
    assert 0.0 <= value <= 1.0
    order = list(range(confusion.shape[0]))
    shuffler.shuffle(order)
    assert uar(confusion[np.ix_(order, order)]) == pytest.approx(value, abs=1e-12)


def test_untrained_model_is_at_chance(model):
    # two labels over one acoustic distribution
    pairs = make_feature_pairs(500, seed=9, classes=(("anger", "male", 200.0, -20.0),))
    items = [(UtteranceRecord(r.id, r.audio_path, emotion="anger" if i % 2 else "sadness"), fv)
             for i, (r, fv) in enumerate(pairs)]
    report = evaluate(items, build_label_queries(["anger", "sadness"], model), model)
    assert report.n == 500
    assert 0.40 <= report.uar <= 0.60


def test_evaluate_single_item(model):
    (record, fv), = make_feature_pairs(1, seed=0)[:1]
    report = evaluate([(record, fv)], build_label_queries(["anger", "sadness"], model), model)
    assert report.confusion.sum() == 1
    assert report.n == 1


def test_evaluate_rejects_unknown_gold_label(model):
    pairs = make_feature_pairs(1, seed=0)
    with pytest.raises(UnknownLabelError, match="happiness"):
        evaluate(pairs, build_label_queries(["anger", "sadness"], model), model)


def test_evaluate_merges_and_skips_labels(model):
    pairs = make_feature_pairs(3, seed=0)
    items = [(UtteranceRecord(r.id, r.audio_path, emotion={"happiness": "excited"}.get(r.emotion, r.emotion)), fv)
             for r, fv in pairs]
    queries = build_label_queries(["anger", "happiness", "sadness"], model)
    report = evaluate(items, queries, model, merge={"excited": "happiness"}, skip_labels=("neutral",),
                      metadata={"dataset_id": "fixture"})
    assert report.n == 9
    assert report.confusion.sum(axis=1).tolist() == [3, 3, 3]
    assert report.metadata["dataset_id"] == "fixture"
    assert report.metadata["label_order"] == ["anger", "happiness", "sadness"]
    assert report.metadata["query_mode"] == "raw"
    assert report.metadata["skipped"] == 3


def test_label_order_permutes_confusion(model):
    pairs = make_feature_pairs(10, seed=4)
    labels = ["anger", "happiness", "neutral", "sadness"]
    forward = evaluate(pairs, build_label_queries(labels, model), model)
    backward = evaluate(pairs, build_label_queries(labels[::-1], model), model)
    assert np.array_equal(backward.confusion, forward.confusion[::-1, ::-1])
    assert backward.uar == pytest.approx(forward.uar, abs=1e-12)


def test_report_round_trip(model, tmp_path):
    report = evaluate(make_feature_pairs(4, seed=2), build_label_queries(
        ["anger", "happiness", "neutral", "sadness"], model, QueryMode.TEMPLATED), model)
    report.save(tmp_path / "report.json")
    loaded = EvalReport.load(tmp_path / "report.json")
    assert loaded.to_dict() == report.to_dict()
    assert np.array_equal(loaded.confusion, report.confusion)


def test_confusion_csv_files(tmp_path):
    report = EvalReport(["a", "b"], np.array([[3, 1], [0, 0]]), [0.75, None], 0.75, 4)
    report.write_confusion_csv(tmp_path / "c.csv")
    report.write_confusion_csv(tmp_path / "n.csv", normalized=True)
    assert (tmp_path / "c.csv").read_text() == "gold\\predicted,a,b\na,3,1\nb,0,0\n"
    assert (tmp_path / "n.csv").read_text() == "gold\\predicted,a,b\na,0.75,0.25\nb,,\n"
