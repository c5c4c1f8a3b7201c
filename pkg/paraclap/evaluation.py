"""Zero-shot classification against label queries, scored by unweighted
average recall (UAR)."""
import csv
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import confusion_matrix as sk_confusion_matrix

from paraclap.corpus import UtteranceRecord, Waveform
from paraclap.errors import DegenerateEmbeddingError, UnknownLabelError
from paraclap.features import FeatureVector, extract_features
from paraclap.model import ClapModel, normalize, tokenize
from paraclap.querygen import DEFAULT_BANK, emotion_adjective

logger = logging.getLogger(__name__)


class QueryMode(Enum):
    RAW = "raw"
    TEMPLATED = "templated"


@dataclass
class LabelQuerySet:
    labels: List[str]
    query_texts: List[str]
    embeddings: np.ndarray
    mode: QueryMode = QueryMode.RAW
    warnings: List[str] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.labels)


def templated_query(label: str) -> str:
    try:
        adjective = emotion_adjective(label)
    except UnknownLabelError:
        adjective = label
    template = next(t for t in DEFAULT_BANK.label_templates["emotion"] if t.startswith("speaker is"))
    return template.replace("[EMOTION]", adjective)


def build_label_queries(labels: Sequence[str], model: ClapModel, mode: QueryMode = QueryMode.RAW) -> LabelQuerySet:
    labels = list(labels)
    if len(labels) < 2:
        raise ValueError(f"zero-shot classification needs at least 2 labels, got {labels}")
    if len(set(labels)) != len(labels):
        raise ValueError(f"labels must be distinct, got {labels}")

    texts = labels if mode is QueryMode.RAW else [templated_query(label) for label in labels]
    warnings = []
    for label, text in zip(labels, texts):
        if not any(tokenize(text, model.vocab)):
            warnings.append(f"query {text!r} for label {label!r} has no known tokens")
            logger.warning("Label query %r has no in-vocabulary tokens", text)
    return LabelQuerySet(labels, list(texts), model.embed_texts(texts), mode, warnings)


def _argmax_with_tie(similarities: np.ndarray) -> Tuple[int, bool]:
    best = int(np.argmax(similarities))
    return best, int(np.sum(similarities == similarities[best])) > 1


def classify_embedding(embedding: np.ndarray, queries: LabelQuerySet) -> Tuple[int, bool]:
    """Predicted class index for a projected audio embedding of any positive scale."""
    return _argmax_with_tie(queries.embeddings @ normalize(embedding))


def classify_features(fv: FeatureVector, queries: LabelQuerySet, model: ClapModel) -> Tuple[int, bool]:
    """Predicted class index and whether the top similarity was tied."""
    return classify_embedding(model.embed_audio([fv])[0], queries)


def classify(w: Waveform, queries: LabelQuerySet, model: ClapModel) -> int:
    return classify_features(extract_features(w), queries, model)[0]


def confusion_matrix(golds: Sequence[int], preds: Sequence[int], k: int) -> np.ndarray:
    if len(golds) != len(preds):
        raise ValueError(f"{len(golds)} gold labels but {len(preds)} predictions")
    for index in list(golds) + list(preds):
        if not 0 <= index < k:
            raise ValueError(f"class index {index} outside [0, {k})")
    if not golds:
        return np.zeros((k, k), dtype=np.int64)
    return sk_confusion_matrix(golds, preds, labels=list(range(k))).astype(np.int64)


def per_class_recall(confusion: np.ndarray) -> List[Optional[float]]:
    confusion = np.asarray(confusion)
    totals = confusion.sum(axis=1)
    return [float(confusion[i, i] / totals[i]) if totals[i] else None for i in range(confusion.shape[0])]


def uar(confusion: np.ndarray) -> float:
    recalls = [r for r in per_class_recall(confusion) if r is not None]
    if not recalls:
        raise ValueError("UAR undefined: confusion matrix has no gold items")
    return float(np.mean(recalls))


@dataclass
class EvalReport:
    labels: List[str]
    confusion: np.ndarray
    per_class_recall: List[Optional[float]]
    uar: float
    n: int
    metadata: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "uar": self.uar,
            "n": self.n,
            "per_class_recall": self.per_class_recall,
            "confusion": np.asarray(self.confusion).tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        return cls(raw["labels"], np.array(raw["confusion"], dtype=np.int64), raw["per_class_recall"],
                   raw["uar"], raw["n"], raw["metadata"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def write_confusion_csv(self, path, normalized: bool = False) -> None:
        confusion = np.asarray(self.confusion)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["gold\\predicted"] + self.labels)
            for label, row in zip(self.labels, confusion):
                if normalized:
                    total = row.sum()
                    row = [repr(float(c / total)) if total else "" for c in row]
                writer.writerow([label] + [str(c) for c in row])


def evaluate(items: Sequence[Tuple[UtteranceRecord, FeatureVector]], queries: LabelQuerySet, model: ClapModel,
             merge: Mapping[str, str] = None, skip_labels=(), metadata: Mapping[str, object] = None) -> EvalReport:
    merge = merge or {}
    index = {label: i for i, label in enumerate(queries.labels)}
    skip = {label.strip().lower() for label in skip_labels}
    golds, preds = [], []
    ties = failures = skipped = 0
    for record, fv in items:
        if record.emotion is not None and record.emotion.strip().lower() in skip:
            skipped += 1
            continue
        label = merge.get(record.emotion, record.emotion)
        if label not in index:
            raise UnknownLabelError(f"record {record.id}: gold label {label!r} is not among {queries.labels}")
        try:
            pred, tied = classify_features(fv, queries, model)
        except DegenerateEmbeddingError as exc:
            failures += 1
            logger.warning("Record %s: %s", record.id, exc)
            continue
        ties += tied
        golds.append(index[label])
        preds.append(pred)

    confusion = confusion_matrix(golds, preds, queries.k)
    report_meta = dict(metadata or {})
    report_meta.update({
        "label_order": list(queries.labels),
        "query_mode": queries.mode.value,
        "query_texts": list(queries.query_texts),
        "ties": ties,
        "failures": failures,
        "skipped": skipped,
        "warnings": list(queries.warnings),
    })
    return EvalReport(list(queries.labels), confusion, per_class_recall(confusion), uar(confusion),
                      len(golds), report_meta)
