"""Mini-batch contrastive training with two-group Adam, per-epoch caption
resampling and best-epoch selection on held-out zero-shot UAR."""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from paraclap.corpus import UtteranceRecord
from paraclap.errors import EmptyPoolError, InsufficientDataError, NonFiniteLossError, ShapeError
from paraclap.evaluation import QueryMode, build_label_queries, evaluate
from paraclap.features import FeatureVector
from paraclap.model import ClapModel, ModelConfig, ModelParams, Standardizer, Vocab, forward_backward, tokenize
from paraclap.querygen import (DEFAULT_BANK, CaptionMode, CaptionPolicy, TemplateBank, agreed_emotion,
                               caption_pool, fit_thresholds, record_emotion_queries, sample_caption,
                               save_thresholds)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 50
    lr_encoders: float = 1e-5
    lr_heads: float = 1e-3
    policy: CaptionPolicy = CaptionPolicy(CaptionMode.ONLY_EMO)
    seed: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    query_mode: QueryMode = QueryMode.TEMPLATED
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_encoders <= 0 or self.lr_heads <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({n: np.zeros_like(params[n]) for n in params.names()},
                   {n: np.zeros_like(params[n]) for n in params.names()})


def adam_step(params: ModelParams, grads: Dict[str, np.ndarray], state: AdamState,
              lr_encoders: float, lr_heads: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place; encoder tensors use ``lr_encoders``, the rest ``lr_heads``."""
    for name in params.names():
        if name not in grads or np.shape(grads[name]) != np.shape(params[name]):
            raise ShapeError(f"gradient for {name} has shape {np.shape(grads.get(name))}, "
                             f"parameter has {np.shape(params[name])}")
    beta1, beta2 = betas
    state.t += 1
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t
    for name in params.names():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        lr = lr_encoders if ModelParams.is_encoder(name) else lr_heads
        step = lr * (state.m[name] / correction1) / (np.sqrt(state.v[name] / correction2) + eps)
        params[name] = np.asarray(params[name] - step)


def clamp_temperature(params: ModelParams, config: ModelConfig) -> None:
    params["log_tau"] = np.asarray(np.minimum(params["log_tau"], config.log_tau_max))


@dataclass
class TrainingItem:
    record: UtteranceRecord
    features: FeatureVector
    standardized: np.ndarray = None
    pool: List[str] = field(default_factory=list)
    emotion_queries: List[str] = field(default_factory=list)


@dataclass
class BatchItem:
    utt_id: str
    features: np.ndarray
    tokens: List[int]
    caption: str


def make_batches(items: Sequence[TrainingItem], batch_size: int, rng: np.random.Generator,
                 policy: CaptionPolicy, vocab: Vocab) -> List[List[BatchItem]]:
    """Shuffle, resample one caption per item and cut full batches.

    A trailing partial batch is dropped, unless it is the only batch and
    still holds at least 2 items.
    """
    if len(items) < 2:
        raise InsufficientDataError(f"contrastive training needs at least 2 items, got {len(items)}")
    order = rng.permutation(len(items))
    shuffled = []
    for i in order:
        item = items[int(i)]
        caption = sample_caption(item.pool, policy, item.emotion_queries, rng)
        shuffled.append(BatchItem(item.record.id, item.standardized, tokenize(caption.text, vocab), caption.text))

    batches = [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < batch_size:
        batches.pop()
    return batches


@dataclass
class EpochLog:
    epoch: int
    loss: float
    uar: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "uar": self.uar}


@dataclass
class TrainResult:
    best: ClapModel
    final: ClapModel
    log: List[EpochLog]
    best_epoch: int
    labels: List[str]
    thresholds: dict

    @property
    def best_uar(self) -> float:
        return self.log[self.best_epoch].uar


def split_holdout(records: Sequence[UtteranceRecord], fraction: float, rng: np.random.Generator
                  ) -> Tuple[List[UtteranceRecord], List[UtteranceRecord]]:
    """Seeded split stratified by emotion label; both halves keep manifest order."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"holdout fraction must lie in (0, 1), got {fraction}")
    groups: Dict[str, List[int]] = {}
    for i, record in enumerate(records):
        groups.setdefault(record.emotion or "", []).append(i)
    held = set()
    for label in sorted(groups):
        members = groups[label]
        take = int(round(fraction * len(members)))
        held.update(members[int(j)] for j in rng.permutation(len(members))[:take])
    train_part = [r for i, r in enumerate(records) if i not in held]
    holdout_part = [r for i, r in enumerate(records) if i in held]
    return train_part, holdout_part


def _trainable(items: Sequence[TrainingItem], policy: CaptionPolicy) -> List[TrainingItem]:
    kept = []
    for item in items:
        try:
            sample_caption(item.pool, policy, item.emotion_queries, np.random.default_rng(0))
        except EmptyPoolError:
            logger.warning("Record %s yields no caption under %s, skipping", item.record.id, policy.name)
            continue
        kept.append(item)
    return kept


def _copy_model(model: ClapModel) -> ClapModel:
    return ClapModel(model.config, model.vocab, model.params.copy(), model.standardizer)


def train(config: TrainConfig, corpus: Sequence[Tuple[UtteranceRecord, FeatureVector]],
          holdout: Sequence[Tuple[UtteranceRecord, FeatureVector]], bank: TemplateBank = DEFAULT_BANK) -> TrainResult:
    records = [r for r, _ in corpus]
    features = {r.id: fv for r, fv in corpus}
    thresholds = fit_thresholds(records, features)
    standardizer = Standardizer.fit([fv for _, fv in corpus])
    vocab = Vocab.from_texts(bank.vocabulary_text())

    items = [TrainingItem(r, fv, standardizer.transform(fv), caption_pool(r, fv, thresholds, bank),
                          record_emotion_queries(r, bank)) for r, fv in corpus]
    items = _trainable(items, config.policy)

    eval_items = [(r, fv) for r, fv in holdout if agreed_emotion(r) is not None]
    labels = sorted({r.emotion for r, _ in eval_items})
    if len(labels) < 2:
        raise InsufficientDataError(f"held-out split needs at least 2 emotion classes, got {labels}")

    model = ClapModel.initialize(config.model, vocab, standardizer, np.random.default_rng(config.seed))
    state = AdamState.zeros_like(model.params)
    log: List[EpochLog] = []
    best: Optional[ClapModel] = None
    best_epoch = -1

    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        losses = []
        for batch_index, batch in enumerate(make_batches(items, config.batch_size, rng, config.policy, vocab)):
            loss, grads = forward_backward([(b.features, b.tokens) for b in batch], model.params)
            if not math.isfinite(loss):
                raise NonFiniteLossError(epoch, batch_index, loss)
            adam_step(model.params, grads, state, config.lr_encoders, config.lr_heads, config.betas, config.eps)
            clamp_temperature(model.params, config.model)
            losses.append(loss)

        queries = build_label_queries(labels, model, config.query_mode)
        epoch_uar = evaluate(eval_items, queries, model).uar
        log.append(EpochLog(epoch, float(np.mean(losses)), epoch_uar))
        logger.info("epoch %d: loss %.4f, held-out UAR %.4f", epoch, log[-1].loss, epoch_uar)
        if best is None or epoch_uar > log[best_epoch].uar:
            best, best_epoch = _copy_model(model), epoch

    return TrainResult(best, model, log, best_epoch, labels, thresholds)


def save_run(result: TrainResult, run_dir) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "epochs.jsonl", "w", encoding="utf-8") as handle:
        for entry in result.log:
            handle.write(json.dumps(entry.to_dict()) + "\n")
    result.best.save(run_dir / "best.ckpt.json")
    result.final.save(run_dir / "final.ckpt.json")
    save_thresholds(result.thresholds, run_dir / "thresholds.json")
