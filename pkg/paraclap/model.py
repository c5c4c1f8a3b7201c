"""Dual-encoder core: tokenizer, small audio/text encoders, projection
heads, scaled cosine similarity, symmetric contrastive loss and its exact
reverse-mode gradients. All math runs in float64."""
import hashlib
import json
import logging
import math
import string
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy.special import erf, log_softmax, softmax

from paraclap.errors import (CheckpointError, ContractViolationError, DegenerateEmbeddingError,
                             ShapeError)
from paraclap.features import FEATURE_NAMES, FeatureVector

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
UNK = "<unk>"
LN_EPS = 1e-5
UNIT_TOLERANCE = 1e-6
MIN_NORM = 1e-12
SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    text_embed: int = 32
    text_hidden: int = 64
    audio_embed: int = 32
    audio_hidden: int = 64
    n_features: int = len(FEATURE_NAMES)
    expansion: int = 4
    # shared offset on both heads' layer-norm bias; puts the initial loss at ln N
    ln_bias_init: float = 2.0
    log_tau_init: float = math.log(1.0 / 0.07)
    log_tau_max: float = math.log(100.0)


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        known = sorted(set(tokens) - {UNK})
        self.tokens: List[str] = [UNK] + known
        self.ids: Dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        return cls(tok for text in texts for tok in _words(text))


def _words(text: str) -> List[str]:
    words = (w.strip(string.punctuation) for w in text.lower().split())
    return [w for w in words if w]


def tokenize(text: str, vocab: Vocab) -> List[int]:
    return [vocab.ids.get(word, 0) for word in _words(text)]


ENCODER_PREFIXES = ("text_", "audio_")


class ModelParams:
    """Named float64 tensors of both encoders, both projection heads and log_tau."""

    def __init__(self, tensors: Dict[str, np.ndarray]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        self.tensors[name] = value

    def names(self) -> List[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({name: value.copy() for name, value in self.tensors.items()})

    def head(self, side: str) -> "ProjectionHead":
        p = f"proj_{side}_"
        return ProjectionHead(*(self.tensors[p + n] for n in ("w1", "b1", "w2", "b2", "gain", "bias")))

    @property
    def tau(self) -> float:
        return float(np.exp(self.tensors["log_tau"]))

    @staticmethod
    def is_encoder(name: str) -> bool:
        return name.startswith(ENCODER_PREFIXES)


@dataclass
class ProjectionHead:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    gain: np.ndarray
    bias: np.ndarray


def param_shapes(config: ModelConfig, vocab_size: int) -> Dict[str, Tuple[int, ...]]:
    d, hidden = config.dim, config.expansion * config.dim
    shapes = {
        "text_embedding": (vocab_size, config.text_embed),
        "text_w1": (config.text_embed, config.text_hidden),
        "text_b1": (config.text_hidden,),
        "text_w2": (config.text_hidden, config.text_embed),
        "text_b2": (config.text_embed,),
        "audio_w1": (config.n_features, config.audio_hidden),
        "audio_b1": (config.audio_hidden,),
        "audio_w2": (config.audio_hidden, config.audio_embed),
        "audio_b2": (config.audio_embed,),
    }
    for side, width in (("text", config.text_embed), ("audio", config.audio_embed)):
        shapes.update({
            f"proj_{side}_w1": (width, hidden),
            f"proj_{side}_b1": (hidden,),
            f"proj_{side}_w2": (hidden, d),
            f"proj_{side}_b2": (d,),
            f"proj_{side}_gain": (d,),
            f"proj_{side}_bias": (d,),
        })
    shapes["log_tau"] = ()
    return shapes


def init_params(config: ModelConfig, vocab_size: int, rng: np.random.Generator) -> ModelParams:
    tensors = {}
    for name, shape in param_shapes(config, vocab_size).items():
        if name == "text_embedding":
            tensors[name] = rng.standard_normal(shape)
        elif name.endswith(("_w1", "_w2")):
            tensors[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
        elif name.endswith("_gain"):
            tensors[name] = np.ones(shape)
        elif name.endswith("_bias"):
            tensors[name] = np.full(shape, config.ln_bias_init)
        elif name == "log_tau":
            tensors[name] = np.array(config.log_tau_init)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(tensors)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / SQRT_2PI


def _mlp_forward(x, w1, b1, w2, b2):
    pre = x @ w1 + b1
    hidden = gelu(pre)
    return hidden @ w2 + b2, (x, pre, hidden)


def _mlp_backward(dout, cache, w1, w2):
    x, pre, hidden = cache
    dw2 = hidden.T @ dout
    db2 = dout.sum(axis=0)
    dpre = (dout @ w2.T) * gelu_grad(pre)
    dw1 = x.T @ dpre
    db1 = dpre.sum(axis=0)
    return dpre @ w1.T, (dw1, db1, dw2, db2)


def _layer_norm_forward(x, gain, bias):
    centered = x - x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = centered * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def _layer_norm_backward(dy, cache, gain):
    xhat, inv_std = cache
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def layer_norm(v, gain, bias):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] < 2:
        raise ShapeError("layer norm needs at least 2 elements")
    return _layer_norm_forward(v, gain, bias)[0]


def _normalize_forward(y):
    norms = np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(norms <= MIN_NORM):
        raise DegenerateEmbeddingError("cannot normalize a (near-)zero embedding")
    return y / norms, norms


def _normalize_backward(du, u, norms):
    return (du - u * (u * du).sum(axis=-1, keepdims=True)) / norms


def normalize(v):
    return _normalize_forward(np.asarray(v, dtype=np.float64))[0]


def _project_forward(raw, head: ProjectionHead):
    if raw.shape[-1] != head.w1.shape[0]:
        raise ShapeError(f"projection expects input width {head.w1.shape[0]}, got {raw.shape[-1]}")
    p2, mlp_cache = _mlp_forward(raw, head.w1, head.b1, head.w2, head.b2)
    y, ln_cache = _layer_norm_forward(p2, head.gain, head.bias)
    return y, (mlp_cache, ln_cache)


def project(raw, head: ProjectionHead):
    raw = np.asarray(raw, dtype=np.float64)
    return _project_forward(raw[None, :], head)[0][0]


def _pooling_matrix(token_lists: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    pool = np.zeros((len(token_lists), vocab_size))
    for i, tokens in enumerate(token_lists):
        if len(tokens) == 0:
            raise ValueError("cannot encode an empty token list")
        np.add.at(pool[i], np.asarray(tokens), 1.0 / len(tokens))
    return pool


def encode_text(tokens: Sequence[int], params: ModelParams) -> np.ndarray:
    pooled = _pooling_matrix([tokens], params["text_embedding"].shape[0]) @ params["text_embedding"]
    return _mlp_forward(pooled, params["text_w1"], params["text_b1"], params["text_w2"], params["text_b2"])[0][0]


def _check_features(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise ValueError("audio encoder input must be finite")
    return features


def encode_audio(features, params: ModelParams) -> np.ndarray:
    x = _check_features(features)[None, :]
    return _mlp_forward(x, params["audio_w1"], params["audio_b1"], params["audio_w2"], params["audio_b2"])[0][0]


@dataclass
class EmbeddingBatch:
    audio: np.ndarray
    text: np.ndarray


def _check_unit_rows(matrix: np.ndarray, what: str):
    deviation = np.abs(np.linalg.norm(matrix, axis=1) - 1.0)
    if deviation.size and deviation.max() > UNIT_TOLERANCE:
        raise ContractViolationError(f"{what} rows must be unit-norm (max deviation {deviation.max():.3g})")


def similarity_matrix(batch: EmbeddingBatch, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ContractViolationError(f"temperature must be positive, got {tau}")
    _check_unit_rows(batch.audio, "audio")
    _check_unit_rows(batch.text, "text")
    return tau * (batch.audio @ batch.text.T)


def symmetric_ce_loss(s: np.ndarray) -> float:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got shape {s.shape}")
    ce_rows = -np.mean(np.diag(log_softmax(s, axis=1)))
    ce_cols = -np.mean(np.diag(log_softmax(s, axis=0)))
    return float(0.5 * (ce_rows + ce_cols))


def contrastive_softmax(s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Audio-to-text (row) and text-to-audio (column) matching probabilities."""
    s = np.asarray(s, dtype=np.float64)
    return softmax(s, axis=1), softmax(s, axis=0)


def _symmetric_ce_grad(s: np.ndarray) -> np.ndarray:
    n = s.shape[0]
    eye = np.eye(n)
    rows, cols = contrastive_softmax(s)
    return 0.5 * ((rows - eye) + (cols - eye)) / n


def _audio_tower(features, params: ModelParams):
    raw, enc_cache = _mlp_forward(features, params["audio_w1"], params["audio_b1"],
                                  params["audio_w2"], params["audio_b2"])
    y, proj_cache = _project_forward(raw, params.head("audio"))
    u, norms = _normalize_forward(y)
    return u, (enc_cache, proj_cache, norms)


def _text_tower(pool, params: ModelParams):
    pooled = pool @ params["text_embedding"]
    raw, enc_cache = _mlp_forward(pooled, params["text_w1"], params["text_b1"],
                                  params["text_w2"], params["text_b2"])
    y, proj_cache = _project_forward(raw, params.head("text"))
    u, norms = _normalize_forward(y)
    return u, (enc_cache, proj_cache, norms)


def _tower_backward(du, u, cache, params: ModelParams, side: str, grads: Dict[str, np.ndarray]):
    enc_cache, (mlp_cache, ln_cache), norms = cache
    p = f"proj_{side}_"
    dy = _normalize_backward(du, u, norms)
    dp2, grads[p + "gain"], grads[p + "bias"] = _layer_norm_backward(dy, ln_cache, params[p + "gain"])
    draw, (grads[p + "w1"], grads[p + "b1"], grads[p + "w2"], grads[p + "b2"]) = _mlp_backward(
        dp2, mlp_cache, params[p + "w1"], params[p + "w2"])
    dx, (grads[f"{side}_w1"], grads[f"{side}_b1"], grads[f"{side}_w2"], grads[f"{side}_b2"]) = _mlp_backward(
        draw, enc_cache, params[f"{side}_w1"], params[f"{side}_w2"])
    return dx


def forward_backward(batch: Sequence[Tuple[np.ndarray, Sequence[int]]], params: ModelParams
                     ) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss of one batch of (standardized features, token ids) pairs and its gradient for every tensor."""
    features = np.stack([_check_features(f) for f, _ in batch])
    pool = _pooling_matrix([tokens for _, tokens in batch], params["text_embedding"].shape[0])

    u_audio, audio_cache = _audio_tower(features, params)
    u_text, text_cache = _text_tower(pool, params)
    tau = params.tau
    s = similarity_matrix(EmbeddingBatch(u_audio, u_text), tau)
    loss = symmetric_ce_loss(s)

    ds = _symmetric_ce_grad(s)
    grads: Dict[str, np.ndarray] = {}
    grads["log_tau"] = np.array(np.sum(ds * s))
    _tower_backward(tau * ds @ u_text, u_audio, audio_cache, params, "audio", grads)
    dpooled = _tower_backward(tau * ds.T @ u_audio, u_text, text_cache, params, "text", grads)
    grads["text_embedding"] = pool.T @ dpooled
    return loss, {name: grads[name] for name in params.names()}


def batch_loss(batch, params: ModelParams) -> float:
    features = np.stack([_check_features(f) for f, _ in batch])
    pool = _pooling_matrix([tokens for _, tokens in batch], params["text_embedding"].shape[0])
    u_audio, _ = _audio_tower(features, params)
    u_text, _ = _text_tower(pool, params)
    return symmetric_ce_loss(similarity_matrix(EmbeddingBatch(u_audio, u_text), params.tau))


def numerical_gradient(loss_fn: Callable[[ModelParams], float], params: ModelParams,
                       step: float = 1e-4) -> Dict[str, np.ndarray]:
    """Central finite differences of ``loss_fn`` for every coordinate of every tensor."""
    grads = {}
    perturbed = params.copy()
    for name in params.names():
        flat = perturbed[name].reshape(-1)
        grad = np.zeros(flat.size)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + step
            plus = loss_fn(perturbed)
            flat[k] = original - step
            minus = loss_fn(perturbed)
            flat[k] = original
            grad[k] = (plus - minus) / (2.0 * step)
        grads[name] = grad.reshape(params[name].shape)
    return grads


def check_gradients(batch, params: ModelParams, step: float = 1e-4) -> Dict[str, float]:
    """Max relative error per tensor between analytic and central-difference gradients."""
    _, analytic = forward_backward(batch, params)
    numeric = numerical_gradient(lambda p: batch_loss(batch, p), params, step)
    errors = {}
    for name in params.names():
        a, n = analytic[name], numeric[name]
        errors[name] = float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-6), initial=0.0))
    return errors


class Standardizer:
    """Per-feature z-scoring fitted on the training corpus; absent features become 0."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, vectors: Sequence[FeatureVector]) -> "Standardizer":
        table = np.array([fv.as_array() for fv in vectors]).reshape(-1, len(FEATURE_NAMES))
        mean = np.zeros(len(FEATURE_NAMES))
        std = np.ones(len(FEATURE_NAMES))
        for k in range(len(FEATURE_NAMES)):
            column = table[:, k][~np.isnan(table[:, k])]
            if column.size:
                mean[k] = column.mean()
                if column.std() > 0:
                    std[k] = column.std()
        return cls(mean, std)

    def transform(self, fv: FeatureVector) -> np.ndarray:
        return np.nan_to_num((fv.as_array() - self.mean) / self.std, nan=0.0)


class ClapModel:
    def __init__(self, config: ModelConfig, vocab: Vocab, params: ModelParams, standardizer: Standardizer):
        self.config = config
        self.vocab = vocab
        self.params = params
        self.standardizer = standardizer

    @classmethod
    def initialize(cls, config: ModelConfig, vocab: Vocab, standardizer: Standardizer,
                   rng: np.random.Generator) -> "ClapModel":
        return cls(config, vocab, init_params(config, len(vocab), rng), standardizer)

    def embed_audio(self, vectors: Sequence[FeatureVector]) -> np.ndarray:
        features = np.stack([self.standardizer.transform(fv) for fv in vectors])
        return _audio_tower(features, self.params)[0]

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        pool = _pooling_matrix([tokenize(t, self.vocab) for t in texts], len(self.vocab))
        return _text_tower(pool, self.params)[0]

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "vocab": self.vocab.tokens,
            "vocab_hash": self.vocab.hash,
            "standardizer": {"mean": self.standardizer.mean.tolist(), "std": self.standardizer.std.tolist()},
            "tensors": {name: {"shape": list(value.shape), "data": value.reshape(-1).tolist()}
                        for name, value in self.params.tensors.items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, raw: dict) -> "ClapModel":
        if raw.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {raw.get('format_version')!r}")
        config = ModelConfig(**raw["config"])
        vocab = Vocab(raw["vocab"])
        if vocab.tokens != raw["vocab"] or vocab.hash != raw["vocab_hash"]:
            raise CheckpointError("checkpoint vocabulary does not match its hash")
        expected = param_shapes(config, len(vocab))
        if set(expected) != set(raw["tensors"]):
            raise CheckpointError(f"checkpoint tensors {sorted(raw['tensors'])} do not match the model")
        tensors = {}
        for name, shape in expected.items():
            entry = raw["tensors"][name]
            if tuple(entry["shape"]) != shape or len(entry["data"]) != max(1, math.prod(shape)):
                raise CheckpointError(f"tensor {name}: expected shape {shape}, got {entry['shape']}")
            tensors[name] = np.array(entry["data"], dtype=np.float64).reshape(shape)
        standardizer = Standardizer(raw["standardizer"]["mean"], raw["standardizer"]["std"])
        return cls(config, vocab, ModelParams(tensors), standardizer)

    @classmethod
    def load(cls, path) -> "ClapModel":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not a checkpoint document: {exc}") from exc
        try:
            return cls.from_dict(raw)
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: incomplete checkpoint: {exc}") from exc
