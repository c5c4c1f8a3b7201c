"""Text queries from labels, binned dimensional attributes and binned
acoustic features, and their combination into training captions."""
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from paraclap.corpus import (DEFAULT_PROPORTIONS, DIMENSIONS, GENDERS, BinLabel, BinThresholds,
                             UtteranceRecord, assign_bin, compute_bin_thresholds)
from paraclap.errors import (ContextError, EmptyPoolError, UnknownGenderError, UnknownLabelError,
                             UsageError)
from paraclap.features import FeatureVector

logger = logging.getLogger(__name__)

LOW, MID, HIGH = BinLabel.LOW, BinLabel.MID, BinLabel.HIGH

ACOUSTIC_ATTRIBUTES = ("pitch_mu", "pitch_sigma", "intensity", "duration", "jitter", "shimmer")
ATTRIBUTES = DIMENSIONS + ACOUSTIC_ATTRIBUTES
FEATURE_OF = {
    "pitch_mu": "pitch_mu",
    "pitch_sigma": "pitch_sigma",
    "intensity": "intensity_db",
    "duration": "duration_s",
    "jitter": "jitter",
    "shimmer": "shimmer",
}
CONDITIONED_ON = {"jitter": "pitch_sigma", "shimmer": "pitch_sigma"}

EMOTION_ADJECTIVES = {
    "happiness": "happy",
    "anger": "angry",
    "sadness": "sad",
    "fear": "fearful",
    "disgust": "disgusted",
    "surprise": "surprised",
    "contempt": "contemptuous",
    "neutral": "neutral",
}
# labels for utterances without a majority-agreed emotion
NO_AGREEMENT_LABELS = frozenset({"no_agreement", "other"})

CONJUNCTION = " and "
PLACEHOLDERS = ("[EMOTION]", "[GENDER]")

UNCONDITIONAL_TEMPLATES = {
    ("arousal", LOW): ["has low arousal", "speaker is calm"],
    ("arousal", MID): ["arousal is at an average level"],
    ("arousal", HIGH): ["has high arousal", "speaker is aroused"],
    ("valence", LOW): ["has low valence", "speaker appears to be in a bad mood"],
    ("valence", MID): ["valence is at an average level"],
    ("valence", HIGH): ["has high valence", "speaker appears to be in a good mood"],
    ("dominance", LOW): ["has low dominance"],
    ("dominance", MID): ["dominance is at an average level"],
    ("dominance", HIGH): ["has high dominance", "speaker appears to be dominant"],
    ("pitch_mu", LOW): ["has a low pitch"],
    ("pitch_mu", MID): ["has an average pitch", "has a normal pitch"],
    ("pitch_mu", HIGH): ["has a high pitch"],
    ("pitch_sigma", LOW): ["has a low pitch variation"],
    ("pitch_sigma", MID): ["has a normal pitch variation", "has a low pitch variance",
                           "has a very unstable pitch", "has a very unstable phonation"],
    ("pitch_sigma", HIGH): ["has a high pitch variation", "has a high pitch variance",
                            "has a very stable pitch", "has a very stable phonation"],
    ("intensity", LOW): ["has a low equivalent sound level", "is quiet", "is almost silent"],
    ("intensity", MID): ["has a normal equivalent sound level", "has an average equivalent sound level",
                         "loudness is just about right"],
    ("intensity", HIGH): ["has a high equivalent sound level", "sound pressure is elevated",
                          "sound level is elevated", "is loud"],
    ("duration", LOW): ["has a short duration", "has a small duration", "is a short sentence",
                        "lasts a little time", "is short"],
    ("duration", MID): ["is of average duration", "is of average length", "duration is medium",
                        "is neither long nor short"],
    ("duration", HIGH): ["has a long duration", "has a big duration", "is a long sentence",
                         "lasts a long time", "is long"],
    ("jitter", LOW): ["has a low jitter"],
    ("jitter", MID): ["has a normal jitter"],
    ("jitter", HIGH): ["has a high jitter"],
    ("shimmer", LOW): ["has a low shimmer"],
    ("shimmer", MID): ["has a normal shimmer"],
    ("shimmer", HIGH): ["has a high shimmer"],
}

# (own bin, pitch-sigma bin) -> suffixes appended to the attribute's first template
PITCH_SIGMA_SUFFIXES = {
    (LOW, HIGH): ["but a high pitch variance", "but the pitch is unstable"],
    (LOW, MID): ["but not a low pitch variance"],
    (HIGH, LOW): ["but a low pitch variance", "but the pitch is stable"],
    (HIGH, MID): ["but not a high pitch variance"],
}

EMOTION_VARIANT_TEMPLATES = {
    ("arousal", LOW): ["speaker is not very [EMOTION]"],
    ("arousal", HIGH): ["speaker is very [EMOTION]"],
}

LABEL_TEMPLATES = {
    "emotion": ["this is a [EMOTION] instance", "speaker is [EMOTION]"],
    "gender": ["a [GENDER] is speaking", "the speaker is [GENDER]"],
}


def _conditional_templates() -> Dict[Tuple[str, BinLabel, BinLabel], List[str]]:
    conditional = {}
    for attr in CONDITIONED_ON:
        for (own, other), suffixes in PITCH_SIGMA_SUFFIXES.items():
            head = UNCONDITIONAL_TEMPLATES[(attr, own)][0]
            conditional[(attr, own, other)] = [f"{head} {suffix}" for suffix in suffixes]
    return conditional


@dataclass
class TemplateBank:
    entries: Dict[Tuple[str, BinLabel], List[str]]
    conditional_entries: Dict[Tuple[str, BinLabel, BinLabel], List[str]]
    emotion_entries: Dict[Tuple[str, BinLabel], List[str]]
    label_templates: Dict[str, List[str]]

    def validate(self) -> None:
        for attr in ATTRIBUTES:
            for label in BinLabel:
                if not self.entries.get((attr, label)):
                    raise ValueError(f"template bank has no template for ({attr}, {label.value})")
        for kind in ("emotion", "gender"):
            if not self.label_templates.get(kind):
                raise ValueError(f"template bank has no {kind} templates")
        for template in self.all_templates():
            for placeholder in re.findall(r"\[[^\]]*\]", template):
                if placeholder not in PLACEHOLDERS:
                    raise ValueError(f"template {template!r} uses unknown placeholder {placeholder}")
            if CONJUNCTION in template:
                raise ValueError(f"template {template!r} contains the conjunction {CONJUNCTION!r}")

    def all_templates(self) -> List[str]:
        groups = (list(self.entries.values()) + list(self.conditional_entries.values())
                  + list(self.emotion_entries.values()) + list(self.label_templates.values()))
        return [template for group in groups for template in group]

    def vocabulary_text(self) -> List[str]:
        """Every template with its placeholders expanded over all known labels."""
        fillers = {
            "[EMOTION]": sorted(set(EMOTION_ADJECTIVES.values())),
            "[GENDER]": list(GENDERS),
        }
        texts = []
        for template in self.all_templates():
            expanded = [template]
            for placeholder, values in fillers.items():
                if placeholder in template:
                    expanded = [t.replace(placeholder, v) for t in expanded for v in values]
            texts.extend(expanded)
        texts.extend(EMOTION_ADJECTIVES)
        return texts


def build_template_bank() -> TemplateBank:
    bank = TemplateBank(
        entries={key: list(value) for key, value in UNCONDITIONAL_TEMPLATES.items()},
        conditional_entries=_conditional_templates(),
        emotion_entries={key: list(value) for key, value in EMOTION_VARIANT_TEMPLATES.items()},
        label_templates={key: list(value) for key, value in LABEL_TEMPLATES.items()},
    )
    bank.validate()
    return bank


def _parse_bank_key(key: str, parts: int) -> tuple:
    fields = key.split(":")
    if len(fields) != parts:
        raise ValueError(f"bad template key {key!r}")
    attr, *bins = fields
    if attr not in ATTRIBUTES:
        raise ValueError(f"bad template key {key!r}: unknown attribute {attr}")
    return (attr, *(BinLabel(b) for b in bins))


def load_template_bank(path) -> TemplateBank:
    """Override sections of the default bank from a JSON document.

    Keys are ``"attribute:Bin"`` under ``entries`` and ``emotion_variants``,
    ``"attribute:Bin:PitchSigmaBin"`` under ``conditional``; ``labels`` maps
    ``emotion``/``gender`` to sentence patterns.
    """
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    bank = build_template_bank()
    for key, templates in raw.get("entries", {}).items():
        bank.entries[_parse_bank_key(key, 2)] = list(templates)
    for key, templates in raw.get("conditional", {}).items():
        bank.conditional_entries[_parse_bank_key(key, 3)] = list(templates)
    for key, templates in raw.get("emotion_variants", {}).items():
        bank.emotion_entries[_parse_bank_key(key, 2)] = list(templates)
    for kind, templates in raw.get("labels", {}).items():
        if kind not in LABEL_TEMPLATES:
            raise ValueError(f"unknown label template kind {kind!r}")
        bank.label_templates[kind] = list(templates)
    bank.validate()
    return bank


DEFAULT_BANK = build_template_bank()


def emotion_adjective(label: str) -> str:
    key = label.strip().lower()
    if key in EMOTION_ADJECTIVES:
        return EMOTION_ADJECTIVES[key]
    if key in EMOTION_ADJECTIVES.values():
        return key
    raise UnknownLabelError(f"no adjective known for emotion label {label!r}")


def emotion_queries(label: str, bank: TemplateBank = DEFAULT_BANK) -> List[str]:
    adjective = emotion_adjective(label)
    return [t.replace("[EMOTION]", adjective) for t in bank.label_templates["emotion"]]


def gender_queries(gender: str, bank: TemplateBank = DEFAULT_BANK) -> List[str]:
    if gender not in GENDERS:
        raise UnknownGenderError(f"gender must be one of {GENDERS}, got {gender!r}")
    return [t.replace("[GENDER]", gender) for t in bank.label_templates["gender"]]


@dataclass
class QueryContext:
    bins: Dict[str, BinLabel] = field(default_factory=dict)
    emotion_adjective: Optional[str] = None


def queries_for_attribute(attr: str, bin_label: BinLabel, context: QueryContext = None,
                          bank: TemplateBank = DEFAULT_BANK) -> List[str]:
    if attr not in ATTRIBUTES:
        raise ValueError(f"unknown attribute {attr!r}")
    context = context or QueryContext()
    queries = list(bank.entries[(attr, bin_label)])

    if attr in CONDITIONED_ON:
        other = CONDITIONED_ON[attr]
        if other not in context.bins:
            raise ContextError(f"{attr} queries need the {other} bin in context")
        queries += bank.conditional_entries.get((attr, bin_label, context.bins[other]), [])

    if context.emotion_adjective is not None:
        queries += [t.replace("[EMOTION]", context.emotion_adjective)
                    for t in bank.emotion_entries.get((attr, bin_label), [])]
    return queries


def agreed_emotion(record: UtteranceRecord) -> Optional[str]:
    """The record's emotion adjective, or None when absent, unagreed or unmapped."""
    if record.emotion is None or record.emotion.strip().lower() in NO_AGREEMENT_LABELS:
        return None
    try:
        return emotion_adjective(record.emotion)
    except UnknownLabelError:
        logger.warning("Record %s: emotion label %r has no adjective, skipping its queries",
                       record.id, record.emotion)
        return None


def attribute_value(attr: str, record: UtteranceRecord, fv: Optional[FeatureVector]) -> Optional[float]:
    if attr in DIMENSIONS:
        return record.dimension(attr)
    if fv is None:
        return None
    return fv.get(FEATURE_OF[attr])


def record_emotion_queries(record: UtteranceRecord, bank: TemplateBank = DEFAULT_BANK) -> List[str]:
    adjective = agreed_emotion(record)
    if adjective is None:
        return []
    return [t.replace("[EMOTION]", adjective) for t in bank.label_templates["emotion"]]


def caption_pool(record: UtteranceRecord, fv: Optional[FeatureVector], thresholds: Mapping[str, BinThresholds],
                 bank: TemplateBank = DEFAULT_BANK) -> List[str]:
    adjective = agreed_emotion(record)
    bins = {}
    for attr in ATTRIBUTES:
        value = attribute_value(attr, record, fv)
        if value is not None and attr in thresholds:
            bins[attr] = assign_bin(value, thresholds[attr])
    context = QueryContext(bins, adjective)

    pool = record_emotion_queries(record, bank)
    if record.gender is not None:
        pool += gender_queries(record.gender, bank)
    for attr in ATTRIBUTES:
        if attr in bins:
            pool += queries_for_attribute(attr, bins[attr], context, bank)
    return pool


def fit_thresholds(records: Sequence[UtteranceRecord], features: Mapping[str, FeatureVector],
                   proportions=DEFAULT_PROPORTIONS) -> Dict[str, BinThresholds]:
    """Fit per-attribute thresholds on every attribute with at least one value in the corpus."""
    thresholds = {}
    for attr in ATTRIBUTES:
        values = [attribute_value(attr, r, features.get(r.id)) for r in records]
        values = [v for v in values if v is not None]
        if values:
            thresholds[attr] = compute_bin_thresholds(values, proportions, attr)
    return thresholds


def save_thresholds(thresholds: Mapping[str, BinThresholds], path) -> None:
    Path(path).write_text(json.dumps([thresholds[a].to_dict() for a in ATTRIBUTES if a in thresholds],
                                     indent=2) + "\n", encoding="utf-8")


def load_thresholds(path) -> Dict[str, BinThresholds]:
    items = json.loads(Path(path).read_text(encoding="utf-8"))
    return {item["attribute"]: BinThresholds.from_dict(item) for item in items}


class CaptionMode(Enum):
    ONLY_EMO = "OnlyEmo"
    NO_EMO_RAND_N = "NoEmoRandN"
    RAND_N = "RandN"


@dataclass(frozen=True)
class CaptionPolicy:
    mode: CaptionMode
    max_queries: int = 5

    def __post_init__(self):
        if self.max_queries < 1:
            raise UsageError(f"max_queries must be >= 1, got {self.max_queries}")

    @property
    def name(self) -> str:
        if self.mode is CaptionMode.ONLY_EMO:
            return "only-emo"
        prefix = "no-emo-rand" if self.mode is CaptionMode.NO_EMO_RAND_N else "rand"
        return f"{prefix}{self.max_queries}"


def parse_policy(mode: str, max_queries: int = None) -> CaptionPolicy:
    """``only-emo``, ``randN`` or ``no-emo-randN``; ``max_queries`` overrides N."""
    text = mode.strip().lower()
    if text == "only-emo":
        return CaptionPolicy(CaptionMode.ONLY_EMO, max_queries or 1)
    match = re.fullmatch(r"(no-emo-)?rand(\d*)", text)
    if not match or (not match.group(2) and max_queries is None):
        raise UsageError(f"unknown caption mode {mode!r}: expected only-emo, randN or no-emo-randN")
    n = max_queries if max_queries is not None else int(match.group(2))
    return CaptionPolicy(CaptionMode.NO_EMO_RAND_N if match.group(1) else CaptionMode.RAND_N, n)


@dataclass(frozen=True)
class Caption:
    text: str
    parts: Tuple[str, ...]

    @classmethod
    def join(cls, parts: Sequence[str]) -> "Caption":
        return cls(CONJUNCTION.join(parts), tuple(parts))


def sample_caption(pool: Sequence[str], policy: CaptionPolicy, emotion_queries: Sequence[str],
                   rng: np.random.Generator) -> Caption:
    if policy.mode is CaptionMode.ONLY_EMO:
        candidates = list(emotion_queries)
        if not candidates:
            raise EmptyPoolError("only-emo captions need at least one emotion query")
        return Caption.join([candidates[int(rng.integers(len(candidates)))]])

    if policy.mode is CaptionMode.NO_EMO_RAND_N:
        excluded = set(emotion_queries)
        candidates = [q for q in pool if q not in excluded]
    else:
        candidates = list(pool)
    if not candidates:
        raise EmptyPoolError(f"no queries left to sample under {policy.name}")

    k = min(int(rng.integers(1, policy.max_queries + 1)), len(candidates))
    picks = rng.choice(len(candidates), size=k, replace=False)
    return Caption.join([candidates[int(i)] for i in picks])


def write_captions(rows: Sequence[Tuple[str, Caption]], path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for utt_id, caption in rows:
            handle.write(json.dumps({"id": utt_id, "caption": caption.text, "parts": list(caption.parts)}) + "\n")
