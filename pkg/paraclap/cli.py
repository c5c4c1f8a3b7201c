import argparse
import hashlib
import json
import logging
import sys
import threading
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from paraclap.config import normalize_key, read_config, write_config
from paraclap.corpus import (DEFAULT_CLASS_PROFILES, UtteranceRecord, clip_or_pad, decode_wav,
                             load_manifest, parse_class_spec, synthesize_corpus)
from paraclap.errors import EmptyPoolError, ParaclapError, UsageError
from paraclap.evaluation import QueryMode, build_label_queries, evaluate
from paraclap.features import FeatureVector, extract_features, load_feature_cache, write_feature_cache
from paraclap.model import ClapModel, ModelConfig
from paraclap.querygen import (DEFAULT_BANK, NO_AGREEMENT_LABELS, caption_pool, fit_thresholds,
                               load_template_bank, parse_policy,
                               record_emotion_queries, sample_caption, save_thresholds, write_captions)
from paraclap.training import TrainConfig, save_run, split_holdout, train

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def report_failure(command: str, exc: BaseException) -> None:
    print(f"Error during {command}: {exc}", file=sys.stderr, flush=True)


def extract_worker(records: Sequence[UtteranceRecord], indices: Sequence[int], results: list,
                   clip_seconds: float, seed: int) -> None:
    for i in indices:
        try:
            wave = decode_wav(records[i].audio_path)
            if clip_seconds > 0:
                wave = clip_or_pad(wave, clip_seconds, np.random.default_rng([seed, i]))
            results[i] = extract_features(wave)
        except Exception as exc:
            # one bad file must not end the slice
            results[i] = exc


def extract_multiple(records: Sequence[UtteranceRecord], workers: int = 4, clip_seconds: float = 0.0,
                     seed: int = 0) -> List[object]:
    """Features (or the exception raised) per record, in manifest order."""
    results: List[object] = [None] * len(records)
    threads = []
    for w in range(max(1, workers)):
        thread = threading.Thread(target=extract_worker,
                                  args=(records, range(w, len(records), max(1, workers)), results,
                                        clip_seconds, seed))
        thread.start()
        threads.append(thread)
    for thread in threads:
        thread.join()
    return results


def corpus_features(records: Sequence[UtteranceRecord], args) -> List[Tuple[UtteranceRecord, FeatureVector]]:
    """Pair records with features from ``--features`` or fresh extraction, dropping failures."""
    if getattr(args, "features", None):
        cache = load_feature_cache(args.features)
        missing = [r.id for r in records if r.id not in cache]
        if missing:
            raise UsageError(f"feature cache {args.features} lacks ids {missing[:10]}")
        return [(r, cache[r.id]) for r in records]

    pairs = []
    for record, result in zip(records, extract_multiple(records, args.workers, seed=args.seed)):
        if isinstance(result, FeatureVector):
            pairs.append((record, result))
        else:
            logger.warning("Record %s: feature extraction failed: %s", record.id, result)
    return pairs


def _require(args, *names: str) -> None:
    missing = ["--" + n.replace("_", "-") for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) {', '.join(missing)}")


def _load_records(path) -> List[UtteranceRecord]:
    records = load_manifest(path)
    if not records:
        raise UsageError(f"manifest {path} has no records")
    return records


def snapshot(args) -> dict:
    skip = {"handler", "config", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def cmd_extract(args) -> int:
    _require(args, "manifest", "out")
    records = _load_records(args.manifest)
    results = extract_multiple(records, args.workers, args.clip_seconds, args.seed)

    rows = [(r.id, fv) for r, fv in zip(records, results) if isinstance(fv, FeatureVector)]
    failures = [(r.id, str(exc)) for r, exc in zip(records, results) if not isinstance(exc, FeatureVector)]
    write_feature_cache(rows, args.out)
    with open(f"{args.out}.errors.jsonl", "w", encoding="utf-8") as handle:
        for utt_id, message in failures:
            handle.write(json.dumps({"id": utt_id, "error": message}) + "\n")
    write_config(snapshot(args), f"{args.out}.config.txt")

    for utt_id, message in failures:
        print(f"Failed {utt_id}: {message}", file=sys.stderr, flush=True)
    print(f"Extracted {len(rows)} of {len(records)} records into {args.out}")
    return EXIT_OK if rows else EXIT_FAILURE


def cmd_caption(args) -> int:
    _require(args, "manifest", "features", "out")
    policy = parse_policy(args.mode, args.max_queries)
    bank = load_template_bank(args.templates) if args.templates else DEFAULT_BANK
    records = _load_records(args.manifest)
    pairs = corpus_features(records, args)
    features = {r.id: fv for r, fv in pairs}
    thresholds = fit_thresholds(records, features)

    rng = np.random.default_rng(args.seed)
    rows, skipped = [], []
    for record in records:
        pool = caption_pool(record, features[record.id], thresholds, bank)
        try:
            rows.append((record.id, sample_caption(pool, policy, record_emotion_queries(record, bank), rng)))
        except EmptyPoolError:
            skipped.append(record.id)

    write_captions(rows, args.out)
    save_thresholds(thresholds, f"{args.out}.thresholds.json")
    write_config(snapshot(args), f"{args.out}.config.txt")
    if skipped:
        print(f"No caption under {policy.name} for: {', '.join(skipped)}", file=sys.stderr, flush=True)
    print(f"Wrote {len(rows)} captions to {args.out}")
    return EXIT_OK if rows else EXIT_FAILURE


def cmd_synth(args) -> int:
    _require(args, "out_dir")
    try:
        profiles = parse_class_spec(args.classes) if args.classes else list(DEFAULT_CLASS_PROFILES)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad --classes: {exc}") from exc
    records, _ = synthesize_corpus(profiles, args.n, np.random.default_rng(args.seed), args.out_dir)
    write_config(snapshot(args), Path(args.out_dir) / "config.txt")
    print(f"Synthesized {len(records)} utterances into {args.out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "manifest", "out_dir")
    policy = parse_policy(args.mode, args.max_queries)
    try:
        query_mode = QueryMode(args.query_mode)
        config = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, lr_encoders=args.lr_encoders,
                             lr_heads=args.lr_heads, policy=policy, seed=args.seed, query_mode=query_mode,
                             model=ModelConfig(dim=args.dim))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    records = _load_records(args.manifest)
    if args.holdout_manifest:
        train_records, holdout_records = records, _load_records(args.holdout_manifest)
    elif 0.0 < args.holdout_fraction < 1.0:
        train_records, holdout_records = split_holdout(records, args.holdout_fraction,
                                                       np.random.default_rng(args.seed))
    else:
        raise UsageError(f"--holdout-fraction must lie in (0, 1), got {args.holdout_fraction}")
    train_pairs = corpus_features(train_records, args)
    holdout_pairs = corpus_features(holdout_records, args)

    result = train(config, train_pairs, holdout_pairs)
    save_run(result, args.out_dir)
    write_config(snapshot(args), Path(args.out_dir) / "config.txt")
    print(f"Best epoch {result.best_epoch}, held-out UAR: {result.best_uar}")
    return EXIT_OK


def _parse_merge(text: Optional[str]) -> dict:
    merge = {}
    for item in filter(None, (part.strip() for part in (text or "").split(","))):
        source, sep, target = item.partition("=")
        if not sep:
            raise UsageError(f"bad --merge entry {item!r}: expected source=target")
        merge[source.strip()] = target.strip()
    return merge


def cmd_eval(args) -> int:
    _require(args, "manifest", "checkpoint", "out")
    try:
        query_mode = QueryMode(args.query_mode)
    except ValueError as exc:
        raise UsageError(f"bad --query-mode {args.query_mode!r}") from exc
    checkpoint = Path(args.checkpoint)
    if not checkpoint.is_file():
        raise UsageError(f"checkpoint {checkpoint} not found")
    model = ClapModel.load(checkpoint)
    merge = _parse_merge(args.merge)

    skip_labels = {s.strip().lower() for s in (args.skip_labels or "").split(",") if s.strip()}
    records = [r for r in _load_records(args.manifest) if r.emotion is not None]
    golds = {merge.get(r.emotion, r.emotion) for r in records if r.emotion.strip().lower() not in skip_labels}
    labels = [s.strip() for s in args.labels.split(",")] if args.labels else sorted(golds)
    offending = sorted(golds - set(labels))
    if offending:
        raise UsageError(f"gold labels not among --labels: {', '.join(offending)}")

    pairs = corpus_features(records, args)
    queries = build_label_queries(labels, model, query_mode)
    metadata = {
        "checkpoint_id": hashlib.sha256(checkpoint.read_bytes()).hexdigest()[:16],
        "dataset_id": Path(args.manifest).name,
    }
    report = evaluate(pairs, queries, model, merge=merge, skip_labels=skip_labels, metadata=metadata)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    report.write_confusion_csv(out / "confusion.csv")
    report.write_confusion_csv(out / "confusion_normalized.csv", normalized=True)
    write_config(snapshot(args), out / "config.txt")
    print(f"UAR: {report.uar}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Paralinguistic contrastive language-audio pipeline.')
    subparsers = parser.add_subparsers(dest="command", required=True)
    parser.commands = {}

    def add_command(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text)
        parser.commands[name] = sub
        sub.set_defaults(handler=handler)
        sub.add_argument('-c', '--config', type=str, default=None, help='flat key = value config file')
        sub.add_argument('--seed', type=int, default=0, help='seed for every random choice')
        sub.add_argument('-v', '--verbose', action='store_true', help='debug logging')
        return sub

    sub = add_command('extract', cmd_extract, 'extract acoustic features into a CSV cache')
    sub.add_argument('-m', '--manifest', type=str, help='line-delimited manifest')
    sub.add_argument('-o', '--out', type=str, help='feature cache CSV to write')
    sub.add_argument('-w', '--workers', type=int, default=4, help='extraction threads')
    sub.add_argument('--clip-seconds', type=float, default=0.0, help='clip or pad audio first (0 = off)')

    sub = add_command('caption', cmd_caption, 'generate one training caption per record')
    sub.add_argument('-m', '--manifest', type=str, help='line-delimited manifest')
    sub.add_argument('-f', '--features', type=str, help='feature cache CSV')
    sub.add_argument('--mode', type=str, default='rand5', help='only-emo | randN | no-emo-randN')
    sub.add_argument('--max-queries', type=int, default=None, help='override N of the mode')
    sub.add_argument('--templates', type=str, default=None, help='template bank override (JSON)')
    sub.add_argument('-o', '--out', type=str, help='captions file to write')

    sub = add_command('synth', cmd_synth, 'synthesize a labelled tone corpus')
    sub.add_argument('--classes', type=str, default=None,
                     help='name:f0lo-f0hi:amplo-amphi:durlo-durhi[:gender],... or a JSON file')
    sub.add_argument('-n', '--n', type=int, default=10, help='utterances per class')
    sub.add_argument('-o', '--out-dir', type=str, help='output directory')

    sub = add_command('train', cmd_train, 'train the dual encoder')
    sub.add_argument('-m', '--manifest', type=str, help='training manifest')
    sub.add_argument('-f', '--features', type=str, default=None, help='feature cache CSV (else extract)')
    sub.add_argument('--holdout-manifest', type=str, default=None, help='explicit held-out manifest')
    sub.add_argument('--holdout-fraction', type=float, default=0.2, help='held-out share when splitting')
    sub.add_argument('--mode', type=str, default='only-emo', help='only-emo | randN | no-emo-randN')
    sub.add_argument('--max-queries', type=int, default=None, help='override N of the mode')
    sub.add_argument('-e', '--epochs', type=int, default=50, help='training epochs')
    sub.add_argument('-b', '--batch-size', type=int, default=64, help='batch size')
    sub.add_argument('--lr-encoders', type=float, default=1e-5, help='encoder learning rate')
    sub.add_argument('--lr-heads', type=float, default=1e-3, help='projection and temperature learning rate')
    sub.add_argument('--dim', type=int, default=64, help='shared embedding dimensionality')
    sub.add_argument('--query-mode', type=str, default='templated', help='label queries for model selection')
    sub.add_argument('-w', '--workers', type=int, default=4, help='extraction threads')
    sub.add_argument('-o', '--out-dir', type=str, help='run directory')

    sub = add_command('eval', cmd_eval, 'zero-shot evaluation')
    sub.add_argument('-m', '--manifest', type=str, help='evaluation manifest')
    sub.add_argument('-k', '--checkpoint', type=str, help='checkpoint file')
    sub.add_argument('-l', '--labels', type=str, default=None, help='ordered, comma-separated class labels')
    sub.add_argument('--query-mode', type=str, default='raw', help='raw | templated')
    sub.add_argument('--merge', type=str, default=None, help='gold label merges, e.g. excited=happiness')
    sub.add_argument('--skip-labels', type=str, default=",".join(sorted(NO_AGREEMENT_LABELS)),
                     help='gold labels left out of scoring')
    sub.add_argument('-f', '--features', type=str, default=None, help='feature cache CSV (else extract)')
    sub.add_argument('-w', '--workers', type=int, default=4, help='extraction threads')
    sub.add_argument('-o', '--out', type=str, help='report directory')
    return parser


def _settings(sub: argparse.ArgumentParser) -> dict:
    """Default value of every setting a command accepts, keyed by dest."""
    return {k: v for k, v in vars(sub.parse_args([])).items() if k not in ("handler", "config")}


def _explicit_settings(argv: Sequence[str]) -> set:
    """Dests given on the command line, found by reparsing with every default replaced by a marker."""
    unset = object()
    parser = build_parser()
    for sub in parser.commands.values():
        sub.set_defaults(**{dest: unset for dest in vars(sub.parse_args([]))})
    parsed = vars(parser.parse_args(argv))
    return {dest for dest, value in parsed.items() if value is not unset}


def _config_value(sub: argparse.ArgumentParser, dest: str, default, raw: str):
    if raw == "":
        return None
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    try:
        return getattr(sub.parse_args([f"--{dest.replace('_', '-')}={raw}"]), dest)
    except SystemExit as exc:
        raise UsageError(f"bad value for {dest}: {raw!r}") from exc


def resolve_args(argv: Sequence[str]) -> argparse.Namespace:
    """Parse flags, then fill every flag not given on the command line from ``--config``."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args

    sub = parser.commands[args.command]
    defaults = _settings(sub)
    explicit = _explicit_settings(argv)
    for key, raw in read_config(args.config).items():
        dest = normalize_key(key)
        if dest not in defaults:
            raise UsageError(f"{args.config}: unknown setting {key!r} for {args.command}")
        if dest in explicit:
            continue
        try:
            setattr(args, dest, _config_value(sub, dest, defaults[dest], raw))
        except UsageError as exc:
            raise UsageError(f"{args.config}: {exc}") from exc
    return args


def main(argv: Sequence[str] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = resolve_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError) as exc:
        report_failure("configuration", exc)
        return EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.handler(args)
    except UsageError as exc:
        report_failure(args.command, exc)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        report_failure(args.command, exc)
        return EXIT_USAGE
    except (ParaclapError, OSError, ValueError) as exc:
        report_failure(args.command, exc)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
