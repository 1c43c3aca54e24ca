"""Command-line entry point: ``rgasc {synth,features,relation,train,eval,experiment}``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (EventVocabulary, LabeledExample, SceneVocabulary, default_events, default_scenes, extract_features,
                     load_corpus, load_pseudo_labels, load_scene_labels, read_manifest, split_corpus,
                     synth_corpus, write_manifest, write_pseudo_labels, write_scene_labels)
from .features import LogMel, MelConfig, StftConfig, write_lmel, write_wav
from .losses import LossWeights
from .model import ModelConfig, RGASCNet, load_checkpoint
from .relation import build_relation_matrix, load_relation, save_relation

logger = logging.getLogger("rgasc")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Invalid configuration; maps to exit code 2."""


# --- config ----------------------------------------------------------------------------

DEFAULT_CONFIG = {
    "corpus": None,
    "features_dir": None,
    "relation": None,
    "predictor": "scene",
    "model_seed": None,
    "frontend": {"window_ms": 46.0, "overlap_fraction": 1.0 / 3.0, "fft_size": None, "window_kind": "hamming",
                 "n_mels": 64, "fmin": 50.0, "fmax": 8000.0, "log_floor": 1e-10},
    "model": {"total_blocks": 2, "shared_blocks": 2, "channels": [16, 32], "dense_dim": 64, "dropout_rate": 0.2},
    "train": {"epochs": 100, "batch_size": 16, "learning_rate": 0.001, "adam_beta1": 0.9, "adam_beta2": 0.999,
              "adam_eps": 1e-8, "seed": 0, "loss_weights": [1.0, 0.01, 0.5, 0.01], "shuffle": True,
              "stop_gradient": False},
}


def _merge(base: dict, over: dict, prefix: str, errors: list) -> dict:
    out = dict(base)
    for key, value in over.items():
        name = f"{prefix}{key}"
        if key not in base:
            errors.append(f"{name}: unknown field")
        elif isinstance(base[key], dict):
            if isinstance(value, dict):
                out[key] = _merge(base[key], value, name + ".", errors)
            else:
                errors.append(f"{name}: expected an object")
        else:
            out[key] = value
    return out


def resolve_config(raw: dict, overrides: dict) -> dict:
    """Merge a config file with flag overrides; raise UsageError listing every bad field."""
    errors = []
    if not isinstance(raw, dict):
        raise UsageError("config: top level must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, raw, "", errors)
    for dotted, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        node = cfg
        for p in parents:
            node[p] = dict(node[p])
            node = node[p]
        node[leaf] = value
    errors += config_errors(cfg)
    if errors:
        raise UsageError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def config_errors(cfg: dict) -> list:
    from .trainer import TrainConfig

    errors = []
    if not cfg["corpus"] or not isinstance(cfg["corpus"], str):
        errors.append("corpus: required path to a corpus directory")
    if cfg["predictor"] not in ("scene", "lookup"):
        errors.append(f"predictor: must be 'scene' or 'lookup', got {cfg['predictor']!r}")
    if cfg["model_seed"] is not None and not isinstance(cfg["model_seed"], int):
        errors.append("model_seed: must be an integer or null")
    try:
        stft, mel = frontend_configs(cfg["frontend"])
        stft.validate(16000)
        mel.validate(16000)
    except (TypeError, ValueError) as exc:
        errors.append(f"frontend: {exc}")
    m = cfg["model"]
    try:
        errors += [f"model: {e}" for e in ModelConfig(2, 1, **m).errors()]
    except (TypeError, ValueError) as exc:
        errors.append(f"model: {exc}")
    t = dict(cfg["train"])
    try:
        t["loss_weights"] = LossWeights.of(t["loss_weights"])
    except (TypeError, ValueError) as exc:
        errors.append(f"train.loss_weights: {exc}")
        t["loss_weights"] = LossWeights(1, 0, 0, 0)
    try:
        errors += [f"train.{e}" for e in TrainConfig(**t).errors()]
    except TypeError as exc:
        errors.append(f"train: {exc}")
    return errors


def frontend_configs(fe: dict) -> tuple[StftConfig, MelConfig]:
    stft = StftConfig(window_ms=fe["window_ms"], overlap_fraction=fe["overlap_fraction"], fft_size=fe["fft_size"],
                      window_kind=fe["window_kind"])
    mel = MelConfig(n_mels=fe["n_mels"], fmin=fe["fmin"], fmax=fe["fmax"], log_floor=fe["log_floor"])
    return stft, mel


def train_config(cfg: dict):
    from .trainer import TrainConfig

    return TrainConfig.from_dict(cfg["train"])


# --- run manifest ----------------------------------------------------------------------

def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def write_run_manifest(path, subcommand, config, seed, inputs, outputs, started) -> None:
    """Write the run record atomically next to the outputs."""
    path = Path(path)
    record = {"tool": "rgasc", "tool_version": __version__, "subcommand": subcommand, "config": config,
              "seed": seed, "inputs": {k: str(v) for k, v in inputs.items()},
              "outputs": {k: str(v) for k, v in outputs.items()}, "started": started, "finished": _now()}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


# --- subcommands -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = _now()
    out = Path(args.out)
    scenes, events = default_scenes(args.scenes), default_events(args.events)
    corpus = synth_corpus(args.seed, scenes, events, args.clips_per_scene, args.seconds, overlap=args.overlap,
                          tag_fidelity=args.tag_fidelity)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    clips = []
    for clip in corpus.clips:
        rel = f"wav/{clip.clip_id}.wav"
        write_wav(out / rel, clip)
        clips.append({"clip_id": clip.clip_id, "path": rel, "scene": scenes.names[corpus.scene_labels[clip.clip_id]]})
    # the split only looks at labels, so placeholder features suffice
    stub = [LabeledExample(c["clip_id"], LogMel(np.zeros((1, 1)), c["clip_id"]), corpus.scene_labels[c["clip_id"]],
                           corpus.pseudo_labels[c["clip_id"]]) for c in clips]
    split = split_corpus(stub, args.train_ratio, args.seed)
    train_ids = {ex.clip_id for ex in split.train}
    for c in clips:
        c["split"] = "train" if c["clip_id"] in train_ids else "test"
    write_scene_labels(out / "scenes.csv", corpus.scene_labels, scenes)
    write_pseudo_labels(out / "pseudo_labels.jsonl", corpus.pseudo_labels)
    params = {"clips_per_scene": args.clips_per_scene, "seconds": args.seconds, "overlap": args.overlap,
              "tag_fidelity": args.tag_fidelity, "train_ratio": args.train_ratio}
    write_manifest(out / "manifest.json", seed=args.seed, scenes=scenes, events=events, clips=clips,
                   extra={"generator": params})
    write_run_manifest(out / "run_manifest.json", "synth",
                       {"scenes": args.scenes, "events": args.events, **params}, args.seed, {},
                       {"corpus": out}, started)
    print(f"wrote {len(clips)} clips to {out}")
    return EXIT_OK


def cmd_features(args) -> int:
    started = _now()
    src, out = Path(args.inp), Path(args.out)
    if not src.is_dir():
        raise FileNotFoundError(f"input directory not found: {src}")
    fe = {k: getattr(args, k) for k in DEFAULT_CONFIG["frontend"]}
    stft, mel = frontend_configs(fe)
    try:
        stft.validate(16000)
        mel.validate(16000)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    wavs = sorted(src.rglob("*.wav"))
    out.mkdir(parents=True, exist_ok=True)
    todo = {}
    for wav in wavs:
        target = out / f"{wav.stem}.lmel"
        if args.force or not target.exists() or target.stat().st_mtime < wav.stat().st_mtime:
            todo[wav.stem] = wav
    failures = []
    done = 0
    # extract one at a time in small groups so a single bad file is reported by name
    for clip_id, wav in todo.items():
        try:
            feats = extract_features({clip_id: wav}, stft, mel)
        except (ValueError, OSError, EOFError) as exc:
            failures.append(f"{wav}: {exc}")
            continue
        write_lmel(out / f"{clip_id}.lmel", feats[clip_id])
        done += 1
    write_run_manifest(out / "run_manifest.json", "features", {"frontend": fe, "force": args.force}, None,
                       {"wav_dir": src}, {"features_dir": out}, started)
    print(f"{done} computed, {len(wavs) - len(todo)} up to date, {len(failures)} failed")
    if failures:
        for f in failures:
            print(f"error: unreadable WAV {f}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _scene_names_from_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return sorted({r[1] for r in rows[1:] if len(r) == 2})


def cmd_relation(args) -> int:
    started = _now()
    manifest = read_manifest(args.split)
    scenes = SceneVocabulary(manifest.get("scenes") or _scene_names_from_csv(args.scenes))
    labels = load_scene_labels(args.scenes, scenes)
    if manifest.get("events"):
        events = EventVocabulary(manifest["events"])
    else:
        with open(args.pseudo) as fh:
            first = json.loads(fh.readline())
        events = default_events(len(first["probs"]))
    pseudo = load_pseudo_labels(args.pseudo, events)
    train = []
    for clip in manifest["clips"]:
        if clip.get("split") != "train":
            continue
        cid = clip["clip_id"]
        if cid not in labels or cid not in pseudo:
            raise ValueError(f"training clip {cid!r} lacks a scene label or pseudo label")
        train.append(LabeledExample(cid, LogMel(np.zeros((1, 1)), cid), labels[cid], pseudo[cid]))
    relation = build_relation_matrix(train, len(scenes), len(events), scenes.names, events.names)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_relation(out, relation)
    write_run_manifest(out.with_name(out.name + ".run_manifest.json"), "relation", {}, None,
                       {"pseudo": args.pseudo, "scenes": args.scenes, "split": args.split},
                       {"relation": out}, started)
    print(f"wrote {relation.shape[0]}x{relation.shape[1]} relation matrix to {out}")
    return EXIT_OK


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from exc


def _train_overrides(args) -> dict:
    weights = None
    if getattr(args, "loss_weights", None) is not None:
        try:
            weights = [float(v) for v in args.loss_weights.split(",")]
        except ValueError as exc:
            raise UsageError(f"--loss-weights: {exc}") from exc
    return {"corpus": getattr(args, "corpus", None), "train.epochs": args.epochs, "train.seed": args.seed,
            "train.batch_size": args.batch_size, "train.learning_rate": getattr(args, "learning_rate", None),
            "train.loss_weights": weights}


def _load_split(cfg):
    stft, mel = frontend_configs(cfg["frontend"])
    return load_corpus(cfg["corpus"], stft, mel, cfg["features_dir"])


def cmd_train(args) -> int:
    from .trainer import train

    started = _now()
    cfg = resolve_config(_load_config_file(args.config), _train_overrides(args))
    tcfg = train_config(cfg)
    out = Path(args.out)
    corpus = _load_split(cfg)
    k, e = len(corpus.scenes), len(corpus.events)
    if cfg["relation"]:
        relation = load_relation(cfg["relation"])
    else:
        relation = build_relation_matrix(corpus.split.train, k, e, corpus.scenes.names, corpus.events.names)
    out.mkdir(parents=True, exist_ok=True)
    save_relation(out / "relation.rsem", relation)
    mcfg = ModelConfig(k, e, **cfg["model"])
    model = RGASCNet(mcfg, tcfg.seed if cfg["model_seed"] is None else cfg["model_seed"])
    model.check_input((1,) + corpus.split.train[0].features.values.shape)
    meta = {"frontend": cfg["frontend"], "scenes": list(corpus.scenes.names), "events": list(corpus.events.names)}
    result = train(model, corpus.split, relation, tcfg, out, cfg["predictor"], meta=meta)
    last = result.records[-1]
    write_run_manifest(out / "run_manifest.json", "train", cfg, tcfg.seed, {"corpus": cfg["corpus"]},
                       {"checkpoint": out / "final.rgsc", "best": out / "best.rgsc", "log": out / "log.jsonl",
                        "metrics": out / "metrics.csv", "relation": out / "relation.rsem"}, started)
    print(f"trained {len(result.records)} epochs; final loss {last.losses.total:.5f}; "
          f"test acc {last.test_acc}; best epoch {result.best_epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate, export_embeddings, write_report
    from .model import read_checkpoint

    started = _now()
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    header, _, _ = read_checkpoint(ckpt)
    meta = header.get("meta", {})
    model = load_checkpoint(ckpt)
    fe = {**DEFAULT_CONFIG["frontend"], **meta.get("frontend", {})}
    stft, mel = frontend_configs(fe)
    corpus = load_corpus(args.test, stft, mel, args.features_dir)
    if args.split == "train":
        examples = corpus.split.train
    elif args.split == "test":
        examples = corpus.split.test
    else:
        examples = corpus.split.train + corpus.split.test
    predictor = meta.get("predictor", "scene")
    rel_path = Path(args.relation) if args.relation else ckpt.parent / "relation.rsem"
    relation = load_relation(rel_path) if rel_path.exists() else None
    if predictor == "lookup" and relation is None:
        raise FileNotFoundError(f"lookup predictor needs a relation matrix; {rel_path} not found")
    report = evaluate(model, examples, relation, predictor)
    out = Path(args.out) if args.out else ckpt.parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    names = list(corpus.scenes.names)
    write_report(out / "report", report, names)
    outputs = {"report_json": out / "report.json", "report_csv": out / "report.csv"}
    if args.embeddings:
        export_embeddings(model, examples, out / "embeddings.jsonl", names)
        outputs["embeddings"] = out / "embeddings.jsonl"
    write_run_manifest(out / "run_manifest.json", "eval",
                       {"split": args.split, "predictor": predictor, "frontend": fe, "embeddings": args.embeddings},
                       None, {"checkpoint": ckpt, "corpus": args.test, "relation": rel_path}, outputs, started)
    print(f"overall_acc {report.overall_acc:.4f}  macro_acc {report.macro_acc:.4f}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .evaluation import run_presets, lambda_presets, ABLATION_PRESETS, best_row, shared_block_presets

    started = _now()
    cfg = resolve_config(_load_config_file(args.config), _train_overrides(args))
    tcfg = train_config(cfg)
    corpus = _load_split(cfg)
    k, e = len(corpus.scenes), len(corpus.events)
    relation = build_relation_matrix(corpus.split.train, k, e, corpus.scenes.names, corpus.events.names)
    mcfg = ModelConfig(k, e, **cfg["model"])
    if args.suite == "ablation":
        presets = ABLATION_PRESETS
    elif args.suite == "lambda":
        presets = lambda_presets()
    else:
        presets = shared_block_presets(mcfg.total_blocks, tcfg.loss_weights)
    out = Path(args.out)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = run_presets(presets, corpus.split, relation, mcfg, tcfg, out, seeds=seeds, model_seed=cfg["model_seed"])
    write_run_manifest(out / "run_manifest.json", "experiment", {**cfg, "suite": args.suite, "seeds": seeds},
                       tcfg.seed, {"corpus": cfg["corpus"]}, {"suite_csv": out / "suite.csv"}, started)
    for row in rows:
        print(f"{row['preset']:<28} seed {row['seed']}  overall {row['overall_acc']:.4f}  macro {row['macro_acc']:.4f}")
    if args.suite == "lambda":
        print(f"best: {best_row(rows)['preset']}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------

def _int_at_least(lo):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
        if v < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}, got {v}")
        return v
    return parse


def _float_in(lo, hi, name="value"):
    def parse(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
        if not lo <= v <= hi:
            raise argparse.ArgumentTypeError(f"{name} must lie in [{lo}, {hi}], got {v}")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgasc", description="Relation-guided acoustic scene classification.")
    p.add_argument("--version", action="version", version=f"rgasc {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress per-epoch lines")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scenes", type=_int_at_least(2), default=10, help="number of scenes (at least 2)")
    s.add_argument("--events", type=_int_at_least(1), default=527, help="number of events")
    s.add_argument("--clips-per-scene", type=_int_at_least(2), default=10)
    s.add_argument("--seconds", type=_float_in(1.0, 600.0, "--seconds"), default=10.0)
    s.add_argument("--overlap", type=_float_in(0.0, 1.0, "--overlap"), default=0.5,
                   help="fraction of active events shared by all scenes")
    s.add_argument("--tag-fidelity", dest="tag_fidelity", type=_float_in(0.0, 1.0, "--tag-fidelity"), default=0.0,
                   help="how far pseudo labels follow the events present in each clip (0 = scene profile only)")
    s.add_argument("--train-ratio", type=_float_in(0.0, 1.0, "--train-ratio"), default=0.7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("features", help="extract log-mel features from WAV files")
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--out", required=True)
    fe = DEFAULT_CONFIG["frontend"]
    f.add_argument("--window-ms", dest="window_ms", type=float, default=fe["window_ms"])
    f.add_argument("--overlap-fraction", dest="overlap_fraction", type=float, default=fe["overlap_fraction"])
    f.add_argument("--fft-size", dest="fft_size", type=int, default=None)
    f.add_argument("--window-kind", dest="window_kind", choices=["hamming", "rectangular"], default="hamming")
    f.add_argument("--n-mels", dest="n_mels", type=int, default=fe["n_mels"])
    f.add_argument("--fmin", type=float, default=fe["fmin"])
    f.add_argument("--fmax", type=float, default=fe["fmax"])
    f.add_argument("--log-floor", dest="log_floor", type=float, default=fe["log_floor"])
    f.add_argument("--force", action="store_true", help="recompute outputs that are up to date")
    f.set_defaults(func=cmd_features)

    r = sub.add_parser("relation", help="build the scene-event relation matrix from the training split")
    r.add_argument("--pseudo", required=True)
    r.add_argument("--scenes", required=True)
    r.add_argument("--split", required=True, help="corpus manifest with per-clip split membership")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_relation)

    def train_flags(q, corpus_required):
        q.add_argument("--config", help="JSON config; flags override its values")
        q.add_argument("--corpus", required=corpus_required)
        q.add_argument("--out", required=True)
        q.add_argument("--epochs", type=int)
        q.add_argument("--seed", type=int)
        q.add_argument("--batch-size", dest="batch_size", type=int)
        q.add_argument("--learning-rate", dest="learning_rate", type=float)
        q.add_argument("--loss-weights", dest="loss_weights", help="four comma-separated weights")

    t = sub.add_parser("train", help="train a model")
    train_flags(t, False)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test", required=True, help="corpus directory")
    e.add_argument("--features-dir", dest="features_dir")
    e.add_argument("--split", choices=["test", "train", "all"], default="test")
    e.add_argument("--relation", help="relation file (default: relation.rsem beside the checkpoint)")
    e.add_argument("--out")
    e.add_argument("--embeddings", action="store_true", help="also export scene-tower embeddings")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run an experiment suite")
    x.add_argument("--suite", required=True, choices=["ablation", "lambda", "shared-blocks"])
    train_flags(x, True)
    x.add_argument("--seeds", help="comma-separated training seeds (default: the config seed)")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stdout)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rgasc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, EOFError, KeyError, FloatingPointError) as exc:
        msg = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
        print(f"rgasc {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
