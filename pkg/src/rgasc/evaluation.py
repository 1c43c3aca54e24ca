"""Accuracy reports, experiment presets and suites, embedding export."""

from __future__ import annotations

import csv
import json
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import stack_features
from .losses import BEST_REPORTED, PURE_ASC, LossWeights
from .relation import build_relation_matrix, infer_scene_from_event


@dataclass
class EvalReport:
    overall_acc: float
    macro_acc: float
    per_class_acc: list
    confusion: np.ndarray  # rows = true scene, cols = predicted scene

    def to_dict(self, scene_names=None) -> dict:
        d = {"overall_acc": self.overall_acc, "macro_acc": self.macro_acc,
             "per_class_acc": self.per_class_acc, "confusion": self.confusion.tolist()}
        if scene_names is not None:
            d["scenes"] = list(scene_names)
        return d


def report_from_predictions(y_true, y_pred, k: int) -> EvalReport:
    y_true, y_pred = np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty test set")
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    rows = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(rows > 0, np.diag(confusion) / np.maximum(rows, 1), np.nan)
    present = np.flatnonzero(rows > 0)
    # exact rational mean, so equal accuracies compare equal whatever the per-class split
    macro = sum(Fraction(int(confusion[j, j]), int(rows[j])) for j in present) / len(present)
    return EvalReport(float(np.trace(confusion) / confusion.sum()), float(macro),
                      [None if np.isnan(a) else float(a) for a in per_class], confusion)


def predict_scene_scores(model, x, relation=None, predictor="scene", batch_size=64) -> np.ndarray:
    """Scene scores for each clip; ``lookup`` ignores the scene head and uses events @ relation.T."""
    if predictor not in ("scene", "lookup"):
        raise ValueError(f"unknown predictor {predictor!r}")
    if predictor == "lookup" and relation is None:
        raise ValueError("the lookup predictor needs a relation matrix")
    scores = []
    for start in range(0, len(x), batch_size):
        out = model.forward(x[start:start + batch_size], "eval")
        if predictor == "scene":
            scores.append(out.scene_probs.astype(np.float64))
        else:
            scores.append(infer_scene_from_event(out.event_probs, relation))
    return np.concatenate(scores)


def evaluate(model, examples, relation=None, predictor="scene", batch_size=64) -> EvalReport:
    if not examples:
        raise ValueError("cannot evaluate an empty test set")
    scores = predict_scene_scores(model, stack_features(examples), relation, predictor, batch_size)
    y_true = [ex.scene_index for ex in examples]
    return report_from_predictions(y_true, scores.argmax(axis=1), model.cfg.n_scenes)


def write_report(path_stem, report: EvalReport, scene_names=None) -> None:
    path_stem = Path(path_stem)
    Path(str(path_stem) + ".json").write_text(json.dumps(report.to_dict(scene_names), indent=2) + "\n")
    names = list(scene_names) if scene_names is not None else [str(j) for j in range(len(report.per_class_acc))]
    with open(str(path_stem) + ".csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene", "accuracy", "support"] + [f"pred:{n}" for n in names])
        for j, name in enumerate(names):
            w.writerow([name, report.per_class_acc[j], int(report.confusion[j].sum())] + report.confusion[j].tolist())
        w.writerow(["overall", report.overall_acc, int(report.confusion.sum())])
        w.writerow(["macro", report.macro_acc, int(report.confusion.sum())])


def export_embeddings(model, examples, path, scene_names=None, batch_size=64) -> int:
    """Write one JSON line per clip with its penultimate scene-tower vector."""
    x = stack_features(examples)
    n = 0
    with open(path, "w") as fh:
        for start in range(0, len(x), batch_size):
            out = model.forward(x[start:start + batch_size], "eval")
            for ex, emb, probs in zip(examples[start:start + batch_size], out.scene_embedding, out.scene_probs):
                pred = int(np.argmax(probs))
                fh.write(json.dumps({
                    "clip_id": ex.clip_id,
                    "true_scene": scene_names[ex.scene_index] if scene_names else ex.scene_index,
                    "predicted_scene": scene_names[pred] if scene_names else pred,
                    "embedding": [float(v) for v in emb],
                }) + "\n")
                n += 1
    return n


# --- experiment presets ---------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    weights: LossWeights
    shared_blocks: int | None = None
    predictor: str = "scene"
    description: str = ""


ABLATION_PRESETS = (
    ExperimentPreset("ablation1_puASC", PURE_ASC, description="scene loss only (pure ASC)"),
    ExperimentPreset("ablation2_lookup", LossWeights(0, 0, 1, 0), predictor="lookup",
                     description="event loss only; scenes from event predictions @ relation.T"),
    ExperimentPreset("ablation3_scene_event", LossWeights(1, 0, 1, 0), description="scene + event"),
    ExperimentPreset("ablation4_relation_only", LossWeights(0, 1, 0, 1), description="relation-guided terms only"),
    ExperimentPreset("ablation5_plus_e_by_scene", LossWeights(1, 0, 1, 1), description="scene + event + e_by_scene"),
    ExperimentPreset("ablation6_plus_s_by_event", LossWeights(1, 1, 1, 0), description="scene + s_by_event + event"),
)

LAMBDA_SWEEP = tuple(LossWeights(*w) for w in (
    (1, 0, 1, 0.01),
    (1, 0, 0.5, 0.01),
    (1, 0.1, 1, 0.1),
    (1, 0.1, 0.1, 0.1),
    (1, 0.1, 0.5, 0.1),
    (1, 0.01, 0.5, 0.01),
    (1, 0.01, 0.01, 0.01),
    (1, 0.001, 0.01, 0.001),
))

TABLE_COLUMNS = ["preset", "seed", "shared_blocks", "lambda1", "lambda2", "lambda3", "lambda4", "predictor",
                 "overall_acc", "macro_acc", "best_epoch", "best_test_acc"]


def lambda_presets(weights_list=None) -> list:
    weights_list = LAMBDA_SWEEP if weights_list is None else [LossWeights.of(w) for w in weights_list]
    return [ExperimentPreset(f"lambda{i + 1}", w, description="loss-weight sweep row")
            for i, w in enumerate(weights_list)]


def shared_block_presets(total_blocks: int, weights=BEST_REPORTED) -> list:
    return [ExperimentPreset(f"shared{n}", LossWeights.of(weights), shared_blocks=n,
                             description=f"{n} of {total_blocks} blocks shared") for n in range(total_blocks + 1)]


def run_presets(presets, split, relation, model_cfg, train_cfg, out_dir=None, seeds=None, model_seed=None) -> list:
    """Train and evaluate one model per (preset, seed); returns table rows.

    ``relation`` defaults to the one built from ``split.train``.
    """
    from dataclasses import replace

    from .model import RGASCNet
    from .trainer import train

    names = [p.name for p in presets]
    if len(set(names)) != len(names):
        raise ValueError("preset names must be unique within a suite")
    seeds = [train_cfg.seed] if seeds is None else list(seeds)
    if relation is None:
        relation = build_relation_matrix(split.train, model_cfg.n_scenes, model_cfg.n_events)
    rows = []
    for preset in presets:
        for seed in seeds:
            mcfg = replace(model_cfg, shared_blocks=preset.shared_blocks) if preset.shared_blocks is not None \
                else model_cfg
            tcfg = replace(train_cfg, seed=seed, loss_weights=preset.weights)
            model = RGASCNet(mcfg, seed if model_seed is None else model_seed)
            run_dir = None
            if out_dir is not None:
                run_dir = Path(out_dir) / (preset.name if len(seeds) == 1 else f"{preset.name}/seed{seed}")
            result = train(model, split, relation, tcfg, run_dir, predictor=preset.predictor)
            report = evaluate(model, split.test, relation, preset.predictor, train_cfg.batch_size)
            w = preset.weights.as_tuple()
            rows.append({"preset": preset.name, "seed": seed, "shared_blocks": mcfg.shared_blocks,
                         "lambda1": w[0], "lambda2": w[1], "lambda3": w[2], "lambda4": w[3],
                         "predictor": preset.predictor, "overall_acc": report.overall_acc,
                         "macro_acc": report.macro_acc, "best_epoch": result.best_epoch,
                         "best_test_acc": result.best_test_acc})
    if out_dir is not None:
        write_table(Path(out_dir) / "suite.csv", rows)
    return rows


def write_table(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def run_ablation_suite(split, relation, model_cfg, train_cfg, out_dir=None) -> list:
    return run_presets(ABLATION_PRESETS, split, relation, model_cfg, train_cfg, out_dir)


def best_row(rows, key="macro_acc") -> dict:
    """Highest-scoring row; ties go to the earliest row."""
    return max(rows, key=lambda r: (r[key], -rows.index(r)))


def run_lambda_sweep(split, relation, model_cfg, train_cfg, weights_list=None, out_dir=None):
    rows = run_presets(lambda_presets(weights_list), split, relation, model_cfg, train_cfg, out_dir)
    return rows, best_row(rows)


def run_shared_block_sweep(split, relation, model_cfg, train_cfg, out_dir=None, weights=BEST_REPORTED) -> list:
    return run_presets(shared_block_presets(model_cfg.total_blocks, weights), split, relation, model_cfg,
                       train_cfg, out_dir)


SUITES = {"ablation": run_ablation_suite, "lambda": run_lambda_sweep, "shared-blocks": run_shared_block_sweep}


@dataclass
class SeedComparison:
    rows: list
    wins: int = 0
    mean_baseline: float = 0.0
    mean_candidate: float = 0.0
    per_seed: list = field(default_factory=list)


def compare_over_seeds(split, relation, model_cfg, train_cfg, seeds, baseline=PURE_ASC, candidate=BEST_REPORTED,
                       out_dir=None) -> SeedComparison:
    """Train baseline and candidate weightings per seed and count candidate wins on macro accuracy."""
    presets = [ExperimentPreset("puASC", LossWeights.of(baseline)),
               ExperimentPreset("RGASC", LossWeights.of(candidate))]
    rows = run_presets(presets, split, relation, model_cfg, train_cfg, out_dir, seeds=seeds)
    base = {r["seed"]: r["macro_acc"] for r in rows if r["preset"] == "puASC"}
    cand = {r["seed"]: r["macro_acc"] for r in rows if r["preset"] == "RGASC"}
    per_seed = [(s, base[s], cand[s]) for s in seeds]
    return SeedComparison(rows, sum(c >= b for _, b, c in per_seed), float(np.mean(list(base.values()))),
                          float(np.mean(list(cand.values()))), per_seed)
