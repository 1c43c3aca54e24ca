"""Adam training loop with seeded substreams, per-epoch logging, checkpointing and resume."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._rng import substream
from .dataio import CorpusSplit, stack_features
from .evaluation import evaluate
from .features import FeatureNormalizer
from .losses import LossBreakdown, LossWeights, composite_loss_and_grad
from .model import RGASCNet, load_checkpoint, read_checkpoint, save_checkpoint
from .relation import RelationMatrix, build_relation_matrix

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "l_scene", "l_s_by_event", "l_event", "l_e_by_scene", "total", "test_acc",
                  "test_macro_acc"]


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    shuffle: bool = True
    stop_gradient: bool = False

    def __post_init__(self):
        if not isinstance(self.loss_weights, LossWeights):
            self.loss_weights = LossWeights.of(self.loss_weights)

    def errors(self) -> list:
        def num(v):
            return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)

        def whole(v):
            return isinstance(v, int) and not isinstance(v, bool)

        errs = []
        if not whole(self.epochs) or self.epochs < 1:
            errs.append(f"epochs must be an integer >= 1, got {self.epochs!r}")
        if not whole(self.batch_size) or self.batch_size < 2:
            errs.append(f"batch_size must be an integer >= 2 (batch normalisation), got {self.batch_size!r}")
        if not num(self.learning_rate) or self.learning_rate <= 0:
            errs.append(f"learning_rate must be a number > 0, got {self.learning_rate!r}")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not num(v) or not 0 <= v < 1:
                errs.append(f"{name} must lie in [0, 1), got {v!r}")
        if not num(self.adam_eps) or self.adam_eps <= 0:
            errs.append(f"adam_eps must be a number > 0, got {self.adam_eps!r}")
        if not whole(self.seed) or self.seed < 0:
            errs.append(f"seed must be a non-negative integer, got {self.seed!r}")
        for name in ("shuffle", "stop_gradient"):
            if not isinstance(getattr(self, name), bool):
                errs.append(f"{name} must be true or false, got {getattr(self, name)!r}")
        return errs

    def validate(self):
        errs = self.errors()
        if errs:
            raise ValueError("; ".join(errs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights.as_tuple())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --- optimiser -------------------------------------------------------------------

def adam_step(params: dict, grads: dict, state: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction. ``state`` holds ``t``, ``m`` and ``v``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tensor {name!r}")
    state["t"] += 1
    t = state["t"]
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state["m"][name], state["v"][name]
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: dict, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr, self.beta1, self.beta2, self.eps = params, lr, beta1, beta2, eps
        self.state = {"t": 0, "m": {k: np.zeros_like(p) for k, p in params.items()},
                      "v": {k: np.zeros_like(p) for k, p in params.items()}}

    def step(self, grads: dict) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def tensors(self) -> dict:
        out = {f"adam.m.{k}": m for k, m in self.state["m"].items()}
        out.update({f"adam.v.{k}": v for k, v in self.state["v"].items()})
        return out

    def load_tensors(self, t: int, tensors: dict) -> None:
        self.state["t"] = t
        for k in self.params:
            self.state["m"][k][...] = tensors[f"adam.m.{k}"]
            self.state["v"][k][...] = tensors[f"adam.v.{k}"]


# --- records -----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    losses: LossBreakdown
    test_acc: float | None = None
    test_macro_acc: float | None = None
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, **self.losses.as_dict(), "test_acc": self.test_acc,
                "test_macro_acc": self.test_macro_acc, "seconds": self.seconds}

    @classmethod
    def from_dict(cls, d: dict) -> "EpochRecord":
        losses = LossBreakdown(d["l_scene"], d["l_s_by_event"], d["l_event"], d["l_e_by_scene"], d["total"])
        return cls(d["epoch"], losses, d["test_acc"], d["test_macro_acc"], d["seconds"])


@dataclass
class TrainResult:
    model: RGASCNet
    records: list
    best_epoch: int | None = None
    best_test_acc: float | None = None
    checkpoint: Path | None = None


def write_metrics_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for r in records:
            row = r.to_dict()
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])


def write_log_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


# --- training ---------------------------------------------------------------------

class _RunState:
    def __init__(self, model, cfg: TrainConfig, extra_meta=None):
        self.extra_meta = dict(extra_meta or {})
        self.adam = Adam(model.parameters(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.shuffle_rng = substream(cfg.seed, "shuffle")
        self.dropout_rng = substream(cfg.seed, "dropout")
        self.records = []
        self.best_epoch, self.best_test_acc = None, None

    def meta(self, cfg, predictor) -> dict:
        return {**self.extra_meta, "epoch": len(self.records), "train_config": cfg.to_dict(), "predictor": predictor,
                "adam_t": self.adam.state["t"],
                "rng": {"shuffle": self.shuffle_rng.bit_generator.state,
                        "dropout": self.dropout_rng.bit_generator.state},
                "records": [r.to_dict() for r in self.records],
                "best_epoch": self.best_epoch, "best_test_acc": self.best_test_acc}


def _arrays(examples):
    x = stack_features(examples)
    ys = np.array([ex.scene_index for ex in examples], dtype=np.int64)
    ye = np.stack([ex.event_probs for ex in examples])
    return x, ys, ye


def train_epoch(model, x, ys, ye, relation, cfg: TrainConfig, state: _RunState, epoch: int) -> LossBreakdown:
    """One pass over the training arrays; the last partial batch is dropped."""
    n, bs = len(x), cfg.batch_size
    order = state.shuffle_rng.permutation(n) if cfg.shuffle else np.arange(n)
    sums = np.zeros(5)
    n_batches = n // bs
    for b in range(n_batches):
        idx = order[b * bs:(b + 1) * bs]
        model.zero_grad()
        out = model.forward(x[idx], "train", state.dropout_rng)
        br, d_zs, d_ze = composite_loss_and_grad(out.scene_logits, out.event_logits, ys[idx], ye[idx], relation,
                                                 cfg.loss_weights, cfg.stop_gradient)
        if not math.isfinite(br.total):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
        model.backward(d_zs, d_ze)
        state.adam.step(model.gradients())
        sums += [br.l_scene, br.l_s_by_event, br.l_event, br.l_e_by_scene, br.total]
    return LossBreakdown(*(sums / n_batches).tolist())


def _run(model, split, relation, cfg, state, out_dir, predictor):
    x, ys, ye = _arrays(split.train)
    if len(x) < cfg.batch_size:
        raise ValueError(f"training set of {len(x)} clips is smaller than batch_size {cfg.batch_size}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for epoch in range(len(state.records) + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = train_epoch(model, x, ys, ye, relation, cfg, state, epoch)
        acc = macro = None
        if split.test:
            report = evaluate(model, split.test, relation, predictor, batch_size=cfg.batch_size)
            acc, macro = report.overall_acc, report.macro_acc
        record = EpochRecord(epoch, losses, acc, macro, time.perf_counter() - t0)
        state.records.append(record)
        logger.info("epoch %d  total %.5f  scene %.5f  event %.5f  test_acc %s", epoch, losses.total,
                    losses.l_scene, losses.l_event, "n/a" if acc is None else f"{acc:.4f}")
        if acc is not None and (state.best_test_acc is None or acc > state.best_test_acc):
            state.best_epoch, state.best_test_acc = epoch, acc
            if out_dir is not None:
                save_checkpoint(out_dir / "best.rgsc", model, state.meta(cfg, predictor))
    result = TrainResult(model, state.records, state.best_epoch, state.best_test_acc)
    if out_dir is not None:
        result.checkpoint = out_dir / "final.rgsc"
        save_checkpoint(result.checkpoint, model, state.meta(cfg, predictor), state.adam.tensors())
        write_log_jsonl(out_dir / "log.jsonl", state.records)
        write_metrics_csv(out_dir / "metrics.csv", state.records)
    return result


def _check_relation(split, relation, k, e):
    if relation is None:
        return build_relation_matrix(split.train, k, e)
    if relation.shape != (k, e):
        raise ValueError(f"relation matrix shape {relation.shape} does not match model ({k}, {e})")
    return relation


def train(model: RGASCNet, split: CorpusSplit, relation: RelationMatrix | None, cfg: TrainConfig,
          out_dir=None, predictor: str = "scene", meta: dict | None = None) -> TrainResult:
    """Train ``model`` in place for ``cfg.epochs`` epochs.

    ``relation`` must come from ``split.train``; when None it is built from it.
    Feature normalisation statistics are fitted on the training split unless
    the model already carries them. ``meta`` is copied into every checkpoint.
    """
    cfg.validate()
    split.validate(model.cfg.n_scenes, require_test=False)
    relation = _check_relation(split, relation, model.cfg.n_scenes, model.cfg.n_events)
    if model.buffers["feature_mean"].size == 0:
        norm = FeatureNormalizer().fit([ex.features.values for ex in split.train])
        model.set_normalization(norm.mean, norm.std)
    return _run(model, split, relation, cfg, _RunState(model, cfg, meta), out_dir, predictor)


def resume(checkpoint, split: CorpusSplit, cfg: TrainConfig, relation: RelationMatrix | None = None,
           out_dir=None) -> TrainResult:
    """Continue a run from a final checkpoint up to ``cfg.epochs``.

    Every setting except ``epochs`` must match the checkpointed run.
    """
    cfg.validate()
    header, _, extra = read_checkpoint(checkpoint)
    meta = header["meta"]
    if "train_config" not in meta or not extra:
        raise ValueError(f"{checkpoint}: not a resumable checkpoint (no optimiser state)")
    saved = dict(meta["train_config"])
    mine = cfg.to_dict()
    diff = sorted(k for k in mine if k != "epochs" and mine[k] != saved.get(k))
    if diff:
        raise ValueError(f"training config differs from checkpoint in: {', '.join(diff)}")
    model = load_checkpoint(checkpoint)
    own_keys = {"epoch", "train_config", "predictor", "adam_t", "rng", "records", "best_epoch", "best_test_acc"}
    state = _RunState(model, cfg, {k: v for k, v in meta.items() if k not in own_keys})
    state.adam.load_tensors(meta["adam_t"], extra)
    state.shuffle_rng.bit_generator.state = meta["rng"]["shuffle"]
    state.dropout_rng.bit_generator.state = meta["rng"]["dropout"]
    state.records = [EpochRecord.from_dict(r) for r in meta["records"]]
    state.best_epoch, state.best_test_acc = meta["best_epoch"], meta["best_test_acc"]
    if meta["epoch"] >= cfg.epochs:
        warnings.warn(f"checkpoint already at epoch {meta['epoch']} >= {cfg.epochs}; nothing to do")
        return TrainResult(model, state.records, state.best_epoch, state.best_test_acc, Path(checkpoint))
    split.validate(model.cfg.n_scenes, require_test=False)
    relation = _check_relation(split, relation, model.cfg.n_scenes, model.cfg.n_events)
    return _run(model, split, relation, cfg, state, out_dir, meta.get("predictor", "scene"))
