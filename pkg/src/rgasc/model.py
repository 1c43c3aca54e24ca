"""Two-tower scene/event network: shared conv trunk, private towers, softmax and sigmoid heads."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._rng import substream
from .nn import ConvBlock, ConvBlockConfig, Dense, Dropout, GlobalAvgPool, Module, ReLU, pooled_size, sigmoid, softmax

CHECKPOINT_MAGIC = b"RGSC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_scenes: int
    n_events: int
    total_blocks: int = 6
    shared_blocks: int = 2
    channels: list = field(default_factory=lambda: [64, 128, 256, 512, 512, 512])
    dense_dim: int = 512
    dropout_rate: float = 0.2

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]

    def errors(self) -> list:
        errs = []
        if self.n_scenes < 2:
            errs.append("n_scenes must be >= 2")
        if self.n_events < 1:
            errs.append("n_events must be >= 1")
        if self.total_blocks < 1:
            errs.append("total_blocks must be >= 1")
        if not 0 <= self.shared_blocks <= self.total_blocks:
            errs.append(f"shared_blocks must lie in [0, {self.total_blocks}], got {self.shared_blocks}")
        if len(self.channels) != self.total_blocks:
            errs.append(f"channels needs {self.total_blocks} entries, got {len(self.channels)}")
        if any(c < 1 for c in self.channels):
            errs.append("channel counts must be >= 1")
        if self.dense_dim < 1:
            errs.append("dense_dim must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            errs.append("dropout_rate must lie in [0, 1)")
        return errs

    def validate(self):
        errs = self.errors()
        if errs:
            raise ValueError("; ".join(errs))

    @property
    def private_blocks(self) -> int:
        return self.total_blocks - self.shared_blocks

    @classmethod
    def desk(cls, n_scenes, n_events, shared_blocks=2, **kw) -> "ModelConfig":
        kw.setdefault("total_blocks", 2)
        kw.setdefault("channels", [min(16 * 2 ** i, 64) for i in range(kw["total_blocks"])])
        kw.setdefault("dense_dim", 64)
        return cls(n_scenes, n_events, shared_blocks=shared_blocks, **kw)


@dataclass
class ModelOutput:
    scene_logits: np.ndarray
    event_logits: np.ndarray
    scene_probs: np.ndarray      # (batch, n_scenes), rows sum to 1
    event_probs: np.ndarray      # (batch, n_events), in (0, 1)
    scene_embedding: np.ndarray  # (batch, dense_dim), pre-dropout


class _Tower(Module):
    def __init__(self, blocks, in_dim, dense_dim, n_out, rate, rng, dtype):
        super().__init__()
        self.blocks = [self.add(f"block{i}", b) for i, b in enumerate(blocks)]
        self.gpool = GlobalAvgPool()
        self.drop_pool = Dropout(rate)
        self.dense = self.add("dense", Dense(in_dim, dense_dim, rng, dtype))
        self.relu = ReLU()
        self.drop_dense = Dropout(rate)
        self.head = self.add("head", Dense(dense_dim, n_out, rng, dtype))

    def forward(self, h, train, rng):
        for block in self.blocks:
            h = block.forward(h, train)
        h = self.drop_pool.forward(self.gpool.forward(h, train), train, rng)
        emb = self.relu.forward(self.dense.forward(h, train), train)
        logits = self.head.forward(self.drop_dense.forward(emb, train, rng), train)
        return logits, emb

    def backward(self, dlogits):
        d = self.drop_dense.backward(self.head.backward(dlogits))
        d = self.dense.backward(self.relu.backward(d))
        d = self.gpool.backward(self.drop_pool.backward(d))
        for block in reversed(self.blocks):
            d = block.backward(d)
        return d


class RGASCNet(Module):
    """Input (batch, frames, mels) log-mels -> scene softmax and event sigmoid outputs.

    The first ``shared_blocks`` conv blocks form a trunk consumed by both
    towers; each tower owns the remaining blocks, a dense layer and its head.
    Per-band feature standardisation is applied at the input.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg, self.seed, self.dtype = cfg, seed, np.dtype(dtype)
        rng = substream(seed, "init")
        chans = [1] + list(cfg.channels)
        n = cfg.shared_blocks

        def make(i):
            return ConvBlock(ConvBlockConfig(chans[i], chans[i + 1]), rng, dtype)

        self.shared = [self.add(f"shared.{i}", make(i)) for i in range(n)]
        towers_in = chans[-1]
        self.scene_tower = self.add("scene", _Tower([make(i) for i in range(n, cfg.total_blocks)], towers_in,
                                                    cfg.dense_dim, cfg.n_scenes, cfg.dropout_rate, rng, dtype))
        self.event_tower = self.add("event", _Tower([make(i) for i in range(n, cfg.total_blocks)], towers_in,
                                                    cfg.dense_dim, cfg.n_events, cfg.dropout_rate, rng, dtype))
        self.buffers["feature_mean"] = np.zeros(0, dtype=dtype)
        self.buffers["feature_std"] = np.zeros(0, dtype=dtype)
        self._trunk_out = None
        self.meta = {}

    # -- normalisation ---------------------------------------------------------
    def set_normalization(self, mean, std):
        self.buffers["feature_mean"] = np.asarray(mean, dtype=self.dtype).copy()
        self.buffers["feature_std"] = np.asarray(std, dtype=self.dtype).copy()

    def check_input(self, shape):
        if len(shape) != 3:
            raise ValueError(f"expected input of shape (batch, frames, mels), got {shape}")
        need = 2 ** self.cfg.total_blocks
        if shape[1] < need or shape[2] < need:
            raise ValueError(f"input of {shape[1]}x{shape[2]} is too small for {self.cfg.total_blocks} "
                             f"poolings (each side needs >= {need})")

    def _prepare(self, x):
        x = np.asarray(x)
        self.check_input(x.shape)
        x = x.astype(self.dtype, copy=False)
        mean, std = self.buffers["feature_mean"], self.buffers["feature_std"]
        if mean.size:
            x = (x - mean) / std
        return np.ascontiguousarray(x[..., None])

    # -- passes ------------------------------------------------------------------
    def forward(self, x, mode="eval", rng=None) -> ModelOutput:
        train = mode == "train"
        if train and self.cfg.dropout_rate > 0 and rng is None:
            raise ValueError("train-mode forward with dropout needs an rng")
        h = self._prepare(x)
        for block in self.shared:
            h = block.forward(h, train)
        self._trunk_out = h
        zs, emb = self.scene_tower.forward(h, train, rng)
        ze, _ = self.event_tower.forward(h, train, rng)
        return ModelOutput(zs, ze, softmax(zs), sigmoid(ze), emb)

    def backward(self, d_scene_logits, d_event_logits):
        """Write gradients for every parameter; returns nothing."""
        d = self.scene_tower.backward(np.asarray(d_scene_logits, dtype=self.dtype))
        d = d + self.event_tower.backward(np.asarray(d_event_logits, dtype=self.dtype))
        for block in reversed(self.shared):
            d = block.backward(d)

    def parameters(self) -> dict:
        return {name: p for name, p, _ in self.named_parameters()}

    def gradients(self) -> dict:
        return {name: g for name, _, g in self.named_parameters()}

    def state_tensors(self) -> dict:
        """Parameters then buffers, in declaration order."""
        out = {name: p for name, p, _ in self.named_parameters()}
        out.update({name: b for name, b in self.named_buffers()})
        return out

    def load_state_tensors(self, tensors: dict):
        own = self.state_tensors()
        missing = set(own) - set(tensors)
        if missing:
            raise ValueError(f"checkpoint lacks tensors {sorted(missing)[:5]}")
        for name, target in own.items():
            src = np.asarray(tensors[name])
            if name in ("feature_mean", "feature_std"):
                self.buffers[name] = src.astype(self.dtype).copy()
                continue
            if src.shape != target.shape:
                raise ValueError(f"tensor {name}: checkpoint shape {src.shape} != model shape {target.shape}")
            target[...] = src

    def n_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form trainable-parameter count for a configuration."""
    chans = [1] + list(cfg.channels)

    def block(cin, cout):
        return (9 * cin * cout + cout) + (9 * cout * cout + cout) + 4 * cout  # two convs + two BNs

    shared = sum(block(chans[i], chans[i + 1]) for i in range(cfg.shared_blocks))
    private = sum(block(chans[i], chans[i + 1]) for i in range(cfg.shared_blocks, cfg.total_blocks))
    dense = chans[-1] * cfg.dense_dim + cfg.dense_dim
    heads = (cfg.dense_dim + 1) * cfg.n_scenes + (cfg.dense_dim + 1) * cfg.n_events
    return shared + 2 * (private + dense) + heads


def output_spatial_size(frames: int, mels: int, blocks: int) -> tuple:
    for _ in range(blocks):
        frames, mels = pooled_size(frames), pooled_size(mels)
    return frames, mels


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> RGASCNet:
    return RGASCNet(cfg, seed, dtype)


# --- checkpoints ------------------------------------------------------------------

def _write_tensor(fh, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_tensor(blob, offset):
    (ndim,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    shape = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
    return arr, offset + 4 * count


def save_checkpoint(path, model: RGASCNet, meta: dict | None = None, extra_tensors: dict | None = None) -> None:
    """Header, JSON blob (config + ``meta``), then float32 tensors with shape headers.

    ``extra_tensors`` (e.g. optimiser moments) follow the model tensors and
    are listed by name in the blob.
    """
    tensors = model.state_tensors()
    extra = dict(extra_tensors or {})
    header = {"model_config": asdict(model.cfg), "seed": model.seed, "tensors": list(tensors),
              "extra_tensors": list(extra), "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for arr in list(tensors.values()) + list(extra.values()):
            _write_tensor(fh, arr)
    tmp.replace(path)


def read_checkpoint(path):
    """Return ``(header, tensors, extra_tensors)`` without building a model."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an RGSC checkpoint")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + n])
    offset = 12 + n
    tensors, extra = {}, {}
    for name in header["tensors"]:
        tensors[name], offset = _read_tensor(blob, offset)
    for name in header["extra_tensors"]:
        extra[name], offset = _read_tensor(blob, offset)
    if offset != len(blob):
        raise ValueError(f"{path}: trailing or missing bytes")
    return header, tensors, extra


def load_checkpoint(path, expect: ModelConfig | None = None, dtype=np.float32) -> RGASCNet:
    header, tensors, _ = read_checkpoint(path)
    cfg = ModelConfig(**header["model_config"])
    if expect is not None and asdict(expect) != asdict(cfg):
        diff = [k for k in asdict(cfg) if asdict(cfg)[k] != asdict(expect)[k]]
        raise ValueError(f"{path}: checkpoint config differs in {diff}")
    model = RGASCNet(cfg, header["seed"], dtype)
    model.load_state_tensors(tensors)
    model.meta = header["meta"]
    return model
