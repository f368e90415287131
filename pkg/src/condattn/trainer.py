"""Mini-batch Adam training and bit-exact checkpoints.

Checkpoint layout (little-endian)::

    "CATC" u32 version
    u32 n + n bytes   TrainConfig as key=value lines (UTF-8)
    tensor table      model parameters and batch-norm buffers
    u64 t, tensor table m, tensor table v     Adam state
    u32 n + n bytes   rng state (JSON)
    u32 epoch

    tensor table: u32 count, then per tensor
        u32 n + name, u32 rank, rank x u32 dims, f64 payload
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .backbone import BackboneConfig, desk_config, full_scale_config, tiny_config
from .dataset import CaptionDataset, GlyphDataset, crop_batch, CROP
from .models import Model, ModelConfig, pad_captions

CKPT_MAGIC = b"CATC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TaskMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    task: str = "recognition"
    scales: str = "att1"
    lr: float = 1e-4
    lr_decay: float = 1.0  # multiplicative, applied once per finished epoch
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    lam: float = 1.0
    preset: str = "desk"  # desk | tiny | full | caption
    hidden: int = 64
    fc_dim: int = 64
    embed_dim: int = 64
    batchnorm: bool = True
    dropout_first: float = 0.3
    dropout_rest: float = 0.4
    in_channels: int = 1
    input_hw: int = CROP
    vocab_size: int = 12

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_kv(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={repr(v) if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_kv(cls, text: str) -> dict:
        """Only the keys present in ``text``, typed like the defaults."""
        defaults = cls()
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not hasattr(defaults, key):
                raise KeyError(f"unknown config key {key!r}")
            values[key] = parse_value(getattr(defaults, key), raw)
        return values

    @classmethod
    def from_kv(cls, text: str) -> "TrainConfig":
        return cls(**cls.parse_kv(text))

    def backbone(self) -> BackboneConfig:
        kw = dict(
            fc_dim=self.fc_dim,
            input_hw=self.input_hw,
            in_channels=self.in_channels,
            use_batchnorm=self.batchnorm,
            dropout_first=self.dropout_first,
            dropout_rest=self.dropout_rest,
        )
        if self.preset == "full":
            return full_scale_config(**kw)
        if self.preset == "tiny":
            return tiny_config(**kw)
        if self.preset in ("desk", "caption"):
            return desk_config(**kw)
        raise ValueError(f"unknown preset {self.preset!r}")

    def epoch_lr(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch - 1)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            task=self.task,
            scales=self.scales,
            backbone=self.backbone(),
            hidden=self.hidden,
            embed_dim=self.embed_dim,
            vocab_size=self.vocab_size,
        )


def parse_value(default, raw: str):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update of every array in ``params``."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise ContractError(f"no gradient for {missing}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for k, theta in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(theta)
            state.v[k] = np.zeros_like(theta)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------- epochs


def check_task(model: Model, dataset) -> None:
    want = GlyphDataset if model.config.task == "recognition" else CaptionDataset
    if not isinstance(dataset, want):
        raise TaskMismatchError(f"{model.config.task} model cannot train on {type(dataset).__name__}")


def batch_inputs(model: Model, dataset, idx: np.ndarray, rng, train: bool):
    if model.config.task == "recognition":
        images = crop_batch(dataset.images[idx], rng, train)
        return images, dataset.labels[idx].astype(np.int64)
    images = dataset.images[idx].astype(np.float64)
    return images, pad_captions([dataset.tokens[i] for i in idx])


def batch_correct(model: Model, probs: np.ndarray, targets: np.ndarray) -> int:
    pred = probs.argmax(axis=-1)
    if model.config.task == "recognition":
        return int((pred == targets).all(axis=1).sum())
    ok = (pred == targets) | (targets < 0)
    return int(ok.all(axis=1).sum())


def train_epoch(model: Model, dataset, config: TrainConfig, adam: AdamState, rng: np.random.Generator,
                epoch: int = 1) -> dict:
    """One shuffled pass; returns mean loss and train-mode whole-sequence accuracy."""
    check_task(model, dataset)
    n = len(dataset)
    if n == 0:
        return {"loss": float("nan"), "acc": float("nan")}
    order = rng.permutation(n)
    total_loss, correct = 0.0, 0
    learn = model.learnable()
    lr = config.epoch_lr(epoch)
    for start in range(0, n, config.batch_size):
        idx = order[start : start + config.batch_size]
        images, targets = batch_inputs(model, dataset, idx, rng, train=True)
        graph = ad.Graph()
        p = graph.leaves(learn)
        loss, probs = model.loss(p, images, targets, train=True, rng=rng, lam=config.lam)
        grads = graph.backward(loss)
        adam_step(learn, {k: grads[t] for k, t in p.items()}, adam, lr)
        total_loss += float(loss.data) * len(idx)
        correct += batch_correct(model, probs, targets)
    return {"loss": total_loss / n, "acc": correct / n}


def fit(model: Model, dataset, config: TrainConfig, adam: AdamState, rng: np.random.Generator,
        start_epoch: int = 0, ckpt_path: str | None = None, on_epoch=None) -> list[dict]:
    """Train until ``config.epochs`` epochs are done, checkpointing after each one."""
    history = []
    for epoch in range(start_epoch + 1, config.epochs + 1):
        metrics = train_epoch(model, dataset, config, adam, rng, epoch)
        metrics["epoch"] = epoch
        history.append(metrics)
        if ckpt_path:
            checkpoint_save(ckpt_path, model, config, adam, rng, epoch)
        if on_epoch is not None:
            on_epoch(metrics)
    return history


# ---------------------------------------------------------------- checkpoints


def _pack_bytes(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def _pack_table(table: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(table))]
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name], dtype="<f8")
        out.append(_pack_bytes(name.encode("utf-8")))
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw, self.off, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        b = self.raw[self.off : self.off + n]
        self.off += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def table(self) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32()):
            name = self.blob().decode("utf-8")
            rank = self.u32()
            dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
            count = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        return out


def rng_state_blob(rng: np.random.Generator) -> bytes:
    return json.dumps(rng.bit_generator.state, sort_keys=True).encode("utf-8")


def rng_from_blob(blob: bytes) -> np.random.Generator:
    state = json.loads(blob.decode("utf-8"))
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def checkpoint_save(path: str, model: Model, config: TrainConfig, adam: AdamState,
                    rng: np.random.Generator, epoch: int) -> None:
    if not path:
        raise OSError("empty checkpoint path")
    parts = [
        CKPT_MAGIC,
        struct.pack("<I", CKPT_VERSION),
        _pack_bytes(config.to_kv().encode("utf-8")),
        _pack_table(model.params),
        struct.pack("<Q", adam.t),
        _pack_table(adam.m),
        _pack_table(adam.v),
        _pack_bytes(rng_state_blob(rng)),
        struct.pack("<I", epoch),
    ]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


@dataclass
class Checkpoint:
    config: TrainConfig
    model: Model
    adam: AdamState
    rng: np.random.Generator
    epoch: int


def checkpoint_load(path: str, expect: dict[str, np.ndarray] | None = None) -> Checkpoint:
    """Read a checkpoint; ``expect`` (a parameter table) enables the shape check."""
    if not path:
        raise OSError("empty checkpoint path")
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw, path)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    config = TrainConfig.from_kv(r.blob().decode("utf-8"))
    params = r.table()
    t = r.u64()
    adam = AdamState(r.table(), r.table(), t)
    rng = rng_from_blob(r.blob())
    epoch = r.u32()
    if r.off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    fresh = Model.build(config.model_config(), np.random.default_rng(0))
    if expect is None:
        expect = fresh.params
    bad = [
        f"{k}: checkpoint {params[k].shape if k in params else 'missing'}, model {v.shape}"
        for k, v in expect.items()
        if k not in params or params[k].shape != v.shape
    ]
    bad += [f"{k}: not in model" for k in params if k not in expect]
    if bad:
        raise ShapeMismatchError("checkpoint does not fit model: " + "; ".join(bad))
    return Checkpoint(config, type(fresh)(fresh.config, params), adam, rng, epoch)


def new_run(config: TrainConfig) -> tuple[Model, AdamState, np.random.Generator]:
    rng = np.random.default_rng(config.seed)
    model = Model.build(config.model_config(), rng)
    return model, AdamState(), rng

