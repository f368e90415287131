"""Recognition and caption models assembled from backbone, attention and LSTMs.

A model owns a flat ``name -> ndarray`` table (learnable tensors plus
batch-norm buffers). Forward passes take a ``name -> Tensor`` view of the
learnable part, so the same code runs with graph leaves (training,
gradient checks) or plain constants (inference).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AttentionStep
from .autodiff import Tensor
from .backbone import (
    BackboneConfig,
    ConfigError,
    FeatureBundle,
    backbone_forward,
    buffer_names,
    build_backbone,
    desk_config,
    layer_shapes,
)
from .objective import LossBatch, total_loss
from .recurrent import (
    CaptionStepState,
    LstmState,
    caption_start,
    caption_step,
    global_only_unroll,
    init_lstm,
    init_state_params,
    recognition_unroll,
)


@dataclass(frozen=True)
class ModelConfig:
    task: str = "recognition"  # recognition | caption
    scales: str = "att1"  # att1 | att2 | none (recognition ablation)
    backbone: BackboneConfig = dataclasses.field(default_factory=desk_config)
    hidden: int = 64
    embed_dim: int = 64
    n_classes: int = 11
    steps: int = 5
    vocab_size: int = 12
    max_len: int = 20

    def __post_init__(self):
        if self.task not in ("recognition", "caption"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.scales not in ("att1", "att2", "none"):
            raise ConfigError(f"unknown scales {self.scales!r}")
        if self.task == "caption" and self.scales == "none":
            raise ConfigError("caption model needs attention")
        if self.task == "recognition" and self.backbone.fc_dim != self.hidden:
            raise ConfigError("recognition queries with G and h alike: fc_dim must equal hidden")


def local_widths(config: ModelConfig) -> dict[int, int]:
    shapes = {ls.name: ls for ls in layer_shapes(config.backbone)}
    t1, t2 = config.backbone.taps
    return {1: shapes[t1].channels, 2: shapes[t2].channels}


def attended_width(config: ModelConfig) -> int:
    w = local_widths(config)
    if config.scales == "none":
        return config.hidden
    return w[2] if config.scales == "att1" else w[1] + w[2]


def _linear(rng, d_in, d_out):
    bound = np.sqrt(3.0 / d_in)
    return rng.uniform(-bound, bound, (d_in, d_out)), np.zeros(d_out)


def build_model_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = build_backbone(config.backbone, rng)
    d_h, d_g = config.hidden, config.backbone.fc_dim
    widths = local_widths(config)
    if config.scales != "none":
        ids = [2] if config.scales == "att1" else [1, 2]
        for s in ids:
            bound = np.sqrt(3.0 / d_h)
            params[f"att/A{s}"] = rng.uniform(-bound, bound, (widths[s], d_h))
    d_att = attended_width(config)
    if config.task == "recognition":
        params["cls/w"], params["cls/b"] = _linear(rng, d_att, config.n_classes)
        lstm_in = d_g if config.scales == "none" else d_att
        params.update(init_lstm(rng, "lstm", lstm_in, d_h))
        params.update(init_state_params(rng, "init", d_g, d_h))
    else:
        v, d_e = config.vocab_size, config.embed_dim
        params["embed/w"] = rng.uniform(-0.1, 0.1, (v, d_e))
        params.update(init_lstm(rng, "attn_lstm", d_att + d_h + d_e, d_h))
        params.update(init_lstm(rng, "lang_lstm", d_att + d_h, d_h))
        params.update(init_state_params(rng, "init_attn", d_g, d_h))
        params.update(init_state_params(rng, "init_lang", d_g, d_h))
        params["out/w"], params["out/b"] = _linear(rng, d_att + d_h, v)
    return params


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffer_names = set(buffer_names(config.backbone))

    @classmethod
    def build(cls, config: ModelConfig, rng: np.random.Generator) -> "Model":
        model_cls = RecognitionModel if config.task == "recognition" else CaptionModel
        return model_cls(config, build_model_params(config, rng))

    def learnable(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k not in self.buffer_names}

    def buffers(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k in self.buffer_names}

    def constants(self) -> dict[str, Tensor]:
        return ad.constants(self.learnable())

    def features(self, p, images, train=False, rng=None) -> FeatureBundle:
        return backbone_forward(Tensor(images), p, self.params, self.config.backbone, train, rng)


class RecognitionModel(Model):
    def unroll(self, p, images, train=False, rng=None) -> list[AttentionStep]:
        bundle = self.features(p, images, train, rng)
        if self.config.scales == "none":
            return global_only_unroll(bundle, p, self.config.steps)
        return recognition_unroll(bundle, p, self.config.steps, self.config.scales)

    def loss(self, p, images, labels, train=False, rng=None, lam: float = 1.0):
        steps = self.unroll(p, images, train, rng)
        probs = ad.stack([s.probs for s in steps], axis=1)
        loss = total_loss(LossBatch(probs, np.asarray(labels), task="recognition"))
        return loss, probs.data

    def predict(self, images) -> tuple[np.ndarray, list[AttentionStep]]:
        steps = self.unroll(self.constants(), images)
        probs = np.stack([s.probs.data for s in steps], axis=-2)
        return probs.argmax(axis=-1), steps


def pad_captions(tokens: list[np.ndarray]) -> np.ndarray:
    t = max(len(x) for x in tokens)
    out = np.full((len(tokens), t), -1, dtype=np.int64)
    for i, x in enumerate(tokens):
        out[i, : len(x)] = x
    return out


class CaptionModel(Model):
    bos, eos = 0, 1

    def teacher_forced(self, p, images, targets: np.ndarray, train=False, rng=None):
        """Run every step feeding the ground-truth previous word.

        ``targets`` is ``N x T`` with -1 after EOS. Returns per-step word
        distributions ``N x T x V``, one ``N x T x L`` alpha stack per scale,
        and the ``N x T`` mask of real steps.
        """
        bundle = self.features(p, images, train, rng)
        state = caption_start(bundle, p, self.config.scales, self.bos)
        n, t = targets.shape
        probs, alphas = [], []
        for k in range(t):
            state, att, dist = caption_step(state, bundle, p, self.config.scales, step=k + 1)
            probs.append(dist)
            alphas.append([m.weights for m in att.maps])
            state.prev_word = np.where(targets[:, k] >= 0, targets[:, k], self.eos)
        probs = ad.stack(probs, axis=1)
        per_scale = [ad.stack([a[s] for a in alphas], axis=1) for s in range(len(alphas[0]))]
        return probs, per_scale, (targets >= 0).astype(np.float64)

    def loss(self, p, images, targets, train=False, rng=None, lam: float = 1.0):
        targets = pad_captions(targets) if isinstance(targets, list) else np.asarray(targets)
        probs, alphas, mask = self.teacher_forced(p, images, targets, train, rng)
        batch = LossBatch(probs, targets, alphas, lam, task="caption")
        return total_loss(batch, mask), probs.data

    # decoding interface: state is a dict of arrays with one row per hypothesis

    def start(self, image: np.ndarray) -> dict[str, np.ndarray]:
        p = self.constants()
        bundle = self.features(p, image[None] if image.ndim == 3 else image)
        st = caption_start(bundle, p, self.config.scales, self.bos)
        return {
            "L1": bundle.L1.data, "L2": bundle.L2.data, "G": bundle.G.data,
            "h1": st.attn.h.data, "c1": st.attn.c.data,
            "h2": st.lang.h.data, "c2": st.lang.c.data, "g": st.prev_g.data,
        }

    def step(self, state: dict[str, np.ndarray], tokens: np.ndarray):
        """Log-probabilities ``B x V`` of the next word after ``tokens`` and the new state."""
        p = self.constants()
        bundle = FeatureBundle(Tensor(state["L1"]), Tensor(state["L2"]), Tensor(state["G"]))
        st = CaptionStepState(
            LstmState(Tensor(state["h1"]), Tensor(state["c1"])),
            LstmState(Tensor(state["h2"]), Tensor(state["c2"])),
            np.asarray(tokens, dtype=np.int64),
            Tensor(state["g"]),
        )
        new, att, dist = caption_step(st, bundle, p, self.config.scales)
        out = dict(state)
        out.update(
            h1=new.attn.h.data, c1=new.attn.c.data, h2=new.lang.h.data, c2=new.lang.c.data, g=new.prev_g.data
        )
        with np.errstate(divide="ignore"):
            return np.log(dist.data), out
