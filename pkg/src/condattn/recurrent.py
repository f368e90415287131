"""LSTM machinery that produces the conditional global feature.

Recognition: step 1 queries the local features with the global feature G
itself; every later step feeds the previous attended feature into an LSTM
and uses the new hidden state as the query.

Captioning: an attention LSTM (input ``[g_{t-1}, h2_{t-1}, embed(w_{t-1})]``)
produces the query, and a language LSTM (input ``[g_t, CG_t]``) feeds the
word classifier together with ``g_t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AttentionStep, attention_step, classify
from .autodiff import ShapeError, Tensor
from .backbone import FeatureBundle

# gate blocks inside the stacked 4*d_h weight columns
GATES = ("input", "forget", "output", "candidate")


@dataclass
class LstmParams:
    wx: Tensor  # d_in x 4 d_h
    wh: Tensor  # d_h x 4 d_h
    b: Tensor  # 4 d_h

    @classmethod
    def from_params(cls, p: dict[str, Tensor], prefix: str) -> "LstmParams":
        return cls(p[f"{prefix}/wx"], p[f"{prefix}/wh"], p[f"{prefix}/b"])

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


@dataclass
class InitParams:
    wc: Tensor
    bc: Tensor
    wh: Tensor
    bh: Tensor

    @classmethod
    def from_params(cls, p: dict[str, Tensor], prefix: str) -> "InitParams":
        return cls(p[f"{prefix}/wc"], p[f"{prefix}/bc"], p[f"{prefix}/wh"], p[f"{prefix}/bh"])


def init_lstm(rng: np.random.Generator, prefix: str, d_in: int, d_h: int) -> dict[str, np.ndarray]:
    bound = np.sqrt(3.0 / (d_in + d_h))
    b = np.zeros(4 * d_h)
    b[d_h : 2 * d_h] = 1.0  # forget-gate bias
    return {
        f"{prefix}/wx": rng.uniform(-bound, bound, (d_in, 4 * d_h)),
        f"{prefix}/wh": rng.uniform(-bound, bound, (d_h, 4 * d_h)),
        f"{prefix}/b": b,
    }


def init_state_params(rng: np.random.Generator, prefix: str, d_g: int, d_h: int) -> dict[str, np.ndarray]:
    bound = np.sqrt(3.0 / d_g)
    return {
        f"{prefix}/wc": rng.uniform(-bound, bound, (d_g, d_h)),
        f"{prefix}/bc": np.zeros(d_h),
        f"{prefix}/wh": rng.uniform(-bound, bound, (d_g, d_h)),
        f"{prefix}/bh": np.zeros(d_h),
    }


def lstm_cell(x, state: LstmState, params: LstmParams) -> LstmState:
    x = ad._as_tensor(x)
    d_h = params.hidden
    if x.shape[-1] != params.wx.shape[0] or state.h.shape[-1] != d_h:
        raise ShapeError(
            f"lstm expects input {params.wx.shape[0]} / hidden {d_h}, got {x.shape} / {state.h.shape}"
        )
    z = ad.matmul(x, params.wx) + ad.matmul(state.h, params.wh) + params.b
    i = ad.sigmoid(z[..., 0:d_h])
    f = ad.sigmoid(z[..., d_h : 2 * d_h])
    o = ad.sigmoid(z[..., 2 * d_h : 3 * d_h])
    cand = ad.tanh(z[..., 3 * d_h :])
    c = f * state.c + i * cand
    h = o * ad.tanh(c)
    return LstmState(h, c)


def init_state_from_global(G, params: InitParams) -> LstmState:
    G = ad._as_tensor(G)
    if G.shape[-1] != params.wc.shape[0]:
        raise ShapeError(f"state init takes width {params.wc.shape[0]}, got {G.shape[-1]}")
    c = ad.tanh(ad.matmul(G, params.wc) + params.bc)
    h = ad.tanh(ad.matmul(G, params.wh) + params.bh)
    return LstmState(h, c)


def projections(p: dict[str, Tensor], scales: str) -> dict[int, Tensor]:
    ids = [2] if scales == "att1" else [1, 2]
    return {s: p[f"att/A{s}"] for s in ids}


def recognition_unroll(bundle: FeatureBundle, p: dict[str, Tensor], T: int, scales: str) -> list[AttentionStep]:
    """Unroll ``T`` attention steps; step 1 uses ``CG_1 = G`` and no LSTM."""
    if T < 1:
        raise ValueError("T must be >= 1")
    proj = projections(p, scales)
    cls = (p["cls/w"], p["cls/b"])
    lstm = LstmParams.from_params(p, "lstm")
    steps = [attention_step(bundle, bundle.G, proj, scales, cls, step=1)]
    if T == 1:
        return steps
    state = init_state_from_global(bundle.G, InitParams.from_params(p, "init"))
    for t in range(2, T + 1):
        state = lstm_cell(steps[-1].g_t, state, lstm)
        steps.append(attention_step(bundle, state.h, proj, scales, cls, step=t))
    return steps


def global_only_unroll(bundle: FeatureBundle, p: dict[str, Tensor], T: int) -> list[AttentionStep]:
    """No-attention ablation: every step classifies from G (step 1) or an LSTM fed G."""
    cls = (p["cls/w"], p["cls/b"])
    logits, probs = classify(bundle.G, *cls)
    steps = [AttentionStep([], [], bundle.G, logits, probs, cg=bundle.G)]
    if T == 1:
        return steps
    lstm = LstmParams.from_params(p, "lstm")
    state = init_state_from_global(bundle.G, InitParams.from_params(p, "init"))
    for _ in range(2, T + 1):
        state = lstm_cell(bundle.G, state, lstm)
        logits, probs = classify(state.h, *cls)
        steps.append(AttentionStep([], [], state.h, logits, probs, cg=state.h))
    return steps


@dataclass
class CaptionStepState:
    attn: LstmState
    lang: LstmState
    prev_word: np.ndarray  # token ids, one per batch row
    prev_g: Tensor


def embed_word(token, embedding) -> Tensor:
    embedding = ad._as_tensor(embedding)
    ids = np.asarray(token)
    if ids.size and (ids.min() < 0 or ids.max() >= embedding.shape[0]):
        raise IndexError(f"token id outside vocabulary of size {embedding.shape[0]}")
    return ad.take_rows(embedding, ids)


def caption_start(bundle: FeatureBundle, p: dict[str, Tensor], scales: str, bos: int) -> CaptionStepState:
    G = bundle.G
    attn = init_state_from_global(G, InitParams.from_params(p, "init_attn"))
    lang = init_state_from_global(G, InitParams.from_params(p, "init_lang"))
    width = sum(loc.shape[-3] for loc in bundle.locals(scales))
    lead = G.shape[:-1]
    prev_g = Tensor(np.zeros(lead + (width,)))
    prev = np.full(lead, bos, dtype=np.int64)
    return CaptionStepState(attn, lang, prev, prev_g)


def caption_step(
    state: CaptionStepState, bundle: FeatureBundle, p: dict[str, Tensor], scales: str, step: int = 1
) -> tuple[CaptionStepState, AttentionStep, Tensor]:
    """Advance both LSTMs one word; returns (new state, attention, word distribution)."""
    w = embed_word(state.prev_word, p["embed/w"])
    x1 = ad.concat([state.prev_g, state.lang.h, w], axis=-1)
    attn = lstm_cell(x1, state.attn, LstmParams.from_params(p, "attn_lstm"))
    att = attention_step(bundle, attn.h, projections(p, scales), scales, None, step=step)
    x2 = ad.concat([att.g_t, attn.h], axis=-1)
    lang = lstm_cell(x2, state.lang, LstmParams.from_params(p, "lang_lstm"))
    logits, probs = classify(ad.concat([att.g_t, lang.h], axis=-1), p["out/w"], p["out/b"])
    att.logits, att.probs = logits, probs
    return CaptionStepState(attn, lang, state.prev_word, att.g_t), att, probs
