"""Greedy and beam decoding, plus the evaluation metrics."""

from __future__ import annotations

import io
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionMap
from .backbone import layer_shapes
from .dataset import CROP, CANVAS, CaptionDataset, GlyphDataset, crop_batch
from .models import CaptionModel, Model, RecognitionModel


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    logp: float
    row: int = 0  # row of this hypothesis in the batched decoder state


def _select(state: dict[str, np.ndarray], rows) -> dict[str, np.ndarray]:
    rows = np.asarray(rows, dtype=np.int64)
    return {k: v[rows] for k, v in state.items()}


def beam_search_core(state, step_fn, beam: int, max_len: int, bos: int, eos: int) -> Hypothesis:
    """Beam search over cumulative log probability.

    ``step_fn(state, tokens) -> (logprobs B x V, state)`` advances every row
    of a batched decoder state. Hypotheses that emit ``eos`` are retired;
    equal scores are ordered by token sequence, so lower ids win ties.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    live = [Hypothesis((), 0.0, 0)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        prev = np.array([h.tokens[-1] if h.tokens else bos for h in live], dtype=np.int64)
        logprobs, state = step_fn(state, prev)
        cands = []
        for i, h in enumerate(live):
            for v in range(logprobs.shape[1]):
                lp = logprobs[i, v]
                if lp > -np.inf:
                    cands.append((h.logp + float(lp), h.tokens + (v,), i))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, toks, row in cands[:beam]:
            hyp = Hypothesis(toks, score, row)
            (finished if toks[-1] == eos else live).append(hyp)
        if not live:
            break
        if finished and max(h.logp for h in finished) >= max(h.logp for h in live):
            break
        state = _select(state, [h.row for h in live])
    pool = finished if finished else live
    return min(pool, key=lambda h: (-h.logp, h.tokens))


def beam_search(model: CaptionModel, image: np.ndarray, beam: int = 3, max_len: int | None = None) -> Hypothesis:
    max_len = model.config.max_len if max_len is None else max_len
    return beam_search_core(model.start(image), model.step, beam, max_len, model.bos, model.eos)


def greedy_caption(model: CaptionModel, image: np.ndarray, max_len: int | None = None) -> Hypothesis:
    max_len = model.config.max_len if max_len is None else max_len
    state = model.start(image)
    tokens, logp, prev = [], 0.0, model.bos
    for _ in range(max_len):
        logprobs, state = model.step(state, np.array([prev]))
        prev = int(np.argmax(logprobs[0]))
        logp += float(logprobs[0, prev])
        tokens.append(prev)
        if prev == model.eos:
            break
    return Hypothesis(tuple(tokens), logp)


def greedy_decode(model: Model, image: np.ndarray, max_len: int | None = None) -> list[int]:
    """Recognition: argmax label per step. Captions: argmax word until EOS."""
    if isinstance(model, RecognitionModel):
        pred, _ = model.predict(image[None] if image.ndim == 3 else image)
        return [int(v) for v in pred[0]]
    return list(greedy_caption(model, image, max_len).tokens)


def exhaustive_best(model: CaptionModel, image: np.ndarray, max_len: int) -> Hypothesis:
    """Score every token sequence up to ``max_len`` (tiny vocabularies only)."""
    root = model.start(image)
    vocab = model.config.vocab_size
    finished, frontier = [], [((), 0.0, root)]
    for depth in range(max_len):
        nxt = []
        for toks, lp, st in frontier:
            prev = toks[-1] if toks else model.bos
            logprobs, new = model.step(st, np.array([prev]))
            for v in range(vocab):
                item = (toks + (v,), lp + float(logprobs[0, v]), new)
                if v == model.eos:
                    finished.append(item)
                else:
                    nxt.append(item)
        frontier = nxt
    pool = finished if finished else frontier
    toks, lp, _ = min(pool, key=lambda x: (-x[1], x[0]))
    return Hypothesis(toks, lp)


# ---------------------------------------------------------------- metrics


def sequence_accuracy(preds, targets) -> float:
    """Fraction of sequences matching their target at every position."""
    if len(preds) != len(targets):
        raise ValueError(f"{len(preds)} predictions for {len(targets)} targets")
    if len(preds) == 0:
        raise ValueError("empty prediction list")
    hits = sum(1 for p, t in zip(preds, targets) if list(map(int, p)) == list(map(int, t)))
    return hits / len(preds)


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n with clipped counts, uniform weights and brevity penalty."""
    if len(candidates) == 0:
        raise ValueError("BLEU of an empty corpus")
    if len(candidates) != len(references):
        raise ValueError("one reference per candidate required")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cc, rc = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(k, rc[g]) for g, k in cc.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    scores, log_sum = [], 0.0
    for n in range(max_n):
        if matches[n] == 0 or totals[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matches[n] / totals[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def attention_center(amap: AttentionMap | np.ndarray, hw: tuple[int, int] | None = None,
                     stride: float = 1.0) -> tuple[float, float]:
    """Attention-weighted centroid in image coordinates (pixel i spans [i, i+1))."""
    if isinstance(amap, AttentionMap):
        weights, hw = amap.weights.data, amap.hw
    else:
        weights = np.asarray(amap, dtype=np.float64)
    grid = weights.reshape(hw)
    rows = (np.arange(hw[0]) + 0.5) * stride
    cols = (np.arange(hw[1]) + 0.5) * stride
    return float(grid.sum(axis=1) @ rows), float(grid.sum(axis=0) @ cols)


@dataclass
class EvalReport:
    n: int
    sequence_accuracy: float
    position_accuracy: list[float] = field(default_factory=list)
    bleu: list[float] = field(default_factory=list)
    localization: float | None = None

    def rows(self) -> list[tuple[str, float]]:
        out = [("n_samples", self.n), ("sequence_accuracy", self.sequence_accuracy)]
        out += [(f"position_accuracy_{i + 1}", v) for i, v in enumerate(self.position_accuracy)]
        out += [(f"bleu_{i + 1}", v) for i, v in enumerate(self.bleu)]
        if self.localization is not None:
            out.append(("localization_hit_rate", self.localization))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("metric,value\n")
        for name, value in self.rows():
            buf.write(f"{name},{value:d}\n" if isinstance(value, int) else f"{name},{value!r}\n")
        return buf.getvalue()


def _inside(box: np.ndarray, center: tuple[float, float], offset: float) -> bool:
    x0, y0, x1, y1 = box - offset
    r, c = center
    return x0 <= c <= x1 and y0 <= r <= y1


def localization_hits(model: RecognitionModel, steps, labels: np.ndarray, preds: np.ndarray,
                      boxes: list[np.ndarray], offset: float) -> tuple[int, int]:
    """(hits, correct): sequences whose every digit-step centroid lies in that digit's box."""
    scales = model.config.scales
    if scales == "none":
        return 0, 0
    bb = model.config.backbone
    strides = {ls.name: ls.stride for ls in layer_shapes(bb)}
    # the finest attended scale comes first in every step's map list
    tap = bb.taps[0] if scales == "att2" else bb.taps[1]
    hits = correct = 0
    for i in range(len(labels)):
        if not np.array_equal(preds[i], labels[i]):
            continue
        correct += 1
        ok = True
        for t, box in enumerate(boxes[i]):
            amap = steps[t].maps[0]
            center = attention_center(amap.weights.data[i], amap.hw, strides[tap])
            if not _inside(box, center, offset):
                ok = False
                break
        hits += ok
    return hits, correct


def evaluate(model: Model, dataset, beam: int = 3, batch: int = 100) -> EvalReport:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if isinstance(model, RecognitionModel):
        if not isinstance(dataset, GlyphDataset):
            raise ValueError("recognition model needs a glyph dataset")
        preds, hits, correct = [], 0, 0
        offset = (CANVAS - CROP) // 2
        for s in range(0, len(dataset), batch):
            images = crop_batch(dataset.images[s : s + batch], None, train=False)
            pred, steps = model.predict(images)
            preds.append(pred)
            if dataset.boxes is not None:
                h, c = localization_hits(
                    model, steps, dataset.labels[s : s + batch], pred, dataset.boxes[s : s + batch], offset
                )
                hits, correct = hits + h, correct + c
        pred = np.concatenate(preds)
        labels = dataset.labels.astype(np.int64)
        loc = hits / correct if dataset.boxes is not None and correct else None
        return EvalReport(
            len(dataset),
            sequence_accuracy(pred, labels),
            [float(v) for v in (pred == labels).mean(axis=0)],
            localization=loc,
        )
    if not isinstance(dataset, CaptionDataset):
        raise ValueError("caption model needs a caption dataset")
    outs = []
    for i in range(len(dataset)):
        img = dataset.images[i].astype(np.float64)
        hyp = beam_search(model, img, beam) if beam > 1 else greedy_caption(model, img)
        outs.append(list(hyp.tokens))
    refs = [list(map(int, t)) for t in dataset.tokens]
    strip = lambda seq: [t for t in seq if t not in (model.bos, model.eos)]
    return EvalReport(
        len(dataset),
        sequence_accuracy(outs, refs),
        bleu=bleu([strip(o) for o in outs], [strip(r) for r in refs]),
    )
