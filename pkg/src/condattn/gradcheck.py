"""Central finite-difference checks of every analytic gradient.

Each check builds a scalar ``sum(f(inputs) * R)`` with a fixed random
weighting ``R`` and compares the tape gradient against
``(f(x + h) - f(x - h)) / 2h`` on a sample of coordinates. A coordinate is
skipped when either perturbed run crosses a relu or max-pool kink, since the
one-sided slopes disagree there.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import attention_step, classify
from .backbone import FeatureBundle, tiny_config
from .models import Model, ModelConfig
from .objective import LossBatch, double_stochastic, sequence_xent
from .recurrent import InitParams, LstmParams, LstmState, init_state_from_global, lstm_cell

TOLERANCE = 1e-4
STEP = 1e-4


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error <= TOLERANCE


def _run(fn, arrays: dict[str, np.ndarray]):
    graph = ad.Graph(track_kinks=True)
    p = graph.leaves(arrays)
    out = fn(p)
    return graph, p, out


def check_gradients(name: str, fn, arrays: dict[str, np.ndarray], rng: np.random.Generator,
                    per_tensor: int = 6, step: float = STEP) -> CheckResult:
    """``fn(p)`` maps a dict of leaf tensors to any tensor; it must be deterministic."""
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    graph, p, out = _run(fn, arrays)
    weights = rng.standard_normal(out.shape)
    loss = ad.reduce(ad.mul(out, weights), "sum")
    grads = graph.backward(loss)
    kinks = graph.kinks

    def value(perturbed):
        g, _, o = _run(fn, perturbed)
        return float((o.data * weights).sum()), g.kinks

    worst, checked, skipped = 0.0, 0, 0
    for key, arr in arrays.items():
        flat = arr.size
        picks = range(flat) if flat <= per_tensor else rng.choice(flat, per_tensor, replace=False)
        for j in picks:
            idx = np.unravel_index(int(j), arr.shape)
            plus = dict(arrays)
            plus[key] = arr.copy()
            plus[key][idx] += step
            minus = dict(arrays)
            minus[key] = arr.copy()
            minus[key][idx] -= step
            fp, kp = value(plus)
            fm, km = value(minus)
            if kp != kinks or km != kinks:
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * step)
            worst = max(worst, rel_error(float(grads[p[key]][idx]), numeric))
            checked += 1
    return CheckResult(name, worst, checked, skipped)


# ---------------------------------------------------------------- the suite


def _op_cases(rng: np.random.Generator):
    """(name, fn, inputs) for each primitive."""
    r = rng.standard_normal
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    ids = np.array([2, 0, 3, 2])
    running = lambda c: {"mean": np.zeros(c), "var": np.ones(c)}
    return [
        ("add", lambda p: p["a"] + p["b"], {"a": r((3, 4)), "b": r(4)}),
        ("sub", lambda p: p["a"] - p["b"], {"a": r((3, 1)), "b": r((3, 4))}),
        ("mul", lambda p: p["a"] * p["b"], {"a": r((2, 3)), "b": r((2, 3))}),
        ("div", lambda p: p["a"] / p["b"], {"a": r((2, 3)), "b": pos(3)}),
        ("log", lambda p: ad.log(p["a"]), {"a": pos(5)}),
        ("relu", lambda p: ad.relu(p["a"]), {"a": r((4, 5))}),
        ("sigmoid", lambda p: ad.sigmoid(p["a"]), {"a": r((4, 5))}),
        ("tanh", lambda p: ad.tanh(p["a"]), {"a": r((4, 5))}),
        ("matmul", lambda p: p["a"] @ p["b"], {"a": r((3, 4)), "b": r((4, 2))}),
        ("matmul_batched", lambda p: p["a"] @ p["b"], {"a": r((2, 3, 4)), "b": r((4, 2))}),
        ("matmul_vector", lambda p: p["a"] @ p["b"], {"a": r((3, 4)), "b": r(4)}),
        ("reshape", lambda p: p["a"].reshape(6, 2) * 1.0, {"a": r((3, 4))}),
        ("transpose", lambda p: ad.transpose(p["a"], (2, 0, 1)), {"a": r((2, 3, 4))}),
        ("getitem", lambda p: p["a"][1:, ::2], {"a": r((3, 4))}),
        ("getitem_fancy", lambda p: p["a"][np.array([0, 2, 0])], {"a": r((3, 4))}),
        ("take_rows", lambda p: ad.take_rows(p["a"], ids), {"a": r((4, 3))}),
        ("concat", lambda p: ad.concat([p["a"], p["b"]], axis=1), {"a": r((2, 3)), "b": r((2, 2))}),
        ("stack", lambda p: ad.stack([p["a"], p["b"]], axis=1), {"a": r((2, 3)), "b": r((2, 3))}),
        ("sum", lambda p: ad.reduce(p["a"], "sum", axis=1), {"a": r((3, 4))}),
        ("mean", lambda p: ad.reduce(p["a"], "mean", axis=(0, 2), keepdims=True), {"a": r((2, 3, 4))}),
        ("softmax", lambda p: ad.softmax(p["a"], axis=-1), {"a": r((3, 5))}),
        ("pad2d", lambda p: ad.pad2d(p["a"], 1, 1), {"a": r((1, 2, 3, 3))}),
        ("conv2d", lambda p: ad.conv2d(p["x"], p["k"], p["b"], pad=1),
         {"x": r((2, 2, 5, 5)), "k": r((3, 2, 3, 3)), "b": r(3)}),
        ("conv2d_stride", lambda p: ad.conv2d(p["x"], p["k"], stride=2),
         {"x": r((1, 2, 7, 7)), "k": r((2, 2, 3, 3))}),
        ("maxpool2d", lambda p: ad.maxpool2d(p["a"], 2), {"a": r((2, 2, 4, 4))}),
        ("batchnorm_train", lambda p: ad.batchnorm(p["x"], p["g"], p["b"], running(3), train=True),
         {"x": r((4, 3, 2, 2)), "g": pos(3), "b": r(3)}),
        ("batchnorm_eval", lambda p: ad.batchnorm(p["x"], p["g"], p["b"], {"mean": np.full(3, 0.2),
                                                                         "var": np.full(3, 1.5)}, train=False),
         {"x": r((4, 3)), "g": pos(3), "b": r(3)}),
        ("dropout", lambda p: ad.dropout(p["a"], 0.5, np.random.default_rng(3), train=True), {"a": r((4, 5))}),
    ]


def _component_cases(rng: np.random.Generator):
    r = rng.standard_normal
    d_in, d_h, n = 3, 4, 2

    def lstm(p):
        st = lstm_cell(p["x"], LstmState(p["h"], p["c"]), LstmParams(p["wx"], p["wh"], p["b"]))
        return ad.concat([st.h, st.c], axis=-1)

    def init(p):
        st = init_state_from_global(p["G"], InitParams(p["wc"], p["bc"], p["wh"], p["bh"]))
        return ad.concat([st.h, st.c], axis=-1)

    def att(p):
        bundle = FeatureBundle(p["L1"], p["L2"], p["G"])
        step = attention_step(bundle, p["cg"], {1: p["A1"], 2: p["A2"]}, "att2", (p["w"], p["wb"]))
        return ad.concat([step.g_t, step.probs], axis=-1)

    def xent(p):
        _, probs = classify(p["g"], p["w"], p["b"])
        batch = LossBatch(ad.reshape(probs, (2, 3, 4)), np.array([[0, 3, -1], [2, 2, 1]]))
        return sequence_xent(batch)

    lstm_in = {"x": r((n, d_in)), "h": r((n, d_h)), "c": r((n, d_h)),
               "wx": r((d_in, 4 * d_h)), "wh": r((d_h, 4 * d_h)), "b": r(4 * d_h)}
    init_in = {"G": r((n, 5)), "wc": r((5, d_h)), "bc": r(d_h), "wh": r((5, d_h)), "bh": r(d_h)}
    att_in = {"L1": r((n, 3, 4, 4)), "L2": r((n, 2, 2, 2)), "G": r((n, d_h)), "cg": r((n, d_h)),
              "A1": r((3, d_h)), "A2": r((2, d_h)), "w": r((5, 4)), "wb": r(4)}
    ds_mask = np.array([[1, 1, 0], [1, 1, 1]], dtype=float)
    return [
        ("lstm_cell", lstm, lstm_in),
        ("init_state", init, init_in),
        ("attention_step", att, att_in),
        ("classify_xent", xent, {"g": r((6, 5)), "w": r((5, 4)), "b": r(4)}),
        ("double_stochastic", lambda p: double_stochastic(ad.softmax(p["s"]), 1.0, ds_mask),
         {"s": r((2, 3, 5))}),
    ]


def tiny_recognition_model(seed: int = 0) -> Model:
    cfg = ModelConfig(task="recognition", scales="att2", backbone=tiny_config(), hidden=16, steps=3)
    return Model.build(cfg, np.random.default_rng(seed))


def tiny_caption_model(seed: int = 0) -> Model:
    bb = tiny_config(in_channels=3)
    cfg = ModelConfig(task="caption", scales="att2", backbone=bb, hidden=16, embed_dim=8, vocab_size=10)
    return Model.build(cfg, np.random.default_rng(seed))


def _model_cases(rng: np.random.Generator):
    rec = tiny_recognition_model(int(rng.integers(1 << 30)))
    hw = rec.config.backbone.input_hw
    images = rng.uniform(0, 1, (2, 1, hw, hw))
    labels = rng.integers(0, 11, (2, 3))
    cap = tiny_caption_model(int(rng.integers(1 << 30)))
    cap_images = rng.uniform(0, 1, (2, 3, hw, hw))
    tokens = np.array([[4, 7, 1], [5, 1, -1]])
    return [
        ("recognition_model", lambda p: rec.loss(p, images, labels)[0], rec.learnable()),
        ("caption_model", lambda p: cap.loss(p, cap_images, tokens, lam=1.0)[0], cap.learnable()),
    ]


def run_suite(seed: int = 0, per_tensor: int = 6) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs in _op_cases(rng) + _component_cases(rng):
        results.append(check_gradients(name, fn, inputs, rng, per_tensor))
    for name, fn, inputs in _model_cases(rng):
        results.append(check_gradients(name, fn, inputs, rng, per_tensor=3))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = ["component,max_rel_error,checked,skipped,status"]
    for r in results:
        lines.append(f"{r.name},{r.max_rel_error:.3e},{r.checked},{r.skipped},{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"


def main_check(seed: int = 0) -> tuple[bool, str, float]:
    start = time.perf_counter()
    results = run_suite(seed)
    elapsed = time.perf_counter() - start
    return all(r.passed for r in results), format_report(results), elapsed
