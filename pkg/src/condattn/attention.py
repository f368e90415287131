"""Conditional attention: score local features against a projected query.

For one scale ``s`` with local grid ``L`` (``c x h x w``) and query ``cg``::

    scores_i = <l_i, A_s cg>        (dot-product compatibility)
    a        = softmax(scores)      (over all h*w locations)
    g^s      = sum_i a_i l_i        (attention-weighted average)

Per-scale ``g^s`` are concatenated (L1 first) and fed to an affine+softmax
classifier. All functions accept an optional leading batch axis.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .backbone import FeatureBundle


@dataclass
class AttentionMap:
    weights: Tensor  # [N x] n
    scale_id: int
    step: int
    hw: tuple[int, int]

    def grid(self) -> np.ndarray:
        return self.weights.data.reshape(self.weights.shape[:-1] + self.hw)


@dataclass
class AttentionStep:
    maps: list[AttentionMap]
    g_per_scale: list[Tensor]
    g_t: Tensor
    logits: Tensor | None = None
    probs: Tensor | None = None
    cg: Tensor | None = field(default=None, repr=False)


def project_global(cg, A) -> Tensor:
    """``A @ cg`` with ``A`` of shape ``d_local x d_cg``; no bias."""
    cg, A = ad._as_tensor(cg), ad._as_tensor(A)
    if cg.shape[-1] != A.shape[1]:
        raise ShapeError(f"projection {A.shape} cannot take query of width {cg.shape[-1]}")
    return ad.matmul(cg, ad.transpose(A))


def _flatten_locals(local: Tensor) -> Tensor:
    *lead, c, h, w = local.shape
    return local.reshape(tuple(lead) + (c, h * w))


def compatibility(local, projected) -> Tensor:
    """Dot product of every location's channel vector with ``projected``.

    Locations are flattened row-major, so the result has ``h*w`` entries.
    """
    local, projected = ad._as_tensor(local), ad._as_tensor(projected)
    if local.ndim < 3 or local.shape[-3] != projected.shape[-1]:
        raise ShapeError(f"locals {local.shape} and query {projected.shape} disagree on channels")
    flat = _flatten_locals(local)
    if projected.ndim == 1:
        return ad.matmul(projected, flat)
    q = projected.reshape(projected.shape[:-1] + (1, projected.shape[-1]))
    scores = ad.matmul(q, flat)
    return scores.reshape(scores.shape[:-2] + (scores.shape[-1],))


def normalize(scores, hw: tuple[int, int] | None = None, scale_id: int = 0, step: int = 0) -> AttentionMap:
    scores = ad._as_tensor(scores)
    n = scores.shape[-1]
    if n < 1:
        raise ShapeError("attention over zero locations")
    return AttentionMap(ad.softmax(scores, axis=-1), scale_id, step, hw or (1, n))


def attend(local, amap: AttentionMap) -> Tensor:
    local = ad._as_tensor(local)
    flat = _flatten_locals(local)
    a = amap.weights
    if flat.shape[-1] != a.shape[-1]:
        raise ShapeError(f"map over {a.shape[-1]} locations, locals have {flat.shape[-1]}")
    if a.ndim == 1:
        return ad.matmul(flat, a)
    col = a.reshape(a.shape + (1,))
    g = ad.matmul(flat, col)
    return g.reshape(g.shape[:-1])


def classify(g_t, w, b) -> tuple[Tensor, Tensor]:
    """Affine layer + softmax; returns ``(logits, probs)``."""
    g_t, w = ad._as_tensor(g_t), ad._as_tensor(w)
    if g_t.shape[-1] != w.shape[0]:
        raise ShapeError(f"classifier takes width {w.shape[0]}, got {g_t.shape[-1]}")
    logits = ad.matmul(g_t, w) + b
    return logits, ad.softmax(logits, axis=-1)


def attention_step(
    bundle: FeatureBundle,
    cg,
    projections: dict[int, Tensor],
    scales: str,
    classifier: tuple[Tensor, Tensor] | None = None,
    step: int = 0,
) -> AttentionStep:
    """One attention pass over the active scales.

    ``projections`` maps scale id (1 for L1, 2 for L2) to its ``A_s``;
    ``att1`` uses L2 only, ``att2`` uses L1 then L2.
    """
    if scales not in ("att1", "att2"):
        raise ValueError(f"unknown scales {scales!r}")
    scale_ids = [2] if scales == "att1" else [1, 2]
    maps, gs = [], []
    for s in scale_ids:
        local = bundle.L1 if s == 1 else bundle.L2
        scores = compatibility(local, project_global(cg, projections[s]))
        amap = normalize(scores, tuple(local.shape[-2:]), s, step)
        maps.append(amap)
        gs.append(attend(local, amap))
    g_t = ad.concat(gs, axis=-1)
    out = AttentionStep(maps, gs, g_t, cg=ad._as_tensor(cg))
    if classifier is not None:
        out.logits, out.probs = classify(g_t, *classifier)
    return out


def write_pgm(path: str, image: np.ndarray) -> None:
    """Binary greyscale PGM (P5), 8 bits per pixel; ``image`` already in [0, 255]."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-d image")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.clip(np.rint(img), 0, 255).astype(np.uint8).tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def min_max_scale(grid: np.ndarray) -> np.ndarray:
    lo, hi = float(grid.min()), float(grid.max())
    if hi - lo <= 0:
        return np.zeros_like(grid, dtype=np.float64)
    return (grid - lo) * (255.0 / (hi - lo))


def export_map(amap: AttentionMap, out_dir: str, index: int = 0) -> str:
    """Write one map as ``step{t}_scale{s}.pgm``; ``index`` picks the batch row."""
    grid = amap.grid()
    if grid.ndim == 3:
        grid = grid[index]
    path = os.path.join(out_dir, f"step{amap.step}_scale{amap.scale_id}.pgm")
    write_pgm(path, min_max_scale(grid))
    return path
