"""Synthetic datasets: digit-glyph sequences and templated shape captions.

Glyph samples are 1x64x64 canvases with 1-5 digits drawn left to right from
a 5x7 bitmap font, plus optional distractor strokes and pixel noise.
Labels are 5 ids in 0..10 where 10 pads the sequence after the last digit.

Caption samples are 3xHxW scenes of coloured shapes on a grid; the caption
lists them in row-major cell order ("a red square and a blue circle").

Both kinds round-trip through a little-endian binary file::

    "CATN" u32 version u32 n u32 channels u32 height u32 width
    u32 label_width u32 task_tag (0 glyphs, 1 captions)
    per sample: c*h*w f32 pixels, then
        glyphs:   label_width x u8
        captions: u32 length, length x u32 ids
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CATN"
VERSION = 1
TASK_GLYPHS, TASK_CAPTIONS = 0, 1
DUMMY = 10
SEQ_LEN = 5
CANVAS = 64
CROP = 54
MAX_CAPTION = 20

_FONT_ROWS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}
FONT = {d: np.array([[c == "1" for c in row] for row in rows]) for d, rows in _FONT_ROWS.items()}


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


# ---------------------------------------------------------------- glyphs


@dataclass(frozen=True)
class GlyphConfig:
    n_samples: int = 1000
    min_digits: int = 1
    max_digits: int = 5
    noise: float = 0.05
    clutter: float = 0.0
    margin: int = 5  # keeps every glyph inside the centre crop


@dataclass
class GlyphDataset:
    images: np.ndarray  # N x 1 x 64 x 64 float32
    labels: np.ndarray  # N x 5 uint8
    boxes: list[np.ndarray] | None = None  # per sample: k x 4 (x0, y0, x1, y1), canvas pixels

    task = "glyphs"

    def __len__(self) -> int:
        return len(self.images)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def render_glyph_sample(rng: np.random.Generator, config: GlyphConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = int(rng.integers(config.min_digits, config.max_digits + 1))
    digits = rng.integers(0, 10, size=n)
    span = CANVAS - 2 * config.margin
    scales = [s for s in (2, 3, 4) if n * 5 * s + (n - 1) <= span]
    s = int(rng.choice(scales))
    gaps = rng.integers(1, s + 1, size=max(n - 1, 0))
    while n * 5 * s + gaps.sum() > span:
        gaps = np.maximum(gaps - 1, 1)
    width = n * 5 * s + int(gaps.sum())
    x = config.margin + int(rng.integers(0, span - width + 1))
    background = rng.uniform(0.0, 0.2)
    canvas = np.full((CANVAS, CANVAS), background)
    boxes = np.zeros((n, 4))
    for k, d in enumerate(digits):
        y = config.margin + int(rng.integers(0, span - 7 * s + 1))
        glyph = np.kron(FONT[int(d)], np.ones((s, s), dtype=bool))
        canvas[y : y + 7 * s, x : x + 5 * s][glyph] = rng.uniform(0.6, 1.0)
        boxes[k] = (x, y, x + 5 * s, y + 7 * s)
        x += 5 * s + (int(gaps[k]) if k < n - 1 else 0)
    _draw_clutter(canvas, rng, config.clutter)
    if config.noise > 0:
        canvas = canvas + rng.normal(0.0, config.noise, canvas.shape)
    labels = np.full(SEQ_LEN, DUMMY, dtype=np.uint8)
    labels[:n] = digits
    img = np.clip(canvas, 0.0, 1.0).astype(np.float32)[None]
    return img, labels, boxes


def _draw_clutter(canvas: np.ndarray, rng: np.random.Generator, level: float) -> None:
    if level <= 0:
        return
    for _ in range(int(rng.poisson(10.0 * level))):
        length = rng.uniform(4, 12)
        angle = rng.uniform(0, np.pi)
        x0, y0 = rng.uniform(0, CANVAS, size=2)
        value = rng.uniform(0.3, 0.9)
        ts = np.linspace(0.0, 1.0, int(length * 2) + 2)
        xs = np.clip(np.rint(x0 + ts * length * np.cos(angle)), 0, CANVAS - 1).astype(int)
        ys = np.clip(np.rint(y0 + ts * length * np.sin(angle)), 0, CANVAS - 1).astype(int)
        canvas[ys, xs] = value


def synth_glyphs(seed: int, config: GlyphConfig) -> GlyphDataset:
    """Pure function of ``(seed, config)``; sample i uses its own derived stream."""
    images = np.zeros((config.n_samples, 1, CANVAS, CANVAS), dtype=np.float32)
    labels = np.zeros((config.n_samples, SEQ_LEN), dtype=np.uint8)
    boxes = []
    for i in range(config.n_samples):
        images[i], labels[i], b = render_glyph_sample(sample_rng(seed, i), config)
        boxes.append(b)
    return GlyphDataset(images, labels, boxes)


def augment_crop(image: np.ndarray, rng: np.random.Generator | None = None, train: bool = False) -> np.ndarray:
    """54x54 crop: uniform offset in [0, 10]^2 when training, centre (5, 5) otherwise."""
    img = np.asarray(image)
    if img.shape[-2:] != (CANVAS, CANVAS):
        raise ValueError(f"crop expects a {CANVAS}x{CANVAS} image, got {img.shape}")
    if train:
        oy, ox = rng.integers(0, CANVAS - CROP + 1, size=2)
    else:
        oy = ox = (CANVAS - CROP) // 2
    return img[..., oy : oy + CROP, ox : ox + CROP]


def crop_batch(images: np.ndarray, rng: np.random.Generator | None, train: bool) -> np.ndarray:
    out = np.empty(images.shape[:-2] + (CROP, CROP), dtype=np.float64)
    for i in range(len(images)):
        out[i] = augment_crop(images[i], rng, train)
    return out


# ---------------------------------------------------------------- captions

COLORS = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 0.9, 0.1),
    "blue": (0.15, 0.25, 1.0),
    "yellow": (1.0, 0.95, 0.1),
    "white": (1.0, 1.0, 1.0),
}
SHAPES = ("square", "circle", "triangle")


@dataclass(frozen=True)
class Vocab:
    words: tuple[str, ...]

    @classmethod
    def default(cls) -> "Vocab":
        return cls(("<bos>", "<eos>", "a", "and") + tuple(COLORS) + SHAPES)

    @property
    def bos(self) -> int:
        return 0

    @property
    def eos(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        index = {w: i for i, w in enumerate(self.words)}
        return [index[w] for w in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids if int(i) not in (self.bos, self.eos))


@dataclass(frozen=True)
class ShapeItem:
    row: int
    col: int
    color: str
    shape: str
    size: int
    dy: int
    dx: int


@dataclass(frozen=True)
class CaptionConfig:
    n_samples: int = 1000
    image_hw: int = 32
    grid: int = 2
    max_shapes: int = 3
    noise: float = 0.03


@dataclass
class CaptionDataset:
    images: np.ndarray  # N x 3 x H x W float32
    tokens: list[np.ndarray]  # ids ending in EOS, BOS implicit
    scenes: list[tuple[ShapeItem, ...]] | None = None
    vocab: Vocab = field(default_factory=Vocab.default)

    task = "captions"

    def __len__(self) -> int:
        return len(self.images)


def shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        r = size / 2.0
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r
    if shape == "triangle":
        # apex at top centre, base along the bottom row
        return np.abs(xx - size / 2.0) <= yy / 2.0
    raise ValueError(f"unknown shape {shape!r}")


def random_scene(rng: np.random.Generator, config: CaptionConfig) -> tuple[ShapeItem, ...]:
    cells = config.grid * config.grid
    k = int(rng.integers(1, min(config.max_shapes, cells) + 1))
    chosen = np.sort(rng.choice(cells, size=k, replace=False))
    cell = config.image_hw // config.grid
    colors = list(COLORS)
    items = []
    for c in chosen:
        size = int(rng.integers(cell - 6, cell - 3))
        slack = cell - size
        items.append(
            ShapeItem(
                row=int(c) // config.grid,
                col=int(c) % config.grid,
                color=colors[int(rng.integers(len(colors)))],
                shape=SHAPES[int(rng.integers(len(SHAPES)))],
                size=size,
                dy=int(rng.integers(0, slack + 1)),
                dx=int(rng.integers(0, slack + 1)),
            )
        )
    return tuple(items)


def render_scene(scene, config: CaptionConfig, noise_rng: np.random.Generator | None = None) -> np.ndarray:
    hw = config.image_hw
    cell = hw // config.grid
    img = np.full((3, hw, hw), 0.1)
    for it in scene:
        y, x = it.row * cell + it.dy, it.col * cell + it.dx
        mask = shape_mask(it.shape, it.size)
        for ch, v in enumerate(COLORS[it.color]):
            img[ch, y : y + it.size, x : x + it.size][mask] = v
    if noise_rng is not None and config.noise > 0:
        img = img + noise_rng.normal(0.0, config.noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def caption_for_scene(scene, vocab: Vocab) -> np.ndarray:
    ordered = sorted(scene, key=lambda it: (it.row, it.col))
    text = " and ".join(f"a {it.color} {it.shape}" for it in ordered)
    return np.array(vocab.encode(text) + [vocab.eos], dtype=np.int64)


def synth_captions(seed: int, config: CaptionConfig) -> tuple[CaptionDataset, Vocab]:
    vocab = Vocab.default()
    hw = config.image_hw
    images = np.zeros((config.n_samples, 3, hw, hw), dtype=np.float32)
    tokens, scenes = [], []
    for i in range(config.n_samples):
        rng = sample_rng(seed, i)
        scene = random_scene(rng, config)
        images[i] = render_scene(scene, config, rng)
        tokens.append(caption_for_scene(scene, vocab))
        scenes.append(scene)
    return CaptionDataset(images, tokens, scenes, vocab), vocab


# ---------------------------------------------------------------- file format

_HEADER = struct.Struct("<4s7I")


def save(dataset, path: str) -> None:
    images = np.ascontiguousarray(dataset.images, dtype="<f4")
    n = len(images)
    c, h, w = images.shape[1:] if n else _empty_dims(dataset)
    glyphs = isinstance(dataset, GlyphDataset)
    label_width = SEQ_LEN if glyphs else MAX_CAPTION
    tag = TASK_GLYPHS if glyphs else TASK_CAPTIONS
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, h, w, label_width, tag))
        for i in range(n):
            fh.write(images[i].tobytes())
            if glyphs:
                fh.write(np.asarray(dataset.labels[i], dtype=np.uint8).tobytes())
            else:
                ids = np.asarray(dataset.tokens[i], dtype="<u4")
                fh.write(struct.pack("<I", len(ids)))
                fh.write(ids.tobytes())


def _empty_dims(dataset) -> tuple[int, int, int]:
    if dataset.images.ndim == 4:
        return tuple(int(d) for d in dataset.images.shape[1:])
    return (1, CANVAS, CANVAS) if isinstance(dataset, GlyphDataset) else (3, 32, 32)


def load(path: str):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, n, c, h, w, label_width, tag = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    if tag not in (TASK_GLYPHS, TASK_CAPTIONS):
        raise DatasetFormatError(f"{path}: unknown task tag {tag}")
    px = c * h * w * 4
    off = _HEADER.size
    images = np.zeros((n, c, h, w), dtype=np.float32)
    labels = np.zeros((n, label_width), dtype=np.uint8)
    tokens = []

    def need(k: int):
        if off + k > len(raw):
            raise TruncatedPayloadError(f"{path}: header declares {n} samples but payload ends early")

    for i in range(n):
        need(px)
        images[i] = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w)
        off += px
        if tag == TASK_GLYPHS:
            need(label_width)
            labels[i] = np.frombuffer(raw, dtype=np.uint8, count=label_width, offset=off)
            off += label_width
        else:
            need(4)
            (length,) = struct.unpack_from("<I", raw, off)
            off += 4
            need(4 * length)
            tokens.append(np.frombuffer(raw, dtype="<u4", count=length, offset=off).astype(np.int64))
            off += 4 * length
    if off != len(raw):
        raise TruncatedPayloadError(f"{path}: {len(raw) - off} bytes past the declared {n} samples")
    if tag == TASK_GLYPHS:
        return GlyphDataset(images, labels)
    return CaptionDataset(images, tokens)
