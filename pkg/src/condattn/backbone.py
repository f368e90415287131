"""VGG-style feature extractor with two local-feature taps and a global feature.

The full-scale preset is the 15-conv + fc stack where the first two VGG
max-pools are moved behind the extra ``conv6``/``conv7`` layers; desk and
tiny presets keep the same two-tap layout with far fewer channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    stage_widths: tuple[int, ...]
    convs_per_stage: tuple[int, ...]
    pool_plan: tuple[str, ...]
    fc_dim: int = 64
    input_hw: int = 54
    in_channels: int = 1
    use_batchnorm: bool = True
    dropout_first: float = 0.3
    dropout_rest: float = 0.4
    taps: tuple[str, str] = ("conv4", "conv5")

    def __post_init__(self):
        if len(self.stage_widths) != len(self.convs_per_stage):
            raise ConfigError("stage_widths and convs_per_stage differ in length")
        names = self.layer_names()
        for name in tuple(self.pool_plan) + tuple(self.taps):
            if name not in names:
                raise ConfigError(f"unknown layer {name!r}; layers are {names}")
        hw = {ls.name: ls.hw for ls in layer_shapes(self)}
        if hw[self.taps[0]] <= hw[self.taps[1]]:
            raise ConfigError(f"tap {self.taps[0]} must be spatially finer than {self.taps[1]}")

    def layer_names(self) -> list[str]:
        names = []
        for s, n in enumerate(self.convs_per_stage, start=1):
            names += [f"conv{s}"] if n == 1 else [f"conv{s}_{k}" for k in range(1, n + 1)]
        return names

    def layer_widths(self) -> list[int]:
        return [w for w, n in zip(self.stage_widths, self.convs_per_stage) for _ in range(n)]


def full_scale_config(**overrides) -> BackboneConfig:
    kw = dict(
        stage_widths=(64, 128, 256, 512, 512, 512, 512),
        convs_per_stage=(2, 2, 3, 3, 3, 1, 1),
        pool_plan=("conv3_3", "conv4_3", "conv5_3", "conv6", "conv7"),
        fc_dim=512,
        input_hw=54,
        taps=("conv4_3", "conv5_3"),
    )
    kw.update(overrides)
    return BackboneConfig(**kw)


def desk_config(**overrides) -> BackboneConfig:
    kw = dict(
        stage_widths=(8, 16, 32, 32, 32),
        convs_per_stage=(1, 1, 1, 1, 1),
        pool_plan=("conv1", "conv2", "conv4", "conv5"),
        fc_dim=64,
        input_hw=54,
        taps=("conv4", "conv5"),
    )
    kw.update(overrides)
    return BackboneConfig(**kw)


def tiny_config(**overrides) -> BackboneConfig:
    kw = dict(
        stage_widths=(4, 8),
        convs_per_stage=(1, 1),
        pool_plan=("conv1", "conv2"),
        fc_dim=16,
        input_hw=12,
        use_batchnorm=False,
        dropout_first=0.0,
        dropout_rest=0.0,
        taps=("conv1", "conv2"),
    )
    kw.update(overrides)
    return BackboneConfig(**kw)


@dataclass
class LayerShape:
    name: str
    channels: int
    hw: int  # spatial size of the conv output
    pool_pad: int  # zero rows/cols added before pooling to tile exactly
    stride: int  # input pixels per output cell


def layer_shapes(config: BackboneConfig) -> list[LayerShape]:
    """Spatial arithmetic for every conv layer (3x3, stride 1, pad 1)."""
    hw, stride = config.input_hw, 1
    shapes = []
    for name, width in zip(config.layer_names(), config.layer_widths()):
        if hw < 1:
            raise ConfigError(f"input_hw {config.input_hw} too small for pool plan")
        pad = 0
        cell_stride = stride
        if name in config.pool_plan:
            if hw < 2:
                raise ConfigError(f"input_hw {config.input_hw} too small for pool plan at {name}")
            pad = hw % 2
        shapes.append(LayerShape(name, width, hw, pad, cell_stride))
        if name in config.pool_plan:
            hw = (hw + pad) // 2
            stride *= 2
    return shapes


def flat_dim(config: BackboneConfig) -> int:
    last = layer_shapes(config)[-1]
    hw = (last.hw + last.pool_pad) // 2 if last.name in config.pool_plan else last.hw
    return last.channels * hw * hw


@dataclass
class FeatureBundle:
    L1: Tensor
    L2: Tensor
    G: Tensor
    strides: tuple[int, int] = field(default=(1, 1))

    def locals(self, scales: str) -> list[Tensor]:
        return [self.L2] if scales == "att1" else [self.L1, self.L2]

    def local_strides(self, scales: str) -> list[int]:
        return [self.strides[1]] if scales == "att1" else list(self.strides)


def buffer_names(config: BackboneConfig) -> list[str]:
    if not config.use_batchnorm:
        return []
    return [f"{n}/{b}" for n in config.layer_names() for b in ("bn_mean", "bn_var")]


def build_backbone(config: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Initial parameters and batch-norm buffers keyed by hierarchical name."""
    shapes = layer_shapes(config)
    if shapes[-1].hw < 1:
        raise ConfigError("input_hw too small for pool plan")
    params: dict[str, np.ndarray] = {}
    c_in = config.in_channels
    for ls in shapes:
        fan_in = c_in * 9
        bound = np.sqrt(6.0 / fan_in)
        params[f"{ls.name}/w"] = rng.uniform(-bound, bound, (ls.channels, c_in, 3, 3))
        if config.use_batchnorm:
            params[f"{ls.name}/bn_scale"] = np.ones(ls.channels)
            params[f"{ls.name}/bn_shift"] = np.zeros(ls.channels)
            params[f"{ls.name}/bn_mean"] = np.zeros(ls.channels)
            params[f"{ls.name}/bn_var"] = np.ones(ls.channels)
        else:
            params[f"{ls.name}/b"] = np.zeros(ls.channels)
        c_in = ls.channels
    fan_in = flat_dim(config)
    bound = np.sqrt(3.0 / fan_in)
    params["fc/w"] = rng.uniform(-bound, bound, (fan_in, config.fc_dim))
    params["fc/b"] = np.zeros(config.fc_dim)
    return params


def parameter_count(config: BackboneConfig) -> int:
    """Closed-form count of learnable backbone parameters (buffers excluded)."""
    total, c_in = 0, config.in_channels
    for w in config.layer_widths():
        total += w * c_in * 9 + (2 * w if config.use_batchnorm else w)
        c_in = w
    return total + flat_dim(config) * config.fc_dim + config.fc_dim


def backbone_forward(
    image: Tensor,
    params: dict[str, Tensor],
    buffers: dict[str, np.ndarray],
    config: BackboneConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> FeatureBundle:
    """Run the conv stack on ``[N x] C x H x W`` images.

    ``params`` maps names to tensors (graph leaves when training), ``buffers``
    holds the batch-norm running statistics as plain arrays.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != (config.in_channels, config.input_hw, config.input_hw):
        raise ad.ShapeError(
            f"backbone expects [N x] {config.in_channels}x{config.input_hw}x{config.input_hw}, got {image.shape}"
        )
    if train and rng is None and (config.dropout_first > 0 or config.dropout_rest > 0):
        raise ValueError("train-mode dropout needs an rng")
    taps: dict[str, Tensor] = {}
    strides: dict[str, int] = {}
    for i, ls in enumerate(layer_shapes(config)):
        n = ls.name
        if config.use_batchnorm:
            x = ad.conv2d(x, params[f"{n}/w"], None, stride=1, pad=1)
            running = {"mean": buffers[f"{n}/bn_mean"], "var": buffers[f"{n}/bn_var"]}
            x = ad.batchnorm(x, params[f"{n}/bn_scale"], params[f"{n}/bn_shift"], running, train)
        else:
            x = ad.conv2d(x, params[f"{n}/w"], params[f"{n}/b"], stride=1, pad=1)
        x = ad.relu(x)
        if n in config.taps:
            taps[n] = x
            strides[n] = ls.stride
        rate = config.dropout_first if i == 0 else config.dropout_rest
        x = ad.dropout(x, rate, rng, train)
        if n in config.pool_plan:
            x = ad.maxpool2d(ad.pad2d(x, ls.pool_pad, ls.pool_pad), 2, 2)
    flat = x.reshape((x.shape[0], -1))
    g = ad.matmul(flat, params["fc/w"]) + params["fc/b"]
    l1, l2 = taps[config.taps[0]], taps[config.taps[1]]
    if squeeze:
        l1, l2, g = l1[0], l2[0], g[0]
    return FeatureBundle(l1, l2, g, (strides[config.taps[0]], strides[config.taps[1]]))
