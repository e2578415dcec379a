"""Context encoder, discriminator and the fixed feature network."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor_core import (
    DimensionError,
    Tensor,
    as_tensor,
    conv2d,
    conv_output_size,
    fully_connected,
    maxpool2,
    relu,
    reshape,
    sigmoid,
    sub,
    upsample_nearest2,
)

ENC_KERNEL, ENC_STRIDE, ENC_PAD = 4, 2, 1


# configs ------------------------------------------------------------------------

@dataclass(frozen=True)
class CeConfig:
    """Geometry and widths of the context encoder-decoder.

    The encoder is a chain of 4x4 stride-2 convs; a fully connected bottleneck
    feeds a second fully connected layer producing the decoder seed map, which
    has the last encoder width. Each decoder layer is a nearest 2x upsample
    followed by a 3x3 conv; ``decoder_channels[-1]`` must be 3.
    """

    input_size: int
    prediction_size: int
    hole_size: int
    encoder_channels: tuple[int, ...]
    bottleneck: int
    decoder_channels: tuple[int, ...]

    def __post_init__(self):
        if self.prediction_size * 2 != self.input_size:
            raise ValueError(f"prediction size {self.prediction_size} must be half of input {self.input_size}")
        if (self.prediction_size - self.hole_size) % 2 or not 0 < self.hole_size <= self.prediction_size:
            raise ValueError(f"hole {self.hole_size} must sit centered in prediction {self.prediction_size}")
        if self.decoder_channels[-1] != 3:
            raise ValueError("last decoder layer must output 3 channels")
        if self.encoder_map_size < 1 or self.encoder_map_size * 2 ** len(self.encoder_channels) != self.input_size:
            raise ValueError(f"input {self.input_size} not divisible by 2^{len(self.encoder_channels)}")
        if self.decoder_seed_size * 2 ** len(self.decoder_channels) != self.prediction_size:
            raise ValueError(f"prediction {self.prediction_size} not reachable with {len(self.decoder_channels)} upsamples")

    @classmethod
    def paper(cls) -> "CeConfig":
        return cls(128, 64, 56, (64, 64, 128, 256, 512), 2000, (256, 128, 64, 3))

    @classmethod
    def desk(cls) -> "CeConfig":
        return cls(32, 16, 12, (16, 16, 32, 64), 128, (32, 16, 3))

    @property
    def band_width(self) -> int:
        return (self.prediction_size - self.hole_size) // 2

    @property
    def encoder_map_size(self) -> int:
        size = self.input_size
        for _ in self.encoder_channels:
            size = conv_output_size(size, ENC_KERNEL, ENC_STRIDE, ENC_PAD)
        return size

    @property
    def decoder_seed_size(self) -> int:
        return self.prediction_size // 2 ** len(self.decoder_channels)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        cin = 3
        for i, cout in enumerate(self.encoder_channels):
            shapes[f"enc{i}.w"] = (ENC_KERNEL, ENC_KERNEL, cin, cout)
            shapes[f"enc{i}.b"] = (cout,)
            cin = cout
        flat = self.encoder_map_size**2 * cin
        seed = self.decoder_seed_size**2 * cin
        shapes["bottleneck.w"] = (self.bottleneck, flat)
        shapes["bottleneck.b"] = (self.bottleneck,)
        shapes["seed.w"] = (seed, self.bottleneck)
        shapes["seed.b"] = (seed,)
        for i, cout in enumerate(self.decoder_channels):
            shapes[f"dec{i}.w"] = (3, 3, cin, cout)
            shapes[f"dec{i}.b"] = (cout,)
            cin = cout
        return shapes

    def extents(self) -> list[int]:
        return [self.input_size, self.prediction_size, self.hole_size,
                len(self.encoder_channels), *self.encoder_channels, self.bottleneck,
                len(self.decoder_channels), *self.decoder_channels]

    @classmethod
    def from_extents(cls, ext: list[int]) -> "CeConfig":
        m, pred, hole, n_enc = ext[:4]
        enc = tuple(ext[4 : 4 + n_enc])
        bottleneck = ext[4 + n_enc]
        n_dec = ext[5 + n_enc]
        dec = tuple(ext[6 + n_enc : 6 + n_enc + n_dec])
        if len(ext) != 6 + n_enc + n_dec:
            raise ValueError("malformed context-encoder config block")
        return cls(m, pred, hole, enc, bottleneck, dec)


@dataclass(frozen=True)
class DiscConfig:
    input_size: int
    channels: tuple[int, ...]

    @classmethod
    def paper(cls) -> "DiscConfig":
        return cls(64, (32, 64, 128, 256))

    @classmethod
    def desk(cls) -> "DiscConfig":
        return cls(16, (8, 16, 32, 64))

    @property
    def map_size(self) -> int:
        size = self.input_size
        for _ in self.channels:
            size = conv_output_size(size, ENC_KERNEL, ENC_STRIDE, ENC_PAD)
        return size

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        cin = 3
        for i, cout in enumerate(self.channels):
            shapes[f"conv{i}.w"] = (ENC_KERNEL, ENC_KERNEL, cin, cout)
            shapes[f"conv{i}.b"] = (cout,)
            cin = cout
        shapes["out.w"] = (1, self.map_size**2 * cin)
        shapes["out.b"] = (1,)
        return shapes

    def extents(self) -> list[int]:
        return [self.input_size, len(self.channels), *self.channels]

    @classmethod
    def from_extents(cls, ext: list[int]) -> "DiscConfig":
        if len(ext) < 2 or len(ext) != 2 + ext[1]:
            raise ValueError("malformed discriminator config block")
        return cls(ext[0], tuple(ext[2:]))


VGG_CONVS_PER_BLOCK = (2, 2, 3, 1)


@dataclass(frozen=True)
class FeatureNetConfig:
    """VGG-16 prefix up to ``conv4_1``: 3x3 convs + ReLU, 2x2 max pools between blocks."""

    block_channels: tuple[int, ...]
    convs_per_block: tuple[int, ...] = VGG_CONVS_PER_BLOCK

    @classmethod
    def paper(cls) -> "FeatureNetConfig":
        return cls((64, 128, 256, 512))

    @classmethod
    def desk(cls) -> "FeatureNetConfig":
        return cls((8, 16, 32, 64))

    @property
    def layers(self) -> list[tuple[str, int, int, int]]:
        """``(name, block, in_channels, out_channels)`` in execution order."""
        out = []
        cin = 3
        for b, (c, n) in enumerate(zip(self.block_channels, self.convs_per_block), start=1):
            for i in range(1, n + 1):
                out.append((f"conv{b}_{i}", b, cin, c))
                cin = c
        return out

    @property
    def tap_names(self) -> list[str]:
        return [name for name, *_ in self.layers]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for name, _, cin, cout in self.layers:
            shapes[f"{name}.w"] = (3, 3, cin, cout)
            shapes[f"{name}.b"] = (cout,)
        shapes["mean"] = (3,)
        return shapes

    def extents(self) -> list[int]:
        return [len(self.block_channels), *self.block_channels, *self.convs_per_block]

    @classmethod
    def from_extents(cls, ext: list[int]) -> "FeatureNetConfig":
        n = ext[0] if ext else 0
        if len(ext) != 1 + 2 * n:
            raise ValueError("malformed feature-net config block")
        return cls(tuple(ext[1 : 1 + n]), tuple(ext[1 + n :]))


def tap_block(name: str) -> int:
    try:
        return int(name[4 : name.index("_")])
    except ValueError:
        raise KeyError(f"unknown tap {name!r}") from None


def tap_stride(name: str) -> int:
    """Cumulative downsampling factor of a feature tap."""
    return 2 ** (tap_block(name) - 1)


# params --------------------------------------------------------------------------

@dataclass
class Params:
    """An ordered set of named tensors belonging to one network."""

    config: CeConfig | DiscConfig | FeatureNetConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "Params":
        tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()}
        return type(self)(self.config, tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def equals(self, other: "Params") -> bool:
        """Bit-level equality of config and every tensor."""
        if self.config != other.config or self.tensors.keys() != other.tensors.keys():
            return False
        return all(np.array_equal(a.data, other.tensors[k].data) and a.data.tobytes() == other.tensors[k].data.tobytes()
                   for k, a in self.tensors.items())


class CeParams(Params):
    pass


class DiscParams(Params):
    pass


class FeatureNetParams(Params):
    """Frozen feature-network weights. ``mean`` is the per-channel input offset."""

    frozen = True

    @property
    def mean(self) -> np.ndarray:
        return self.tensors["mean"].data


_PARAM_TYPES = {CeConfig: CeParams, DiscConfig: DiscParams, FeatureNetConfig: FeatureNetParams}


def params_from_arrays(config, arrays: dict[str, np.ndarray]) -> Params:
    shapes = config.param_shapes()
    if list(arrays) != list(shapes):
        raise DimensionError(f"parameter names {list(arrays)} do not match config {list(shapes)}")
    for name, shape in shapes.items():
        if arrays[name].shape != shape:
            raise DimensionError(f"{name}: expected shape {shape}, got {arrays[name].shape}")
    trainable = not isinstance(config, FeatureNetConfig)
    cls = _PARAM_TYPES[type(config)]
    return cls(config, {k: Tensor(v, requires_grad=trainable) for k, v in arrays.items()})


def init_params(config, seed: int, mean=None) -> Params:
    """He-normal weights (std ``sqrt(2 / fan_in)``) and zero biases, drawn from ``seed``.

    For a feature network, ``mean`` sets the per-channel input offset
    (zeros when omitted).
    """
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in config.param_shapes().items():
        if name == "mean":
            arrays[name] = np.zeros(3) if mean is None else np.asarray(mean, dtype=np.float64).reshape(3)
        elif name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1])) if len(shape) == 4 else shape[1]
            arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params_from_arrays(config, arrays)


def zero_params(config) -> Params:
    return params_from_arrays(config, {k: np.zeros(s) for k, s in config.param_shapes().items()})


# forwards ------------------------------------------------------------------------

def _check_image(x: Tensor, size: int, what: str) -> None:
    if x.shape != (size, size, 3):
        raise DimensionError(f"{what} expects a {size}x{size}x3 image, got {x.shape}")


def ce_forward(params: CeParams, x) -> Tensor:
    """Predict the ``(M/2, M/2, 3)`` center from a masked ``(M, M, 3)`` image."""
    cfg: CeConfig = params.config
    x = as_tensor(x)
    _check_image(x, cfg.input_size, "context encoder")
    h = x
    for i in range(len(cfg.encoder_channels)):
        h = relu(conv2d(h, params[f"enc{i}.w"], params[f"enc{i}.b"], ENC_STRIDE, ENC_PAD))
    h = relu(fully_connected(h, params["bottleneck.w"], params["bottleneck.b"]))
    h = relu(fully_connected(h, params["seed.w"], params["seed.b"]))
    s = cfg.decoder_seed_size
    h = reshape(h, (s, s, cfg.encoder_channels[-1]))
    last = len(cfg.decoder_channels) - 1
    for i in range(last + 1):
        h = conv2d(upsample_nearest2(h), params[f"dec{i}.w"], params[f"dec{i}.b"], 1, 1)
        h = sigmoid(h) if i == last else relu(h)
    return h


def disc_forward(params: DiscParams, patch) -> Tensor:
    """Probability in ``(0, 1)`` that ``patch`` is a natural image center."""
    cfg: DiscConfig = params.config
    patch = as_tensor(patch)
    _check_image(patch, cfg.input_size, "discriminator")
    h = patch
    for i in range(len(cfg.channels)):
        h = relu(conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], ENC_STRIDE, ENC_PAD))
    return reshape(sigmoid(fully_connected(h, params["out.w"], params["out.b"])), ())


def featnet_forward(params: FeatureNetParams, img, taps) -> dict[str, Tensor]:
    """Post-ReLU activations at the requested taps.

    Runs only as deep as the deepest tap. Raises ``DimensionError`` naming the
    tap when the image extents cannot be pooled down to it.
    """
    cfg: FeatureNetConfig = params.config
    taps = list(taps)
    if not taps:
        return {}
    names = cfg.tap_names
    for t in taps:
        if t not in names:
            raise KeyError(f"unknown tap {t!r}; available: {names}")
    img = as_tensor(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"feature net expects (H, W, 3), got {img.shape}")
    for t in taps:
        factor = tap_stride(t)
        if img.shape[0] % factor or img.shape[1] % factor:
            raise DimensionError(f"tap {t} needs extents divisible by {factor}, got {img.shape[0]}x{img.shape[1]}")
    deepest = max(names.index(t) for t in taps)

    wanted = set(taps)
    out: dict[str, Tensor] = {}
    h = sub(img, params.mean)
    block = 1
    for name, b, _, _ in cfg.layers[: deepest + 1]:
        if b != block:
            h = maxpool2(h)
            block = b
        h = relu(conv2d(h, params[f"{name}.w"], params[f"{name}.b"], 1, 1))
        if name in wanted:
            out[name] = h
    return {t: out[t] for t in taps}
