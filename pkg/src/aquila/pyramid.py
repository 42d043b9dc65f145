"""Toy multi-scale vision encoder and per-scale projectors.

The encoder is a stand-in for a convolutional backbone: a 4x4 average-pool
stem followed by stride-2 average pooling at every later stage, each stage
ending in a linear channel map and GELU.  It always stays frozen, so it is
written in plain numpy.  The projectors (two-layer MLPs, one per scale)
are trainable and built from :mod:`aquila.numerics` ops.

Token grids are stored row-major: token ``r * side + c`` is grid cell (r, c).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, FormatError, ShapeError, TruncatedFileError

REFERENCE_RESOLUTION = 1024
REFERENCE_CHANNELS = (384, 768, 1536, 3072)
REFERENCE_PROJECTED_DIM = 1024


@dataclass(frozen=True)
class PyramidConfig:
    resolution: int = 64
    channels: tuple[int, ...] = (16, 32, 64)
    projected_dim: int = 32
    projector_hidden: int | None = None  # defaults to projected_dim

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.validate()

    @classmethod
    def reference(cls) -> "PyramidConfig":
        return cls(REFERENCE_RESOLUTION, REFERENCE_CHANNELS, REFERENCE_PROJECTED_DIM)

    @property
    def num_scales(self) -> int:
        return len(self.channels)

    @property
    def sides(self) -> tuple[int, ...]:
        return tuple(self.resolution // 4 // 2**s for s in range(self.num_scales))

    @property
    def hidden(self) -> int:
        return self.projector_hidden or self.projected_dim

    def validate(self) -> None:
        if self.num_scales < 1:
            raise ConfigurationError("need at least one scale")
        stride = 4 * 2 ** (self.num_scales - 1)
        if self.resolution <= 0 or self.resolution % stride:
            raise ConfigurationError(
                f"resolution {self.resolution} is not divisible by {stride} "
                f"({self.num_scales} scales)"
            )
        if any(c <= 0 for c in self.channels) or any(
            b <= a for a, b in zip(self.channels, self.channels[1:])
        ):
            raise ConfigurationError(f"channels must be positive and strictly increasing: {self.channels}")
        if self.projected_dim <= 0 or self.hidden <= 0:
            raise ConfigurationError("projected and hidden dims must be positive")


@dataclass
class MultiScaleFeatures:
    """Per-scale token grids, each (..., side**2, width).

    ``grids`` hold ndarrays for raw encoder output and Tensors once projected.
    """

    grids: list
    sides: tuple[int, ...]
    projected: bool = False
    encoded: bool = False  # positional tables already added

    def __post_init__(self):
        if len(self.grids) != len(self.sides):
            raise ShapeError("one grid per side required")
        for g, side in zip(self.grids, self.sides):
            if g.shape[-2] != side * side:
                raise ShapeError(f"grid of side {side} holds {g.shape[-2]} tokens")

    @property
    def num_scales(self) -> int:
        return len(self.sides)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(g.shape[-1] for g in self.grids)

    @property
    def token_counts(self) -> tuple[int, ...]:
        return tuple(g.shape[-2] for g in self.grids)

    def select(self, index) -> "MultiScaleFeatures":
        """Slice the leading batch axis of raw features."""
        return MultiScaleFeatures([g[index] for g in self.grids], self.sides, self.projected, self.encoded)


def init_encoder(config: PyramidConfig, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    weights = {}
    c_in = 3
    for s, c_out in enumerate(config.channels):
        weights[f"pyramid.{s}.weight"] = (rng.standard_normal((c_out, c_in)) * np.sqrt(2.0 / c_in)).astype(dtype)
        weights[f"pyramid.{s}.bias"] = (0.1 * rng.standard_normal(c_out)).astype(dtype)
        c_in = c_out
    return weights


def _avg_pool(x: np.ndarray, f: int) -> np.ndarray:
    *lead, h, w, c = x.shape
    return x.reshape(*lead, h // f, f, w // f, f, c).mean(axis=(-4, -2))


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _channel_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def extract_pyramid(image: np.ndarray, config: PyramidConfig, weights: dict) -> MultiScaleFeatures:
    """Run the frozen encoder on one image (R, R, 3) or a batch (B, R, R, 3).

    Pixel values are expected in [0, 1].
    """
    config.validate()
    image = np.asarray(image)
    r = config.resolution
    if image.shape[-3:] != (r, r, 3):
        raise ConfigurationError(f"image shape {image.shape[-3:]} does not match resolution {r}")
    dtype = weights["pyramid.0.weight"].dtype
    x = image.astype(dtype, copy=False)
    grids = []
    for s, side in enumerate(config.sides):
        x = _avg_pool(x, 4 if s == 0 else 2)
        x = _gelu_np(x @ weights[f"pyramid.{s}.weight"].T + weights[f"pyramid.{s}.bias"])
        grids.append(_channel_norm(x).reshape(*x.shape[:-3], side * side, x.shape[-1]))
    return MultiScaleFeatures(grids, config.sides, projected=False)


def init_projectors(config: PyramidConfig, rng: np.random.Generator, dtype=np.float64) -> dict[str, nx.Tensor]:
    params = {}
    h, d = config.hidden, config.projected_dim
    for s, c in enumerate(config.channels):
        params[f"projector.{s}.w1"] = rng.standard_normal((h, c)) / np.sqrt(c)
        params[f"projector.{s}.b1"] = np.zeros(h)
        params[f"projector.{s}.w2"] = rng.standard_normal((d, h)) / np.sqrt(h)
        params[f"projector.{s}.b2"] = np.zeros(d)
    return {k: nx.Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


def project_scales(features: MultiScaleFeatures, projectors: dict) -> MultiScaleFeatures:
    """Map every scale to the shared width with its own Linear-GELU-Linear."""
    if features.projected:
        raise ShapeError("features are already projected")
    out = []
    widths = set()
    for s, grid in enumerate(features.grids):
        w1, b1 = projectors[f"projector.{s}.w1"], projectors[f"projector.{s}.b1"]
        w2, b2 = projectors[f"projector.{s}.w2"], projectors[f"projector.{s}.b2"]
        if w1.dims[1] != grid.shape[-1]:
            raise ShapeError(f"projector {s} expects width {w1.dims[1]}, scale has {grid.shape[-1]}")
        hidden = nx.gelu(nx.linear(grid, w1, b1))
        out.append(nx.linear(hidden, w2, b2))
        widths.add(w2.dims[0])
    if len(widths) != 1:
        raise ShapeError(f"projectors disagree on output width: {sorted(widths)}")
    return MultiScaleFeatures(out, features.sides, projected=True)


# image file format: u32 width, u32 height (little-endian), then RGB bytes row-major


def write_image(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError("expected (H, W, 3) uint8 pixels")
    h, w, _ = pixels.shape
    Path(path).write_bytes(struct.pack("<II", w, h) + np.ascontiguousarray(pixels).tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: missing image header")
    w, h = struct.unpack_from("<II", raw)
    body = raw[8:]
    if len(body) != w * h * 3:
        raise TruncatedFileError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    if w == 0 or h == 0:
        raise FormatError(f"{path}: empty image")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def normalize(pixels: np.ndarray, dtype=np.float64) -> np.ndarray:
    return np.asarray(pixels, dtype=dtype) / 255.0


def total_tokens(sides: Sequence[int]) -> int:
    return sum(s * s for s in sides)
