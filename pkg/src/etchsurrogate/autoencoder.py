"""Convolutional autoencoder with hand-derived analytic gradients.

Encoder: a stack of valid (unpadded) strided convolutions, flatten, then two
fully connected layers down to the latent vector. Decoder: the exact mirror,
with transposed convolutions whose output padding is forced by the encoder's
shape chain. tanh activation after every parametric layer, output included.

All tensors are float64. The layer order used everywhere (initialization,
gradients, checkpoints) is: encoder layers first, decoder layers second, each
as (weights, bias).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ValidationError
from .wafer_data import DEFAULT_RADIUS, WaferGrid, apply_mask

CHECKPOINT_MAGIC = b"ETSG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Architecture descriptor; the default mirrors the production setup:

    32x32 input -> conv stack (filters 5, 3, 2 / channels 50, 100, 200,
    stride 2) -> spatial sizes 14, 6, 3 -> flatten (1800) -> dense 1800 ->
    dense to latent size 8.
    """

    grid_n: int = 32
    latent_p: int = 8
    conv_filters: tuple[int, ...] = (5, 3, 2)
    conv_channels: tuple[int, ...] = (50, 100, 200)
    conv_stride: int = 2
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if len(self.conv_filters) != len(self.conv_channels):
            raise ConfigError(
                f"conv_filters ({len(self.conv_filters)}) and conv_channels "
                f"({len(self.conv_channels)}) must have the same length"
            )
        if not self.conv_filters:
            raise ConfigError("at least one convolution layer is required")
        if self.activation != "tanh":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.conv_stride < 1:
            raise ConfigError(f"conv_stride must be >= 1, got {self.conv_stride}")
        if self.grid_n < 1 or self.latent_p < 1:
            raise ConfigError("grid_n and latent_p must be positive")
        if any(f < 1 for f in self.conv_filters) or any(c < 1 for c in self.conv_channels):
            raise ConfigError("filters and channels must be positive")
        sizes = []
        size = self.grid_n
        for f in self.conv_filters:
            if size < f:
                raise ConfigError(
                    f"conv filter {f} does not fit the remaining spatial size {size}"
                )
            size = (size - f) // self.conv_stride + 1
            if size < 1:
                raise ConfigError("conv stack reduces spatial size below 1")
            sizes.append(size)
        object.__setattr__(self, "_conv_sizes", tuple(sizes))
        if self.flat_size <= self.latent_p:
            raise ConfigError(
                f"flattened conv output ({self.flat_size}) must exceed latent_p ({self.latent_p})"
            )

    @property
    def conv_sizes(self) -> tuple[int, ...]:
        """Spatial side length after each encoder convolution."""
        return self._conv_sizes

    @property
    def flat_size(self) -> int:
        return self.conv_channels[-1] * self.conv_sizes[-1] ** 2


@dataclass(frozen=True)
class _LayerSpec:
    kind: str  # "conv" | "dense" | "deconv"
    a: int  # conv/deconv: in channels; dense: in features
    b: int  # conv/deconv: out channels; dense: out features
    f: int = 0  # filter size
    stride: int = 1
    out_pad: int = 0  # deconv only

    @property
    def w_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.b, self.a, self.f, self.f)
        if self.kind == "deconv":
            return (self.a, self.b, self.f, self.f)
        return (self.a, self.b)

    @property
    def fans(self) -> tuple[int, int]:
        if self.kind == "dense":
            return self.a, self.b
        return self.a * self.f * self.f, self.b * self.f * self.f


def encoder_specs(config: ArchConfig) -> tuple[_LayerSpec, ...]:
    specs = []
    c_in = 1
    for f, c_out in zip(config.conv_filters, config.conv_channels):
        specs.append(_LayerSpec("conv", c_in, c_out, f=f, stride=config.conv_stride))
        c_in = c_out
    flat = config.flat_size
    specs.append(_LayerSpec("dense", flat, flat))
    specs.append(_LayerSpec("dense", flat, config.latent_p))
    return tuple(specs)


def decoder_specs(config: ArchConfig) -> tuple[_LayerSpec, ...]:
    """Mirror of the encoder; output padding recovers sizes the strided
    convolutions rounded away."""
    flat = config.flat_size
    specs = [
        _LayerSpec("dense", config.latent_p, flat),
        _LayerSpec("dense", flat, flat),
    ]
    sizes = (config.grid_n,) + config.conv_sizes  # per-layer input sizes of the encoder
    channels = (1,) + config.conv_channels
    for i in reversed(range(len(config.conv_filters))):
        f = config.conv_filters[i]
        target = sizes[i]
        out_pad = target - ((sizes[i + 1] - 1) * config.conv_stride + f)
        specs.append(
            _LayerSpec(
                "deconv",
                channels[i + 1],
                channels[i],
                f=f,
                stride=config.conv_stride,
                out_pad=out_pad,
            )
        )
    return tuple(specs)


@dataclass(frozen=True)
class LayerParam:
    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        for name in ("w", "b"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return self.w.size + self.b.size


@dataclass(frozen=True)
class ModelParams:
    """All weights of the autoencoder, encoder layers then decoder layers."""

    config: ArchConfig
    encoder_layers: tuple[LayerParam, ...]
    decoder_layers: tuple[LayerParam, ...]

    def __post_init__(self):
        enc, dec = encoder_specs(self.config), decoder_specs(self.config)
        if len(self.encoder_layers) != len(enc) or len(self.decoder_layers) != len(dec):
            raise ValidationError("layer count does not match the architecture")
        for spec, lp in zip(enc + dec, self.all_layers):
            if lp.w.shape != spec.w_shape or lp.b.shape != (spec.b,):
                raise ValidationError(
                    f"{spec.kind} layer shape mismatch: {lp.w.shape} vs {spec.w_shape}"
                )

    @property
    def all_layers(self) -> tuple[LayerParam, ...]:
        return self.encoder_layers + self.decoder_layers

    @property
    def n_params(self) -> int:
        return sum(lp.size for lp in self.all_layers)


@dataclass(frozen=True)
class LatentVector:
    """The compressed representation of one wafer grid."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(arr)):
            raise ValidationError("latent vector must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def p(self) -> int:
        return self.values.shape[0]


def init_params(config: ArchConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in encoder_specs(config) + decoder_specs(config):
        fan_in, fan_out = spec.fans
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=spec.w_shape)
        layers.append(LayerParam(w=w, b=np.zeros(spec.b)))
    n_enc = len(encoder_specs(config))
    return ModelParams(
        config=config,
        encoder_layers=tuple(layers[:n_enc]),
        decoder_layers=tuple(layers[n_enc:]),
    )


def count_params(params: ModelParams) -> int:
    return params.n_params


# ---------------------------------------------------------------------------
# numeric core (batched; x is (B, C, H, W) float64)
# ---------------------------------------------------------------------------


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, s: int) -> np.ndarray:
    f = w.shape[2]
    win = sliding_window_view(x, (f, f), axis=(2, 3))[:, :, ::s, ::s]
    nb, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(nb * ho * wo, c * f * f)
    y = cols @ w.reshape(w.shape[0], -1).T
    y = np.ascontiguousarray(y.reshape(nb, ho, wo, w.shape[0]).transpose(0, 3, 1, 2))
    if b is not None:
        y += b[None, :, None, None]
    return y


def _deconv_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray | None, s: int, out_pad: int
) -> np.ndarray:
    # Zero-insertion by the stride, then a full stride-1 correlation with the
    # flipped kernel; out_pad extends the bottom/right edge.
    nb, c_in, h, wd = x.shape
    f = w.shape[2]
    zh = (h - 1) * s + 1 + out_pad + 2 * (f - 1)
    zw = (wd - 1) * s + 1 + out_pad + 2 * (f - 1)
    z = np.zeros((nb, c_in, zh, zw))
    z[:, :, f - 1 : f - 1 + (h - 1) * s + 1 : s, f - 1 : f - 1 + (wd - 1) * s + 1 : s] = x
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _conv_forward(z, w_flip, b, 1)


def _conv_backward(
    x: np.ndarray, w: np.ndarray, s: int, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    f = w.shape[2]
    win = sliding_window_view(x, (f, f), axis=(2, 3))[:, :, ::s, ::s]
    nb, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(nb * ho * wo, c * f * f)
    dym = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(nb * ho * wo, w.shape[0])
    dw = (dym.T @ cols).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    # dL/dx is the transposed convolution of dy; the remainder a strided valid
    # conv discards comes back as output padding.
    rem = x.shape[2] - ((ho - 1) * s + f)
    dx = _deconv_forward(dy, w, None, s, rem)
    return dx, dw, db


def _deconv_backward(
    x: np.ndarray, w: np.ndarray, s: int, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    f = w.shape[2]
    # Adjoint of the transposed convolution is the strided convolution; the
    # (Cin, Cout, f, f) layout already matches the conv weight convention.
    dx = _conv_forward(dy, w, None, s)
    dyw = sliding_window_view(dy, (f, f), axis=(2, 3))[:, :, ::s, ::s]
    nb, c_out, h, wd = dyw.shape[:4]
    dym = np.ascontiguousarray(dyw.transpose(0, 2, 3, 1, 4, 5)).reshape(nb * h * wd, c_out * f * f)
    xm = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(nb * h * wd, x.shape[1])
    dw = (xm.T @ dym).reshape(x.shape[1], c_out, f, f)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def _layer_forward(spec: _LayerSpec, lp: LayerParam, h: np.ndarray) -> np.ndarray:
    if spec.kind == "conv":
        pre = _conv_forward(h, lp.w, lp.b, spec.stride)
    elif spec.kind == "deconv":
        pre = _deconv_forward(h, lp.w, lp.b, spec.stride, spec.out_pad)
    else:
        pre = h @ lp.w + lp.b
    return np.tanh(pre)


def _layer_backward(
    spec: _LayerSpec, lp: LayerParam, inp: np.ndarray, dpre: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if spec.kind == "conv":
        return _conv_backward(inp, lp.w, spec.stride, dpre)
    if spec.kind == "deconv":
        return _deconv_backward(inp, lp.w, spec.stride, dpre)
    dw = inp.T @ dpre
    db = dpre.sum(axis=0)
    dx = dpre @ lp.w.T
    return dx, dw, db


@dataclass
class ForwardCache:
    """Per-layer (input, post-tanh output) records from one forward pass."""

    params: ModelParams
    mask: np.ndarray
    radius: float
    records: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    recon_premask: np.ndarray | None = None


def encode_batch(params: ModelParams, x: np.ndarray, cache: ForwardCache | None = None) -> np.ndarray:
    """(B, 1, n, n) grids -> (B, p) latents."""
    cfg = params.config
    if x.shape[1:] != (1, cfg.grid_n, cfg.grid_n):
        raise ValidationError(f"expected (B, 1, {cfg.grid_n}, {cfg.grid_n}) input, got {x.shape}")
    h = x
    for spec, lp in zip(encoder_specs(cfg), params.encoder_layers):
        if spec.kind == "dense" and h.ndim == 4:
            h = h.reshape(h.shape[0], -1)
        inp = h
        h = _layer_forward(spec, lp, inp)
        if cache is not None:
            cache.records.append((inp, h))
    return h


def decode_batch(params: ModelParams, lat: np.ndarray, cache: ForwardCache | None = None) -> np.ndarray:
    """(B, p) latents -> (B, 1, n, n) reconstructions, before masking."""
    cfg = params.config
    if lat.ndim != 2 or lat.shape[1] != cfg.latent_p:
        raise ValidationError(f"expected (B, {cfg.latent_p}) latents, got {lat.shape}")
    h = lat
    m = cfg.conv_sizes[-1]
    for spec, lp in zip(decoder_specs(cfg), params.decoder_layers):
        if spec.kind == "deconv" and h.ndim == 2:
            h = h.reshape(h.shape[0], cfg.conv_channels[-1], m, m)
        inp = h
        h = _layer_forward(spec, lp, inp)
        if cache is not None:
            cache.records.append((inp, h))
    return h


def forward_batch(
    params: ModelParams, x: np.ndarray, mask: np.ndarray, radius: float
) -> tuple[np.ndarray, ForwardCache]:
    """Masked reconstruction of a batch plus the cache backward needs."""
    cache = ForwardCache(params=params, mask=mask, radius=radius)
    lat = encode_batch(params, x, cache)
    recon = decode_batch(params, lat, cache)
    cache.recon_premask = recon
    return recon * mask[None, None, :, :], cache


def backward_batch(
    params: ModelParams, cache: ForwardCache, d_out: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients of a scalar loss given d(loss)/d(masked reconstruction).

    Returns one (dw, db) pair per layer in encoder-then-decoder order.
    """
    if cache.params is not params:
        raise ValidationError("cache does not belong to these parameters")
    if cache.recon_premask is None or len(cache.records) != len(params.all_layers):
        raise ValidationError("cache is incomplete; run forward first")
    specs = encoder_specs(params.config) + decoder_specs(params.config)
    d = d_out * cache.mask[None, None, :, :]
    grads_rev = []
    for spec, lp, (inp, out) in zip(
        reversed(specs), reversed(params.all_layers), reversed(cache.records)
    ):
        if d.shape != out.shape:
            d = d.reshape(out.shape)
        dpre = d * (1.0 - out * out)
        d, dw, db = _layer_backward(spec, lp, inp, dpre)
        grads_rev.append((dw, db))
    return grads_rev[::-1]


# ---------------------------------------------------------------------------
# single-grid public API
# ---------------------------------------------------------------------------


def encode(params: ModelParams, grid: WaferGrid) -> LatentVector:
    if grid.n != params.config.grid_n:
        raise ValidationError(f"grid side {grid.n} does not match config {params.config.grid_n}")
    lat = encode_batch(params, grid.values[None, None, :, :])
    return LatentVector(values=lat[0])


def decode(params: ModelParams, latent: LatentVector, radius: float = DEFAULT_RADIUS) -> WaferGrid:
    if latent.p != params.config.latent_p:
        raise ValidationError(
            f"latent length {latent.p} does not match config {params.config.latent_p}"
        )
    recon = decode_batch(params, latent.values[None, :])
    return apply_mask(WaferGrid.from_values(recon[0, 0], radius=radius))


def forward(params: ModelParams, grid: WaferGrid) -> tuple[WaferGrid, ForwardCache]:
    if grid.n != params.config.grid_n:
        raise ValidationError(f"grid side {grid.n} does not match config {params.config.grid_n}")
    recon, cache = forward_batch(
        params, grid.values[None, None, :, :], np.asarray(grid.mask, dtype=float), grid.radius
    )
    out = WaferGrid.from_values(recon[0, 0], radius=grid.radius)
    return out, cache


def backward(
    params: ModelParams, cache: ForwardCache, d_loss_d_output: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    d = np.asarray(d_loss_d_output, dtype=float)
    n = params.config.grid_n
    if d.shape == (n, n):
        d = d[None, None, :, :]
    if d.shape != (1, 1, n, n):
        raise ValidationError(f"upstream gradient must be ({n}, {n}), got {d_loss_d_output.shape}")
    return backward_batch(params, cache, d)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


def checkpoint_bytes(params: ModelParams) -> bytes:
    cfg = params.config
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    n_conv = len(cfg.conv_filters)
    buf += struct.pack("<IIII", cfg.grid_n, cfg.latent_p, cfg.conv_stride, n_conv)
    buf += struct.pack(f"<{n_conv}I", *cfg.conv_filters)
    buf += struct.pack(f"<{n_conv}I", *cfg.conv_channels)
    buf += struct.pack("<I", 0)  # activation code: 0 = tanh
    for lp in params.all_layers:
        buf += np.ascontiguousarray(lp.w, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(lp.b, dtype="<f8").tobytes()
    return bytes(buf)


def params_from_bytes(buf: bytes) -> ModelParams:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValidationError("bad checkpoint magic")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    grid_n, latent_p, stride, n_conv = struct.unpack_from("<IIII", buf, 8)
    off = 24
    filters = struct.unpack_from(f"<{n_conv}I", buf, off)
    off += 4 * n_conv
    channels = struct.unpack_from(f"<{n_conv}I", buf, off)
    off += 4 * n_conv
    (act,) = struct.unpack_from("<I", buf, off)
    off += 4
    if act != 0:
        raise ValidationError(f"unknown activation code {act}")
    cfg = ArchConfig(
        grid_n=grid_n,
        latent_p=latent_p,
        conv_filters=filters,
        conv_channels=channels,
        conv_stride=stride,
    )
    layers = []
    for spec in encoder_specs(cfg) + decoder_specs(cfg):
        w_count = int(np.prod(spec.w_shape))
        w = np.frombuffer(buf, dtype="<f8", count=w_count, offset=off).reshape(spec.w_shape)
        off += 8 * w_count
        b = np.frombuffer(buf, dtype="<f8", count=spec.b, offset=off)
        off += 8 * spec.b
        layers.append(LayerParam(w=w.copy(), b=b.copy()))
    if off != len(buf):
        raise ValidationError(f"checkpoint has {len(buf) - off} trailing bytes")
    n_enc = len(encoder_specs(cfg))
    return ModelParams(
        config=cfg, encoder_layers=tuple(layers[:n_enc]), decoder_layers=tuple(layers[n_enc:])
    )


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())
