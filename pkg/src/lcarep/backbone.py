"""Small plain CNN feature extractor, its exact backward pass, and checkpoints.

Each block is 3x3 conv (stride 1, zero padding 1) -> ReLU -> 2x2 max-pool.
All layer functions accept a single ``(H, W, C)`` map or an ``(N, H, W, C)``
batch and keep the input's float dtype, so gradient checks can run them in
float64.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, InvalidArgumentError
from .lca import LcaConfig, lca_backward, lca_forward, lca_window_count
from .tensor import (
    decode_entries,
    encode_entries,
    entry_text,
    l2_normalize,
    load_tensor,
    text_entry,
)

CONFIG_ENTRY = "config.json"


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 64
    block_channels: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if not self.block_channels or min(self.block_channels) < 1:
            raise InvalidArgumentError(f"block_channels must be positive, got {self.block_channels}")
        side = self.input_size
        for _ in self.block_channels:
            if side % 2:
                raise InvalidArgumentError(
                    f"input_size {self.input_size} is not divisible by 2^{len(self.block_channels)}"
                )
            side //= 2
        if side < 2:
            raise InvalidArgumentError(f"final feature map side {side} < 2 leaves LCA without windows")

    @property
    def embedding_dim(self) -> int:
        return self.block_channels[-1]

    @property
    def feature_side(self) -> int:
        return self.input_size >> len(self.block_channels)


def _batched(x: np.ndarray):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 3 else (x, False)


# -- layers -------------------------------------------------------------------


def _im2col(xb: np.ndarray) -> np.ndarray:
    n, h, w, c = xb.shape
    padded = np.pad(xb, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(padded, (3, 3), axis=(1, 2))  # n, h, w, c, 3, 3
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation with zero padding 1. ``kernel`` is ``(3, 3, Cin, Cout)``."""
    xb, single = _batched(x)
    kernel, bias = np.asarray(kernel), np.asarray(bias)
    if xb.ndim != 4 or kernel.shape[:3] != (3, 3, xb.shape[-1]) or kernel.ndim != 4:
        raise InvalidArgumentError(f"conv shapes do not match: input {np.shape(x)}, kernel {kernel.shape}")
    if bias.shape != (kernel.shape[3],):
        raise InvalidArgumentError(f"bias shape {bias.shape} does not match {kernel.shape[3]} output channels")
    n, h, w, _ = xb.shape
    cout = kernel.shape[3]
    out = _im2col(xb) @ kernel.reshape(-1, cout).astype(xb.dtype, copy=False)
    out = out.reshape(n, h, w, cout) + bias.astype(xb.dtype, copy=False)
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_input, grad_kernel, grad_bias)`` for :func:`conv2d_forward`."""
    xb, single = _batched(x)
    gb, _ = _batched(grad_out)
    kernel = np.asarray(kernel)
    if kernel.ndim != 4 or kernel.shape[:3] != (3, 3, xb.shape[-1]) or gb.shape != xb.shape[:3] + (kernel.shape[3],):
        raise InvalidArgumentError(
            f"conv backward shapes do not match: input {np.shape(x)}, kernel {kernel.shape}, grad {np.shape(grad_out)}"
        )
    cout = kernel.shape[3]
    g2 = gb.reshape(-1, cout)
    grad_kernel = (_im2col(xb).T @ g2).reshape(kernel.shape)
    grad_bias = g2.sum(axis=0)
    # the input adjoint is a correlation with the spatially flipped, channel-transposed kernel
    flipped = np.ascontiguousarray(kernel[::-1, ::-1].transpose(0, 1, 3, 2))
    grad_in = conv2d_forward(gb, flipped, np.zeros(xb.shape[-1], dtype=gb.dtype))
    return (grad_in[0] if single else grad_in), grad_kernel, grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(x) > 0, grad_out, 0).astype(np.asarray(grad_out).dtype)


def maxpool2_forward(x: np.ndarray):
    """Non-overlapping 2x2 max-pool. Returns ``(out, argmax)``; argmax indexes the
    tile in row-major order and ties resolve to the first index."""
    xb, single = _batched(x)
    n, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise InvalidArgumentError(f"maxpool needs even sides, got {h}x{w}")
    tiles = xb.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
    return (out[0], idx[0]) if single else (out, idx)


def maxpool2_backward(argmax: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    gb, single = _batched(grad_out)
    ib, _ = _batched(argmax)
    n, hh, ww, c = gb.shape
    tiles = (np.arange(4) == ib[..., None]) * gb[..., None]
    grad = tiles.reshape(n, hh, ww, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * hh, 2 * ww, c)
    grad = grad.astype(gb.dtype, copy=False)
    return grad[0] if single else grad


# -- parameters and checkpoints -------------------------------------------------


def init_params(cfg: BackboneConfig, seed: int) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) kernels, zero biases; a pure function of ``seed``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    cin = 3
    for i, cout in enumerate(cfg.block_channels):
        bound = 1.0 / np.sqrt(9 * cin)
        params[f"block{i}.kernel"] = rng.uniform(-bound, bound, size=(3, 3, cin, cout)).astype(np.float32)
        params[f"block{i}.bias"] = np.zeros(cout, dtype=np.float32)
        cin = cout
    return params


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    lca: LcaConfig = field(default_factory=LcaConfig)
    version: int = 1

    @classmethod
    def initial(cls, seed: int, backbone: BackboneConfig = BackboneConfig(), lca: LcaConfig = LcaConfig()):
        return cls(init_params(backbone, seed), backbone, lca)

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.params.items()}, self.backbone, self.lca, self.version)

    def validate(self) -> None:
        expected = init_params_shapes(self.backbone)
        for name, shape in expected.items():
            if name not in self.params:
                raise FormatError(f"checkpoint is missing parameter {name!r}")
            if self.params[name].shape != shape:
                raise FormatError(f"parameter {name!r} has shape {self.params[name].shape}, expected {shape}")

    def to_bytes(self) -> bytes:
        meta = {"version": self.version, "backbone": asdict(self.backbone), "lca": asdict(self.lca)}
        entries = {CONFIG_ENTRY: text_entry(json.dumps(meta, sort_keys=True))}
        entries.update((k, self.params[k]) for k in sorted(self.params))
        return encode_entries(entries)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        entries = decode_entries(buf)
        if CONFIG_ENTRY not in entries:
            raise FormatError(f"checkpoint has no {CONFIG_ENTRY} entry")
        try:
            meta = json.loads(entry_text(entries.pop(CONFIG_ENTRY)))
            ckpt = cls(entries, BackboneConfig(**meta["backbone"]), LcaConfig(**meta["lca"]), meta["version"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"invalid checkpoint config: {exc}") from None
        ckpt.validate()
        return ckpt

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def init_params_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    shapes, cin = {}, 3
    for i, cout in enumerate(cfg.block_channels):
        shapes[f"block{i}.kernel"] = (3, 3, cin, cout)
        shapes[f"block{i}.bias"] = (cout,)
        cin = cout
    return shapes


# -- network --------------------------------------------------------------------


def _check_images(images: np.ndarray, cfg: BackboneConfig) -> None:
    s = cfg.input_size
    if images.shape[-3:] != (s, s, 3):
        raise InvalidArgumentError(f"expected {s}x{s}x3 image(s), got shape {images.shape}")


def backbone_forward(images: np.ndarray, ckpt: Checkpoint, cache: list | None = None) -> np.ndarray:
    """Feature map(s) for ``(S, S, 3)`` image(s). Pass a list as ``cache`` to keep
    what :func:`backbone_backward` needs."""
    x = np.asarray(images)
    _check_images(x, ckpt.backbone)
    for i in range(len(ckpt.backbone.block_channels)):
        z = conv2d_forward(x, ckpt.params[f"block{i}.kernel"], ckpt.params[f"block{i}.bias"])
        a = relu_forward(z)
        out, idx = maxpool2_forward(a)
        if cache is not None:
            cache.append((x, z, idx))
        x = out
    return x


def backbone_backward(ckpt: Checkpoint, cache: list, grad_out: np.ndarray):
    """Gradients of all parameters (and of the input image) given d loss / d feature map."""
    grads = {}
    g = grad_out
    for i in reversed(range(len(cache))):
        x, z, idx = cache[i]
        g = maxpool2_backward(idx, g)
        g = relu_backward(z, g)
        g, gk, gbias = conv2d_backward(x, ckpt.params[f"block{i}.kernel"], g)
        grads[f"block{i}.kernel"] = gk
        grads[f"block{i}.bias"] = gbias
    return grads, g


def embed(images: np.ndarray, ckpt: Checkpoint) -> np.ndarray:
    """Unit-norm embedding(s): L2-normalized LCA pooling of the feature map."""
    return l2_normalize(lca_forward(backbone_forward(images, ckpt), ckpt.lca))


def embed_forward(images: np.ndarray, ckpt: Checkpoint):
    """Batched :func:`embed` that also returns the state for :func:`embed_backward`."""
    cache: list = []
    fmap = backbone_forward(images, ckpt, cache)
    pooled = lca_forward(fmap, ckpt.lca)
    emb = l2_normalize(pooled)
    return emb, (cache, fmap.shape, pooled, emb)


def embed_backward(ckpt: Checkpoint, state, grad_emb: np.ndarray) -> dict[str, np.ndarray]:
    cache, fshape, pooled, emb = state
    norm = np.sqrt(np.sum(np.square(pooled, dtype=np.float64), axis=-1, keepdims=True))
    norm = np.where(norm > 1e-12, norm, 1.0)
    g = np.asarray(grad_emb, dtype=np.float64)
    e = emb.astype(np.float64)
    g_pooled = (g - e * np.sum(e * g, axis=-1, keepdims=True)) / norm
    g_map = lca_backward(g_pooled.astype(pooled.dtype), fshape[-3], fshape[-2], ckpt.lca)
    grads, _ = backbone_backward(ckpt, cache, g_map)
    return grads


def load_external_features(path) -> np.ndarray:
    """Read an ``(H, W, C)`` feature map written by another backbone."""
    fmap = load_tensor(path)
    if fmap.dtype != np.float32 or fmap.ndim != 3:
        raise FormatError(f"external features must be a 3-axis f32 tensor, got {fmap.ndim} axes", 6)
    h, w, _ = fmap.shape
    if lca_window_count(h, w) == 0:
        raise FormatError(f"feature map {h}x{w} is too small for LCA pooling", 10)
    return fmap
