"""Small pre-norm ViT encoder: patch projection, positional table, attention blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import PatchGrid
from .numerics import ops
from .numerics.tensor import Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    e: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    mlp_ratio: float = 2.0
    use_positional: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.e < 1 or self.n_heads < 1 or self.e % self.n_heads:
            raise ValueError(f"e={self.e} must be a positive multiple of n_heads={self.n_heads}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")

    @property
    def mlp_hidden(self) -> int:
        return max(1, int(round(self.e * self.mlp_ratio)))


@dataclass
class EmbeddingMap:
    values: Tensor  # (s, e) or (batch, s, e)
    rows: int
    cols: int

    @property
    def s(self) -> int:
        return self.rows * self.cols


def uniform_weight(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...], name: str) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros(shape: tuple[int, ...], name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones(shape: tuple[int, ...], name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def init_encoder(config: EncoderConfig, patch_dim: int, n_patches: int) -> Params:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases 0; norm gains 1."""
    config.validate()
    rng = np.random.default_rng([config.seed, 101])
    e, hid = config.e, config.mlp_hidden
    p: Params = {
        "enc.proj.w": uniform_weight(rng, patch_dim, (patch_dim, e), "enc.proj.w"),
        "enc.proj.b": zeros((e,), "enc.proj.b"),
    }
    if config.use_positional:
        p["enc.pos"] = uniform_weight(rng, e, (n_patches, e), "enc.pos")
    for i in range(config.n_blocks):
        pre = f"enc.block{i}."
        p[pre + "ln1.g"] = ones((e,), pre + "ln1.g")
        p[pre + "ln1.b"] = zeros((e,), pre + "ln1.b")
        # keys carry no bias: a shared key offset cancels inside the softmax
        for name in ("q", "k", "v", "o"):
            p[pre + f"attn.w{name}"] = uniform_weight(rng, e, (e, e), pre + f"attn.w{name}")
        for name in ("q", "v", "o"):
            p[pre + f"attn.b{name}"] = zeros((e,), pre + f"attn.b{name}")
        p[pre + "ln2.g"] = ones((e,), pre + "ln2.g")
        p[pre + "ln2.b"] = zeros((e,), pre + "ln2.b")
        p[pre + "mlp.w1"] = uniform_weight(rng, e, (e, hid), pre + "mlp.w1")
        p[pre + "mlp.b1"] = zeros((hid,), pre + "mlp.b1")
        p[pre + "mlp.w2"] = uniform_weight(rng, hid, (hid, e), pre + "mlp.w2")
        p[pre + "mlp.b2"] = zeros((e,), pre + "mlp.b2")
    return p


def attention(x: Tensor, params: Params, prefix: str, n_heads: int) -> Tensor:
    """Multi-head self-attention over the patch axis of ``x`` (batch, s, e)."""
    b, s, e = x.shape
    dh = e // n_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(b, s, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(x @ params[prefix + "wq"] + params[prefix + "bq"])
    k = heads(x @ params[prefix + "wk"])
    v = heads(x @ params[prefix + "wv"] + params[prefix + "bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    weights = ops.softmax(scores, axis=-1)
    mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(b, s, e)
    return mixed @ params[prefix + "wo"] + params[prefix + "bo"]


def encode_patches(patches: Tensor, params: Params, config: EncoderConfig) -> Tensor:
    """(batch, s, patch_dim) -> (batch, s, e)."""
    if patches.ndim != 3:
        raise ValueError(f"expected (batch, s, patch_dim) patches, got {patches.shape}")
    w = params["enc.proj.w"]
    if patches.shape[2] != w.shape[0]:
        raise ValueError(f"patch dim {patches.shape[2]} does not match projection input {w.shape[0]}")
    x = patches @ w + params["enc.proj.b"]
    if config.use_positional:
        pos = params["enc.pos"]
        if pos.shape[0] != patches.shape[1]:
            raise ValueError(f"{patches.shape[1]} patches but positional table has {pos.shape[0]} rows")
        x = x + pos
    for i in range(config.n_blocks):
        pre = f"enc.block{i}."
        h = ops.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        x = x + attention(h, params, pre + "attn.", config.n_heads)
        h = ops.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        h = ops.gelu(h @ params[pre + "mlp.w1"] + params[pre + "mlp.b1"])
        x = x + (h @ params[pre + "mlp.w2"] + params[pre + "mlp.b2"])
    return x


def encode(grid: PatchGrid, params: Params, config: EncoderConfig) -> EmbeddingMap:
    """Embed one image's patches; returns an (s, e) map carrying grid geometry."""
    patches = Tensor(grid.patches[None])
    out = encode_patches(patches, params, config)
    return EmbeddingMap(values=out.reshape(grid.s, config.e), rows=grid.rows, cols=grid.cols)
