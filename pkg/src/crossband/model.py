"""Channel-tokenized vision transformer backbone.

Each band of a C x H x W stack is patchified independently; a single shared
linear projection (no bias) maps every P x P single-channel patch to the
embed dimension, and learnable positional embeddings (shared across channels)
plus per-band channel embeddings are added. The sequence [CLS; tokens...] has
length C * N_p + 1 and is processed by a pre-norm transformer encoder, so the
model accepts any subset of the 12 canonical bands without architectural
changes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import gxb
from .autodiff import (
    ParameterError,
    ShapeError,
    Tensor,
    concat,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    reshape,
    softmax,
    take,
    transpose,
)
from .bands import CANONICAL_BANDS, CHANNEL_INDEX, Band


class UnknownBandError(KeyError):
    """Band id has no channel embedding."""


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    patch: int = 8
    image_size: int = 32  # sizes the positional-embedding table
    mlp_ratio: int = 4
    shared_projection: bool = True

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ParameterError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.image_size % self.patch != 0:
            raise ParameterError("image_size must be divisible by patch")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid


@dataclass
class Encoded:
    """Per-layer token representations from one forward pass.

    ``layers[0]`` is the embedded input sequence, ``layers[i]`` the output of
    block i; ``final`` applies the terminal layer norm to ``layers[-1]``.
    """

    layers: list
    final: Tensor
    bands: tuple[Band, ...]
    grid: tuple[int, int]

    @property
    def n_channels(self) -> int:
        return len(self.bands)


def _normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def init_encoder_params(rng: np.random.Generator, cfg: ModelConfig) -> dict[str, Tensor]:
    d, hidden = cfg.embed_dim, cfg.mlp_ratio * cfg.embed_dim
    params: dict[str, Tensor] = {}
    for i in range(cfg.depth):
        p = f"enc.{i}."
        params[p + "ln1.g"] = Tensor(np.ones(d), requires_grad=True)
        params[p + "ln1.b"] = Tensor(np.zeros(d), requires_grad=True)
        for name in ("wq", "wk", "wv", "wo"):
            params[p + f"attn.{name}"] = Tensor(_normal(rng, (d, d)), requires_grad=True)
        for name in ("bq", "bk", "bv", "bo"):
            params[p + f"attn.{name}"] = Tensor(np.zeros(d), requires_grad=True)
        params[p + "ln2.g"] = Tensor(np.ones(d), requires_grad=True)
        params[p + "ln2.b"] = Tensor(np.zeros(d), requires_grad=True)
        params[p + "mlp.w1"] = Tensor(_normal(rng, (d, hidden)), requires_grad=True)
        params[p + "mlp.b1"] = Tensor(np.zeros(hidden), requires_grad=True)
        params[p + "mlp.w2"] = Tensor(_normal(rng, (hidden, d)), requires_grad=True)
        params[p + "mlp.b2"] = Tensor(np.zeros(d), requires_grad=True)
    params["enc.norm.g"] = Tensor(np.ones(d), requires_grad=True)
    params["enc.norm.b"] = Tensor(np.zeros(d), requires_grad=True)
    return params


def encoder_forward(tokens: Tensor, params: dict[str, Tensor], cfg: ModelConfig):
    """Run the pre-norm transformer; returns (per-layer list, final-normed)."""
    b, n, d = tokens.shape
    heads, dh = cfg.heads, cfg.embed_dim // cfg.heads
    scale = 1.0 / math.sqrt(dh)
    layers = [tokens]
    x = tokens
    for i in range(cfg.depth):
        p = f"enc.{i}."
        h = layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = matmul(h, params[p + "attn.wq"]) + params[p + "attn.bq"]
        k = matmul(h, params[p + "attn.wk"]) + params[p + "attn.bk"]
        v = matmul(h, params[p + "attn.wv"]) + params[p + "attn.bv"]
        q = transpose(reshape(q, (b, n, heads, dh)), (0, 2, 1, 3))
        k = transpose(reshape(k, (b, n, heads, dh)), (0, 2, 1, 3))
        v = transpose(reshape(v, (b, n, heads, dh)), (0, 2, 1, 3))
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), scale)
        attn = softmax(scores, axis=-1)
        ctx = transpose(matmul(attn, v), (0, 2, 1, 3))
        ctx = reshape(ctx, (b, n, d))
        x = x + (matmul(ctx, params[p + "attn.wo"]) + params[p + "attn.bo"])
        h2 = layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h2 = gelu(matmul(h2, params[p + "mlp.w1"]) + params[p + "mlp.b1"])
        x = x + (matmul(h2, params[p + "mlp.w2"]) + params[p + "mlp.b2"])
        layers.append(x)
    final = layer_norm(x, params["enc.norm.g"], params["enc.norm.b"])
    return layers, final


def pos_grid_ids(max_grid: int, hp: int, wp: int) -> np.ndarray:
    """Row-major positional ids of an hp x wp subgrid of the max_grid table.

    Crops smaller than the configured input reuse the top-left subgrid of the
    positional table (no interpolation).
    """
    if hp > max_grid or wp > max_grid:
        raise ShapeError(f"crop grid {hp}x{wp} exceeds positional table {max_grid}x{max_grid}")
    rows = np.arange(hp)[:, None] * max_grid + np.arange(wp)[None, :]
    return rows.reshape(-1)


def extract_patches(stack: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C * N_p, P^2) row-major patches, channel-major order."""
    b, c, h, w = stack.shape
    if h % patch or w % patch:
        raise ShapeError(f"image size {h}x{w} not divisible by patch size {patch}")
    hp, wp = h // patch, w // patch
    x = stack.reshape(b, c, hp, patch, wp, patch)
    x = x.transpose(0, 1, 2, 4, 3, 5)
    return x.reshape(b, c * hp * wp, patch * patch)


class ChannelTokenViT:
    """Backbone with per-(channel, patch) tokens over the 12 canonical bands."""

    kind = "channel_vit"

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        d, psq = cfg.embed_dim, cfg.patch * cfg.patch
        params = {}
        if cfg.shared_projection:
            params["tok.proj"] = Tensor(_normal(rng, (psq, d)), requires_grad=True)
        else:
            for band in CANONICAL_BANDS:
                params[f"tok.proj.{band.value}"] = Tensor(_normal(rng, (psq, d)), requires_grad=True)
        params["tok.pos"] = Tensor(_normal(rng, (cfg.n_patches, d)), requires_grad=True)
        params["tok.chn"] = Tensor(_normal(rng, (len(CANONICAL_BANDS), d)), requires_grad=True)
        params["tok.cls"] = Tensor(_normal(rng, (d,)), requires_grad=True)
        params["tok.mask"] = Tensor(_normal(rng, (d,)), requires_grad=True)
        params.update(init_encoder_params(rng, cfg))
        self.params = params

    # -- parameter plumbing -------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.array(arrays[k], dtype=np.float64)
            p.grad = None

    def set_trainable(self, trainable: bool) -> None:
        for p in self.params.values():
            p.requires_grad = trainable

    def save(self, path) -> None:
        meta = {"kind": self.kind, "config": asdict(self.cfg)}
        gxb.save_bundle(path, self.state_arrays(), meta=meta)

    @classmethod
    def load(cls, path) -> "ChannelTokenViT":
        arrays, meta = gxb.load_bundle(Path(path))
        cfg = ModelConfig(**meta["config"])
        model = cls(cfg, seed=0)
        model.load_state_arrays(arrays)
        return model

    # -- forward ------------------------------------------------------------
    def _pos_ids(self, hp: int, wp: int) -> np.ndarray:
        return pos_grid_ids(self.cfg.grid, hp, wp)

    def tokenize(self, stack: np.ndarray, bands, mask: np.ndarray | None = None) -> tuple[Tensor, tuple[int, int]]:
        """Embed a (B, C, H, W) or (C, H, W) stack into (B, C*N_p+1, D) tokens.

        ``mask`` (B, C*N_p) marks slots whose patch projection is replaced by
        the learned mask token (positional and channel embeddings stay).
        """
        stack = np.asarray(stack, dtype=np.float64)
        if stack.ndim == 3:
            stack = stack[None]
        if stack.ndim != 4:
            raise ShapeError(f"expected (B, C, H, W) stack, got shape {stack.shape}")
        bands = tuple(bands)
        bsz, c, h, w = stack.shape
        if c != len(bands):
            raise ShapeError(f"stack has {c} channels but {len(bands)} band ids")
        for band in bands:
            if not isinstance(band, Band):
                raise UnknownBandError(f"no channel embedding for band {band!r}")
        patch = self.cfg.patch
        patches = extract_patches(stack, patch)
        hp, wp = h // patch, w // patch
        n_p = hp * wp

        if self.cfg.shared_projection:
            proj = matmul(Tensor(patches), self.params["tok.proj"])
        else:
            pieces = [
                matmul(Tensor(patches[:, i * n_p:(i + 1) * n_p, :]),
                       self.params[f"tok.proj.{band.value}"])
                for i, band in enumerate(bands)
            ]
            proj = concat(pieces, axis=1)

        if mask is not None:
            m = np.asarray(mask, dtype=np.float64)
            if m.ndim == 1:
                m = m[None]
            if m.shape != (bsz, c * n_p):
                raise ShapeError(f"mask shape {m.shape} != {(bsz, c * n_p)}")
            m = m[:, :, None]
            proj = mul(proj, 1.0 - m) + mul(reshape(self.params["tok.mask"], (1, 1, -1)), m)

        pos_ids = np.tile(self._pos_ids(hp, wp), c)
        chn_ids = np.repeat([CHANNEL_INDEX[b] for b in bands], n_p)
        tok = proj + embedding_lookup(self.params["tok.pos"], pos_ids)
        tok = tok + embedding_lookup(self.params["tok.chn"], chn_ids)

        cls = mul(reshape(self.params["tok.cls"], (1, 1, -1)), Tensor(np.ones((bsz, 1, 1))))
        return concat([cls, tok], axis=1), (hp, wp)

    def encode(self, stack: np.ndarray, bands, mask: np.ndarray | None = None) -> Encoded:
        tokens, grid = self.tokenize(stack, bands, mask=mask)
        layers, final = encoder_forward(tokens, self.params, self.cfg)
        return Encoded(layers=layers, final=final, bands=tuple(bands), grid=grid)

    def cls_representation(self, encoded: Encoded) -> Tensor:
        b = encoded.final.shape[0]
        return reshape(take(encoded.final, [0], axis=1), (b, self.cfg.embed_dim))

    def spatial_feature_maps(self, encoded: Encoded, layer_indices) -> list:
        """Channel-averaged patch-token maps, one (B, H/P, W/P, D) per layer.

        ``layer_indices`` selects 4 distinct block outputs (0-based). The
        channel mean makes the maps independent of how many bands went in.
        """
        idx = list(layer_indices)
        if len(idx) != 4 or len(set(idx)) != 4:
            raise ParameterError(f"need 4 distinct layer indices, got {layer_indices}")
        for i in idx:
            if not 0 <= i < self.cfg.depth:
                raise ParameterError(f"layer index {i} outside [0, {self.cfg.depth})")
        b = encoded.final.shape[0]
        c = encoded.n_channels
        hp, wp = encoded.grid
        maps = []
        for i in idx:
            toks = take(encoded.layers[i + 1], np.arange(1, c * hp * wp + 1), axis=1)
            toks = reshape(toks, (b, c, hp * wp, self.cfg.embed_dim))
            maps.append(reshape(mean(toks, axis=1), (b, hp, wp, self.cfg.embed_dim)))
        return maps
