"""Fine-tuning, task heads, first-layer band adaptation, and linear probing.

Fine-tuning runs in two modes: full (backbone + head) and frozen (head only;
the backbone is bitwise untouched). The schedule is a linear epoch warmup
followed by cosine decay to zero, with the checkpoint of the best validation
metric returned.

The fixed-channel ViT baseline lives here: a standard ViT whose patch
embedding concatenates a fixed number of channels. Its first layer can be
rewritten for band counts it was not trained on, either by averaging the
per-channel kernels and replicating (dividing by the new channel count), or,
for 3->4 channel evaluation, by appending a fourth kernel equal to the mean
of the original three.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import gxb
from .autodiff import (
    ParameterError,
    ShapeError,
    Tensor,
    backward,
    binary_cross_entropy_with_logits,
    concat,
    gelu,
    matmul,
    mul,
    no_grad,
    reshape,
    soft_cross_entropy,
    take,
)
from .bands import Band, BandCombination, band_select, normalize_stack
from .manifest import ChangePair, DatasetManifest
from .metrics import (
    ConfusionAccumulator,
    f1_multilabel,
    multilabel_accumulators,
    score,
)
from .model import (
    ChannelTokenViT,
    Encoded,
    ModelConfig,
    encoder_forward,
    extract_patches,
    init_encoder_params,
    pos_grid_ids,
)
from .optim import AdamWState, adamw_step
from .pretrain import ContractError


# ---------------------------------------------------------------------------
# fixed-channel baseline and first-layer adaptation
# ---------------------------------------------------------------------------


@dataclass
class FixedChannelPatchEmbed:
    """Patch projection organized as one (P^2, D) block per input channel."""

    patch: int
    blocks: np.ndarray  # (C, P^2, D)
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=np.float64)
        if self.blocks.ndim != 3 or self.blocks.shape[1] != self.patch * self.patch:
            raise ShapeError(f"blocks shape {self.blocks.shape} inconsistent with patch {self.patch}")

    @property
    def channels(self) -> int:
        return self.blocks.shape[0]

    def flat(self) -> np.ndarray:
        c, psq, d = self.blocks.shape
        return self.blocks.reshape(c * psq, d)


def adapt_average_replicate(embed: FixedChannelPatchEmbed, new_channels: int) -> FixedChannelPatchEmbed:
    """Average the kernels over training channels, replicate, divide by C'."""
    if new_channels < 1:
        raise ParameterError(f"new channel count must be >= 1, got {new_channels}")
    kernel = embed.blocks.mean(axis=0)
    blocks = np.repeat(kernel[None] / new_channels, new_channels, axis=0)
    return FixedChannelPatchEmbed(patch=embed.patch, blocks=blocks, bias=embed.bias)


def adapt_rgbn_fourth_mean(embed: FixedChannelPatchEmbed) -> FixedChannelPatchEmbed:
    """Append a fourth kernel equal to the mean of the three original ones."""
    if embed.channels != 3:
        raise ContractError(f"fourth-channel rule needs exactly 3 blocks, got {embed.channels}")
    fourth = embed.blocks.mean(axis=0, keepdims=True)
    return FixedChannelPatchEmbed(
        patch=embed.patch, blocks=np.concatenate([embed.blocks, fourth], axis=0), bias=embed.bias
    )


class FixedChannelViT:
    """Standard ViT over a fixed channel count; exists to exercise adaptation."""

    kind = "fixed_vit"

    def __init__(self, cfg: ModelConfig, channels: int, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.channels = channels
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        d, psq = cfg.embed_dim, cfg.patch * cfg.patch
        self.params = {
            "fix.proj": Tensor(rng.normal(0, 0.02, size=(channels * psq, d)), requires_grad=True),
            "fix.pos": Tensor(rng.normal(0, 0.02, size=(cfg.n_patches, d)), requires_grad=True),
            "fix.cls": Tensor(rng.normal(0, 0.02, size=(d,)), requires_grad=True),
        }
        self.params.update(init_encoder_params(rng, cfg))

    def patch_embed(self) -> FixedChannelPatchEmbed:
        psq = self.cfg.patch * self.cfg.patch
        flat = self.params["fix.proj"].data
        return FixedChannelPatchEmbed(
            patch=self.cfg.patch,
            blocks=flat.reshape(self.channels, psq, self.cfg.embed_dim).copy(),
        )

    def with_patch_embed(self, embed: FixedChannelPatchEmbed) -> "FixedChannelViT":
        """Copy of this model whose first layer is the given embedding."""
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        params["fix.proj"] = Tensor(embed.flat().copy(),
                                    requires_grad=self.params["fix.proj"].requires_grad)
        return FixedChannelViT(self.cfg, embed.channels, params=params)

    # -- protocol shared with the channel-token backbone ---------------------
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
        meta = {"kind": self.kind, "config": asdict(self.cfg), "channels": self.channels}
        gxb.save_bundle(path, self.state_arrays(), meta=meta)

    @classmethod
    def load(cls, path) -> "FixedChannelViT":
        arrays, meta = gxb.load_bundle(Path(path))
        model = cls(ModelConfig(**meta["config"]), channels=int(meta["channels"]), seed=0)
        model.load_state_arrays(arrays)
        return model

    def encode(self, stack: np.ndarray, bands=None, mask=None) -> Encoded:
        stack = np.asarray(stack, dtype=np.float64)
        if stack.ndim == 3:
            stack = stack[None]
        bsz, c, h, w = stack.shape
        if c != self.channels:
            raise ShapeError(f"model expects {self.channels} channels, stack has {c}")
        patch = self.cfg.patch
        patches = extract_patches(stack, patch)  # (B, C*Np, P^2), channel-major
        hp, wp = h // patch, w // patch
        n_p = hp * wp
        psq = patch * patch
        per_patch = patches.reshape(bsz, c, n_p, psq).transpose(0, 2, 1, 3).reshape(bsz, n_p, c * psq)
        tok = matmul(Tensor(per_patch), self.params["fix.proj"])
        pos = take(self.params["fix.pos"], pos_grid_ids(self.cfg.grid, hp, wp), axis=0)
        tok = tok + pos
        cls = mul(reshape(self.params["fix.cls"], (1, 1, -1)), Tensor(np.ones((bsz, 1, 1))))
        tokens = concat([cls, tok], axis=1)
        layers, final = encoder_forward(tokens, self.params, self.cfg)
        dummy_bands = tuple(bands) if bands is not None else (None,) * c
        return Encoded(layers=layers, final=final, bands=dummy_bands, grid=(hp, wp))

    def cls_representation(self, encoded: Encoded) -> Tensor:
        b = encoded.final.shape[0]
        return reshape(take(encoded.final, [0], axis=1), (b, self.cfg.embed_dim))

    def spatial_feature_maps(self, encoded: Encoded, layer_indices) -> list:
        idx = list(layer_indices)
        if len(idx) != 4 or len(set(idx)) != 4:
            raise ParameterError(f"need 4 distinct layer indices, got {layer_indices}")
        hp, wp = encoded.grid
        b = encoded.final.shape[0]
        maps = []
        for i in idx:
            if not 0 <= i < self.cfg.depth:
                raise ParameterError(f"layer index {i} outside [0, {self.cfg.depth})")
            toks = take(encoded.layers[i + 1], np.arange(1, hp * wp + 1), axis=1)
            maps.append(reshape(toks, (b, hp, wp, self.cfg.embed_dim)))
        return maps


def load_backbone(path):
    """Load either backbone kind from a checkpoint bundle."""
    _, meta = gxb.load_bundle(Path(path))
    if meta.get("kind") == FixedChannelViT.kind:
        return FixedChannelViT.load(path)
    return ChannelTokenViT.load(path)


# ---------------------------------------------------------------------------
# task heads
# ---------------------------------------------------------------------------


def default_layer_indices(depth: int) -> tuple[int, ...]:
    if depth < 4:
        raise ParameterError(f"multi-scale heads need depth >= 4, got {depth}")
    return tuple(round((i + 1) * depth / 4) - 1 for i in range(4))


@lru_cache(maxsize=32)
def _bilinear_matrix(hp: int, wp: int, out_h: int, out_w: int) -> np.ndarray:
    """(out_h*out_w, hp*wp) interpolation weights, align_corners=False."""
    ys = (np.arange(out_h) + 0.5) * hp / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * wp / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, hp - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, wp - 1)
    y1 = np.clip(y0 + 1, 0, hp - 1)
    x1 = np.clip(x0 + 1, 0, wp - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)
    wx = np.clip(xs - x0, 0.0, 1.0)
    mat = np.zeros((out_h * out_w, hp * wp))
    pix = 0
    for iy in range(out_h):
        for ix in range(out_w):
            for gy, fy in ((y0[iy], 1 - wy[iy]), (y1[iy], wy[iy])):
                for gx, fx in ((x0[ix], 1 - wx[ix]), (x1[ix], wx[ix])):
                    mat[pix, gy * wp + gx] += fy * fx
            pix += 1
    return mat


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    flat = np.asarray(labels).reshape(-1).astype(np.int64)
    out = np.zeros((flat.size, k))
    out[np.arange(flat.size), flat] = 1.0
    return out


class ClassifierHead:
    """Linear classifier over the CLS representation."""

    kind = "classification"
    consumes = "cls"

    def __init__(self, embed_dim: int, num_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.params = {
            "head.w": Tensor(rng.normal(0, 0.02, size=(embed_dim, num_classes)), requires_grad=True),
            "head.b": Tensor(np.zeros(num_classes), requires_grad=True),
        }

    def logits(self, feats: Tensor) -> Tensor:
        return matmul(feats, self.params["head.w"]) + self.params["head.b"]

    def loss_from_features(self, feats: Tensor, labels: np.ndarray) -> Tensor:
        target = _one_hot(labels, self.num_classes)
        return soft_cross_entropy(target, self.logits(feats))

    def loss(self, backbone, batch) -> Tensor:
        feats = backbone.cls_representation(backbone.encode(batch["stacks"], batch["bands"]))
        return self.loss_from_features(feats, batch["labels"])

    def predict_from_features(self, feats: Tensor) -> np.ndarray:
        return self.logits(feats).data.argmax(axis=-1)

    def predict(self, backbone, batch) -> np.ndarray:
        with no_grad():
            feats = backbone.cls_representation(backbone.encode(batch["stacks"], batch["bands"]))
            return self.predict_from_features(feats)


class MultilabelHead(ClassifierHead):
    """Per-label sigmoid classifier; predictions threshold at 0.5."""

    kind = "multilabel"

    def loss_from_features(self, feats: Tensor, labels: np.ndarray) -> Tensor:
        return binary_cross_entropy_with_logits(np.asarray(labels, dtype=np.float64),
                                                self.logits(feats))

    def predict_from_features(self, feats: Tensor) -> np.ndarray:
        return (self.logits(feats).data > 0.0).astype(np.int64)  # sigmoid > 0.5


class SegmentationHead:
    """Multi-scale decoder: per-level projection of width w*D, fused, bilinearly
    upsampled to pixel resolution, then a per-pixel linear classifier."""

    kind = "segmentation"
    consumes = "maps"

    def __init__(self, embed_dim: int, num_classes: int, depth: int,
                 width: int = 1, layer_indices=None, seed: int = 0):
        if width not in (1, 2, 3):
            raise ParameterError(f"decoder width multiplier must be in {{1,2,3}}, got {width}")
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.width = width
        self.layer_indices = tuple(layer_indices) if layer_indices else default_layer_indices(depth)
        wd = width * embed_dim
        self.params = {}
        for level in range(4):
            self.params[f"seg.p{level}.w"] = Tensor(
                rng.normal(0, 0.02, size=(embed_dim, wd)), requires_grad=True)
            self.params[f"seg.p{level}.b"] = Tensor(np.zeros(wd), requires_grad=True)
        self.params["seg.out.w"] = Tensor(rng.normal(0, 0.02, size=(wd, num_classes)),
                                          requires_grad=True)
        self.params["seg.out.b"] = Tensor(np.zeros(num_classes), requires_grad=True)

    def decode_logits(self, maps: list, out_hw: tuple[int, int]) -> Tensor:
        if len(maps) != 4:
            raise ContractError(f"decoder consumes exactly 4 feature maps, got {len(maps)}")
        b, hp, wp, d = maps[0].shape
        fused = None
        for level, fmap in enumerate(maps):
            x = reshape(fmap, (b, hp * wp, d))
            x = matmul(x, self.params[f"seg.p{level}.w"]) + self.params[f"seg.p{level}.b"]
            fused = x if fused is None else fused + x
        fused = gelu(fused)
        up = matmul(Tensor(_bilinear_matrix(hp, wp, *out_hw)), fused)
        return matmul(up, self.params["seg.out.w"]) + self.params["seg.out.b"]

    def _maps(self, backbone, stacks, bands):
        enc = backbone.encode(stacks, bands)
        return backbone.spatial_feature_maps(enc, self.layer_indices)

    def loss(self, backbone, batch) -> Tensor:
        masks = np.asarray(batch["labels"])
        out_hw = masks.shape[-2:]
        logits = self.decode_logits(self._maps(backbone, batch["stacks"], batch["bands"]), out_hw)
        target = _one_hot(masks, self.num_classes).reshape(
            masks.shape[0], out_hw[0] * out_hw[1], self.num_classes)
        return soft_cross_entropy(target, logits)

    def predict(self, backbone, batch) -> np.ndarray:
        stacks = np.asarray(batch["stacks"])
        out_hw = stacks.shape[-2:]
        with no_grad():
            logits = self.decode_logits(self._maps(backbone, stacks, batch["bands"]), out_hw)
        b = stacks.shape[0]
        return logits.data.argmax(axis=-1).reshape(b, *out_hw)


def change_features(backbone, before, bands_before, after, bands_after, layer_indices) -> list:
    """Per-level elementwise difference of the two encodings (before - after)."""
    before = np.asarray(before)
    after = np.asarray(after)
    if before.shape[-2:] != after.shape[-2:]:
        raise ShapeError(f"before/after spatial sizes differ: {before.shape} vs {after.shape}")
    maps_b = backbone.spatial_feature_maps(backbone.encode(before, bands_before), layer_indices)
    maps_a = backbone.spatial_feature_maps(backbone.encode(after, bands_after), layer_indices)
    return [mb - ma for mb, ma in zip(maps_b, maps_a)]


class ChangeDetectionHead(SegmentationHead):
    """Segmentation decoder applied to differenced before/after features."""

    kind = "change-detection"
    consumes = "pair"

    def _diff_maps(self, backbone, batch):
        return change_features(
            backbone, batch["before"], batch["bands_before"],
            batch["after"], batch["bands_after"], self.layer_indices,
        )

    def loss(self, backbone, batch) -> Tensor:
        masks = np.asarray(batch["labels"])
        out_hw = masks.shape[-2:]
        logits = self.decode_logits(self._diff_maps(backbone, batch), out_hw)
        target = _one_hot(masks, self.num_classes).reshape(
            masks.shape[0], out_hw[0] * out_hw[1], self.num_classes)
        return soft_cross_entropy(target, logits)

    def predict(self, backbone, batch) -> np.ndarray:
        before = np.asarray(batch["before"])
        out_hw = before.shape[-2:]
        with no_grad():
            logits = self.decode_logits(self._diff_maps(backbone, batch), out_hw)
        return logits.data.argmax(axis=-1).reshape(before.shape[0], *out_hw)


def predict_change(backbone, head: ChangeDetectionHead, before, bands_before,
                   after, bands_after) -> np.ndarray:
    """Change mask for one before/after pair (possibly different band sets)."""
    batch = {
        "before": np.asarray(before)[None] if np.asarray(before).ndim == 3 else np.asarray(before),
        "after": np.asarray(after)[None] if np.asarray(after).ndim == 3 else np.asarray(after),
        "bands_before": bands_before,
        "bands_after": bands_after,
    }
    out = head.predict(backbone, batch)
    return out[0] if np.asarray(before).ndim == 3 else out


def make_head(task: str, embed_dim: int, num_classes: int, depth: int,
              width: int = 1, seed: int = 0):
    if task == "classification":
        return ClassifierHead(embed_dim, num_classes, seed=seed)
    if task == "multilabel":
        return MultilabelHead(embed_dim, num_classes, seed=seed)
    if task == "segmentation":
        return SegmentationHead(embed_dim, num_classes, depth, width=width, seed=seed)
    if task == "change-detection":
        return ChangeDetectionHead(embed_dim, num_classes, depth, width=width, seed=seed)
    raise ParameterError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# dataset preparation (manifest -> arrays)
# ---------------------------------------------------------------------------


def prepare_split(manifest: DatasetManifest, split: str, combo: BandCombination,
                  after_combo: BandCombination | None = None) -> dict:
    """Normalized channel stacks plus labels for one split.

    For change detection ``combo`` selects the before bands and
    ``after_combo`` (default: same) the after bands.
    """
    stats = manifest.stats
    if stats is None:
        raise ContractError("manifest lacks normalization stats")
    stacks, labels, afters = [], [], []
    for sample in manifest.samples(split):
        if isinstance(sample.label, ChangePair):
            before = normalize_stack(band_select(sample.raster, combo), stats)
            ac = after_combo or combo
            after = normalize_stack(band_select(sample.label.after, ac), stats)
            stacks.append(before.data)
            afters.append(after.data)
            labels.append(sample.label.mask)
        else:
            stack = normalize_stack(band_select(sample.raster, combo), stats)
            stacks.append(stack.data)
            labels.append(sample.label)
    out = {"bands": combo.bands, "stacks": np.stack(stacks)}
    if manifest.task == "change-detection":
        out["before"] = out.pop("stacks")
        out["after"] = np.stack(afters)
        out["bands_before"] = combo.bands
        out["bands_after"] = (after_combo or combo).bands
        out["labels"] = np.stack(labels)
    elif manifest.task == "multilabel":
        bits = np.zeros((len(labels), manifest.num_classes), dtype=np.int64)
        for i, active in enumerate(labels):
            for j in active:
                bits[i, j] = 1
        out["labels"] = bits
    elif manifest.task == "segmentation":
        out["labels"] = np.stack(labels)
    else:
        out["labels"] = np.asarray(labels, dtype=np.int64)
    return out


def _batch_slice(data: dict, idx: np.ndarray) -> dict:
    out = dict(data)
    for key in ("stacks", "before", "after", "labels"):
        if key in out:
            out[key] = out[key][idx]
    return out


def _num_samples(data: dict) -> int:
    return len(data["labels"])


def evaluate_predictions(task: str, metric: str, preds: np.ndarray, labels: np.ndarray,
                         num_classes: int) -> float:
    if task == "multilabel":
        return f1_multilabel(multilabel_accumulators(labels, preds))
    k = 2 if task == "change-detection" else num_classes
    acc = ConfusionAccumulator(max(k, 2)).update(labels, preds)
    return score(metric, acc)


# ---------------------------------------------------------------------------
# the fine-tuning loop
# ---------------------------------------------------------------------------


DEFAULT_DECAY_EPOCHS = {"classification": 30, "multilabel": 30,
                        "segmentation": 80, "change-detection": 80}
DEFAULT_BATCH = {"classification": 64, "multilabel": 64,
                 "segmentation": 8, "change-detection": 8}


@dataclass(frozen=True)
class FinetuneConfig:
    mode: str = "full"  # full | frozen
    lr: float = 1e-4
    warmup_epochs: int = 20
    decay_epochs: int | None = None  # task default: 30 cls / 80 seg & cd
    batch_size: int | None = None  # task default: 64 cls / 8 seg & cd
    seed: int = 0
    weight_decay: float = 0.05

    def __post_init__(self):
        if self.mode not in ("full", "frozen"):
            raise ParameterError(f"mode must be full or frozen, got {self.mode!r}")

    def resolve(self, task: str) -> tuple[int, int, int]:
        decay = self.decay_epochs if self.decay_epochs is not None else DEFAULT_DECAY_EPOCHS[task]
        batch = self.batch_size if self.batch_size is not None else DEFAULT_BATCH[task]
        return self.warmup_epochs, decay, batch


def finetune_lr(epoch: int, warmup: int, decay: int, peak: float) -> float:
    """Linear warmup over ``warmup`` epochs, then cosine decay to zero."""
    if epoch < warmup:
        return peak * (epoch + 1) / warmup
    t = (epoch - warmup) / max(decay, 1)
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(t, 1.0)))


@dataclass
class FinetuneResult:
    backbone_state: dict[str, np.ndarray]
    head_state: dict[str, np.ndarray]
    best_metric: float
    best_epoch: int
    history: list[dict] = field(default_factory=list)


def finetune(backbone, head, train: dict, val: dict, task: str, metric: str,
             cfg: FinetuneConfig) -> FinetuneResult:
    """Train head (and backbone in full mode); return the best-val checkpoint."""
    warmup, decay, batch_size = cfg.resolve(task)
    epochs = warmup + decay
    frozen = cfg.mode == "frozen"
    backbone.set_trainable(not frozen)
    frozen_before = backbone.state_arrays() if frozen else None

    trainable = dict(head.params)
    if not frozen:
        trainable.update(backbone.params)
    opt = AdamWState(weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = _num_samples(train)

    # frozen CLS-consuming heads never need to re-encode the data
    cached_feats = None
    if frozen and getattr(head, "consumes", None) == "cls":
        with no_grad():
            cached_feats = {
                "train": _encode_features(backbone, train, batch_size),
                "val": _encode_features(backbone, val, batch_size),
            }

    best = FinetuneResult({}, {}, best_metric=-np.inf, best_epoch=-1)
    for epoch in range(epochs):
        lr = finetune_lr(epoch, warmup, decay, cfg.lr)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if cached_feats is not None:
                loss = head.loss_from_features(Tensor(cached_feats["train"][idx]),
                                               train["labels"][idx])
            else:
                loss = head.loss(backbone, _batch_slice(train, idx))
            backward(loss, params=list(trainable.values()))
            adamw_step(trainable, opt, lr)
        if cached_feats is not None:
            preds = head.predict_from_features(Tensor(cached_feats["val"]))
        else:
            preds = _predict_in_batches(backbone, head, val, batch_size)
        val_metric = evaluate_predictions(task, metric, preds, val["labels"],
                                          getattr(head, "num_classes", 2))
        best.history.append({"epoch": epoch, "lr": lr, "val_metric": val_metric})
        if val_metric > best.best_metric:
            best.best_metric = val_metric
            best.best_epoch = epoch
            best.backbone_state = backbone.state_arrays()
            best.head_state = {k: p.data.copy() for k, p in head.params.items()}

    if frozen:
        after = backbone.state_arrays()
        for k, arr in frozen_before.items():
            if not np.array_equal(arr, after[k]):
                raise ContractError(f"frozen backbone parameter {k!r} changed during fine-tuning")
        backbone.set_trainable(True)

    # leave the model at its best checkpoint
    backbone.load_state_arrays(best.backbone_state)
    for k, p in head.params.items():
        p.data = best.head_state[k].copy()
        p.grad = None
    return best


def _encode_features(backbone, data: dict, batch_size: int) -> np.ndarray:
    feats = []
    n = _num_samples(data)
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        enc = backbone.encode(data["stacks"][sl], data["bands"])
        feats.append(backbone.cls_representation(enc).data)
    return np.concatenate(feats, axis=0)


def _predict_in_batches(backbone, head, data: dict, batch_size: int) -> np.ndarray:
    preds = []
    n = _num_samples(data)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        preds.append(head.predict(backbone, _batch_slice(data, idx)))
    return np.concatenate(preds, axis=0)


def evaluate_on(backbone, head, data: dict, task: str, metric: str,
                batch_size: int = 64) -> float:
    preds = _predict_in_batches(backbone, head, data, batch_size)
    return evaluate_predictions(task, metric, preds, data["labels"],
                                getattr(head, "num_classes", 2))


# ---------------------------------------------------------------------------
# linear probing on frozen representations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 300
    lr: float = 0.05
    seed: int = 0


def _combo_features(backbone, manifest: DatasetManifest, split: str,
                    combo: BandCombination, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    data = prepare_split(manifest, split, combo)
    with no_grad():
        feats = _encode_features(backbone, data, batch_size)
    return feats, data["labels"]


def linear_probe_mixture(backbone, manifest: DatasetManifest, combos,
                         cfg: ProbeConfig = ProbeConfig(), train_split: str = "train",
                         eval_split: str = "test") -> dict:
    """Linear probe trained on the union of CLS features across combos.

    Every training sample contributes one vector per combo, all with the same
    label; the probe is then scored separately on each combo of the eval
    split. Returns {"scores": {combo name: accuracy}, "weights": (W, b)}.
    """
    combos = [c for c in combos]
    if not combos:
        raise ParameterError("probe needs at least one band combination")
    if manifest.task != "classification":
        raise ParameterError("the linear probe targets classification tasks")
    feats, labels = [], []
    for combo in combos:
        f, y = _combo_features(backbone, manifest, train_split, combo)
        feats.append(f)
        labels.append(y)
    x = np.concatenate(feats, axis=0)
    y = np.concatenate(labels, axis=0)
    k = manifest.num_classes

    rng = np.random.default_rng(cfg.seed)
    w = Tensor(rng.normal(0, 0.01, size=(x.shape[1], k)), requires_grad=True)
    b = Tensor(np.zeros(k), requires_grad=True)
    opt = AdamWState(weight_decay=0.0)
    target = _one_hot(y, k)
    xt = Tensor(x)
    for _ in range(cfg.epochs):
        loss = soft_cross_entropy(target, matmul(xt, w) + b)
        backward(loss, params=[w, b])
        adamw_step({"w": w, "b": b}, opt, cfg.lr)

    scores = {}
    for combo in combos:
        f_eval, y_eval = _combo_features(backbone, manifest, eval_split, combo)
        pred = (f_eval @ w.data + b.data).argmax(axis=-1)
        scores[combo.name] = float((pred == y_eval).mean())
    return {"scores": scores, "weights": (w.data.copy(), b.data.copy())}
