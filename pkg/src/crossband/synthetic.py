"""Desk-scale synthetic multispectral/SAR dataset generator.

Every sample is a latent scene (a shape on a flat background) rendered into
all 12 canonical bands. The RGB bands always encode the scene; every other
band encodes it with weight ``rho`` and an independent decoy scene with
weight ``1 - rho``, so rho=1 makes all band combinations equally informative
about the label and rho=0 leaves non-RGB bands uninformative.

Per-band class amplitudes are evenly spaced levels under a per-band class
permutation, so each band separates the classes on its own when rho permits.
Generation is a pure function of the config (single seeded generator, fixed
draw order).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gxb
from .bands import CANONICAL_BANDS, Band, compute_stats
from .manifest import DatasetManifest, SampleRecord, save_manifest, split_rasters

RGB_BANDS = (Band.B4, Band.B3, Band.B2)

_SHAPES = ("disk", "square", "diamond", "cross")


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: int = 32
    num_classes: int = 4
    rho: float = 1.0
    noise: float = 0.05
    seed: int = 0
    train: int = 128
    val: int = 32
    test: int = 64
    num_labels: int = 4  # multilabel only

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


def _shape_mask(size: int, kind: str, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == "disk":
        return (dx * dx + dy * dy <= r * r).astype(np.float64)
    if kind == "square":
        return ((np.abs(dx) <= r) & (np.abs(dy) <= r)).astype(np.float64)
    if kind == "diamond":
        return (np.abs(dx) + np.abs(dy) <= r).astype(np.float64)
    if kind == "cross":
        return ((np.abs(dx) <= r / 2.5) | (np.abs(dy) <= r / 2.5)).astype(np.float64) * (
            (np.abs(dx) <= r) & (np.abs(dy) <= r)
        )
    raise ValueError(f"unknown shape {kind!r}")


def _class_amplitudes(rng: np.random.Generator, num_classes: int) -> np.ndarray:
    """(num_classes, 12) amplitude table: spread levels, permuted per band."""
    levels = np.linspace(0.4, 1.6, num_classes)
    table = np.empty((num_classes, len(CANONICAL_BANDS)))
    for b in range(len(CANONICAL_BANDS)):
        table[:, b] = levels[rng.permutation(num_classes)]
    return table


class _SceneRenderer:
    def __init__(self, cfg: SyntheticConfig, rng: np.random.Generator, amplitudes: np.ndarray,
                 background: np.ndarray):
        self.cfg = cfg
        self.rng = rng
        self.amplitudes = amplitudes
        self.background = background

    def random_geometry(self, kind: str | None = None):
        s = self.cfg.image_size
        if kind is None:
            kind = _SHAPES[self.rng.integers(len(_SHAPES))]
        r = float(self.rng.uniform(s / 6.0, s / 3.5))
        cx = float(self.rng.uniform(r, s - r))
        cy = float(self.rng.uniform(r, s - r))
        return kind, cx, cy, r

    def render(self, latent: np.ndarray, cls: int, base: bool = True) -> dict[Band, np.ndarray]:
        """Render one latent scene into all 12 bands with rho-gated decoys.

        ``base=False`` leaves out the background offset and pixel noise so
        callers can additively compose layers.
        """
        cfg = self.cfg
        s = cfg.image_size
        decoy_cls = int(self.rng.integers(self.amplitudes.shape[0]))
        decoy_latent = _shape_mask(s, *self.random_geometry())
        raster: dict[Band, np.ndarray] = {}
        for bi, band in enumerate(CANONICAL_BANDS):
            signal = self.amplitudes[cls, bi] * latent
            if band in RGB_BANDS:
                plane = signal
            else:
                plane = cfg.rho * signal + (1.0 - cfg.rho) * self.amplitudes[decoy_cls, bi] * decoy_latent
            if base:
                plane = plane + self.background[bi]
                if cfg.noise > 0:
                    plane = plane + cfg.noise * self.rng.standard_normal((s, s))
            raster[band] = plane
        return raster


def _write_raster(raster: dict[Band, np.ndarray], directory: Path, root: Path) -> dict[Band, str]:
    directory.mkdir(parents=True, exist_ok=True)
    refs = {}
    for band, plane in raster.items():
        path = directory / f"{band.value}.gxb"
        gxb.write_tensor(path, plane)
        refs[band] = str(path.relative_to(root))
    return refs


def generate_synthetic(config: SyntheticConfig, task: str, out_dir) -> DatasetManifest:
    """Render a full dataset to ``out_dir`` and return its manifest.

    Train-split normalization stats are computed and embedded. The same
    (config, task) always produces byte-identical output.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    amplitudes = _class_amplitudes(rng, max(config.num_classes, config.num_labels))
    background = rng.uniform(0.0, 0.2, size=len(CANONICAL_BANDS))
    renderer = _SceneRenderer(config, rng, amplitudes, background)

    splits: dict[str, list[SampleRecord]] = {}
    counts = {"train": config.train, "val": config.val, "test": config.test}
    for split, count in counts.items():
        records = []
        for i in range(count):
            sample_dir = out / "data" / split / f"{i:05d}"
            records.append(_make_sample(renderer, task, sample_dir, out))
        splits[split] = records

    man = DatasetManifest(
        task=task,
        num_classes=(config.num_labels if task == "multilabel" else config.num_classes),
        bands=CANONICAL_BANDS,
        splits=splits,
        root=out,
    )
    man.stats = compute_stats(split_rasters(man, "train"))
    save_manifest(man, out / "manifest.json")
    return man


def _make_sample(renderer: _SceneRenderer, task: str, sample_dir: Path, root: Path) -> SampleRecord:
    cfg = renderer.cfg
    rng = renderer.rng
    s = cfg.image_size

    if task == "classification":
        cls = int(rng.integers(cfg.num_classes))
        kind = _SHAPES[cls % len(_SHAPES)]
        latent = _shape_mask(s, *renderer.random_geometry(kind))
        raster = renderer.render(latent, cls)
        return SampleRecord(bands=_write_raster(raster, sample_dir, root), label=cls)

    if task == "multilabel":
        active = [j for j in range(cfg.num_labels) if rng.random() < 0.5]
        planes = {band: np.zeros((s, s)) for band in CANONICAL_BANDS}
        for j in active:
            latent = _shape_mask(s, *renderer.random_geometry(_SHAPES[j % len(_SHAPES)]))
            layer = renderer.render(latent, j, base=False)
            for band in CANONICAL_BANDS:
                planes[band] += layer[band]
        for bi, band in enumerate(CANONICAL_BANDS):
            planes[band] += renderer.background[bi]
            if cfg.noise > 0:
                planes[band] += cfg.noise * rng.standard_normal((s, s))
        return SampleRecord(bands=_write_raster(planes, sample_dir, root), label=tuple(active))

    if task == "segmentation":
        cls = int(rng.integers(1, cfg.num_classes))
        latent = _shape_mask(s, *renderer.random_geometry())
        raster = renderer.render(latent, cls)
        mask = (latent > 0).astype(np.float64) * cls
        refs = _write_raster(raster, sample_dir, root)
        mask_path = sample_dir / "mask.gxb"
        gxb.write_tensor(mask_path, mask)
        return SampleRecord(bands=refs, label=str(mask_path.relative_to(root)))

    if task == "change-detection":
        cls = int(rng.integers(cfg.num_classes))
        geom_kind = _SHAPES[cls % len(_SHAPES)]
        before_latent = _shape_mask(s, *renderer.random_geometry(geom_kind))
        after_latent = _shape_mask(s, *renderer.random_geometry(geom_kind))
        before = renderer.render(before_latent, cls)
        after = renderer.render(after_latent, cls)
        change = ((before_latent > 0) != (after_latent > 0)).astype(np.float64)
        refs_before = _write_raster(before, sample_dir / "before", root)
        refs_after = _write_raster(after, sample_dir / "after", root)
        mask_path = sample_dir / "mask.gxb"
        gxb.write_tensor(mask_path, change)
        return SampleRecord(bands=refs_before, label=str(mask_path.relative_to(root)),
                            bands_after=refs_after)

    raise ValueError(f"unknown task {task!r}")
