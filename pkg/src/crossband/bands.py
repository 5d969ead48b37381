"""Canonical band registry, combination algebra, and raster normalization.

Twelve bands are supported: the ten Sentinel-2 optical bands at <=20 m
resolution plus the two Sentinel-1 SAR polarizations stored as log-magnitudes
in dB. Band combinations are fixed named orderings over this set.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class DataError(ValueError):
    """Dataset-level precondition violated (empty split, bad reference)."""


class StatsError(ValueError):
    """Normalization statistics are unusable (sigma <= 0)."""


class MissingBandError(KeyError):
    """A requested band is not present in the sample."""


class Band(str, Enum):
    B2 = "B2"
    B3 = "B3"
    B4 = "B4"
    B5 = "B5"
    B6 = "B6"
    B7 = "B7"
    B8 = "B8"
    B8A = "B8A"
    B11 = "B11"
    B12 = "B12"
    VV = "VV"
    VH = "VH"

    @property
    def modality(self) -> str:
        return "sar" if self in (Band.VV, Band.VH) else "optical"

    def __str__(self) -> str:  # json-friendly
        return self.value


CANONICAL_BANDS: tuple[Band, ...] = (
    Band.B2, Band.B3, Band.B4, Band.B5, Band.B6, Band.B7,
    Band.B8, Band.B8A, Band.B11, Band.B12, Band.VV, Band.VH,
)

CHANNEL_INDEX: dict[Band, int] = {b: i for i, b in enumerate(CANONICAL_BANDS)}


@dataclass(frozen=True)
class BandCombination:
    name: str
    bands: tuple[Band, ...]

    def __post_init__(self):
        if len(set(self.bands)) != len(self.bands):
            raise ValueError(f"duplicate bands in combination {self.name!r}")

    def __len__(self) -> int:
        return len(self.bands)

    def __iter__(self):
        return iter(self.bands)


_S2 = (Band.B2, Band.B3, Band.B4, Band.B5, Band.B6, Band.B7,
       Band.B8, Band.B8A, Band.B11, Band.B12)
_S1 = (Band.VV, Band.VH)

COMBINATIONS: dict[str, BandCombination] = {
    "RGB": BandCombination("RGB", (Band.B4, Band.B3, Band.B2)),
    "S2": BandCombination("S2", _S2),
    "S1": BandCombination("S1", _S1),
    "NS1S2": BandCombination("NS1S2", (Band.B8A, Band.B11, Band.B12)),
    "RGBN": BandCombination("RGBN", (Band.B4, Band.B3, Band.B2, Band.B8)),
    "S2+S1": BandCombination("S2+S1", _S2 + _S1),
}

_ALIASES = {"N'S1S2": "NS1S2", "S2S1": "S2+S1"}


def combination(name: str) -> BandCombination:
    """Resolve a combination by name (a few spelling aliases accepted)."""
    key = _ALIASES.get(name, name)
    try:
        return COMBINATIONS[key]
    except KeyError:
        raise KeyError(f"unknown band combination {name!r}; known: {sorted(COMBINATIONS)}") from None


SAR_EPSILON = 1e-10


def sar_magnitude_db(real, imag):
    """Log-magnitude of a complex SAR sample: 10*log10(re^2 + im^2 + 1e-10)."""
    real = np.asarray(real, dtype=np.float64)
    imag = np.asarray(imag, dtype=np.float64)
    out = 10.0 * np.log10(real * real + imag * imag + SAR_EPSILON)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BandStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise StatsError(f"band std must be > 0, got {self.std}")


NormalizationStats = dict  # Band -> BandStats

CLIP_RANGE = 3.0
STD_FLOOR = 1e-8


def normalize_clip(plane: np.ndarray, stats: BandStats) -> np.ndarray:
    """Standardize by the band's mean/std and clip to [-3, 3]."""
    z = (np.asarray(plane, dtype=np.float64) - stats.mean) / stats.std
    return np.clip(z, -CLIP_RANGE, CLIP_RANGE)


@dataclass
class ChannelStack:
    """Ordered channel planes plus the band identity of each channel."""

    data: np.ndarray  # (C, H, W)
    bands: tuple[Band, ...]

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != len(self.bands):
            raise ValueError(f"stack shape {self.data.shape} inconsistent with {len(self.bands)} bands")


def band_select(raster: dict[Band, np.ndarray], combo: BandCombination) -> ChannelStack:
    """Stack the combination's bands in order; all must be present."""
    missing = [b.value for b in combo.bands if b not in raster]
    if missing:
        raise MissingBandError(
            f"sample lacks {len(missing)} band(s) required by {combo.name!r}: {', '.join(missing)}"
        )
    data = np.stack([np.asarray(raster[b], dtype=np.float64) for b in combo.bands], axis=0)
    return ChannelStack(data=data, bands=combo.bands)


def normalize_stack(stack: ChannelStack, stats: NormalizationStats) -> ChannelStack:
    planes = [normalize_clip(stack.data[i], stats[b]) for i, b in enumerate(stack.bands)]
    return ChannelStack(data=np.stack(planes, axis=0), bands=stack.bands)


def compute_stats(rasters) -> NormalizationStats:
    """Per-band mean/std over all pixels of an iterable of rasters.

    The std is floored at 1e-8 so constant bands stay usable. Raises
    DataError on an empty input.
    """
    sums: dict[Band, float] = {}
    sqsums: dict[Band, float] = {}
    counts: dict[Band, int] = {}
    n_rasters = 0
    for raster in rasters:
        n_rasters += 1
        for band, plane in raster.items():
            arr = np.asarray(plane, dtype=np.float64)
            sums[band] = sums.get(band, 0.0) + float(arr.sum())
            sqsums[band] = sqsums.get(band, 0.0) + float((arr * arr).sum())
            counts[band] = counts.get(band, 0) + arr.size
    if n_rasters == 0:
        raise DataError("cannot compute normalization stats over an empty split")
    stats: NormalizationStats = {}
    for band, n in counts.items():
        mu = sums[band] / n
        var = max(sqsums[band] / n - mu * mu, 0.0)
        stats[band] = BandStats(mean=mu, std=max(np.sqrt(var), STD_FLOOR))
    return stats
