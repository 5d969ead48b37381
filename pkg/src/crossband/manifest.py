"""Dataset manifests: a JSON index over per-band GXB1 raster files.

Schema::

    {
      "task": "classification" | "multilabel" | "segmentation" | "change-detection",
      "num_classes": int,
      "metric": str,                      # optional; defaults by task
      "bands": ["B2", ...],
      "splits": {"train"|"val"|"test": [
          {"bands": {"B2": "path", ...},
           "label": int | [int] | "path",
           "bands_after": {"B2": "path", ...}}   # change-detection only
      ]},
      "stats": {"B2": {"mean": f, "std": f}, ...}
    }

Paths are relative to the manifest's directory. Labels are a class index
(classification), a list of active label ids (multilabel), or a GXB1 mask
path (segmentation / change-detection, where it is the change mask).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gxb
from .bands import Band, BandStats, DataError, NormalizationStats

TASKS = ("classification", "multilabel", "segmentation", "change-detection")

DEFAULT_METRICS = {
    "classification": "accuracy",
    "multilabel": "f1_multilabel",
    "segmentation": "miou",
    "change-detection": "f1",
}


@dataclass
class ChangePair:
    """Task payload of a change-detection sample."""

    after: dict[Band, np.ndarray]
    mask: np.ndarray


@dataclass
class SceneSample:
    """A co-registered multi-band raster plus its task payload.

    For change detection ``raster`` is the before image and the payload holds
    the after raster and the change mask.
    """

    raster: dict[Band, np.ndarray]
    label: object  # int | tuple[int, ...] | np.ndarray | ChangePair

    def __post_init__(self):
        shapes = {plane.shape for plane in self.raster.values()}
        if len(shapes) > 1:
            raise DataError(f"raster planes disagree in shape: {shapes}")


@dataclass
class SampleRecord:
    bands: dict[Band, str]
    label: object
    bands_after: dict[Band, str] | None = None


@dataclass
class DatasetManifest:
    task: str
    num_classes: int
    bands: tuple[Band, ...]
    splits: dict[str, list[SampleRecord]]
    stats: NormalizationStats | None = None
    metric: str | None = None
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.metric is None:
            self.metric = DEFAULT_METRICS[self.task]

    def load_sample(self, record: SampleRecord) -> SceneSample:
        raster = {b: gxb.read_tensor(self.root / p) for b, p in record.bands.items()}
        if self.task == "change-detection":
            after = {b: gxb.read_tensor(self.root / p) for b, p in record.bands_after.items()}
            mask = gxb.read_tensor(self.root / record.label).astype(np.int64)
            return SceneSample(raster=raster, label=ChangePair(after=after, mask=mask))
        if self.task == "segmentation":
            mask = gxb.read_tensor(self.root / record.label).astype(np.int64)
            return SceneSample(raster=raster, label=mask)
        if self.task == "multilabel":
            return SceneSample(raster=raster, label=tuple(int(x) for x in record.label))
        return SceneSample(raster=raster, label=int(record.label))

    def samples(self, split: str):
        for record in self.splits[split]:
            yield self.load_sample(record)


def _record_to_json(r: SampleRecord) -> dict:
    out: dict = {"bands": {b.value: p for b, p in r.bands.items()}, "label": r.label}
    if isinstance(r.label, tuple):
        out["label"] = list(r.label)
    if r.bands_after is not None:
        out["bands_after"] = {b.value: p for b, p in r.bands_after.items()}
    return out


def _record_from_json(d: dict) -> SampleRecord:
    after = d.get("bands_after")
    return SampleRecord(
        bands={Band(k): v for k, v in d["bands"].items()},
        label=d["label"],
        bands_after={Band(k): v for k, v in after.items()} if after else None,
    )


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "task": manifest.task,
        "num_classes": manifest.num_classes,
        "metric": manifest.metric,
        "bands": [b.value for b in manifest.bands],
        "splits": {s: [_record_to_json(r) for r in recs] for s, recs in manifest.splits.items()},
        "stats": {
            b.value: {"mean": st.mean, "std": st.std} for b, st in (manifest.stats or {}).items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    stats = {
        Band(k): BandStats(mean=v["mean"], std=v["std"]) for k, v in doc.get("stats", {}).items()
    }
    splits = {s: [_record_from_json(r) for r in recs] for s, recs in doc["splits"].items()}
    return DatasetManifest(
        task=doc["task"],
        num_classes=int(doc["num_classes"]),
        bands=tuple(Band(b) for b in doc["bands"]),
        splits=splits,
        stats=stats or None,
        metric=doc.get("metric"),
        root=path.parent,
    )


def split_rasters(manifest: DatasetManifest, split: str):
    """Yield every raster of a split (before and after for change pairs)."""
    if split not in manifest.splits or not manifest.splits[split]:
        raise DataError(f"split {split!r} is empty or missing")
    for sample in manifest.samples(split):
        yield sample.raster
        if isinstance(sample.label, ChangePair):
            yield sample.label.after
