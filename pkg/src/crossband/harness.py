"""Cross-band evaluation protocol: seven train/test cells, three settings.

``run_protocol`` fine-tunes and scores every (model, dataset, cell, seed)
combination, appending one JSON line per run to an append-only store so
interrupted sweeps resume without duplicating work. Aggregation averages
seeds, then datasets (equal weight), and the ranking table derives setting
averages, dense descending ranks, and the overall average.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapt import (
    FinetuneConfig,
    FixedChannelViT,
    adapt_average_replicate,
    adapt_rgbn_fourth_mean,
    evaluate_on,
    finetune,
    load_backbone,
    make_head,
    prepare_split,
)
from .autodiff import ParameterError
from .bands import combination
from .manifest import DatasetManifest, load_manifest
from .model import ChannelTokenViT, ModelConfig

IN_DISTRIBUTION = "in-distribution"
NO_OVERLAP = "no-overlap"
SUPERSET = "superset"
SETTINGS = (IN_DISTRIBUTION, NO_OVERLAP, SUPERSET)


class IncompleteModelError(ValueError):
    """A model is missing one of the seven cell scores."""


class UnsupportedCellError(ValueError):
    """The model has no adaptation path for this train/test pair."""


@dataclass(frozen=True)
class EvalCell:
    train_combo: str
    test_combo: str
    category: str

    @property
    def key(self) -> str:
        return f"{self.train_combo}->{self.test_combo}"


CELLS: tuple[EvalCell, ...] = (
    EvalCell("RGB", "RGB", IN_DISTRIBUTION),
    EvalCell("S2", "S2", IN_DISTRIBUTION),
    EvalCell("RGB", "S1", NO_OVERLAP),
    EvalCell("S2", "S1", NO_OVERLAP),
    EvalCell("RGB", "NS1S2", NO_OVERLAP),
    EvalCell("RGB", "RGBN", SUPERSET),
    EvalCell("S2", "S2+S1", SUPERSET),
)

CELLS_BY_KEY = {c.key: c for c in CELLS}
SETTING_CELLS = {s: tuple(c for c in CELLS if c.category == s) for s in SETTINGS}


@dataclass
class RunRecord:
    model: str
    dataset: str
    cell: str
    category: str
    seed: int
    mode: str
    metric: str
    value: float | None
    wall_time: float
    config_hash: str
    status: str = "ok"
    error: str | None = None

    @property
    def key(self) -> tuple:
        return (self.model, self.dataset, self.cell, self.seed, self.mode)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


class ResultStore:
    """Append-only JSONL record store with per-line atomicity."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def load(self) -> list[RunRecord]:
        if not self.path.exists():
            return []
        records = []
        for line in self.path.read_text().splitlines():
            if line.strip():
                records.append(RunRecord.from_json(line))
        return records

    def append(self, record: RunRecord) -> None:
        line = record.to_json() + "\n"
        with self._lock:
            with self.path.open("a") as fh:
                fh.write(line)
                fh.flush()

    def existing_keys(self) -> set:
        return {r.key for r in self.load()}


@dataclass(frozen=True)
class ModelSpec:
    """How to obtain a backbone for one run: a checkpoint or a fresh init."""

    name: str
    checkpoint: str | None = None
    kind: str = "channel_vit"
    config: ModelConfig = field(default_factory=ModelConfig)
    init_seed: int = 0

    def resolve(self, train_channels: int):
        if self.checkpoint:
            return load_backbone(self.checkpoint)
        if self.kind == "fixed_vit":
            return FixedChannelViT(self.config, channels=train_channels, seed=self.init_seed)
        return ChannelTokenViT(self.config, seed=self.init_seed)


class _PairedBackbone:
    """Routes encoding to per-channel-count variants of a fixed-channel model.

    Change detection may hand the backbone before/after stacks with different
    band counts after adaptation; this dispatcher keeps both variants.
    """

    def __init__(self, variants: dict[int, FixedChannelViT]):
        self.variants = variants
        primary = next(iter(variants.values()))
        self.cfg = primary.cfg
        self.params = {}
        for v in variants.values():
            self.params.update(v.params)

    def _pick(self, stack):
        c = np.asarray(stack).shape[-3]
        if c not in self.variants:
            raise UnsupportedCellError(f"no backbone variant for {c} channels")
        return self.variants[c]

    def encode(self, stack, bands=None, mask=None):
        return self._pick(stack).encode(stack, bands, mask)

    def cls_representation(self, encoded):
        return next(iter(self.variants.values())).cls_representation(encoded)

    def spatial_feature_maps(self, encoded, layer_indices):
        return next(iter(self.variants.values())).spatial_feature_maps(encoded, layer_indices)

    def state_arrays(self):
        out = {}
        for c, v in self.variants.items():
            for k, arr in v.state_arrays().items():
                out[f"{c}:{k}"] = arr
        return out

    def load_state_arrays(self, arrays):
        for c, v in self.variants.items():
            v.load_state_arrays({k.split(":", 1)[1]: a for k, a in arrays.items()
                                 if k.startswith(f"{c}:")})

    def set_trainable(self, trainable):
        for v in self.variants.values():
            v.set_trainable(trainable)


def adapt_fixed_for_bands(model: FixedChannelViT, train_combo, test_combo) -> FixedChannelViT:
    """Appendix-style first-layer rewrite for a combo the model was not trained on."""
    c_train, c_test = len(train_combo), len(test_combo)
    if c_test == model.channels:
        return model
    embed = model.patch_embed()
    if train_combo.name == "RGB" and test_combo.name == "RGBN" and model.channels == 3:
        return model.with_patch_embed(adapt_rgbn_fourth_mean(embed))
    return model.with_patch_embed(adapt_average_replicate(embed, c_test))


@dataclass(frozen=True)
class RunConfig:
    """Fine-tuning hyperparameters shared by every cell of a protocol run."""

    mode: str = "full"
    lr: float = 1e-3
    warmup_epochs: int = 20
    decay_epochs: int | None = None
    batch_size: int | None = None
    width: int = 1

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def finetune_config(self, seed: int) -> FinetuneConfig:
        return FinetuneConfig(mode=self.mode, lr=self.lr, warmup_epochs=self.warmup_epochs,
                              decay_epochs=self.decay_epochs, batch_size=self.batch_size,
                              seed=seed)


def run_cell(spec: ModelSpec, manifest: DatasetManifest, dataset_id: str, cell: EvalCell,
             seed: int, cfg: RunConfig) -> RunRecord:
    """Fine-tune on the cell's train combo, evaluate on its test combo."""
    start = time.time()
    train_combo = combination(cell.train_combo)
    test_combo = combination(cell.test_combo)
    backbone = spec.resolve(len(train_combo))

    if isinstance(backbone, FixedChannelViT) and backbone.channels != len(train_combo):
        # pretrained fixed-channel models are rewritten for the training bands
        backbone = backbone.with_patch_embed(
            adapt_average_replicate(backbone.patch_embed(), len(train_combo)))

    head = make_head(manifest.task, backbone.cfg.embed_dim, manifest.num_classes,
                     backbone.cfg.depth, width=cfg.width, seed=seed)

    is_change = manifest.task == "change-detection"
    train = prepare_split(manifest, "train", train_combo)
    val = prepare_split(manifest, "val", train_combo)
    finetune(backbone, head, train, val, manifest.task, manifest.metric,
             cfg.finetune_config(seed))

    if is_change:
        # the before image keeps the training bands; only the after image moves
        test = prepare_split(manifest, "test", train_combo, after_combo=test_combo)
    else:
        test = prepare_split(manifest, "test", test_combo)

    eval_backbone = backbone
    if isinstance(backbone, FixedChannelViT) and len(test_combo) != backbone.channels:
        adapted = adapt_fixed_for_bands(backbone, train_combo, test_combo)
        if is_change:
            eval_backbone = _PairedBackbone({backbone.channels: backbone,
                                             adapted.channels: adapted})
        else:
            eval_backbone = adapted

    value = evaluate_on(eval_backbone, head, test, manifest.task, manifest.metric)
    return RunRecord(
        model=spec.name, dataset=dataset_id, cell=cell.key, category=cell.category,
        seed=seed, mode=cfg.mode, metric=manifest.metric, value=float(value),
        wall_time=time.time() - start, config_hash=cfg.hash(),
    )


def run_protocol(specs: list[ModelSpec], datasets: dict[str, DatasetManifest],
                 seeds, cfg: RunConfig, store: ResultStore,
                 cells=CELLS, jobs: int = 1) -> list[RunRecord]:
    """Cartesian sweep with resume; failures become error records."""
    if not specs or not datasets or not list(seeds):
        raise ParameterError("run_protocol needs models, datasets, and seeds")
    done = store.existing_keys()
    tasks = [
        (spec, dataset_id, manifest, cell, seed)
        for spec in specs
        for dataset_id, manifest in datasets.items()
        for cell in cells
        for seed in seeds
        if (spec.name, dataset_id, cell.key, seed, cfg.mode) not in done
    ]

    def run_one(task):
        spec, dataset_id, manifest, cell, seed = task
        try:
            record = run_cell(spec, manifest, dataset_id, cell, seed, cfg)
        except Exception as err:  # noqa: BLE001 - failures are data here
            record = RunRecord(
                model=spec.name, dataset=dataset_id, cell=cell.key, category=cell.category,
                seed=seed, mode=cfg.mode, metric=manifest.metric, value=None,
                wall_time=0.0, config_hash=cfg.hash(), status="error", error=repr(err),
            )
        store.append(record)
        return record

    if jobs <= 1:
        new_records = [run_one(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            new_records = list(pool.map(run_one, tasks))
    return new_records


def aggregate_seeds(records: list[RunRecord]) -> dict[tuple, float]:
    """(model, dataset, cell, mode) -> mean value over seeds (ok records only)."""
    groups: dict[tuple, list[float]] = {}
    for r in records:
        if r.status != "ok" or r.value is None:
            continue
        groups.setdefault((r.model, r.dataset, r.cell, r.mode), []).append(r.value)
    return {k: float(np.mean(v)) for k, v in groups.items()}


def dataset_averaged(seed_means: dict[tuple, float]) -> dict[str, dict[str, float]]:
    """model -> cell key -> equal-weight mean over datasets (modes pooled)."""
    groups: dict[tuple[str, str], list[float]] = {}
    for (model, _dataset, cell, _mode), value in seed_means.items():
        groups.setdefault((model, cell), []).append(value)
    out: dict[str, dict[str, float]] = {}
    for (model, cell), values in groups.items():
        out.setdefault(model, {})[cell] = float(np.mean(values))
    return out


@dataclass
class RankingRow:
    model: str
    cells: dict[str, float]
    setting_avg: dict[str, float]
    setting_rank: dict[str, int]
    overall: float


@dataclass
class RankingTable:
    rows: list[RankingRow]

    def row(self, model: str) -> RankingRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)


def build_ranking_table(cell_scores: dict[str, dict[str, float]]) -> RankingTable:
    """Setting averages, dense descending ranks, and the overall mean of 7 cells."""
    rows = []
    for model, cells in cell_scores.items():
        missing = [c.key for c in CELLS if c.key not in cells]
        if missing:
            raise IncompleteModelError(f"model {model!r} lacks cell(s): {', '.join(missing)}")
        setting_avg = {
            s: float(np.mean([cells[c.key] for c in SETTING_CELLS[s]])) for s in SETTINGS
        }
        overall = float(np.mean([cells[c.key] for c in CELLS]))
        rows.append(RankingRow(model=model, cells={c.key: cells[c.key] for c in CELLS},
                               setting_avg=setting_avg, setting_rank={}, overall=overall))
    for s in SETTINGS:
        # descending average; ties broken by model name
        order = sorted(rows, key=lambda r: (-r.setting_avg[s], r.model))
        for rank, row in enumerate(order, start=1):
            row.setting_rank[s] = rank
    rows.sort(key=lambda r: (-r.overall, r.model))
    return RankingTable(rows=rows)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

_SETTING_SHORT = {IN_DISTRIBUTION: "ID", NO_OVERLAP: "NO", SUPERSET: "SUP"}


def _columns() -> list[tuple[str, str]]:
    cols: list[tuple[str, str]] = [("model", "")]
    for s in SETTINGS:
        short = _SETTING_SHORT[s]
        for c in SETTING_CELLS[s]:
            cols.append((f"{short}:{c.key}", "cell"))
        cols.append((f"{short}:AVG", "avg"))
        cols.append((f"{short}:rank", "rank"))
    cols.append(("overall:AVG", "overall"))
    return cols


def _row_values(row: RankingRow) -> list:
    vals: list = [row.model]
    for s in SETTINGS:
        for c in SETTING_CELLS[s]:
            vals.append(row.cells[c.key])
        vals.append(row.setting_avg[s])
        vals.append(row.setting_rank[s])
    vals.append(row.overall)
    return vals


def render_csv(table: RankingTable) -> str:
    lines = [",".join(name for name, _ in _columns())]
    for row in table.rows:
        cells = [v if isinstance(v, str) else repr(v) for v in _row_values(row)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> RankingTable:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    expected = [name for name, _ in _columns()]
    if header != expected:
        raise ParameterError("ranking CSV header does not match the fixed column order")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        model = parts[0]
        values = parts[1:]
        cells, setting_avg, setting_rank = {}, {}, {}
        idx = 0
        for s in SETTINGS:
            for c in SETTING_CELLS[s]:
                cells[c.key] = float(values[idx]); idx += 1
            setting_avg[s] = float(values[idx]); idx += 1
            setting_rank[s] = int(values[idx]); idx += 1
        overall = float(values[idx])
        rows.append(RankingRow(model, cells, setting_avg, setting_rank, overall))
    return RankingTable(rows=rows)


def render_text(table: RankingTable) -> str:
    cols = [name for name, _ in _columns()]
    str_rows = []
    for row in table.rows:
        vals = _row_values(row)
        str_rows.append([v if isinstance(v, str) else
                         (str(v) if isinstance(v, int) else f"{v:.2f}") for v in vals])
    widths = [max(len(c), *(len(r[i]) for r in str_rows)) if str_rows else len(c)
              for i, c in enumerate(cols)]
    def fmt(parts):
        return "  ".join(p.ljust(w) if i == 0 else p.rjust(w)
                         for i, (p, w) in enumerate(zip(parts, widths)))
    lines = [fmt(cols), fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in str_rows]
    return "\n".join(lines) + "\n"


def render_radar_csv(table: RankingTable) -> str:
    """Per-model per-cell long-form scores (radar plot input)."""
    lines = ["model,category,cell,value"]
    for row in table.rows:
        for c in CELLS:
            lines.append(f"{row.model},{c.category},{c.key},{repr(row.cells[c.key])}")
    return "\n".join(lines) + "\n"


def emit_report(table: RankingTable, fmt: str, out_dir) -> list[Path]:
    """Write deterministic report files; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        paths = [out / "ranking.csv", out / "radar.csv"]
        paths[0].write_text(render_csv(table))
        paths[1].write_text(render_radar_csv(table))
    elif fmt == "text":
        paths = [out / "ranking.txt"]
        paths[0].write_text(render_text(table))
    else:
        raise ParameterError(f"unknown report format {fmt!r} (use csv or text)")
    return paths


def table_from_store(store: ResultStore) -> RankingTable:
    return build_ranking_table(dataset_averaged(aggregate_seeds(store.load())))


def load_datasets(paths: list[str]) -> dict[str, DatasetManifest]:
    datasets = {}
    for p in paths:
        path = Path(p)
        manifest_path = path if path.suffix == ".json" else path / "manifest.json"
        datasets[path.stem if path.suffix == ".json" else path.name] = load_manifest(manifest_path)
    return datasets
