"""Teacher/student self-distillation pretraining with masked patch modeling.

Per batch, hierarchical channel sampling draws the teacher's band set T and,
for each of the 10 views (2 global + 8 local), an independent student subset
of T. The EMA teacher sees the unmasked global crops over T; the student sees
every view over its own subset, with block-masked patch slots on its global
views. The loss is the CLS-token distillation term over all (global, view)
pairs plus the masked-slot patch term, summed without weights. Learning rate
follows a warmup-stable-decay schedule over samples seen.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    ParameterError,
    Tensor,
    backward,
    gelu,
    matmul,
    mul,
    no_grad,
    soft_cross_entropy,
    take,
    tsum,
)
from .bands import CHANNEL_INDEX, Band, normalize_clip
from .manifest import DatasetManifest
from .model import ChannelTokenViT, ModelConfig
from .optim import AdamWState, TrainingError, adamw_step, ema_update


class ContractError(RuntimeError):
    """An internal exchange between components violated its contract."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CropConfig:
    n_global: int = 2
    n_local: int = 8
    global_size: int = 32
    local_size: int = 16
    global_scale: tuple[float, float] = (0.25, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.25)

    @property
    def n_views(self) -> int:
        return self.n_global + self.n_local


@dataclass(frozen=True)
class MaskConfig:
    ratio_min: float = 0.1
    ratio_max: float = 0.5


@dataclass(frozen=True)
class HeadConfig:
    prototypes: int = 1024
    hidden: int = 128
    shared_head: bool = True


@dataclass(frozen=True)
class DistillConfig:
    t_student: float = 0.1
    t_teacher_start: float = 0.04
    t_teacher_end: float = 0.07
    t_teacher_warmup: int = 0  # samples; 0 means start at t_teacher_end
    center_momentum: float = 0.9
    ema_start: float = 0.996
    ema_end: float = 1.0


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float
    warmup_samples: int
    total_samples: int
    decay_fraction: float = 0.1

    def __post_init__(self):
        if not self.peak_lr > 0:
            raise ParameterError(f"peak_lr must be > 0, got {self.peak_lr}")
        if not 0 < self.decay_fraction < 1:
            raise ParameterError("decay_fraction must lie in (0, 1)")
        if self.warmup_samples >= (1 - self.decay_fraction) * self.total_samples:
            raise ParameterError("warmup must end before the decay phase starts")


@dataclass(frozen=True)
class CorpusSpec:
    name: str
    weight: float = 1.0
    parallel: bool = False  # eligible for the parallel-data coefficient

    def __post_init__(self):
        if not self.weight > 0:
            raise ParameterError(f"corpus weight must be > 0, got {self.weight}")


@dataclass(frozen=True)
class PretrainMixConfig:
    corpora: tuple[CorpusSpec, ...]
    parallel_coefficient: float = 1.0  # multiplies parallel corpora weights

    def effective_weights(self) -> np.ndarray:
        w = np.array(
            [c.weight * (self.parallel_coefficient if c.parallel else 1.0) for c in self.corpora]
        )
        return w / w.sum()


@dataclass(frozen=True)
class PretrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    crops: CropConfig = field(default_factory=CropConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    schedule: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(2.5e-4, 3000, 40000))
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = 0.05
    subset_sampling: bool = True  # student sets drawn from T rather than all bands
    checkpoint_every: int = 0  # steps; 0 disables intermediate checkpoints


# ---------------------------------------------------------------------------
# channel sampling and view planning
# ---------------------------------------------------------------------------


def hcs_sample(available, rng: np.random.Generator) -> tuple[Band, ...]:
    """Hierarchical channel sampling: uniform subset size, then uniform subset.

    Returns the chosen bands in their order within ``available``.
    """
    bands = tuple(available)
    if not bands:
        raise ParameterError("hcs_sample requires a nonempty band set")
    m = int(rng.integers(1, len(bands) + 1))
    picked = rng.choice(len(bands), size=m, replace=False)
    picked.sort()
    return tuple(bands[i] for i in picked)


@dataclass(frozen=True)
class ChannelSamplePlan:
    teacher: tuple[Band, ...]
    students: tuple[tuple[Band, ...], ...]

    def __post_init__(self):
        t = set(self.teacher)
        for s in self.students:
            if not set(s) <= t:
                raise ContractError("student channel set escapes the teacher's set")


@dataclass(frozen=True)
class CropSpec:
    size: int
    top: int
    left: int
    side: int


@dataclass(frozen=True)
class ViewPlan:
    channels: ChannelSamplePlan
    crops: tuple[CropSpec, ...]  # one per view: globals first, then locals
    n_global: int


def plan_channels(bands, n_views: int, rng: np.random.Generator,
                  subset_sampling: bool = True) -> ChannelSamplePlan:
    teacher = hcs_sample(bands, rng)
    source = teacher if subset_sampling else tuple(bands)
    students = tuple(hcs_sample(source, rng) for _ in range(n_views))
    if not subset_sampling:
        # keep the subset invariant by clipping to the teacher's set
        students = tuple(tuple(b for b in s if b in set(teacher)) or (teacher[0],) for s in students)
    return ChannelSamplePlan(teacher=teacher, students=students)


def sample_crop(h: int, w: int, out_size: int, scale: tuple[float, float],
                rng: np.random.Generator) -> CropSpec:
    lo, hi = scale
    frac = rng.uniform(lo, hi)
    side = max(int(round(math.sqrt(frac) * min(h, w))), 2)
    side = min(side, h, w)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    return CropSpec(size=out_size, top=top, left=left, side=side)


def plan_views(bands, image_hw: tuple[int, int], rng: np.random.Generator,
               crops: CropConfig = CropConfig(), subset_sampling: bool = True) -> ViewPlan:
    """Full per-image plan: teacher/student channel sets plus crop geometry."""
    if not tuple(bands):
        raise ParameterError("plan_views requires a sample with at least one band")
    channels = plan_channels(bands, crops.n_views, rng, subset_sampling)
    h, w = image_hw
    specs = [sample_crop(h, w, crops.global_size, crops.global_scale, rng)
             for _ in range(crops.n_global)]
    specs += [sample_crop(h, w, crops.local_size, crops.local_scale, rng)
              for _ in range(crops.n_local)]
    return ViewPlan(channels=channels, crops=tuple(specs), n_global=crops.n_global)


def bilinear_resize(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = plane.shape
    if (h, w) == (out_h, out_w):
        return plane.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = plane[np.ix_(y0, x0)]
    b = plane[np.ix_(y0, x1)]
    c = plane[np.ix_(y1, x0)]
    d = plane[np.ix_(y1, x1)]
    return (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx + c * wy * (1 - wx) + d * wy * wx)


def apply_crop(plane: np.ndarray, spec: CropSpec) -> np.ndarray:
    window = plane[spec.top:spec.top + spec.side, spec.left:spec.left + spec.side]
    return bilinear_resize(window, spec.size, spec.size)


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


def plan_block_mask(grid: tuple[int, int], n_channels: int, cfg: MaskConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """Rectangular spatial mask replicated across channels -> (C * N_p,) floats.

    The rectangle is drawn uniformly among those whose area keeps the masked
    fraction inside [ratio_min, ratio_max]; if none qualifies the mask is
    empty.
    """
    hp, wp = grid
    n_p = hp * wp
    lo, hi = cfg.ratio_min * n_p, cfg.ratio_max * n_p
    options = [
        (r, c, bh, bw)
        for bh in range(1, hp + 1)
        for bw in range(1, wp + 1)
        if lo <= bh * bw <= hi
        for r in range(hp - bh + 1)
        for c in range(wp - bw + 1)
    ]
    spatial = np.zeros((hp, wp))
    if options:
        r, c, bh, bw = options[rng.integers(len(options))]
        spatial[r:r + bh, c:c + bw] = 1.0
    return np.tile(spatial.reshape(-1), n_channels)


# ---------------------------------------------------------------------------
# losses and schedules
# ---------------------------------------------------------------------------


def _teacher_targets(logits: np.ndarray, center: np.ndarray, temperature: float) -> np.ndarray:
    z = (logits - center) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dino_cls_loss(teacher_cls, student_cls, t_teacher: float, t_student: float,
                  center: np.ndarray) -> Tensor:
    """Average CLS cross-entropy over (global g, view v) pairs with v != g.

    ``teacher_cls``: per-global-view (B, K) arrays; ``student_cls``: per-view
    (B, K) tensors, the first len(teacher_cls) entries being the student's
    own passes over the global crops.
    """
    n_global, n_views = len(teacher_cls), len(student_cls)
    if n_global == 0 or n_views == 0:
        raise ContractError("cls loss needs at least one teacher and one student view")
    k = center.shape[-1]
    for t in teacher_cls:
        if t.shape[-1] != k:
            raise ContractError(f"prototype dim mismatch: {t.shape[-1]} vs center {k}")
    total = None
    count = 0
    for g, t_logits in enumerate(teacher_cls):
        target = _teacher_targets(np.asarray(t_logits), center, t_teacher)
        for v, s_logits in enumerate(student_cls):
            if v == g:
                continue
            term = soft_cross_entropy(target, s_logits, temperature=t_student, reduction="mean")
            total = term if total is None else total + term
            count += 1
    if count == 0:
        raise ContractError("no (teacher, student) view pairs to distill")
    return mul(total, 1.0 / count)


def mim_patch_loss(teacher_patch, student_patch: Tensor, mask: np.ndarray,
                   t_teacher: float, t_student: float, center: np.ndarray) -> Tensor:
    """Masked-slot cross-entropy between aligned patch-token head outputs.

    ``teacher_patch`` and ``student_patch`` are (..., S, K) over the same
    (channel, patch) slot indexing; ``mask`` is (..., S) with 1 at masked
    slots. Returns 0 when nothing is masked.
    """
    teacher_patch = np.asarray(teacher_patch)
    mask = np.asarray(mask, dtype=np.float64)
    if teacher_patch.shape != student_patch.shape:
        raise ContractError(
            f"teacher/student patch shapes differ: {teacher_patch.shape} vs {student_patch.shape}"
        )
    if mask.shape != student_patch.shape[:-1]:
        raise ContractError(f"mask shape {mask.shape} does not index patch slots "
                            f"{student_patch.shape[:-1]} (CLS must not be maskable)")
    n_masked = float(mask.sum())
    if n_masked == 0:
        return Tensor(0.0)
    targets = _teacher_targets(teacher_patch, center, t_teacher)
    rows = soft_cross_entropy(targets, student_patch, temperature=t_student, reduction="none")
    return mul(tsum(mul(rows, mask)), 1.0 / n_masked)


def total_loss(cls_loss: Tensor, mim_loss: Tensor) -> Tensor:
    """Unweighted sum of the two objectives."""
    for name, t in (("cls", cls_loss), ("mim", mim_loss)):
        val = t.item() if isinstance(t, Tensor) else float(t)
        if not math.isfinite(val):
            raise TrainingError(f"non-finite {name} loss: {val}")
    return cls_loss + mim_loss


def wsd_lr(samples_seen: int, cfg: ScheduleConfig) -> float:
    """Warmup-stable-decay schedule: linear up, flat peak, linear to zero."""
    if not 0 <= samples_seen <= cfg.total_samples:
        raise ParameterError(
            f"samples_seen {samples_seen} outside [0, {cfg.total_samples}]"
        )
    decay_start = (1.0 - cfg.decay_fraction) * cfg.total_samples
    if samples_seen < cfg.warmup_samples:
        return cfg.peak_lr * samples_seen / cfg.warmup_samples
    if samples_seen <= decay_start:
        return cfg.peak_lr
    return cfg.peak_lr * (cfg.total_samples - samples_seen) / (cfg.total_samples - decay_start)


def teacher_temperature(samples_seen: int, cfg: DistillConfig) -> float:
    if cfg.t_teacher_warmup <= 0 or samples_seen >= cfg.t_teacher_warmup:
        return cfg.t_teacher_end
    frac = samples_seen / cfg.t_teacher_warmup
    return cfg.t_teacher_start + frac * (cfg.t_teacher_end - cfg.t_teacher_start)


def ema_momentum(samples_seen: int, total: int, cfg: DistillConfig) -> float:
    frac = min(max(samples_seen / total, 0.0), 1.0)
    return cfg.ema_end - (cfg.ema_end - cfg.ema_start) * (math.cos(math.pi * frac) + 1) / 2


def teacher_center_update(center: np.ndarray, outputs: np.ndarray, momentum: float) -> np.ndarray:
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError(f"center momentum must lie in [0, 1], got {momentum}")
    batch_mean = np.asarray(outputs).reshape(-1, center.shape[-1]).mean(axis=0)
    return momentum * center + (1.0 - momentum) * batch_mean


def sample_corpus(mix: PretrainMixConfig, rng: np.random.Generator) -> int:
    """Draw a corpus index with probability proportional to effective weight."""
    return int(rng.choice(len(mix.corpora), p=mix.effective_weights()))


# ---------------------------------------------------------------------------
# teacher state and the training loop
# ---------------------------------------------------------------------------


@dataclass
class TeacherState:
    arrays: dict[str, np.ndarray]
    center: np.ndarray

    @classmethod
    def from_student(cls, params: dict[str, Tensor], prototypes: int) -> "TeacherState":
        return cls(
            arrays={k: p.data.copy() for k, p in params.items()},
            center=np.zeros(prototypes),
        )

    def tensors(self) -> dict[str, Tensor]:
        # wrappers share the underlying arrays, so EMA updates are visible
        return {k: Tensor(v) for k, v in self.arrays.items()}


def init_head_params(rng: np.random.Generator, embed_dim: int, cfg: HeadConfig,
                     prefix: str = "head") -> dict[str, Tensor]:
    return {
        f"{prefix}.w1": Tensor(rng.normal(0, 0.02, size=(embed_dim, cfg.hidden)), requires_grad=True),
        f"{prefix}.b1": Tensor(np.zeros(cfg.hidden), requires_grad=True),
        f"{prefix}.w2": Tensor(rng.normal(0, 0.02, size=(cfg.hidden, cfg.prototypes)), requires_grad=True),
        f"{prefix}.b2": Tensor(np.zeros(cfg.prototypes), requires_grad=True),
    }


def head_forward(x: Tensor, params: dict[str, Tensor], prefix: str = "head") -> Tensor:
    h = gelu(matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


class Pretrainer:
    """Owns the student, the EMA teacher, and one pretraining run."""

    def __init__(self, cfg: PretrainConfig, corpora: list[DatasetManifest],
                 mix: PretrainMixConfig | None = None, out_dir=None):
        if not corpora:
            raise ParameterError("pretraining needs at least one corpus")
        self.cfg = cfg
        self.corpora = corpora
        self.mix = mix or PretrainMixConfig(
            corpora=tuple(CorpusSpec(name=f"corpus{i}") for i in range(len(corpora)))
        )
        if len(self.mix.corpora) != len(corpora):
            raise ParameterError("mix config does not match the corpus list")
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

        rng = np.random.default_rng(cfg.seed)
        self.model = ChannelTokenViT(cfg.model, seed=cfg.seed)
        self.head_params = init_head_params(rng, cfg.model.embed_dim, cfg.head)
        if not cfg.head.shared_head:
            self.head_params.update(
                init_head_params(rng, cfg.model.embed_dim, cfg.head, prefix="phead")
            )
        self.params: dict[str, Tensor] = {**self.model.params, **self.head_params}
        self.teacher = TeacherState.from_student(self.params, cfg.head.prototypes)
        self.opt = AdamWState(weight_decay=cfg.weight_decay)
        self.rng = rng
        self.samples_seen = 0
        self.step_idx = 0
        self._train_records: list[list] = [list(range(len(m.splits["train"]))) for m in corpora]
        self._log_fh = None
        if self.out_dir:
            self._log_fh = (self.out_dir / "train_log.jsonl").open("w")

    # -- data ---------------------------------------------------------------
    def _draw_batch(self) -> list[dict[Band, np.ndarray]]:
        batch = []
        for _ in range(self.cfg.batch_size):
            ci = sample_corpus(self.mix, self.rng)
            man = self.corpora[ci]
            ridx = int(self.rng.integers(len(man.splits["train"])))
            sample = man.load_sample(man.splits["train"][ridx])
            raster = {
                b: normalize_clip(plane, man.stats[b]) for b, plane in sample.raster.items()
            }
            batch.append(raster)
        return batch

    def _view_stacks(self, batch, plan: ViewPlan, per_image_crops) -> list[np.ndarray]:
        """One (B, C_v, size, size) stack per view."""
        stacks = []
        for v, bands in enumerate(plan.channels.students):
            imgs = []
            for bi, raster in enumerate(batch):
                spec = per_image_crops[bi][v]
                imgs.append(np.stack([apply_crop(raster[b], spec) for b in bands]))
            stacks.append(np.stack(imgs))
        return stacks

    def _teacher_stacks(self, batch, plan: ViewPlan, per_image_crops) -> list[np.ndarray]:
        stacks = []
        for v in range(plan.n_global):
            imgs = []
            for bi, raster in enumerate(batch):
                spec = per_image_crops[bi][v]
                imgs.append(np.stack([apply_crop(raster[b], spec) for b in plan.channels.teacher]))
            stacks.append(np.stack(imgs))
        return stacks

    # -- one step -------------------------------------------------------------
    def step(self, batch=None) -> dict:
        cfg = self.cfg
        if batch is None:
            batch = self._draw_batch()
        bsz = len(batch)
        bands = sorted(set.intersection(*(set(r) for r in batch)),
                       key=CHANNEL_INDEX.get)
        image_hw = next(iter(batch[0].values())).shape
        plan = plan_views(bands, image_hw, self.rng, cfg.crops, cfg.subset_sampling)
        # geometry varies per image; channel sets are shared across the batch
        per_image_crops = [plan.crops]
        h, w = image_hw
        for _ in range(bsz - 1):
            specs = [sample_crop(h, w, cfg.crops.global_size, cfg.crops.global_scale, self.rng)
                     for _ in range(cfg.crops.n_global)]
            specs += [sample_crop(h, w, cfg.crops.local_size, cfg.crops.local_scale, self.rng)
                      for _ in range(cfg.crops.n_local)]
            per_image_crops.append(tuple(specs))

        t_temp = teacher_temperature(self.samples_seen, cfg.distill)
        center = self.teacher.center
        grid_g = cfg.crops.global_size // cfg.model.patch
        n_p = grid_g * grid_g
        teacher_bands = plan.channels.teacher
        t_index = {b: i for i, b in enumerate(teacher_bands)}

        # teacher: unmasked global crops over the full teacher set
        teacher_params = self.teacher.tensors()
        teacher_model = ChannelTokenViT(cfg.model, params=teacher_params)
        teacher_cls, teacher_patch, teacher_rows = [], [], []
        with no_grad():
            for stack in self._teacher_stacks(batch, plan, per_image_crops):
                enc = teacher_model.encode(stack, teacher_bands)
                logits = head_forward(enc.final, teacher_params).data
                teacher_cls.append(logits[:, 0, :])
                teacher_patch.append(logits[:, 1:, :])
                teacher_rows.append(logits.reshape(-1, cfg.head.prototypes))

        # student: all views over per-view subsets; globals get block masks
        patch_prefix = "head" if cfg.head.shared_head else "phead"
        student_cls, mim_terms = [], []
        view_stacks = self._view_stacks(batch, plan, per_image_crops)
        for v, stack in enumerate(view_stacks):
            s_bands = plan.channels.students[v]
            mask = None
            if v < plan.n_global:
                mask = np.stack([
                    plan_block_mask((grid_g, grid_g), len(s_bands), cfg.mask, self.rng)
                    for _ in range(bsz)
                ])
            enc = self.model.encode(stack, s_bands, mask=mask)
            logits_cls = head_forward(
                self.model.cls_representation(enc), self.params
            )
            student_cls.append(logits_cls)
            if mask is not None:
                n_slots = len(s_bands) * n_p
                patch_tokens = take(enc.final, np.arange(1, n_slots + 1), axis=1)
                s_logits = head_forward(patch_tokens, self.params, prefix=patch_prefix)
                slot_ids = np.concatenate(
                    [t_index[b] * n_p + np.arange(n_p) for b in s_bands]
                )
                t_logits = teacher_patch[v][:, slot_ids, :]
                mim_terms.append(mim_patch_loss(
                    t_logits, s_logits, mask, t_temp, cfg.distill.t_student, center
                ))

        cls_loss = dino_cls_loss(teacher_cls, student_cls, t_temp,
                                 cfg.distill.t_student, center)
        if mim_terms:
            mim = mim_terms[0]
            for term in mim_terms[1:]:
                mim = mim + term
            mim = mul(mim, 1.0 / len(mim_terms))
        else:
            mim = Tensor(0.0)
        loss = total_loss(cls_loss, mim)

        lr = wsd_lr(min(self.samples_seen, cfg.schedule.total_samples), cfg.schedule)
        backward(loss, params=list(self.params.values()))
        adamw_step(self.params, self.opt, lr)

        momentum = ema_momentum(self.samples_seen, cfg.schedule.total_samples, cfg.distill)
        ema_update(self.teacher.arrays, self.params, momentum)
        self.teacher.center = teacher_center_update(
            center, np.concatenate(teacher_rows, axis=0), cfg.distill.center_momentum
        )
        self.samples_seen += bsz
        self.step_idx += 1
        record = {
            "step": self.step_idx,
            "samples_seen": self.samples_seen,
            "lr": lr,
            "cls_loss": float(cls_loss.item()),
            "mim_loss": float(mim.item()),
            "total": float(loss.item()),
        }
        if self._log_fh:
            self._log_fh.write(json.dumps(record) + "\n")
            self._log_fh.flush()
        return record

    # -- full run -------------------------------------------------------------
    def run(self, max_steps: int | None = None) -> list[dict]:
        cfg = self.cfg
        total_steps = cfg.schedule.total_samples // cfg.batch_size
        if max_steps is not None:
            total_steps = min(total_steps, max_steps)
        history = []
        start = time.time()
        for _ in range(total_steps):
            record = self.step()
            history.append(record)
            if (cfg.checkpoint_every and self.out_dir
                    and self.step_idx % cfg.checkpoint_every == 0):
                self.save_checkpoint(self.out_dir / f"ckpt_{self.step_idx:06d}.zip")
        if self.out_dir:
            self.save_checkpoint(self.out_dir / "ckpt_final.zip")
            summary = {"steps": self.step_idx, "samples_seen": self.samples_seen,
                       "wall_time": time.time() - start}
            (self.out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
        if self._log_fh:
            self._log_fh.close()
            self._log_fh = None
        return history

    def save_checkpoint(self, path) -> None:
        arrays = {k: p.data.copy() for k, p in self.params.items()}
        meta = {"kind": self.model.kind, "config": asdict(self.cfg.model),
                "head": asdict(self.cfg.head), "samples_seen": self.samples_seen}
        from . import gxb
        gxb.save_bundle(path, arrays, meta=meta)
