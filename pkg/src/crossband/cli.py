"""Command-line entry points.

Subcommands: gen-synthetic, pretrain, finetune, probe, evaluate, report.
``evaluate`` exits nonzero iff any cell in this invocation errored.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .adapt import FinetuneConfig, ProbeConfig, finetune, linear_probe_mixture, \
    load_backbone, make_head, prepare_split
from .bands import combination
from .harness import (
    ModelSpec,
    ResultStore,
    RunConfig,
    emit_report,
    load_datasets,
    run_protocol,
    table_from_store,
)
from .manifest import load_manifest
from .model import ModelConfig
from .pretrain import (
    CorpusSpec,
    CropConfig,
    DistillConfig,
    HeadConfig,
    MaskConfig,
    PretrainConfig,
    PretrainMixConfig,
    Pretrainer,
    ScheduleConfig,
)
from .synthetic import SyntheticConfig, generate_synthetic
from . import gxb


def _add_gen_synthetic(sub):
    p = sub.add_parser("gen-synthetic", help="render a synthetic dataset")
    p.add_argument("--task", required=True,
                   choices=["classification", "multilabel", "segmentation", "change-detection"])
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--labels", type=int, default=4)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=128)
    p.add_argument("--val", type=int, default=32)
    p.add_argument("--test", type=int, default=64)
    p.add_argument("--out", required=True)


def cmd_gen_synthetic(args) -> int:
    cfg = SyntheticConfig(image_size=args.size, num_classes=args.classes,
                          num_labels=args.labels, rho=args.rho, noise=args.noise,
                          seed=args.seed, train=args.train, val=args.val, test=args.test)
    man = generate_synthetic(cfg, args.task, args.out)
    n = sum(len(v) for v in man.splits.values())
    print(f"wrote {n} samples to {args.out} (task={args.task}, rho={args.rho})")
    return 0


def pretrain_config_from_json(doc: dict) -> tuple[PretrainConfig, PretrainMixConfig, list[str]]:
    corpora = doc.get("corpora", [])
    if not corpora:
        raise SystemExit("pretrain config needs a nonempty 'corpora' list")
    specs = tuple(
        CorpusSpec(name=c.get("name", f"corpus{i}"), weight=c.get("weight", 1.0),
                   parallel=c.get("parallel", False))
        for i, c in enumerate(corpora)
    )
    mix = PretrainMixConfig(corpora=specs, parallel_coefficient=doc.get("pdc", 1.0))
    cfg = PretrainConfig(
        model=ModelConfig(**doc.get("model", {})),
        crops=CropConfig(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in doc.get("crops", {}).items()}),
        mask=MaskConfig(**doc.get("mask", {})),
        head=HeadConfig(**doc.get("head", {})),
        distill=DistillConfig(**doc.get("distill", {})),
        schedule=ScheduleConfig(**doc["schedule"]),
        batch_size=doc.get("batch_size", 8),
        seed=doc.get("seed", 0),
        weight_decay=doc.get("weight_decay", 0.05),
        subset_sampling=doc.get("subset_sampling", True),
        checkpoint_every=doc.get("checkpoint_every", 0),
    )
    return cfg, mix, [c["path"] for c in corpora]


def _add_pretrain(sub):
    p = sub.add_parser("pretrain", help="self-distillation pretraining")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.add_argument("--steps", type=int, default=None, help="cap the step count")


def cmd_pretrain(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    cfg, mix, paths = pretrain_config_from_json(doc)
    corpora = [load_manifest(Path(p) / "manifest.json" if not str(p).endswith(".json") else p)
               for p in paths]
    trainer = Pretrainer(cfg, corpora, mix=mix, out_dir=args.out)
    history = trainer.run(max_steps=args.steps)
    if history:
        last = history[-1]
        print(f"pretrained {last['step']} steps ({last['samples_seen']} samples), "
              f"final loss {last['total']:.4f} -> {args.out}")
    return 0


def _add_finetune(sub):
    p = sub.add_parser("finetune", help="fine-tune a backbone on one task")
    p.add_argument("--backbone", required=True, help="checkpoint bundle")
    p.add_argument("--task", required=True, help="dataset manifest.json")
    p.add_argument("--train-combo", default="RGB")
    p.add_argument("--mode", choices=["full", "frozen"], default="full")
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--warmup-epochs", type=int, default=20)
    p.add_argument("--decay-epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--width", type=int, default=1, help="decoder width multiplier")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")


def cmd_finetune(args) -> int:
    manifest = load_manifest(args.task)
    backbone = load_backbone(args.backbone)
    combo = combination(args.train_combo)
    head = make_head(manifest.task, backbone.cfg.embed_dim, manifest.num_classes,
                     backbone.cfg.depth, width=args.width, seed=args.seed)
    train = prepare_split(manifest, "train", combo)
    val = prepare_split(manifest, "val", combo)
    cfg = FinetuneConfig(mode=args.mode, lr=args.lr, warmup_epochs=args.warmup_epochs,
                         decay_epochs=args.decay_epochs, batch_size=args.batch_size,
                         seed=args.seed)
    result = finetune(backbone, head, train, val, manifest.task, manifest.metric, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gxb.save_bundle(out / "best.zip",
                    {**result.backbone_state,
                     **{f"task.{k}": v for k, v in result.head_state.items()}},
                    meta={"best_metric": result.best_metric, "best_epoch": result.best_epoch,
                          "metric": manifest.metric, "mode": args.mode})
    with (out / "finetune_log.jsonl").open("w") as fh:
        for entry in result.history:
            fh.write(json.dumps(entry) + "\n")
    print(f"best {manifest.metric}={result.best_metric:.4f} at epoch {result.best_epoch} "
          f"-> {out / 'best.zip'}")
    return 0


def _add_probe(sub):
    p = sub.add_parser("probe", help="linear probe on frozen features")
    p.add_argument("--backbone", required=True)
    p.add_argument("--task", required=True, help="classification manifest.json")
    p.add_argument("--combos", default="RGB,S2,S1,NS1S2", help="comma-separated")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional JSON output path")


def cmd_probe(args) -> int:
    manifest = load_manifest(args.task)
    backbone = load_backbone(args.backbone)
    combos = [combination(name.strip()) for name in args.combos.split(",") if name.strip()]
    result = linear_probe_mixture(backbone, manifest, combos,
                                  ProbeConfig(epochs=args.epochs, lr=args.lr, seed=args.seed))
    for name, acc in result["scores"].items():
        print(f"{name}: {acc:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps({"scores": result["scores"]}, indent=1,
                                             sort_keys=True))
    return 0


def _parse_model_arg(arg: str) -> ModelSpec:
    """NAME=PATH for a checkpoint, NAME=fresh-channel / NAME=fresh-fixed for inits."""
    if "=" not in arg:
        raise SystemExit(f"--models entries look like name=path, got {arg!r}")
    name, source = arg.split("=", 1)
    if source == "fresh-channel":
        return ModelSpec(name=name, kind="channel_vit")
    if source == "fresh-fixed":
        return ModelSpec(name=name, kind="fixed_vit")
    return ModelSpec(name=name, checkpoint=source)


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="run the cross-band protocol")
    p.add_argument("--models", nargs="+", required=True,
                   help="name=ckpt.zip | name=fresh-channel | name=fresh-fixed")
    p.add_argument("--datasets", nargs="+", required=True,
                   help="dataset directories (each with manifest.json)")
    p.add_argument("--seeds", type=int, default=5, help="use seeds 0..N-1")
    p.add_argument("--mode", choices=["full", "frozen"], default="full")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--store", required=True, help="results JSONL path")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup-epochs", type=int, default=20)
    p.add_argument("--decay-epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--width", type=int, default=1)


def cmd_evaluate(args) -> int:
    specs = [_parse_model_arg(m) for m in args.models]
    datasets = load_datasets(args.datasets)
    cfg = RunConfig(mode=args.mode, lr=args.lr, warmup_epochs=args.warmup_epochs,
                    decay_epochs=args.decay_epochs, batch_size=args.batch_size,
                    width=args.width)
    store = ResultStore(args.store)
    records = run_protocol(specs, datasets, seeds=range(args.seeds), cfg=cfg,
                           store=store, jobs=args.jobs)
    errors = [r for r in records if r.status != "ok"]
    print(f"ran {len(records)} cells ({len(errors)} errors) -> {args.store}")
    for err in errors:
        print(f"  ERROR {err.model}/{err.dataset}/{err.cell}/seed{err.seed}: {err.error}",
              file=sys.stderr)
    return 1 if errors else 0


def _add_report(sub):
    p = sub.add_parser("report", help="aggregate a results store into tables")
    p.add_argument("--store", required=True)
    p.add_argument("--format", choices=["csv", "text"], default="csv")
    p.add_argument("--out", required=True, help="output directory")


def cmd_report(args) -> int:
    table = table_from_store(ResultStore(args.store))
    paths = emit_report(table, args.format, args.out)
    for p in paths:
        print(f"wrote {p}")
    return 0


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossband",
        description="Channel-tokenized ViT pretraining and cross-band evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_synthetic(sub)
    _add_pretrain(sub)
    _add_finetune(sub)
    _add_probe(sub)
    _add_evaluate(sub)
    _add_report(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
