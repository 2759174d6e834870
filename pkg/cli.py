"""
Command line entry point
enseg stats | train | eval | ensemble-eval | export-overlays | table | synth | serve
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config import Config
from data_ingest import (
    ClassTable,
    DatasetSplit,
    compute_channel_stats,
    discover_images,
    load_dataset,
    load_predefined_split,
    split_dataset,
    write_stats,
)
from ensemble import EnsembleModel, FusionMethod, FusionSpec, load_ensemble
from errors import EXIT_OK, EXIT_RUNTIME, ConfigError, EnsegError
from evaluation import build_results_table, evaluate, export_overlays, save_table
from experiment_config import ExperimentConfig, dump_resolved, load_experiment
from metrics import load_report, save_report
from model_zoo import build_model, load_weights, resolve_device
from reference_scores import reference_reports
from training import member_dir_name, train, train_ensemble_members

logger = logging.getLogger("enseg")


def _emit(payload):
    print(json.dumps(payload, indent=2, default=str))


def _load_split(cfg: ExperimentConfig, class_table: ClassTable) -> DatasetSplit:
    section = cfg.dataset
    if section.split.mode == "predefined":
        return load_predefined_split(section.root, class_table)
    samples = load_dataset(section.root, class_table)
    return split_dataset(samples, section.split.ratios, section.split.seed)


def load_predictor(cfg: ExperimentConfig, checkpoints: List[str], fusion: Optional[FusionSpec] = None,
                   variant_name: Optional[str] = None):
    """One checkpoint loads a single model, two or more load a fused ensemble"""
    device = resolve_device(cfg.train.device)
    if len(checkpoints) == 1:
        return load_weights(checkpoints[0], spec=cfg.model, device=device)
    if fusion is None:
        fusion = cfg.ensemble.fusion if cfg.ensemble is not None else FusionSpec()
    if variant_name is None and cfg.ensemble is not None:
        variant_name = cfg.ensemble.variant
    return load_ensemble(checkpoints, fusion, variant_name, device=device)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_stats(args) -> int:
    stats = compute_channel_stats(discover_images(args.data))
    if args.out:
        write_stats(stats, args.out)
    _emit(stats.to_json())
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, class_table = load_experiment(args.config)
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_resolved(cfg, run_dir / "config.resolved.json")
    split = _load_split(cfg, class_table)

    if cfg.model is not None:
        model = build_model(cfg.model, seed=cfg.train.seed)
        model, history = train(model, split, cfg.train, cfg.preprocess, cfg.metrics)
        summary = {"run_dir": str(run_dir), "best_checkpoint": str(run_dir / "best.ckpt"), "epochs": len(history)}
        if split.test:
            report = evaluate(model, split.test, cfg.preprocess, cfg.metrics, "test", class_table.names)
            save_report(report, run_dir / "report_test.json")
            summary["test"] = report.per_split.get("test")
        _emit(summary)
        return EXIT_OK

    specs = cfg.member_specs()
    members = train_ensemble_members(specs, split, cfg.train, cfg.preprocess, cfg.metrics)
    member_dirs = [run_dir / member_dir_name(i, s) for i, s in enumerate(specs)]

    with open(run_dir / "history.jsonl", "w", encoding="utf-8") as out:
        for index, member_dir in enumerate(member_dirs):
            for line in (member_dir / "history.jsonl").read_text(encoding="utf-8").splitlines():
                out.write(json.dumps({"member": index, **json.loads(line)}) + "\n")

    ensemble = EnsembleModel(members, cfg.ensemble.fusion, cfg.ensemble.variant)
    manifest = {
        "variant": ensemble.variant_name,
        "members": [str(d / "best.ckpt") for d in member_dirs],
        "fusion": cfg.ensemble.fusion.model_dump(mode="json"),
    }
    (run_dir / "ensemble.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")

    summary = {"run_dir": str(run_dir), **manifest}
    for split_name in ("valid", "test"):
        part = split.part(split_name)
        if part:
            report = evaluate(ensemble, part, cfg.preprocess, cfg.metrics, split_name, class_table.names)
            save_report(report, run_dir / f"report_{split_name}.json")
            summary[split_name] = report.per_split.get(split_name)
    _emit(summary)
    return EXIT_OK


def _eval_out_dir(cfg: ExperimentConfig, args) -> Path:
    return Path(args.out) if args.out else cfg.run_dir / "eval"


def cmd_eval(args) -> int:
    cfg, class_table = load_experiment(args.config)
    model = load_predictor(cfg, [args.checkpoint])
    split = _load_split(cfg, class_table)
    report = evaluate(model, split.part(args.split), cfg.preprocess, cfg.metrics, args.split, class_table.names)
    save_report(report, _eval_out_dir(cfg, args) / f"report_{args.split}.json")
    _emit(report.model_dump(mode="json"))
    return EXIT_OK


def cmd_ensemble_eval(args) -> int:
    cfg, class_table = load_experiment(args.config)
    base = cfg.ensemble.fusion if cfg.ensemble is not None else FusionSpec()
    try:
        fusion = FusionSpec(
            method=args.method or base.method,
            weights=tuple(args.weights) if args.weights else base.weights,
        )
    except ValueError as e:
        raise ConfigError(f"--weights: {e}")
    ensemble = load_predictor(cfg, args.checkpoints, fusion, args.variant_name)
    if not isinstance(ensemble, EnsembleModel):
        raise ConfigError("--checkpoints: an ensemble needs at least 2 checkpoints")

    split = _load_split(cfg, class_table)
    report = evaluate(ensemble, split.part(args.split), cfg.preprocess, cfg.metrics, args.split, class_table.names)
    out_dir = _eval_out_dir(cfg, args)
    save_report(report, out_dir / f"report_{report.model}_{args.split}.json")
    table = build_results_table({report.model: report}, "iou")
    save_table(table, out_dir, stem=f"table_{report.model}_iou")
    print(table.to_text(), file=sys.stderr)
    _emit(report.model_dump(mode="json"))
    return EXIT_OK


def cmd_export_overlays(args) -> int:
    cfg, class_table = load_experiment(args.config)
    predictor = load_predictor(cfg, args.checkpoint)
    samples = list(_load_split(cfg, class_table).part(args.split))
    if args.limit:
        samples = samples[:args.limit]
    written = export_overlays(predictor, samples, class_table, args.out, cfg.preprocess)
    _emit({"written": [str(p) for p in written]})
    return EXIT_OK


def cmd_table(args) -> int:
    reports = {}
    if args.reference:
        reports.update(reference_reports(args.reference))
    for path in args.reports or []:
        report = load_report(path)
        reports[report.model] = report
    if not reports:
        raise ConfigError("--reports: nothing to tabulate")
    table = build_results_table(reports, args.metric)
    if args.out:
        save_table(table, args.out)
    print(table.to_text(), file=sys.stderr)
    _emit(table.to_json())
    return EXIT_OK


def cmd_synth(args) -> int:
    from synthetic import write_shapes_dataset

    ids = write_shapes_dataset(args.out, args.n, args.height, args.width, args.seed, args.layout)
    _emit({"root": args.out, "samples": len(ids), "class_table": str(Path(args.out) / "classes.json")})
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("main:app", host=args.host, port=args.port)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enseg", description="Waste segmentation ensemble pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="per-channel mean/std of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model or the ensemble members")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate one checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble-eval", help="evaluate fused member checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--weights", nargs="+", type=float)
    p.add_argument("--method", choices=[m.value for m in FusionMethod])
    p.add_argument("--variant-name")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ensemble_eval)

    p = sub.add_parser("export-overlays", help="write input | truth | prediction composites")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_export_overlays)

    p = sub.add_parser("table", help="IoU / Dice loss table from saved reports")
    p.add_argument("--reports", nargs="*")
    p.add_argument("--metric", default="iou", choices=["iou", "dice_loss"])
    p.add_argument("--reference", choices=["baseline", "ensemble"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("synth", help="write the synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layout", default="flat", choices=["flat", "predefined"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("serve", help="run the prediction API")
    p.add_argument("--host", default=Config.HOST)
    p.add_argument("--port", type=int, default=Config.PORT)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EnsegError as e:
        logger.error(f"❌ {e.code}: {e.message}")
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"❌ Unexpected error: {e}")
        print(json.dumps({"error": "E_INTERNAL", "message": str(e)}), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
