"""Command-line interface.

Subcommands cover the whole workflow: anchor extraction, partitioning,
training, sweeps, the ablation grid, figures, and checkpoint evaluation.
Exit codes: 0 on success, 2 for configuration problems, 3 for runtime
failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, InvalidInputError, SemflError


def _dataset_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", default="synthetic",
                        help="synthetic, cifar10, cifar100, or tinyimagenet")
    parser.add_argument("--cache-dir", default="~/.cache/semfl")
    parser.add_argument("--train-samples", type=int, default=None)
    parser.add_argument("--test-samples", type=int, default=None)
    parser.add_argument("--num-classes", type=int, default=10,
                        help="class count for the synthetic corpus")
    parser.add_argument("--image-size", type=int, default=32)
    parser.add_argument("--no-download", action="store_true",
                        help="fail instead of fetching a missing archive")


def _config_args(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", help="path to a YAML experiment config")
    source.add_argument("--preset", help="name of a packaged preset")
    parser.add_argument("--output-dir", help="override the run directory")
    parser.add_argument("--store-dir", help="override the feature store")
    parser.add_argument("--rounds", type=int, help="override round count")
    parser.add_argument("--seed", type=int, help="override the seed")


def _load_config(args: argparse.Namespace):
    import yaml
    from .config import config_from_dict, preset_path
    path = Path(args.config) if args.config else preset_path(args.preset)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    for key in ("output_dir", "store_dir", "rounds", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    return config_from_dict(raw)


def _load_split(args: argparse.Namespace):
    from .datasets import load_dataset
    return load_dataset(args.dataset, cache_dir=args.cache_dir,
                        train_samples=args.train_samples,
                        test_samples=args.test_samples,
                        num_classes=args.num_classes,
                        image_size=args.image_size, seed=args.seed,
                        download=not args.no_download)


def _cmd_extract_features(args: argparse.Namespace) -> int:
    from .extraction import FeatureExtractionConfig, encode_class_prompts, \
        extract_visual_features
    from .providers import make_provider
    from .store import save_store
    train, _ = _load_split(args)
    cfg = FeatureExtractionConfig(timestep=args.timestep, feature_dim=args.dim,
                                  seed=args.seed)
    kwargs = {"labels": train.labels, "class_names": train.class_names,
              "seed": args.seed}
    if args.provider == "diffusion":
        kwargs = {"model_id": args.model_id, "device": args.device}
    provider = make_provider(args.provider, **kwargs)
    visual = extract_visual_features(train.images, cfg, provider)
    text = encode_class_prompts(train.class_names, cfg, provider)
    save_store(visual, text, args.out)
    print(json.dumps({"out": str(args.out),
                      "samples": int(visual.features.shape[0]),
                      "feature_dim": int(visual.features.shape[1]),
                      "classes": len(text.class_names),
                      "config_hash": cfg.content_hash()}, indent=1))
    return 0


def _cmd_partition(args: argparse.Namespace) -> int:
    from .partition import PartitionSpec, build_partition, partition_stats, \
        save_partition
    train, _ = _load_split(args)
    spec = PartitionSpec(scenario=args.scenario, num_clients=args.clients,
                         seed=args.seed, alpha=args.alpha,
                         classes_per_client=args.classes_per_client,
                         imbalance_ratio=args.imbalance_ratio)
    pmap = build_partition(train.labels, spec)
    save_partition(args.out, pmap, spec)
    stats = partition_stats(pmap)
    print(json.dumps({
        "out": str(args.out), "clients": pmap.num_clients,
        "sample_counts": [int(c) for c in stats.sample_counts],
        "label_support": [int(s) for s in stats.label_support],
        "mean_entropy": float(stats.label_entropy.mean()),
        "mean_pairwise_tv": float(stats.pairwise_tv.mean())
        if stats.pairwise_tv.size else 0.0}, indent=1))
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    from .experiments import run_experiment
    run_dir = run_experiment(_load_config(args))
    summary = json.loads((run_dir / "summary.json").read_text())
    print(json.dumps({"run_dir": str(run_dir), **summary}, indent=1))
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    from .experiments import run_sweep
    values = [float(v) for v in args.values.split(",") if v.strip()]
    sweep_dir = run_sweep(_load_config(args), args.axis, values)
    doc = json.loads((sweep_dir / "sweep_summary.json").read_text())
    print(json.dumps(doc, indent=1))
    failed = [c for c in doc["cells"] if c["status"] != "ok"]
    return 3 if len(failed) == len(doc["cells"]) else 0


def _cmd_ablation(args: argparse.Namespace) -> int:
    from .experiments import reproduce_ablation
    seeds = None
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    grid_dir = reproduce_ablation(_load_config(args), seeds=seeds)
    print((grid_dir / "ablation.csv").read_text().rstrip())
    print(f"details: {grid_dir / 'ablation.json'}")
    return 0


def _cmd_plot(args: argparse.Namespace) -> int:
    from .plots import emit_plots
    outputs = emit_plots(args.run, embedding=args.embedding,
                         sweep=args.sweep)
    for path in outputs:
        print(path)
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    from .fl import _latest_checkpoint, evaluate
    from .experiments import load_experiment_dataset
    from .models import load_checkpoint
    from .plots import load_run_config
    run_dir = Path(args.run)
    cfg = load_run_config(run_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else \
        _latest_checkpoint(run_dir, cfg.rounds)
    if ckpt is None or not ckpt.is_file():
        raise ConfigError(f"no checkpoint found under {run_dir}; run "
                          f"`semfl train` first")
    spec, params, extra = load_checkpoint(ckpt)
    _, test = load_experiment_dataset(cfg)
    acc = evaluate(params, spec, test.images, test.labels)
    print(json.dumps({"checkpoint": str(ckpt), "round": extra.get("round"),
                      "test_samples": int(test.labels.size),
                      "test_acc": acc}, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semfl",
        description="Federated learning with frozen multimodal anchors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-features",
                       help="build a feature store of anchors")
    _dataset_args(p)
    p.add_argument("--provider", choices=("synthetic", "diffusion"),
                   default="synthetic")
    p.add_argument("--timestep", type=int, default=150)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-id", default="runwayml/stable-diffusion-v1-5")
    p.add_argument("--device", default="cpu")
    p.add_argument("--out", required=True, help="store directory to write")
    p.set_defaults(func=_cmd_extract_features)

    p = sub.add_parser("partition", help="assign samples to clients")
    _dataset_args(p)
    p.add_argument("--scenario", choices=("dirichlet", "extreme", "longtail"),
                   default="dirichlet")
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--classes-per-client", type=int, default=None)
    p.add_argument("--imbalance-ratio", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="JSON file to write")
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("train", help="run one federated experiment")
    _config_args(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", help="run one experiment per axis value")
    _config_args(p)
    p.add_argument("--axis", required=True,
                   choices=("temperature", "clients", "epochs"))
    p.add_argument("--values", required=True,
                   help="comma-separated values, e.g. 0.02,0.05,0.12")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("ablation", help="run the two-factor ablation grid")
    _config_args(p)
    p.add_argument("--seeds", default=None,
                   help="comma-separated seeds, e.g. 0,1,2")
    p.set_defaults(func=_cmd_ablation)

    p = sub.add_parser("plot", help="render figures for a run directory")
    p.add_argument("--run", required=True, help="run or sweep directory")
    p.add_argument("--embedding", action="store_true",
                   help="also embed held-out features in 2D")
    p.add_argument("--sweep", action="store_true",
                   help="treat the directory as a sweep")
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--checkpoint", default=None,
                   help="specific checkpoint file (default: newest)")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SemflError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports all
        print(f"unexpected error: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
