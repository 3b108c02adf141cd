"""Command-line entry point: ``dilemma <verb> [--config FILE] [--set key=value ...] [--out DIR]``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import TrainConfig, parse_overrides
from .rng import ConfigError

VERBS = ("pretrain", "eval-knn", "eval-linear", "eval-md", "gen-synth", "bench", "grad-check")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dilemma", description="Sparse-token self-supervised ViT pretraining and probes.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", default="runs/latest", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("pretrain", help="run pretraining"))
    for verb, what in (("eval-knn", "weighted k-NN probe"), ("eval-linear", "linear probe grid")):
        p = common(sub.add_parser(verb, help=what))
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--strip-positions", action="store_true", help="bag-of-features control")
        p.add_argument("--teacher", action="store_true", help="probe the teacher backbone")
        if verb == "eval-knn":
            p.add_argument("--k", type=int, default=20)
            p.add_argument("--tau", type=float, default=0.07)
        else:
            p.add_argument("--epochs", type=int, default=30)
        p.add_argument("--export-features", action="store_true", help="also write features as .dlma")
    p = common(sub.add_parser("eval-md", help="mismatch-detection accuracy"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sparsity", type=float, default=0.55)
    p.add_argument("--theta", type=float, default=0.2)
    common(sub.add_parser("gen-synth", help="write the shape-arrangement dataset"))
    p = common(sub.add_parser("bench", help="forward+backward time per kept-token count"))
    p.add_argument("--tokens", required=True, help="comma-separated token counts")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=32)
    p = common(sub.add_parser("grad-check", help="finite-difference gradient suite"))
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def resolve_config(args) -> TrainConfig:
    overrides = parse_overrides(args.overrides)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return TrainConfig.from_file(path, overrides)
    return TrainConfig().with_overrides(overrides)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_backbone(args, cfg: TrainConfig):
    from .checkpoint import load_checkpoint

    state, stored, _ = load_checkpoint(args.checkpoint)
    params = state.teacher if getattr(args, "teacher", False) else state.student
    if params is None:
        raise ConfigError("checkpoint holds no teacher (SimCLR mode)")
    # the probe dataset comes from the invocation config, the model from the checkpoint
    cfg.vit = stored.vit
    return params, stored


def _run(args, cfg: TrainConfig, out: Path) -> int:
    from . import evaluation as ev
    from .train import load_datasets

    if args.verb == "pretrain":
        from .train import run_pretraining

        result = run_pretraining(cfg, out)
        last = result.records[-1] if result.records else None
        print(f"iterations={len(result.records)} checkpoint={result.checkpoint}")
        if last is not None:
            print(f"final loss_union={last.loss_union:.4f} md_accuracy={last.md_accuracy}")
        return EXIT_OK

    if args.verb == "gen-synth":
        from .data import save_dataset

        train, test = load_datasets(cfg)
        save_dataset(out / "train.dlma", train)
        save_dataset(out / "test.dlma", test)
        print(f"wrote {len(train)} train / {len(test)} test images to {out}")
        return EXIT_OK

    if args.verb == "bench":
        try:
            counts = [int(t) for t in args.tokens.split(",") if t.strip()]
        except ValueError as exc:
            raise ConfigError(f"--tokens must be comma-separated integers: {args.tokens}") from exc
        rows = ev.throughput_benchmark(cfg.vit, counts, repeats=args.repeats, batch_size=args.batch_size,
                                       seed=cfg.master_seed)
        print(f"{'tokens':>6} {'mean_ms':>10} {'std_ms':>8} {'speedup':>8}")
        for r in rows:
            print(f"{r.tokens:>6} {r.mean_ms:>10.2f} {r.std_ms:>8.2f} {r.speedup:>8.2f}")
        if len(rows) >= 2:
            print(f"ratio t({rows[-1].tokens})/t({rows[0].tokens}) = {rows[-1].mean_ms / rows[0].mean_ms:.3f}")
        _write_json(out / "bench.json", [r.__dict__ for r in rows])
        return EXIT_OK

    if args.verb == "grad-check":
        from .gradcheck import run_gradient_suite

        results = run_gradient_suite(seed=cfg.master_seed, h=args.h)
        worst = max(results, key=results.get)
        for name, err in sorted(results.items()):
            logging.getLogger(__name__).info("%s %.3e", name, err)
        print(f"checked {len(results)} cases; worst relative error {results[worst]:.3e} ({worst})")
        _write_json(out / "grad_check.json", results)
        return EXIT_OK if results[worst] < args.tol else EXIT_RUNTIME

    params, stored = _load_backbone(args, cfg)
    train, test = load_datasets(cfg)
    if args.verb == "eval-md":
        acc = ev.mismatch_detection_accuracy(params, cfg.vit, test, args.sparsity, args.theta, seed=cfg.master_seed)
        print(f"md_accuracy={acc:.4f} (sparsity={args.sparsity}, theta={args.theta})")
        _write_json(out / "eval_md.json", {"md_accuracy": acc, "sparsity": args.sparsity, "theta": args.theta})
        return EXIT_OK

    source = "teacher" if args.teacher else "student"
    f_train = ev.extract_features(params, cfg.vit, train, args.strip_positions, source=source)
    f_test = ev.extract_features(params, cfg.vit, test, args.strip_positions, source=source)
    if args.export_features:
        ev.export_features(out / "features_train.dlma", f_train)
        ev.export_features(out / "features_test.dlma", f_test)
    if args.verb == "eval-knn":
        acc = ev.knn_classify(f_train, f_test, args.k, args.tau)
        print(f"knn_accuracy={acc:.4f} (k={args.k}, source={f_train.source})")
        _write_json(out / "eval_knn.json", {"accuracy": acc, "k": args.k, "tau": args.tau, "source": f_train.source})
        return EXIT_OK
    result = ev.linear_probe(f_train, f_test, epochs=args.epochs, seed=cfg.master_seed)
    for row in result.grid:
        print(f"lr={row['lr']:g} batch_size={row['batch_size']} normalize={row['normalize']} accuracy={row['accuracy']:.4f}")
    print(f"best linear_accuracy={result.accuracy:.4f}")
    _write_json(out / "eval_linear.json", {"accuracy": result.accuracy, "grid": result.grid, "source": f_train.source})
    return EXIT_OK


def parse_and_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved.cfg").write_text(cfg.to_text())
        return _run(args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(parse_and_dispatch())
