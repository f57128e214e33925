"""Command-line surface: train, eval, ablate, gradcheck, dump-circuit, synth-data, provider-cache."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import FormatError, write_feature
from .circuits import BUILDERS, QubitGrid
from .config import ConfigError, load_config
from .data import DataError, scan_dataset, synth_dataset
from .metrics import MetricsError
from .optim import GradientError
from .qsim import CircuitError, dump_circuit
from .tensor import ShapeError

_ERROR_CATEGORIES = (
    (ConfigError, "config"),
    (DataError, "data"),
    (FormatError, "format"),
    (GradientError, "gradient"),
    (CircuitError, "circuit"),
    (MetricsError, "metrics"),
    (ShapeError, "shape"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hqfnet", description="Hybrid quantum-classical segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("config")

    e = sub.add_parser("eval", help="evaluate a saved checkpoint")
    e.add_argument("config")
    e.add_argument("--checkpoint", required=True)

    a = sub.add_parser("ablate", help="run all six architecture variants, one CSV row each")
    a.add_argument("config")
    a.add_argument("--out", default="", help="CSV path (defaults to report.path)")

    g = sub.add_parser("gradcheck", help="module-by-module gradient oracle suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--network", action="store_true", help="include the whole-network sampled check")

    d = sub.add_parser("dump-circuit", help="print a builder circuit gate list")
    d.add_argument("name", choices=sorted(BUILDERS))
    d.add_argument("--qubits", type=int, default=16)

    s = sub.add_parser("synth-data", help="generate a seeded synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--seed", type=int, default=7)

    c = sub.add_parser("provider-cache", help="precompute synthetic features into files")
    c.add_argument("config")
    c.add_argument("--out", required=True)
    return p


def _cmd_train(args) -> int:
    from .train import run_training, write_report

    cfg = load_config(args.config)
    result = run_training(cfg)
    print(f"steps={result.steps} params={result.params}")
    print(f"train mIoU={result.miou:.6f} OA={result.oa:.6f} seconds={result.seconds:.1f}")
    if cfg.checkpoint:
        print(f"checkpoint written to {cfg.checkpoint}")
    if cfg.report_path:
        write_report(cfg.report_path, [result])
    return 0


def _cmd_eval(args) -> int:
    from .train import run_eval

    cfg = load_config(args.config)
    miou, oa = run_eval(cfg, args.checkpoint)
    print(f"eval mIoU={miou:.6f} OA={oa:.6f}")
    return 0


def _cmd_ablate(args) -> int:
    from .train import run_ablation

    cfg = load_config(args.config)
    rows = run_ablation(cfg, args.out or None)
    for r in rows:
        print(f"{r.variant}: mIoU={r.miou:.6f} OA={r.oa:.6f} params={r.params} seconds={r.seconds:.1f}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .train import gradcheck_suite, network_gradcheck

    results = gradcheck_suite(seed=args.seed)
    if args.network:
        results.append(network_gradcheck(seed=args.seed))
    bad = 0
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{status:4s} {r.name:40s} err={r.error:.3e} tol={r.tolerance:.0e}")
        bad += 0 if r.ok else 1
    return 1 if bad else 0


def _cmd_dump_circuit(args) -> int:
    grid = QubitGrid.for_qubits(args.qubits) if args.name != "filter" else None
    spec = BUILDERS[args.name](grid)
    sys.stdout.write(dump_circuit(spec))
    return 0


def _cmd_synth_data(args) -> int:
    records = synth_dataset(args.out, args.n, args.size, args.classes, args.seed)
    print(f"wrote {len(records)} samples to {args.out}")
    return 0


def _cmd_provider_cache(args) -> int:
    from .segnet import FUSED_STAGES, SyntheticFeatureProvider

    cfg = load_config(args.config)
    net_cfg = cfg.net_config()
    provider = SyntheticFeatureProvider(net_cfg, cfg.provider_seed)
    records = scan_dataset(cfg.data_root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, dict[str, str]] = {}
    for rec in records:
        manifest[rec.stem] = {}
        for stage in FUSED_STAGES:
            rel = f"{rec.stem}_s{stage}.hqft"
            write_feature(out / rel, provider.features(rec.stem, stage))
            manifest[rec.stem][str(stage)] = rel
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"cached features for {len(records)} samples in {out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "dump-circuit": _cmd_dump_circuit,
    "synth-data": _cmd_synth_data,
    "provider-cache": _cmd_provider_cache,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # one-line machine-parseable category
        for exc_type, category in _ERROR_CATEGORIES:
            if isinstance(e, exc_type):
                print(f"error:{category}: {e}", file=sys.stderr)
                return 1
        print(f"error:internal: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
