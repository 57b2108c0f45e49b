"""Command-line entry point.

Subcommands: synth, modulate, score, prune, gate (score + select + prune),
adapt, eval.  Machine-readable JSON goes to stdout with --json; exit code 0
on success, 2 on validation problems, 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import training
from .config import ConfigError, load_run_config
from .metrics import metric_report
from .modulation import hfm_forward
from .plausibility import (
    ScoreAccumulator,
    batch_stats,
    build_hypergraph,
    plausibility_report,
    sample_descriptors,
    select_samples,
)
from .pruning import batch_instability_reports
from .rng import SeededRng
from .synthdata import gen_dataset, load_dataset
from .tensors import (
    PredictionEnsemble,
    TensorError,
    argmax_map,
    read_tensor,
    write_tensor,
)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapeuda",
        description="Structure-aware domain adaptation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="override the root seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--json", action="store_true", help="JSON on stdout")

    p = sub.add_parser("synth", help="generate a synthetic two-domain dataset")
    common(p, out_required=True)

    p = sub.add_parser("modulate", help="produce the four modulated feature maps")
    common(p, out_required=True)
    p.add_argument("--source-feat", required=True)
    p.add_argument("--source-label", required=True)
    p.add_argument("--target-feat", required=True)
    p.add_argument("--target-label", required=True, help="teacher pseudo-labels")

    for name, desc in (
        ("score", "plausibility reports for an ensemble directory"),
        ("prune", "instability reports and pruned maps"),
        ("gate", "score, select, and prune in one pass"),
    ):
        p = sub.add_parser(name, help=desc)
        common(p)
        p.add_argument("--in", dest="in_dir", required=True,
                       help="directory of per-sample member_*.sht subdirectories")

    p = sub.add_parser("adapt", help="run the full adaptation loop")
    common(p, out_required=True)
    p.add_argument("--data", help="dataset directory or manifest path")

    p = sub.add_parser("eval", help="Dice / surface-distance report")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=int, help="class count (inferred if omitted)")
    p.add_argument("--spacing", type=float, default=1.0, help="mm per pixel")
    p.add_argument("--json", action="store_true")

    return parser


def _load_ensembles(in_dir: Path):
    """Load every sample subdirectory of member_*.sht probability maps."""
    sample_dirs = sorted(d for d in in_dir.iterdir() if d.is_dir())
    if not sample_dirs:
        raise ConfigError(f"{in_dir}: no sample subdirectories")
    names, ensembles = [], []
    for d in sample_dirs:
        member_paths = sorted(d.glob("member_*.sht"))
        if len(member_paths) < 2:
            raise ConfigError(f"{d}: need at least 2 member_*.sht files")
        members = tuple(read_tensor(p, kind="prob") for p in member_paths)
        names.append(d.name)
        ensembles.append(PredictionEnsemble(members))
    return names, ensembles


def _score_batch(ensembles, cfg):
    consensuses = [argmax_map(e.mean()) for e in ensembles]
    graphs = [build_hypergraph(m) for m in consensuses]
    descriptors = [sample_descriptors(g, cfg.gate.eps) for g in graphs]
    stats = batch_stats(descriptors, cfg.gate.eps_stat)
    reports = [
        plausibility_report(e, m, stats, cfg.gate)
        for e, m in zip(ensembles, consensuses)
    ]
    return consensuses, reports


def _emit(payload, as_json: bool) -> None:
    if as_json:
        print(json.dumps(payload, indent=2))
    else:
        print(_human(payload))


def _human(payload, indent=0) -> str:
    pad = "  " * indent
    if isinstance(payload, dict):
        lines = []
        for k, v in payload.items():
            if isinstance(v, (dict, list)):
                lines.append(f"{pad}{k}:")
                lines.append(_human(v, indent + 1))
            else:
                lines.append(f"{pad}{k}: {v}")
        return "\n".join(lines)
    if isinstance(payload, list):
        return "\n".join(_human(v, indent) for v in payload)
    return f"{pad}{payload}"


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    print(f"effective seed: {cfg.seed}", file=sys.stderr)
    manifest = gen_dataset(cfg.synth, args.out)
    _emit(
        {"out": args.out, "seed": cfg.seed, "samples": len(manifest["samples"])},
        args.json,
    )
    return 0


def cmd_modulate(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    print(f"effective seed: {cfg.seed}", file=sys.stderr)
    src_feat = read_tensor(args.source_feat)
    tgt_feat = read_tensor(args.target_feat)
    src_label = read_tensor(args.source_label, kind="label")
    tgt_label = read_tensor(args.target_label, kind="label")
    outs = hfm_forward(
        src_feat, src_label, tgt_feat, tgt_label, cfg.hfm, SeededRng(cfg.seed)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in ("source_styled", "source_cross", "target_styled", "target_cross"):
        path = out / f"{name}.sht"
        write_tensor(path, getattr(outs, name))
        paths[name] = str(path)
    _emit({"mix_lambda": outs.mix_lambda, "outputs": paths}, args.json)
    return 0


def cmd_score(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    names, ensembles = _load_ensembles(Path(args.in_dir))
    _, reports = _score_batch(ensembles, cfg)
    payload = [dict(sample=n, **r.to_json_dict()) for n, r in zip(names, reports)]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for n, r in zip(names, reports):
            (out / f"{n}.plausibility.json").write_text(
                json.dumps(r.to_json_dict(), indent=2)
            )
    _emit(payload, args.json)
    return 0


def _prune_batch(names, ensembles, consensuses, cfg, out_dir):
    hard = [[argmax_map(m) for m in e.members] for e in ensembles]
    reports = batch_instability_reports(hard, consensuses, cfg.sap)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, rep in zip(names, reports):
            path = out_dir / f"{name}_pruned.sht"
            write_tensor(path, rep.pruned)
            rep.pruned_path = str(path)
    return reports


def cmd_prune(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    names, ensembles = _load_ensembles(Path(args.in_dir))
    consensuses = [argmax_map(e.mean()) for e in ensembles]
    out = Path(args.out) if args.out else None
    reports = _prune_batch(names, ensembles, consensuses, cfg, out)
    payload = [dict(sample=n, **r.to_json_dict()) for n, r in zip(names, reports)]
    _emit(payload, args.json)
    return 0


def cmd_gate(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    names, ensembles = _load_ensembles(Path(args.in_dir))
    consensuses, reports = _score_batch(ensembles, cfg)
    scores = [r.s_final for r in reports]
    acc = ScoreAccumulator()
    selected = set(
        int(i) for i in select_samples(acc, scores, cfg.gate.rho_0, warmup=0)
    )
    out = Path(args.out) if args.out else None
    prune_reports = _prune_batch(names, ensembles, consensuses, cfg, out)
    payload = []
    for i, name in enumerate(names):
        entry = dict(sample=name, **reports[i].to_json_dict())
        entry["selected"] = i in selected
        entry.update(pruning=prune_reports[i].to_json_dict())
        payload.append(entry)
    _emit(payload, args.json)
    return 0


def cmd_adapt(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    print(f"effective seed: {cfg.seed}", file=sys.stderr)
    data = args.data or cfg.data
    if not data:
        raise ConfigError("adapt needs --data or a [paths] data entry")
    source, target, _ = load_dataset(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "epochs.jsonl"
    with log_path.open("w") as log:
        state, _reports = training.adapt(
            source,
            target,
            cfg.settings(),
            log_fn=lambda r: print(json.dumps(r.to_json_dict()), file=log),
        )
    training.save_checkpoint(out, state)
    report = training.evaluate(state.student, target, state.upsample)
    (out / "metrics.json").write_text(json.dumps(report.to_json_dict(), indent=2))
    _emit(
        {
            "out": str(out),
            "epochs": state.epoch,
            "seed": cfg.seed,
            "target_metrics": report.to_json_dict(),
        },
        args.json,
    )
    return 0


def cmd_eval(args) -> int:
    gt = read_tensor(args.gt, kind="label", num_classes=args.classes)
    pred = read_tensor(args.pred, kind="label", num_classes=gt.num_classes)
    report = metric_report(pred, gt, args.spacing)
    _emit(report.to_json_dict(), args.json)
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "modulate": cmd_modulate,
    "score": cmd_score,
    "prune": cmd_prune,
    "gate": cmd_gate,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, TensorError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
