"""``bdlab pretrain|finetune|probe|report``.

Exit codes: 0 success, 2 configuration error, 3 numeric or training failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path


from . import __version__
from . import experiments as ex
from .adapters import ConfigurationError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .diffusion import NumericError
from .metrics import SchemaError, write_metrics_csv
from .probes import delta_injection_probe, fit_world_model, scale_probe, write_jsonl, zero_probe
from .report import comparison_table, describe, format_table, load_runs, write_long, write_table
from .tensor import ContractError
from .trainer import TrainingDiverged

log = logging.getLogger("bdlab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json_atomic(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def write_manifest(out: Path, stage: str, cfg: ExperimentConfig | None, files: list[Path], **extra) -> Path:
    manifest = {
        "stage": stage,
        "status": {stage: "complete"},
        "version": __version__,
        "config_hash": None if cfg is None else cfg.digest(),
        "outputs": [{"path": str(Path(f).relative_to(out)), "sha256": _sha256(f)} for f in files],
    }
    manifest.update(extra)
    return write_json_atomic(out / "manifest.json", manifest)


def _write_config(out: Path, cfg: ExperimentConfig) -> Path:
    return write_json_atomic(out / "config.json", cfg.to_dict())


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config).with_overrides(seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, history = ex.run_pretrain(cfg)
    ckpt = save_checkpoint(out / "pretrained.bdlab", model, ex.schedule(cfg), {"stage": "pretrain", "seed": cfg.pretrain.seed})
    loss_csv = out / "pretrain_loss.csv"
    with loss_csv.open("w", encoding="utf-8", newline="") as fh:
        fh.write("iteration,eval_loss\n")
        for i, v in enumerate(history, start=1):
            fh.write(f"{i * cfg.pretrain.eval_every},{v!r}\n")
    files = [ckpt, loss_csv, _write_config(out, cfg)]
    write_manifest(out, "pretrain", cfg, files, seed=cfg.pretrain.seed, parameters=model.count_parameters())
    print(f"pretrained {model.count_parameters()} parameters; final eval loss {history[-1] if history else float('nan'):.5f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    bnn = None if args.bnn is None else args.bnn == "on"
    cfg = load_config(args.config, require_pretrained=True).with_overrides(bnn=bnn, lam=args.lam, seed=args.seed)
    out = Path(args.out) / f"seed_{cfg.finetune.seed}"
    out.mkdir(parents=True, exist_ok=True)
    pretrained, _, _ = load_checkpoint(cfg.pretrained)
    series = ex.run_finetune(cfg, pretrained, checkpoint_dir=out, keep_states=False)
    metrics = write_metrics_csv(out / "metrics.csv", series.rows)
    files = [e.path for e in series.entries] + [metrics, _write_config(out, cfg)]
    n_var = sum(vp.size for _, vp in series.model.variational())
    write_manifest(
        out,
        "finetune",
        cfg,
        files,
        seed=cfg.finetune.seed,
        bnn=cfg.finetune.adapter.bayesian,
        **{"lambda": cfg.finetune.lam},
        variational_parameters=n_var,
        variational_tensors=len(series.model.variational()),
        pretrained_sha256=_sha256(cfg.pretrained),
    )
    last = series.rows[-1]
    print(f"fine-tuned seed {cfg.finetune.seed}: {len(series.entries)} checkpoints; final fidelity {last.fidelity:.4f}")
    return EXIT_OK


def _probe_records(cfg: ExperimentConfig, model, kind: str) -> tuple[list[dict], str]:
    p = cfg.probe
    sched = ex.schedule(cfg)
    data = ex.few_shot_data(cfg)
    label = ex.fine_tune_label(cfg)
    anchor = data[0]
    if kind == "zero":
        world = fit_world_model(model, anchor, p.t_start, label, sched, seed=p.seed)
        rec = zero_probe(model, p.t_start, label, sched, data, world=world)
        summary = f"zero probe: |out - 0| = {rec['dist_to_zero']:.4f}, |out - anchor| = {rec['dist_to_anchor']:.4f}"
        return [rec], summary
    if kind == "scale":
        world = fit_world_model(model, anchor, p.t, label, sched, seed=p.seed)
        recs = scale_probe(model, p.ks, p.t, anchor, label, sched, world=world)
        summary = "scale probe: " + ", ".join(f"k={r['k']:g} cos={r['cosine']:.3f}" for r in recs)
        return recs, summary
    if kind == "delta":
        if cfg.data.kind != "raster":
            raise ConfigurationError("probe: delta injection needs raster data")
        world = fit_world_model(model, anchor, p.t, label, sched, seed=p.seed)
        rec = delta_injection_probe(
            model, anchor, p.t, p.region_fraction, p.magnitude, label, sched, n_draws=p.draws, seed=p.seed, world=world
        )
        k2 = rec["analytic_k2"]
        summary = f"delta probe: ratio {rec['ratio']:.4f}, analytic k^2 {'inf' if k2 is None else f'{k2:.4f}'}"
        return [rec], summary
    raise ConfigurationError(f"probe: unknown kind {kind!r}")


def cmd_probe(args) -> int:
    cfg = load_config(args.config)
    if args.kind not in ("zero", "scale", "delta"):
        raise ConfigurationError(f"probe: unknown kind {args.kind!r}")
    model, _, meta = load_checkpoint(args.checkpoint)
    records, summary = _probe_records(cfg, model, args.kind)
    for r in records:
        r["checkpoint_iteration"] = meta.get("iteration")
    out = Path(args.out)
    path = out / f"probe_{args.kind}.jsonl"
    write_jsonl(path, records)
    write_manifest(out, "probe", cfg, [path], kind=args.kind, checkpoint_sha256=_sha256(args.checkpoint))
    print(summary)
    return EXIT_OK


def cmd_report(args) -> int:
    paths = [Path(p) for p in args.csv]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise ConfigurationError(f"report: missing CSV files {missing}")
    runs = load_runs(paths)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = comparison_table(runs)
    files = [write_table(out / "comparison.csv", table), write_long(out / "long.csv", runs)]
    files.append(
        write_json_atomic(
            out / "corruption.json",
            [{"csv": str(r.path), "arm": r.arm, "seed": r.seed, **r.corruption.to_dict()} for r in runs],
        )
    )
    write_manifest(out, "report", None, files, inputs=[{"path": str(p), "sha256": _sha256(p)} for p in paths])
    for r in runs:
        print(describe(r))
    print(format_table(table))
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bdlab", description="Few-shot diffusion fine-tuning lab.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the wide-distribution model")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="few-shot fine-tune a pretrained checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--bnn", choices=("on", "off"))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("probe", help="run a diagnostic probe on a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="compare metric CSVs across seeds and arms")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ContractError, SchemaError, CheckpointError, FileNotFoundError) as exc:
        print(f"bdlab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NumericError, FloatingPointError) as exc:
        print(f"bdlab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
