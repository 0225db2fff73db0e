"""Command-line entry points: generate, train, evaluate, report, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from pydantic import ValidationError

from .config import RunConfig, Toggles, desk_preset, dump_config, load_config
from .fusion import FusionMode
from .reporting import MissingRecordsError, format_table, summary_rows, write_report
from .synth import DomainStream, GeneratorConfigError, generate_stream, load_stream, save_stream
from .trainer import DataError, LifelongTrainer, RehearsalError

OUTPUT_ROOT_ENV = "DTP_OUTPUT_ROOT"

ABLATIONS: dict[str, tuple[Toggles, FusionMode]] = {
    "baseline": (Toggles(dpf=False, tfa=False, kd=False, lkd=False), FusionMode.DYNAMIC),
    "dpf_addition": (Toggles(dpf=True, tfa=False, kd=False, lkd=False), FusionMode.ADDITION),
    "dpf": (Toggles(dpf=True, tfa=False, kd=False, lkd=False), FusionMode.DYNAMIC),
    "dpf_tfa": (Toggles(dpf=True, tfa=True, kd=False, lkd=False), FusionMode.DYNAMIC),
    "dpf_tfa_kd": (Toggles(dpf=True, tfa=True, kd=True, lkd=False), FusionMode.DYNAMIC),
    "full": (Toggles(), FusionMode.DYNAMIC),
}


class CLIError(Exception):
    pass


def _config(path: str | None, seed: int | None) -> RunConfig:
    cfg = load_config(path) if path else desk_preset()
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    return cfg


def run_dir_for(cfg: RunConfig) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir) / f"{cfg.name}-seed{cfg.seed}"
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{cfg.name}-seed{cfg.seed}"


def _stream(cfg: RunConfig) -> DomainStream:
    if cfg.stream_dir:
        return load_stream(cfg.stream_dir)
    cfg.generator.validate_feasible()
    return generate_stream(cfg.generator, cfg.seed)


def _prepare_dir(path: Path, overwrite: bool, marker: str) -> None:
    if (path / marker).exists():
        if not overwrite:
            raise CLIError(f"{path} already holds outputs; pass --overwrite to replace them")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def cmd_generate(args) -> int:
    cfg = _config(args.config, args.seed)
    cfg.generator.validate_feasible()
    out = Path(args.out)
    _prepare_dir(out, args.overwrite, "manifest.json")
    stream = generate_stream(cfg.generator, cfg.seed)
    save_stream(stream, out)
    for d in stream.domains:
        kind = "unseen" if d.unseen else "seen"
        print(f"domain {d.domain_id} ({kind}): train {len(d.train)} query {len(d.query)} gallery {len(d.gallery)}")
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config, args.seed)
    out = Path(args.out) if args.out else run_dir_for(cfg)
    if not args.resume:
        _prepare_dir(out, args.overwrite, "run_record.jsonl")
    trainer = LifelongTrainer(cfg, _stream(cfg), out)
    record = trainer.run(resume=args.resume)
    final = record.reports[-1]
    print(format_table(summary_rows(final)))
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    cfg_path = run_dir / "config.yaml"
    if not cfg_path.exists():
        raise CLIError(f"{run_dir} has no config.yaml")
    cfg = _config(str(cfg_path), args.seed)
    trainer = LifelongTrainer(cfg, _stream(cfg), run_dir)
    trainer.restore_for_evaluation()
    report = trainer.evaluate_all()
    print(format_table(summary_rows(report)))
    return 0


def cmd_report(args) -> int:
    paths = write_report(args.run_dir)
    if args.format == "csv":
        print(paths["summary"].read_text(encoding="utf-8"), end="")
    else:
        rows = [r for r in _read_summary(paths["summary"])]
        print(format_table(rows))
    for name, p in paths.items():
        print(f"{name}: {p}", file=sys.stderr)
    return 0


def _read_summary(path: Path) -> list[dict]:
    import csv

    with open(path, encoding="utf-8") as fh:
        return [{**r, "mAP": float(r["mAP"]), "rank1": float(r["rank1"])} for r in csv.DictReader(fh)]


def cmd_ablate(args) -> int:
    base = _config(args.config, args.seed)
    names = args.only or list(ABLATIONS)
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown:
        raise CLIError(f"unknown ablation(s) {unknown}; choose from {list(ABLATIONS)}")
    stream = _stream(base)
    root = Path(args.out) if args.out else run_dir_for(base).with_name(f"{base.name}-ablate-seed{base.seed}")
    results = {}
    for name in names:
        toggles, mode = ABLATIONS[name]
        cfg = base.model_copy(update={"name": name, "toggles": toggles, "fusion_mode": mode})
        out = root / name
        _prepare_dir(out, args.overwrite, "run_record.jsonl")
        final = LifelongTrainer(cfg, stream, out).run().reports[-1]
        seen = final.seen_average
        unseen = final.unseen_average or (float("nan"), float("nan"))
        results[name] = {"seen_mAP": seen[0], "seen_rank1": seen[1], "unseen_mAP": unseen[0], "unseen_rank1": unseen[1]}
        print(f"{name:>14}  seen {100 * seen[0]:5.1f}/{100 * seen[1]:5.1f}  unseen {100 * unseen[0]:5.1f}/{100 * unseen[1]:5.1f}")
    (root / "ablation.json").write_text(json.dumps(results, indent=1), encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtp", description="Lifelong retrieval with dynamic textual prompts on synthetic domains.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML run config (default: desk preset)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--overwrite", action="store_true", help="replace existing outputs")

    g = sub.add_parser("generate", help="write a synthetic domain stream to disk")
    common(g)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="run the lifelong training loop")
    common(t)
    t.add_argument("--out", help=f"run directory (default: ${OUTPUT_ROOT_ENV}/<name>-seed<seed>)")
    t.add_argument("--resume", action="store_true", help="continue from the newest checkpoint")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="re-evaluate the newest completed checkpoint of a run")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--seed", type=int)
    e.set_defaults(fn=cmd_evaluate)

    r = sub.add_parser("report", help="emit curve images and tables for a run")
    r.add_argument("--run-dir", required=True)
    r.add_argument("--format", choices=("csv", "table"), default="table")
    r.add_argument("--seed", type=int, help="accepted for symmetry; reports are read from disk")
    r.set_defaults(fn=cmd_report)

    a = sub.add_parser("ablate", help="train every component toggle set on one stream")
    common(a)
    a.add_argument("--out")
    a.add_argument("--only", nargs="+", metavar="NAME")
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("config", help="print the desk preset as YAML")
    c.add_argument("--seed", type=int)
    c.set_defaults(fn=lambda args: print(dump_config(_config(None, args.seed)), end="") or 0)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (CLIError, ValidationError, GeneratorConfigError, DataError, RehearsalError, MissingRecordsError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
