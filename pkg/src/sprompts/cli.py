"""Command line entry points: pretrain, run, ablate, report.

Exit codes: 0 ok, 1 usage or config error, 2 gate or assertion failure, 3 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config
from .domains import DatasetError, generate_stream, pretrain_corpus
from .encoder import FrozenBackbone, PretrainGateError, pretrain_backbone
from .harness import (
    MetricError, ablation_suite, ablation_tables, dump_json, report_tables, run_dil, write_tables,
)
from .plots import PLOT_KINDS, PlotError, render
from .store import CheckpointError, load_backbone, load_checkpoint, restore_model, save_backbone, save_checkpoint

log = logging.getLogger("sprompts")

EXIT_OK, EXIT_USAGE, EXIT_GATE, EXIT_IO = 0, 1, 2, 3

CLI_MODES = {"dil": "dil", "til": "til", "random": "random", "vote": "vote", "zero-shot": "zero_shot"}


class UsageError(Exception):
    pass


class GateFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sprompts", description="Domain-incremental learning with per-domain prompts.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--out", help="output directory (default: output_dir from the config)")
        if seed:
            sp.add_argument("--seed", type=int, help="override the method seed")

    sp = sub.add_parser("pretrain", help="build, train and freeze the backbone")
    common(sp, seed=False)
    sp.add_argument("--seed", type=int, help="override the pretraining seed")

    sp = sub.add_parser("run", help="train all sessions and evaluate every mode")
    common(sp)
    sp.add_argument("--mode", choices=sorted(CLI_MODES), default="dil", help="headline selection mode")
    sp.add_argument("--resume", help="session checkpoint to continue from")

    sp = sub.add_parser("ablate", help="selection modes, ablations and hyperparameter sweeps")
    common(sp)

    sp = sub.add_parser("report", help="render figures and CSVs from a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--out", help="figure directory (default: RUN_DIR/figures)")
    sp.add_argument("--plots", help=f"comma-separated subset of {','.join(PLOT_KINDS)}")
    return p


# ------------------------------------------------------------------ helpers


def _config(args) -> tuple[RunConfig, Path]:
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    return cfg, out


def _mkdir(path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)


def _pretrain(cfg: RunConfig) -> FrozenBackbone:
    corpus = pretrain_corpus(cfg.stream, seed=cfg.corpus.seed, n_samples=cfg.corpus.n_samples,
                             transforms=cfg.corpus.transforms)
    bb = pretrain_backbone(corpus, cfg.encoder, cfg.pretrain)
    bb.corpus_provenance = corpus.provenance
    return bb


def _write_backbone(bb: FrozenBackbone, cfg: RunConfig, out: Path) -> Path:
    _mkdir(out)
    path = out / "backbone.ckpt"
    save_backbone(bb, path, extra={"pretrain": dataclasses.asdict(cfg.pretrain),
                                   "corpus": getattr(bb, "corpus_provenance", {})})
    (out / "backbone.fingerprint").write_text(bb.fingerprint() + "\n")
    return path


def _backbone_for(cfg: RunConfig, out: Path) -> FrozenBackbone:
    """Configured backbone checkpoint, else one cached in ``out``, else pretrain now."""
    if cfg.backbone:
        bb = load_backbone(cfg.backbone)
    elif (out / "backbone.ckpt").is_file():
        bb = load_backbone(out / "backbone.ckpt")
    else:
        log.info("no backbone checkpoint given; pretraining one")
        bb = _pretrain(cfg)
        _write_backbone(bb, cfg, out)
    if bb.config != cfg.encoder:
        raise ConfigError("backbone checkpoint was built with a different encoder section")
    return bb


def _provenance(cfg: RunConfig) -> dict:
    return {
        "code_version": __version__,
        "run_config": cfg.experiment_dict(),
        "run_config_hash": cfg.digest(),
        "seeds": {"method": cfg.method.seed, "stream": cfg.stream.seed,
                  "pretrain": cfg.pretrain.seed, "corpus": cfg.corpus.seed},
    }


def _load_resume(path: str, bb: FrozenBackbone, cfg: RunConfig):
    """Snapshots and session logs for sessions 1..k given session k's checkpoint."""
    last = load_checkpoint(path)
    k = last.sessions
    if last.meta["method"] != cfg.method.to_dict():
        raise ConfigError("resume checkpoint was trained with a different method config")
    snaps, records = [], []
    for s in range(1, k + 1):
        p = Path(path).with_name(f"session_{s}.ckpt")
        ck = last if s == k else load_checkpoint(p)
        if ck.sessions != s:
            raise CheckpointError(f"{p} holds {ck.sessions} sessions, expected {s}")
        snaps.append(restore_model(ck, bb))
        records.append(ck.meta["extra"]["record"])
    return snaps, records


def _print_summary(report: dict, headline: str) -> None:
    m = report["modes"][headline]
    print(f"headline mode: {headline}")
    for l, row in enumerate(m["accuracy_matrix"], 1):
        print(f"  after session {l}: " + " ".join(f"{v:.4f}" for v in row))
    print(f"task-wise AA {m['task_wise_aa']:.4f}  task-agnostic AA {m['task_agnostic_aa']:.4f}  "
          f"forgetting {m['forgetting']:.4f}")
    if "domain_id" in report:
        print(f"domain-id accuracy {report['domain_id']['average']:.4f}")


# ----------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    cfg, out = _config(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, pretrain=dataclasses.replace(cfg.pretrain, seed=args.seed))
    try:
        bb = _pretrain(cfg)
    except PretrainGateError as exc:
        raise GateFailure(str(exc)) from exc
    path = _write_backbone(bb, cfg, out)
    dump_config(cfg, out / "pretrain_config.yaml")
    print(f"backbone {path} fingerprint {bb.fingerprint()} held-out accuracy {bb.pretrain_accuracy:.4f}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg, out = _config(args)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    headline = CLI_MODES[args.mode]
    modes = tuple(dict.fromkeys(cfg.harness.modes + (headline,)))
    _mkdir(out / "checkpoints")
    bb = _backbone_for(cfg, out)
    stream = generate_stream(cfg.stream)
    resume, records = ([], [])
    if args.resume:
        resume, records = _load_resume(args.resume, bb, cfg)
        log.info("resuming after session %d", len(resume))

    def checkpoint(model, record):
        save_checkpoint(model, out / "checkpoints" / f"session_{model.sessions}.ckpt",
                        extra={"record": record})

    result = run_dil(stream, cfg.method, bb, modes, resume=resume, resume_records=records,
                     on_session=checkpoint, provenance=_provenance(cfg), ood=cfg.harness.ood)
    dump_config(cfg, out / "config.yaml")
    dump_json(result.report, out / "report.json")
    dump_json({"resumed_sessions": len(resume), "headline_mode": headline}, out / "run_log.json")
    if not result.complete:
        raise GateFailure(f"run incomplete: {result.report['error']}")
    write_tables(report_tables(result.report), out / "tables")
    _print_summary(result.report, headline)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, out = _config(args)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    _mkdir(out)
    bb = _backbone_for(cfg, out)
    stream = generate_stream(cfg.stream)
    base = run_dil(stream, cfg.method, bb, ("dil", "random", "vote", "zero_shot"),
                   provenance=_provenance(cfg), ood=False)
    if not base.complete:
        raise GateFailure(f"base run incomplete: {base.report['error']}")
    abl = ablation_suite(stream, base, cfg.method, bb, cfg.ablation)
    dump_json(abl, out / "ablation.json")
    write_tables(ablation_tables(abl), out / "tables")
    for r in abl["rows"]:
        aa = "failed" if r["aa"] is None else f"AA {r['aa']:.4f} forgetting {r['forgetting']:.4f}"
        print(f"{r['group']:>20} {str(r['value']):>26}  {aa}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    report_path, abl_path = run_dir / "report.json", run_dir / "ablation.json"
    report = json.loads(report_path.read_text()) if report_path.is_file() else None
    ablation = json.loads(abl_path.read_text()) if abl_path.is_file() else None
    if report is None and ablation is None:
        raise FileNotFoundError(f"{run_dir} holds neither report.json nor ablation.json")
    if args.plots:
        kinds = [k.strip() for k in args.plots.split(",") if k.strip()]
        bad = [k for k in kinds if k not in PLOT_KINDS]
        if not kinds or bad:
            raise UsageError(f"--plots takes a subset of {','.join(PLOT_KINDS)}")
    else:
        kinds = ([] if report is None else ["accuracy"] + (["ood"] if "ood" in report else []))
        kinds += ["sweep"] if ablation is not None else []
    if report is None and set(kinds) - {"sweep"}:
        raise FileNotFoundError(f"{report_path} is missing")
    fig_dir = Path(args.out) if args.out else run_dir / "figures"
    svgs = render(kinds, report or {}, ablation, fig_dir)
    if report is not None:
        write_tables(report_tables(report), fig_dir)
    for p in svgs:
        print(p)
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "run": cmd_run, "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, PlotError) as exc:
        print(f"sprompts: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GateFailure, MetricError, PretrainGateError) as exc:
        print(f"sprompts: failed: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (OSError, CheckpointError, DatasetError) as exc:
        print(f"sprompts: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
