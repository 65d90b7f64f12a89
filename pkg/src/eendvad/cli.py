"""Command line entry point: simulate -> train -> infer -> score, plus attention inspection.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import losses as L
from .config import ConfigError, ExperimentConfig, load_config
from .frontend import FrontendError, load_features, write_array, write_features
from .model import load_checkpoint
from .numerics import NumericError
from .scoring import RttmError, decode, der, format_report, read_rttm, write_rttm
from .simulate import SimulationError, dataset_stats, format_stats, generate_dataset
from .trainer import Trainer, load_dataset, train

log = logging.getLogger("eendvad")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eendvad", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, help="seed for every random draw of this command")
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write synthetic dialogues (wav + rttm + manifest)")
    s.add_argument("out_dir")
    s.add_argument("--num-files", type=int, default=10)
    s.add_argument("--duration", type=float, help="seconds per dialogue")
    s.add_argument("--overlap", type=float, help="target overlap ratio over speech time")
    s.add_argument("--features", action="store_true", help="also write feature containers")

    t = sub.add_parser("train", help="two-phase training")
    t.add_argument("manifest")
    t.add_argument("out_dir")
    t.add_argument("--phase", choices=("base", "vad", "both"), default="both",
                   help="base: alpha = 0 only; vad: continue from --resume with alpha > 0")
    t.add_argument("--resume", help="training checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="stop after this many steps, saving resume.ckpt")

    i = sub.add_parser("infer", help="posteriors -> hypothesis RTTM")
    i.add_argument("checkpoint")
    i.add_argument("input", help=".wav file or feature container")
    i.add_argument("out_rttm")
    i.add_argument("--recording", help="recording id (default: input file stem)")

    c = sub.add_parser("score", help="DER report")
    c.add_argument("ref_rttm")
    c.add_argument("hyp_rttm")
    c.add_argument("--collar", type=float)
    c.add_argument("--skip-overlap", action="store_true")

    a = sub.add_parser("inspect-attention", help="per-head traces and an attention dump")
    a.add_argument("checkpoint")
    a.add_argument("input", help=".wav file or feature container")
    a.add_argument("--layer", type=int, help="1-based layer (default: the VAD-loss layer)")
    a.add_argument("--dump", help="write the layer's H x T x T weights here")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value)
    if args.seed is not None:
        cfg.sim.seed = cfg.train.seed = args.seed
    return cfg


def cmd_simulate(args, cfg: ExperimentConfig) -> int:
    if args.duration is not None:
        cfg.sim.duration_s = args.duration
    if args.overlap is not None:
        cfg.sim.target_overlap = args.overlap
    if args.num_files < 1:
        raise ConfigError("--num-files must be >= 1")
    out = Path(args.out_dir)
    entries, truths = generate_dataset(out, args.num_files, cfg.sim)
    if args.features:
        (out / "feats").mkdir(exist_ok=True)
        for e in entries:
            write_features(out / "feats" / f"{e.recording}.feat", load_features(out / e.audio))
    (out / "config.txt").write_text(cfg.dumps())
    print(format_stats(out.name or "data", dataset_stats(truths)))
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    data = load_dataset(args.manifest, cfg.model.n_speakers)
    if args.stop_after is not None:
        return _train_interruptible(args, cfg, data, out)
    phases = {"base": (1,), "vad": (2,), "both": (1, 2)}[args.phase]
    if args.phase == "vad" and not args.resume:
        raise ConfigError("--phase vad needs --resume pointing at a phase-1 checkpoint")
    trainer = train(data, cfg.model, cfg.train, out, phases=phases, resume_from=args.resume)
    print(f"steps {trainer.state.step} skipped {trainer.state.skipped} max_lr {trainer.state.max_lr!r}")
    return EXIT_OK


def _train_interruptible(args, cfg, data, out) -> int:
    """Run at most --stop-after steps of the requested schedule, then checkpoint."""
    from .model import EendEda

    if args.resume:
        trainer, phase = Trainer.resume(args.resume, data, cfg.train, log_path=out / "train.log", out_dir=out)
    else:
        trainer, phase = Trainer(EendEda(cfg.model, seed=cfg.train.seed), data, cfg.train,
                                 log_path=out / "train.log", out_dir=out), 1
    end1 = cfg.train.epochs_phase1
    budget = args.stop_after
    if phase == 1 and args.phase in ("base", "both"):
        before = trainer.state.step
        trainer.run(1, end1, 0.0, stop_after_steps=budget)
        budget -= trainer.state.step - before
        phase = 2 if trainer.state.epoch >= end1 else 1
    if phase == 2 and args.phase in ("vad", "both") and budget > 0:
        trainer.state.epoch = max(trainer.state.epoch, end1)
        trainer.run(2, end1 + cfg.train.epochs_phase2, cfg.train.alpha, stop_after_steps=budget)
    trainer.save(out / "resume.ckpt", phase)
    print(f"stopped at step {trainer.state.step}; resume from {out / 'resume.ckpt'}")
    return EXIT_OK


def cmd_infer(args, cfg: ExperimentConfig) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    feats = load_features(args.input)
    rec = args.recording or Path(args.input).stem
    y = model.infer(feats)
    segs = decode(y, rec, cfg.score.threshold, cfg.score.median_window)
    write_rttm(args.out_rttm, segs)
    log.info("%s: %d frames, %d segments", rec, feats.shape[0], len(segs))
    return EXIT_OK


def cmd_score(args, cfg: ExperimentConfig) -> int:
    collar = cfg.score.collar if args.collar is None else args.collar
    total, rows = der(read_rttm(args.ref_rttm), read_rttm(args.hyp_rttm), collar,
                      args.skip_overlap or cfg.score.skip_overlap, per_recording=True)
    print(format_report(rows, total))
    return EXIT_OK


def cmd_inspect(args, cfg: ExperimentConfig) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    feats = load_features(args.input)[: model.config.chunk_len]
    layer = (args.layer or model.config.attention_layer + 1)
    if not 1 <= layer <= model.config.n_layers:
        raise ConfigError(f"--layer must be in [1, {model.config.n_layers}]")
    w = model.forward(feats).attention_array()[layer - 1]
    traces = L.head_traces(w)
    ranked = {h for h, _ in L.select_heads_by_trace(w, min(model.config.n_speakers, len(traces)))}
    print(f"layer {layer}, T = {w.shape[-1]}")
    print(f"{'head':>4}{'trace':>14}  selected")
    for h, tr in enumerate(traces):
        print(f"{h:>4}{tr:>14.6f}  {'*' if h in ranked else ''}")
    if args.dump:
        write_array(args.dump, w, layer=layer)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "infer": cmd_infer,
            "score": cmd_score, "inspect-attention": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"eendvad: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, SimulationError) as err:
        print(f"eendvad: config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as err:
        print(f"eendvad: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FrontendError, RttmError, OSError, ValueError, KeyError) as err:
        print(f"eendvad: data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
