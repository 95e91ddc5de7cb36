"""Command-line entry point (``dncasr <subcommand>``)."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch

from . import augment, harness, trainer
from .config import ConfigError, load_kv, parse_kv
from .meeting_sim import InfeasibleConfigError, SimConfig
from .model import DNCASR, load_checkpoint, save_checkpoint

log = logging.getLogger("dncasr")


class UsageError(Exception):
    pass


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from None
    if lo > hi:
        raise argparse.ArgumentTypeError("LO must not exceed HI")
    return lo, hi


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _train_cfg(args) -> tuple[trainer.TrainConfig, object]:
    tc, mc = harness.load_train_config(args.train_config)
    return dataclasses.replace(tc, seed=args.seed), mc


def _need(path, what):
    if not path or not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> None:
    config = load_kv(args.config, SimConfig) if args.config else SimConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.single_speaker:
        config = dataclasses.replace(config, utterances_per_segment=(1, 1))
    try:
        config.validate()
    except InfeasibleConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None
    harness.generate_corpus(config, args.num, args.out, args.offset)


def cmd_pretrain_asr(args) -> None:
    tc, mc = _train_cfg(args)
    sim, data, _ = harness.load_features(args.corpus)
    harness.check_compatible(sim, mc)
    torch.manual_seed(args.seed)
    model = DNCASR(mc)
    rep = trainer.pretrain_asr(model, data, tc)
    save_checkpoint(args.out, model, {"phase": "pretrain_asr"})
    if args.log:
        rep.append_csv(args.log)


def cmd_pretrain_dnc(args) -> None:
    tc, mc = _train_cfg(args)
    sim, data, _ = harness.load_features(args.corpus)
    harness.check_compatible(sim, mc)
    torch.manual_seed(args.seed)
    model = DNCASR(mc)
    rep = trainer.pretrain_dnc(model, data, tc)
    save_checkpoint(args.out, model, {"phase": "pretrain_dnc"})
    if args.log:
        rep.append_csv(args.log)


def cmd_finetune(args) -> None:
    tc, _ = _train_cfg(args)
    if args.cda is not None:
        tc = dataclasses.replace(tc, cda_range=args.cda)
    sim, data, _ = harness.load_features(args.corpus)
    if args.init:
        _need(args.init, "checkpoint")
        model, _ = load_checkpoint(args.init)
    else:
        if args.stage == 2 and not args.no_link:
            raise UsageError("stage 2 needs --init (a stage-1 checkpoint)")
        _need(args.asr_ckpt, "ASR checkpoint")
        _need(args.dnc_ckpt, "DNC checkpoint")
        model = harness.merged_model(args.asr_ckpt, args.dnc_ckpt)
    harness.check_compatible(sim, model.cfg)
    if args.no_link:
        rep = trainer.finetune_parallel(model, data, tc)
    elif args.stage == 1:
        rep = trainer.finetune_stage1(model, data, tc)
    else:
        rep = trainer.finetune_stage2(model, data, tc, epochs=args.epochs)
    save_checkpoint(args.out, model, {"phase": rep.phase})
    if args.log:
        rep.append_csv(args.log)


def cmd_infer(args) -> None:
    _need(args.ckpt, "checkpoint")
    model, _ = load_checkpoint(args.ckpt)
    sim, data, _ = harness.load_features(args.corpus)
    harness.check_compatible(sim, model.cfg)
    mode = "parallel" if args.no_link else args.mode
    hyps = harness.decode_corpus(model, data, mode, args.beam_asr, args.beam_dnc, args.oracle_words)
    harness.write_hypotheses(args.out, hyps)


def cmd_score(args) -> None:
    reports = harness.score_files(args.ref, args.hyp, args.collar)
    text = harness.score_csv(reports)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_wilcoxon(args) -> None:
    p, n_improved, n_total = harness.wilcoxon_files(args.baseline, args.system, args.metric)
    sys.stdout.write(f"p_value,n_improved,n_total\n{p:.6g},{n_improved},{n_total}\n")


def cmd_cda_angles(args) -> None:
    lines = ["scale,mean_abs_angle_deg"]
    for i, c in enumerate(args.scales):
        a = augment.mean_abs_rotation_angle(args.dim, c, args.samples, seed=args.seed + i)
        lines.append(f"{c:g},{a:.4f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_run_experiment(args) -> None:
    _need(args.spec, "experiment spec")
    text = Path(args.spec).read_text()
    spec = parse_kv(text, harness.ExperimentSpec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    spec.variants()
    digest = harness.digest_of(text, spec.seed)
    out = harness.run_experiment(spec, digest, args.results)
    print(out / "summary.csv")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dncasr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(fn=fn)
        return sp

    g = add("gen-data", cmd_gen_data, "generate a synthetic meeting corpus")
    g.add_argument("--config", help="simulator key=value file")
    g.add_argument("--num", type=int, required=True)
    g.add_argument("--offset", type=int, default=0, help="first meeting index")
    g.add_argument("--single-speaker", action="store_true", help="one turn per segment (DNC pre-training data)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)

    for name, fn in (("pretrain-asr", cmd_pretrain_asr), ("pretrain-dnc", cmd_pretrain_dnc)):
        sp = add(name, fn, f"{name.split('-')[1].upper()} pre-training")
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--train-config")
        sp.add_argument("--out", required=True)
        sp.add_argument("--log", help="append per-epoch losses to this CSV")
        sp.add_argument("--seed", type=int, default=0)

    f = add("finetune", cmd_finetune, "stage-1 / stage-2 / no-link fine-tuning")
    f.add_argument("--stage", type=int, choices=(1, 2), required=True)
    f.add_argument("--corpus", required=True)
    f.add_argument("--train-config")
    f.add_argument("--asr-ckpt")
    f.add_argument("--dnc-ckpt")
    f.add_argument("--init", help="start from this full checkpoint")
    f.add_argument("--cda", type=_range, metavar="LO:HI")
    f.add_argument("--no-link", action="store_true")
    f.add_argument("--epochs", type=int)
    f.add_argument("--out", required=True)
    f.add_argument("--log")
    f.add_argument("--seed", type=int, default=0)

    i = add("infer", cmd_infer, "decode a corpus to an attributed transcript file")
    i.add_argument("--mode", choices=("s1", "s2"), default="s2")
    i.add_argument("--no-link", action="store_true")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--corpus", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--beam-asr", type=int, default=4)
    i.add_argument("--beam-dnc", type=int, default=4)
    i.add_argument("--oracle-words", action="store_true")
    i.add_argument("--seed", type=int, default=0)

    s = add("score", cmd_score, "score hypotheses against a reference transcript file")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--collar", type=float, default=0.25)
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)

    w = add("wilcoxon", cmd_wilcoxon, "one-sided signed-rank test between two score CSVs")
    w.add_argument("--baseline", required=True)
    w.add_argument("--system", required=True)
    w.add_argument("--metric", default="cpwer", choices=("wer", "cpwer", "cpwer_multi", "der"))
    w.add_argument("--seed", type=int, default=0)

    c = add("cda-angles", cmd_cda_angles, "mean rotation angle of constrained random rotations")
    c.add_argument("--dim", type=int, default=32)
    c.add_argument("--scales", type=_floats, default=[0.0, 1.0, 10.0, 100.0])
    c.add_argument("--samples", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")

    r = add("run-experiment", cmd_run_experiment, "train, decode and score the listed variants")
    r.add_argument("--spec", required=True)
    r.add_argument("--results", default="results")
    r.add_argument("--seed", type=int, default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except (UsageError, ConfigError, InfeasibleConfigError) as e:
        print(f"dncasr {args.command}: error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"dncasr {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
