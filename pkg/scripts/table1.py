"""Ordinal system comparison on seeded synthetic corpora.

For each seed: generate corpora, pre-train the ASR and DNC halves, fine-tune
the parallel baseline, stage 1 and stage 2, then decode the eval corpus with
ASR 1-best and with oracle transcripts. Writes ``<out>/report.csv`` (one row
per seed, words and variant) and ``<out>/wilcoxon.csv`` (S2 vs S1 per seed).

    python3 scripts/table1.py --seeds 0,1,2 --out results/table1
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import time
from pathlib import Path

from dncasr import harness
from dncasr.config import load_kv
from dncasr.meeting_sim import SimConfig

HERE = Path(__file__).resolve().parent
SYSTEMS = ("parallel-baseline", "dncasr-s1", "dncasr-s2")


def corpora(sim: SimConfig, seed: int, root: Path, sizes: dict) -> dict[str, Path]:
    """Disjoint meeting ranges per role; DNC pre-training uses its own single-speaker stream."""
    cfg = dataclasses.replace(sim, seed=seed)
    single = dataclasses.replace(cfg, utterances_per_segment=(1, 1), seed=seed + 7919)
    plan = {"train": (cfg, sizes["train"], 0), "eval": (cfg, sizes["eval"], 5000),
            "asr": (cfg, sizes["asr"], 10000), "dnc": (single, sizes["dnc"], 0)}
    out = {}
    for name, (c, n, offset) in plan.items():
        path = root / f"{name}.jsonl"
        if not path.exists():
            harness.generate_corpus(c, n, path, offset)
        out[name] = path
    return out


def run_seed(seed: int, args) -> list[dict]:
    root = Path(args.work) / f"seed{seed}"
    root.mkdir(parents=True, exist_ok=True)
    sim = load_kv(args.sim_config, SimConfig)
    sizes = {"train": args.train, "eval": args.eval, "asr": args.asr_meetings, "dnc": args.dnc_meetings}
    paths = corpora(sim, seed, root, sizes)
    spec = harness.ExperimentSpec(variant=",".join(SYSTEMS), train_config=str(args.train_config),
                                  train_corpus=str(paths["train"]), eval_corpus=str(paths["eval"]),
                                  seed=seed, beam_asr=args.beam, beam_dnc=args.beam, workspace=str(root / "ws"))
    asr, dnc = harness.pretrain_checkpoints(spec, str(paths["asr"]), str(paths["dnc"]))
    spec = dataclasses.replace(spec, asr_checkpoint=str(asr), dnc_checkpoint=str(dnc))
    rows = []
    for oracle in (False, True):
        s = dataclasses.replace(spec, oracle_words=oracle)
        words = "oracle" if oracle else "asr"
        out = harness.run_experiment(s, f"seed{seed}-{words}", args.out)
        for r in csv.DictReader(open(out / "summary.csv")):
            rows.append({"seed": seed, "words": words, **r})
    return rows


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", default="results/table1")
    p.add_argument("--work", default="workspace/table1")
    p.add_argument("--sim-config", default=HERE / "configs" / "table1_sim.cfg")
    p.add_argument("--train-config", default=HERE / "configs" / "table1_train.cfg")
    p.add_argument("--train", type=int, default=1000)
    p.add_argument("--eval", type=int, default=10)
    p.add_argument("--asr-meetings", type=int, default=400)
    p.add_argument("--dnc-meetings", type=int, default=3000)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, tests = [], []
    t0 = time.perf_counter()
    for seed in (int(s) for s in args.seeds.split(",")):
        rows += run_seed(seed, args)
        base = out / f"seed{seed}-asr"
        try:
            pval, n_imp, n = harness.wilcoxon_files(base / "dncasr-s1.csv", base / "dncasr-s2.csv")
        except ValueError:  # every meeting tied
            pval, n_imp, n = float("nan"), 0, args.eval
        tests.append({"seed": seed, "p_value": f"{pval:.6g}", "n_improved": n_imp, "n_total": n})
        print(f"seed {seed} done after {time.perf_counter() - t0:.0f}s", flush=True)
    for name, data in (("report.csv", rows), ("wilcoxon.csv", tests)):
        with open(out / name, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(data[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(data)
    print(f"{out / 'report.csv'} ({time.perf_counter() - t0:.0f}s)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
