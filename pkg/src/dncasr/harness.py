"""Experiment orchestration: corpora, checkpoints, variants, scoring files."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import trainer, vocab
from .config import ConfigError, load_kv, save_kv
from .data import MeetingData, featurize_corpus
from .inference import decode_meeting, write_transcripts
from .meeting_sim import FrameCodebook, Meeting, SimConfig, gen_corpus, read_corpus, write_corpus
from .metrics import cpwer, cpwer_multi, der, edit_counts, speaker_streams, wilcoxon_signed_rank
from .model import DNCASR, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

VARIANTS = ("parallel-baseline", "dncasr-s1", "dncasr-s2", "dncasr-s2-cda")


# ---------------------------------------------------------------------------
# corpus files

def sim_cfg_path(corpus: str | Path) -> Path:
    return Path(str(corpus) + ".sim.cfg")


def ref_path(corpus: str | Path) -> Path:
    return Path(str(corpus) + ".ref.tsv")


def reference_lines(meeting: Meeting) -> list[str]:
    lines = []
    for s, seg in enumerate(meeting.segments):
        for t, turn in enumerate(seg.turns):
            lines.append("\t".join([
                meeting.meeting_id, str(s), str(t), f"spk{turn.speaker}",
                " ".join(f"w{w}" for w in turn.tokens), repr(turn.start), repr(turn.end),
            ]))
    return lines


def write_reference(path: str | Path, meetings: Sequence[Meeting]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for m in meetings:
            for line in reference_lines(m):
                f.write(line + "\n")


def generate_corpus(config: SimConfig, num: int, out: str | Path, offset: int = 0) -> list[Meeting]:
    meetings = gen_corpus(config, num, offset)
    write_corpus(out, meetings)
    save_kv(sim_cfg_path(out), config)
    write_reference(ref_path(out), meetings)
    return meetings


def load_corpus(path: str | Path) -> tuple[SimConfig, list[Meeting]]:
    cfg_file = sim_cfg_path(path)
    if not cfg_file.exists():
        raise FileNotFoundError(f"missing simulator config {cfg_file}")
    config = load_kv(cfg_file, SimConfig)
    return config, read_corpus(path, config)


def check_compatible(sim: SimConfig, mc: ModelConfig) -> None:
    """Model and corpus must agree on feature sizes, vocabulary and time axis."""
    pairs = [("embed_dim", sim.embed_dim, mc.embed_dim), ("frame_dim", sim.frame_dim, mc.frame_dim),
             ("frame_rate", sim.frame_rate, mc.frame_rate),
             ("vocab", vocab.model_vocab_size(sim.vocab_size), mc.vocab)]
    bad = [f"{n}: corpus {a} vs model {b}" for n, a, b in pairs if a != b]
    if sim.num_speakers > mc.max_speakers:
        bad.append(f"num_speakers {sim.num_speakers} exceeds max_speakers {mc.max_speakers}")
    if bad:
        raise ConfigError("corpus/model mismatch: " + "; ".join(bad))


def load_features(path: str | Path) -> tuple[SimConfig, list[MeetingData], list[Meeting]]:
    config, meetings = load_corpus(path)
    return config, featurize_corpus(meetings, FrameCodebook.from_config(config)), meetings


# ---------------------------------------------------------------------------
# transcript files


@dataclass
class TurnRecord:
    speaker: str
    words: list[str]
    start: float | None = None
    end: float | None = None


def read_transcripts(path: str | Path) -> dict[str, list[list[TurnRecord]]]:
    """Parse the per-turn TSV (optionally with start/end columns)."""
    out: dict[str, dict[int, dict[int, TurnRecord]]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (5, 7):
                raise ValueError(f"{path}:{lineno}: expected 5 or 7 tab-separated fields")
            mid, s, t, spk, words = parts[:5]
            if not spk.startswith("spk"):
                raise ValueError(f"{path}:{lineno}: speaker field must start with 'spk'")
            rec = TurnRecord(spk[3:], words.split())
            if len(parts) == 7:
                rec.start, rec.end = float(parts[5]), float(parts[6])
            out.setdefault(mid, {}).setdefault(int(s), {})[int(t)] = rec
    result = {}
    for mid, segs in out.items():
        result[mid] = [[segs[s][t] for t in sorted(segs[s])] for s in sorted(segs)]
    return result


write_hypotheses = write_transcripts


# ---------------------------------------------------------------------------
# scoring


@dataclass
class ScoreReport:
    meeting_id: str
    wer: float
    cpwer: float
    cpwer_multi: float
    der: float
    word_errors: int = 0
    ref_words: int = 0
    cp_errors: int = 0
    cpm_errors: int = 0
    cpm_words: int = 0
    der_error: float = 0.0
    der_scored: float = 0.0
    sub: int = 0
    ins: int = 0
    dele: int = 0
    missed: float = 0.0
    false_alarm: float = 0.0
    confusion: float = 0.0


def _hyp_times(ref_seg: list[TurnRecord], hyp_seg: list[TurnRecord]) -> list[tuple[float, float]]:
    """Timings for hypothesis turns inside an oracle segment.

    Matching turn counts reuse the reference turn times; otherwise the segment
    span is split in proportion to ``len(words) + 1``.
    """
    if all(h.start is not None for h in hyp_seg):
        return [(h.start, h.end) for h in hyp_seg]
    if len(hyp_seg) == len(ref_seg):
        return [(r.start, r.end) for r in ref_seg]
    lo = min(r.start for r in ref_seg)
    hi = max(r.end for r in ref_seg)
    w = np.array([len(h.words) + 1 for h in hyp_seg], dtype=np.float64)
    edges = lo + (hi - lo) * np.concatenate([[0.0], np.cumsum(w) / w.sum()])
    return [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])]


def score_meeting(meeting_id: str, ref: list[list[TurnRecord]], hyp: list[list[TurnRecord]], collar: float = 0.25) -> ScoreReport:
    if len(hyp) < len(ref):
        hyp = hyp + [[] for _ in range(len(ref) - len(hyp))]
    counts = None
    n_ref = 0
    for rs, hs in zip(ref, hyp):
        r = [w for t in rs for w in t.words]
        h = [w for t in hs for w in t.words]
        e = edit_counts(r, h)
        counts = e if counts is None else counts + e
        n_ref += len(r)
    ref_segs = [[(t.speaker, t.words) for t in seg] for seg in ref]
    hyp_segs = [[(t.speaker, t.words) for t in seg] for seg in hyp]
    cp = cpwer(speaker_streams(ref_segs), speaker_streams(hyp_segs))
    cpm = cpwer_multi(ref_segs, hyp_segs)
    ref_turns = [(t.speaker, t.start, t.end) for seg in ref for t in seg]
    hyp_turns = []
    for rs, hs in zip(ref, hyp):
        if hs:
            for t, (a, b) in zip(hs, _hyp_times(rs, hs)):
                hyp_turns.append((t.speaker, a, b))
    d = der(ref_turns, hyp_turns, collar)
    return ScoreReport(
        meeting_id,
        wer=counts.errors / n_ref,
        cpwer=cp.cpwer,
        cpwer_multi=cpm.cpwer if cpm is not None else math.nan,
        der=d.der,
        word_errors=counts.errors, ref_words=n_ref,
        cp_errors=cp.errors,
        cpm_errors=cpm.errors if cpm else 0, cpm_words=cpm.ref_words if cpm else 0,
        der_error=d.missed + d.false_alarm + d.confusion, der_scored=d.scored,
        sub=counts.sub, ins=counts.ins, dele=counts.dele,
        missed=d.missed, false_alarm=d.false_alarm, confusion=d.confusion,
    )


def pooled(reports: Sequence[ScoreReport], name: str = "ALL") -> ScoreReport:
    words = sum(r.ref_words for r in reports)
    cpm_words = sum(r.cpm_words for r in reports)
    scored = sum(r.der_scored for r in reports)
    return ScoreReport(
        name,
        wer=sum(r.word_errors for r in reports) / words,
        cpwer=sum(r.cp_errors for r in reports) / words,
        cpwer_multi=(sum(r.cpm_errors for r in reports) / cpm_words) if cpm_words else math.nan,
        der=sum(r.der_error for r in reports) / scored,
        word_errors=sum(r.word_errors for r in reports), ref_words=words,
        cp_errors=sum(r.cp_errors for r in reports),
        cpm_errors=sum(r.cpm_errors for r in reports), cpm_words=cpm_words,
        der_error=sum(r.der_error for r in reports), der_scored=scored,
    )


def score_files(ref_file, hyp_file, collar: float = 0.25) -> list[ScoreReport]:
    ref = read_transcripts(ref_file)
    hyp = read_transcripts(hyp_file)
    reports = []
    for mid in ref:
        reports.append(score_meeting(mid, ref[mid], hyp.get(mid, []), collar))
    return reports


def _num(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def score_csv(reports: Sequence[ScoreReport], with_pooled: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["meeting_id", "wer", "cpwer", "cpwer_multi", "der"])
    rows = list(reports)
    if with_pooled and reports:
        rows.append(pooled(reports))
    for r in rows:
        w.writerow([r.meeting_id, _num(r.wer), _num(r.cpwer), _num(r.cpwer_multi), _num(r.der)])
    if with_pooled and reports:
        # unweighted per-meeting averages alongside the pooled row
        multi = [r.cpwer_multi for r in reports if not math.isnan(r.cpwer_multi)]
        w.writerow(["MEAN", _num(float(np.mean([r.wer for r in reports]))), _num(float(np.mean([r.cpwer for r in reports]))),
                    _num(float(np.mean(multi)) if multi else math.nan), _num(float(np.mean([r.der for r in reports])))])
    return buf.getvalue()


def read_score_csv(path) -> dict[str, dict[str, float]]:
    with open(path) as f:
        return {row["meeting_id"]: {k: float(v) for k, v in row.items() if k != "meeting_id"} for row in csv.DictReader(f)}


def wilcoxon_files(baseline_csv, system_csv, metric: str = "cpwer") -> tuple[float, int, int]:
    """Paired test that ``system`` improves on ``baseline`` per meeting."""
    a = read_score_csv(baseline_csv)
    b = read_score_csv(system_csv)
    ids = [m for m in a if m not in ("ALL", "MEAN") and m in b]
    diffs = [a[m][metric] - b[m][metric] for m in ids]
    res = wilcoxon_signed_rank(diffs)
    return res.p_value, res.n_improved, len(ids)


# ---------------------------------------------------------------------------
# checkpoints and variants


def digest_of(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, (str, Path)) and Path(p).is_file():
            h.update(Path(p).read_bytes())
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


def merged_model(asr_ckpt: str | Path, dnc_ckpt: str | Path) -> DNCASR:
    for p in (asr_ckpt, dnc_ckpt):
        if not p or not Path(p).exists():
            raise FileNotFoundError(f"missing checkpoint {p!r}")
    asr, _ = load_checkpoint(asr_ckpt)
    dnc, _ = load_checkpoint(dnc_ckpt)
    asr.spk_encoder.load_state_dict(dnc.spk_encoder.state_dict())
    asr.dnc_decoder.load_state_dict(dnc.dnc_decoder.state_dict())
    return asr


@dataclass
class ExperimentSpec:
    variant: str = "dncasr-s2"
    train_config: str = ""
    train_corpus: str = ""
    eval_corpus: str = ""
    asr_checkpoint: str = ""
    dnc_checkpoint: str = ""
    seed: int = 0
    beam_asr: int = 4
    beam_dnc: int = 4
    oracle_words: bool = False
    cda_epochs: int = 3
    workspace: str = "workspace"

    def variants(self) -> list[str]:
        vs = [v.strip() for v in self.variant.split(",") if v.strip()]
        for v in vs:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        return vs


def load_train_config(path: str | Path | None) -> tuple[trainer.TrainConfig, ModelConfig]:
    if not path:
        return trainer.TrainConfig(), ModelConfig()
    return load_kv(path, trainer.TrainConfig, ModelConfig)


def _with_seed(tc: trainer.TrainConfig, seed: int) -> trainer.TrainConfig:
    return dataclasses.replace(tc, seed=seed)


def finetuned_checkpoint(spec: ExperimentSpec, variant: str, train_data: list[MeetingData]) -> Path:
    """Train (or reuse) the fine-tuned checkpoint a variant needs."""
    tc, _ = load_train_config(spec.train_config)
    tc = _with_seed(tc, spec.seed)
    ws = Path(spec.workspace) / "checkpoints"
    ws.mkdir(parents=True, exist_ok=True)
    base = (spec.asr_checkpoint, spec.dnc_checkpoint, spec.train_corpus, spec.train_config, spec.seed)
    logfile = Path(spec.workspace) / "train_log.csv"

    def cached(name, parts, build):
        path = ws / f"{name}-{digest_of(*parts)}.ckpt"
        if not path.exists():
            model, rep = build()
            save_checkpoint(path, model, {"phase": name})
            rep.checkpoint = str(path)
            rep.append_csv(logfile)
        return path

    def s1():
        model = merged_model(spec.asr_checkpoint, spec.dnc_checkpoint)
        rep = trainer.finetune_stage1(model, train_data, tc)
        return model, rep

    def par():
        model = merged_model(spec.asr_checkpoint, spec.dnc_checkpoint)
        return model, trainer.finetune_parallel(model, train_data, tc)

    if variant == "parallel-baseline":
        return cached("parallel", base, par)
    s1_path = cached("s1", base, s1)
    if variant == "dncasr-s1":
        return s1_path

    def s2():
        model, _ = load_checkpoint(s1_path)
        return model, trainer.finetune_stage2(model, train_data, tc)

    s2_path = cached("s2", base + ("s2",), s2)
    if variant == "dncasr-s2":
        return s2_path

    def s2cda():
        model, _ = load_checkpoint(s2_path)
        cda_tc = dataclasses.replace(tc, cda_range=(0.0, 10.0))
        return model, trainer.finetune_stage2(model, train_data, cda_tc, epochs=spec.cda_epochs)

    return cached("s2cda", base + ("s2", "cda", spec.cda_epochs), s2cda)


DECODE_MODE = {"parallel-baseline": "parallel", "dncasr-s1": "s1", "dncasr-s2": "s2", "dncasr-s2-cda": "s2"}


def decode_corpus(model: DNCASR, data: Sequence[MeetingData], mode: str, beam_asr=4, beam_dnc=4, oracle_words=False):
    torch.manual_seed(0)
    return [decode_meeting(model, md, mode, beam_asr, beam_dnc, oracle_words).transcript for md in data]


def run_variant(spec: ExperimentSpec, variant: str | None = None, data_cache: dict | None = None) -> list[ScoreReport]:
    variant = variant or spec.variants()[0]
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    for p in (spec.asr_checkpoint, spec.dnc_checkpoint):
        if not p or not Path(p).exists():
            raise FileNotFoundError(f"variant {variant} needs checkpoint {p!r}")
    cache = data_cache if data_cache is not None else {}
    for key, path in (("train", spec.train_corpus), ("eval", spec.eval_corpus)):
        if key not in cache:
            sim, data, _ = load_features(path)
            cache[key] = data
            cache[key + "_sim"] = sim
    check_compatible(cache["train_sim"], load_checkpoint(spec.asr_checkpoint)[0].cfg)
    ckpt = finetuned_checkpoint(spec, variant, cache["train"])
    model, _ = load_checkpoint(ckpt)
    check_compatible(cache["eval_sim"], model.cfg)
    hyps = decode_corpus(model, cache["eval"], DECODE_MODE[variant], spec.beam_asr, spec.beam_dnc, spec.oracle_words)
    out_dir = Path(spec.workspace) / "decodes"
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = f"{variant}-{'oracle' if spec.oracle_words else 'asr'}-{digest_of(str(ckpt), spec.eval_corpus)}"
    hyp_file = out_dir / f"{tag}.tsv"
    write_hypotheses(hyp_file, hyps)
    reports = score_files(ref_path(spec.eval_corpus), hyp_file)
    (out_dir / f"{tag}.csv").write_text(score_csv(reports))
    return reports


def pretrain_checkpoints(spec: ExperimentSpec, asr_corpus: str, dnc_corpus: str) -> tuple[Path, Path]:
    tc, mc = load_train_config(spec.train_config)
    tc = _with_seed(tc, spec.seed)
    ws = Path(spec.workspace) / "checkpoints"
    ws.mkdir(parents=True, exist_ok=True)
    logfile = Path(spec.workspace) / "train_log.csv"
    asr_path = ws / f"pretrain-asr-{digest_of(asr_corpus, spec.train_config, spec.seed)}.ckpt"
    if not asr_path.exists():
        torch.manual_seed(spec.seed)
        model = DNCASR(mc)
        rep = trainer.pretrain_asr(model, load_features(asr_corpus)[1], tc)
        save_checkpoint(asr_path, model, {"phase": "pretrain_asr"})
        rep.append_csv(logfile)
    dnc_path = ws / f"pretrain-dnc-{digest_of(dnc_corpus, spec.train_config, spec.seed)}.ckpt"
    if not dnc_path.exists():
        torch.manual_seed(spec.seed + 1)
        model = DNCASR(mc)
        rep = trainer.pretrain_dnc(model, load_features(dnc_corpus)[1], tc)
        save_checkpoint(dnc_path, model, {"phase": "pretrain_dnc"})
        rep.append_csv(logfile)
    return asr_path, dnc_path


def run_experiment(spec: ExperimentSpec, spec_digest: str, results_root: str | Path = "results") -> Path:
    """Run every listed variant and write ``results/<digest>/summary.csv``."""
    out = Path(results_root) / spec_digest
    out.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    rows = []
    per_variant = {}
    for v in spec.variants():
        reps = run_variant(spec, v, cache)
        per_variant[v] = reps
        (out / f"{v}.csv").write_text(score_csv(reps))
        p = pooled(reps, v)
        rows.append(p)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "wer", "cpwer", "cpwer_multi", "der"])
    for r in rows:
        w.writerow([r.meeting_id, _num(r.wer), _num(r.cpwer), _num(r.cpwer_multi), _num(r.der)])
    (out / "summary.csv").write_text(buf.getvalue())
    return out
