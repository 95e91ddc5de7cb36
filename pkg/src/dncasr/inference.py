"""Beam-search ASR, DNC speaker decoding and transcript assembly."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import vocab
from .data import MeetingData
from .meeting_sim import is_prefix_closed, relabel_first_appearance
from .model import DNCASR, build_mask_l, build_mask_s
from .trainer import teacher_forced_w_ca

log = logging.getLogger(__name__)


@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool = False

    def score(self) -> float:
        return self.log_prob / max(1, len(self.tokens))


def beam_search(
    step_fn: Callable[[list[tuple[int, ...]]], np.ndarray],
    beam_width: int,
    max_len: int,
    eos: int | None = None,
    allowed: Callable[[tuple[int, ...], int], bool] | None = None,
) -> list[BeamHypothesis]:
    """Generic left-to-right beam search with length-normalised ranking.

    ``step_fn`` maps a list of prefixes to an ``(n, V)`` array of next-token
    log-probabilities. Hypotheses finish at ``eos`` (if given) or at
    ``max_len``; the latter are returned with ``finished=False`` when an
    ``eos`` was expected.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    live = [BeamHypothesis((), 0.0)]
    done: list[BeamHypothesis] = []
    for _ in range(max_len):
        if not live:
            break
        lp = np.asarray(step_fn([h.tokens for h in live]), dtype=np.float64)
        cands = []
        for h, row in zip(live, lp):
            for tok in np.argsort(-row, kind="stable"):
                tok = int(tok)
                if allowed is not None and not allowed(h.tokens, tok):
                    continue
                cands.append(BeamHypothesis(h.tokens + (tok,), h.log_prob + float(row[tok])))
        cands.sort(key=lambda h: -h.log_prob)
        live = []
        for c in cands[:beam_width]:
            if eos is not None and c.tokens[-1] == eos:
                c.finished = True
                done.append(c)
            else:
                live.append(c)
        if eos is not None and len(done) >= beam_width and live:
            best_done = max(d.score() for d in done)
            # log-probs only fall, so an unfinished prefix cannot catch up once
            # its unnormalised score is already below every finished one at max_len
            if all(h.log_prob / max_len <= best_done for h in live):
                break
    for h in live:
        h.finished = eos is None
    out = done + live
    out.sort(key=lambda h: -h.score())
    return out


# ---------------------------------------------------------------------------
# ASR


@dataclass
class ASRResult:
    hypotheses: list[BeamHypothesis]
    tokens: tuple[int, ...]  # 1-best, always terminated by <eos>
    truncated: bool
    w_ca: list[torch.Tensor]


@torch.no_grad()
def beam_search_asr(model: DNCASR, frames: np.ndarray, beam_width: int = 4, max_len: int = 64) -> ASRResult:
    model.eval()
    dt = next(model.parameters()).dtype
    e_w = model.wav_encoder(torch.as_tensor(frames, dtype=dt))

    def step(prefixes):
        inp = torch.tensor([(vocab.BOS,) + p for p in prefixes])
        logits, _ = model.asr_decoder(e_w[None].expand(len(prefixes), -1, -1), inp)
        return torch.log_softmax(logits[:, -1].double(), -1).numpy()

    hyps = beam_search(step, beam_width, max_len, eos=vocab.EOS,
                       allowed=lambda p, t: t != vocab.BOS)
    best = hyps[0]
    tokens = best.tokens
    truncated = not best.finished
    if truncated:
        log.warning("ASR hypothesis hit max_len=%d without <eos>", max_len)
        tokens = tokens + (vocab.EOS,)
    w_ca = teacher_forced_w_ca(model, frames, tokens)
    return ASRResult(hyps, tokens, truncated, w_ca)


def turn_spans(tokens: Sequence[int]) -> list[tuple[int, int]]:
    """Split a serialized sequence into per-turn spans; <sc>/<eos> stay on the left turn."""
    spans = []
    start = 0
    for i, t in enumerate(tokens):
        if t in (vocab.SC, vocab.EOS):
            spans.append((start, i + 1))
            start = i + 1
    if start < len(tokens):
        spans.append((start, len(tokens)))
    return spans


def count_turns(tokens: Sequence[int]) -> int:
    return len(turn_spans(tokens))


# ---------------------------------------------------------------------------
# DNC decoding


def _prefix_ok(context: Sequence[int], k_max: int):
    def allowed(prefix, k):
        seen = max(list(context) + list(prefix), default=-1)
        return k <= seen + 1 and k < k_max
    return allowed


def _dnc_step(model, e_s, mask_s_full, w_cas, mask_l_full, context):
    sbos = model.dnc_decoder.sbos

    def step(prefixes):
        seq = [[sbos] + list(context) + list(p) for p in prefixes]
        inp = torch.tensor(seq)
        t = inp.shape[1]
        b = len(prefixes)
        ms = mask_s_full[:t][None].expand(b, -1, -1)
        ml = None if mask_l_full is None else mask_l_full[:t][None].expand(b, -1, -1)
        w = None if w_cas is None else [x[None].expand(b, -1, -1) for x in w_cas]
        logits = model.dnc_decoder(e_s[None].expand(b, -1, -1), inp, ms, w, ml)
        return torch.log_softmax(logits[:, -1].double(), -1).numpy()

    return step


def _centres(centres, n):
    return None if centres is None else torch.as_tensor(centres[:n], dtype=torch.float64)


@torch.no_grad()
def decode_speakers_stage1(
    model: DNCASR,
    windows: np.ndarray,
    segment_spans: Sequence[tuple[int, int]],
    segment_tokens: Sequence[Sequence[int]],
    segment_w_ca: Sequence[list[torch.Tensor]],
    beam_width: int = 4,
    centres: np.ndarray | None = None,
) -> list[list[int]]:
    """Segment-by-segment decoding; earlier 1-best labels form the context."""
    model.eval()
    dt = next(model.parameters()).dtype
    k_max = model.cfg.max_speakers
    context: list[int] = []
    out: list[list[int]] = []
    pos_seg: list[int] = []
    for c, (toks, w_ca) in enumerate(zip(segment_tokens, segment_w_ca)):
        spans = turn_spans(toks)
        n = len(spans)
        if n == 0:
            log.warning("segment %d has no turns; skipped", c)
            out.append([])
            continue
        w_end = segment_spans[c][1]
        e_s = model.encode_speakers(torch.as_tensor(windows[:w_end], dtype=dt), None, _centres(centres, w_end))
        ps = pos_seg + [c] * n
        mask_s = build_mask_s(segment_spans[: c + 1], ps, w_end)
        mask_l = build_mask_l(spans, "stage1", context_len=len(context), num_tokens=len(toks))
        step = _dnc_step(model, e_s, mask_s, w_ca, mask_l, context)
        best = beam_search(step, beam_width, n, allowed=_prefix_ok(context, k_max))[0]
        labels = list(best.tokens)
        out.append(labels)
        context += labels
        pos_seg = ps
    return _post_filter(out)


@torch.no_grad()
def decode_speakers_meeting(
    model: DNCASR,
    windows: np.ndarray,
    segment_spans: Sequence[tuple[int, int]],
    segment_tokens: Sequence[Sequence[int]],
    segment_w_ca: Sequence[list[torch.Tensor]] | None,
    beam_width: int = 4,
    centres: np.ndarray | None = None,
) -> list[list[int]]:
    """Single left-to-right pass over every speaker position of the meeting.

    With ``segment_w_ca`` this is stage-2 decoding; with None it is the no-link
    baseline, which only uses the turn counts.
    """
    model.eval()
    dt = next(model.parameters()).dtype
    counts = [count_turns(t) for t in segment_tokens]
    for c, n in enumerate(counts):
        if n == 0:
            log.warning("segment %d has no turns; skipped", c)
    pos_seg = [c for c, n in enumerate(counts) for _ in range(n)]
    if not pos_seg:
        return [[] for _ in counts]
    e_s = model.encode_speakers(torch.as_tensor(windows, dtype=dt), None, _centres(centres, windows.shape[0]))
    mask_s = build_mask_s(segment_spans, pos_seg, windows.shape[0])
    w_cas = mask_l = None
    if segment_w_ca is not None:
        nb = len(segment_w_ca[0])
        w_cas = [torch.cat([w[n] for w in segment_w_ca], 0) for n in range(nb)]
        spans, off = [], 0
        for toks in segment_tokens:
            spans += [(a + off, b + off) for a, b in turn_spans(toks)]
            off += len(toks)
        mask_l = build_mask_l(spans, "stage2", num_tokens=off)
    step = _dnc_step(model, e_s, mask_s, w_cas, mask_l, [])
    best = beam_search(step, beam_width, len(pos_seg), allowed=_prefix_ok([], model.cfg.max_speakers))[0]
    flat = list(best.tokens)
    out, i = [], 0
    for n in counts:
        out.append(flat[i:i + n])
        i += n
    return _post_filter(out)


def decode_speakers_stage2(model, windows, segment_spans, segment_tokens, segment_w_ca, beam_width=4, centres=None):
    return decode_speakers_meeting(model, windows, segment_spans, segment_tokens, segment_w_ca, beam_width, centres)


def _post_filter(per_segment: list[list[int]]) -> list[list[int]]:
    flat = [k for seg in per_segment for k in seg]
    if is_prefix_closed(flat):
        return per_segment
    fixed = relabel_first_appearance(flat)
    out, i = [], 0
    for seg in per_segment:
        out.append(fixed[i:i + len(seg)])
        i += len(seg)
    return out


# ---------------------------------------------------------------------------
# assembly and output


@dataclass
class AttributedTranscript:
    meeting_id: str
    segments: list[list[tuple[int, list[int]]]]  # per segment: (speaker index, word ids)


def assemble(asr_tokens: Sequence[Sequence[int]], speaker_indices: Sequence[Sequence[int]], meeting_id: str = "") -> AttributedTranscript:
    if len(asr_tokens) != len(speaker_indices):
        raise ValueError("segment count mismatch")
    segs = []
    for toks, idx in zip(asr_tokens, speaker_indices):
        spans = turn_spans(toks)
        if len(spans) != len(idx):
            raise ValueError(f"{len(spans)} turns but {len(idx)} speaker indices")
        turns = []
        for (a, b), k in zip(spans, idx):
            words = [vocab.id_to_word(t) for t in toks[a:b] if t >= vocab.NUM_SPECIAL]
            turns.append((int(k), words))
        segs.append(turns)
    return AttributedTranscript(meeting_id, segs)


def transcript_lines(tr: AttributedTranscript, timings: Sequence[Sequence[tuple[float, float]]] | None = None) -> list[str]:
    lines = []
    for s, turns in enumerate(tr.segments):
        for t, (k, words) in enumerate(turns):
            fields = [tr.meeting_id, str(s), str(t), f"spk{k}", " ".join(f"w{w}" for w in words)]
            if timings is not None:
                a, b = timings[s][t]
                fields += [repr(float(a)), repr(float(b))]
            lines.append("\t".join(fields))
    return lines


def write_transcripts(path: str | Path, transcripts: Sequence[AttributedTranscript]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for tr in transcripts:
            for line in transcript_lines(tr):
                f.write(line + "\n")


# ---------------------------------------------------------------------------
# pipelines


@dataclass
class MeetingDecode:
    transcript: AttributedTranscript
    asr_tokens: list[tuple[int, ...]]


def decode_meeting(
    model: DNCASR,
    md: MeetingData,
    mode: str,
    beam_asr: int = 4,
    beam_dnc: int = 4,
    oracle_words: bool = False,
    max_len: int = 64,
) -> MeetingDecode:
    """Run one meeting through ASR then DNC.

    ``mode`` is ``s1``, ``s2`` or ``parallel``. With ``oracle_words`` the
    reference serialized tokens replace the ASR 1-best.
    """
    toks, w_ca = [], []
    for frames, ref in zip(md.frames, md.transcripts):
        if oracle_words:
            t = ref.tokens
            w = teacher_forced_w_ca(model, frames, t)
        else:
            r = beam_search_asr(model, frames, beam_asr, max_len)
            t, w = r.tokens, r.w_ca
        toks.append(tuple(t))
        w_ca.append(w)
    emb = md.embeddings
    if mode == "s1":
        labels = decode_speakers_stage1(model, emb.windows, emb.segment_spans, toks, w_ca, beam_dnc, emb.centres)
    elif mode == "s2":
        labels = decode_speakers_stage2(model, emb.windows, emb.segment_spans, toks, w_ca, beam_dnc, emb.centres)
    elif mode == "parallel":
        labels = decode_speakers_meeting(model, emb.windows, emb.segment_spans, toks, None, beam_dnc, emb.centres)
    else:
        raise ValueError(f"unknown decode mode {mode!r}")
    return MeetingDecode(assemble(toks, labels, md.meeting_id), toks)
