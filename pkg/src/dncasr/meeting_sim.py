"""Synthetic meeting generator and the data views derived from it.

A meeting is a sequence of oracle VAD segments. Each segment holds 1..k
turns from alternating speakers, with bounded overlap between adjacent turns.
Speaker identity lives only in per-speaker unit latents, which colour both the
window-level speaker embeddings and the frame features; words are drawn from
one shared vocabulary so the lexicon carries no speaker information.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import vocab

log = logging.getLogger(__name__)


class InfeasibleConfigError(ValueError):
    """The requested meeting structure cannot be realised."""


@dataclass(frozen=True)
class SimConfig:
    num_speakers: int = 4
    num_segments: int = 6
    utterances_per_segment: tuple[int, int] = (1, 5)
    max_pairwise_overlap: float = 0.25
    target_meeting_overlap: float = 0.05
    vocab_size: int = 50
    tokens_per_utterance: tuple[int, int] = (3, 6)
    embed_dim: int = 32
    frame_dim: int = 32
    frames_per_token: int = 3
    frame_rate: float = 10.0
    window_len: float = 1.5
    window_stride: float = 0.5
    noise_sigma: float = 0.05
    frame_noise_sigma: float = 0.1
    speaker_alpha: float = 1.0
    segment_gap: tuple[float, float] = (0.5, 2.0)
    seed: int = 0

    def validate(self) -> None:
        if self.num_speakers < 1:
            raise ValueError("num_speakers must be >= 1")
        if self.num_segments < 1:
            raise ValueError("num_segments must be >= 1")
        for name in ("utterances_per_segment", "tokens_per_utterance", "segment_gap"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is an empty range")
        if self.utterances_per_segment[0] < 1 or self.tokens_per_utterance[0] < 1:
            raise ValueError("turn and token counts must be >= 1")
        if not 0.0 <= self.max_pairwise_overlap < 1.0:
            raise ValueError("max_pairwise_overlap must lie in [0, 1)")
        if self.window_stride > self.window_len or self.window_stride <= 0:
            raise ValueError("need 0 < window_stride <= window_len")
        if self.embed_dim < 2 or self.frame_dim < 1:
            raise ValueError("bad feature dimensions")
        if self.num_speakers == 1 and self.utterances_per_segment[0] >= 2:
            raise InfeasibleConfigError(
                "one speaker cannot fill segments that need >= 2 alternating turns"
            )

    @property
    def token_duration(self) -> float:
        return self.frames_per_token / self.frame_rate

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        kw = dict(d)
        for name in ("utterances_per_segment", "tokens_per_utterance", "segment_gap"):
            if name in kw:
                kw[name] = tuple(kw[name])
        return cls(**kw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class SpeakerProfile:
    global_id: str
    latent: np.ndarray = field(compare=False)


@dataclass(frozen=True)
class Turn:
    speaker: str
    tokens: tuple[int, ...]
    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"turn needs start < end, got {self.start}, {self.end}")
        if not self.tokens:
            raise ValueError("turn needs at least one token")


@dataclass(frozen=True)
class Segment:
    turns: tuple[Turn, ...]
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class Meeting:
    meeting_id: str
    config: SimConfig
    speakers: tuple[SpeakerProfile, ...]
    segments: tuple[Segment, ...]

    def latent_of(self, speaker: str) -> np.ndarray:
        for s in self.speakers:
            if s.global_id == speaker:
                return s.latent
        raise KeyError(speaker)

    @property
    def noise_seed(self) -> int:
        h = hashlib.sha256(f"{self.meeting_id}/{self.config.digest()}".encode())
        return int.from_bytes(h.digest()[:8], "little")

    def num_turns(self) -> int:
        return sum(len(s.turns) for s in self.segments)


@dataclass(frozen=True)
class SerializedTranscript:
    """Tokens exclude the leading ``<bos>``; spans index into ``tokens``."""

    tokens: tuple[int, ...]
    speaker_indices: tuple[int, ...]
    turn_token_spans: tuple[tuple[int, int], ...]


@dataclass
class EmbeddingSequence:
    windows: np.ndarray
    segment_spans: list[tuple[int, int]]
    # window centre times relative to their segment start
    centres: np.ndarray | None = None

    @property
    def num_windows(self) -> int:
        return self.windows.shape[0]


@dataclass(frozen=True)
class FrameCodebook:
    """Frame-space rendering of words and speakers."""

    tokens: np.ndarray  # (vocab_size, frame_dim)
    projection: np.ndarray  # (frame_dim, embed_dim)

    @classmethod
    def from_config(cls, config: SimConfig) -> "FrameCodebook":
        rng = np.random.default_rng([config.seed, 0xC0DE])
        tokens = rng.standard_normal((config.vocab_size, config.frame_dim))
        proj = rng.standard_normal((config.frame_dim, config.embed_dim))
        proj /= np.sqrt(config.embed_dim)
        return cls(tokens=tokens, projection=proj)


# ---------------------------------------------------------------------------
# interval helpers


def _active_profile(intervals: Sequence[tuple[float, float]]):
    """Return breakpoints and active-count per elementary interval."""
    pts = sorted({p for iv in intervals for p in iv})
    counts = []
    for a, b in zip(pts[:-1], pts[1:]):
        mid = 0.5 * (a + b)
        counts.append(sum(1 for s, e in intervals if s <= mid < e))
    return pts, counts


def overlap_stats(meeting: Meeting) -> tuple[float, float]:
    """(overlapped speech time, total speech time) over the meeting."""
    ov = speech = 0.0
    for seg in meeting.segments:
        pts, counts = _active_profile([(t.start, t.end) for t in seg.turns])
        for (a, b), c in zip(zip(pts[:-1], pts[1:]), counts):
            if c >= 1:
                speech += b - a
            if c >= 2:
                ov += b - a
    return ov, speech


def meeting_overlap_ratio(meeting: Meeting) -> float:
    ov, speech = overlap_stats(meeting)
    return ov / speech if speech > 0 else 0.0


def pairwise_overlap_ratio(a: Turn, b: Turn) -> float:
    """Overlap duration relative to the shorter of the two turns."""
    ov = min(a.end, b.end) - max(a.start, b.start)
    if ov <= 0:
        return 0.0
    return ov / min(a.end - a.start, b.end - b.start)


# ---------------------------------------------------------------------------
# generation


def _sample_speakers(config: SimConfig, rng: np.random.Generator) -> tuple[SpeakerProfile, ...]:
    out = []
    for k in range(config.num_speakers):
        v = rng.standard_normal(config.embed_dim)
        out.append(SpeakerProfile(global_id=f"S{k}", latent=v / np.linalg.norm(v)))
    return tuple(out)


def _sample_segment(config, speakers, start, rng, p_overlap) -> Segment:
    lo, hi = config.utterances_per_segment
    n_turns = int(rng.integers(lo, hi + 1))
    ids = [s.global_id for s in speakers]
    turns: list[Turn] = []
    t = start
    prev = None
    for i in range(n_turns):
        choices = [s for s in ids if s != prev]
        spk = choices[int(rng.integers(len(choices)))]
        n_tok = int(rng.integers(config.tokens_per_utterance[0], config.tokens_per_utterance[1] + 1))
        tokens = tuple(int(w) for w in rng.integers(0, config.vocab_size, size=n_tok))
        dur = n_tok * config.token_duration
        if prev is not None:
            last = turns[-1]
            if rng.random() < p_overlap and config.max_pairwise_overlap > 0:
                cap = config.max_pairwise_overlap * min(dur, last.end - last.start)
                ov = float(rng.uniform(0.0, cap))
                # never reach back into the turn before ``last``
                if len(turns) >= 2:
                    ov = min(ov, max(0.0, last.end - turns[-2].end))
                t = last.end - ov
            else:
                t = last.end + float(rng.uniform(0.0, 0.2))
        turns.append(Turn(spk, tokens, t, t + dur))
        prev = spk
    return Segment(tuple(turns), turns[0].start, max(tr.end for tr in turns))


def _sample_meeting(config, rng, meeting_id, p_overlap) -> Meeting:
    speakers = _sample_speakers(config, rng)
    segments = []
    t = 0.0
    for _ in range(config.num_segments):
        seg = _sample_segment(config, speakers, t, rng, p_overlap)
        segments.append(seg)
        t = seg.end + float(rng.uniform(*config.segment_gap))
    return Meeting(meeting_id, config, speakers, tuple(segments))


def gen_meeting(config: SimConfig, index: int = 0, max_tries: int = 200) -> Meeting:
    """Draw one meeting; ``(config.seed, index)`` fully determines the result.

    Overlap placement is rejection-sampled until the meeting-level overlap
    ratio falls within 0.02 of the target; otherwise the closest draw is kept.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, index]))
    meeting_id = f"{config.digest()[:8]}-{index:05d}"
    can_overlap = (
        config.max_pairwise_overlap > 0
        and config.utterances_per_segment[1] >= 2
        and config.target_meeting_overlap > 0
    )
    if not can_overlap:
        return _sample_meeting(config, rng, meeting_id, 0.0)
    best, best_err = None, math.inf
    for _ in range(max_tries):
        m = _sample_meeting(config, rng, meeting_id, p_overlap=0.8)
        err = abs(meeting_overlap_ratio(m) - config.target_meeting_overlap)
        if err < best_err:
            best, best_err = m, err
        if err <= 0.02:
            break
    return best


def gen_corpus(config: SimConfig, num_meetings: int, offset: int = 0) -> list[Meeting]:
    return [gen_meeting(config, offset + i) for i in range(num_meetings)]


def check_meeting(meeting: Meeting) -> None:
    """Raise ``AssertionError`` if any structural invariant is broken."""
    ids = {s.global_id for s in meeting.speakers}
    cap = meeting.config.max_pairwise_overlap
    prev_end = -math.inf
    for seg in meeting.segments:
        assert seg.start >= prev_end, "segments overlap or are out of order"
        prev_end = seg.end
        starts = [t.start for t in seg.turns]
        assert starts == sorted(starts), "turns not ordered by start"
        for a, b in zip(seg.turns[:-1], seg.turns[1:]):
            assert a.speaker != b.speaker, "adjacent turns share a speaker"
        for i, a in enumerate(seg.turns):
            assert a.speaker in ids
            for b in seg.turns[i + 1:]:
                assert pairwise_overlap_ratio(a, b) <= cap + 1e-9


# ---------------------------------------------------------------------------
# speaker indices and serialisation


def first_appearance_order(meeting: Meeting) -> dict[str, int]:
    order: dict[str, int] = {}
    for seg in meeting.segments:
        for t in seg.turns:
            if t.speaker not in order:
                order[t.speaker] = len(order)
    return order


def serialize_targets(segment: Segment, order: dict[str, int]) -> SerializedTranscript:
    tokens: list[int] = []
    spans = []
    indices = []
    n = len(segment.turns)
    for i, turn in enumerate(segment.turns):
        begin = len(tokens)
        tokens.extend(vocab.word_to_id(w) for w in turn.tokens)
        tokens.append(vocab.SC if i < n - 1 else vocab.EOS)
        spans.append((begin, len(tokens)))
        indices.append(order[turn.speaker])
    return SerializedTranscript(tuple(tokens), tuple(indices), tuple(spans))


def serialize_meeting(meeting: Meeting) -> list[SerializedTranscript]:
    order = first_appearance_order(meeting)
    return [serialize_targets(seg, order) for seg in meeting.segments]


def speaker_index_sequence(meeting: Meeting) -> list[int]:
    order = first_appearance_order(meeting)
    return [order[t.speaker] for seg in meeting.segments for t in seg.turns]


def is_prefix_closed(indices: Iterable[int]) -> bool:
    """True when index k only appears after 0..k-1 have all appeared."""
    seen = -1
    for k in indices:
        if k > seen + 1 or k < 0:
            return False
        seen = max(seen, k)
    return True


def relabel_first_appearance(indices: Sequence[int]) -> list[int]:
    mapping: dict[int, int] = {}
    out = []
    for k in indices:
        if k not in mapping:
            mapping[k] = len(mapping)
        out.append(mapping[k])
    return out


# ---------------------------------------------------------------------------
# feature views


def window_starts(seg_start: float, seg_end: float, window_len: float, stride: float) -> list[float]:
    dur = seg_end - seg_start
    if dur <= window_len:
        return [seg_start]
    n = int(math.floor((dur - window_len) / stride + 1e-9)) + 1
    return [seg_start + k * stride for k in range(n)]


def emit_window_embeddings(meeting: Meeting, rng: np.random.Generator | None = None) -> EmbeddingSequence:
    cfg = meeting.config
    if rng is None:
        rng = np.random.default_rng([meeting.noise_seed, 1])
    rows = []
    spans = []
    centres = []
    for seg in meeting.segments:
        begin = len(rows)
        mixes = []
        for ws in window_starts(seg.start, seg.end, cfg.window_len, cfg.window_stride):
            we = min(ws + cfg.window_len, seg.end)
            centres.append(0.5 * (ws + we) - seg.start)
            mix = np.zeros(cfg.embed_dim)
            for t in seg.turns:
                occ = min(we, t.end) - max(ws, t.start)
                if occ > 0:
                    mix += occ * meeting.latent_of(t.speaker)
            mixes.append(mix)
        active = [i for i, m in enumerate(mixes) if np.any(m)]
        for i, mix in enumerate(mixes):
            if not np.any(mix):
                nearest = min(active, key=lambda j: (abs(j - i), j))
                mix = mixes[nearest]
            row = mix / np.linalg.norm(mix)
            if cfg.noise_sigma > 0:
                row = row + cfg.noise_sigma * rng.standard_normal(cfg.embed_dim)
            rows.append(row)
        spans.append((begin, len(rows)))
    return EmbeddingSequence(np.asarray(rows, dtype=np.float64), spans, np.asarray(centres))


def num_segment_frames(segment: Segment, frame_rate: float) -> int:
    return int(math.ceil(segment.duration * frame_rate - 1e-9))


def emit_frame_features(
    segment: Segment,
    codebook: FrameCodebook,
    profiles: dict[str, np.ndarray],
    *,
    frames_per_token: int,
    frame_rate: float,
    alpha: float = 1.0,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    n_frames = num_segment_frames(segment, frame_rate)
    out = np.zeros((n_frames, codebook.tokens.shape[1]))
    vocab_size = codebook.tokens.shape[0]
    for turn in segment.turns:
        colour = alpha * (codebook.projection @ profiles[turn.speaker])
        offset = int(round((turn.start - segment.start) * frame_rate))
        for k, w in enumerate(turn.tokens):
            if not 0 <= w < vocab_size:
                raise ValueError(f"unknown token {w}")
            a = offset + k * frames_per_token
            b = min(a + frames_per_token, n_frames)
            out[a:b] += codebook.tokens[w] + colour
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requested without an rng")
        out += noise_sigma * rng.standard_normal(out.shape)
    return out


def meeting_frames(meeting: Meeting, codebook: FrameCodebook) -> list[np.ndarray]:
    cfg = meeting.config
    profiles = {s.global_id: s.latent for s in meeting.speakers}
    rng = np.random.default_rng([meeting.noise_seed, 2])
    return [
        emit_frame_features(
            seg, codebook, profiles,
            frames_per_token=cfg.frames_per_token,
            frame_rate=cfg.frame_rate,
            alpha=cfg.speaker_alpha,
            noise_sigma=cfg.frame_noise_sigma,
            rng=rng,
        )
        for seg in meeting.segments
    ]


# ---------------------------------------------------------------------------
# FSS and permutation


def _token_midpoints(turn: Turn) -> list[float]:
    step = (turn.end - turn.start) / len(turn.tokens)
    return [turn.start + (k + 0.5) * step for k in range(len(turn.tokens))]


def first_speaker_segmentation(segment: Segment) -> list[Segment]:
    """Split a segment into single-speaker pieces.

    At each instant the owner is the active turn that started earliest, so an
    overlap always goes to the speaker who spoke first and the cut falls at
    the end of the overlap. Silence inside the segment stays with the
    preceding owner so the pieces tile ``[segment.start, segment.end)``.
    """
    turns = sorted(segment.turns, key=lambda t: t.start)
    pts = sorted({p for t in turns for p in (t.start, t.end)})
    owners: list[int] = []
    for a, b in zip(pts[:-1], pts[1:]):
        mid = 0.5 * (a + b)
        live = [i for i, t in enumerate(turns) if t.start <= mid < t.end]
        owners.append(live[0] if live else (owners[-1] if owners else 0))
    # runs of the same owner turn; same-speaker runs are merged below
    pieces: list[list] = []
    for (a, b), o in zip(zip(pts[:-1], pts[1:]), owners):
        spk = turns[o].speaker
        if pieces and pieces[-1][0] == spk:
            pieces[-1][2] = b
        else:
            pieces.append([spk, a, b])
    out = []
    kept: set[int] = set()
    for spk, a, b in pieces:
        toks = []
        for i, t in enumerate(turns):
            if t.speaker != spk:
                continue
            for w, m in zip(t.tokens, _token_midpoints(t)):
                if a <= m < b:
                    toks.append(w)
                    kept.add(i)
        if not toks:
            cands = [
                (abs(m - 0.5 * (a + b)), w, i)
                for i, t in enumerate(turns) if t.speaker == spk
                for w, m in zip(t.tokens, _token_midpoints(t))
            ]
            _, w, i = min(cands)
            toks = [w]
            kept.add(i)
        out.append(Segment((Turn(spk, tuple(toks), a, b),), a, b))
    for i, t in enumerate(turns):
        owned = any(turns[o] is t for o in owners)
        if not owned:
            log.info("FSS dropped turn of %s at [%.3f, %.3f): fully inside an overlap", t.speaker, t.start, t.end)
    return out


def fss_meeting(meeting: Meeting) -> Meeting:
    segs = []
    for seg in meeting.segments:
        segs.extend(first_speaker_segmentation(seg))
    return dataclasses.replace(meeting, segments=tuple(segs))


def _shift_segment(seg: Segment, delta: float) -> Segment:
    turns = tuple(dataclasses.replace(t, start=t.start + delta, end=t.end + delta) for t in seg.turns)
    return Segment(turns, seg.start + delta, seg.end + delta)


def permute_segments(meeting: Meeting, seed: int, order: Sequence[int] | None = None) -> Meeting:
    """Reorder segments uniformly at random and re-lay them on the timeline.

    Inter-segment gaps keep their slot positions. Speaker indices follow from
    first appearance in the new order.
    """
    segs = meeting.segments
    if order is None:
        order = np.random.default_rng(seed).permutation(len(segs)).tolist()
    gaps = [b.start - a.end for a, b in zip(segs[:-1], segs[1:])]
    t = segs[0].start
    out = []
    for slot, k in enumerate(order):
        seg = segs[k]
        out.append(_shift_segment(seg, t - seg.start))
        if slot < len(gaps):
            t = out[-1].end + gaps[slot]
    return dataclasses.replace(meeting, segments=tuple(out))


# ---------------------------------------------------------------------------
# corpus file


def meeting_to_record(meeting: Meeting) -> dict:
    return {
        "meeting_id": meeting.meeting_id,
        "config digest": meeting.config.digest(),
        "speakers": [
            {"id": s.global_id, "latent": [float(x) for x in s.latent]} for s in meeting.speakers
        ],
        "segments": [
            {
                "start": seg.start,
                "end": seg.end,
                "turns": [
                    {"speaker": t.speaker, "tokens": list(t.tokens), "start": t.start, "end": t.end}
                    for t in seg.turns
                ],
            }
            for seg in meeting.segments
        ],
    }


def meeting_from_record(rec: dict, config: SimConfig) -> Meeting:
    if rec["config digest"] != config.digest():
        raise ValueError(f"meeting {rec['meeting_id']} was generated with another config")
    speakers = tuple(
        SpeakerProfile(s["id"], np.asarray(s["latent"], dtype=np.float64)) for s in rec["speakers"]
    )
    segments = tuple(
        Segment(
            tuple(Turn(t["speaker"], tuple(t["tokens"]), t["start"], t["end"]) for t in seg["turns"]),
            seg["start"],
            seg["end"],
        )
        for seg in rec["segments"]
    )
    return Meeting(rec["meeting_id"], config, speakers, segments)


def write_corpus(path: str | Path, meetings: Sequence[Meeting]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for m in meetings:
            f.write(json.dumps(meeting_to_record(m), ensure_ascii=False) + "\n")


def read_corpus(path: str | Path, config: SimConfig) -> list[Meeting]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(meeting_from_record(json.loads(line), config))
    return out
