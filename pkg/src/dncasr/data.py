"""Tensor views of meetings and batch collation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import vocab
from .meeting_sim import (
    EmbeddingSequence,
    FrameCodebook,
    Meeting,
    SerializedTranscript,
    emit_window_embeddings,
    meeting_frames,
    relabel_first_appearance,
    serialize_meeting,
)
from .model import IGNORE


@dataclass
class MeetingData:
    meeting_id: str
    embeddings: EmbeddingSequence
    frames: list[np.ndarray]
    transcripts: list[SerializedTranscript]
    # per-block W_CA (T_tok, H) for every segment, filled lazily
    w_ca: list[list[torch.Tensor]] | None = field(default=None, repr=False)

    @property
    def num_segments(self) -> int:
        return len(self.transcripts)

    def speaker_targets(self, upto: int | None = None) -> list[int]:
        segs = self.transcripts if upto is None else self.transcripts[: upto + 1]
        return [k for t in segs for k in t.speaker_indices]

    def position_segments(self, upto: int | None = None) -> list[int]:
        segs = self.transcripts if upto is None else self.transcripts[: upto + 1]
        return [s for s, t in enumerate(segs) for _ in t.speaker_indices]


def featurize(meeting: Meeting, codebook: FrameCodebook) -> MeetingData:
    return MeetingData(
        meeting.meeting_id,
        emit_window_embeddings(meeting),
        meeting_frames(meeting, codebook),
        serialize_meeting(meeting),
    )


def featurize_corpus(meetings, codebook) -> list[MeetingData]:
    return [featurize(m, codebook) for m in meetings]


def _pad(seqs: list[torch.Tensor], value=0.0) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([s.shape[0] for s in seqs])
    t = int(lengths.max())
    out = seqs[0].new_full((len(seqs), t) + tuple(seqs[0].shape[1:]), value)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
    return out, lengths


@dataclass
class ASRBatch:
    frames: torch.Tensor
    wav_lengths: torch.Tensor
    inputs: torch.Tensor
    targets: torch.Tensor


def asr_batch(items: list[tuple[np.ndarray, SerializedTranscript]], dtype=torch.float32) -> ASRBatch:
    frames, wl = _pad([torch.as_tensor(f, dtype=dtype) for f, _ in items])
    tgt = [torch.tensor(tr.tokens) for _, tr in items]
    inp = [torch.tensor((vocab.BOS,) + tr.tokens[:-1]) for _, tr in items]
    targets, _ = _pad(tgt, IGNORE)
    inputs, _ = _pad(inp, vocab.BOS)
    return ASRBatch(frames, wl, inputs, targets)


@dataclass
class DNCItem:
    """One DNC training example over a contiguous range of segments."""

    windows: np.ndarray
    segment_spans: list[tuple[int, int]]
    targets: list[int]
    position_segments: list[int]
    # link inputs: per-block (T_tok, H) tensors and the (T, 1 + T_tok) mask
    w_ca: list[torch.Tensor] | None = None
    mask_l: torch.Tensor | None = None
    centres: np.ndarray | None = None


def chunk_item(md: MeetingData, first: int, last: int, windows: np.ndarray | None = None) -> DNCItem:
    """Segments ``first..last`` inclusive, indices relabelled by first appearance."""
    spans = md.embeddings.segment_spans[first:last + 1]
    w0, w1 = spans[0][0], spans[-1][1]
    win = (md.embeddings.windows if windows is None else windows)[w0:w1]
    local = [(a - w0, b - w0) for a, b in spans]
    tg = [k for tr in md.transcripts[first:last + 1] for k in tr.speaker_indices]
    pos = [s for s, tr in enumerate(md.transcripts[first:last + 1]) for _ in tr.speaker_indices]
    cen = None if md.embeddings.centres is None else md.embeddings.centres[w0:w1]
    return DNCItem(win, local, relabel_first_appearance(tg), pos, centres=cen)


@dataclass
class DNCBatch:
    windows: torch.Tensor
    win_lengths: torch.Tensor
    inputs: torch.Tensor
    targets: torch.Tensor
    mask_s: torch.Tensor
    w_ca: list[torch.Tensor] | None
    mask_l: torch.Tensor | None
    centres: torch.Tensor | None = None


def dnc_batch(items: list[DNCItem], sbos: int, dtype=torch.float32, loss_from: list[int] | None = None) -> DNCBatch:
    """Collate DNC items. ``loss_from[i]`` masks targets before that position."""
    windows, wl = _pad([torch.as_tensor(it.windows, dtype=dtype) for it in items])
    tg = [torch.tensor(it.targets) for it in items]
    targets, tl = _pad(tg, IGNORE)
    inputs = torch.full_like(targets, sbos)
    for i, t in enumerate(tg):
        inputs[i, 1:t.shape[0]] = t[:-1]
    if loss_from is not None:
        for i, k in enumerate(loss_from):
            targets[i, :k] = IGNORE
    b, t = targets.shape
    tw = windows.shape[1]
    mask_s = torch.zeros(b, t, tw, dtype=torch.bool)
    for i, it in enumerate(items):
        for p, s in enumerate(it.position_segments):
            a, e = it.segment_spans[s]
            mask_s[i, p, a:e] = True
        mask_s[i, len(it.position_segments):, 0] = True
    w_ca = mask_l = None
    if items[0].w_ca is not None:
        nblocks = len(items[0].w_ca)
        w_ca = [_pad([it.w_ca[n].to(dtype) for it in items])[0] for n in range(nblocks)]
        tt = w_ca[0].shape[1]
        mask_l = torch.zeros(b, t, 1 + tt, dtype=torch.bool)
        for i, it in enumerate(items):
            m = it.mask_l
            mask_l[i, : m.shape[0], : m.shape[1]] = m
            mask_l[i, m.shape[0]:, 0] = True
    centres = None
    if items[0].centres is not None:
        centres = _pad([torch.as_tensor(it.centres, dtype=torch.float64) for it in items])[0]
    return DNCBatch(windows, wl, inputs, targets, mask_s, w_ca, mask_l, centres)
