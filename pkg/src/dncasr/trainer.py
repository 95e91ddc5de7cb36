"""Training phases: ASR/DNC pre-training, joint stage 1, DNC-only stage 2.

Every phase runs Adam with a linear warm-up over the first ``warmup_frac`` of
its steps and a constant rate afterwards, keeps the parameters of the best
held-out epoch, and leaves frozen modules bit-identical.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import augment
from .data import DNCItem, MeetingData, asr_batch, chunk_item, dnc_batch
from .model import DNCASR, build_mask_l, joint_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


@dataclass
class TrainConfig:
    lr: float = 5e-4
    warmup_frac: float = 0.2
    optimizer: str = "adam"
    epochs_asr: int = 30
    epochs_dnc: int = 30
    epochs_stage1: int = 10
    epochs_stage2: int = 10
    epochs_parallel: int = 20
    batch_size: int = 16
    length_schedule: tuple[int, ...] = (2, 4)
    cda_range: tuple[float, float] | None = None
    freeze_asr: bool = True
    dev_frac: float = 0.1
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if list(self.length_schedule) != sorted(self.length_schedule):
            raise ValueError("length_schedule must be nondecreasing")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")


@dataclass
class PhaseReport:
    phase: str
    dnc_ce: list[float] = field(default_factory=list)
    asr_ce: list[float] = field(default_factory=list)
    joint: list[float] = field(default_factory=list)
    dev: list[float] = field(default_factory=list)
    seconds: float = 0.0
    checkpoint: str | None = None
    best_epoch: int = -1
    max_segments: list[int] = field(default_factory=list)

    def append_csv(self, path: str | Path) -> None:
        path = Path(path)
        new = not path.exists()
        with open(path, "a", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            if new:
                w.writerow(["phase", "epoch", "dnc_ce", "asr_ce", "joint", "seconds"])
            per_epoch = self.seconds / max(1, len(self.joint))
            for e, (d, a, j) in enumerate(zip(self.dnc_ce, self.asr_ce, self.joint)):
                w.writerow([self.phase, e, _fmt(d), _fmt(a), _fmt(j), f"{per_epoch:.3f}"])


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError("step outside [0, total_steps]")
    warm = config.warmup_frac * total_steps
    if warm <= 0 or step >= warm:
        return config.lr
    return config.lr * step / warm


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def split_dev(corpus: Sequence[MeetingData], frac: float) -> tuple[list, list]:
    n_dev = max(1, int(round(frac * len(corpus)))) if len(corpus) > 1 and frac > 0 else 0
    return list(corpus[n_dev:]), list(corpus[:n_dev])


def _batches(items: list, size: int) -> list[list]:
    return [items[i:i + size] for i in range(0, len(items), size)]


def _run_phase(
    phase: str,
    model: DNCASR,
    params: list[torch.nn.Parameter],
    epoch_batches: Callable[[int, np.random.Generator], list[Callable]],
    steps_per_epoch: int,
    epochs: int,
    config: TrainConfig,
    dev_loss: Callable[[], float] | None,
) -> PhaseReport:
    if config.deterministic:
        set_deterministic(config.seed)
    rng = np.random.default_rng(config.seed)
    trainable = {id(p) for p in params}
    saved_flags = [(p, p.requires_grad) for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(id(p) in trainable)
    opt = torch.optim.Adam(params, lr=config.lr)
    total = max(1, epochs * steps_per_epoch)
    step = 0
    report = PhaseReport(phase)
    best = (math.inf, None)
    t0 = time.perf_counter()
    try:
        for epoch in range(epochs):
            model.train()
            sums = np.zeros(3)
            counts = np.zeros(3)
            for fn in epoch_batches(epoch, rng):
                for g in opt.param_groups:
                    g["lr"] = lr_schedule(min(step, total), total, config)
                total_loss, dnc, asr = fn()
                if not torch.isfinite(total_loss):
                    report.seconds = time.perf_counter() - t0
                    raise TrainingDiverged(f"{phase}: non-finite loss at step {step}", report)
                opt.zero_grad()
                if total_loss.requires_grad:
                    total_loss.backward()
                    opt.step()
                step += 1
                for i, v in enumerate((dnc, asr, total_loss)):
                    if v is not None:
                        sums[i] += float(v.detach())
                        counts[i] += 1
            means = [s / c if c else float("nan") for s, c in zip(sums, counts)]
            report.dnc_ce.append(means[0])
            report.asr_ce.append(means[1])
            report.joint.append(means[2])
            if dev_loss is not None:
                model.eval()
                d = dev_loss()
                report.dev.append(d)
                if d < best[0]:
                    best = (d, copy.deepcopy(model.state_dict()))
                    report.best_epoch = epoch
            log.info("%s epoch %d: %s dev=%s", phase, epoch, means, report.dev[-1] if report.dev else None)
        if best[1] is not None:
            model.load_state_dict(best[1])
    finally:
        for p, flag in saved_flags:
            p.requires_grad_(flag)
        model.eval()
    report.seconds = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# ASR pre-training


def _asr_items(corpus):
    return [(f, tr) for md in corpus for f, tr in zip(md.frames, md.transcripts)]


def _dtype(model):
    return next(model.parameters()).dtype


def asr_loss(model: DNCASR, items) -> tuple[torch.Tensor, torch.Tensor]:
    b = asr_batch(items, _dtype(model))
    e_w = model.wav_encoder(b.frames, b.wav_lengths)
    logits, _ = model.asr_decoder(e_w, b.inputs, b.wav_lengths)
    total, _, asr = joint_loss(None, None, logits, b.targets)
    return total, asr


def pretrain_asr(model: DNCASR, corpus: Sequence[MeetingData], config: TrainConfig) -> PhaseReport:
    if not corpus:
        raise ValueError("empty corpus")
    train, dev = split_dev(corpus, config.dev_frac)
    items = _asr_items(train)
    dev_items = _asr_items(dev)

    def epoch_batches(epoch, rng):
        order = rng.permutation(len(items))
        out = []
        for chunk in _batches([items[i] for i in order], config.batch_size):
            def fn(chunk=chunk):
                total, asr = asr_loss(model, chunk)
                return total, None, asr
            out.append(fn)
        return out

    def dev_loss():
        if not dev_items:
            return 0.0
        with torch.no_grad():
            return float(np.mean([float(asr_loss(model, c)[1]) for c in _batches(dev_items, 64)]))

    steps = math.ceil(len(items) / config.batch_size)
    params = list(model.asr_parameters())
    return _run_phase("pretrain_asr", model, params, epoch_batches, steps, config.epochs_asr, config, dev_loss if dev_items else None)


# ---------------------------------------------------------------------------
# DNC helpers


def _maybe_rotate(windows: np.ndarray, config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    if config.cda_range is None:
        return windows
    lo, hi = config.cda_range
    scale = lo if lo == hi else float(rng.uniform(lo, hi))
    h = augment.constrained_rotation(augment.RotationSpec(windows.shape[1], scale), rng)
    return augment.apply_to_rows(windows, h)


def dnc_loss(model: DNCASR, items: list[DNCItem], loss_from=None):
    b = dnc_batch(items, model.dnc_decoder.sbos, _dtype(model), loss_from)
    e_s = model.encode_speakers(b.windows, b.win_lengths, b.centres)
    logits = model.dnc_decoder(e_s, b.inputs, b.mask_s, b.w_ca, b.mask_l)
    total, dnc, _ = joint_loss(logits, b.targets, None, None)
    return total, dnc


def check_single_speaker(corpus: Sequence[MeetingData]) -> None:
    for md in corpus:
        for s, tr in enumerate(md.transcripts):
            if len(tr.speaker_indices) != 1:
                raise ValueError(f"{md.meeting_id} segment {s} has {len(tr.speaker_indices)} speaker turns")


def curriculum_caps(config: TrainConfig, epochs: int) -> list[int | None]:
    """Per-epoch segment cap; the final stage always covers whole meetings."""
    stages: list[int | None] = list(config.length_schedule) + [None]
    per = max(1, epochs // len(stages))
    caps = []
    for e in range(epochs):
        caps.append(stages[min(e // per, len(stages) - 1)])
    if caps:
        caps[-1] = None
    return caps


def pretrain_dnc(model: DNCASR, corpus: Sequence[MeetingData], config: TrainConfig) -> PhaseReport:
    if not corpus:
        raise ValueError("empty corpus")
    check_single_speaker(corpus)
    train, dev = split_dev(corpus, config.dev_frac)
    caps = curriculum_caps(config, config.epochs_dnc)
    seen: list[int] = []

    def epoch_batches(epoch, rng):
        cap = caps[epoch]
        items = []
        for i in rng.permutation(len(train)):
            md = train[i]
            n = md.num_segments
            k = n if cap is None else min(cap, n)
            first = int(rng.integers(0, n - k + 1))
            it = chunk_item(md, first, first + k - 1)
            it.windows = _maybe_rotate(it.windows, config, rng)
            items.append(it)
        seen.append(max(len(it.segment_spans) for it in items))
        return [lambda c=c: (*dnc_loss(model, c), None) for c in _batches(items, config.batch_size)]

    dev_items = [chunk_item(md, 0, md.num_segments - 1) for md in dev]

    def dev_loss():
        with torch.no_grad():
            return float(np.mean([float(dnc_loss(model, c)[1]) for c in _batches(dev_items, 32)]))

    steps = math.ceil(len(train) / config.batch_size)
    link = {id(p) for p in model.link_parameters()}
    params = [p for p in model.dnc_parameters() if id(p) not in link]
    # checkpoint selection only makes sense once whole meetings are in play
    rep = _run_phase("pretrain_dnc", model, params, epoch_batches, steps, config.epochs_dnc, config,
                     dev_loss if dev_items else None)
    rep.max_segments = seen
    return rep


# ---------------------------------------------------------------------------
# W_CA features


@torch.no_grad()
def teacher_forced_w_ca(model: DNCASR, frames: np.ndarray, tokens: Sequence[int]) -> list[torch.Tensor]:
    """Per-block W_CA (T_tok, H) for one segment given its token sequence."""
    from . import vocab

    dt = _dtype(model)
    e_w = model.wav_encoder(torch.as_tensor(frames, dtype=dt))
    inp = torch.tensor((vocab.BOS,) + tuple(tokens[:-1]))
    _, w = model.asr_decoder(e_w, inp)
    return [x.detach() for x in w]


@torch.no_grad()
def precompute_w_ca(model: DNCASR, corpus: Sequence[MeetingData]) -> None:
    """Oracle-transcript W_CA for every segment, computed once per meeting."""
    model.eval()
    for md in corpus:
        md.w_ca = [teacher_forced_w_ca(model, f, tr.tokens) for f, tr in zip(md.frames, md.transcripts)]


def meeting_link_inputs(md: MeetingData) -> tuple[list[torch.Tensor], list[tuple[int, int]]]:
    """Concatenate per-segment W_CA and shift turn spans to meeting positions."""
    nblocks = len(md.w_ca[0])
    w = [torch.cat([seg[n] for seg in md.w_ca], dim=0) for n in range(nblocks)]
    spans = []
    off = 0
    for tr in md.transcripts:
        spans.extend((a + off, b + off) for a, b in tr.turn_token_spans)
        off += len(tr.tokens)
    return w, spans


def stage2_item(md: MeetingData, windows: np.ndarray | None = None, link: bool = True) -> DNCItem:
    it = chunk_item(md, 0, md.num_segments - 1, windows)
    if link:
        w, spans = meeting_link_inputs(md)
        it.w_ca = w
        it.mask_l = build_mask_l(spans, "stage2", num_tokens=w[0].shape[0])
    return it


def stage1_item(md: MeetingData, current: int, w_ca_current=None) -> DNCItem:
    it = chunk_item(md, 0, current)
    ctx = sum(len(tr.speaker_indices) for tr in md.transcripts[:current])
    tr = md.transcripts[current]
    it.w_ca = w_ca_current if w_ca_current is not None else md.w_ca[current]
    it.mask_l = build_mask_l(tr.turn_token_spans, "stage1", context_len=ctx, num_tokens=len(tr.tokens))
    return it


# ---------------------------------------------------------------------------
# fine-tuning


def finetune_stage1(model: DNCASR, corpus: Sequence[MeetingData], config: TrainConfig, reset_link: bool = True) -> PhaseReport:
    """Joint fine-tuning on (meeting, current segment) examples.

    The DNC predicts indices for segments ``0..current``; context positions
    link to ``<pad>``, current-segment positions to their turn's W_CA.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if reset_link:
        model.reset_link(config.seed)
    train, dev = split_dev(corpus, config.dev_frac)
    if config.freeze_asr:
        precompute_w_ca(model, corpus)

    def make_fn(chunk):
        def fn():
            if config.freeze_asr:
                items = [stage1_item(md, c) for md, c in chunk]
                total, dnc = dnc_loss(model, items)
                return total, dnc, None
            ab = asr_batch([(md.frames[c], md.transcripts[c]) for md, c in chunk], _dtype(model))
            e_w = model.wav_encoder(ab.frames, ab.wav_lengths)
            wl, w_cas = model.asr_decoder(e_w, ab.inputs, ab.wav_lengths)
            items = []
            for i, (md, c) in enumerate(chunk):
                n = len(md.transcripts[c].tokens)
                items.append(stage1_item(md, c, [w[i, :n] for w in w_cas]))
            b = dnc_batch(items, model.dnc_decoder.sbos, _dtype(model))
            e_s = model.encode_speakers(b.windows, b.win_lengths, b.centres)
            sl = model.dnc_decoder(e_s, b.inputs, b.mask_s, b.w_ca, b.mask_l)
            return joint_loss(sl, b.targets, wl, ab.targets)
        return fn

    def epoch_batches(epoch, rng):
        ex = [(train[i], int(rng.integers(train[i].num_segments))) for i in rng.permutation(len(train))]
        return [make_fn(c) for c in _batches(ex, config.batch_size)]

    def dev_loss():
        if not config.freeze_asr:
            precompute_w_ca(model, dev)
        return stage1_eval_loss(model, dev)

    params = list(model.dnc_parameters())
    if not config.freeze_asr:
        params += list(model.asr_parameters())
    steps = math.ceil(len(train) / config.batch_size)
    return _run_phase("finetune_stage1", model, params, epoch_batches, steps, config.epochs_stage1, config,
                      dev_loss if dev else None)


@torch.no_grad()
def stage1_eval_loss(model: DNCASR, corpus: Sequence[MeetingData]) -> float:
    """DNC CE on the current-segment positions, averaged over every segment."""
    if corpus and corpus[0].w_ca is None:
        precompute_w_ca(model, corpus)
    items, starts = [], []
    for md in corpus:
        for c in range(md.num_segments):
            items.append(stage1_item(md, c))
            starts.append(sum(len(tr.speaker_indices) for tr in md.transcripts[:c]))
    losses = []
    for i in range(0, len(items), 32):
        losses.append(float(dnc_loss(model, items[i:i + 32], starts[i:i + 32])[1]))
    return float(np.mean(losses))


@torch.no_grad()
def meeting_eval_loss(model: DNCASR, corpus: Sequence[MeetingData], link: bool) -> float:
    if link and corpus and corpus[0].w_ca is None:
        precompute_w_ca(model, corpus)
    items = [stage2_item(md, link=link) for md in corpus]
    return float(np.mean([float(dnc_loss(model, c)[1]) for c in _batches(items, 32)]))


def _meeting_phase(phase, model, corpus, config, epochs, link):
    if not corpus:
        raise ValueError("empty corpus")
    train, dev = split_dev(corpus, config.dev_frac)
    if link:
        precompute_w_ca(model, corpus)

    def epoch_batches(epoch, rng):
        items = []
        for i in rng.permutation(len(train)):
            md = train[i]
            items.append(stage2_item(md, _maybe_rotate(md.embeddings.windows, config, rng), link=link))
        return [lambda c=c: (*dnc_loss(model, c), None) for c in _batches(items, config.batch_size)]

    params = list(model.dnc_parameters())
    if not link:
        skip = {id(p) for p in model.link_parameters()}
        params = [p for p in params if id(p) not in skip]
    steps = math.ceil(len(train) / config.batch_size)
    return _run_phase(phase, model, params, epoch_batches, steps, epochs, config,
                      (lambda: meeting_eval_loss(model, dev, link)) if dev else None)


def finetune_stage2(model: DNCASR, corpus: Sequence[MeetingData], config: TrainConfig, epochs: int | None = None) -> PhaseReport:
    """DNC-only fine-tuning over whole meetings with oracle W_CA (ASR frozen)."""
    return _meeting_phase("finetune_stage2", model, corpus, config,
                          config.epochs_stage2 if epochs is None else epochs, link=True)


def finetune_parallel(model: DNCASR, corpus: Sequence[MeetingData], config: TrainConfig) -> PhaseReport:
    """No-link baseline: DNC fine-tuned on multi-talker meetings without W_CA."""
    return _meeting_phase("finetune_parallel", model, corpus, config, config.epochs_parallel, link=False)
