"""WER, cpWER, DER with collar, and the one-sided Wilcoxon signed-rank test."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import norm

UNDEFINED = float("nan")


@dataclass
class EditCounts:
    sub: int = 0
    ins: int = 0
    dele: int = 0

    @property
    def errors(self) -> int:
        return self.sub + self.ins + self.dele

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(self.sub + other.sub, self.ins + other.ins, self.dele + other.dele)


def edit_counts(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Levenshtein alignment with unit costs; ties prefer substitutions."""
    n, m = len(ref), len(hyp)
    # each cell: (cost, sub, ins, del)
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            c, s, a, d = prev[j - 1]
            miss = ref[i - 1] != hyp[j - 1]
            best = (c + miss, s + miss, a, d)
            c, s, a, d = cur[j - 1]
            if c + 1 < best[0]:
                best = (c + 1, s, a + 1, d)
            c, s, a, d = prev[j]
            if c + 1 < best[0]:
                best = (c + 1, s, a, d + 1)
            cur.append(best)
        prev = cur
    _, s, a, d = prev[m]
    return EditCounts(s, a, d)


def wer(ref: Sequence, hyp: Sequence) -> tuple[float, EditCounts]:
    e = edit_counts(ref, hyp)
    if not ref:
        return (0.0 if not hyp else math.inf), e
    return e.errors / len(ref), e


# ---------------------------------------------------------------------------
# cpWER


@dataclass
class CpWERResult:
    errors: int
    ref_words: int
    mapping: dict  # hyp key -> ref key (None for padding)

    @property
    def cpwer(self) -> float:
        return self.errors / self.ref_words


def _cost_matrix(ref: Mapping, hyp: Mapping):
    rk, hk = list(ref), list(hyp)
    n = max(len(rk), len(hk))
    rk_p = rk + [None] * (n - len(rk))
    hk_p = hk + [None] * (n - len(hk))
    cost = np.zeros((n, n), dtype=np.int64)
    for i, h in enumerate(hk_p):
        for j, r in enumerate(rk_p):
            cost[i, j] = edit_counts(ref.get(r, []) if r is not None else [],
                                     hyp.get(h, []) if h is not None else []).errors
    return rk_p, hk_p, cost


def cpwer(ref: Mapping[Hashable, Sequence], hyp: Mapping[Hashable, Sequence]) -> CpWERResult:
    """Minimum total edit errors over one-to-one speaker mappings.

    The smaller side is padded with empty streams, so an unmatched hyp stream
    costs its length in insertions and an unmatched ref stream its length in
    deletions.
    """
    total = sum(len(v) for v in ref.values())
    if total == 0:
        raise ValueError("reference has no words")
    rk, hk, cost = _cost_matrix(ref, hyp)
    rows, cols = linear_sum_assignment(cost)
    mapping = {hk[i]: rk[j] for i, j in zip(rows, cols) if hk[i] is not None}
    return CpWERResult(int(cost[rows, cols].sum()), total, mapping)


def cpwer_bruteforce(ref: Mapping, hyp: Mapping) -> CpWERResult:
    total = sum(len(v) for v in ref.values())
    if total == 0:
        raise ValueError("reference has no words")
    rk, hk, cost = _cost_matrix(ref, hyp)
    best = None
    for perm in itertools.permutations(range(len(rk))):
        e = int(sum(cost[i, j] for i, j in enumerate(perm)))
        if best is None or e < best[0]:
            best = (e, perm)
    mapping = {hk[i]: rk[j] for i, j in enumerate(best[1]) if hk[i] is not None}
    return CpWERResult(best[0], total, mapping)


def speaker_streams(segments: Sequence[Sequence[tuple[Hashable, Sequence]]], keep: Sequence[bool] | None = None) -> dict:
    """Concatenate turn words per speaker in segment/turn order."""
    out: dict = {}
    for s, turns in enumerate(segments):
        if keep is not None and not keep[s]:
            continue
        for spk, words in turns:
            out.setdefault(spk, []).extend(words)
    return out


def cpwer_multi(ref_segments, hyp_segments) -> CpWERResult | None:
    """cpWER over reference segments with >= 2 turns; None if there are none."""
    flags = [len(t) >= 2 for t in ref_segments]
    if not any(flags):
        return None
    return cpwer(speaker_streams(ref_segments, flags), speaker_streams(hyp_segments, flags))


# ---------------------------------------------------------------------------
# DER


@dataclass
class DERResult:
    missed: float
    false_alarm: float
    confusion: float
    scored: float
    mapping: dict

    @property
    def der(self) -> float:
        return (self.missed + self.false_alarm + self.confusion) / self.scored


def _scored_regions(ref_turns, collar: float, lo: float, hi: float) -> list[tuple[float, float]]:
    excl = []
    for _, s, e in ref_turns:
        excl.append((s - collar, s + collar))
        excl.append((e - collar, e + collar))
    excl.sort()
    merged = []
    for a, b in excl:
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    out = []
    t = lo
    for a, b in merged:
        if a > t:
            out.append((t, min(a, hi)))
        t = max(t, b)
    if t < hi:
        out.append((t, hi))
    return [(a, b) for a, b in out if b > a]


def der(ref_turns: Sequence[tuple[Hashable, float, float]], hyp_turns: Sequence[tuple[Hashable, float, float]], collar: float = 0.25) -> DERResult:
    """Diarization error with a no-score collar around reference boundaries.

    Overlapped speech is scored. Speakers are mapped one-to-one by optimal
    assignment on the scored co-occurrence time.
    """
    for _, s, e in list(ref_turns) + list(hyp_turns):
        if not e >= s:
            raise ValueError("interval with end < start")
    if not ref_turns:
        raise ValueError("empty reference timeline")
    pts = {p for _, s, e in list(ref_turns) + list(hyp_turns) for p in (s, e)}
    lo, hi = min(pts), max(pts)
    regions = _scored_regions(ref_turns, collar, lo, hi)
    for a, b in regions:
        pts.update((a, b))
    pts = sorted(pts)
    ref_ids = sorted({r for r, _, _ in ref_turns}, key=str)
    hyp_ids = sorted({h for h, _, _ in hyp_turns}, key=str)
    overlap = np.zeros((len(ref_ids), len(hyp_ids)))
    pieces = []
    for a, b in zip(pts[:-1], pts[1:]):
        mid = 0.5 * (a + b)
        if not any(x <= mid < y for x, y in regions):
            continue
        r = {ref_ids.index(k) for k, s, e in ref_turns if s <= mid < e}
        h = {hyp_ids.index(k) for k, s, e in hyp_turns if s <= mid < e}
        pieces.append((b - a, r, h))
        for i in r:
            for j in h:
                overlap[i, j] += b - a
    mapping = {}
    if ref_ids and hyp_ids:
        rows, cols = linear_sum_assignment(-overlap)
        mapping = {hyp_ids[j]: ref_ids[i] for i, j in zip(rows, cols)}
    inv = {ref_ids.index(v): hyp_ids.index(k) for k, v in mapping.items()}
    missed = fa = conf = scored = 0.0
    for d, r, h in pieces:
        nr, nh = len(r), len(h)
        correct = sum(1 for i in r if i in inv and inv[i] in h)
        scored += d * nr
        missed += d * max(0, nr - nh)
        fa += d * max(0, nh - nr)
        conf += d * (min(nr, nh) - correct)
    if scored == 0:
        raise ValueError("no scored reference speech")
    return DERResult(missed, fa, conf, scored, mapping)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


def _ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@dataclass
class WilcoxonResult:
    p_value: float
    statistic: float
    n: int
    n_improved: int
    exact: bool


def wilcoxon_signed_rank(differences: Sequence[float], exact_max_n: int = 20) -> WilcoxonResult:
    """One-sided test that the differences are shifted above zero.

    Zero differences are dropped. ``statistic`` is the positive rank sum;
    the p-value is ``P(T+ >= statistic)`` under the symmetric null.
    """
    d = np.asarray(differences, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("all differences are zero")
    ranks = _ranks(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        # distribution of the positive rank sum, in half-rank units to keep ties exact
        half = np.rint(2 * ranks).astype(np.int64)
        dist = np.zeros(int(half.sum()) + 1)
        dist[0] = 1.0
        for r in half:
            shifted = np.zeros_like(dist)
            shifted[r:] = dist[: len(dist) - r]
            dist = dist + shifted
        dist /= 2.0 ** n
        obs = int(round(2 * t_plus))
        p = float(dist[obs:].sum())
        return WilcoxonResult(min(1.0, p), t_plus, n, int((d > 0).sum()), True)
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((counts ** 3 - counts).sum()) / 48.0
    z = (t_plus - mean - 0.5) / math.sqrt(var)
    return WilcoxonResult(float(norm.sf(z)), t_plus, n, int((d > 0).sum()), False)
