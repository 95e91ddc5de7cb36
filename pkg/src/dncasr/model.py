"""Micro-transformer DNCASR: Wav/Spk encoders, ASR decoder, linked DNC decoder.

Every attention mask in this module is a boolean ``keep`` tensor (True = may
attend). Masked keys get ``-inf`` before the softmax, so their weight is
exactly zero and outputs are exactly invariant to their contents.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

IGNORE = -100


@dataclass
class ModelConfig:
    num_blocks: int = 2
    num_heads: int = 2
    hidden: int = 64
    ffn: int = 256
    vocab: int = 53
    max_speakers: int = 8
    embed_dim: int = 32
    frame_dim: int = 32
    # positions per time unit; frames sit at integer positions, windows at their centres
    frame_rate: float = 10.0

    def __post_init__(self):
        if self.hidden % self.num_heads:
            raise ValueError("hidden must be divisible by num_heads")


def sinusoidal_at(positions: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal encodings of (possibly fractional) positions: (...,) -> (..., dim)."""
    pos = positions.to(torch.float64)[..., None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(pos.shape[:-1] + (dim,), dtype=torch.float64)
    pe[..., 0::2] = torch.sin(pos * div)
    pe[..., 1::2] = torch.cos(pos * div)[..., : dim // 2]
    return pe.to(dtype)


def sinusoidal(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    return sinusoidal_at(torch.arange(length), dim, dtype)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, keep: torch.Tensor | None = None) -> torch.Tensor:
    """Scaled dot-product attention over the last two dims.

    ``keep`` broadcasts against ``(..., Tq, Tk)``; every query row must keep
    at least one key.
    """
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if keep is not None:
        keep = keep.expand_as(scores)
        if not bool(keep.any(-1).all()):
            raise ValueError("attention query row with every key masked")
        scores = scores.masked_fill(~keep, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(hidden, hidden)
        self.k = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.o = nn.Linear(hidden, hidden)

    def _split(self, x):
        b, t, h = x.shape
        return x.view(b, t, self.heads, h // self.heads).transpose(1, 2)

    def forward(self, query, memory, keep=None):
        b, t, h = query.shape
        q, k, v = self._split(self.q(query)), self._split(self.k(memory)), self._split(self.v(memory))
        if keep is not None:
            keep = keep[:, None]
        out = attention(q, k, v, keep)
        return self.o(out.transpose(1, 2).reshape(b, t, h))


class FeedForward(nn.Module):
    def __init__(self, hidden: int, ffn: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(hidden, ffn), nn.ReLU(), nn.Linear(ffn, hidden))

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.hidden)
        self.attn = MultiHeadAttention(cfg.hidden, cfg.num_heads)
        self.ln2 = nn.LayerNorm(cfg.hidden)
        self.ff = FeedForward(cfg.hidden, cfg.ffn)

    def forward(self, x, keep):
        y = self.ln1(x)
        x = x + self.attn(y, y, keep)
        return x + self.ff(self.ln2(x))


def padding_keep(lengths: torch.Tensor, t: int) -> torch.Tensor:
    """(B, T, T) keep mask: every query may see the valid keys of its item."""
    valid = torch.arange(t)[None, :] < lengths[:, None]
    return valid[:, None, :].expand(-1, t, -1)


def causal_keep(b: int, t: int) -> torch.Tensor:
    return torch.ones(t, t, dtype=torch.bool).tril()[None].expand(b, -1, -1)


class Encoder(nn.Module):
    """Transformer encoder over a feature sequence; output length = input length."""

    def __init__(self, in_dim: int, cfg: ModelConfig, timed: bool = False):
        super().__init__()
        self.inp = nn.Linear(in_dim, cfg.hidden)
        # optional learned map of a second (time) encoding, added to the index encoding
        self.time = nn.Linear(cfg.hidden, cfg.hidden, bias=False) if timed else None
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_blocks))
        self.ln = nn.LayerNorm(cfg.hidden)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None, times: torch.Tensor | None = None) -> torch.Tensor:
        """``times`` (B, T) are extra fractional positions, used only by a timed encoder."""
        if x.dim() == 2:
            return self.forward(x[None], lengths, None if times is None else times[None])[0]
        b, t, _ = x.shape
        if t == 0:
            raise ValueError("encoder input is empty")
        if lengths is None:
            lengths = torch.full((b,), t)
        h = self.inp(x) + sinusoidal(t, self.inp.out_features, x.dtype)
        if self.time is not None and times is not None:
            h = h + self.time(sinusoidal_at(times, self.inp.out_features, x.dtype))
        keep = padding_keep(lengths, t)
        for layer in self.layers:
            h = layer(h, keep)
        return self.ln(h)


class ASRBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_sa = nn.LayerNorm(cfg.hidden)
        self.self_attn = MultiHeadAttention(cfg.hidden, cfg.num_heads)
        self.ln_ca = nn.LayerNorm(cfg.hidden)
        self.wav_attn = MultiHeadAttention(cfg.hidden, cfg.num_heads)
        self.ln_ff = nn.LayerNorm(cfg.hidden)
        self.ff = FeedForward(cfg.hidden, cfg.ffn)

    def forward(self, x, e_w, self_keep, cross_keep):
        y = self.ln_sa(x)
        x = x + self.self_attn(y, y, self_keep)
        x = x + self.wav_attn(self.ln_ca(x), e_w, cross_keep)
        w_ca = x
        return x + self.ff(self.ln_ff(x)), w_ca


class ASRDecoder(nn.Module):
    """Standard decoder: causal self-attention, Wav cross-attention, FFN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.vocab = cfg.vocab
        self.embed = nn.Embedding(cfg.vocab, cfg.hidden)
        self.blocks = nn.ModuleList(ASRBlock(cfg) for _ in range(cfg.num_blocks))
        self.ln = nn.LayerNorm(cfg.hidden)
        self.out = nn.Linear(cfg.hidden, cfg.vocab)

    def forward(self, e_w, inputs, wav_lengths=None):
        """``inputs`` are decoder inputs starting with ``<bos>`` (B, T).

        Returns word logits (B, T, vocab) and one W_CA tensor (B, T, hidden)
        per block.
        """
        if e_w.dim() == 2:
            logits, w = self.forward(e_w[None], inputs[None], wav_lengths)
            return logits[0], [x[0] for x in w]
        if inputs.numel() and (inputs.min() < 0 or inputs.max() >= self.vocab):
            raise ValueError("token id out of vocabulary")
        b, t = inputs.shape
        tw = e_w.shape[1]
        if wav_lengths is None:
            wav_lengths = torch.full((b,), tw)
        x = self.embed(inputs) + sinusoidal(t, self.embed.embedding_dim, e_w.dtype)
        self_keep = causal_keep(b, t)
        cross_keep = (torch.arange(tw)[None, :] < wav_lengths[:, None])[:, None, :].expand(-1, t, -1)
        w_cas = []
        for blk in self.blocks:
            x, w = blk(x, e_w, self_keep, cross_keep)
            w_cas.append(w)
        return self.out(self.ln(x)), w_cas


class DNCBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_sa = nn.LayerNorm(cfg.hidden)
        self.self_attn = MultiHeadAttention(cfg.hidden, cfg.num_heads)
        self.ln_spk = nn.LayerNorm(cfg.hidden)
        self.spk_attn = MultiHeadAttention(cfg.hidden, cfg.num_heads)
        self.ln_link = nn.LayerNorm(cfg.hidden)
        self.ln_link_mem = nn.LayerNorm(cfg.hidden)
        self.link_attn = MultiHeadAttention(cfg.hidden, cfg.num_heads)
        self.ln_ff = nn.LayerNorm(cfg.hidden)
        self.ff = FeedForward(cfg.hidden, cfg.ffn)

    def forward(self, x, e_s, self_keep, mask_s, link_mem=None, mask_l=None):
        y = self.ln_sa(x)
        x = x + self.self_attn(y, y, self_keep)
        x = x + self.spk_attn(self.ln_spk(x), e_s, mask_s)
        if link_mem is not None:
            x = x + self.link_attn(self.ln_link(x), self.ln_link_mem(link_mem), mask_l)
        return x + self.ff(self.ln_ff(x))


class DNCDecoder(nn.Module):
    """Speaker-index decoder with Spk and Link cross-attentions per block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.k_max = cfg.max_speakers
        # index k_max is <sbos>
        self.embed = nn.Embedding(cfg.max_speakers + 1, cfg.hidden)
        self.pad = nn.Parameter(torch.randn(cfg.hidden) * 0.02)
        self.blocks = nn.ModuleList(DNCBlock(cfg) for _ in range(cfg.num_blocks))
        self.ln = nn.LayerNorm(cfg.hidden)
        self.out = nn.Linear(cfg.hidden, cfg.max_speakers)

    @property
    def sbos(self) -> int:
        return self.k_max

    def link_memory(self, w_ca: torch.Tensor) -> torch.Tensor:
        """Prepend the ``<pad>`` slot: (B, T_tok, H) -> (B, 1 + T_tok, H)."""
        pad = self.pad.to(w_ca.dtype).expand(w_ca.shape[0], 1, -1)
        return torch.cat([pad, w_ca], dim=1)

    def forward(self, e_s, inputs, mask_s, w_cas=None, mask_l=None):
        """``inputs`` start with ``<sbos>`` (B, T); ``mask_s`` (B, T, T_win).

        ``w_cas`` is a per-block list of (B, T_tok, H) tensors, or None for the
        no-link decoder. ``mask_l`` is (B, T, 1 + T_tok) with column 0 the
        ``<pad>`` slot.
        """
        if e_s.dim() == 2:
            return self.forward(
                e_s[None], inputs[None], mask_s[None],
                None if w_cas is None else [w[None] for w in w_cas],
                None if mask_l is None else mask_l[None],
            )[0]
        b, t = inputs.shape
        if w_cas is not None:
            if mask_l is None or len(w_cas) != len(self.blocks):
                raise ValueError("link needs one W_CA per block and a mask_l")
            for w in w_cas:
                if w.shape[1] + 1 != mask_l.shape[-1]:
                    raise ValueError("mask_l columns do not match W_CA rows")
        x = self.embed(inputs) + sinusoidal(t, self.embed.embedding_dim, e_s.dtype)
        self_keep = causal_keep(b, t)
        for n, blk in enumerate(self.blocks):
            mem = None if w_cas is None else self.link_memory(w_cas[n])
            x = blk(x, e_s, self_keep, mask_s, mem, mask_l)
        return self.out(self.ln(x))


class DNCASR(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.wav_encoder = Encoder(cfg.frame_dim, cfg)
        self.spk_encoder = Encoder(cfg.embed_dim, cfg, timed=True)
        self.asr_decoder = ASRDecoder(cfg)
        self.dnc_decoder = DNCDecoder(cfg)

    def encode_speakers(self, windows, lengths=None, centres=None):
        """Spk encoder; windows also carry their segment-relative centre times.

        Frames sit at position ``f`` and a window centred ``c`` time units into
        its segment at ``c * frame_rate``, so the time encoding shares the
        Wav encoder's axis while the index encoding keeps meeting order.
        """
        pos = None if centres is None else centres * self.cfg.frame_rate
        return self.spk_encoder(windows, lengths, pos)

    def asr_parameters(self):
        yield from self.wav_encoder.parameters()
        yield from self.asr_decoder.parameters()

    def dnc_parameters(self):
        yield from self.spk_encoder.parameters()
        yield from self.dnc_decoder.parameters()

    def link_parameters(self):
        yield self.dnc_decoder.pad
        for blk in self.dnc_decoder.blocks:
            yield from blk.ln_link.parameters()
            yield from blk.ln_link_mem.parameters()
            yield from blk.link_attn.parameters()

    def reset_link(self, seed: int = 0) -> None:
        """Re-initialise the link cross-attention from scratch."""
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.link_parameters():
                if p.dim() == 2:
                    bound = 1.0 / math.sqrt(p.shape[1])
                    p.copy_(torch.rand(p.shape, generator=g, dtype=p.dtype) * 2 * bound - bound)
                elif p is self.dnc_decoder.pad:
                    p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.02)
            for blk in self.dnc_decoder.blocks:
                for ln in (blk.ln_link, blk.ln_link_mem):
                    ln.weight.fill_(1.0)
                    ln.bias.zero_()
                for lin in (blk.link_attn.q, blk.link_attn.k, blk.link_attn.v, blk.link_attn.o):
                    lin.bias.zero_()


# ---------------------------------------------------------------------------
# masks


@dataclass
class AttnMaskSet:
    mask_s: torch.Tensor  # (T_spk, T_win)
    mask_l: torch.Tensor | None  # (T_spk, 1 + T_tok); column 0 is <pad>


def build_mask_s(segment_spans: Sequence[tuple[int, int]], position_segments: Sequence[int], num_windows: int | None = None) -> torch.Tensor:
    if num_windows is None:
        num_windows = segment_spans[-1][1] if segment_spans else 0
    mask = torch.zeros(len(position_segments), num_windows, dtype=torch.bool)
    for i, s in enumerate(position_segments):
        a, b = segment_spans[s]
        mask[i, a:b] = True
    return mask


def build_mask_l(
    turn_token_spans: Sequence[tuple[int, int]],
    mode: str,
    context_len: int = 0,
    num_tokens: int | None = None,
    num_positions: int | None = None,
) -> torch.Tensor:
    """Link mask; column 0 is the ``<pad>`` slot, column 1 + p is token p.

    stage1: ``context_len`` leading rows see only ``<pad>``; the following
    rows, one per turn of the current segment, see that turn's tokens.
    stage2: one row per turn of the meeting, each seeing its own tokens.
    """
    if mode not in ("stage1", "stage2"):
        raise ValueError(f"unknown mask mode {mode!r}")
    if mode == "stage2":
        context_len = 0
    if num_tokens is None:
        num_tokens = turn_token_spans[-1][1] if turn_token_spans else 0
    rows = context_len + len(turn_token_spans)
    if num_positions is not None and num_positions != rows:
        raise ValueError(f"{num_positions} speaker positions but {rows} link rows")
    covered = 0
    for a, b in turn_token_spans:
        if a != covered or b <= a:
            raise ValueError("turn spans must partition the token positions")
        covered = b
    if covered != num_tokens:
        raise ValueError("turn spans must partition the token positions")
    mask = torch.zeros(rows, 1 + num_tokens, dtype=torch.bool)
    mask[:context_len, 0] = True
    for i, (a, b) in enumerate(turn_token_spans):
        mask[context_len + i, 1 + a:1 + b] = True
    return mask


# ---------------------------------------------------------------------------
# loss


def joint_loss(spk_logits, spk_targets, word_logits, word_targets):
    """Unweighted sum of the DNC and ASR mean cross-entropies.

    Returns ``(total, dnc_ce, asr_ce)``; either side may be None to skip it.
    """
    dnc = asr = None
    if spk_logits is not None:
        dnc = F.cross_entropy(spk_logits.reshape(-1, spk_logits.shape[-1]), spk_targets.reshape(-1), ignore_index=IGNORE)
    if word_logits is not None:
        asr = F.cross_entropy(word_logits.reshape(-1, word_logits.shape[-1]), word_targets.reshape(-1), ignore_index=IGNORE)
    parts = [x for x in (dnc, asr) if x is not None]
    return sum(parts), dnc, asr


# ---------------------------------------------------------------------------
# checkpoint file

MAGIC = b"DNCA"
FORMAT_VERSION = 1
_DTYPES = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.uint8: 3}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}
_NP = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}
CONFIG_ENTRY = "__config__"


def save_checkpoint(path: str | Path, model: DNCASR, extra: dict | None = None) -> None:
    meta = {"model": dataclasses.asdict(model.cfg), **(extra or {})}
    entries = [(CONFIG_ENTRY, torch.tensor(list(json.dumps(meta, sort_keys=True).encode()), dtype=torch.uint8))]
    entries += [(k, v.detach().cpu()) for k, v in model.state_dict().items()]
    write_tensor_table(path, entries)


def write_tensor_table(path: str | Path, entries: list[tuple[str, torch.Tensor]]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(entries)))
        for name, t in entries:
            nb = name.encode()
            code = _DTYPES[t.dtype]
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(struct.pack("<BB", code, t.dim()))
            f.write(struct.pack(f"<{t.dim()}I", *t.shape))
            f.write(np.ascontiguousarray(t.numpy()).astype(_NP[code], copy=False).tobytes())


def read_tensor_table(path: str | Path) -> list[tuple[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError("not a DNCA checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode()
        off += n
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = np.dtype(_NP[code])
        size = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape)
        off += size
        out.append((name, torch.from_numpy(arr.copy())))
    return out


def load_checkpoint(path: str | Path) -> tuple[DNCASR, dict]:
    entries = read_tensor_table(path)
    meta = json.loads(bytes(entries[0][1].tolist()).decode())
    model = DNCASR(ModelConfig(**meta["model"]))
    state = dict(entries[1:])
    if state and next(iter(state.values())).dtype == torch.float64:
        model = model.double()
    model.load_state_dict(state)
    return model, meta
