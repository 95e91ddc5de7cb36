"""Shared builders for small models and inputs."""

import numpy as np
import torch

from dncasr.model import DNCASR, ModelConfig, build_mask_l, build_mask_s, joint_loss

TINY = ModelConfig(num_blocks=2, num_heads=2, hidden=8, ffn=16, vocab=9, max_speakers=4, embed_dim=6, frame_dim=5)


def tiny_model(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return DNCASR(TINY).to(dtype)


def tiny_inputs(seed=0, dtype=torch.float64):
    """One meeting-sized example: 3 segments, 5 speaker positions, 7 link tokens.

    Positions 0-1 are stage-1 context (``<pad>`` only); positions 2-4 belong to
    the current segment and split its tokens into turns of 2, 3 and 2.
    """
    g = torch.Generator().manual_seed(seed)
    windows = torch.randn(9, TINY.embed_dim, generator=g, dtype=dtype)
    frames = torch.randn(11, TINY.frame_dim, generator=g, dtype=dtype)
    segment_spans = [(0, 3), (3, 5), (5, 9)]
    position_segments = [0, 1, 2, 2, 2]
    mask_s = build_mask_s(segment_spans, position_segments, 9)
    tokens = torch.tensor([3, 4, 1, 5, 6, 1, 2])  # w w <sc> w w <sc> <eos> with ids >= 3 words
    turns = [(0, 2), (2, 5), (5, 7)]
    mask_l = build_mask_l(turns, "stage1", context_len=2, num_tokens=7)
    spk_inputs = torch.tensor([TINY.max_speakers, 0, 1, 0, 2])
    spk_targets = torch.tensor([0, 1, 0, 2, 1])
    asr_inputs = torch.cat([torch.tensor([0]), tokens[:-1]])
    return dict(windows=windows, frames=frames, mask_s=mask_s, mask_l=mask_l, spk_inputs=spk_inputs,
                spk_targets=spk_targets, asr_inputs=asr_inputs, asr_targets=tokens, centres=torch.linspace(0.75, 2.75, 9))


def tiny_loss(model, x):
    """Joint loss with W_CA computed in-graph, so gradients reach every module."""
    e_w = model.wav_encoder(x["frames"])
    wl, w_ca = model.asr_decoder(e_w, x["asr_inputs"])
    e_s = model.encode_speakers(x["windows"], None, x["centres"])
    sl = model.dnc_decoder(e_s, x["spk_inputs"], x["mask_s"], w_ca, x["mask_l"])
    return joint_loss(sl, x["spk_targets"], wl, x["asr_targets"])[0]


def finite_difference_errors(model, loss_fn, eps=1e-4, max_entries=None, seed=0, floor=1e-6):
    """Per-parameter relative error between autograd and central differences.

    ``floor`` keeps exactly-zero gradients (attention key biases, which softmax
    cancels) from turning float64 rounding noise into a relative error of 1.
    """
    rng = np.random.default_rng(seed)
    model.zero_grad()
    loss_fn().backward()
    out = {}
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and len(idx) > max_entries:
            idx = rng.choice(idx, max_entries, replace=False)
        num = np.empty(len(idx))
        with torch.no_grad():
            for j, i in enumerate(idx):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                num[j] = (up - down) / (2 * eps)
        ana = p.grad.view(-1).numpy()[idx]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), floor)
        out[name] = float(np.linalg.norm(ana - num) / denom)
    return out


def small_setup(num=6, seed=0, single=False, **sim):
    """A few tiny meetings plus a matching small model config."""
    import dataclasses

    from dncasr import vocab
    from dncasr.data import featurize_corpus
    from dncasr.meeting_sim import FrameCodebook, SimConfig, gen_corpus

    cfg = SimConfig(num_speakers=3, num_segments=3, utterances_per_segment=(1, 1) if single else (1, 3),
                    vocab_size=8, tokens_per_utterance=(2, 3), embed_dim=8, frame_dim=8, seed=seed, **sim)
    meetings = gen_corpus(cfg, num)
    data = featurize_corpus(meetings, FrameCodebook.from_config(cfg))
    mc = ModelConfig(num_blocks=1, num_heads=2, hidden=16, ffn=32, vocab=vocab.model_vocab_size(cfg.vocab_size),
                     max_speakers=6, embed_dim=8, frame_dim=8, frame_rate=cfg.frame_rate)
    return dataclasses.replace(cfg), meetings, data, mc


ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[n])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
