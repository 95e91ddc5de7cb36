import csv
import math

import pytest

from dncasr import harness
from dncasr.cli import main

SIM = """num_speakers=3
num_segments=3
utterances_per_segment=1,3
vocab_size=8
tokens_per_utterance=2,3
embed_dim=8
frame_dim=8
"""
TRAIN = """num_blocks=1
num_heads=2
hidden=16
ffn=32
vocab=11
max_speakers=6
embed_dim=8
frame_dim=8
lr=0.003
epochs_asr=2
epochs_dnc=2
epochs_stage1=1
epochs_stage2=1
epochs_parallel=2
batch_size=4
"""


@pytest.fixture
def corpora(tmp_path):
    (tmp_path / "sim.cfg").write_text(SIM)
    (tmp_path / "train.cfg").write_text(TRAIN)
    cfg = str(tmp_path / "sim.cfg")
    assert main(["gen-data", "--config", cfg, "--num", "8", "--out", str(tmp_path / "train.jsonl")]) == 0
    assert main(["gen-data", "--config", cfg, "--num", "3", "--offset", "100", "--out", str(tmp_path / "eval.jsonl")]) == 0
    assert main(["gen-data", "--config", cfg, "--num", "8", "--single-speaker", "--seed", "7",
                 "--out", str(tmp_path / "single.jsonl")]) == 0
    return tmp_path


def test_bad_config_key_exits_2(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("num_speakerz=3\n")
    assert main(["gen-data", "--config", str(tmp_path / "bad.cfg"), "--num", "1", "--out", str(tmp_path / "x")]) == 2
    assert "error" in capsys.readouterr().err


def test_invalid_and_infeasible_configs_exit_2(tmp_path):
    (tmp_path / "a.cfg").write_text("num_speakers=1\nutterances_per_segment=2,3\n")
    (tmp_path / "b.cfg").write_text("window_stride=2.0\n")
    for name in ("a.cfg", "b.cfg"):
        assert main(["gen-data", "--config", str(tmp_path / name), "--num", "1", "--out", str(tmp_path / "x")]) == 2


def test_missing_checkpoint_exits_1(tmp_path):
    assert main(["infer", "--ckpt", str(tmp_path / "none.ckpt"), "--corpus", "x", "--out", "y"]) == 1


def test_reference_scores_zero(corpora, tmp_path):
    ref = str(corpora / "eval.jsonl.ref.tsv")
    out = tmp_path / "s.csv"
    assert main(["score", "--ref", ref, "--hyp", ref, "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert rows[-2]["meeting_id"] == "ALL" and rows[-1]["meeting_id"] == "MEAN"
    for r in rows:
        assert float(r["wer"]) == 0 and float(r["cpwer"]) == 0 and float(r["der"]) == 0
        assert r["cpwer_multi"] == "nan" or float(r["cpwer_multi"]) == 0


def test_reference_round_trip_and_relabel(corpora):
    ref = harness.read_transcripts(corpora / "eval.jsonl.ref.tsv")
    # renaming speakers leaves cpWER and DER at zero
    hyp = {m: [[harness.TurnRecord("h" + t.speaker, t.words, t.start, t.end) for t in seg] for seg in segs]
           for m, segs in ref.items()}
    for mid in ref:
        r = harness.score_meeting(mid, ref[mid], hyp[mid], 0.25)
        assert r.cpwer == 0 and r.der == 0


def test_wilcoxon_command(tmp_path, capsys):
    base = tmp_path / "b.csv"
    sys_ = tmp_path / "s.csv"
    base.write_text("meeting_id,wer,cpwer,cpwer_multi,der\n" + "".join(f"m{i},0,{0.5 + i / 100},nan,0\n" for i in range(6)))
    sys_.write_text("meeting_id,wer,cpwer,cpwer_multi,der\n" + "".join(f"m{i},0,0.4,nan,0\n" for i in range(6)))
    assert main(["wilcoxon", "--baseline", str(base), "--system", str(sys_)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "p_value,n_improved,n_total"
    p, n_imp, n = lines[1].split(",")
    assert float(p) == pytest.approx(1 / 64) and n_imp == "6" and n == "6"


def test_cda_angles_csv(tmp_path):
    out = tmp_path / "a.csv"
    assert main(["cda-angles", "--dim", "8", "--scales", "0,10,1000", "--samples", "50", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["scale"] for r in rows] == ["0", "10", "1000"]
    angles = [float(r["mean_abs_angle_deg"]) for r in rows]
    assert angles[0] > angles[1] > angles[2] >= 0
    again = tmp_path / "b.csv"
    main(["cda-angles", "--dim", "8", "--scales", "0,10,1000", "--samples", "50", "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()


def test_mismatched_model_is_rejected(corpora, tmp_path):
    (tmp_path / "wrong.cfg").write_text(TRAIN.replace("frame_dim=8", "frame_dim=4"))
    rc = main(["pretrain-asr", "--corpus", str(corpora / "train.jsonl"), "--train-config", str(tmp_path / "wrong.cfg"),
               "--out", str(tmp_path / "a.ckpt")])
    assert rc == 2


def test_stage2_requires_init(corpora):
    rc = main(["finetune", "--stage", "2", "--corpus", str(corpora / "train.jsonl"), "--out", "x.ckpt"])
    assert rc == 2


def _pretrain(d):
    tc = str(d / "train.cfg")
    assert main(["pretrain-asr", "--corpus", str(d / "train.jsonl"), "--train-config", tc,
                 "--out", str(d / "asr.ckpt"), "--log", str(d / "log.csv")]) == 0
    assert main(["pretrain-dnc", "--corpus", str(d / "single.jsonl"), "--train-config", tc,
                 "--out", str(d / "dnc.ckpt"), "--log", str(d / "log.csv")]) == 0


def test_cli_pipeline(corpora):
    d = corpora
    _pretrain(d)
    tc = str(d / "train.cfg")
    common = ["--corpus", str(d / "train.jsonl"), "--train-config", tc, "--log", str(d / "log.csv")]
    assert main(["finetune", "--stage", "1", *common, "--asr-ckpt", str(d / "asr.ckpt"),
                 "--dnc-ckpt", str(d / "dnc.ckpt"), "--out", str(d / "s1.ckpt")]) == 0
    assert main(["finetune", "--stage", "2", *common, "--init", str(d / "s1.ckpt"), "--cda", "0:10",
                 "--out", str(d / "s2.ckpt")]) == 0
    for mode in ("s1", "s2"):
        hyp = d / f"{mode}.tsv"
        assert main(["infer", "--mode", mode, "--ckpt", str(d / "s2.ckpt"), "--corpus", str(d / "eval.jsonl"),
                     "--out", str(hyp), "--beam-asr", "2", "--beam-dnc", "2"]) == 0
        out = d / f"{mode}.csv"
        assert main(["score", "--ref", str(d / "eval.jsonl.ref.tsv"), "--hyp", str(hyp), "--out", str(out)]) == 0
        rows = list(csv.DictReader(out.open()))
        assert len(rows) == 5 and all(math.isfinite(float(r["cpwer"])) for r in rows)
    phases = {r["phase"] for r in csv.DictReader((d / "log.csv").open())}
    assert phases == {"pretrain_asr", "pretrain_dnc", "finetune_stage1", "finetune_stage2"}


def test_run_experiment_all_variants_is_reproducible(corpora, capsys):
    d = corpora
    _pretrain(d)
    spec = d / "exp.spec"
    spec.write_text(
        f"variant={','.join(harness.VARIANTS)}\ntrain_config={d / 'train.cfg'}\ntrain_corpus={d / 'train.jsonl'}\n"
        f"eval_corpus={d / 'eval.jsonl'}\nasr_checkpoint={d / 'asr.ckpt'}\ndnc_checkpoint={d / 'dnc.ckpt'}\n"
        f"beam_asr=2\nbeam_dnc=2\ncda_epochs=1\nworkspace={d / 'ws'}\n")
    summaries = []
    for results in ("r1", "r2"):
        assert main(["run-experiment", "--spec", str(spec), "--results", str(d / results)]) == 0
        summaries.append(capsys.readouterr().out.strip())
    rows = list(csv.DictReader(open(summaries[0])))
    assert [r["variant"] for r in rows] == list(harness.VARIANTS)
    a, b = (open(s, "rb").read() for s in summaries)
    assert a == b
    # a fresh workspace retrains every checkpoint; results must still match byte for byte
    spec.write_text(spec.read_text().replace(f"workspace={d / 'ws'}", f"workspace={d / 'ws2'}"))
    assert main(["run-experiment", "--spec", str(spec), "--results", str(d / "r3")]) == 0
    c = open(capsys.readouterr().out.strip(), "rb").read()
    assert c == a


def test_unknown_variant_exits_2(tmp_path):
    spec = tmp_path / "s.spec"
    spec.write_text("variant=nope\n")
    assert main(["run-experiment", "--spec", str(spec)]) == 2
