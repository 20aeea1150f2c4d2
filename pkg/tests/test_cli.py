import json

import numpy as np
import pytest

from uniseq.cli import build_parser, parse_args, run_command
from uniseq.tokenization import BpeModel
from uniseq.vision import save_image

SMALL = ["--set", "d_model=16", "--set", "heads=2", "--set", "d_ffn=32", "--set", "encoder_layers=1",
         "--set", "decoder_layers=1", "--set", "max_src=48", "--set", "max_tgt=12", "--set", "embed_hidden=2"]
WORDS = "the left lung is clear a small mass seen on right side no acute findings yes maybe".split()


def run(capsys, *argv):
    code = run_command([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def lines(text):
    return [json.loads(ln) for ln in text.splitlines() if ln.strip()]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    (d / "corpus.txt").write_text("\n".join(" ".join(rng.choice(WORDS, size=8)) for _ in range(40)) + "\n")
    manifest = []
    for i in range(4):
        px = np.zeros((16, 16), dtype=np.uint8)
        px[(i // 2) * 8:(i // 2) * 8 + 8, (i % 2) * 8:(i % 2) * 8 + 8] = 255
        save_image(d / f"img{i}.pgm", px)
        manifest.append({"task": "vqa", "text": {"Question": "is the left lung clear?"}, "target": "yes" if i % 2 else "no",
                         "images": [f"img{i}.pgm"], "answer_set": ["yes", "no"]})
        manifest.append({"task": "summarization", "text": {"Text": " ".join(rng.choice(WORDS, size=12))},
                         "target": "a small mass"})
    (d / "m.jsonl").write_text("".join(json.dumps(r) + "\n" for r in manifest))
    return d


@pytest.fixture(scope="module")
def built(work):
    """bpe -> vocab -> codebook -> pretrain -> finetune, shared by the read-only tests."""
    d = work
    assert run_command(["bpe-train", "--corpus", str(d / "corpus.txt"), "--merges", "30", "--out", str(d / "m.bpe"),
                        "--report", str(d / "bpe.jsonl")]) == 0
    assert run_command(["vocab-build", "--bpe", str(d / "m.bpe"), "--locations", "16", "--vision", "32",
                        "--out", str(d / "v.uvocab"), "--report", str(d / "vocab.jsonl")]) == 0
    assert run_command(["vq-train", "--manifest", str(d / "m.jsonl"), "--k", "4", "--iterations", "5",
                        "--out", str(d / "cb.uvqc"), "--report", str(d / "vq.jsonl")]) == 0
    common = ["--vocab", str(d / "v.uvocab"), *SMALL, "--batch-size", "2", "--no-timestamp"]
    assert run_command(["pretrain", "--text", str(d / "corpus.txt"), "--manifest", str(d / "m.jsonl"),
                        "--codebook", str(d / "cb.uvqc"), "--max-steps", "6", "--out", str(d / "pre.ummc"),
                        "--report", str(d / "pre.jsonl"), *common]) == 0
    assert run_command(["finetune", "--manifest", str(d / "m.jsonl"), "--init", str(d / "pre.ummc"), "--epochs", "2",
                        "--lr", "3e-3", "--out", str(d / "ft.ummc"), "--report", str(d / "ft.jsonl"),
                        "--figures", str(d / "figs"), "--vocab", str(d / "v.uvocab"), "--batch-size", "2",
                        "--no-timestamp"]) == 0
    return d


def test_vocab_build_total_348(tmp_path, capsys):
    # 39 merges on top of 5 specials and 256 bytes gives T = 300
    text = " ".join(f"w{i:02d}" for i in range(100))
    bpe = tmp_path / "m.bpe"
    code, out, _ = run(capsys, "bpe-train", "--corpus", tmp_path / "c.txt", "--merges", 39, "--out", bpe)
    assert code == 1  # corpus missing
    (tmp_path / "c.txt").write_text(text)
    code, out, _ = run(capsys, "bpe-train", "--corpus", tmp_path / "c.txt", "--merges", 39, "--out", bpe)
    assert code == 0 and lines(out)[-1]["text_tokens"] == 300 == BpeModel.load(bpe).size
    code, out, _ = run(capsys, "vocab-build", "--bpe", bpe, "--locations", 16, "--vision", 32,
                       "--out", tmp_path / "v.uvocab")
    assert code == 0 and lines(out)[-1]["total"] == 348
    assert (tmp_path / "v.uvocab").read_text().startswith("uvocab v1 300 16 32")


def test_pipeline_outputs(built):
    d = built
    steps = lines((d / "ft.jsonl").read_text())
    assert steps[-1]["type"] == "summary" and steps[-1]["init"] == "from_checkpoint"
    assert [r["step"] for r in steps[:-1]] == list(range(1, len(steps)))
    assert (d / "figs" / "finetune_loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert "timestamp" not in steps[-1]
    assert lines((d / "vq.jsonl").read_text())[-1]["k"] == 4


def test_eval_rouge_report(built, capsys):
    d = built
    code, out, _ = run(capsys, "eval", "--ckpt", d / "ft.ummc", "--vocab", d / "v.uvocab", "--manifest", d / "m.jsonl",
                       "--metrics", "rouge_l", "--no-timestamp")
    assert code == 0
    recs = lines(out)
    episodes = [r for r in recs if r["type"] == "episode"]
    assert len(episodes) == 8
    assert all(set(r["rouge_l"]) == {"precision", "recall", "f"} for r in episodes)
    assert recs[-1]["metric_params"]["rouge_l"]["beta"] == 1.2
    vqa = [r for r in episodes if r["task"] == "vqa"]
    assert all(r["generated"] in ("yes", "no") for r in vqa)


def test_generate_beam_one_matches_greedy(built, capsys):
    d = built
    base = ["generate", "--ckpt", d / "ft.ummc", "--vocab", d / "v.uvocab", "--manifest", d / "m.jsonl", "--no-timestamp"]
    code_a, a, _ = run(capsys, *base)
    code_b, b, _ = run(capsys, *base, "--beam", "1")
    assert code_a == code_b == 0
    gen = lambda out: [(r["generated"], r["tokens"]) for r in lines(out) if r["type"] == "episode"]
    assert gen(a) == gen(b)


def test_byte_reproducible(built, tmp_path, capsys):
    """Identical argv twice: checkpoint, report, figure and eval output are byte-identical."""
    d = built
    train_argv = ["finetune", "--manifest", d / "m.jsonl", "--vocab", d / "v.uvocab", "--epochs", "1",
                  "--batch-size", "2", *SMALL, "--out", tmp_path / "c.ummc", "--report", tmp_path / "r.jsonl",
                  "--figures", tmp_path / "f", "--seed", "7", "--no-timestamp"]
    eval_argv = ["eval", "--ckpt", tmp_path / "c.ummc", "--vocab", d / "v.uvocab", "--manifest", d / "m.jsonl",
                 "--metrics", "accuracy,rouge_l,cider", "--no-timestamp"]
    artifacts = []
    for _ in range(2):
        assert run(capsys, *train_argv)[0] == 0
        code, out, _ = run(capsys, *eval_argv)
        assert code == 0
        artifacts.append([(tmp_path / "c.ummc").read_bytes(), (tmp_path / "r.jsonl").read_bytes(),
                          (tmp_path / "f" / "finetune_loss.png").read_bytes(), out])
    assert artifacts[0] == artifacts[1]


def test_timestamp_present_by_default(capsys):
    code, out, _ = run(capsys, "param-count", "--preset", "tiny")
    assert code == 0 and "timestamp" in lines(out)[-1]


def test_ablation_and_zero_shot(built, capsys, tmp_path):
    d = built
    code, out, _ = run(capsys, "ablate-truncation", "--ckpt", d / "ft.ummc", "--vocab", d / "v.uvocab",
                       "--manifest", d / "m.jsonl", "--cap", "3", "--figures", tmp_path, "--no-timestamp")
    res = lines(out)[-1]
    assert code == 0 and res["cap"] == 3 and res["max_truncated_field_tokens"] <= 3
    assert res["delta"] == res["truncated"] - res["full"]
    assert (tmp_path / "truncation_ablation.png").exists()
    (tmp_path / "classes.json").write_text(json.dumps({"vqa": ["yes", "no"]}))
    code, out, _ = run(capsys, "zero-shot", "--ckpt", d / "ft.ummc", "--vocab", d / "v.uvocab",
                       "--manifest", d / "m.jsonl", "--classes", tmp_path / "classes.json", "--no-timestamp")
    tasks = {r["task"]: r for r in lines(out) if r["type"] == "task"}
    assert code == 0 and tasks["vqa"]["kind"] == "classification" and tasks["summarization"]["kind"] == "accuracy"


def test_gridsearch(built, capsys, tmp_path):
    d = built
    code, out, _ = run(capsys, "gridsearch", "--vocab", d / "v.uvocab", "--manifest", d / "m.jsonl",
                       "--dev", d / "m.jsonl", "--lrs", "1e-3", "2e-3", "--batch-sizes", "2", "4", "--max-steps", "1",
                       *SMALL, "--figures", tmp_path, "--no-timestamp")
    recs = lines(out)
    assert code == 0 and sum(r["type"] == "cell" for r in recs) == 4
    best = recs[-1]["best"]
    top = max(r["score"] for r in recs if r["type"] == "cell")
    assert any(r["score"] == top and r["lr"] == best["lr"] and r["batch_size"] == best["batch_size"]
               for r in recs if r["type"] == "cell")
    assert (tmp_path / "gridsearch.png").exists()


def test_param_count_enumeration(capsys):
    code, out, _ = run(capsys, "param-count", "--no-timestamp")
    presets = [r for r in lines(out) if r["type"] == "preset"]
    assert code == 0 and [r["preset"] for r in presets] == ["tiny", "small", "base"]
    assert all(r["params"] == r["enumerated"] for r in presets)


def test_instruct_defaults_to_twenty_epochs():
    args = parse_args(["instruct", "--vocab", "v", "--manifest", "m", "--out", "o"])
    assert args.epochs == 20
    assert parse_args(["finetune", "--vocab", "v", "--manifest", "m", "--out", "o"]).epochs == 1


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"vocab": "v", "manifest": "m", "out": "o", "lr": 0.5, "epochs": 3,
                               "model": {"d_model": 32}}))
    args = parse_args(["finetune", "--config", str(cfg), "--lr", "0.25"])
    assert (args.lr, args.epochs, args.vocab, args.model) == (0.25, 3, "v", {"d_model": 32})


@pytest.mark.parametrize("argv", [["nonsense"], ["param-count", "--bogus"], [], ["eval", "--ckpt", "x"]])
def test_usage_errors_exit_1(argv, capsys):
    code, _, err = run(capsys, *argv)
    assert code == 1 and "usage" in err


def test_validation_errors_exit_1(tmp_path, capsys):
    assert run(capsys, "eval", "--ckpt", tmp_path / "missing", "--vocab", "v", "--manifest", "m")[0] == 1
    assert run(capsys, "param-count", "--set", "nonsense=3")[0] == 1
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"unknown_option": 1}))
    assert run(capsys, "param-count", "--config", cfg)[0] == 1


def test_runtime_error_exit_2(built, tmp_path, capsys):
    bad = tmp_path / "bad.ummc"
    bad.write_bytes(b"NOPE" + b"\0" * 32)
    code, _, err = run(capsys, "eval", "--ckpt", bad, "--vocab", built / "v.uvocab", "--manifest", built / "m.jsonl")
    assert code == 2 and "magic" in err


def test_every_subcommand_registered():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"bpe-train", "vocab-build", "vq-train", "pretrain", "finetune", "instruct", "eval", "generate",
                        "gridsearch", "ablate-truncation", "zero-shot", "param-count"}
    assert all(any(a.dest == "seed" for a in p._actions) for p in sub.values())
