"""End-to-end command-line behavior, run in process through ``main``.

The heavyweight contract here is reproducibility: the same train
invocation must produce byte-identical history and checkpoint files, and
the resolved config written next to them must reproduce the run when fed
back in.
"""

import json

import numpy as np
import pytest

from nahtm.cli import main, read_config_file, read_grid_file, write_config_file
from nahtm.corpus import load_corpus
from nahtm.embeddings import load_embeddings
from nahtm.errors import ConfigError
from nahtm.model import load_checkpoint
from nahtm.trainer import TrainConfig, read_history_csv
from util import random_docs

CFG = """\
# tiny but full training setup
k = 3
l = 6
max_epochs = 3
batch_size = 4
seed = 2
variant = HKL
"""


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("NAHTM_SEED", raising=False)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A built corpus, embeddings, and config file shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(7)
    docs = random_docs(rng, 14, 24, sentences=(2, 4), sentence_len=(4, 7))
    (root / "docs.txt").write_text("\n".join(docs) + "\n")
    assert main([
        "build", str(root / "docs.txt"), "--out", str(root / "corpus"),
        "--min-token-len", "1", "--keep-stopwords",
        "--ratios", "0.5,0.25,0.25", "--seed", "3",
    ]) == 0
    assert main([
        "synth-embed", "--corpus", str(root / "corpus"),
        "--out", str(root / "emb"), "--m", "5", "--seed", "9",
    ]) == 0
    (root / "cfg.txt").write_text(CFG)
    return root


def _train_args(ws, out, *extra):
    return ["train", "--corpus", str(ws / "corpus"), "--out", str(out),
            "--config", str(ws / "cfg.txt"), "--embeddings", str(ws / "emb"),
            "--quiet", *extra]


class TestBuild:
    def test_corpus_round_trips(self, workspace):
        corpus = load_corpus(workspace / "corpus")
        assert corpus.num_docs == 14
        assert len(corpus.split_indices("train")) == 7

    def test_directory_of_txt_files(self, tmp_path):
        d = tmp_path / "texts"
        d.mkdir()
        (d / "b.txt").write_text("the quick brown fox jumps. it rests after.")
        (d / "a.txt").write_text("alpha beta gamma delta here. more words follow now.")
        code = main(["build", str(d), "--out", str(tmp_path / "c"),
                     "--ratios", "0.34,0.33,0.33", "--min-token-len", "1",
                     "--keep-stopwords"])
        assert code == 2  # 2 docs cannot fill three splits
        (d / "c.txt").write_text("third document text arrives. split needs three parts.")
        assert main(["build", str(d), "--out", str(tmp_path / "c"),
                     "--ratios", "0.34,0.33,0.33", "--min-token-len", "1",
                     "--keep-stopwords"]) == 0
        assert load_corpus(tmp_path / "c").num_docs == 3

    def test_jsonl_input(self, tmp_path):
        src = tmp_path / "in.jsonl"
        rows = [{"text": "alpha beta gamma. delta epsilon zeta."},
                {"text": "eta theta iota. kappa lam mu."},
                {"text": "nu xi omicron. pi rho sigma."}]
        src.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        assert main(["build", str(src), "--out", str(tmp_path / "c"),
                     "--ratios", "0.34,0.33,0.33"]) == 0
        assert load_corpus(tmp_path / "c").num_docs == 3

    def test_jsonl_without_text_key(self, tmp_path):
        src = tmp_path / "in.jsonl"
        src.write_text('{"body": "alpha"}\n')
        assert main(["build", str(src), "--out", str(tmp_path / "c")]) == 2

    def test_missing_input_is_data_error(self, tmp_path):
        assert main(["build", str(tmp_path / "nope.txt"),
                     "--out", str(tmp_path / "c")]) == 2

    def test_bad_ratios_are_config_errors(self, workspace, tmp_path):
        src = workspace / "docs.txt"
        for ratios in ("0.5,0.5", "a,b,c", "0.8,0.1,0.2"):
            assert main(["build", str(src), "--out", str(tmp_path / "c"),
                         "--ratios", ratios]) == 1


class TestSynthEmbed:
    def test_embeddings_validate_against_corpus(self, workspace):
        corpus = load_corpus(workspace / "corpus")
        emb = load_embeddings(workspace / "emb", corpus)
        assert emb.m == 5
        assert emb.words.shape == (corpus.vocab_size, 5)

    def test_same_seed_same_bytes(self, workspace, tmp_path):
        a, b = tmp_path / "e1", tmp_path / "e2"
        for out in (a, b):
            assert main(["synth-embed", "--corpus", str(workspace / "corpus"),
                         "--out", str(out), "--m", "4", "--seed", "11"]) == 0
        assert (a / "words.bin").read_bytes() == (b / "words.bin").read_bytes()
        assert (a / "sentences.bin").read_bytes() == (b / "sentences.bin").read_bytes()


class TestConfigFiles:
    def test_read_types_comments_and_blanks(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("# comment\n\nk = 4\nlearning_rate = 0.01\n"
                     "hard_weights = true\nvariant = S2\n")
        assert read_config_file(p) == {
            "k": 4, "learning_rate": 0.01, "hard_weights": True, "variant": "S2",
        }

    @pytest.mark.parametrize("body,fragment", [
        ("k = 4\nk = 5\n", "duplicate"),
        ("mystery = 1\n", "unknown config key"),
        ("k 4\n", "expected 'key = value'"),
        ("k = many\n", "cannot read"),
        ("hard_weights = 1\n", "cannot read"),
    ])
    def test_rejects_malformed(self, tmp_path, body, fragment):
        p = tmp_path / "c.txt"
        p.write_text(body)
        with pytest.raises(ConfigError, match=fragment):
            read_config_file(p)

    def test_write_then_read_is_identity(self, tmp_path):
        cfg = TrainConfig(k=5, l=7, variant="S1", hard_weights=True,
                          learning_rate=0.0125, seed=42)
        p = tmp_path / "resolved.txt"
        write_config_file(cfg, p)
        assert TrainConfig.from_dict(read_config_file(p)) == cfg

    def test_grid_file_lists(self, tmp_path):
        p = tmp_path / "g.txt"
        p.write_text("k = 2, 3\nseed = 0\nvariant = KL, S2\n")
        assert read_grid_file(p) == {
            "k": [2, 3], "seed": [0], "variant": ["KL", "S2"],
        }


class TestTrainCommand:
    def test_writes_all_artifacts(self, workspace, tmp_path):
        out = tmp_path / "run"
        assert main(_train_args(workspace, out)) == 0
        for name in ("model.ckpt", "history.csv", "history.svg", "config.txt"):
            assert (out / name).is_file(), name
        params, hyper, header = load_checkpoint(out / "model.ckpt")
        assert hyper.variant == "HKL"
        assert header["extra"]["seed"] == 2
        assert len(read_history_csv(out / "history.csv")) == 3

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(_train_args(workspace, a)) == 0
        assert main(_train_args(workspace, b)) == 0
        assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()

    def test_flags_override_config_file(self, workspace, tmp_path):
        out = tmp_path / "run"
        assert main(_train_args(workspace, out, "--k", "2", "--epochs", "2")) == 0
        resolved = read_config_file(out / "config.txt")
        assert resolved["k"] == 2
        assert resolved["max_epochs"] == 2

    def test_env_seed_beats_flags_and_file(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("NAHTM_SEED", "77")
        out = tmp_path / "run"
        assert main(_train_args(workspace, out, "--seed", "5")) == 0
        assert read_config_file(out / "config.txt")["seed"] == 77
        monkeypatch.setenv("NAHTM_SEED", "many")
        assert main(_train_args(workspace, tmp_path / "r2")) == 1

    def test_config_written_reproduces_the_run(self, workspace, tmp_path):
        first = tmp_path / "first"
        again = tmp_path / "again"
        assert main(_train_args(workspace, first)) == 0
        assert main(["train", "--corpus", str(workspace / "corpus"),
                     "--out", str(again), "--config", str(first / "config.txt"),
                     "--embeddings", str(workspace / "emb"), "--quiet"]) == 0
        assert (first / "model.ckpt").read_bytes() == (again / "model.ckpt").read_bytes()

    def test_exit_codes(self, workspace, tmp_path):
        out = str(tmp_path / "x")
        corpus = str(workspace / "corpus")
        emb = str(workspace / "emb")
        assert main(["train", "--corpus", str(tmp_path / "missing"),
                     "--out", out, "--quiet"]) == 2
        assert main(["train", "--corpus", corpus, "--out", out,
                     "--variant", "WAT", "--quiet"]) == 1
        assert main(["train", "--corpus", corpus, "--out", out,
                     "--embeddings", emb, "--synth-embeddings", "4", "0",
                     "--quiet"]) == 1
        # S1 needs embeddings: refusing to run without them is a config error
        assert main(["train", "--corpus", corpus, "--out", out,
                     "--variant", "S1", "--quiet"]) == 1
        # an absurd step size blows the model up; the failure is numeric
        assert main(["train", "--corpus", corpus, "--out", out,
                     "--embeddings", emb, "--config", str(workspace / "cfg.txt"),
                     "--learning-rate", "1e6", "--quiet"]) == 3

    def test_synth_embeddings_flag_matches_saved_embeddings(self, workspace, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(_train_args(workspace, a)) == 0
        assert main(["train", "--corpus", str(workspace / "corpus"),
                     "--out", str(b), "--config", str(workspace / "cfg.txt"),
                     "--synth-embeddings", "5", "9", "--quiet"]) == 0
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()


class TestEvalCommand:
    def test_writes_metrics_and_topics(self, workspace, tmp_path):
        run = tmp_path / "run"
        assert main(_train_args(workspace, run)) == 0
        out = tmp_path / "eval"
        assert main(["eval", "--corpus", str(workspace / "corpus"),
                     "--model", str(run / "model.ckpt"), "--out", str(out),
                     "--embeddings", str(workspace / "emb"),
                     "--top-n", "4"]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics) == {
            "doc_perplexity", "sent_perplexity", "topics", "npmi_mean",
            "npmi_coverage", "external_npmi_mean", "external_npmi_coverage",
        }
        assert len(metrics["topics"]) == 3
        assert all(len(t["words"]) == 4 for t in metrics["topics"])
        lines = (out / "topics.txt").read_text().strip().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("topic 00")

    def test_reference_corpus_fills_external_fields(self, workspace, tmp_path):
        run = tmp_path / "run"
        assert main(_train_args(workspace, run)) == 0
        out = tmp_path / "eval"
        assert main(["eval", "--corpus", str(workspace / "corpus"),
                     "--model", str(run / "model.ckpt"), "--out", str(out),
                     "--embeddings", str(workspace / "emb"),
                     "--reference", str(workspace / "corpus")]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["external_npmi_mean"] is not None

    def test_missing_model_is_data_error(self, workspace, tmp_path):
        assert main(["eval", "--corpus", str(workspace / "corpus"),
                     "--model", str(tmp_path / "no.ckpt"),
                     "--out", str(tmp_path / "out")]) == 2


class TestGridCommand:
    def test_grid_artifacts_and_winner(self, workspace, tmp_path):
        grid = tmp_path / "grid.txt"
        grid.write_text("k = 2, 3\n")
        out = tmp_path / "out"
        assert main(["grid", "--corpus", str(workspace / "corpus"),
                     "--out", str(out), "--grid", str(grid),
                     "--config", str(workspace / "cfg.txt"),
                     "--embeddings", str(workspace / "emb"), "--quiet"]) == 0
        payload = json.loads((out / "grid.json").read_text())
        assert [r["settings"] for r in payload["records"]] == [{"k": 2}, {"k": 3}]
        best = TrainConfig.from_dict(read_config_file(out / "best_config.txt"))
        winner = min(payload["records"], key=lambda r: r["best_valid_perplexity"])
        assert best.k == winner["settings"]["k"]
        assert payload["best"]["k"] == best.k

    def test_unknown_grid_key_is_config_error(self, workspace, tmp_path):
        grid = tmp_path / "grid.txt"
        grid.write_text("warmup = 1, 2\n")
        assert main(["grid", "--corpus", str(workspace / "corpus"),
                     "--out", str(tmp_path / "o"), "--grid", str(grid),
                     "--quiet"]) == 1


class TestUsage:
    def test_no_command_is_usage_error(self):
        assert main([]) == 1

    def test_unknown_command_is_usage_error(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert main(["train", "--out", "/tmp/x"]) == 1
