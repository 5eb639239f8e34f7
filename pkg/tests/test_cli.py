"""Command-line interface: exit codes, outputs, and subcommand plumbing."""

import json

import pytest

from conftest import make_story_corpus, tiny_config
from gqvae.cli import build_parser, main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A trained tiny run shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.txt"
    corpus.write_text(make_story_corpus(2_000, seed=5), encoding="utf-8")
    config = root / "config.json"
    config.write_text(json.dumps(tiny_config(total_steps=3).to_dict()), encoding="utf-8")
    run_dir = root / "run"
    code = main(
        [
            "train",
            "--config", str(config),
            "--corpus", str(corpus),
            "--out", str(run_dir),
        ]
    )
    assert code == 0
    return root


class TestTrain:
    def test_outputs_exist(self, workdir):
        assert (workdir / "run" / "checkpoint_final.pt").exists()

    def test_missing_config_file(self, workdir):
        code = main(
            ["train", "--config", str(workdir / "nope.json"), "--corpus", str(workdir / "corpus.txt")]
        )
        assert code == 2

    def test_missing_corpus(self, workdir, tmp_path):
        code = main(["train", "--corpus", str(tmp_path / "nope.txt"), "--out", str(tmp_path)])
        assert code == 1

    def test_invalid_config_value(self, workdir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"codebook_size": 1}), encoding="utf-8")
        code = main(
            ["train", "--config", str(bad), "--corpus", str(workdir / "corpus.txt")]
        )
        assert code == 2


class TestDictExport:
    def test_dict_summary(self, workdir, capsys):
        code = main(["dict", "--checkpoint", str(workdir / "run" / "checkpoint_final.pt")])
        assert code == 0
        assert "codebook entries" in capsys.readouterr().out

    def test_export_then_load(self, workdir, tmp_path):
        out = tmp_path / "tok.json"
        code = main(
            [
                "export",
                "--checkpoint", str(workdir / "run" / "checkpoint_final.pt"),
                "--out", str(out),
            ]
        )
        assert code == 0
        doc = json.loads(out.read_text(encoding="utf-8"))
        assert doc["model_type"] == "wordlevel"


class TestTokenizeDetokenize:
    def test_round_trip(self, workdir, tmp_path, capsys):
        ckpt = str(workdir / "run" / "checkpoint_final.pt")
        tok_file = tmp_path / "tok.json"
        assert main(["export", "--checkpoint", ckpt, "--out", str(tok_file)]) == 0
        capsys.readouterr()

        text = "The cat sat. "
        assert main(["tokenize", "--checkpoint", ckpt, "--text", text]) == 0
        ids_line = capsys.readouterr().out.strip()
        assert all(part.isdigit() for part in ids_line.split())

        assert main(["detokenize", "--tokenizer", str(tok_file), "--ids", ids_line]) == 0
        # Fallback tokenization is lossless, so detokenize restores the text.
        assert capsys.readouterr().out.rstrip("\n") == text


class TestBpeAndEval:
    def test_bpe_train(self, workdir, tmp_path, capsys):
        out = tmp_path / "bpe.json"
        code = main(
            ["bpe-train", "--corpus", str(workdir / "corpus.txt"), "--vocab-size", "60", "--out", str(out)]
        )
        assert code == 0
        assert json.loads(out.read_text(encoding="utf-8"))["model_type"] == "bpe"

    def test_eval_writes_reports(self, workdir, tmp_path, capsys):
        out = tmp_path / "report"
        code = main(
            [
                "eval",
                "--corpus", str(workdir / "corpus.txt"),
                "--checkpoint", str(workdir / "run" / "checkpoint_final.pt"),
                "--out", str(out),
                "--fallback", "both",
                "--top-n", "5",
            ]
        )
        assert code == 0
        doc = json.loads((out / "report.json").read_text(encoding="utf-8"))
        assert "gqvae" in doc
        assert (out / "report.csv").exists()
        assert (out / "histogram.csv").exists()

    def test_eval_missing_corpus(self, workdir, tmp_path):
        code = main(
            [
                "eval",
                "--corpus", str(tmp_path / "nope.txt"),
                "--checkpoint", str(workdir / "run" / "checkpoint_final.pt"),
                "--out", str(tmp_path / "r"),
            ]
        )
        assert code == 1


class TestExportIds:
    def test_export_ids(self, workdir, tmp_path, capsys):
        out = tmp_path / "ids.bin"
        code = main(
            [
                "export-ids",
                "--corpus", str(workdir / "corpus.txt"),
                "--checkpoint", str(workdir / "run" / "checkpoint_final.pt"),
                "--out", str(out),
            ]
        )
        assert code == 0
        sidecar = json.loads(capsys.readouterr().out)
        assert out.stat().st_size == 4 * sidecar["num_tokens"]


class TestUsage:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_no_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    @pytest.mark.parametrize(
        "sub",
        ["train", "dict", "export", "tokenize", "detokenize", "bpe-train", "eval", "export-ids"],
    )
    def test_help_exits_zero(self, sub):
        with pytest.raises(SystemExit) as exc:
            main([sub, "--help"])
        assert exc.value.code == 0

    def test_parser_lists_all_subcommands(self):
        parser = build_parser()
        subactions = [
            a for a in parser._actions if hasattr(a, "choices") and a.choices
        ]
        names = set(subactions[0].choices)
        assert names == {
            "train", "dict", "export", "tokenize", "detokenize",
            "bpe-train", "eval", "export-ids",
        }

    def test_log_level_env(self, workdir, monkeypatch, capsys):
        monkeypatch.setenv("GQVAE_LOG_LEVEL", "debug")
        code = main(["dict", "--checkpoint", str(workdir / "run" / "checkpoint_final.pt")])
        assert code == 0
