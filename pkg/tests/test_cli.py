# tests/test_cli.py

import json
import subprocess
import sys

import pytest
from typer.testing import CliRunner

from lrclone.checkpoint import load_projection
from lrclone.cli import EXIT_OK, EXIT_USAGE, app, cli_dispatch


def run_module(*args):
    return subprocess.run([sys.executable, "-m", "lrclone.cli", *args], capture_output=True, text=True)


@pytest.fixture
def corpus_file(temp_dir):
    path = temp_dir / "corpus.lrct"
    code = cli_dispatch(["gen-corpus", "--kind", "copy", "--size", "4000", "--seed", "1", "--out", str(path)])
    assert code == EXIT_OK
    return path


class TestCLI:
    def test_info_command(self):
        result = run_module("info")
        assert result.returncode == 0
        assert "lrclone Presets" in result.stdout
        assert "tiny-debug" in result.stdout
        assert "lrc-1.5b" in result.stdout

    def test_diagnose_command(self):
        result = run_module("diagnose")
        assert result.returncode == 0
        assert "Dependencies" in result.stdout
        assert "LRC_THREADS" in result.stdout

    def test_params_command(self):
        result = run_module("params", "--preset", "lrc-1.5b")
        assert result.returncode == 0
        assert "0.930B" in result.stdout
        assert "io,io" in result.stdout

    def test_params_single_mode(self, capsys):
        assert cli_dispatch(["params", "--preset", "tiny-debug", "--sharing", "all,all"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "59,680" in out
        assert "io,io" not in out

    def test_params_bad_sharing(self, capsys):
        assert cli_dispatch(["params", "--sharing", "all"]) == EXIT_USAGE
        assert "Error" in capsys.readouterr().err

    def test_unknown_flag(self):
        assert cli_dispatch(["train", "--no-such-flag"]) == EXIT_USAGE

    def test_unknown_command(self):
        assert cli_dispatch(["distill-everything"]) == EXIT_USAGE

    def test_gen_corpus_through_runner(self, temp_dir):
        out = temp_dir / "arith.lrct"
        result = CliRunner().invoke(app, ["gen-corpus", "--kind", "arith", "--size", "500", "--out", str(out)])
        assert result.exit_code == 0
        assert "500 tokens" in result.output
        assert out.exists()


class TestVerifyCommand:
    def test_lemma1_passes(self, capsys):
        assert cli_dispatch(["verify", "--suite", "lemma1", "--trials", "5"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "lemma1.ffn" in out
        assert "[OK]" in out

    def test_jsonl(self, temp_dir):
        path = temp_dir / "verify.jsonl"
        assert cli_dispatch(["verify", "--suite", "params", "--jsonl", str(path)]) == EXIT_OK
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert {r["name"] for r in rows} >= {"params.all_all", "params.tiny_hand_count"}
        assert all(r["status"] == "pass" for r in rows)

    def test_bad_suite(self):
        assert cli_dispatch(["verify", "--suite", "everything"]) == EXIT_USAGE


@pytest.mark.integration
class TestPipelineCommands:
    def test_train_materialize_eval(self, corpus_file, temp_dir, capsys):
        teacher = temp_dir / "teacher.lrck"
        run = temp_dir / "run"
        student = temp_dir / "student.lrck"

        assert cli_dispatch(["gen-teacher", "--out", str(teacher), "--steps", "0", "--seed", "3"]) == EXIT_OK
        code = cli_dispatch(
            [
                "train",
                "--teacher", str(teacher),
                "--corpus", str(corpus_file),
                "--out", str(run),
                "--steps", "2",
                "--sharing", "io,all",
                "--clone-mask", "gate",
                "--clip-norm", "0",
                "--no-wall-time",
            ]
        )
        assert code == EXIT_OK
        state = load_projection(run / "projection.lrck")
        assert state.step == 2
        assert state.train.attn_sharing.value == "io"
        assert state.train.clip_norm is None
        assert [t.value for t in state.train.clone_mask.disabled] == ["gate"]

        materialize = ["materialize", "--teacher", str(teacher), "--projection", str(run / "projection.lrck")]
        assert cli_dispatch([*materialize, "--out", str(student)]) == EXIT_OK
        capsys.readouterr()
        assert cli_dispatch(["eval", str(student), "--corpus", str(corpus_file), "--max-batches", "2"]) == EXIT_OK
        assert "perplexity" in capsys.readouterr().out

    def test_zero_steps(self, corpus_file, temp_dir):
        run = temp_dir / "run"
        assert cli_dispatch(["train", "--corpus", str(corpus_file), "--out", str(run), "--steps", "0"]) == EXIT_OK
        assert len((run / "metrics.csv").read_text().splitlines()) == 1
        assert (run / "projection.lrck").exists()

    def test_bad_clone_term(self, corpus_file, temp_dir, capsys):
        code = cli_dispatch(
            ["train", "--corpus", str(corpus_file), "--out", str(temp_dir / "r"), "--clone-mask", "w_q"]
        )
        assert code == EXIT_USAGE
        assert "unknown clone term" in capsys.readouterr().err

    def test_eval_missing_corpus(self, temp_dir):
        code = cli_dispatch(["eval", str(temp_dir / "nope.lrck"), "--corpus", str(temp_dir / "nope.lrct")])
        assert code == EXIT_USAGE
