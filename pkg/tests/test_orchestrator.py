# tests/test_orchestrator.py

import math

import pytest

from lrclone.checkpoint import load_projection, load_weights, read_checkpoint
from lrclone.config import with_overrides
from lrclone.enums import CheckpointKind, CorpusKind
from lrclone.errors import ConfigError, ContractError
from lrclone.model import expected_shapes, init_teacher_weights
from lrclone.orchestrator import (
    CorpusGenConfig,
    EvalConfig,
    EvalResult,
    MaterializeConfig,
    TeacherGenConfig,
    TrainRunConfig,
    count_model_params,
    run_eval,
    run_gen_corpus,
    run_gen_teacher,
    run_materialize,
    run_train,
)


@pytest.fixture
def pipeline(tiny, temp_dir, reporter):
    """Corpus, random teacher and a two-step projection run on disk."""
    corpus = run_gen_corpus(CorpusGenConfig(CorpusKind.copy, 4000, 256, seed=0, out=temp_dir / "c.tok"), reporter)
    teacher = run_gen_teacher(TeacherGenConfig(tiny, temp_dir / "t.lrck", seed=1, pretrain_steps=0), reporter)
    train = with_overrides(tiny.train, total_steps=2, record_wall_time=False)
    run = run_train(
        TrainRunConfig(tiny, train, 32, temp_dir / "run", teacher=teacher.path, corpus=corpus.path),
        reporter,
    )
    return corpus, teacher, run


@pytest.mark.unit
class TestCounts:
    def test_shapes_and_weights_agree(self, tiny):
        shapes = expected_shapes(tiny.teacher)
        assert count_model_params(shapes) == count_model_params(init_teacher_weights(tiny.teacher))

    def test_eval_perplexity(self):
        assert EvalResult(loss=math.log(4), batches=1, tokens=8, source="x").perplexity == pytest.approx(4.0)
        assert EvalResult(loss=1e4, batches=1, tokens=8, source="x").perplexity == math.inf


@pytest.mark.integration
class TestPipeline:
    def test_gen_steps(self, pipeline, reporter):
        corpus, teacher, _ = pipeline
        assert corpus.corpus.total_tokens == 4000
        assert "[OK] Wrote" in corpus.human_summary()
        assert read_checkpoint(teacher.path).kind is CheckpointKind.teacher
        assert teacher.final_loss is None
        assert any("Training projections" in t for t in reporter.tasks)

    def test_materialize_and_eval_agree(self, pipeline, temp_dir, reporter):
        corpus, teacher, run = pipeline
        mat = run_materialize(
            MaterializeConfig(teacher=teacher.path, projection=run.checkpoint_path, out=temp_dir / "s.lrck"),
            reporter,
        )
        assert mat.provenance.step == 2
        student, _ = load_weights(mat.path)
        assert mat.num_params == count_model_params(student)

        stored = run_eval(EvalConfig(corpus=corpus.path, checkpoint=mat.path, max_batches=2), reporter)
        projected = run_eval(
            EvalConfig(corpus=corpus.path, checkpoint=run.checkpoint_path, teacher=teacher.path, max_batches=2),
            reporter,
        )
        assert stored.loss == projected.loss
        assert stored.batches == 2 and stored.tokens == 2 * 8 * 64
        assert projected.source.startswith("projected")

    def test_materialize_rejects_other_teacher(self, pipeline, tiny, temp_dir, reporter):
        _, _, run = pipeline
        other = run_gen_teacher(TeacherGenConfig(tiny, temp_dir / "other.lrck", seed=2, pretrain_steps=0), reporter)
        with pytest.raises(ContractError):
            run_materialize(
                MaterializeConfig(teacher=other.path, projection=run.checkpoint_path, out=temp_dir / "s.lrck"),
                reporter,
            )

    def test_projection_eval_needs_teacher(self, pipeline, reporter):
        corpus, _, run = pipeline
        with pytest.raises(ConfigError, match="--teacher"):
            run_eval(EvalConfig(corpus=corpus.path, checkpoint=run.checkpoint_path), reporter)

    def test_resume_extends_run(self, pipeline, tiny, temp_dir, reporter):
        corpus, teacher, run = pipeline
        train = with_overrides(tiny.train, total_steps=3)
        cfg = TrainRunConfig(
            tiny, train, 32, temp_dir / "run", teacher=teacher.path, corpus=corpus.path, resume=run.checkpoint_path
        )
        resumed = run_train(cfg, reporter)
        assert resumed.state.step == 3
        assert len(resumed.metrics_path.read_text().splitlines()) == 4

    def test_resume_random_teacher_uses_checkpoint_seed(self, pipeline, tiny, temp_dir, reporter):
        corpus, _, _ = pipeline
        first = with_overrides(tiny.train, total_steps=1, seed=7, record_wall_time=False)
        run = run_train(TrainRunConfig(tiny, first, 32, temp_dir / "rand", corpus=corpus.path), reporter)
        original_teacher = load_projection(run.checkpoint_path).teacher_hash
        later = with_overrides(tiny.train, total_steps=2, seed=99)
        cfg = TrainRunConfig(tiny, later, 32, temp_dir / "rand", corpus=corpus.path, resume=run.checkpoint_path)
        resumed = run_train(cfg, reporter)
        assert resumed.state.step == 2
        assert load_projection(resumed.checkpoint_path).teacher_hash == original_teacher


@pytest.mark.integration
def test_pretrained_teacher_reports_loss(tiny, temp_dir, reporter):
    corpus = run_gen_corpus(CorpusGenConfig(CorpusKind.copy, 4000, 256, seed=0, out=temp_dir / "c.tok"), reporter)
    result = run_gen_teacher(
        TeacherGenConfig(tiny, temp_dir / "t.lrck", seed=0, pretrain_steps=3, corpus=corpus.path, verbose=1),
        reporter,
    )
    assert result.final_loss is not None and result.final_loss > 0
    assert "pre-trained to LM loss" in result.human_summary()
    assert any("[corpus]" in m for m in reporter.infos)
