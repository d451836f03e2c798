# tests/test_config.py

import pytest
from pydantic import ValidationError

from lrclone.config import (
    PRESETS,
    CloneMask,
    ModelConfig,
    TrainConfig,
    get_preset,
    load_config_file,
    parse_sharing,
    resolve_train_config,
    with_overrides,
)
from lrclone.enums import CloneTerm, Sharing
from lrclone.errors import ConfigError


@pytest.mark.unit
class TestPresets:
    def test_known_names(self):
        assert {"tiny-debug", "tiny-distill", "lrc-1.5b", "lrc-1.7b", "lrc-4b"} <= set(PRESETS)

    def test_unknown_name_lists_choices(self):
        with pytest.raises(ConfigError, match="tiny-debug"):
            get_preset("gpt-5")

    def test_student_keeps_heads(self):
        p = get_preset("lrc-1.5b")
        assert p.student.hidden_size == 1536
        assert p.student.num_q_heads == p.teacher.num_q_heads
        assert p.student.ffn_size == p.teacher.ffn_size

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.adam_beta1, cfg.adam_beta2, cfg.warmup_ratio, cfg.temperature) == (0.9, 0.999, 0.005, 40.0)


@pytest.mark.unit
class TestModelConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValidationError):
            ModelConfig(
                num_layers=1, hidden_size=8, num_q_heads=3, num_kv_heads=2, head_dim=4, ffn_size=8, vocab_size=16
            )

    def test_odd_head_dim(self):
        with pytest.raises(ValidationError):
            ModelConfig(
                num_layers=1, hidden_size=8, num_q_heads=2, num_kv_heads=2, head_dim=3, ffn_size=8, vocab_size=16
            )

    def test_unknown_key_rejected(self, tiny):
        with pytest.raises(ValidationError):
            ModelConfig.model_validate({**tiny.teacher.model_dump(), "dropout": 0.1})


@pytest.mark.unit
class TestTrainConfig:
    def test_batch_must_hold_whole_sequences(self):
        with pytest.raises(ValidationError):
            TrainConfig(batch_tokens=100, seq_len=16)

    def test_microbatches(self):
        cfg = TrainConfig(batch_tokens=64, seq_len=16, micro_batch_tokens=32)
        assert (cfg.batch_size, cfg.micro_batch_size, cfg.num_microbatches) == (4, 2, 2)

    def test_microbatch_must_divide(self):
        with pytest.raises(ValidationError):
            TrainConfig(batch_tokens=64, seq_len=16, micro_batch_tokens=48)

    def test_overrides_skip_none(self):
        cfg = with_overrides(TrainConfig(alpha=0.2), alpha=None, seed=3)
        assert cfg.alpha == 0.2 and cfg.seed == 3

    def test_overrides_revalidate(self):
        with pytest.raises(ValidationError):
            with_overrides(TrainConfig(), temperature=0.0)


@pytest.mark.unit
class TestSharingAndMask:
    def test_parse_sharing(self):
        assert parse_sharing("io, ALL") == (Sharing.io, Sharing.all)

    @pytest.mark.parametrize("text", ["io", "all,io,io", "some,all"])
    def test_bad_sharing(self, text):
        with pytest.raises(ConfigError):
            parse_sharing(text)

    def test_parse_terms(self):
        mask = CloneMask.parse("up, q,q", None, 4)
        assert mask.disabled == (CloneTerm.q, CloneTerm.up)
        assert not mask.enabled(CloneTerm.q, 0)
        assert mask.enabled(CloneTerm.k, 3)

    def test_unknown_term(self):
        with pytest.raises(ConfigError, match="o_ffn"):
            CloneMask.parse("w", None, 4)

    def test_layer_bitmask(self):
        mask = CloneMask.parse(None, "0b0101", 4)
        assert mask.layers == (True, False, True, False)
        assert CloneMask.parse(None, "all", 4).layers is None

    def test_layer_bitmask_too_wide(self):
        with pytest.raises(ConfigError):
            CloneMask.parse(None, "16", 4)

    def test_attn_switch(self):
        mask = CloneMask(attn=False)
        assert not mask.enabled(CloneTerm.o_attn, 0)
        assert mask.enabled(CloneTerm.o_ffn, 0)


@pytest.mark.unit
class TestResolution:
    def test_precedence(self, tiny):
        cfg, hidden = resolve_train_config(
            tiny,
            {"alpha": 0.1, "seed": 4, "student_hidden": 16},
            {"alpha": 0.9, "seed": None},
        )
        assert cfg.alpha == 0.9
        assert cfg.seed == 4
        assert cfg.learning_rate == tiny.train.learning_rate
        assert hidden == 16

    def test_cli_student_hidden_wins(self, tiny):
        _, hidden = resolve_train_config(tiny, {"student_hidden": 16}, {"student_hidden": 24})
        assert hidden == 24

    def test_student_hidden_too_wide(self, tiny):
        with pytest.raises(ConfigError):
            resolve_train_config(tiny, None, {"student_hidden": 128})

    def test_yaml_file(self, temp_dir):
        path = temp_dir / "run.yaml"
        path.write_text("alpha: 0.3\nclone_mask:\n  disabled: [gate]\n")
        data = load_config_file(path)
        cfg = with_overrides(TrainConfig(), **data)
        assert cfg.alpha == 0.3
        assert cfg.clone_mask.disabled == (CloneTerm.gate,)

    def test_empty_yaml(self, temp_dir):
        path = temp_dir / "empty.yaml"
        path.write_text("")
        assert load_config_file(path) == {}

    def test_yaml_list_rejected(self, temp_dir):
        path = temp_dir / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_config_file(path)
