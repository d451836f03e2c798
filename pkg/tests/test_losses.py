# tests/test_losses.py

import math

import numpy as np
import pytest

from lrclone.config import CloneMask
from lrclone.enums import CloneTerm, Reduction
from lrclone.errors import ConfigError, ContractError, ShapeError
from lrclone.losses import clone_loss, clone_loss_breakdown, kl_loss, lm_loss, mse, total_loss
from lrclone.model import init_teacher_weights, model_forward
from lrclone.projection import identity_projections, init_projections, student_weights
from lrclone.tensor import Tape, Tensor, no_tape


def f64(values):
    return Tensor(np.asarray(values, dtype=np.float64))


@pytest.fixture
def bundles(tiny):
    teacher = init_teacher_weights(tiny.teacher, seed=0, dtype=np.float64)
    proj = init_projections(tiny.teacher, 32, seed=1, dtype=np.float64)
    tokens = np.random.default_rng(0).integers(0, 255, size=(2, 8))
    with no_tape():
        t_bundle = model_forward(tokens, teacher)
        s_bundle = model_forward(tokens, student_weights(teacher, proj))
    return teacher, proj, tokens, t_bundle, s_bundle


@pytest.mark.unit
class TestMSE:
    def test_constant_offset(self):
        assert mse(f64([0.0, 0.0]), f64([2.0, 2.0])).item() == 4.0

    def test_sum_reduction(self):
        assert mse(f64([0.0, 0.0]), f64([2.0, 2.0]), Reduction.sum).item() == 8.0

    def test_mask_drops_positions(self):
        a = f64([[0.0, 0.0], [0.0, 0.0]])
        b = f64([[1.0, 1.0], [5.0, 5.0]])
        assert mse(a, b, mask=np.array([1.0, 0.0])).item() == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse(f64([0.0, 1.0]), f64([0.0]))


@pytest.mark.unit
class TestKL:
    def test_hand_value(self):
        loss = kl_loss(f64([0.0, math.log(3.0)]), f64([0.0, 0.0]), temperature=1.0)
        assert loss.item() == pytest.approx(0.130812, abs=1e-6)

    def test_identical_logits_are_exactly_zero(self):
        logits = Tensor(np.random.default_rng(0).standard_normal((2, 3, 11)).astype(np.float32))
        assert kl_loss(logits, logits, 40.0).item() == 0.0

    def test_temperature_squared_factor(self):
        t, s = f64([[0.3, -1.0, 2.0]]), f64([[0.0, 0.5, 0.1]])
        plain = kl_loss(t, s, 2.0, t2=False).item()
        assert kl_loss(t, s, 2.0).item() == pytest.approx(4 * plain, rel=1e-12)

    def test_nonpositive_temperature(self):
        with pytest.raises(ConfigError):
            kl_loss(f64([0.0, 1.0]), f64([0.0, 1.0]), 0.0)

    def test_gradient_flows_to_student_only(self):
        t = Tensor(np.array([[0.0, 1.0, 2.0]]), requires_grad=True)
        s = Tensor(np.array([[1.0, 0.0, 0.0]]), requires_grad=True)
        with Tape() as tape:
            tape.backward(kl_loss(t, s, 1.0))
        assert t.grad is None
        assert s.grad is not None and abs(s.grad.sum()) < 1e-12


@pytest.mark.unit
class TestLM:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((1, 6, 256)))
        assert lm_loss(logits, np.arange(6)).item() == pytest.approx(math.log(256), abs=1e-12)

    def test_last_position_has_no_target(self):
        logits = np.zeros((1, 3, 4))
        logits[0, 2] = [100.0, -100.0, 0.0, 0.0]
        assert lm_loss(Tensor(logits), np.array([1, 2, 3])).item() == pytest.approx(math.log(4))

    def test_confident_correct_prediction(self):
        logits = np.full((1, 3, 4), -50.0)
        logits[0, 0, 2] = logits[0, 1, 3] = 50.0
        assert lm_loss(Tensor(logits), np.array([0, 2, 3])).item() < 1e-10

    def test_boundary_mask_excludes_positions(self):
        logits = np.zeros((1, 3, 4))
        logits[0, 0, 1] = 10.0
        full = lm_loss(Tensor(logits), np.array([0, 1, 2])).item()
        masked = lm_loss(Tensor(logits), np.array([0, 1, 2]), mask=np.array([[1.0, 0.0, 1.0]])).item()
        assert masked < full

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            lm_loss(Tensor(np.zeros((1, 3, 4))), np.array([[0, 1]]))


@pytest.mark.unit
class TestTotal:
    def test_weighted_sum(self):
        assert total_loss(1.0, 2.0, 3.0, 0.5).total == 4.5

    def test_tensor_objective(self):
        report = total_loss(f64(1.0), f64(2.0), f64(3.0), 0.5)
        assert report.objective is not None and report.objective.item() == 4.5
        assert "total=4.5" in report.human_summary()

    def test_negative_alpha(self):
        with pytest.raises(ConfigError):
            total_loss(1.0, 2.0, 3.0, -0.1)


@pytest.mark.unit
class TestCloneLoss:
    def test_identity_clone_is_exactly_zero(self, tiny):
        teacher = init_teacher_weights(tiny.teacher, seed=3, dtype=np.float64)
        proj = identity_projections(teacher)
        tokens = np.arange(16).reshape(2, 8)
        with no_tape():
            t_bundle = model_forward(tokens, teacher)
            s_bundle = model_forward(tokens, student_weights(teacher, proj))
            assert clone_loss(s_bundle, t_bundle, proj).item() == 0.0

    def test_terms_sum_to_total(self, bundles):
        _, proj, _, t_bundle, s_bundle = bundles
        with no_tape():
            breakdown = clone_loss_breakdown(s_bundle, t_bundle, proj)
        assert set(breakdown.terms) == {t.value for t in CloneTerm}
        assert breakdown.total.item() == pytest.approx(sum(breakdown.terms.values()), rel=1e-12)
        assert all(v > 0 for v in breakdown.terms.values())

    def test_terms_match_direct_numpy(self, bundles):
        _, proj, _, t_bundle, s_bundle = bundles
        expected = dict.fromkeys((t.value for t in CloneTerm), 0.0)
        for i, layer in enumerate(proj.layers):
            for key in ("q", "k", "v", "gate", "up"):
                expected[key] += np.mean((s_bundle.h[key][i].data - t_bundle.h[key][i].data) ** 2)
            expected["o_attn"] += np.mean((s_bundle.o_attn[i].data - t_bundle.o_attn[i].data @ layer.o.data) ** 2)
            expected["o_ffn"] += np.mean((s_bundle.o_ffn[i].data - t_bundle.o_ffn[i].data @ layer.down.data) ** 2)
        with no_tape():
            breakdown = clone_loss_breakdown(s_bundle, t_bundle, proj)
        for name, value in expected.items():
            assert breakdown.terms[name] == pytest.approx(value, rel=1e-12), name
        assert breakdown.total.item() == pytest.approx(sum(expected.values()), rel=1e-12)

    def test_disabled_terms_report_zero(self, bundles):
        _, proj, _, t_bundle, s_bundle = bundles
        mask = CloneMask(disabled=(CloneTerm.gate, CloneTerm.q))
        with no_tape():
            breakdown = clone_loss_breakdown(s_bundle, t_bundle, proj, mask)
        assert breakdown.terms["gate"] == 0.0 and breakdown.terms["q"] == 0.0
        assert breakdown.terms["up"] > 0.0

    def test_all_terms_disabled(self, bundles):
        _, proj, _, t_bundle, s_bundle = bundles
        with no_tape():
            assert clone_loss(s_bundle, t_bundle, proj, CloneMask.none_enabled()).item() == 0.0

    def test_layer_mask(self, bundles):
        _, proj, _, t_bundle, s_bundle = bundles
        with no_tape():
            full = clone_loss(s_bundle, t_bundle, proj).item()
            first_only = clone_loss(s_bundle, t_bundle, proj, CloneMask.parse(None, "1", 4)).item()
        assert 0.0 < first_only < full

    def test_sum_reduction_scales_up(self, bundles):
        _, proj, _, t_bundle, s_bundle = bundles
        with no_tape():
            mean = clone_loss(s_bundle, t_bundle, proj).item()
            total = clone_loss(s_bundle, t_bundle, proj, reduction=Reduction.sum).item()
        assert total > mean

    def test_stop_grad_targets_removes_target_path(self, tiny):
        teacher = init_teacher_weights(tiny.teacher, seed=0, dtype=np.float64)
        tokens = np.arange(8).reshape(1, 8)
        only_o = CloneMask(disabled=tuple(t for t in CloneTerm if t is not CloneTerm.o_ffn))
        grads = {}
        for stop in (False, True):
            proj = init_projections(tiny.teacher, 32, seed=1, dtype=np.float64)
            with no_tape():
                t_bundle = model_forward(tokens, teacher)
            with Tape() as tape:
                s_bundle = model_forward(tokens, student_weights(teacher, proj))
                tape.backward(clone_loss(s_bundle, t_bundle, proj, only_o, stop_grad_targets=stop))
            grads[stop] = proj.layers[3].down.grad_or_zeros().copy()
        assert not np.allclose(grads[False], grads[True])

    def test_layer_count_mismatch(self, bundles, tiny):
        _, proj, tokens, t_bundle, _ = bundles
        short = init_projections(tiny.teacher, 32)
        short.layers = short.layers[:2]
        with pytest.raises(ContractError):
            clone_loss(t_bundle, t_bundle, short)
