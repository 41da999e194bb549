import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anyface_lab.cmd import CmdModule, cmd_forward, compose_latent
from anyface_lab.errors import DimensionError, InputError, ParameterError, SplitError
from anyface_lab.gradcheck import finite_diff_check
from anyface_lab.losses import (
    LossWeights, clip_loss, cmt_loss, dt_loss, mse_loss, pair_loss, rec_loss,
    reconstruction_objective, synthesis_objective,
)
from anyface_lab.ops import COSINE_EPS
from anyface_lab.tensor import Tensor


@pytest.fixture(scope="module")
def cmd():
    return CmdModule(seed=3)


class TestCmd:
    @pytest.mark.parametrize("n_cap", [1, 2, 5, 10])
    def test_shapes(self, cmd, n_cap):
        w, h = cmd_forward(cmd, np.random.default_rng(n_cap).normal(size=(n_cap, 32)))
        assert w.shape == (8, 32)
        assert h.shape == (1, 32)

    def test_batched(self, cmd, rng):
        w, h = cmd(rng.normal(size=(4, 3, 32)))
        assert w.shape == (4, 8, 32) and h.shape == (4, 32)

    def test_permutation_invariant(self, cmd, rng):
        f = rng.normal(size=(5, 32))
        w1, h1 = cmd(f)
        w2, h2 = cmd(f[::-1].copy())
        np.testing.assert_allclose(w1.data, w2.data, atol=1e-12)
        np.testing.assert_allclose(h1.data, h2.data, atol=1e-12)

    def test_duplicates_match_single(self, cmd, rng):
        f = rng.normal(size=(1, 32))
        np.testing.assert_allclose(cmd(np.repeat(f, 10, axis=0))[0].data, cmd(f)[0].data, atol=1e-12)

    def test_wrong_width(self, cmd):
        with pytest.raises(DimensionError):
            cmd(np.zeros((2, 16)))

    def test_empty(self, cmd):
        with pytest.raises(InputError):
            cmd(np.zeros((0, 32)))

    def test_same_seed_same_init(self):
        assert CmdModule(seed=9).digest() == CmdModule(seed=9).digest()

    def test_input_gradient(self, cmd, rng):
        report = finite_diff_check(lambda x: cmd(x)[0].sum(), rng.normal(size=(2, 32)))
        assert report.max_rel_error < 1e-4


class TestCompose:
    def test_default_split_rows(self, rng):
        w_t, w_c = rng.normal(size=(8, 32)), rng.normal(size=(2, 32))
        out = compose_latent(w_t, w_c, 6, 2).data
        np.testing.assert_array_equal(out[:2], w_c)
        np.testing.assert_array_equal(out[2:], w_t[2:])

    def test_n_zero(self, rng):
        w_t = rng.normal(size=(8, 32))
        np.testing.assert_array_equal(compose_latent(w_t, np.zeros((0, 32)), 8, 0).data, w_t)

    @pytest.mark.parametrize("n", range(9))
    def test_self_composition(self, rng, n):
        w = rng.normal(size=(8, 32))
        np.testing.assert_array_equal(compose_latent(w, w[:n], 8 - n, n).data, w)

    def test_bad_split(self, rng):
        with pytest.raises(SplitError):
            compose_latent(rng.normal(size=(8, 32)), rng.normal(size=(2, 32)), 5, 2)

    def test_bad_rows(self, rng):
        with pytest.raises(DimensionError):
            compose_latent(rng.normal(size=(8, 32)), rng.normal(size=(3, 32)), 6, 2)


class TestCmtLoss:
    def test_identical(self):
        assert cmt_loss(Tensor([[0.3, -1.0]]), Tensor([[0.3, -1.0]])).item() == 0.0

    def test_hand_case(self):
        value = cmt_loss(Tensor([[0.0, 0.0]]), Tensor([[0.0, math.log(3)]])).item()
        assert abs(value - 0.5 * math.log(4 / 3)) < 1e-12

    def test_target_gets_no_gradient(self, rng):
        a = Tensor(rng.normal(size=(1, 6)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 6)), requires_grad=True)
        cmt_loss(a, b).backward()
        assert b.grad is None or not np.any(b.grad)
        assert np.any(a.grad)


class TestPairLoss:
    def test_identical(self, rng):
        w = rng.normal(size=(8, 32))
        assert pair_loss(w, w).item() == 0.0

    @pytest.mark.parametrize("order,expected", [(1, 1.0), (2, 1.5)])
    def test_hand_cases(self, order, expected):
        diff = np.array([[1.0, -1.0], [2.0, 0.0]])
        assert pair_loss(diff, np.zeros((2, 2)), order).item() == expected

    def test_bad_order(self):
        with pytest.raises(ParameterError):
            pair_loss(np.zeros(2), np.zeros(2), 3)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            pair_loss(np.zeros((2, 2)), np.zeros((2, 3)))


class TestDtLoss:
    W, W_BAR = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    W_T, W_NEG = np.array([1.0, 1.0]) / math.sqrt(2), np.array([1.0, 3.0]) / math.sqrt(10)

    @pytest.mark.parametrize("orientation", ["prose", "as-written"])
    def test_equal_codes_give_margin(self, orientation, rng):
        x = rng.normal(size=(8, 4))
        value = dt_loss(x, x, rng.normal(size=(8, 4)), rng.normal(size=(8, 4)) + 3, 0.3, orientation).item()
        assert abs(value - 0.3) < 1e-12

    def test_hand_case_zero(self):
        assert dt_loss(self.W_T, self.W_NEG, self.W, self.W_BAR, margin=0.1).item() == 0.0

    @staticmethod
    def swapped_closed_form(eps=COSINE_EPS):
        """1 - 1/3 + 0.1 with every epsilon guard written out by hand."""
        r_t = (1 / math.sqrt(2)) / (1 + eps) / ((1 / math.sqrt(2)) / (1 + eps) + eps)
        r_neg = (1 / math.sqrt(10)) / (1 + eps) / ((3 / math.sqrt(10)) / (1 + eps) + eps)
        return r_t - r_neg + 0.1

    def test_hand_case_swapped(self):
        value = dt_loss(self.W_NEG, self.W_T, self.W, self.W_BAR, margin=0.1).item()
        assert abs(value - self.swapped_closed_form()) < 1e-9
        # the guards shift the value by about 1e-8 from the unguarded 0.7667
        assert abs(value - (1 - 1 / 3 + 0.1)) < 2e-8

    def test_as_written_is_mirror(self):
        value = dt_loss(self.W_T, self.W_NEG, self.W, self.W_BAR, margin=0.1, orientation="as-written").item()
        assert abs(value - self.swapped_closed_form()) < 1e-9

    def test_negative_margin(self):
        with pytest.raises(ParameterError):
            dt_loss(self.W_T, self.W_NEG, self.W, self.W_BAR, margin=-0.1)

    def test_monotone_toward_target(self):
        """Sliding w_t along the great circle toward w never raises the prose loss."""
        rng = np.random.default_rng(11)
        checked = 0
        while checked < 100:
            w, w_bar, w_t, w_neg = (rng.normal(1.0, 0.7, size=6) for _ in range(4))
            u = w / np.linalg.norm(w)
            x = w_t / np.linalg.norm(w_t)
            perp = x - (x @ u) * u
            theta = math.atan2(np.linalg.norm(perp), x @ u)
            perp /= np.linalg.norm(perp)
            path = [math.cos(t) * u + math.sin(t) * perp for t in np.linspace(theta, 0.0, 20)]
            cos_bar = [p @ w_bar / np.linalg.norm(w_bar) for p in path]
            if min(cos_bar) < 0.2:
                continue  # stay clear of the ratio's pole
            ratios = [(p @ u) / c for p, c in zip(path, cos_bar)]
            if np.any(np.diff(ratios) < 0):
                continue  # the ratio itself is not monotone here; probe only the hinge
            losses = [dt_loss(p, w_neg, w, w_bar, margin=5.0).item() for p in path]
            assert np.all(np.diff(losses) <= 1e-12)
            checked += 1

    def test_gradient_generic(self, rng):
        w, w_bar, w_neg = (rng.normal(1.0, 0.5, size=(8, 4)) for _ in range(3))
        report = finite_diff_check(lambda x: dt_loss(x, w_neg, w, w_bar, margin=2.0), rng.normal(1.0, 0.5, size=(8, 4)))
        assert report.max_rel_error < 1e-4


class TestSimpleLosses:
    def test_clip_cases(self):
        assert abs(clip_loss(Tensor([[3.0, 4.0]]), Tensor([[4.0, 3.0]])).item() - 0.04) < 1e-9
        assert abs(clip_loss(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).item() - 1.0) < 1e-12
        assert abs(clip_loss(Tensor([[1.0, 2.0]]), Tensor([[1.0, 2.0]])).item()) < 1e-8

    def test_rec_cases(self, rng):
        assert rec_loss(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.5)).item() == 0.5
        a, b = rng.uniform(-1, 1, (2, 4, 4, 3))
        assert rec_loss(a, b).item() == rec_loss(b, a).item()

    def test_mse_case(self):
        assert mse_loss(np.array([1.0, 2.0]), np.zeros(2)).item() == 2.5

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=16))
    @settings(max_examples=50)
    def test_non_negative(self, xs):
        x = np.array(xs)
        assert mse_loss(x, np.zeros_like(x)).item() >= 0
        assert pair_loss(x, np.zeros_like(x), 1).item() >= 0


class TestObjectives:
    def test_synthesis_hand_sum(self):
        parts = {"dt": Tensor(0.2), "cmt_t": Tensor(0.1), "clip": Tensor(0.3)}
        assert abs(synthesis_objective(parts, LossWeights()).item() - 0.6) < 1e-12

    def test_reconstruction_hand_sum(self):
        parts = {"mse": Tensor(0.4), "cmt_i": Tensor(0.1), "rec": Tensor(0.2)}
        assert abs(reconstruction_objective(parts, LossWeights()).item() - 0.7) < 1e-12

    def test_zeroed_weights(self):
        weights = LossWeights(lambda_cmt=0.0, lambda_clip=0.0, lambda_rec=0.0)
        parts = {"dt": Tensor(0.2), "cmt_t": Tensor(0.1), "clip": Tensor(0.3),
                 "mse": Tensor(0.4), "cmt_i": Tensor(0.1), "rec": Tensor(0.2)}
        assert synthesis_objective(parts, weights).item() == 0.2
        assert reconstruction_objective(parts, weights).item() == 0.4

    def test_clip_weight_linear(self):
        parts = {"dt": Tensor(0.2), "cmt_t": Tensor(0.1), "clip": Tensor(0.3)}
        one = synthesis_objective(parts, LossWeights(lambda_clip=1.0)).item()
        two = synthesis_objective(parts, LossWeights(lambda_clip=2.0)).item()
        assert abs(two - one - 0.3) < 1e-12

    @pytest.mark.parametrize("field", ["lambda_cmt", "lambda_clip", "lambda_rec", "margin"])
    def test_negative_weight_rejected(self, field):
        with pytest.raises(ParameterError):
            LossWeights(**{field: -1.0})
