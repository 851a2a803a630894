"""Forward/reverse process laws: schedule shapes, masking frequencies,
the replacement law, telescoping survival, and step-count plans."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskdist.datasets import SyntheticDataset
from maskdist.diffusion import (
    MaskSchedule,
    fixed_count_plan,
    forward_mask,
    mask_ratio,
    reverse_step,
    sample_multistep,
    timesteps,
)
from maskdist.evaluation import TabularTeacher
from maskdist.rng import make_stream

MASK = 3  # V=3 in most tests below


class TestSchedules:
    @pytest.mark.parametrize("kind", ["linear", "cosine", "arccos"])
    def test_endpoints(self, kind):
        s = MaskSchedule(kind)
        assert mask_ratio(s, 0.0) == 0.0
        assert mask_ratio(s, 1.0) == pytest.approx(1.0, abs=1e-12)

    def test_linear_midpoint(self):
        assert mask_ratio(MaskSchedule("linear"), 0.5) == 0.5

    def test_arccos_midpoint(self):
        assert mask_ratio(MaskSchedule("arccos"), 0.5) == pytest.approx(2.0 / 3.0)

    @pytest.mark.parametrize("kind", ["linear", "cosine", "arccos"])
    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(0.0, 1.0), b=st.floats(0.0, 1.0))
    def test_strictly_increasing(self, kind, a, b):
        # float64 flattens the cosine/arccos slopes at the endpoints, so
        # only demand strictness for separations resolvable at f64
        if abs(a - b) <= 1e-6:
            return
        lo, hi = sorted((a, b))
        s = MaskSchedule(kind)
        assert mask_ratio(s, lo) < mask_ratio(s, hi)

    @pytest.mark.parametrize("kind", ["linear", "cosine", "arccos"])
    def test_strictly_increasing_on_grid(self, kind):
        s = MaskSchedule(kind)
        values = [mask_ratio(s, t) for t in np.linspace(0.0, 1.0, 257)]
        assert np.all(np.diff(values) > 0)

    def test_domain_checked(self):
        with pytest.raises(ValueError):
            mask_ratio(MaskSchedule("linear"), 1.5)
        with pytest.raises(ValueError):
            MaskSchedule("geometric")


class TestForwardMask:
    def test_zero_ratio_identity(self):
        x0 = np.array([0, 1, 2, 1])
        out = forward_mask(x0, 0.0, make_stream(0, "t"), MASK)
        assert np.array_equal(out, x0)

    def test_full_ratio_all_masked(self):
        x0 = np.array([0, 1, 2, 1])
        out = forward_mask(x0, 1.0, make_stream(0, "t"), MASK)
        assert np.all(out == MASK)

    def test_half_ratio_frequency(self):
        x0 = np.zeros(100_000, dtype=np.int64)
        out = forward_mask(x0, 0.5, make_stream(1, "t"), MASK)
        frac = (out == MASK).mean()
        assert abs(frac - 0.5) <= 0.005  # 3 sigma ~ 0.0047

    def test_rejects_masked_input(self):
        with pytest.raises(ValueError):
            forward_mask(np.array([0, MASK]), 0.5, make_stream(0, "t"), MASK)

    def test_rejects_bad_ratio(self):
        with pytest.raises(ValueError):
            forward_mask(np.array([0, 1]), 1.2, make_stream(0, "t"), MASK)


class TestReverseStep:
    def test_rs_zero_fills_everything(self):
        x = np.array([MASK, 1, MASK, MASK])
        probs = np.full((4, 3), 1.0 / 3.0)
        out = reverse_step(x, probs, 0.7, 0.0, make_stream(2, "t"), MASK)
        assert MASK not in out
        assert out[1] == 1

    def test_replacement_probability(self):
        n = 100_000
        x = np.full(n, MASK, dtype=np.int64)
        probs = np.full((n, 3), 1.0 / 3.0)
        out = reverse_step(x, probs, 0.8, 0.4, make_stream(3, "t"), MASK)
        replaced = (out != MASK).mean()
        assert abs(replaced - 0.5) <= 0.005

    def test_no_masks_is_identity(self):
        x = np.array([0, 1, 2])
        probs = np.full((3, 3), 1.0 / 3.0)
        out = reverse_step(x, probs, 0.9, 0.1, make_stream(4, "t"), MASK)
        assert np.array_equal(out, x)

    def test_invalid_ratios_rejected(self):
        x = np.array([MASK])
        probs = np.full((1, 3), 1.0 / 3.0)
        with pytest.raises(ValueError):
            reverse_step(x, probs, 0.4, 0.4, make_stream(0, "t"), MASK)
        with pytest.raises(ValueError):
            reverse_step(x, probs, 0.4, 0.8, make_stream(0, "t"), MASK)

    def test_two_step_survival_telescopes(self):
        # staying masked through t -> s -> u happens w.p. r_u / r_t
        n = 100_000
        r_t, r_s, r_u = 0.9, 0.5, 0.2
        rng = make_stream(5, "t")
        probs = np.full((n, 3), 1.0 / 3.0)
        x = np.full(n, MASK, dtype=np.int64)
        x = reverse_step(x, probs, r_t, r_s, rng, MASK)
        still = x == MASK
        x2 = reverse_step(x, probs, r_s, r_u, rng, MASK)
        survived = (x2 == MASK).mean()
        expect = r_u / r_t
        sigma = np.sqrt(expect * (1 - expect) / n)
        assert abs(survived - expect) <= 3 * sigma + 1e-9
        # and the intermediate stage obeys r_s / r_t
        sigma1 = np.sqrt((r_s / r_t) * (1 - r_s / r_t) / n)
        assert abs(still.mean() - r_s / r_t) <= 3 * sigma1 + 1e-9


class TestMultistep:
    def _teacher(self, seed=11):
        return TabularTeacher.from_dataset(SyntheticDataset.tabular(2, 3, 2, seed=seed))

    def test_single_step_fills_all_positions(self):
        teacher = self._teacher()
        out = sample_multistep(teacher, 0, MaskSchedule("arccos"), 1,
                               make_stream(6, "t"), batch=64)
        assert out.shape == (64, 2)
        assert np.all(out != MASK)

    def test_timestep_grid(self):
        np.testing.assert_allclose(timesteps(4), [1.0, 0.75, 0.5, 0.25, 0.0])

    def test_fixed_count_plan_linear(self):
        assert fixed_count_plan(10, 5, MaskSchedule("linear")) == [2, 2, 2, 2, 2]

    @pytest.mark.parametrize("kind", ["linear", "cosine", "arccos"])
    def test_steps_equals_length_unmasks_one_per_step(self, kind):
        plan = fixed_count_plan(12, 12, MaskSchedule(kind))
        assert plan == [1] * 12

    def test_plan_always_completes(self):
        for steps in (1, 2, 3, 5, 7):
            for kind in ("linear", "cosine", "arccos"):
                plan = fixed_count_plan(7, steps, MaskSchedule(kind))
                assert sum(plan) == 7
                assert all(m >= 1 for m in plan) if steps <= 7 else True

    def test_identical_seed_identical_sample(self):
        teacher = self._teacher()
        a = sample_multistep(teacher, 1, MaskSchedule("cosine"), 3,
                             make_stream(7, "t"), batch=32)
        b = sample_multistep(teacher, 1, MaskSchedule("cosine"), 3,
                             make_stream(7, "t"), batch=32)
        assert np.array_equal(a, b)

    def test_fixed_count_mode_runs(self):
        teacher = self._teacher()
        out = sample_multistep(teacher, 0, MaskSchedule("arccos"), 2,
                               make_stream(8, "t"), mode="fixed_count", batch=16)
        assert np.all(out != MASK)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            sample_multistep(self._teacher(), 0, MaskSchedule("linear"), 2,
                             make_stream(0, "t"), mode="greedy")
