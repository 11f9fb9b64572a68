from fractions import Fraction

import numpy as np
import pytest

from reidkit.metrics import average_precision, cgm_query
from reidkit.synthetic import (
    Scenario,
    StepOutOfRange,
    build_figure4_initial,
    figure4_state,
    generate_random_instance,
    insert_error_back_to_front,
    sensitivity_curve,
)

from oracles import ap_oracle, cgm_oracle


def items(s: Scenario):
    return list(zip(s.rel.flags.tolist(), s.rel.cameras.tolist()))


class TestInitial:
    def test_defaults(self):
        s = build_figure4_initial()
        assert len(s.rel) == 100 and s.rel.flags.all()
        assert np.bincount(s.rel.cameras).tolist() == [0] + [10] * 10
        assert average_precision(s.rel) == 1.0
        assert cgm_query(s.rel)[0] == 1.0

    def test_single_camera(self):
        s = insert_error_back_to_front(build_figure4_initial(cameras=1), 1)
        value, per = cgm_query(s.rel)
        assert value == per[1]

    def test_layout(self):
        s = build_figure4_initial(cameras=2, targets_per_camera=3)
        assert s.rel.cameras.tolist() == [1, 1, 1, 2, 2, 2]

    def test_bad_args(self):
        with pytest.raises(ValueError):
            build_figure4_initial(cameras=0)


class TestInsertion:
    def test_step_one(self):
        s = insert_error_back_to_front(build_figure4_initial(), 1)
        flags = s.rel.flags.tolist()
        assert flags.index(False) == 90
        value, per = cgm_query(s.rel)
        assert value == 0.95
        assert all(per[c] == 1.0 for c in range(1, 10))
        assert per[10] == 0.5
        expected_ap = (90 + sum(Fraction(k, k + 1) for k in range(91, 101))) / 100
        assert average_precision(s.rel) == pytest.approx(float(expected_ap), abs=1e-12)
        assert round(average_precision(s.rel), 4) == 0.9990

    def test_subsequence_preserved_and_error_count(self):
        s = build_figure4_initial()
        for i in range(1, 11):
            prev = items(s)
            s = insert_error_back_to_front(s, i)
            cur = items(s)
            assert s.n_errors == i
            # removing the new error gives back the previous list
            new = [k for k in range(len(cur)) if k >= len(prev) or cur[k] != prev[k]][0]
            assert cur[:new] + cur[new + 1:] == prev

    def test_closed_form_after_all_steps(self):
        s = figure4_state(10)
        _, per = cgm_query(s.rel)
        for j in range(1, 11):
            errors_ahead = j
            assert per[j] == pytest.approx(1 / (errors_ahead + 1), abs=1e-15)

    def test_full_sweep_cgm_below_ap(self):
        s = figure4_state(10)
        assert cgm_query(s.rel)[0] < average_precision(s.rel)

    def test_within_mode(self):
        s = insert_error_back_to_front(build_figure4_initial(cameras=2, targets_per_camera=3), 1, "within")
        assert s.rel.flags.tolist() == [True, True, True, True, True, False, True]

    @pytest.mark.parametrize("step", [0, 11])
    def test_out_of_range(self, step):
        with pytest.raises(StepOutOfRange):
            insert_error_back_to_front(build_figure4_initial(), step)

    def test_bad_position(self):
        with pytest.raises(ValueError):
            insert_error_back_to_front(build_figure4_initial(), 1, "after")


class TestRandom:
    def test_deterministic(self):
        a = generate_random_instance(42, 12, 4)
        b = generate_random_instance(42, 12, 4)
        assert a.rel == b.rel
        assert "seed=42" in a.description

    def test_single_item(self):
        for seed in range(20):
            s = generate_random_instance(seed, 1, 3)
            assert len(s.rel) == 1
            assert average_precision(s.rel) == 1.0 and cgm_query(s.rel)[0] == 1.0

    def test_labels(self):
        for seed in range(200):
            s = generate_random_instance(seed, 12, 4)
            assert 1 <= len(s.rel) <= 12
            assert s.rel.flags.any()
            assert set(s.rel.cameras.tolist()) <= {1, 2, 3, 4}

    def test_oracle_sweep(self):
        for seed in range(1000):
            s = generate_random_instance(seed, 12, 4)
            it = items(s)
            assert abs(average_precision(s.rel) - float(ap_oracle(it))) <= 1e-12
            assert abs(cgm_query(s.rel)[0] - float(cgm_oracle(it)[0])) <= 1e-12


class TestCurve:
    def test_zero_steps(self):
        assert sensitivity_curve(build_figure4_initial(), 0).steps == ((0, 1.0, 1.0),)

    def test_shape(self):
        c = sensitivity_curve(build_figure4_initial(), 10)
        cgm, ap = c.mcgm_values, c.map_values
        assert all(b < a for a, b in zip(cgm, cgm[1:]))
        for i in range(1, 11):
            assert abs(cgm[i] - cgm[i - 1]) > abs(ap[i] - ap[i - 1])

    def test_csv(self):
        text = sensitivity_curve(build_figure4_initial(), 1).to_csv()
        assert text.splitlines()[:3] == ["errors,mAP,mCGM", "0,1.000000,1.000000", "1,0.998963,0.950000"]

    def test_too_many_steps(self):
        with pytest.raises(StepOutOfRange):
            sensitivity_curve(build_figure4_initial(cameras=3), 4)

    def test_single_camera_both_drop(self):
        c = sensitivity_curve(build_figure4_initial(cameras=1), 1)
        assert c.map_values[1] < 1.0 and c.mcgm_values[1] < 1.0
