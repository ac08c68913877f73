import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detkit.losses import LOSS_IDS, Box, loss_value
from detkit.regression import (
    CSV_HEADER,
    SCENARIOS,
    SimConfig,
    Trajectory,
    detect_enlargement,
    read_trajectory,
    simulate,
    write_trajectory,
)

SMOOTH = [l for l in LOSS_IDS if l != "wiou_v3"]


def traj_of_ratios(ratios):
    t = Trajectory()
    for i, r in enumerate(ratios):
        t.append(i, Box(0, 0, 1, r), 0.0, 1.0, r)
    return t


class TestSimulate:
    @pytest.mark.parametrize("loss_id", LOSS_IDS)
    def test_stationary_at_target(self, loss_id):
        b = Box(1.0, 1.0, 3.0, 4.0)
        t = simulate(SimConfig(loss_id=loss_id, init_box=b, target_box=b, steps=10))
        assert all(x == b for x in t.boxes) and all(v == 1.0 for v in t.ious)

    @pytest.mark.parametrize("loss_id", SMOOTH)
    def test_one_small_step_descends(self, loss_id):
        init, target = Box(0.1, 0.2, 1.4, 1.1), Box(0.5, 0.4, 1.6, 1.9)
        t = simulate(SimConfig(loss_id=loss_id, attention_enabled=True, init_box=init, target_box=target,
                               learning_rate=1e-5, steps=1))  # fmt: skip
        assert t.losses[1] < t.losses[0]

    @pytest.mark.parametrize("loss_id", LOSS_IDS)
    def test_small_lr_non_increasing(self, loss_id):
        t = simulate(SimConfig(loss_id=loss_id, attention_enabled=True, learning_rate=1e-4, steps=20))
        assert all(b <= a + 1e-15 for a, b in zip(t.losses, t.losses[1:]))

    def test_length_and_record_every(self):
        assert len(simulate(SimConfig(steps=10, record_every=3))) == 10 // 3 + 1
        assert len(simulate(SimConfig(steps=0))) == 1

    def test_deterministic(self):
        cfg = SimConfig(loss_id="wiou_v3", learning_rate=0.05, steps=40)
        a, b = simulate(cfg), simulate(cfg)
        assert a.error is None and a.boxes == b.boxes and a.losses == b.losses

    def test_divergence_is_marked(self):
        t = simulate(SimConfig(loss_id="wiou_v3", steps=40))
        assert t.error is not None and 0 < len(t) < 41

    def test_corners_stay_ordered(self):
        t = simulate(SimConfig(loss_id="ciou", learning_rate=5.0, steps=60))
        assert all(b.x2 >= b.x1 and b.y2 >= b.y1 for b in t.boxes)

    def test_attention_flag_selects_penalty_only(self):
        assert SimConfig(loss_id="piou").effective_loss == "piou_penalty"
        assert SimConfig(loss_id="piou", attention_enabled=True).effective_loss == "piou"
        assert SimConfig(loss_id="ciou").effective_loss == "ciou"

    def test_non_finite_truncates(self):
        # a zero-size target makes the penalty undefined
        t = simulate(SimConfig(loss_id="piou", target_box=Box(1, 1, 1, 1), steps=5))
        assert t.error is not None and len(t) == 0

    @pytest.mark.parametrize("bad", [dict(steps=-1), dict(learning_rate=0), dict(record_every=0), dict(loss_id="giou")])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            SimConfig(**bad)


class TestEnlargement:
    def test_flat(self):
        assert detect_enlargement(traj_of_ratios([1.0] * 5)).event_step is None

    def test_constructed(self):
        rep = detect_enlargement(traj_of_ratios([1.0, 1.2, 1.1]), 1.1)
        assert rep.event_step == 1 and rep.max_ratio == 1.2

    def test_empty(self):
        with pytest.raises(ValueError):
            detect_enlargement(Trajectory())

    @pytest.mark.parametrize("name", sorted(SCENARIOS))
    def test_scenario_set(self, name):
        init, target = SCENARIOS[name]
        piou = simulate(SimConfig(loss_id="piou", init_box=init, target_box=target))
        ciou = simulate(SimConfig(loss_id="ciou", init_box=init, target_box=target))
        rp, rc = detect_enlargement(piou), detect_enlargement(ciou)
        assert rp.event_step is None and rp.max_ratio <= 1.05
        assert rc.event_step is not None and rc.final_iou < rp.final_iou

    def test_default_ciou_enlarges_mid_run(self):
        t = simulate(SimConfig(loss_id="ciou"))
        assert max(t.area_ratios[25:76]) > 1.0


class TestCsv:
    def test_round_trip(self, tmp_path):
        t = simulate(SimConfig(loss_id="ciou", steps=30))
        path = tmp_path / "t.csv"
        write_trajectory(t, path)
        back = read_trajectory(path)
        assert back.steps == t.steps
        np.testing.assert_allclose(np.array(back.boxes), np.array(t.boxes), rtol=1e-8)
        for name in ("losses", "ious", "area_ratios"):
            np.testing.assert_allclose(getattr(back, name), getattr(t, name), rtol=1e-8)

    def test_schema(self, tmp_path):
        path = tmp_path / "t.csv"
        write_trajectory(simulate(SimConfig(steps=0)), path)
        raw = path.read_bytes()
        assert b"\r" not in raw
        rows = list(csv.reader(raw.decode().splitlines()))
        assert tuple(rows[0]) == CSV_HEADER and len(rows) == 2
        assert all(len(r) == 8 for r in rows)

    def test_nine_significant_digits(self, tmp_path):
        t = Trajectory()
        t.append(0, Box(1 / 3, 0, 1, 1), 2 / 3, 0.5, 1.0)
        path = tmp_path / "t.csv"
        write_trajectory(t, path)
        assert "0.333333333," in path.read_text()

    def test_unwritable_path_names_it(self, tmp_path):
        bad = tmp_path / "missing" / "t.csv"
        with pytest.raises(OSError, match="missing"):
            write_trajectory(simulate(SimConfig(steps=1)), bad)


@settings(max_examples=20, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_penalty_only_never_grows(dx, dy):
    init = Box(0.0, 0.0, 2.0, 2.0)
    target = Box(1.0 + dx, 1.0 + dy, 3.0 + dx, 3.0 + dy)
    t = simulate(SimConfig(loss_id="piou", init_box=init, target_box=target, steps=60))
    assert max(t.area_ratios) <= 1.05
    assert loss_value("piou_penalty", t.boxes[-1], target) <= loss_value("piou_penalty", init, target) + 1e-12
