import random

import numpy as np
import pytest

from gridfabric.devices import BaseLoadParams
from gridfabric.drm import (
    DayScenario,
    DrmConfig,
    DrmController,
    DrmError,
    LoadTrace,
    brute_force_sheds,
    run_day,
    select_sheds,
)
from gridfabric.model import nid


def lights(*watts, on=True):
    return [(nid(i + 1), float(w), on) for i, w in enumerate(watts)]


class TestSelectSheds:
    def test_no_excess_returns_empty(self):
        assert select_sheds(lights(600, 300), 32.0, 33.0) == frozenset()

    def test_infeasible_returns_all(self):
        got = select_sheds(lights(100, 100), 40.0, 33.0)
        assert got == {nid(1), nid(2)}

    def test_600_300_300_instance(self):
        # excess 1.0 kW; 600+300 = 900 W is NOT sufficient, so the whole set
        # is the only covering subset (confirmed by the exhaustive oracle)
        cands = lights(600, 300, 300)
        got = select_sheds(cands, 34.0, 33.0)
        assert got == brute_force_sheds(cands, 34.0, 33.0) == {nid(1), nid(2), nid(3)}

    def test_single_big_light_beats_two_small(self):
        # excess 500 W: {600} covers it with cardinality 1
        cands = lights(600, 300, 300)
        got = select_sheds(cands, 33.5, 33.0)
        assert got == {nid(1)}

    def test_min_wattage_among_min_cardinality(self):
        # excess 400 W: any single candidate covers; the smallest (450) wins
        cands = [(nid(1), 900.0, True), (nid(2), 500.0, True), (nid(3), 450.0, True)]
        got = select_sheds(cands, 33.4, 33.0)
        assert got == {nid(3)}

    def test_ties_break_by_ascending_nid(self):
        cands = [(nid(4), 500.0, True), (nid(2), 500.0, True), (nid(7), 500.0, True)]
        got = select_sheds(cands, 33.4, 33.0)
        assert got == {nid(2)}

    def test_off_candidates_ignored(self):
        cands = [(nid(1), 600.0, False), (nid(2), 300.0, True), (nid(3), 300.0, True)]
        got = select_sheds(cands, 33.5, 33.0)
        assert got == {nid(2), nid(3)}

    def test_matches_oracle_on_random_instances(self):
        rng = random.Random(5150)
        for trial in range(300):
            n = rng.randint(1, 15)
            cands = [(nid(i + 1), float(rng.randint(1, 30) * 25), rng.random() < 0.85)
                     for i in range(n)]
            total = rng.uniform(32.0, 41.0)
            limit = rng.uniform(30.0, total + 0.5)
            fast = select_sheds(cands, total, limit)
            slow = brute_force_sheds(cands, total, limit)
            w_fast = sum(w for x, w, o in cands if x in fast)
            w_slow = sum(w for x, w, o in cands if x in slow)
            assert (len(fast), w_fast) == (len(slow), w_slow), f"trial {trial}"
            assert fast == slow, f"trial {trial}"

    def test_homogeneous_fleet_is_fast_and_lexicographic(self):
        cands = [(nid(i + 1), 100.0, True) for i in range(60)]
        got = select_sheds(cands, 35.0, 33.0)  # needs 2000 W -> 20 lights
        assert got == {nid(i + 1) for i in range(20)}


class TestDrmConfig:
    def test_validation(self):
        with pytest.raises(DrmError):
            DrmConfig(peak_limit_kw=34.0, trigger_kw=33.0)
        with pytest.raises(DrmError):
            DrmConfig(slots_per_day=100, sample_period_s=10.0)
        DrmConfig(slots_per_day=288, sample_period_s=300.0)  # coarse but valid


class TestController:
    def make(self):
        return DrmController(DrmConfig())

    def test_below_trigger_no_action(self):
        ctl = self.make()
        assert ctl.tick(0, 32.0, lights(100, 100)) is None
        assert not ctl.drm_active

    def test_above_trigger_sheds(self):
        ctl = self.make()
        directive = ctl.tick(0, 34.0, lights(600, 300, 300))
        assert directive is not None and directive["action"] == "off"
        assert ctl.drm_active
        assert set(directive["nids"]) == {"NID1", "NID2", "NID3"}

    def test_restore_needs_consecutive_quiet_slots(self):
        ctl = self.make()
        ctl.tick(0, 34.0, lights(600, 300, 300))
        assert ctl.tick(1, 32.4, []) is None  # streak 1
        assert ctl.tick(2, 33.2, []) is None  # resets: above limit - hysteresis
        assert ctl.tick(3, 32.4, []) is None
        assert ctl.tick(4, 32.4, []) is None
        restored = ctl.tick(5, 32.4, [])
        assert restored is not None and restored["action"] == "restore"

    def test_restore_is_smallest_wattage_first(self):
        ctl = self.make()
        ctl.tick(0, 34.0, lights(600, 300, 300))
        for slot in (1, 2):
            ctl.tick(slot, 32.0, [])
        first = ctl.tick(3, 32.0, [])
        assert first["nids"] == ["NID2"]  # 300 W before 600 W; NID asc on ties
        second = ctl.tick(4, 32.0, [])
        assert second["nids"] == ["NID3"]
        third = ctl.tick(5, 32.0, [])
        assert third["nids"] == ["NID1"]  # largest 600 W restored last
        assert not ctl.drm_active

    def test_shed_target_includes_drift_guard(self):
        ctl = DrmController(DrmConfig(drift_guard_kw=0.05))
        cands = lights(*([100] * 30))
        directive = ctl.tick(0, 34.0, cands)
        shed_w = 100 * len(directive["nids"])
        assert 34.0 - shed_w / 1000.0 <= 33.0 - 0.05 + 1e-9


class TestLoadTrace:
    def test_csv_roundtrip(self, tmp_path):
        trace = LoadTrace(
            base_kw=np.array([30.0, 31.0]),
            uncontrolled_kw=np.array([33.0, 34.0]),
            controlled_kw=np.array([33.0, 33.2]),
            drm_active=np.array([False, True]),
            shed_nids=[(), ("NID1", "NID2")],
        )
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        back = LoadTrace.from_csv(path)
        assert np.allclose(back.base_kw, trace.base_kw)
        assert np.allclose(back.controlled_kw, trace.controlled_kw)
        assert back.shed_nids == [(), ("NID1", "NID2")]
        assert list(back.drm_active) == [False, True]

    def test_shed_set_requires_active_flag(self):
        with pytest.raises(DrmError):
            LoadTrace(np.zeros(1), np.zeros(1), np.zeros(1),
                      np.array([False]), [("NID1",)])


def coarse_scenario(**kw):
    """288-slot day (5-minute sampling) for quick integration tests."""
    params = BaseLoadParams(min_kw=26.0, max_kw=32.8, noise_kw=0.4, slots=288)
    return DayScenario(homes=10, base_params=params, seed=7, **kw)


def coarse_config():
    return DrmConfig(slots_per_day=288, sample_period_s=300.0)


class TestRunDay:
    def test_no_drm_traces_identical(self):
        result = run_day(coarse_config(), coarse_scenario(), drm_enabled=False)
        assert np.array_equal(result.trace.controlled_kw, result.trace.uncontrolled_kw)
        assert not result.directives

    def test_monotone_relief_and_detection_latency(self):
        config = coarse_config()
        result = run_day(config, coarse_scenario())
        trace = result.trace
        assert np.all(trace.controlled_kw <= trace.uncontrolled_kw + 1e-9)
        shed_slots = [slot for slot, d in result.directives if d["action"] == "off"]
        assert shed_slots, "the scenario must actually trigger DRM"
        first_over = int(np.argmax(trace.controlled_kw > config.trigger_kw))
        assert shed_slots[0] == first_over  # no lookahead, no lag

    def test_frozen_arrivals_exceedances_clear_in_one_slot(self):
        config = coarse_config()
        result = run_day(config, coarse_scenario(freeze_arrivals_during_drm=True))
        trace = result.trace
        over_trigger = np.where(trace.controlled_kw > config.trigger_kw)[0]
        assert len(over_trigger) > 0
        for slot in over_trigger:
            if slot + 1 < len(trace.controlled_kw):
                assert trace.controlled_kw[slot + 1] <= config.peak_limit_kw + 1e-9

    def test_seeded_run_reproducible(self):
        a = run_day(coarse_config(), coarse_scenario())
        b = run_day(coarse_config(), coarse_scenario())
        assert np.array_equal(a.trace.controlled_kw, b.trace.controlled_kw)
        assert a.trace.shed_nids == b.trace.shed_nids


class TestDayScenarioConfig:
    def test_from_json(self, tmp_path):
        path = tmp_path / "day.json"
        path.write_text('{"homes": 3, "lights_per_home": 2, "seed": 5,'
                        ' "base_params": {"min_kw": 10, "max_kw": 12, "noise_kw": 0,'
                        ' "slots": 288}}')
        scenario = DayScenario.from_json(path)
        assert scenario.homes == 3
        assert scenario.base_params.max_kw == 12
        topo = scenario.topology()
        assert len(topo["families"]) == 3
        assert len(topo["families"][0]["devices"]) == 2
