"""Timing model, analytic detection probabilities, histogram accumulation."""

import math

import numpy as np
import pytest

import spadgate as sg
from conftest import brute_detection_likelihood, make_record


# ---------------------------------------------------------------------------
# Timing and unit conversions


def test_derive_num_bins_defaults():
    # 100 ps bins at 20 MHz: period 50 ns, exactly 500 bins.
    assert sg.derive_num_bins(100.0, 20e6) == 500


def test_derive_num_bins_floor_and_edge():
    assert sg.derive_num_bins(1000.0, 1e9) == 1
    # 1/(300 ps * 11 MHz) = 303.03..., floor to 303
    assert sg.derive_num_bins(300.0, 11e6) == 303
    # an exact-division case must not lose a bin to float noise
    assert sg.derive_num_bins(250.0, 4e6) == 1000


def test_depth_bin_round_trip():
    assert sg.depth_to_bin(3.75, 100.0) == 250
    assert sg.depth_to_bin(0.0, 100.0) == 0
    assert sg.bin_to_depth(1, 100.0) == pytest.approx(0.0149896229, rel=1e-12)
    # bin widths scale linearly with resolution
    assert sg.bin_to_depth(10, 50.0) == pytest.approx(5 * sg.bin_to_depth(1, 100.0), rel=1e-12)


def test_spad_config_dead_time_bins():
    cfg = sg.SpadConfig()
    assert cfg.num_bins == 500
    assert cfg.dead_time_bins == 810  # 81 ns / 100 ps exactly
    assert sg.SpadConfig(dead_time_ns=81.05).dead_time_bins == 811  # partial bin blocks the whole bin
    assert sg.SpadConfig(dead_time_ns=0.0).dead_time_bins == 0
    assert cfg.bin_size_m == pytest.approx(0.0149896229, rel=1e-12)


def test_spad_config_from_timing_matches_derived():
    cfg = sg.SpadConfig.from_timing(100.0, 20e6, dead_time_ns=81.0)
    assert cfg.num_bins == 500
    assert cfg == sg.SpadConfig(bin_resolution_ps=100.0, rep_rate_hz=20e6, num_bins=500, dead_time_ns=81.0)


def test_spad_config_validation():
    with pytest.raises(ValueError):
        sg.SpadConfig(num_bins=0)
    with pytest.raises(ValueError):
        sg.SpadConfig(dead_time_ns=-1.0)
    with pytest.raises(ValueError):
        sg.SpadConfig(max_active_periods=0)


# ---------------------------------------------------------------------------
# Scene transients


def test_scene_transient_rates_layout():
    scene = sg.SceneTransient(num_bins=8, ambient_flux=0.1, peaks=((3, 0.5),))
    expected = np.full(8, 0.1)
    expected[3] += 0.5
    assert np.array_equal(scene.rates, expected)
    assert scene.rate(3) == pytest.approx(0.6)
    assert scene.total_rate == pytest.approx(1.3)


def test_scene_transient_peaks_accumulate():
    scene = sg.SceneTransient(num_bins=4, ambient_flux=0.0, peaks=((1, 0.2), (1, 0.3)))
    assert scene.rates[1] == pytest.approx(0.5)


def test_scene_transient_rates_read_only():
    scene = sg.SceneTransient(num_bins=4, ambient_flux=0.1)
    with pytest.raises(ValueError):
        scene.rates[0] = 9.0


def test_scene_transient_validation():
    with pytest.raises(ValueError):
        sg.SceneTransient(num_bins=4, ambient_flux=-0.1)
    with pytest.raises(ValueError):
        sg.SceneTransient(num_bins=4, ambient_flux=0.1, peaks=((4, 0.5),))
    with pytest.raises(ValueError):
        sg.SceneTransient(num_bins=4, ambient_flux=0.1, peaks=((1, -0.5),))
    with pytest.raises(ValueError):
        sg.SceneTransient(num_bins=4, ambient_flux=0.1, tail=(0.5, 1.0))  # tail needs a peak to anchor


def test_scene_from_rates_round_trip():
    rates = np.array([0.0, 0.3, 0.05, 1.2, 0.0])
    scene = sg.SceneTransient.from_rates(rates)
    assert np.allclose(scene.rates, rates, rtol=0, atol=0)
    assert scene.num_bins == 5


def test_scene_shifted_rolls_rates():
    scene = sg.SceneTransient(num_bins=6, ambient_flux=0.1, peaks=((2, 0.7),))
    assert np.array_equal(sg.SceneTransient.from_rates(np.roll(scene.rates, 2)).rates, scene.shifted(2).rates)


def test_scene_prefix_consistency():
    scene = sg.SceneTransient(num_bins=7, ambient_flux=0.03, peaks=((5, 0.9),))
    assert scene.scan_prefix.shape == (8,)
    assert scene.scan_prefix[0] == 0.0
    assert scene.total_rate == scene.scan_prefix[-1]


# ---------------------------------------------------------------------------
# Detection probabilities


def test_no_detection_probability_flat():
    scene = sg.SceneTransient(num_bins=8, ambient_flux=0.1)
    assert sg.no_detection_probability(scene) == pytest.approx(math.exp(-0.8), rel=1e-12)
    scene500 = sg.SceneTransient(num_bins=500, ambient_flux=0.01)
    assert sg.no_detection_probability(scene500) == pytest.approx(0.006737946999085467, rel=1e-12)


def test_no_detection_probability_gate_independent():
    scene = sg.SceneTransient(num_bins=8, ambient_flux=0.1, peaks=((3, 0.5),))
    vals = {sg.no_detection_probability(scene, g) for g in range(8)}
    assert len(vals) == 1  # a full period is scanned regardless of phase
    assert vals.pop() == pytest.approx(math.exp(-1.3), rel=1e-12)


def test_detection_likelihood_frozen_values():
    scene = sg.SceneTransient(num_bins=8, ambient_flux=0.1, peaks=((3, 0.5),))
    assert sg.detection_likelihood(scene, 5, 0) == pytest.approx(0.035008357473362776, rel=1e-12)
    flat = sg.SceneTransient(num_bins=8, ambient_flux=0.1)
    # detection at the armed bin itself: no survival factors at all
    assert sg.detection_likelihood(flat, 2, 2) == pytest.approx(0.09516258196404048, rel=1e-12)


@pytest.mark.parametrize("num_bins", [5, 12])
def test_detection_likelihood_matches_brute_force(num_bins, rng):
    for _ in range(8):
        ambient = float(rng.uniform(1e-3, 0.4))
        peaks = tuple(
            (int(rng.integers(0, num_bins)), float(rng.uniform(0.0, 1.5)))
            for _ in range(int(rng.integers(0, 3)))
        )
        scene = sg.SceneTransient(num_bins=num_bins, ambient_flux=ambient, peaks=peaks)
        gate = int(rng.integers(0, num_bins))
        for t in range(gate, gate + 2 * num_bins):
            assert sg.detection_likelihood(scene, t, gate) == pytest.approx(
                brute_detection_likelihood(scene.rates, t, gate), rel=1e-12
            )


def test_detection_likelihood_rotation_invariance():
    # Shifting the scene and the gate together scans the exact same rate
    # sequence, so in-period probabilities must match to the last bit.
    scene = sg.SceneTransient(num_bins=9, ambient_flux=0.07, peaks=((2, 0.8), (6, 0.3)))
    for shift in (1, 4, 8):
        shifted = scene.shifted(shift)
        for gate in (0, 3):
            g2 = (gate + shift) % 9
            for offset in range(9):
                assert sg.detection_likelihood(scene, gate + offset, gate) == sg.detection_likelihood(
                    shifted, g2 + offset, g2
                )
            for offset in range(9, 14):  # later periods add a total-rate term, exact only to rounding
                assert sg.detection_likelihood(scene, gate + offset, gate) == pytest.approx(
                    sg.detection_likelihood(shifted, g2 + offset, g2), rel=1e-12
                )


def test_detection_distribution_matches_scalar():
    scene = sg.SceneTransient(num_bins=11, ambient_flux=0.05, peaks=((7, 1.1),))
    for gate in (0, 4, 10):
        dist = sg.detection_distribution(scene, gate)
        for k in range(11):
            assert dist[k] == pytest.approx(sg.detection_likelihood(scene, gate + k, gate), rel=1e-12)


def test_detection_distribution_normalizes_with_censoring():
    for ambient, peaks in [(0.02, ()), (0.1, ((3, 0.5),)), (0.4, ((1, 2.0), (5, 0.7)))]:
        scene = sg.SceneTransient(num_bins=8, ambient_flux=ambient, peaks=peaks)
        for gate in range(8):
            # over one period: sum of detection masses plus survival is exactly 1
            total = sg.detection_distribution(scene, gate).sum() + sg.no_detection_probability(scene)
            assert total == pytest.approx(1.0, abs=1e-12)


def test_detection_likelihood_later_periods_scale_by_survival():
    scene = sg.SceneTransient(num_bins=6, ambient_flux=0.08, peaks=((4, 0.9),))
    gate = 2
    q = sg.no_detection_probability(scene)
    dist = sg.detection_distribution(scene, gate)
    for j in (1, 2, 3):
        for k in (0, 3, 5):
            assert sg.detection_likelihood(scene, gate + k + j * 6, gate) == pytest.approx(
                (q**j) * dist[k], rel=1e-12
            )


def test_pileup_distribution_is_gate_zero():
    scene = sg.SceneTransient(num_bins=10, ambient_flux=0.2, peaks=((6, 0.8),))
    assert np.array_equal(sg.pileup_distribution(scene), sg.detection_distribution(scene, 0))


def test_pileup_skews_early():
    # high flux piles detections onto the bins right after arming
    scene = sg.SceneTransient(num_bins=10, ambient_flux=0.5)
    dist = sg.pileup_distribution(scene)
    assert np.all(np.diff(dist) < 0)


def test_folded_distribution_definition_and_normalization():
    scene = sg.SceneTransient(num_bins=9, ambient_flux=0.06, peaks=((2, 0.6),))
    q = sg.no_detection_probability(scene)
    for gate in (0, 5):
        folded = sg.folded_detection_distribution(scene, gate)
        dist = sg.detection_distribution(scene, gate)
        assert folded.sum() == pytest.approx(1.0, abs=1e-12)
        for t in range(9):
            # folded[t] is indexed by absolute bin, not offset from the gate
            assert folded[t] == pytest.approx(dist[(t - gate) % 9] / (1.0 - q), rel=1e-12)


# ---------------------------------------------------------------------------
# Sequence likelihood


def test_sequence_log_likelihood_frozen():
    scene = sg.SceneTransient(num_bins=8, ambient_flux=0.1, peaks=((4, 1.0),))
    record = make_record(8, [(0, 4), (2, 6), (5, 1)])
    assert sg.no_detection_probability(scene) == pytest.approx(0.1652988882215865, rel=1e-12)
    assert sg.sequence_log_likelihood(scene, record) == pytest.approx(-6.767064191486568, rel=1e-12)


def test_sequence_log_likelihood_single_cycle_matches_folded():
    scene = sg.SceneTransient(num_bins=8, ambient_flux=0.1, peaks=((4, 1.0),))
    for gate, ts in [(0, 4), (3, 1), (7, 7)]:
        record = make_record(8, [(gate, ts)])
        folded = sg.folded_detection_distribution(scene, gate)
        assert sg.sequence_log_likelihood(scene, record) == pytest.approx(math.log(folded[ts]), rel=1e-12)


def test_sequence_log_likelihood_censored_and_empty():
    scene = sg.SceneTransient(num_bins=8, ambient_flux=0.1, peaks=((4, 1.0),))
    q = sg.no_detection_probability(scene)
    assert sg.sequence_log_likelihood(scene, make_record(8, [(0, None), (5, None)])) == pytest.approx(
        2 * math.log(q), rel=1e-12
    )
    assert sg.sequence_log_likelihood(scene, make_record(8, [])) == 0.0


def test_sequence_log_likelihood_folds_out_elapsed_periods():
    # folded timestamps marginalize the period index, so the recorded
    # period count cannot change the likelihood
    scene = sg.SceneTransient(num_bins=8, ambient_flux=0.1, peaks=((4, 1.0),))
    a = make_record(8, [(0, 4, 0)])
    b = make_record(8, [(0, 4, 3)])
    assert sg.sequence_log_likelihood(scene, a) == sg.sequence_log_likelihood(scene, b)


def test_sequence_log_likelihood_impossible_observation():
    rates = np.array([0.2, 0.0, 0.3, 0.1])
    scene = sg.SceneTransient.from_rates(rates)
    record = make_record(4, [(0, 1)])  # detection in a zero-rate bin
    assert sg.sequence_log_likelihood(scene, record) == float("-inf")


def test_sequence_log_likelihood_is_additive():
    scene = sg.SceneTransient(num_bins=8, ambient_flux=0.1, peaks=((4, 1.0),))
    r1 = make_record(8, [(0, 4), (2, None)])
    r2 = make_record(8, [(5, 1)])
    both = sg.AcquisitionRecord.concatenate([r1, r2])
    assert sg.sequence_log_likelihood(scene, both) == pytest.approx(
        sg.sequence_log_likelihood(scene, r1) + sg.sequence_log_likelihood(scene, r2), rel=1e-12
    )


# ---------------------------------------------------------------------------
# Histogram accumulation


def test_histogram_hand_example():
    record = make_record(3, [(0, 1), (1, 2), (2, 0)])
    hist = sg.timestamps_to_histogram(record)
    assert np.array_equal(hist.counts, [1, 1, 1])
    assert np.array_equal(hist.denominators, [2, 2, 2])


def test_histogram_counts_multi_period_passes():
    # detection one full period after arming: every bin armed twice except
    # those after the detection bin in the second pass
    record = make_record(3, [(0, 1, 1)])
    hist = sg.timestamps_to_histogram(record)
    assert np.array_equal(hist.counts, [0, 1, 0])
    assert np.array_equal(hist.denominators, [2, 2, 1])
    censored = make_record(3, [(1, None, 2)])
    hist2 = sg.timestamps_to_histogram(censored)
    assert np.array_equal(hist2.counts, [0, 0, 0])
    assert np.array_equal(hist2.denominators, [2, 2, 2])


def _brute_histogram(record):
    counts = np.zeros(record.num_bins, dtype=np.int64)
    denoms = np.zeros(record.num_bins, dtype=np.int64)
    for i in range(len(record)):
        g = int(record.gates[i])
        if record.detected[i]:
            offset = (int(record.timestamps[i]) - g) % record.num_bins
            length = int(record.elapsed_periods[i]) * record.num_bins + offset + 1
            counts[int(record.timestamps[i])] += 1
        else:
            length = int(record.elapsed_periods[i]) * record.num_bins
        for step in range(length):
            denoms[(g + step) % record.num_bins] += 1
    return counts, denoms


def test_histogram_matches_brute_force_on_simulated_record():
    scene = sg.SceneTransient(num_bins=7, ambient_flux=0.05, peaks=((3, 0.4),))
    # a 2-period cap keeps survival high enough that censored cycles occur
    spad = sg.SpadConfig(bin_resolution_ps=100.0, rep_rate_hz=20e6, num_bins=7, dead_time_ns=2.0, max_active_periods=2)
    record = sg.run_acquisition(scene, spad, sg.UniformGatePolicy(7), max_cycles=400, seed=5)
    assert record.detected.any() and not record.detected.all()  # both cycle kinds exercised
    hist = sg.timestamps_to_histogram(record)
    counts, denoms = _brute_histogram(record)
    assert np.array_equal(hist.counts, counts)
    assert np.array_equal(hist.denominators, denoms)
    assert int(hist.counts.sum()) == int(record.detected.sum())


def test_histogram_empty_record():
    hist = sg.timestamps_to_histogram(make_record(5, []))
    assert np.array_equal(hist.counts, np.zeros(5, dtype=np.int64))
    assert np.array_equal(hist.denominators, np.zeros(5, dtype=np.int64))


def test_detected_histogram_validation():
    with pytest.raises(ValueError):
        sg.DetectedHistogram(counts=np.array([2, 0]), denominators=np.array([1, 1]))


# ---------------------------------------------------------------------------
# Record plumbing


def test_record_validation():
    with pytest.raises(ValueError):
        make_record(4, [(0, 4)])  # timestamp outside the period
    with pytest.raises(ValueError):
        sg.AcquisitionRecord(
            num_bins=4,
            gates=np.array([0]),
            timestamps=np.array([2]),
            detected=np.array([False]),  # censored cycles must store -1
            elapsed_periods=np.array([1]),
            cycle_durations=np.array([10]),
            exposure_bins=10,
        )
    with pytest.raises(ValueError):
        make_record(4, [(0, 1)], calibration_cycles=2)


def test_record_head_and_concatenate():
    record = make_record(6, [(0, 3), (1, None), (2, 5)], calibration_cycles=2)
    head = record.head(2)
    assert len(head) == 2
    assert head.calibration_cycles == 2
    assert head.exposure_bins == int(head.cycle_durations.sum())
    back = sg.AcquisitionRecord.concatenate([head, record.head(3)])
    assert len(back) == 5
    assert back.exposure_bins == head.exposure_bins + record.head(3).exposure_bins
