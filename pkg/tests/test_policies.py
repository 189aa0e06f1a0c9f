"""Gating policies: termination metrics, calibration, Thompson sampling, reward."""

import math

import numpy as np
import pytest

import spadgate as sg
from spadgate.spadsim import CycleOutcome


def _outcome(gate, ts=None, periods=0, duration=100):
    return CycleOutcome(
        gate=gate,
        timestamp=-1 if ts is None else ts,
        detected=ts is not None,
        elapsed_periods=periods,
        cycle_duration_bins=duration,
    )


# ---------------------------------------------------------------------------
# Termination metrics and exposure control


def test_termination_value_uniform_and_sharp():
    post = sg.posterior_init(4)
    assert sg.termination_value(post) == pytest.approx(0.75, rel=1e-12)
    assert sg.termination_value(post, "entropy") == pytest.approx(math.log(4), rel=1e-12)
    sharp = sg.posterior_init(4, prior=np.array([0.0, 1.0, 0.0, 0.0]))
    assert sg.termination_value(sharp) == pytest.approx(0.0, abs=1e-12)
    assert sg.termination_value(sharp, "entropy") == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        sg.termination_value(post, "wat")


def test_exposure_control_validation():
    with pytest.raises(ValueError):
        sg.ExposureControl(epsilon=0.0)
    with pytest.raises(ValueError):
        sg.ExposureControl(metric="nope")


def test_should_stop_respects_min_cycles():
    from spadgate.policies import should_stop

    control = sg.ExposureControl(epsilon=0.25)
    sharp = sg.posterior_init(4, prior=np.array([0.0, 1.0, 0.0, 0.0]))
    assert not should_stop(control, sharp, cycle_index=9, min_cycles=10)
    assert should_stop(control, sharp, cycle_index=10, min_cycles=10)
    flat = sg.posterior_init(4)
    assert not should_stop(control, flat, cycle_index=50, min_cycles=10)


# ---------------------------------------------------------------------------
# Non-adaptive policies


def test_fixed_gate_policy():
    pol = sg.FixedGatePolicy(gate=7, num_bins=10)
    rng = sg.stream_rng(0)
    assert [pol.next_gate(rng) for _ in range(3)] == [7, 7, 7]
    assert not pol.should_stop()
    with pytest.raises(ValueError):
        sg.FixedGatePolicy(gate=10, num_bins=10)


def test_uniform_gate_policy_cycles_every_bin():
    pol = sg.UniformGatePolicy(num_bins=4)
    rng = sg.stream_rng(0)
    seen = []
    for _ in range(6):
        g = pol.next_gate(rng)
        seen.append(g)
        pol.observe(_outcome(g, ts=g))
    assert seen == [0, 1, 2, 3, 0, 1]


def test_free_running_policy_returns_sentinel():
    pol = sg.FreeRunningPolicy()
    assert pol.next_gate(sg.stream_rng(0)) is sg.FREE_RUN


# ---------------------------------------------------------------------------
# Adaptive policy: calibration phase


def test_adaptive_requires_calibration_when_background_unknown():
    with pytest.raises(ValueError):
        sg.AdaptiveGatePolicy(num_bins=8)
    with pytest.raises(ValueError):
        sg.AdaptiveGatePolicy(num_bins=8, bkg_flux=0.0)
    sg.AdaptiveGatePolicy(num_bins=8, calibration_cycles=1)  # fine
    sg.AdaptiveGatePolicy(num_bins=8, bkg_flux=0.1)  # fine, no calibration needed


def test_adaptive_known_background_skips_calibration():
    pol = sg.AdaptiveGatePolicy(num_bins=8, bkg_flux=0.1)
    assert pol.posterior is not None
    assert pol.calibration_cycles == 0
    assert pol.bkg_flux == 0.1


def test_adaptive_calibration_gates_spread_evenly():
    pol = sg.AdaptiveGatePolicy(num_bins=100, calibration_cycles=5)
    rng = sg.stream_rng(1)
    gates = []
    for _ in range(5):
        g = pol.next_gate(rng)
        gates.append(g)
        pol.observe(_outcome(g))
    assert gates == [0, 20, 40, 60, 80]
    pol8 = sg.AdaptiveGatePolicy(num_bins=8, calibration_cycles=3)
    gates8 = []
    for _ in range(3):
        g = pol8.next_gate(rng)
        gates8.append(g)
        pol8.observe(_outcome(g))
    assert gates8 == [0, 2, 5]


def test_adaptive_finalizes_after_calibration_and_replays_buffer():
    num_bins, n_cal = 10, 4
    prior = np.full(num_bins, 0.1)
    pol = sg.AdaptiveGatePolicy(num_bins=num_bins, prior=prior, calibration_cycles=n_cal)
    rng = sg.stream_rng(2)
    timestamps = [3, None, 5, 0]
    gates = []
    for ts in timestamps:
        g = pol.next_gate(rng)  # calibration chooses the gate
        gates.append(g)
        pol.observe(_outcome(g, ts=ts))
    assert gates == [0, 2, 5, 7]
    assert pol.posterior is not None
    assert pol.bkg_flux is not None
    # replay must equal a batch posterior over the same outcomes
    import conftest

    record = conftest.make_record(num_bins, list(zip(gates, timestamps)))
    batch = sg.posterior_from_record(
        record, pol.bkg_flux, prior=prior, flux_grid=pol.posterior.flux_grid
    )
    assert np.allclose(pol.posterior.log_mass, batch.log_mass, atol=1e-12)


def test_adaptive_ensure_posterior_with_partial_buffer():
    pol = sg.AdaptiveGatePolicy(num_bins=8, calibration_cycles=10, background_fallback=0.03)
    rng = sg.stream_rng(3)
    for _ in range(2):
        g = pol.next_gate(rng)
        pol.observe(_outcome(g))
    assert pol.posterior is None
    pol.ensure_posterior()
    assert pol.posterior is not None
    # 2 censored cycles cannot clear the detection floor: fallback applies
    assert pol.background_estimate.low_confidence
    assert pol.bkg_flux == 0.03


# ---------------------------------------------------------------------------
# Adaptive policy: Thompson sampling


def _sharpen(pol, depth):
    mass = np.full(pol.posterior.log_mass.shape, -np.inf)
    mass[depth] = 0.0
    if pol.posterior.joint:
        mass[depth, :] = -math.log(mass.shape[1])
    pol.posterior.log_mass = mass


def test_thompson_gate_tracks_sampled_depth():
    pol = sg.AdaptiveGatePolicy(num_bins=12, bkg_flux=0.1)
    _sharpen(pol, 9)
    rng = sg.stream_rng(4)
    assert pol.next_gate(rng) == 9
    assert pol.last_sampled_depth == 9
    offset_pol = sg.AdaptiveGatePolicy(num_bins=12, bkg_flux=0.1, gate_offset=3)
    _sharpen(offset_pol, 2)
    assert offset_pol.next_gate(rng) == (2 - 3) % 12


def test_sample_depth_consumes_exactly_one_uniform():
    pol = sg.AdaptiveGatePolicy(num_bins=16, bkg_flux=0.1)
    a = sg.stream_rng(5)
    b = sg.stream_rng(5)
    pol.sample_depth(a)
    b.random()
    assert a.random() == b.random()


def test_sample_depth_uniform_posterior_chi_squared():
    # 100k draws over 100 equiprobable bins; chi^2 at the 0.1% point of
    # the chi^2(99) distribution
    num_bins, draws = 100, 100_000
    pol = sg.AdaptiveGatePolicy(num_bins=num_bins, bkg_flux=0.1)
    rng = sg.stream_rng(6)
    samples = np.array([pol.sample_depth(rng) for _ in range(draws)])
    counts = np.bincount(samples, minlength=num_bins)
    expected = draws / num_bins
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 148.23035916510173


def test_sample_depth_respects_posterior_mass():
    pol = sg.AdaptiveGatePolicy(num_bins=4, bkg_flux=0.1, prior=np.array([0.7, 0.3, 0.0, 0.0]))
    rng = sg.stream_rng(7)
    samples = np.array([pol.sample_depth(rng) for _ in range(20_000)])
    freq = np.bincount(samples, minlength=4) / samples.size
    assert freq[0] == pytest.approx(0.7, abs=0.02)
    assert freq[1] == pytest.approx(0.3, abs=0.02)
    assert freq[2] == 0.0 and freq[3] == 0.0


def test_adaptive_exposure_stop():
    control = sg.ExposureControl(epsilon=0.25, min_cycles=6)
    pol = sg.AdaptiveGatePolicy(num_bins=8, bkg_flux=0.1, exposure=control)
    _sharpen(pol, 3)
    assert not pol.should_stop()  # cycle_index still below min_cycles
    pol.cycle_index = 6
    assert pol.should_stop()
    pol.exposure = None
    assert not pol.should_stop()


def test_adaptive_min_cycles_default_covers_calibration():
    pol = sg.AdaptiveGatePolicy(num_bins=8, calibration_cycles=20)
    assert pol.min_cycles == 30
    pol2 = sg.AdaptiveGatePolicy(
        num_bins=8, bkg_flux=0.1, exposure=sg.ExposureControl(min_cycles=3)
    )
    assert pol2.min_cycles == 3


# ---------------------------------------------------------------------------
# Reward and the optimal gate


def test_reward_closed_matches_brute_small():
    for b, bkg, phi in [(10, 0.05, 0.5), (10, 0.3, 1.2)]:
        for d in range(b):
            for g in range(b):
                closed = sg.reward(d, g, b, bkg, phi, method="closed")
                brute = sg.reward(d, g, b, bkg, phi, method="brute")
                assert closed == pytest.approx(brute, abs=1e-12)


def test_reward_is_negative_expected_loss():
    b, bkg, phi = 6, 0.1, 0.8
    d, g = 4, 1
    scene = sg.SceneTransient(num_bins=b, ambient_flux=bkg, peaks=((d, phi),))
    hit = sg.detection_likelihood(scene, g + (d - g) % b, g)
    assert sg.reward(d, g, b, bkg, phi) == pytest.approx(-(1.0 - hit), rel=1e-12)


def test_optimal_gate_is_sampled_depth():
    b, bkg, phi = 10, 0.08, 0.6
    for d in range(b):
        rewards = [sg.reward(d, g, b, bkg, phi, method="brute") for g in range(b)]
        best = int(np.argmax(rewards))
        assert best == sg.optimal_gate(d, b) == d
        ordered = sorted(rewards)
        assert ordered[-1] > ordered[-2]  # strictly unique peak


def test_reward_validation():
    with pytest.raises(ValueError):
        sg.reward(10, 0, 10, 0.1, 0.5)
    with pytest.raises(ValueError):
        sg.reward(0, 10, 10, 0.1, 0.5)
    with pytest.raises(ValueError):
        sg.reward(0, 0, 10, 0.1, 0.5, method="guess")
