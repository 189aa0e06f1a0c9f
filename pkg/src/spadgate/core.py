"""Timing model and exact detection probabilities for gated SPAD lidar.

A SPAD pixel synchronized to a pulsed laser divides each pulse period into
``num_bins`` discrete time bins.  Photon arrivals in bin ``i`` are Poisson
with per-pulse rate ``r[i]``, so the probability that an armed pixel fires
in that bin is ``1 - exp(-r[i])``.  Once armed at a gate bin the pixel
stays active, scanning bins in time order (wrapping across pulse periods),
until its first detection; the avalanche then starts the dead time.
Hardware timestamps are recorded modulo the pulse period (folded).

Everything downstream (estimators, gating policies, the simulator) is built
on the per-cycle probability kernels in this module.  All sequence-level
likelihoods are computed in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SPEED_OF_LIGHT_M_S = 299_792_458.0

# Below this rate, 1 - exp(-r) must be evaluated with expm1 to keep
# relative accuracy; we simply use expm1 everywhere.
_TINY_RATE = 1e-6


def derive_num_bins(bin_resolution_ps: float, rep_rate_hz: float) -> int:
    """Number of whole time bins per pulse period, floor(period / bin).

    A 1e-9 relative nudge absorbs representation error so that exact
    integer ratios (e.g. 100 ps at 20 MHz -> 500) never floor one short.
    """
    if bin_resolution_ps <= 0 or rep_rate_hz <= 0:
        raise ValueError("bin resolution and repetition rate must be positive")
    ratio = 1.0 / (bin_resolution_ps * 1e-12 * rep_rate_hz)
    return int(math.floor(ratio * (1.0 + 1e-9)))


def depth_to_bin(depth_m: float, bin_resolution_ps: float) -> int:
    """Round-trip time-of-flight bin index for a target at ``depth_m``."""
    return int(math.floor(2.0 * depth_m / (SPEED_OF_LIGHT_M_S * bin_resolution_ps * 1e-12)))


def bin_to_depth(depth_bin: float, bin_resolution_ps: float) -> float:
    """Depth in meters for a (possibly fractional) time-of-flight bin."""
    return depth_bin * SPEED_OF_LIGHT_M_S * bin_resolution_ps * 1e-12 / 2.0


@dataclass(frozen=True)
class SpadConfig:
    """Pixel timing parameters.

    Defaults: 100 ps bins at a 20 MHz repetition rate (500 bins per
    period) and an 81 ns dead time, quantized up to 810 whole bins.
    """

    bin_resolution_ps: float = 100.0
    rep_rate_hz: float = 20e6
    num_bins: int = 500
    dead_time_ns: float = 81.0
    max_active_periods: int = 16

    def __post_init__(self) -> None:
        if self.bin_resolution_ps <= 0 or self.rep_rate_hz <= 0:
            raise ValueError("bin resolution and repetition rate must be positive")
        if self.num_bins < 1:
            raise ValueError("num_bins must be at least 1")
        if self.dead_time_ns < 0:
            raise ValueError("dead time cannot be negative")
        if self.max_active_periods < 1:
            raise ValueError("max_active_periods must be at least 1")

    @classmethod
    def from_timing(
        cls,
        bin_resolution_ps: float = 100.0,
        rep_rate_hz: float = 20e6,
        dead_time_ns: float = 81.0,
        max_active_periods: int = 16,
    ) -> "SpadConfig":
        """Derive ``num_bins`` from the bin width and repetition rate."""
        return cls(
            bin_resolution_ps=bin_resolution_ps,
            rep_rate_hz=rep_rate_hz,
            num_bins=derive_num_bins(bin_resolution_ps, rep_rate_hz),
            dead_time_ns=dead_time_ns,
            max_active_periods=max_active_periods,
        )

    @property
    def dead_time_bins(self) -> int:
        """Dead time quantized up to whole bins (ceil, fuzz-tolerant)."""
        raw = self.dead_time_ns * 1000.0 / self.bin_resolution_ps
        return int(math.ceil(raw - 1e-9))

    @property
    def bin_size_m(self) -> float:
        """Depth extent of one time bin (round trip folded out)."""
        return bin_to_depth(1.0, self.bin_resolution_ps)


@dataclass
class SceneTransient:
    """Per-pulse photon rates r[i] seen by one pixel.

    ``ambient_flux`` is a constant background rate per bin; each peak adds
    ``flux`` photons/pulse at a single bin.  An optional exponential tail
    (amplitude, decay per bin), anchored just after the first peak, models
    multi-bounce returns: amp * exp(-decay * (i - d)) for i > d within the
    period.  Treat instances as immutable; the dense rate array is cached.
    """

    num_bins: int
    ambient_flux: float
    peaks: tuple[tuple[int, float], ...] = ()
    tail: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.num_bins < 1:
            raise ValueError("num_bins must be at least 1")
        if self.ambient_flux < 0:
            raise ValueError("ambient flux cannot be negative")
        self.peaks = tuple((int(d), float(f)) for d, f in self.peaks)
        for d, f in self.peaks:
            if not 0 <= d < self.num_bins:
                raise ValueError(f"peak bin {d} outside [0, {self.num_bins})")
            if f < 0:
                raise ValueError("peak flux cannot be negative")
        if self.tail is not None:
            if not self.peaks:
                raise ValueError("a tail needs a peak to anchor to")
            amp, decay = self.tail
            if amp < 0 or decay <= 0:
                raise ValueError("tail amplitude must be >= 0 and decay > 0")
            self.tail = (float(amp), float(decay))

    @cached_property
    def rates(self) -> np.ndarray:
        r = np.full(self.num_bins, float(self.ambient_flux))
        for d, f in self.peaks:
            r[d] += f
        if self.tail is not None:
            amp, decay = self.tail
            d0 = self.peaks[0][0]
            i = np.arange(d0 + 1, self.num_bins)
            r[i] += amp * np.exp(-decay * (i - d0))
        r.flags.writeable = False
        return r

    @cached_property
    def scan_prefix(self) -> np.ndarray:
        """Cumulative rates: entry j is sum(rates[:j]), length num_bins + 1."""
        p = np.concatenate(([0.0], np.cumsum(self.rates)))
        p.flags.writeable = False
        return p

    @cached_property
    def total_rate(self) -> float:
        # Taken from scan_prefix so samplers that walk the prefix and code
        # that folds whole periods agree to the last ulp.
        return float(self.scan_prefix[-1])

    def rate(self, i: int) -> float:
        """Rate at bin ``i`` (taken modulo the period)."""
        return float(self.rates[i % self.num_bins])

    @classmethod
    def from_rates(cls, rates: np.ndarray) -> "SceneTransient":
        """Scene with an explicit per-bin rate array."""
        rates = np.asarray(rates, dtype=float)
        if rates.ndim != 1 or rates.size < 1:
            raise ValueError("rates must be a 1-d array")
        if np.any(rates < 0):
            raise ValueError("rates cannot be negative")
        peaks = tuple((int(i), float(v)) for i, v in enumerate(rates) if v > 0)
        return cls(num_bins=int(rates.size), ambient_flux=0.0, peaks=peaks)

    def shifted(self, shift: int) -> "SceneTransient":
        """Scene whose rate array is cyclically rotated by ``shift`` bins."""
        return SceneTransient.from_rates(np.roll(self.rates, shift))


@dataclass
class AcquisitionRecord:
    """Per-cycle observations from one pixel acquisition.

    ``timestamps`` hold folded detection bins in [0, num_bins); censored
    cycles (no detection within the active-period cap) store -1 with
    ``detected`` False.  ``elapsed_periods`` counts whole pulse periods
    between arming and detection (the cap count for censored cycles); it is
    kept for histogram building and diagnostics, estimators never condition
    on it.  ``cycle_durations`` count absolute bins consumed per cycle
    including re-arm wait and dead time, so they sum to ``exposure_bins``.
    The first ``calibration_cycles`` entries used uniformly spread gates
    reserved for background estimation.
    """

    num_bins: int
    gates: np.ndarray
    timestamps: np.ndarray
    detected: np.ndarray
    elapsed_periods: np.ndarray
    cycle_durations: np.ndarray
    exposure_bins: int
    calibration_cycles: int = 0

    def __post_init__(self) -> None:
        self.gates = np.asarray(self.gates, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.detected = np.asarray(self.detected, dtype=bool)
        self.elapsed_periods = np.asarray(self.elapsed_periods, dtype=np.int64)
        self.cycle_durations = np.asarray(self.cycle_durations, dtype=np.int64)
        n = len(self.gates)
        for name in ("timestamps", "detected", "elapsed_periods", "cycle_durations"):
            if len(getattr(self, name)) != n:
                raise ValueError("per-cycle arrays must have equal length")
        if n:
            if self.gates.min() < 0 or self.gates.max() >= self.num_bins:
                raise ValueError("gate outside [0, num_bins)")
            ts = self.timestamps
            if np.any(ts[self.detected] < 0) or np.any(ts >= self.num_bins):
                raise ValueError("timestamp outside [0, num_bins)")
            if np.any(ts[~self.detected] != -1):
                raise ValueError("censored cycles must store timestamp -1")
        if not 0 <= self.calibration_cycles <= n:
            raise ValueError("calibration_cycles outside record")

    def __len__(self) -> int:
        return len(self.gates)

    def head(self, n: int) -> "AcquisitionRecord":
        """Record restricted to the first ``n`` cycles."""
        n = min(n, len(self))
        return AcquisitionRecord(
            num_bins=self.num_bins,
            gates=self.gates[:n].copy(),
            timestamps=self.timestamps[:n].copy(),
            detected=self.detected[:n].copy(),
            elapsed_periods=self.elapsed_periods[:n].copy(),
            cycle_durations=self.cycle_durations[:n].copy(),
            exposure_bins=int(self.cycle_durations[:n].sum()),
            calibration_cycles=min(self.calibration_cycles, n),
        )

    @staticmethod
    def concatenate(records: "list[AcquisitionRecord]") -> "AcquisitionRecord":
        if not records:
            raise ValueError("nothing to concatenate")
        b = records[0].num_bins
        if any(r.num_bins != b for r in records):
            raise ValueError("records have mismatched num_bins")
        return AcquisitionRecord(
            num_bins=b,
            gates=np.concatenate([r.gates for r in records]),
            timestamps=np.concatenate([r.timestamps for r in records]),
            detected=np.concatenate([r.detected for r in records]),
            elapsed_periods=np.concatenate([r.elapsed_periods for r in records]),
            cycle_durations=np.concatenate([r.cycle_durations for r in records]),
            exposure_bins=int(sum(r.exposure_bins for r in records)),
            calibration_cycles=records[0].calibration_cycles,
        )


@dataclass
class DetectedHistogram:
    """Detection counts and armed-pass denominators per bin.

    ``counts[i]`` is the number of detections folded into bin ``i``;
    ``denominators[i]`` is the number of times bin ``i`` was armed with no
    detection yet (the detection bin itself included).  A cycle that scans
    several pulse periods contributes one pass per scan of the bin.
    """

    counts: np.ndarray
    denominators: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.denominators = np.asarray(self.denominators, dtype=np.int64)
        if self.counts.shape != self.denominators.shape:
            raise ValueError("counts and denominators must align")
        if np.any(self.counts > self.denominators):
            raise ValueError("counts cannot exceed denominators")
        if np.any(self.counts < 0):
            raise ValueError("counts cannot be negative")

    @property
    def num_bins(self) -> int:
        return int(self.counts.size)


def _validate_gate(gate: int, num_bins: int) -> None:
    if not 0 <= gate < num_bins:
        raise ValueError(f"gate {gate} outside [0, {num_bins})")


def no_detection_probability(scene: SceneTransient, gate: int = 0) -> float:
    """Probability of surviving one full period armed, exp(-sum r).

    Independent of the gate position (the product runs over every bin
    exactly once); the argument is validated and otherwise ignored.
    """
    _validate_gate(gate, scene.num_bins)
    return math.exp(-scene.total_rate)


def detection_likelihood(scene: SceneTransient, t: int, gate: int) -> float:
    """Probability the first detection lands at absolute bin ``t``.

    The pixel arms at ``gate`` and scans bins gate, gate+1, ... (indices
    mod num_bins) for as many periods as it takes; ``t`` at or beyond
    ``gate + num_bins`` means detection in a later period, each full
    period contributing one no-detection survival factor.  The window sum
    is accumulated in scan order so the result is exactly invariant under
    a cyclic rotation of scene, gate and t together.
    """
    b = scene.num_bins
    _validate_gate(gate, b)
    if t < gate:
        raise ValueError(f"t={t} before the arming bin {gate}")
    rates = scene.rates
    r_t = rates[t % b]
    if r_t <= 0.0:
        return 0.0
    periods, t_fold = divmod(t - gate, b)
    acc = 0.0
    for tau in range(gate, gate + t_fold):
        acc += rates[tau % b]
    acc += periods * scene.total_rate
    return -math.expm1(-r_t) * math.exp(-acc)


def detection_distribution(scene: SceneTransient, gate: int) -> np.ndarray:
    """Detection probabilities by scan offset: entry n is p(t = gate + n).

    Sums to 1 - no_detection_probability (telescoping).
    """
    _validate_gate(gate, scene.num_bins)
    r = np.roll(scene.rates, -gate)
    survived = np.concatenate(([0.0], np.cumsum(r[:-1])))
    return -np.expm1(-r) * np.exp(-survived)


def pileup_distribution(scene: SceneTransient) -> np.ndarray:
    """Detection-time distribution for a gate at bin 0 (classic pile-up).

    Early bins shadow later ones: entry t carries the factor
    exp(-sum_{i<t} r[i]), which skews mass toward the start of the period
    at high flux.
    """
    return detection_distribution(scene, 0)


def folded_detection_distribution(scene: SceneTransient, gate: int) -> np.ndarray:
    """Distribution of the folded timestamp (t mod num_bins) given detection.

    The pixel may scan across period boundaries; summing the geometric
    series over periods renormalizes the one-period distribution by
    1 - exp(-sum r), which is exact for periodic rates.
    """
    dist = detection_distribution(scene, gate)
    q = no_detection_probability(scene)
    if q >= 1.0:
        raise ValueError("scene has zero total rate; detection never happens")
    return np.roll(dist, gate) / (1.0 - q)


def sequence_log_likelihood(scene: SceneTransient, record: AcquisitionRecord) -> float:
    """Joint log likelihood of a record's cycles under ``scene``.

    Cycle outcomes are conditionally independent given the gate sequence.
    Detected cycles contribute the folded-timestamp likelihood
    (detection_likelihood at the unfolded time, renormalized by
    1 - exp(-sum r)); censored cycles contribute one period's no-detection
    mass, log exp(-sum r).  Impossible observations give -inf rather than
    raising.  An empty record gives 0.0.
    """
    b = scene.num_bins
    if record.num_bins != b:
        raise ValueError("record and scene have mismatched num_bins")
    n = len(record)
    if n == 0:
        return 0.0
    rates = scene.rates
    total = scene.total_rate
    n_censored = int(np.count_nonzero(~record.detected))
    ll = -total * n_censored
    det = record.detected
    if not det.any():
        return ll
    if total <= 0.0:
        return float("-inf")
    # log(1 - exp(-total)) per detected cycle, from the period folding.
    log_norm = math.log(-math.expm1(-total))
    gates = record.gates[det]
    stamps = record.timestamps[det]
    offsets = (stamps - gates) % b
    # Window sums over [gate, gate + offset) via a doubled prefix array.
    prefix = np.concatenate(([0.0], np.cumsum(np.concatenate([rates, rates]))))
    window = prefix[gates + offsets] - prefix[gates]
    r_t = rates[stamps]
    if np.any(r_t <= 0.0):
        return float("-inf")
    terms = np.log(-np.expm1(-r_t)) - window - log_norm
    return ll + float(terms.sum())


def timestamps_to_histogram(record: AcquisitionRecord, num_bins: int | None = None) -> DetectedHistogram:
    """Fold a record into per-bin detection counts and armed-pass counts.

    Each cycle adds one pass to every bin scanned from its gate up to and
    including the detection bin (all scanned bins for censored cycles).
    Multi-period cycles add one pass per scan, so counts[i]/denominators[i]
    estimates the per-pass trigger probability 1 - exp(-r[i]) without
    pile-up bias.
    """
    b = int(num_bins) if num_bins is not None else record.num_bins
    if b != record.num_bins:
        raise ValueError("record and histogram have mismatched num_bins")
    counts = np.zeros(b, dtype=np.int64)
    if len(record) == 0:
        return DetectedHistogram(counts=counts, denominators=counts.copy())
    det = record.detected
    if det.any():
        counts = np.bincount(record.timestamps[det], minlength=b).astype(np.int64)
    # Scanned-window lengths in bins, detection bin inclusive.
    offsets = (record.timestamps - record.gates) % b
    lengths = np.where(det, record.elapsed_periods * b + offsets + 1, record.elapsed_periods * b)
    full, rem = np.divmod(lengths, b)
    denom = np.full(b, int(full.sum()), dtype=np.int64)
    # Partial windows [gate, gate + rem) via a cyclic difference array.
    diff = np.zeros(b + 1, dtype=np.int64)
    g = record.gates
    end = g + rem
    wraps = end > b
    np.add.at(diff, g[rem > 0], 1)
    np.add.at(diff, np.minimum(end[rem > 0], b), -1)
    if wraps.any():
        diff[0] += int(np.count_nonzero(wraps))
        np.add.at(diff, end[wraps] - b, -1)
    denom += np.cumsum(diff[:-1])
    return DetectedHistogram(counts=counts, denominators=denom)
