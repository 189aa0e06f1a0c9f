"""Depth and flux estimators for SPAD timestamp records.

Two estimation routes are provided.  The histogram route inverts pile-up
with Coates' correction and takes the argmax bin.  The Bayesian route
keeps a discrete posterior over depth bins, jointly with a grid of
candidate signal-flux values, updated per cycle from the exact folded
detection likelihood; depth decisions marginalize the flux axis.  A
log-domain parabola fit around the chosen bin recovers sub-bin depth
(temporal dithering).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import AcquisitionRecord, DetectedHistogram, timestamps_to_histogram

_LN2 = math.log(2.0)


def log1mexp(x: np.ndarray | float) -> np.ndarray | float:
    """log(1 - exp(-x)) for x >= 0, stable at both ends; -inf at x <= 0."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.full(arr.shape, -np.inf)
    small = (arr > 0) & (arr <= _LN2)
    large = arr > _LN2
    out[small] = np.log(-np.expm1(-arr[small]))
    out[large] = np.log1p(-np.exp(-arr[large]))
    if np.ndim(x) == 0:
        return float(out[0])
    return out


def logsumexp(a: np.ndarray, axis: int | None = None) -> np.ndarray | float:
    """Max-shifted log(sum(exp(a))); tolerates all -inf slices."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.item())
    return np.squeeze(out, axis=axis)


@dataclass
class TransientEstimate:
    """Per-bin photon rate estimate with saturation flags."""

    rates: np.ndarray
    saturated: np.ndarray

    @property
    def degenerate(self) -> bool:
        """True when no bin carries a positive estimate."""
        return not bool(np.any(self.rates > 0))


def coates_transient(hist: DetectedHistogram) -> TransientEstimate:
    """Coates' pile-up-corrected rate estimate ln(D_i / (D_i - N_i)).

    Bins never armed (D_i = 0) report 0.  Saturated bins (every armed pass
    detected, N_i = D_i > 0) are clamped by treating half a pass as
    undetected and flagged, keeping the estimate finite.
    """
    d = hist.denominators.astype(float)
    n = hist.counts.astype(float)
    saturated = (hist.counts == hist.denominators) & (hist.denominators > 0)
    n_eff = np.where(saturated, d - 0.5, n)
    rates = np.zeros(hist.num_bins)
    armed = d > 0
    rates[armed] = np.log(d[armed] / (d[armed] - n_eff[armed]))
    return TransientEstimate(rates=rates, saturated=saturated)


def coates_depth(est: TransientEstimate) -> int:
    """Argmax bin of the rate estimate; ties break to the lowest index.

    A degenerate all-zero estimate returns bin 0 (check ``est.degenerate``).
    """
    return int(np.argmax(est.rates))


def default_flux_grid(bkg_flux: float, size: int = 16, lo: float = 0.1, hi: float = 100.0) -> np.ndarray:
    """Candidate signal-flux grid: 0 plus log-spaced values around the background.

    Spans [lo * bkg_flux, hi * bkg_flux]; the explicit 0 keeps a
    signal-free hypothesis in play.
    """
    if bkg_flux <= 0:
        raise ValueError("bkg_flux must be positive to scale the grid")
    if size < 1:
        raise ValueError("grid size must be at least 1")
    grid = np.geomspace(lo * bkg_flux, hi * bkg_flux, size)
    return np.concatenate(([0.0], grid))


@dataclass
class DepthPosterior:
    """Discrete posterior over depth bins, optionally joint with signal flux.

    ``log_mass`` is kept normalized (logsumexp 0) with shape (B,) for a
    known signal flux or (B, K) jointly with ``flux_grid`` of K candidate
    values.  ``degraded_cycles`` counts updates whose observation had zero
    probability under every hypothesis; those updates are skipped rather
    than aborting.
    """

    log_mass: np.ndarray
    flux_grid: np.ndarray | None = None
    degraded_cycles: int = 0

    @property
    def num_bins(self) -> int:
        return int(self.log_mass.shape[0])

    @property
    def joint(self) -> bool:
        return self.log_mass.ndim == 2

    def depth_log_marginal(self) -> np.ndarray:
        if self.joint:
            return logsumexp(self.log_mass, axis=1)
        return self.log_mass

    def flux_log_marginal(self) -> np.ndarray:
        if not self.joint:
            raise ValueError("posterior has no flux axis")
        return logsumexp(self.log_mass, axis=0)

    def copy(self) -> "DepthPosterior":
        return DepthPosterior(
            log_mass=self.log_mass.copy(),
            flux_grid=None if self.flux_grid is None else self.flux_grid.copy(),
            degraded_cycles=self.degraded_cycles,
        )


def posterior_init(
    num_bins: int,
    prior: np.ndarray | None = None,
    flux_grid: np.ndarray | None = None,
) -> DepthPosterior:
    """Posterior from a depth prior (uniform when None), flux axis uniform.

    With a ``flux_grid`` the joint over (depth, flux) starts as
    prior(depth) / K and updates marginalize nothing away; without one the
    posterior is depth-only and updates need an explicit signal flux.
    """
    if num_bins < 1:
        raise ValueError("num_bins must be at least 1")
    if prior is None:
        log_prior = np.full(num_bins, -math.log(num_bins))
    else:
        prior = np.asarray(prior, dtype=float)
        if prior.shape != (num_bins,):
            raise ValueError("prior must have one entry per depth bin")
        if np.any(prior < 0) or prior.sum() <= 0:
            raise ValueError("prior must be nonnegative with positive mass")
        with np.errstate(divide="ignore"):
            log_prior = np.log(prior) - math.log(prior.sum())
    if flux_grid is None:
        return DepthPosterior(log_mass=log_prior)
    flux_grid = np.asarray(flux_grid, dtype=float)
    if flux_grid.ndim != 1 or flux_grid.size < 1 or np.any(flux_grid < 0):
        raise ValueError("flux_grid must be a 1-d nonnegative array")
    k = flux_grid.size
    log_mass = log_prior[:, None] - math.log(k) + np.zeros((1, k))
    return DepthPosterior(log_mass=log_mass, flux_grid=flux_grid)


def _cycle_log_likelihood(
    num_bins: int,
    flux: np.ndarray,
    timestamp: int | None,
    gate: int,
    bkg_flux: float,
) -> np.ndarray:
    """Log likelihood matrix (depth x flux) of one cycle outcome.

    Folded-timestamp model for a single-peak transient: the detection bin
    contributes log(1 - exp(-(bkg + flux))) when the hypothesis depth is
    the detection bin and log(1 - exp(-bkg)) otherwise; depths scanned
    before the detection are attenuated by exp(-flux) (passed-over
    penalty); the period-folding normalizer log(1 - exp(-(B*bkg + flux)))
    depends on flux only.  Depth-constant terms are dropped, flux-varying
    ones are not.
    """
    b = num_bins
    total = b * bkg_flux + flux
    if timestamp is None:
        # Censored: one period with no detection, exp(-sum r).
        return np.broadcast_to(-total, (b, flux.size)).copy()
    out = np.broadcast_to(log1mexp(np.full(flux.size, bkg_flux)), (b, flux.size)).copy()
    out[timestamp, :] = log1mexp(bkg_flux + flux)
    n = (timestamp - gate) % b
    scanned = ((np.arange(b) - gate) % b) < n
    out[scanned, :] -= flux[None, :]
    with np.errstate(invalid="ignore"):  # -inf - -inf when a hypothesis has zero total rate
        out -= log1mexp(total)[None, :]
    zero = total <= 0.0
    if np.any(zero):
        # A detection is impossible under a hypothesis with no rate at all.
        out[:, zero] = -np.inf
    return out


def posterior_update(
    post: DepthPosterior,
    timestamp: int | None,
    gate: int,
    bkg_flux: float,
    signal_flux: float | None = None,
) -> DepthPosterior:
    """Bayes update for one cycle outcome, in place; returns ``post``.

    ``timestamp`` is the folded detection bin, or None for a censored
    cycle.  Joint posteriors update every (depth, flux) cell from their
    own hypothesis; depth-only posteriors require ``signal_flux``.  If the
    observation has zero probability under every cell, the posterior is
    left unchanged and ``degraded_cycles`` is bumped.
    """
    b = post.num_bins
    if not 0 <= gate < b:
        raise ValueError(f"gate {gate} outside [0, {b})")
    if timestamp is not None and not 0 <= timestamp < b:
        raise ValueError(f"timestamp {timestamp} outside [0, {b})")
    if bkg_flux < 0:
        raise ValueError("bkg_flux cannot be negative")
    if post.joint:
        flux = post.flux_grid
        if signal_flux is not None:
            raise ValueError("joint posterior already carries a flux grid")
    else:
        if signal_flux is None or signal_flux < 0:
            raise ValueError("depth-only posterior needs a nonnegative signal_flux")
        flux = np.array([float(signal_flux)])
    like = _cycle_log_likelihood(b, flux, timestamp, gate, bkg_flux)
    if not post.joint:
        like = like[:, 0]
    updated = post.log_mass + like
    z = logsumexp(updated)
    if not math.isfinite(z):
        post.degraded_cycles += 1
        return post
    post.log_mass = updated - z
    return post


def posterior_from_record(
    record: AcquisitionRecord,
    bkg_flux: float,
    prior: np.ndarray | None = None,
    flux_grid: np.ndarray | None = None,
    signal_flux: float | None = None,
) -> DepthPosterior:
    """Batch posterior over a whole record, cycle by cycle in order."""
    post = posterior_init(record.num_bins, prior=prior, flux_grid=flux_grid)
    for i in range(len(record)):
        t = int(record.timestamps[i]) if record.detected[i] else None
        posterior_update(post, t, int(record.gates[i]), bkg_flux, signal_flux=signal_flux)
    return post


def map_depth(post: DepthPosterior) -> int:
    """Depth bin maximizing the flux-marginalized posterior; ties to lowest index."""
    return int(np.argmax(post.depth_log_marginal()))


def posterior_entropy(post: DepthPosterior) -> float:
    """Shannon entropy (nats) of the flux-marginalized depth posterior."""
    lm = post.depth_log_marginal()
    p = np.exp(lm)
    with np.errstate(invalid="ignore"):
        terms = np.where(p > 0, p * lm, 0.0)
    return float(max(-terms.sum(), 0.0))


class BackgroundEstimate(NamedTuple):
    value: float
    low_confidence: bool
    detections: int


def estimate_background(
    record: AcquisitionRecord,
    fallback_flux: float = 0.01,
    trim_fraction: float = 0.05,
    min_detections: int = 10,
) -> BackgroundEstimate:
    """Ambient flux from a record's calibration cycles.

    Coates-estimates the transient over the first ``calibration_cycles``
    cycles (the whole record when none are marked), drops the top
    ``trim_fraction`` of armed bins to exclude signal peaks, and averages
    the rest.  Records with fewer than ``min_detections`` detections fall
    back to ``fallback_flux`` with the low-confidence flag set; sparse
    calibration (armed passes per bin in the low single digits) biases the
    trimmed mean low because the trim removes most detection-bearing bins.
    """
    cal = record.head(record.calibration_cycles) if record.calibration_cycles > 0 else record
    detections = int(np.count_nonzero(cal.detected))
    if detections < min_detections:
        return BackgroundEstimate(fallback_flux, True, detections)
    hist = timestamps_to_histogram(cal)
    est = coates_transient(hist)
    observed = est.rates[hist.denominators > 0]
    if observed.size == 0:
        return BackgroundEstimate(fallback_flux, True, detections)
    drop = math.ceil(trim_fraction * observed.size)
    kept = np.sort(observed)[: observed.size - drop] if drop else np.sort(observed)
    if kept.size == 0 or kept.mean() <= 0:
        return BackgroundEstimate(fallback_flux, True, detections)
    return BackgroundEstimate(float(kept.mean()), False, detections)


def dither_depth(est: TransientEstimate, depth: int, window: int = 3) -> float:
    """Sub-bin depth from a log-domain parabola around ``depth``.

    Fits log rate over the ``window`` bins centered on the estimate
    (clipped at the period edges) and returns the parabola vertex, clamped
    to the window.  Degenerate fits (fewer than 3 positive-rate points,
    flat window, or upward curvature) return ``depth`` unchanged.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be an odd count >= 3")
    b = est.rates.size
    if not 0 <= depth < b:
        raise ValueError(f"depth {depth} outside [0, {b})")
    half = window // 2
    lo = max(depth - half, 0)
    hi = min(depth + half, b - 1)
    bins = np.arange(lo, hi + 1)
    vals = est.rates[bins]
    keep = vals > 0
    if keep.sum() < 3:
        return float(depth)
    x = (bins[keep] - depth).astype(float)
    y = np.log(vals[keep])
    if np.ptp(y) == 0.0:
        return float(depth)
    if x.size == 3:
        # Closed-form vertex of the parabola through three points.
        denom = y[0] - 2.0 * y[1] + y[2]
        if denom >= 0.0 or x[1] - x[0] != 1.0 or x[2] - x[1] != 1.0:
            return float(depth)
        offset = x[1] + (y[0] - y[2]) / (2.0 * denom)
    else:
        a, bcoef, _ = np.polyfit(x, y, 2)
        if a >= 0.0:
            return float(depth)
        offset = -bcoef / (2.0 * a)
    offset = min(max(offset, x[0]), x[-1])
    return float(depth + offset)
