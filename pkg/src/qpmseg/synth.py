"""Synthetic ssQPM data: elliptical phase phantoms rendered to four-step interferograms.

Cells are soft elliptical bumps in an optical-path map phi(x, y). A polarizer
at angle theta shifts the interferometric phase by 2*theta, so the analyzer
angles {0, 45, 90, 135} degrees record intensities

    I_k = a * (1 + V * cos(phi + delta_k)),   delta_k in {0, pi/2, pi, 3pi/2}

and the standard four-step reconstruction

    phi_hat = atan2(I_135 - I_45, I_0 - I_90)

recovers phi exactly in the noiseless case. This rendering model is generic
phase-shifting plumbing, not a claim about any particular instrument.
"""

from __future__ import annotations

import math

import numpy as np

from .data import DataError, make_sample
from .tensor import Tensor

PHASE_SHIFTS = (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi)  # for 0/45/90/135 deg

# target foreground fractions per confluence regime
CONFLUENCE_FRACTIONS = {"low": 0.07, "med": 0.20, "high": 0.38}

_BASE_INTENSITY = 1.0
_VISIBILITY = 0.8


def _draw_ellipses(rng, height, width, n_cells, r_mean):
    """Sum of soft elliptical bumps and their union support."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    profile = np.zeros((height, width), dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)
    for _ in range(n_cells):
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        a_ax = rng.uniform(0.6, 1.4) * r_mean
        b_ax = rng.uniform(0.6, 1.4) * r_mean
        theta = rng.uniform(0.0, math.pi)
        amp = rng.uniform(0.8, 2.2)
        ct, st = math.cos(theta), math.sin(theta)
        u = ((xx - cx) * ct + (yy - cy) * st) / a_ax
        v = (-(xx - cx) * st + (yy - cy) * ct) / b_ax
        rho2 = u * u + v * v
        profile += amp * np.clip(1.0 - rho2, 0.0, None) ** 1.5
        mask |= rho2 <= 1.0
    return profile, mask


def _cell_budget(height, width, confluence):
    if height <= 0 or width <= 0:
        raise DataError(f"non-positive image size {height}x{width}")
    if confluence not in CONFLUENCE_FRACTIONS:
        raise DataError(f"confluence must be one of {sorted(CONFLUENCE_FRACTIONS)}")
    r_mean = max(min(height, width) / 12.0, 2.5)
    if min(height, width) < 2 * r_mean + 2:
        raise DataError(f"image {height}x{width} too small for the cell size model")
    target = CONFLUENCE_FRACTIONS[confluence]
    n_cells = max(1, int(round(target * height * width / (math.pi * r_mean * r_mean))))
    return n_cells, r_mean


def render_phantom(rng, height, width, confluence="med"):
    """Draw soft elliptical cells; returns (phi f64 radians, mask u8).

    Cell peaks stay below pi so the reconstructed (wrapped) phase map is
    unambiguous on the phantom.
    """
    n_cells, r_mean = _cell_budget(height, width, confluence)
    phi, mask = _draw_ellipses(rng, height, width, n_cells, r_mean)
    # keep the optical path below pi to stay clear of phase wrapping
    peak = phi.max()
    if peak >= math.pi - 0.2:
        phi *= (math.pi - 0.2) / peak
    return phi, mask.astype(np.uint8)


def _smooth_field(rng, height, width, grid=5):
    """Bilinear upsample of a coarse uniform grid: a smooth random surface in [-1, 1]."""
    coarse = rng.uniform(-1.0, 1.0, size=(grid, grid))
    ys = np.linspace(0.0, grid - 1.0, height)
    xs = np.linspace(0.0, grid - 1.0, width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, grid - 1)
    x1 = np.minimum(x0 + 1, grid - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    return (coarse[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
            + coarse[np.ix_(y1, x0)] * wy * (1 - wx)
            + coarse[np.ix_(y0, x1)] * (1 - wy) * wx
            + coarse[np.ix_(y1, x1)] * wy * wx)


def render_interferograms(phi, rng=None, intensity_noise=0.0, illum_texture=0.0,
                          amplitude_field=None, visibility=_VISIBILITY, gain=_BASE_INTENSITY):
    """Four analyzer-angle intensity images (4, H, W) f64 for a phase map.

    illum_texture > 0 multiplies all four frames by a smooth random
    illumination field 1 + texture * field(x, y); amplitude_field, when
    given, multiplies on top of that; gain scales everything and visibility
    sets the fringe contrast. The four-step estimate is a ratio of frame
    differences, so every common-amplitude factor cancels exactly: these
    structures confound the interferograms but never the phase map.
    """
    if not 0.0 < visibility <= 1.0:
        raise DataError(f"visibility must be in (0, 1], got {visibility}")
    frames = [gain * (1.0 + visibility * np.cos(phi + delta)) for delta in PHASE_SHIFTS]
    angles = np.stack(frames, axis=0)
    if illum_texture > 0.0:
        if rng is None:
            raise DataError("illumination texture requires an rng")
        field = 1.0 + illum_texture * _smooth_field(rng, phi.shape[0], phi.shape[1])
        angles = angles * np.clip(field, 0.2, None)
    if amplitude_field is not None:
        angles = angles * np.clip(np.asarray(amplitude_field, dtype=np.float64), 0.2, None)
    if intensity_noise > 0.0:
        if rng is None:
            raise DataError("intensity noise requires an rng")
        angles = angles + rng.normal(0.0, intensity_noise * gain, size=angles.shape)
    return angles


def reconstruct_phase(angles):
    """Four-step phase estimate atan2(I_135 - I_45, I_0 - I_90), wrapped to (-pi, pi]."""
    a = angles.data if isinstance(angles, Tensor) else np.asarray(angles)
    if a.shape[0] != 4:
        raise DataError(f"need 4 interferograms, got shape {a.shape}")
    return np.arctan2(a[3] - a[1], a[0] - a[2])


def wrapped_difference(a, b):
    """Phase difference wrapped to (-pi, pi]."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.arctan2(np.sin(d), np.cos(d))


def synth_generate(seed, n, height, width, confluence="med", phase_snr=math.inf,
                   intensity_noise=0.01, illum_texture=0.0, decoy_strength=0.0,
                   visibility_range=(_VISIBILITY, _VISIBILITY), gain_range=(1.0, 1.0),
                   phase_snr_range=None):
    """Deterministically generate n samples for (seed, n, size, confluence, phase_snr).

    The phase channel is the four-step reconstruction from the (noisy)
    interferograms plus Gaussian noise of std(phi)/phase_snr, so low
    phase_snr buries the thickness cue while the angle images stay clean.
    phase_snr_range, when given, draws the SNR per sample (log-uniform)
    instead, modeling acquisitions whose phase quality varies shot to shot.

    The remaining knobs degrade only the intensity modality, never the
    reconstruction (all are common-amplitude effects the four-step ratio
    cancels): illum_texture adds smooth multiplicative structure,
    decoy_strength plants cell-shaped amplitude bumps with no optical path
    (absent from the mask), and visibility_range / gain_range jitter fringe
    contrast and illumination strength per sample. Together they make the
    modalities complementary rather than redundant.
    """
    if n <= 0:
        raise DataError(f"sample count must be positive, got {n}")
    if height <= 0 or width <= 0:
        raise DataError(f"non-positive image size {height}x{width}")
    streams = np.random.SeedSequence(seed).spawn(n)
    samples = []
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        phi, mask = render_phantom(rng, height, width, confluence)
        amplitude = None
        if decoy_strength > 0.0:
            n_cells, r_mean = _cell_budget(height, width, confluence)
            decoy_profile, _ = _draw_ellipses(rng, height, width, max(1, n_cells // 2), r_mean)
            peak = decoy_profile.max()
            if peak > 0:
                amplitude = 1.0 + decoy_strength * decoy_profile / peak
        visibility = float(rng.uniform(*visibility_range))
        gain = float(rng.uniform(*gain_range))
        angles = render_interferograms(phi, rng, intensity_noise=intensity_noise,
                                       illum_texture=illum_texture, amplitude_field=amplitude,
                                       visibility=visibility, gain=gain)
        phase = reconstruct_phase(angles)
        snr = phase_snr
        if phase_snr_range is not None:
            lo, hi = phase_snr_range
            if not 0 < lo <= hi:
                raise DataError(f"bad phase_snr_range {phase_snr_range}")
            snr = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        if math.isfinite(snr):
            if snr <= 0:
                raise DataError(f"phase_snr must be positive, got {snr}")
            sigma = float(phi.std()) / snr
            if sigma > 0:
                phase = phase + rng.normal(0.0, sigma, size=phase.shape)
        samples.append(make_sample(angles, phase, mask, id=f"s{seed}_{i:04d}"))
    return samples
