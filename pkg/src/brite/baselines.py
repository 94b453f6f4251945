"""Fourier-domain reference trackers: harmonic phase (HARP) and sine-wave modeling (SinMod).

Frequencies are in cycles/px throughout.  Both trackers return forward
Lagrangian displacements referenced to frame 0, like the tracker module.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve

from .fields import VectorField2D, compose, pixel_grid, sample_array
from .phantom import TaggedSequence
from .tagseq import save_displacements


@dataclass(frozen=True)
class BandpassSpec:
    """One-sided disk band-pass centered on a harmonic peak."""

    center: tuple[float, float]  # (fx, fy) cycles/px
    radius: float
    edge_bins: float = 2.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("band-pass radius must be positive")
        if self.edge_bins < 0:
            raise ValueError("edge width must be non-negative")

    @classmethod
    def for_sequence(cls, seq: TaggedSequence, orientation: str, edge_bins: float = 2.0) -> BandpassSpec:
        """Disk at the nominal tag frequency with radius half of it."""
        if orientation == "h":
            f = seq.spacing_mm[1] / seq.tag_period_mm
            return cls((0.0, f), f / 2, edge_bins)
        if orientation == "v":
            f = seq.spacing_mm[0] / seq.tag_period_mm
            return cls((f, 0.0), f / 2, edge_bins)
        raise ValueError(f"orientation must be 'h' or 'v', got {orientation!r}")

    def window(self, shape) -> np.ndarray:
        """Filter weights on the unshifted FFT grid."""
        h, w = shape
        fy = np.fft.fftfreq(h)[:, None]
        fx = np.fft.fftfreq(w)[None, :]
        r = np.hypot(fx - self.center[0], fy - self.center[1])
        if self.edge_bins == 0:
            return (r <= self.radius).astype(float)
        # edge width measured in frequency bins of the coarser axis
        width = self.edge_bins / min(h, w)
        inner = self.radius - width / 2
        t = np.clip((r - inner) / width, 0.0, 1.0)
        return 0.5 * (1.0 + np.cos(np.pi * t))


@dataclass
class PhaseImage:
    phase: np.ndarray  # wrapped, (-pi, pi]
    magnitude: np.ndarray
    complex_image: np.ndarray


def wrap(phase):
    """Map angles into (-pi, pi]."""
    out = np.mod(np.asarray(phase) + np.pi, 2 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)


def harp_phase(image: np.ndarray, spec: BandpassSpec) -> PhaseImage:
    image = np.asarray(image, dtype=float)
    c = np.fft.ifft2(np.fft.fft2(image) * spec.window(image.shape))
    return PhaseImage(wrap(np.angle(c)), np.abs(c), c)


def wrapped_gradient(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Phase gradient (d/dx, d/dy) of a complex image, insensitive to wrapping."""
    def along(axis):
        n = c.shape[axis]
        fwd = np.take(c, np.r_[1:n, n - 1], axis=axis)
        bwd = np.take(c, np.r_[0, 0:n - 1], axis=axis)
        g = np.angle(fwd * np.conj(bwd))
        span = np.full(n, 2.0)
        span[0] = span[-1] = 1.0
        shape = [1, 1]
        shape[axis] = n
        return g / span.reshape(shape)
    return along(1), along(0)


@dataclass
class BaselineResult:
    method: str
    displacements: list  # VectorField2D per frame, frame 0 is zero
    flags: list  # bool (H, W) per frame
    times_s: np.ndarray
    info: dict = field(default_factory=dict)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_displacements(self.displacements, directory / "displacements.tgsq")
        meta = {"method": self.method, "times_s": [float(t) for t in self.times_s],
                "flagged_fraction": [float(f.mean()) for f in self.flags], "info": self.info}
        (directory / f"{self.method}.json").write_text(json.dumps(meta, indent=2))


def fill_flagged(values: np.ndarray, flags: np.ndarray, max_rounds: int = 50) -> np.ndarray:
    """Replace flagged pixels by the median of their unflagged 3x3 neighbours, growing inward."""
    out = values.copy()
    bad = flags.copy()
    h, w = values.shape
    for _ in range(max_rounds):
        if not bad.any():
            break
        ys, xs = np.nonzero(bad)
        newly = []
        for y, x in zip(ys, xs):
            y0, y1, x0, x1 = max(y - 1, 0), min(y + 2, h), max(x - 1, 0), min(x + 2, w)
            good = ~bad[y0:y1, x0:x1]
            if good.any():
                newly.append((y, x, np.median(out[y0:y1, x0:x1][good])))
        if not newly:
            break
        for y, x, v in newly:
            out[y, x] = v
            bad[y, x] = False
    return out


@dataclass
class HarpOptions:
    max_iter: int = 30
    max_step_px: float = 1.0
    tol_rad: float = 1e-4
    diverged_rad: float = 0.5
    edge_bins: float = 2.0


def harp_track(seq: TaggedSequence, spec_h: BandpassSpec | None = None, spec_v: BandpassSpec | None = None,
               opts: HarpOptions | None = None) -> BaselineResult:
    """Track every frame-0 pixel by matching its (phi_h, phi_v) pair in later frames.

    Damped Newton on wrapped phase differences; each frame starts from the
    previous frame's positions.  Pixels that leave the image, hit a singular
    phase Jacobian or do not converge are flagged and median-filled.
    """
    opts = opts or HarpOptions()
    spec_h = spec_h or BandpassSpec.for_sequence(seq, "h", opts.edge_bins)
    spec_v = spec_v or BandpassSpec.for_sequence(seq, "v", opts.edge_bins)
    shape = seq.frames_h.shape[1:]
    h, w = shape
    x0, y0 = pixel_grid(shape)
    ref_h = harp_phase(seq.frames_h[0], spec_h).phase
    ref_v = harp_phase(seq.frames_v[0], spec_v).phase

    disps = [VectorField2D.zeros(shape, seq.spacing_mm)]
    flags = [np.zeros(shape, bool)]
    px, py = x0.astype(float).copy(), y0.astype(float).copy()
    for t in range(1, len(seq.times_s)):
        ch = harp_phase(seq.frames_h[t], spec_h).complex_image
        cv = harp_phase(seq.frames_v[t], spec_v).complex_image
        gxh, gyh = wrapped_gradient(ch)
        gxv, gyv = wrapped_gradient(cv)
        stack = np.stack([ch, cv, gxh, gyh, gxv, gyv], axis=-1)
        flag = np.zeros(shape, bool)
        for _ in range(opts.max_iter):
            s = sample_array(stack, px, py)
            rh = wrap(np.angle(s[..., 0]) - ref_h)
            rv = wrap(np.angle(s[..., 1]) - ref_v)
            a, b, c, d = s[..., 2].real, s[..., 3].real, s[..., 4].real, s[..., 5].real
            det = a * d - b * c
            singular = np.abs(det) < 1e-8
            det = np.where(singular, 1.0, det)
            sx = -(d * rh - b * rv) / det
            sy = -(-c * rh + a * rv) / det
            norm = np.hypot(sx, sy)
            scale = np.minimum(1.0, opts.max_step_px / np.maximum(norm, 1e-300))
            active = ~singular & (np.maximum(np.abs(rh), np.abs(rv)) > opts.tol_rad)
            px = np.where(active, px + scale * sx, px)
            py = np.where(active, py + scale * sy, py)
            flag |= singular
            if not active.any():
                break
        s = sample_array(stack, px, py)
        resid = np.maximum(np.abs(wrap(np.angle(s[..., 0]) - ref_h)), np.abs(wrap(np.angle(s[..., 1]) - ref_v)))
        outside = (px < 0) | (px > w - 1) | (py < 0) | (py > h - 1)
        flag |= outside | (resid > opts.diverged_rad) | ~np.isfinite(px) | ~np.isfinite(py)
        dx = fill_flagged(np.where(flag, 0.0, px - x0), flag)
        dy = fill_flagged(np.where(flag, 0.0, py - y0), flag)
        disps.append(VectorField2D(dx, dy, seq.spacing_mm))
        flags.append(flag)
        # flagged points restart from the filled estimate next frame
        px, py = x0 + dx, y0 + dy
    return BaselineResult("harp", disps, flags, np.asarray(seq.times_s),
                          {"spec_h": asdict(spec_h), "spec_v": asdict(spec_v), "options": asdict(opts)})


@dataclass
class SinModOptions:
    skew: float = 0.5
    kernel_size: int = 15
    quality_exponent: float = 8.0
    freq_floor: float = 1e-4
    band_radius_factor: float = 0.5
    edge_bins: float = 2.0


def cos2_kernel(size: int) -> np.ndarray:
    """Separable squared-cosine smoothing window, normalized to unit sum."""
    if size < 1:
        raise ValueError("kernel size must be >= 1")
    t = (np.arange(size) - (size - 1) / 2) / (size + 1) * np.pi
    k1 = np.cos(t) ** 2
    k = np.outer(k1, k1)
    return k / k.sum()


class SinModFilters:
    """Low- and high-emphasis band-passes around the tag harmonic of one orientation.

    ``L = W (k / kc)^-s`` and ``H = W (k / kc)^s`` with ``k`` the frequency
    component along the tag direction, so for a pure sinusoid of frequency
    ``f`` the power ratio ``|H|^2 / |L|^2`` equals ``(f / kc)^(4 s)``.
    """

    def __init__(self, shape, axis: int, kc: float, opts: SinModOptions):
        if not kc > 0:
            raise ValueError("center frequency must be positive")
        self.axis = axis  # 0: tags vary along x, 1: along y
        self.kc = kc
        self.skew = opts.skew
        center = (kc, 0.0) if axis == 0 else (0.0, kc)
        win = BandpassSpec(center, opts.band_radius_factor * kc, opts.edge_bins).window(shape)
        h, w = shape
        k = np.broadcast_to(np.fft.fftfreq(w)[None, :] if axis == 0 else np.fft.fftfreq(h)[:, None], shape)
        pos = k > 0
        ratio = np.where(pos, k, kc) / kc
        self.low = np.where(pos, win * ratio ** -opts.skew, 0.0)
        self.high = np.where(pos, win * ratio ** opts.skew, 0.0)

    def apply(self, image):
        f = np.fft.fft2(image)
        return np.fft.ifft2(f * self.low), np.fft.ifft2(f * self.high)


def _smooth(arr, kernel):
    if np.iscomplexobj(arr):
        return convolve(arr.real, kernel, mode="nearest") + 1j * convolve(arr.imag, kernel, mode="nearest")
    return convolve(arr, kernel, mode="nearest")


def sinmod_local_frequency(image: np.ndarray, filters: SinModFilters, kernel: np.ndarray) -> np.ndarray:
    l, h = filters.apply(image)
    return _local_frequency(_smooth(np.abs(l) ** 2, kernel), _smooth(np.abs(h) ** 2, kernel), filters)


def _local_frequency(pl, ph, filters):
    with np.errstate(divide="ignore", invalid="ignore"):
        return filters.kc * (ph / pl) ** (1.0 / (4.0 * filters.skew))


def sinmod_pair(img1, img2, filters: SinModFilters, opts: SinModOptions):
    """Displacement component (px) along the tag direction from img1 to img2, plus quality and flags."""
    kernel = cos2_kernel(opts.kernel_size)
    l1, h1 = filters.apply(img1)
    l2, h2 = filters.apply(img2)
    pl = _smooth(np.abs(l1) ** 2 + np.abs(l2) ** 2, kernel)
    ph = _smooth(np.abs(h1) ** 2 + np.abs(h2) ** 2, kernel)
    freq = _local_frequency(pl, ph, filters)
    cross = _smooth(l1 * np.conj(l2) + h1 * np.conj(h2), kernel)
    dtheta = np.angle(cross)
    flag = ~np.isfinite(freq) | (freq < opts.freq_floor)
    safe = np.where(flag, 1.0, freq)
    u = np.where(flag, 0.0, dtheta / (2 * np.pi * safe))
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.abs(cross) / (0.5 * (pl + ph))
    q = np.nan_to_num(np.clip(q, 0.0, 1.0)) ** opts.quality_exponent
    return u, q, flag


def sinmod_track(seq: TaggedSequence, opts: SinModOptions | None = None) -> BaselineResult:
    """Adjacent-frame SinMod fields composed into frame-0 Lagrangian displacements."""
    opts = opts or SinModOptions()
    shape = seq.frames_h.shape[1:]
    fv = SinModFilters(shape, 0, seq.spacing_mm[0] / seq.tag_period_mm, opts)
    fh = SinModFilters(shape, 1, seq.spacing_mm[1] / seq.tag_period_mm, opts)
    disps = [VectorField2D.zeros(shape, seq.spacing_mm)]
    flags = [np.zeros(shape, bool)]
    quality = [1.0]
    total = disps[0]
    for t in range(1, len(seq.times_s)):
        ux, qx, flx = sinmod_pair(seq.frames_v[t - 1], seq.frames_v[t], fv, opts)
        uy, qy, fly = sinmod_pair(seq.frames_h[t - 1], seq.frames_h[t], fh, opts)
        step = VectorField2D(ux, uy, seq.spacing_mm)
        total = compose(step, total)
        disps.append(total)
        flags.append(flx | fly | flags[-1])
        quality.append(float(np.mean(np.minimum(qx, qy))))
    return BaselineResult("sinmod", disps, flags, np.asarray(seq.times_s),
                          {"options": asdict(opts), "mean_quality": quality})


def options_from_dict(method: str, d: dict | None):
    cls = {"harp": HarpOptions, "sinmod": SinModOptions}[method]
    return cls(**(d or {}))


def run_baseline(method: str, seq: TaggedSequence, options: dict | None = None) -> BaselineResult:
    if method == "harp":
        return harp_track(seq, opts=options_from_dict("harp", options))
    if method == "sinmod":
        return sinmod_track(seq, options_from_dict("sinmod", options))
    raise ValueError(f"unknown baseline method {method!r}")
