"""Synthetic tagged sequences with known anatomy, tag fading and Lagrangian motion."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .fields import Diffeo, ScalarField2D, VectorField2D, pixel_grid, sample_array

ORIENTATIONS = ("h", "v")


@dataclass(frozen=True)
class TagParams:
    """Shared amplitude/offset/frequency and per-orientation phase of 1-1 SPAMM tags.

    ``mu`` is in cycles/mm; phases in radians.
    """

    A: float
    B: float
    mu: float
    phi_h: float = 0.0
    phi_v: float = 0.0

    def __post_init__(self):
        if self.A < 0:
            raise ValueError("tag amplitude A must be >= 0")
        if not self.mu > 0:
            raise ValueError("tag frequency mu must be > 0")

    @property
    def tag_period_mm(self) -> float:
        return 1.0 / self.mu

    def phase(self, orientation: str) -> float:
        return self.phi_h if orientation == "h" else self.phi_v

    def to_dict(self) -> dict:
        return {"A": self.A, "B": self.B, "mu": self.mu, "phi_h": self.phi_h, "phi_v": self.phi_v}

    @classmethod
    def from_dict(cls, d: dict) -> TagParams:
        return cls(float(d["A"]), float(d["B"]), float(d["mu"]), float(d["phi_h"]), float(d["phi_v"]))


@dataclass(frozen=True)
class FadingParams:
    tau_A: float
    B_inf: float
    tau_B: float
    name: str = "custom"

    def __post_init__(self):
        if self.tau_A <= 0 or self.tau_B <= 0:
            raise ValueError("fading time constants must be positive")


# Simulator conventions standing in for 5 and 10 degree imaging flip angles.
FADING_PRESETS = {
    "FA5": FadingParams(tau_A=0.9, B_inf=0.75, tau_B=0.9, name="FA5"),
    "FA10": FadingParams(tau_A=0.45, B_inf=0.85, tau_B=0.45, name="FA10"),
}


def fading_preset(name: str | None) -> FadingParams | None:
    if name is None or name == "none":
        return None
    try:
        return FADING_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown fading preset {name!r}; choose from {sorted(FADING_PRESETS)}") from None


def fade(params: TagParams, fading: FadingParams | None, t: float) -> tuple[float, float]:
    """Amplitude and offset of the tags ``t`` seconds after tagging."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if fading is None:
        return params.A, params.B
    a_t = params.A * np.exp(-t / fading.tau_A)
    b_t = fading.B_inf - (fading.B_inf - params.B) * np.exp(-t / fading.tau_B)
    return float(a_t), float(b_t)


# -- anatomy -----------------------------------------------------------------

def gen_oval_anatomy(seed: int, H: int, W: int, n_ovals_range=(2, 5), intensity_range=(0.3, 0.9),
                     spacing_mm=(2.0, 2.0), blur_sigma: float = 0.8) -> ScalarField2D:
    """Random overlapping filled ellipses on a zero background.

    The first ellipse is a large body; later ones are smaller inclusions
    painted on top.  Edges are softened with a Gaussian blur.
    """
    if H < 32 or W < 32:
        raise ValueError("anatomy grid must be at least 32x32")
    lo, hi = intensity_range
    if not (0 < lo <= hi <= 1):
        raise ValueError("intensity_range must lie within (0, 1]")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_ovals_range[0], n_ovals_range[1] + 1))
    img = np.zeros((H, W))
    if n == 0:
        return ScalarField2D(img, spacing_mm)
    x, y = pixel_grid((H, W))
    size = min(H, W)
    for k in range(n):
        if k == 0:
            cx = W / 2 + rng.uniform(-0.05, 0.05) * W
            cy = H / 2 + rng.uniform(-0.05, 0.05) * H
            ra, rb = rng.uniform(0.25, 0.38, size=2) * size
        else:
            cx = W / 2 + rng.uniform(-0.2, 0.2) * W
            cy = H / 2 + rng.uniform(-0.2, 0.2) * H
            ra, rb = rng.uniform(0.06, 0.16, size=2) * size
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (x - cx) * c + (y - cy) * s
        v = -(x - cx) * s + (y - cy) * c
        inside = (u / ra) ** 2 + (v / rb) ** 2 <= 1.0
        img[inside] = rng.uniform(lo, hi)
    if blur_sigma > 0:
        img = gaussian_filter(img, blur_sigma, mode="constant")
    return ScalarField2D(np.clip(img, 0.0, 1.0), spacing_mm)


# -- tag patterns ------------------------------------------------------------

def pattern_values(A, B, mu, phase, coord_mm):
    return A * np.sin(2.0 * np.pi * mu * coord_mm + phase) + B


def tag_pattern(params: TagParams, orientation: str, H: int, W: int, spacing_mm=(2.0, 2.0),
                A: float | None = None, B: float | None = None) -> ScalarField2D:
    """Sinusoidal tag image; vertical tags vary along x, horizontal along y.

    ``A``/``B`` override the amplitude and offset (faded patterns).
    """
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be 'h' or 'v', got {orientation!r}")
    x, y = pixel_grid((H, W))
    a = params.A if A is None else A
    b = params.B if B is None else B
    coord = y * spacing_mm[1] if orientation == "h" else x * spacing_mm[0]
    p = pattern_values(a, b, params.mu, params.phase(orientation), coord)
    return ScalarField2D(np.maximum(p, 0.0), spacing_mm)


# -- motion ------------------------------------------------------------------

def _bspline3(t: np.ndarray) -> np.ndarray:
    """Centered cubic B-spline kernel."""
    t = np.abs(t)
    out = np.zeros_like(t)
    m1 = t < 1
    m2 = (t >= 1) & (t < 2)
    out[m1] = 2.0 / 3.0 - t[m1] ** 2 + 0.5 * t[m1] ** 3
    out[m2] = (2.0 - t[m2]) ** 3 / 6.0
    return out


class BSplineMotion:
    """Cubic B-spline free-form displacement, grown linearly over frames."""

    def __init__(self, control_dx: np.ndarray, control_dy: np.ndarray, control_spacing_px: float,
                 shape, spacing_mm=(2.0, 2.0)):
        self.control_dx = control_dx
        self.control_dy = control_dy
        self.control_spacing_px = float(control_spacing_px)
        self.shape = tuple(shape)
        self.spacing_mm = tuple(spacing_mm)

    def _basis(self, coord: np.ndarray, n_ctrl: int) -> np.ndarray:
        # control point k sits at pixel (k - 1) * spacing
        u = coord[..., None] / self.control_spacing_px + 1.0
        return _bspline3(u - np.arange(n_ctrl))

    def evaluate(self, x: np.ndarray, y: np.ndarray, scale: float = 1.0):
        """Full-strength displacement at arbitrary points, times ``scale``."""
        bx = self._basis(np.asarray(x, dtype=np.float64), self.control_dx.shape[1])
        by = self._basis(np.asarray(y, dtype=np.float64), self.control_dx.shape[0])
        dx = np.einsum("...i,...j,ij->...", by, bx, self.control_dx)
        dy = np.einsum("...i,...j,ij->...", by, bx, self.control_dy)
        return scale * dx, scale * dy

    def diffeo(self, scale: float, tol: float = 1e-8, max_iter: int = 200) -> Diffeo:
        x, y = pixel_grid(self.shape)
        fdx, fdy = self.evaluate(x, y, scale)
        # fixed point of dinv(x) = -d(x + dinv(x))
        idx, idy = -fdx, -fdy
        for _ in range(max_iter):
            ex, ey = self.evaluate(x + idx, y + idy, scale)
            ndx, ndy = -ex, -ey
            change = max(np.abs(ndx - idx).max(), np.abs(ndy - idy).max())
            idx, idy = ndx, ndy
            if change < tol:
                break
        return Diffeo(VectorField2D(fdx, fdy, self.spacing_mm), VectorField2D(idx, idy, self.spacing_mm), 0)

    def inverse_residual(self, diffeo: Diffeo, scale: float) -> np.ndarray:
        """|phi(phi^-1(x)) - x| with phi evaluated analytically."""
        x, y = pixel_grid(self.shape)
        px = x + diffeo.inverse.dx
        py = y + diffeo.inverse.dy
        ex, ey = self.evaluate(px, py, scale)
        return np.hypot(px + ex - x, py + ey - y)

    def frames(self, n_frames: int) -> list[Diffeo]:
        return [self.diffeo(s) for s in _ramp(n_frames)]


def _ramp(n_frames: int) -> np.ndarray:
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if n_frames == 1:
        return np.zeros(1)
    return np.arange(n_frames) / (n_frames - 1)


def bspline_deformation(seed: int, H: int, W: int, control_spacing_px: float = 16.0,
                        max_control_disp_px: float = 4.0, spacing_mm=(2.0, 2.0)) -> BSplineMotion:
    """Random control-point displacements, uniform in [-max, max] per component."""
    if max_control_disp_px > 0.4 * control_spacing_px:
        raise ValueError("max_control_disp_px must be <= 0.4 * control_spacing_px to stay invertible")
    ny = int(np.ceil((H - 1) / control_spacing_px)) + 3
    nx = int(np.ceil((W - 1) / control_spacing_px)) + 3
    rng = np.random.default_rng(seed)
    cdx = rng.uniform(-max_control_disp_px, max_control_disp_px, size=(ny, nx))
    cdy = rng.uniform(-max_control_disp_px, max_control_disp_px, size=(ny, nx))
    return BSplineMotion(cdx, cdy, control_spacing_px, (H, W), spacing_mm)


def _affine_diffeo(shape, spacing_mm, fwd, inv) -> Diffeo:
    x, y = pixel_grid(shape)
    fx, fy = fwd(x, y)
    ix, iy = inv(x, y)
    return Diffeo(VectorField2D(fx - x, fy - y, spacing_mm), VectorField2D(ix - x, iy - y, spacing_mm), 0)


def rotation_diffeo(angle_rad: float, center, shape, spacing_mm=(2.0, 2.0)) -> Diffeo:
    cx, cy = center

    def rot(theta):
        c, s = np.cos(theta), np.sin(theta)
        return lambda x, y: (cx + c * (x - cx) - s * (y - cy), cy + s * (x - cx) + c * (y - cy))

    return _affine_diffeo(shape, spacing_mm, rot(angle_rad), rot(-angle_rad))


def rigid_rotation_motion(angle_deg: float, center, T: int, shape=(64, 64), spacing_mm=(2.0, 2.0)) -> list[Diffeo]:
    """Rotation about ``center`` growing linearly from 0 to ``angle_deg``."""
    return [rotation_diffeo(np.deg2rad(angle_deg) * s, center, shape, spacing_mm) for s in _ramp(T)]


def translation_motion(shift_px, T: int, shape=(64, 64), spacing_mm=(2.0, 2.0)) -> list[Diffeo]:
    """Translation growing linearly from 0 to ``shift_px`` = (sx, sy)."""
    out = []
    for s in _ramp(T):
        tx, ty = s * shift_px[0], s * shift_px[1]
        out.append(Diffeo(VectorField2D(np.full(shape, tx), np.full(shape, ty), spacing_mm),
                          VectorField2D(np.full(shape, -tx), np.full(shape, -ty), spacing_mm), 0))
    return out


def static_motion(T: int, shape=(64, 64), spacing_mm=(2.0, 2.0)) -> list[Diffeo]:
    return [Diffeo.identity(shape, spacing_mm) for _ in range(T)]


# -- sequences ---------------------------------------------------------------

@dataclass
class TaggedSequence:
    """T frames of horizontally and vertically tagged images plus metadata.

    ``frames_h``/``frames_v`` are (T, H, W) arrays.
    """

    frames_h: np.ndarray
    frames_v: np.ndarray
    times_s: np.ndarray
    tag_period_mm: float
    spacing_mm: tuple[float, float] = (2.0, 2.0)
    fading_preset: str | None = None
    seed: int | None = None
    motion: list[Diffeo] | None = None
    anatomy: ScalarField2D | None = None
    tag_params: TagParams | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames_h = np.asarray(self.frames_h, dtype=np.float64)
        self.frames_v = np.asarray(self.frames_v, dtype=np.float64)
        self.times_s = np.asarray(self.times_s, dtype=np.float64)
        if self.frames_h.ndim != 3 or self.frames_h.shape != self.frames_v.shape:
            raise ValueError("frames_h and frames_v must be (T, H, W) arrays of equal shape")
        if len(self.times_s) != self.frames_h.shape[0] or len(self.times_s) < 1:
            raise ValueError("times_s must have one entry per frame")
        if np.any(np.diff(self.times_s) <= 0):
            raise ValueError("times_s must be strictly increasing")
        if self.motion is not None and len(self.motion) != len(self.times_s):
            raise ValueError("ground-truth motion needs one Diffeo per frame")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    @property
    def n_frames(self) -> int:
        return self.frames_h.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames_h.shape[1:]

    def frame(self, t: int, orientation: str) -> ScalarField2D:
        arr = self.frames_h if orientation == "h" else self.frames_v
        return ScalarField2D(arr[t], self.spacing_mm)

    def subsequence(self, indices) -> TaggedSequence:
        indices = list(indices)
        motion = [self.motion[i] for i in indices] if self.motion is not None else None
        return replace(self, frames_h=self.frames_h[indices], frames_v=self.frames_v[indices],
                       times_s=self.times_s[indices], motion=motion)


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def synthesize_sequence(anatomy: ScalarField2D, tag_params: TagParams, fading: FadingParams | None,
                        motion: list[Diffeo], times_s, noise_sigma: float = 0.01, seed: int = 0) -> TaggedSequence:
    """Deform the anatomy and the faded tag pattern by each frame's inverse map, then add noise.

    Intensities and ground-truth fields are rounded to float32 so that the
    sequence survives a TAGSEQ round trip unchanged.
    """
    times_s = np.asarray(times_s, dtype=np.float64)
    if motion is None or len(motion) != len(times_s):
        raise ValueError("motion must provide one Diffeo (with inverse) per frame")
    anatomy = ScalarField2D(_f32(anatomy.data), anatomy.spacing_mm)
    h, w = anatomy.shape
    sx, sy = anatomy.spacing_mm
    x, y = pixel_grid((h, w))
    rng = np.random.default_rng(seed)
    frames = {"h": [], "v": []}
    gt = []
    for t, phi in zip(times_s, motion):
        if phi.inverse is None:
            raise ValueError("motion frame lacks an inverse map")
        px = x + phi.inverse.dx
        py = y + phi.inverse.dy
        a_t = sample_array(anatomy.data, px, py)
        amp, off = fade(tag_params, fading, t)
        for o in ORIENTATIONS:
            coord = py * sy if o == "h" else px * sx
            p = np.maximum(pattern_values(amp, off, tag_params.mu, tag_params.phase(o), coord), 0.0)
            g = a_t * p
            if noise_sigma > 0:
                g = g + rng.normal(0.0, noise_sigma, size=g.shape)
            frames[o].append(g)
        gt.append(Diffeo(VectorField2D(_f32(phi.forward.dx), _f32(phi.forward.dy), anatomy.spacing_mm),
                         VectorField2D(_f32(phi.inverse.dx), _f32(phi.inverse.dy), anatomy.spacing_mm),
                         phi.n_squaring_steps))
    return TaggedSequence(
        frames_h=_f32(np.stack(frames["h"])), frames_v=_f32(np.stack(frames["v"])), times_s=times_s,
        tag_period_mm=tag_params.tag_period_mm, spacing_mm=anatomy.spacing_mm,
        fading_preset=None if fading is None else fading.name, seed=seed, motion=gt,
        anatomy=anatomy, tag_params=tag_params,
    )


def spectral_profile(image) -> np.ndarray:
    """Middle row of the centered 2D FFT magnitude."""
    arr = image.data if isinstance(image, ScalarField2D) else np.asarray(image, dtype=np.float64)
    spec = np.abs(np.fft.fftshift(np.fft.fft2(arr)))
    return spec[arr.shape[0] // 2]


def harmonic_peaks(profile: np.ndarray, min_offset: int = 2) -> tuple[float, float, float]:
    """(left offset, right offset, harmonic/central ratio) of the strongest side peaks.

    Offsets are in frequency bins from the center, refined by parabolic
    interpolation.  Bins closer than ``min_offset`` to the center are ignored.
    """
    n = len(profile)
    c = n // 2
    central = profile[c]

    def refine(i):
        if 0 < i < n - 1:
            a, b, d = profile[i - 1], profile[i], profile[i + 1]
            den = a - 2 * b + d
            if abs(den) > 1e-12:
                return i + 0.5 * (a - d) / den
        return float(i)

    right = c + min_offset + int(np.argmax(profile[c + min_offset:]))
    left = int(np.argmax(profile[:c - min_offset + 1]))
    ratio = 0.5 * (profile[left] + profile[right]) / central
    return c - refine(left), refine(right) - c, float(ratio)


def harmonic_ratio(profile: np.ndarray, offset_bins: float) -> float:
    """Harmonic/central ratio read at a fixed offset, e.g. the tag peak located in an earlier frame.

    Useful once fading has pushed the harmonic below nearby anatomy content,
    where the argmax in ``harmonic_peaks`` would jump to another structure.
    """
    n = len(profile)
    c = n // 2
    if not 0 < offset_bins < c:
        raise ValueError("offset_bins must lie strictly inside the half spectrum")
    idx = np.arange(n)
    side = 0.5 * (np.interp(c - offset_bins, idx, profile) + np.interp(c + offset_bins, idx, profile))
    return float(side / profile[c])


# -- presets -----------------------------------------------------------------

@dataclass(frozen=True)
class Geometry:
    shape: tuple[int, int]
    spacing_mm: tuple[float, float]
    times_s: tuple[float, ...]


def desk_geometry(n_frames: int = 20) -> Geometry:
    # every 5th frame of an 11 ms acquisition
    return Geometry((64, 64), (2.0, 2.0), tuple(np.round(np.arange(n_frames) * 0.055, 6)))


def paper_geometry(n_frames: int = 100) -> Geometry:
    return Geometry((128, 128), (2.0, 2.0), tuple(np.round(np.arange(n_frames) * 0.011, 6)))


def default_tag_params(tag_period_mm: float, phi_h: float = 0.0, phi_v: float = 0.0) -> TagParams:
    return TagParams(A=0.45, B=0.55, mu=1.0 / tag_period_mm, phi_h=phi_h, phi_v=phi_v)
