"""Dense 2D fields: sampling, warping, composition, exponential maps, strain and error metrics.

Conventions: arrays are indexed ``[row, col] = [y, x]``; displacements are in
pixel units with ``dx`` along columns and ``dy`` along rows.  A displacement
``d`` stands for the map ``x -> x + d(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SQUARING_STEPS = 7


@dataclass(frozen=True)
class ScalarField2D:
    data: np.ndarray
    spacing_mm: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] < 2:
            raise ValueError(f"ScalarField2D needs an HxW array with H, W >= 2, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("ScalarField2D contains non-finite values")
        _check_spacing(self.spacing_mm)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class VectorField2D:
    dx: np.ndarray
    dy: np.ndarray
    spacing_mm: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        dx = np.asarray(self.dx, dtype=np.float64)
        dy = np.asarray(self.dy, dtype=np.float64)
        if dx.shape != dy.shape or dx.ndim != 2:
            raise ValueError(f"dx and dy must be 2D arrays of equal shape, got {dx.shape}, {dy.shape}")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise ValueError("VectorField2D contains non-finite values")
        _check_spacing(self.spacing_mm)
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    @classmethod
    def zeros(cls, shape, spacing_mm=(1.0, 1.0)) -> VectorField2D:
        return cls(np.zeros(shape), np.zeros(shape), spacing_mm)

    @classmethod
    def from_array(cls, arr: np.ndarray, spacing_mm=(1.0, 1.0)) -> VectorField2D:
        """From a (2, H, W) array of (dx, dy)."""
        return cls(arr[0], arr[1], spacing_mm)

    def as_array(self) -> np.ndarray:
        return np.stack([self.dx, self.dy])

    def __neg__(self) -> VectorField2D:
        return VectorField2D(-self.dx, -self.dy, self.spacing_mm)

    def scaled(self, s: float) -> VectorField2D:
        return VectorField2D(self.dx * s, self.dy * s, self.spacing_mm)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)

    def to_mm(self) -> tuple[np.ndarray, np.ndarray]:
        return self.dx * self.spacing_mm[0], self.dy * self.spacing_mm[1]


@dataclass(frozen=True)
class Diffeo:
    """Forward map and its inverse as displacement fields."""

    forward: VectorField2D
    inverse: VectorField2D
    n_squaring_steps: int = 0

    @classmethod
    def identity(cls, shape, spacing_mm=(1.0, 1.0)) -> Diffeo:
        z = VectorField2D.zeros(shape, spacing_mm)
        return cls(z, z, 0)

    def inverse_residual(self) -> np.ndarray:
        """|phi(phi^-1(x)) - x| per pixel, via bilinear composition."""
        return compose(self.forward, self.inverse).magnitude()


def _check_spacing(spacing):
    if len(spacing) != 2 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing_mm must be two positive reals, got {spacing}")


def _check_same_shape(*shapes):
    if any(s != shapes[0] for s in shapes[1:]):
        raise ValueError(f"shape mismatch: {shapes}")


def pixel_grid(shape) -> tuple[np.ndarray, np.ndarray]:
    """(x, y) coordinate arrays for an HxW grid."""
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return x, y


def interior_mask(shape, margin: int = 1) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[margin:shape[0] - margin, margin:shape[1] - margin] = True
    return m


def sample_array(arr: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorized clamp-to-border bilinear sampling of an (H, W[, C]) array.

    ``x`` and ``y`` may have any (equal) shape; the result has that shape
    (plus the channel axis if present).
    """
    h, w = arr.shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2)
    fx = x - x0
    fy = y - y0
    if arr.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = arr[y0, x0]
    v01 = arr[y0, x0 + 1]
    v10 = arr[y0 + 1, x0]
    v11 = arr[y0 + 1, x0 + 1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return top + fy * (bot - top)


def bilinear_sample(field: ScalarField2D, coords) -> np.ndarray:
    """Sample ``field`` at a sequence of (x, y) pixel coordinates."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(coords)):
        raise ValueError("non-finite sampling coordinate")
    return sample_array(field.data, coords[:, 0], coords[:, 1])


def warp(field: ScalarField2D, disp: VectorField2D) -> ScalarField2D:
    """``field o (id + disp)``."""
    _check_same_shape(field.shape, disp.shape)
    x, y = pixel_grid(field.shape)
    return ScalarField2D(sample_array(field.data, x + disp.dx, y + disp.dy), field.spacing_mm)


def compose(d_outer: VectorField2D, d_inner: VectorField2D) -> VectorField2D:
    """Displacement of ``(id + d_outer) o (id + d_inner)``."""
    _check_same_shape(d_outer.shape, d_inner.shape)
    x, y = pixel_grid(d_inner.shape)
    stacked = np.stack([d_outer.dx, d_outer.dy], axis=-1)
    s = sample_array(stacked, x + d_inner.dx, y + d_inner.dy)
    return VectorField2D(d_inner.dx + s[..., 0], d_inner.dy + s[..., 1], d_inner.spacing_mm)


def _squaring(velocity: VectorField2D, n_steps: int) -> VectorField2D:
    d = velocity.scaled(1.0 / 2 ** n_steps)
    for _ in range(n_steps):
        d = compose(d, d)
    return d


def exp_map(velocity: VectorField2D, n_steps: int = DEFAULT_SQUARING_STEPS) -> Diffeo:
    """Scaling and squaring of a stationary velocity field and of its negation."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not (np.all(np.isfinite(velocity.dx)) and np.all(np.isfinite(velocity.dy))):
        raise ValueError("non-finite velocity")
    return Diffeo(_squaring(velocity, n_steps), _squaring(-velocity, n_steps), n_steps)


def displacement_gradient(disp: VectorField2D):
    """(d dx/dx, d dx/dy, d dy/dx, d dy/dy); central differences, one-sided at borders."""
    ddx_dy, ddx_dx = np.gradient(disp.dx)
    ddy_dy, ddy_dx = np.gradient(disp.dy)
    return ddx_dx, ddx_dy, ddy_dx, ddy_dy


def jacobian_determinant(disp: VectorField2D) -> ScalarField2D:
    a, b, c, d = displacement_gradient(disp)
    return ScalarField2D((1.0 + a) * (1.0 + d) - b * c, disp.spacing_mm)


def green_lagrange(disp: VectorField2D):
    """Components (E11, E12, E22) of E = (F^T F - I) / 2 with F = I + grad(d)."""
    a, b, c, d = displacement_gradient(disp)
    f11, f12, f21, f22 = 1.0 + a, b, c, 1.0 + d
    e11 = 0.5 * (f11 * f11 + f21 * f21 - 1.0)
    e22 = 0.5 * (f12 * f12 + f22 * f22 - 1.0)
    e12 = 0.5 * (f11 * f12 + f21 * f22)
    return e11, e12, e22


def max_principal_strain(disp: VectorField2D) -> ScalarField2D:
    """Largest eigenvalue of the Green-Lagrange strain tensor, per pixel."""
    e11, e12, e22 = green_lagrange(disp)
    half_tr = 0.5 * (e11 + e22)
    rad = np.sqrt((0.5 * (e11 - e22)) ** 2 + e12 ** 2)
    return ScalarField2D(half_tr + rad, disp.spacing_mm)


def epe(d_gt: VectorField2D, d_est: VectorField2D) -> ScalarField2D:
    _check_same_shape(d_gt.shape, d_est.shape)
    ex = d_est.dx - d_gt.dx
    ey = d_est.dy - d_gt.dy
    return ScalarField2D(np.sqrt(ex * ex + ey * ey), d_gt.spacing_mm)


def emps(d_gt: VectorField2D, d_est: VectorField2D) -> ScalarField2D:
    _check_same_shape(d_gt.shape, d_est.shape)
    err = np.abs(max_principal_strain(d_gt).data - max_principal_strain(d_est).data)
    return ScalarField2D(err, d_gt.spacing_mm)


def summary_stats(values, mask: np.ndarray | None = None) -> dict:
    """mean / median / quartiles of a field over an optional boolean mask."""
    arr = values.data if isinstance(values, ScalarField2D) else np.asarray(values)
    sel = arr[mask] if mask is not None else arr.ravel()
    if sel.size == 0:
        nan = float("nan")
        return {"mean": nan, "median": nan, "q1": nan, "q3": nan, "n": 0}
    q1, med, q3 = np.percentile(sel, [25, 50, 75])
    return {"mean": float(sel.mean()), "median": float(med), "q1": float(q1), "q3": float(q3),
            "n": int(sel.size)}
