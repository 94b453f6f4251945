"""Joint estimation of anatomy and tag parameters from the two t=0 tagged images."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .fields import ScalarField2D, pixel_grid
from .phantom import TagParams
from .tagseq import read_raster, write_raster

TWO_PI = 2.0 * np.pi


class DegenerateInputWarning(RuntimeWarning):
    pass


def init_tag_params(tag_period_hint_mm: float) -> TagParams:
    """Starting point: A=0.45, B=0.55, both phases 2*pi, mu from the nominal tag period."""
    if not tag_period_hint_mm > 0:
        raise ValueError("tag period hint must be positive")
    return TagParams(A=0.45, B=0.55, mu=1.0 / tag_period_hint_mm, phi_h=TWO_PI, phi_v=TWO_PI)


class AnatomyPrior:
    """Maps a latent tensor to an anatomy image in [0, 1].

    Subclasses supply ``init_latent``, ``decode`` and ``regularization``;
    ``decode`` must be built from autodiff ops.
    """

    def __init__(self, shape):
        self.shape = tuple(shape)

    def init_latent(self, rng: np.random.Generator, images=None, offset: float = 0.55) -> np.ndarray:
        raise NotImplementedError

    def decode(self, z: ad.Tensor) -> ad.Tensor:
        raise NotImplementedError

    def regularization(self, z: ad.Tensor, decoded: ad.Tensor) -> ad.Tensor | None:
        return None


class PixelGridPrior(AnatomyPrior):
    """Per-pixel logits squashed by a sigmoid, with a smoothed total-variation penalty."""

    def __init__(self, shape, tv_weight: float = 1e-3, tv_eps: float = 1e-3, init_noise: float = 0.0,
                 init_from_data: bool = True):
        super().__init__(shape)
        self.tv_weight = tv_weight
        self.tv_eps = tv_eps
        self.init_noise = init_noise
        self.init_from_data = init_from_data

    def init_latent(self, rng, images=None, offset=0.55):
        """Zero logits, or the logit of a smoothed ``(g_h + g_v) / 2B`` estimate."""
        z = np.zeros(self.shape)
        if self.init_from_data and images is not None:
            est = gaussian_filter(sum(images) / (len(images) * offset), 1.0)
            est = np.clip(est, 0.02, 0.98)
            z = np.log(est / (1.0 - est))
        if self.init_noise > 0:
            z += rng.normal(0.0, self.init_noise, size=self.shape)
        return z

    def decode(self, z):
        return ad.sigmoid(z)

    def regularization(self, z, decoded):
        if self.tv_weight <= 0:
            return None
        dx = decoded[:-1, 1:] - decoded[:-1, :-1]
        dy = decoded[1:, :-1] - decoded[:-1, :-1]
        tv = ad.sum(ad.sqrt(ad.square(dx) + ad.square(dy) + self.tv_eps ** 2))
        return tv * self.tv_weight


@dataclass
class DisentangleOptions:
    iterations: int = 600
    lr_latent: float = 1e-2
    lr_amplitude: float = 1e-4
    lr_phase: float = 1e-2
    lr_log_mu: float = 1e-3
    phase_grid: tuple = (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi)
    tv_weight: float = 1e-3
    seed: int = 0


@dataclass
class DisentangleResult:
    anatomy: ScalarField2D
    params: TagParams
    final_loss: float
    loss_history: list = field(default_factory=list)
    degenerate: bool = False

    def to_json(self) -> dict:
        return {"params": self.params.to_dict(), "spacing_mm": list(self.anatomy.spacing_mm),
                "final_loss": self.final_loss,
                "loss_history": self.loss_history, "degenerate": self.degenerate}

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_raster(directory / "anatomy.tgsq", self.anatomy.data[None, None])
        (directory / "disentangle.json").write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, directory) -> DisentangleResult:
        directory = Path(directory)
        meta = json.loads((directory / "disentangle.json").read_text())
        spacing = tuple(meta.get("spacing_mm", (1.0, 1.0)))
        anatomy = ScalarField2D(read_raster(directory / "anatomy.tgsq")[0, 0], spacing)
        return cls(anatomy, TagParams.from_dict(meta["params"]), float(meta["final_loss"]),
                   list(meta.get("loss_history", [])), bool(meta.get("degenerate", False)))


def softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


def tag_pattern_tensor(A, B, mu, phase, coord_mm):
    """Differentiable ``A sin(2 pi mu c + phase) + B``; any argument may be a Tensor."""
    arg = ad.add(ad.mul(ad.mul(mu, TWO_PI), coord_mm), phase)
    return ad.add(ad.mul(A, ad.sin(arg)), B)


def _coords_mm(shape, spacing_mm):
    x, y = pixel_grid(shape)
    return x * spacing_mm[0], y * spacing_mm[1]


def _best_phase(obs: np.ndarray, coord_mm: np.ndarray, params: TagParams, anatomy0: np.ndarray, grid) -> float:
    losses = []
    for ph in grid:
        p = params.A * np.sin(TWO_PI * params.mu * coord_mm + ph) + params.B
        losses.append(float(np.sum((obs - anatomy0 * p) ** 2)))
    return float(grid[int(np.argmin(losses))])


def disentangle(g0_h: ScalarField2D, g0_v: ScalarField2D, prior: AnatomyPrior | None = None,
                opts: DisentangleOptions | None = None, tag_period_hint_mm: float | None = None,
                init: TagParams | None = None) -> DisentangleResult:
    """Fit ``g0_i ~ decode(z) * p0_i(A, B, mu, phi_i)`` for i in (h, v) with Adam.

    Returns the best-loss iterate.  The tag frequency starts at the nominal
    period (``tag_period_hint_mm`` or ``init``); each phase starts from the
    coarse grid value with the lowest initial loss.
    """
    opts = opts or DisentangleOptions()
    if g0_h.shape != g0_v.shape:
        raise ValueError(f"shape mismatch: {g0_h.shape} vs {g0_v.shape}")
    if init is None:
        if tag_period_hint_mm is None:
            raise ValueError("need tag_period_hint_mm or init")
        init = init_tag_params(tag_period_hint_mm)
    shape = g0_h.shape
    spacing = g0_h.spacing_mm
    prior = prior or PixelGridPrior(shape, tv_weight=opts.tv_weight)
    if prior.shape != shape:
        raise ValueError("prior grid does not match the image grid")
    obs_h, obs_v = g0_h.data, g0_v.data
    degenerate = not (np.any(np.abs(obs_h) > 1e-12) or np.any(np.abs(obs_v) > 1e-12))
    if degenerate:
        warnings.warn("disentangle: all-zero input images; anatomy is undetermined", DegenerateInputWarning,
                      stacklevel=2)

    rng = np.random.default_rng(opts.seed)
    z = ad.Tensor(prior.init_latent(rng, (obs_h, obs_v), init.B), requires_grad=True)
    xmm, ymm = _coords_mm(shape, spacing)
    a_start = prior.decode(ad.Tensor(z.data)).data
    phi_h0 = _best_phase(obs_h, ymm, init, a_start, opts.phase_grid) if opts.phase_grid else init.phi_h
    phi_v0 = _best_phase(obs_v, xmm, init, a_start, opts.phase_grid) if opts.phase_grid else init.phi_v

    # phases are optimized relative to the grid center so that they decouple from mu
    cx, cy = xmm.mean(), ymm.mean()
    a_raw = ad.Tensor(softplus_inv(max(init.A, 1e-6)), requires_grad=True)
    b = ad.Tensor(init.B, requires_grad=True)
    log_mu = ad.Tensor(0.0, requires_grad=True)
    phi_h = ad.Tensor(phi_h0 + TWO_PI * init.mu * cy, requires_grad=True)
    phi_v = ad.Tensor(phi_v0 + TWO_PI * init.mu * cx, requires_grad=True)
    opt = ad.Adam([([z], opts.lr_latent), ([a_raw, b], opts.lr_amplitude),
                   ([phi_h, phi_v], opts.lr_phase), ([log_mu], opts.lr_log_mu)])

    def snapshot():
        return (z.data.copy(), float(a_raw.data), float(b.data), float(log_mu.data),
                float(phi_h.data), float(phi_v.data))

    best = (np.inf, snapshot())
    history = []
    for _ in range(opts.iterations + 1):
        opt.zero_grad()
        a = prior.decode(z)
        A = ad.softplus(a_raw)
        mu = ad.mul(ad.exp(log_mu), init.mu)
        p_h = tag_pattern_tensor(A, b, mu, phi_h, ymm - cy)
        p_v = tag_pattern_tensor(A, b, mu, phi_v, xmm - cx)
        loss = ad.add(ad.sum(ad.square(ad.sub(ad.mul(a, p_h), obs_h))),
                      ad.sum(ad.square(ad.sub(ad.mul(a, p_v), obs_v))))
        reg = prior.regularization(z, a)
        if reg is not None:
            loss = ad.add(loss, reg)
        val = loss.item()
        history.append(val)
        if val < best[0]:
            best = (val, snapshot())
        if len(history) > opts.iterations:
            break
        loss.backward()
        opt.step()

    zb, ar, bb, lm, ph, pv = best[1]
    anatomy = ScalarField2D(prior.decode(ad.Tensor(zb)).data, spacing)
    mu = float(init.mu * np.exp(lm))
    params = TagParams(A=float(np.logaddexp(0.0, ar)), B=bb, mu=mu,
                       phi_h=float(np.mod(ph - TWO_PI * mu * cy, TWO_PI)),
                       phi_v=float(np.mod(pv - TWO_PI * mu * cx, TWO_PI)))
    return DisentangleResult(anatomy, params, best[0], history, degenerate)


def reconstruct_t0(result: DisentangleResult) -> tuple[ScalarField2D, ScalarField2D]:
    """Anatomy times the fitted h and v tag patterns."""
    xmm, ymm = _coords_mm(result.anatomy.shape, result.anatomy.spacing_mm)
    p = result.params
    a = result.anatomy.data
    g_h = a * (p.A * np.sin(TWO_PI * p.mu * ymm + p.phi_h) + p.B)
    g_v = a * (p.A * np.sin(TWO_PI * p.mu * xmm + p.phi_v) + p.B)
    return ScalarField2D(g_h, result.anatomy.spacing_mm), ScalarField2D(g_v, result.anatomy.spacing_mm)


def options_from_dict(d: dict | None) -> DisentangleOptions:
    d = dict(d or {})
    if "phase_grid" in d:
        d["phase_grid"] = tuple(d["phase_grid"])
    return DisentangleOptions(**d)


def options_to_dict(o: DisentangleOptions) -> dict:
    d = asdict(o)
    d["phase_grid"] = list(d["phase_grid"])
    return d
