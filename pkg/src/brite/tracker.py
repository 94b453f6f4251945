"""Lagrangian motion tracking with a coordinate network, a diffeomorphic exponential map and tag fading."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .disentangle import DisentangleResult, softplus_inv, tag_pattern_tensor
from .fields import DEFAULT_SQUARING_STEPS, Diffeo, ScalarField2D, VectorField2D, exp_map, pixel_grid
from .phantom import TaggedSequence, TagParams
from .tagseq import save_displacements


@dataclass
class TrackOptions:
    iterations: int = 2000
    lr_net: float = 1e-4
    lr_fading: float = 5e-2
    n_squaring: int = DEFAULT_SQUARING_STEPS
    hidden: int = 128
    n_hidden_layers: int = 3
    first_layer_scale: float = 1.0
    velocity_stride: int = 1
    fading_init: float = 0.5
    warm_start_fading: bool = False
    plateau_window: int = 200
    plateau_rtol: float = 1e-6
    use_mask: bool = False
    mask_threshold: float = 0.05
    seed: int = 0


def options_from_dict(d: dict | None) -> TrackOptions:
    return TrackOptions(**(d or {}))


def options_to_dict(o: TrackOptions) -> dict:
    return asdict(o)


class VelocityNet:
    """Fully connected tanh network mapping normalized (x, y) to a velocity in pixels.

    The output layer starts at zero so a fresh network encodes the identity.
    """

    def __init__(self, seed: int = 0, hidden: int = 128, n_hidden_layers: int = 3, first_layer_scale: float = 1.0):
        rng = np.random.default_rng(seed)
        sizes = [2] + [hidden] * n_hidden_layers
        self.weights: list[ad.Tensor] = []
        self.biases: list[ad.Tensor] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = np.sqrt(2.0 / (n_in + n_out))
            if i == 0:
                std *= first_layer_scale
            self.weights.append(ad.Tensor(rng.normal(0.0, std, size=(n_in, n_out)), requires_grad=True))
            self.biases.append(ad.Tensor(np.zeros(n_out), requires_grad=True))
        self.weights.append(ad.Tensor(np.zeros((hidden, 2)), requires_grad=True))
        self.biases.append(ad.Tensor(np.zeros(2), requires_grad=True))

    @property
    def params(self) -> list[ad.Tensor]:
        return self.weights + self.biases

    def __call__(self, coords: ad.Tensor) -> ad.Tensor:
        h = coords
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = ad.tanh(ad.add(ad.matmul(h, w), b))
        return ad.add(ad.matmul(h, self.weights[-1]), self.biases[-1])

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def load_state(self, state: list[np.ndarray]) -> None:
        for p, s in zip(self.params, state):
            p.data = s.copy()
            p.grad = None

    def copy(self) -> VelocityNet:
        new = VelocityNet.__new__(VelocityNet)
        new.weights = [ad.Tensor(w.data.copy(), requires_grad=True) for w in self.weights]
        new.biases = [ad.Tensor(b.data.copy(), requires_grad=True) for b in self.biases]
        return new

    def lipschitz_bound(self) -> float:
        """Upper bound on the Lipschitz constant w.r.t. normalized coordinates."""
        return float(np.prod([np.linalg.norm(w.data, 2) for w in self.weights]))


def normalized_coords(shape) -> np.ndarray:
    """(N, 2) pixel-center coordinates mapped affinely onto [-1, 1]^2, row-major."""
    h, w = shape
    x, y = pixel_grid(shape)
    return np.stack([2.0 * x.ravel() / (w - 1) - 1.0, 2.0 * y.ravel() / (h - 1) - 1.0], axis=1)


def pixel_coords(shape) -> np.ndarray:
    x, y = pixel_grid(shape)
    return np.stack([x.ravel(), y.ravel()], axis=1)


class VelocitySampler:
    """Evaluates a VelocityNet on an HxW grid.

    With ``stride`` > 1 the network runs on a coarser lattice spanning the
    same extent and the result is bilinearly upsampled to every pixel.
    """

    def __init__(self, shape, stride: int = 1):
        h, w = shape
        self.shape = (h, w)
        self.stride = max(1, int(stride))
        if self.stride == 1:
            self.coarse = (h, w)
            self.coords = ad.Tensor(normalized_coords((h, w)))
            self.upsample = None
        else:
            hc = (h - 1) // self.stride + 1
            wc = (w - 1) // self.stride + 1
            self.coarse = (hc, wc)
            self.coords = ad.Tensor(normalized_coords((hc, wc)))
            x, y = pixel_grid((h, w))
            self.upsample = np.stack([x.ravel() * (wc - 1) / (w - 1), y.ravel() * (hc - 1) / (h - 1)], axis=1)

    def __call__(self, net: VelocityNet) -> ad.Tensor:
        v = net(self.coords)
        if self.upsample is None:
            return v
        return ad.grid_sample(ad.reshape(v, (*self.coarse, 2)), self.upsample)


def velocity_field(net: VelocityNet, H: int, W: int, spacing_mm=(1.0, 1.0), stride: int = 1) -> VectorField2D:
    v = VelocitySampler((H, W), stride)(net).data
    return VectorField2D(v[:, 0].reshape(H, W), v[:, 1].reshape(H, W), spacing_mm)


def exp_map_tensor(velocity: ad.Tensor, shape, n_steps: int) -> ad.Tensor:
    """Differentiable scaling and squaring of an (N, 2) velocity on an HxW grid."""
    h, w = shape
    base = pixel_coords(shape)
    d = ad.mul(velocity, 1.0 / 2 ** n_steps)
    for _ in range(n_steps):
        d = ad.add(d, ad.grid_sample(ad.reshape(d, (h, w, 2)), ad.add(d, base)))
    return d


@dataclass
class FadingState:
    A: float
    B: float


@dataclass
class FrameResult:
    diffeo: Diffeo
    fading: FadingState
    loss: float
    loss_history: list
    recon_h: ScalarField2D
    recon_v: ScalarField2D
    anatomy: ScalarField2D
    pattern_h: ScalarField2D
    pattern_v: ScalarField2D
    tag_params: TagParams
    net_state: list = field(default_factory=list, repr=False)

    @property
    def displacement(self) -> VectorField2D:
        return self.diffeo.forward


@dataclass
class LagrangianResult:
    frames: list
    times_s: np.ndarray
    reference_index: int = 0

    @property
    def pre_imaging(self) -> Diffeo:
        return self.frames[0].diffeo

    def displacements(self) -> list[VectorField2D]:
        return [f.displacement for f in self.frames]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_displacements(self.displacements(), directory / "displacements.tgsq")
        series = [{"time_s": float(t), "A_t": f.fading.A, "B_t": f.fading.B, "loss": f.loss}
                  for t, f in zip(self.times_s, self.frames)]
        (directory / "track.json").write_text(json.dumps({"frames": series}, indent=2))


class _ModelInputs:
    """Fixed per-run quantities of the reconstruction model."""

    def __init__(self, disentangled: DisentangleResult, pre_inverse: VectorField2D | None):
        self.shape = disentangled.anatomy.shape
        self.spacing = disentangled.anatomy.spacing_mm
        self.anatomy = disentangled.anatomy.data
        self.params = disentangled.params
        self.base = pixel_coords(self.shape)
        self.pre = None if pre_inverse is None else np.stack([pre_inverse.dx, pre_inverse.dy], axis=-1)

    def mapped_coords(self, inv_disp) -> ad.Tensor:
        """Pixel coordinates pulled back through phi_t^-1 and then phi_0^-1."""
        q = ad.add(inv_disp, self.base)
        if self.pre is not None:
            q = ad.add(q, ad.grid_sample(self.pre, q))
        return q

    def reconstruct(self, inv_disp, A, B):
        """(g_h, g_v, anatomy_t, p_h, p_v) as flat tensors."""
        q = self.mapped_coords(inv_disp)
        a_t = ad.grid_sample(self.anatomy, q)
        p = self.params
        sx, sy = self.spacing
        p_h = tag_pattern_tensor(A, B, p.mu, p.phi_h, ad.mul(q[:, 1], sy))
        p_v = tag_pattern_tensor(A, B, p.mu, p.phi_v, ad.mul(q[:, 0], sx))
        return ad.mul(a_t, p_h), ad.mul(a_t, p_v), a_t, p_h, p_v


def reconstruct_frame(anatomy0: ScalarField2D, params: TagParams, fading: FadingState, inverse: VectorField2D,
                      pre_inverse: VectorField2D | None = None) -> tuple[ScalarField2D, ScalarField2D]:
    """Tagged images predicted for a frame from the disentangled reference and a motion."""
    if anatomy0 is None or params is None:
        raise ValueError("reconstruct_frame needs a disentangled anatomy and tag parameters")
    model = _ModelInputs(DisentangleResult(anatomy0, params, float("nan")), pre_inverse)
    inv = np.stack([inverse.dx.ravel(), inverse.dy.ravel()], axis=1)
    g_h, g_v, *_ = model.reconstruct(inv, fading.A, fading.B)
    h, w = model.shape
    return (ScalarField2D(g_h.data.reshape(h, w), model.spacing), ScalarField2D(g_v.data.reshape(h, w), model.spacing))


def track_frame(prev_net: VelocityNet | None, prev_fading: FadingState | None, g_t_h: ScalarField2D,
                g_t_v: ScalarField2D, disentangled: DisentangleResult, opts: TrackOptions | None = None,
                pre_inverse: VectorField2D | None = None) -> tuple[FrameResult, VelocityNet]:
    """Fit the velocity network and (A_t, B_t) to one frame; returns the best-loss iterate.

    The network is warm-started from ``prev_net`` (a fresh identity network
    when None).  Fading restarts from ``opts.fading_init`` unless
    ``opts.warm_start_fading`` is set and ``prev_fading`` is given.
    """
    opts = opts or TrackOptions()
    if disentangled is None:
        raise ValueError("track_frame needs a disentanglement result")
    shape = disentangled.anatomy.shape
    if g_t_h.shape != shape or g_t_v.shape != shape:
        raise ValueError(f"frame grid {g_t_h.shape} does not match disentangled grid {shape}")
    h, w = shape
    model = _ModelInputs(disentangled, pre_inverse)
    net = prev_net.copy() if prev_net is not None else VelocityNet(opts.seed, opts.hidden, opts.n_hidden_layers,
                                                                   opts.first_layer_scale)
    if opts.warm_start_fading and prev_fading is not None:
        a0, b0 = prev_fading.A, prev_fading.B
    else:
        a0 = b0 = opts.fading_init
    a_raw = ad.Tensor(softplus_inv(max(a0, 1e-6)), requires_grad=True)
    b_t = ad.Tensor(b0, requires_grad=True)
    opt = ad.Adam([(net.params, opts.lr_net), ([a_raw, b_t], opts.lr_fading)])

    sampler = VelocitySampler(shape, opts.velocity_stride)
    obs_h = g_t_h.data.ravel()
    obs_v = g_t_v.data.ravel()
    weight = None
    if opts.use_mask:
        weight = (disentangled.anatomy.data.ravel() > opts.mask_threshold).astype(np.float64)

    def residual(pred, obs):
        r = ad.sub(pred, obs)
        if weight is not None:
            r = ad.mul(r, weight)
        return ad.sum(ad.square(r))

    best_loss = np.inf
    best = None
    history = []
    running_min = []
    for it in range(opts.iterations + 1):
        opt.zero_grad()
        velocity = sampler(net)
        inv = exp_map_tensor(ad.neg(velocity), shape, opts.n_squaring)
        g_h, g_v, *_ = model.reconstruct(inv, ad.softplus(a_raw), b_t)
        loss = ad.add(residual(g_h, obs_h), residual(g_v, obs_v))
        val = loss.item()
        history.append(val)
        if val < best_loss:
            best_loss = val
            best = (net.state(), float(a_raw.data), float(b_t.data))
        running_min.append(best_loss)
        if it == opts.iterations:
            break
        win = opts.plateau_window
        if win and it >= win and running_min[-win - 1] - best_loss <= opts.plateau_rtol * abs(best_loss):
            break
        loss.backward()
        opt.step()

    net.load_state(best[0])
    fading = FadingState(A=float(np.logaddexp(0.0, best[1])), B=best[2])
    vel = velocity_field(net, h, w, disentangled.anatomy.spacing_mm, opts.velocity_stride)
    diffeo = exp_map(vel, opts.n_squaring)
    inv_flat = np.stack([diffeo.inverse.dx.ravel(), diffeo.inverse.dy.ravel()], axis=1)
    g_h, g_v, a_t, p_h, p_v = (t.data.reshape(h, w) for t in model.reconstruct(inv_flat, fading.A, fading.B))
    sp = disentangled.anatomy.spacing_mm
    result = FrameResult(
        diffeo=diffeo, fading=fading, loss=best_loss, loss_history=history,
        recon_h=ScalarField2D(g_h, sp), recon_v=ScalarField2D(g_v, sp), anatomy=ScalarField2D(a_t, sp),
        pattern_h=ScalarField2D(p_h, sp), pattern_v=ScalarField2D(p_v, sp),
        tag_params=disentangled.params, net_state=best[0],
    )
    return result, net


def track_sequence(seq: TaggedSequence, disentangled: DisentangleResult, opts: TrackOptions | None = None,
                   progress=None) -> LagrangianResult:
    """Track frame 0 (pre-imaging deformation) and then frames 1..T-1 with warm starts.

    Every returned map is referenced to frame 0.
    """
    opts = opts or TrackOptions()
    if seq.shape != disentangled.anatomy.shape:
        raise ValueError(f"sequence grid {seq.shape} does not match disentangled grid {disentangled.anatomy.shape}")
    frames = []
    first, _ = track_frame(None, None, seq.frame(0, "h"), seq.frame(0, "v"), disentangled, opts)
    frames.append(first)
    if progress:
        progress(0, first)
    pre_inverse = first.diffeo.inverse
    net = None
    fading = first.fading
    for t in range(1, seq.n_frames):
        res, net = track_frame(net, fading, seq.frame(t, "h"), seq.frame(t, "v"), disentangled, opts, pre_inverse)
        fading = res.fading
        frames.append(res)
        if progress:
            progress(t, res)
    return LagrangianResult(frames=frames, times_s=np.asarray(seq.times_s))
