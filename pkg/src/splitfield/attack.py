"""Attacks by an honest-but-curious server: surrogate gradient matching and the
scene-aided variant with camera-pose grid search."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np
from scipy import optimize

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import ssim, to_grayscale
from .nerf import ClientModel, ContractError, ModelConfig, NerfModel, ServerModel, sample_along_rays
from .optim import ATTACK_SCHEMES, Adam, RowAdam, attack_lr
from .protocol import PointsBatch
from .scene import CameraPose, D435I_HFOV, D435I_VFOV, generate_rays
from .training import render_from_embeddings

LG_FLOOR = 1e-12
TWO_PI = 2 * math.pi


@dataclass
class AttackConfig:
    scheme: str = "pow01"
    lr: float = 0.01
    rho: float = 0.01  # math.inf: gradient matching only
    color_layers: int | None = None  # None mirrors the victim client
    seed: int = 0
    key_quantum: float = 1e-4
    inner_steps: int = 1  # optimisation steps per observed exchange
    dummy_lr: float | None = None  # None: same schedule as the surrogate
    dummy_solver: str = "adam"  # "adam" or "lstsq" (exact per-ray fit before each step)
    total: int | None = None  # attack steps for the lr schedule; None = victim T

    def __post_init__(self):
        if self.scheme not in ATTACK_SCHEMES:
            raise ValueError(f"attack scheme must be one of {ATTACK_SCHEMES}")
        if not self.rho >= 0:
            raise ValueError("loss ratio rho must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.rho):
            d["rho"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "AttackConfig":
        d = dict(d or {})
        if isinstance(d.get("rho"), str):
            d["rho"] = float(d["rho"])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class StepResult:
    l_surr: float
    l_g: float
    l_dummy: float
    lam: float


class RayTable:
    """Dummy colors per observed ray.

    The server never learns which image or pixel a ray came from, so a ray is
    identified by its line: unit direction plus the point on the line closest to
    the origin, both quantized.
    """

    def __init__(self, rng: np.random.Generator, quantum: float = 1e-4):
        self.rng = rng
        self.quantum = quantum
        self.index: dict[bytes, int] = {}
        self.colors = np.zeros((0, 3))
        self.optim = RowAdam(3)

    def __len__(self):
        return self.colors.shape[0]

    def keys(self, positions: np.ndarray, directions: np.ndarray) -> np.ndarray:
        p0 = positions[:, 0, :]
        foot = p0 - (p0 * directions).sum(axis=1, keepdims=True) * directions
        return np.round(np.concatenate([directions, foot], axis=1) / self.quantum).astype(np.int64)

    def lookup(self, positions: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Row per ray, adding N(0,1)-initialised rows for rays not seen before."""
        keys = self.keys(positions, directions)
        rows = np.empty(keys.shape[0], dtype=np.int64)
        fresh = 0
        for i, k in enumerate(keys):
            kb = k.tobytes()
            row = self.index.get(kb)
            if row is None:
                row = self.index[kb] = len(self.index)
                fresh += 1
            rows[i] = row
        if fresh:
            self.colors = np.vstack([self.colors, self.rng.standard_normal((fresh, 3))])
            self.optim.grow(len(self.colors))
        return rows


class SurrogateAttack:
    """Fits a surrogate client and dummy labels so that the surrogate's cut
    gradients match the ones the victim sends back."""

    def __init__(self, model_cfg: ModelConfig, cfg: AttackConfig, total: int):
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.total = cfg.total or total
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
        self.surrogate = ClientModel(model_cfg, rng, cfg.color_layers)
        self.optim = Adam(self.surrogate.parameters(), lr=cfg.lr)
        self.table = RayTable(rng, cfg.key_quantum)
        self.t = 0
        self.history: list[StepResult] = []

    def lr_at(self, t: int) -> float:
        return attack_lr(self.cfg.scheme, self.cfg.lr, t, self.total)

    def losses(self, points: PointsBatch, emb: np.ndarray, grads: np.ndarray, dummy: Tensor):
        """(L_surr, L_g, L_dummy, lambda) as graph nodes for one observed exchange."""
        r, p = points.deltas.shape
        if emb.shape != grads.shape or emb.shape[0] != r * p:
            raise ContractError(f"trace shapes disagree: emb {emb.shape}, grads {grads.shape}, rays {r}x{p}")
        e = Tensor(emb, requires_grad=True)
        c_hat, _, _ = render_from_embeddings(self.surrogate, e, points.directions, points.deltas)
        l_dummy = ad.scale(ad.squared_norm(ad.sub(c_hat, dummy)), 1.0 / r)
        g_surr = ad.backward_as_graph(l_dummy, e)
        l_g = ad.norm(ad.sub(g_surr, Tensor(grads)))
        rho = self.cfg.rho
        lg, ld = float(l_g.value), float(l_dummy.value)
        if math.isinf(rho):
            return l_g, l_g, l_dummy, math.inf
        lam = 0.0 if lg < LG_FLOOR else rho * ld / lg
        total = l_dummy if lam == 0.0 else ad.add(ad.scale(l_g, lam), l_dummy)
        return total, l_g, l_dummy, lam

    def fit_dummies(self, points: PointsBatch, emb: np.ndarray, grads: np.ndarray) -> np.ndarray:
        """Per-ray dummy colors minimising ||g - g_surr|| with the surrogate held fixed.

        g_surr is affine in the dummy colors, so the fit is a 3-unknown least
        squares problem per ray; its Jacobian comes from four first-order passes.
        """
        r, p = points.deltas.shape
        d = emb.shape[1]

        def cut_grad(dummy):
            e = Tensor(emb, requires_grad=True)
            c_hat, _, _ = render_from_embeddings(self.surrogate, e, points.directions, points.deltas)
            ad.backward(ad.scale(ad.squared_norm(ad.sub(c_hat, Tensor(dummy))), 1.0 / r))
            return e.grad.reshape(r, p * d)

        base = cut_grad(np.zeros((r, 3)))
        cols = []
        for k in range(3):
            unit = np.zeros((r, 3))
            unit[:, k] = 1.0
            cols.append(cut_grad(unit) - base)
        a = np.stack(cols, axis=2)  # (r, p*d, 3)
        rhs = grads.reshape(r, p * d) - base
        ata = np.einsum("rik,ril->rkl", a, a)
        atb = np.einsum("rik,ri->rk", a, rhs)
        # pseudo-inverse: a saturated surrogate makes some rays' systems rank-deficient
        return np.einsum("rkl,rl->rk", np.linalg.pinv(ata), atb)

    def step(self, points: PointsBatch, emb: np.ndarray, grads: np.ndarray) -> StepResult:
        rows = self.table.lookup(points.positions, points.directions)
        if self.cfg.dummy_solver == "lstsq":
            self.table.colors[rows] = self.fit_dummies(points, emb, grads)
        self.t += 1
        lr_t = self.lr_at(self.t)
        dummy_lr = lr_t if self.cfg.dummy_lr is None else self.cfg.dummy_lr * lr_t / self.cfg.lr
        for _ in range(self.cfg.inner_steps):
            dummy = Tensor(self.table.colors[rows], requires_grad=True)
            self.surrogate.zero_grad()
            l_surr, l_g, l_dummy, lam = self.losses(points, emb, grads, dummy)
            if not np.isfinite(float(l_surr.value)):
                raise FloatingPointError(f"attack loss became non-finite at step {self.t}")
            ad.backward(l_surr)
            self.optim.step(lr_t)
            self.table.optim.step(self.table.colors, rows, dummy.grad, dummy_lr)
        res = StepResult(float(l_surr.value), float(l_g.value), float(l_dummy.value), lam)
        self.history.append(res)
        return res

    # server-hook signature: (points, embeddings msg, cut-gradient msg)
    def __call__(self, points, emb_msg, grad_msg):
        self.step(points, emb_msg.values, grad_msg.values)

    def compose(self, server: ServerModel) -> NerfModel:
        return NerfModel(server, self.surrogate)


def render_views(model: NerfModel, poses: list[CameraPose], width: int, height: int,
                 n_samples: int) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for pose in poses:
        o, d = generate_rays(pose, width, height)
        c, dep = model.render_rays(o, d, n_samples)
        out.append((c.reshape(height, width, 3), dep.reshape(height, width)))
    return out


# ---------------------------------------------------------------- pose search


@dataclass
class PoseSearchSpec:
    x: float = 0.1
    h: float = D435I_HFOV
    v: float = D435I_VFOV
    refine_x: float = 0.01
    refine_angle: float = math.radians(1.0)
    refine_max_evals: int = 600
    # intrinsics of the candidate cameras; these should match the leaked image
    hfov: float = D435I_HFOV
    vfov: float = D435I_VFOV

    def __post_init__(self):
        if not 0 < self.x <= 2:
            raise ValueError("location granularity must lie in (0, 2]")
        if not (0 < self.h <= TWO_PI and 0 < self.v <= math.pi):
            raise ValueError("angular steps must lie in (0, 2pi] and (0, pi]")


def _axis(lo: float, hi: float, step: float) -> np.ndarray:
    n = math.ceil(round((hi - lo) / step, 9))
    return np.minimum(lo + step * np.arange(n + 1), hi)


def search_axes(spec: PoseSearchSpec):
    loc = _axis(-1.0, 1.0, spec.x)
    return loc, _axis(0.0, TWO_PI, spec.h), _axis(0.0, math.pi, spec.v)


def search_space_size(spec: PoseSearchSpec) -> int:
    """(ceil(2/x)+1)^3 (ceil(2pi/h)+1) (ceil(pi/v)+1)."""
    c = lambda span, step: math.ceil(round(span / step, 9)) + 1  # noqa: E731
    return c(2.0, spec.x) ** 3 * c(TWO_PI, spec.h) * c(math.pi, spec.v)


def enumerate_poses(spec: PoseSearchSpec):
    """Candidate poses in scan order: x, y, z, then phi, then theta (innermost)."""
    hfov, vfov = spec.hfov, spec.vfov
    loc, phis, thetas = search_axes(spec)
    for x, y, z, phi, theta in itertools.product(loc, loc, loc, phis, thetas):
        yield CameraPose(np.array([x, y, z]), float(phi), float(theta), hfov, vfov)


@dataclass
class SearchResult:
    pose: CameraPose
    score: float
    coarse_pose: CameraPose
    coarse_score: float
    log: list = field(default_factory=list)


def _score(render_fn, pose, target_gray) -> float:
    return ssim(to_grayscale(render_fn(pose)), target_gray)


def _refine(render_fn, target_gray, start: CameraPose, start_score: float, spec: PoseSearchSpec):
    """Nelder-Mead on (x, y, z, phi, theta) from a simplex of half grid steps.

    Coordinates are scaled by the refinement floors, so the stopping tolerance
    is a tenth of ``refine_x`` in position and of ``refine_angle`` in angle.
    """
    floor = np.array([spec.refine_x] * 3 + [spec.refine_angle] * 2)
    x0 = np.array([*start.position, start.phi, start.theta]) / floor

    def pose_of(u):
        v = u * floor
        return CameraPose(np.clip(v[:3], -1, 1), float(v[3] % TWO_PI), float(np.clip(v[4], 0, math.pi)),
                          start.hfov, start.vfov)

    step = np.array([spec.x / 2] * 3 + [min(spec.h, math.pi) / 2, min(spec.v, math.pi) / 2]) / floor
    simplex = np.vstack([x0, x0 + np.diag(step)])
    res = optimize.minimize(lambda u: -_score(render_fn, pose_of(u), target_gray), x0, method="Nelder-Mead",
                            options={"initial_simplex": simplex, "xatol": 0.1, "fatol": 1e-6,
                                     "maxfev": spec.refine_max_evals})
    if -res.fun > start_score:
        return pose_of(res.x), float(-res.fun)
    return start, start_score


def pose_grid_search(leaked: np.ndarray, render_fn: Callable[[CameraPose], np.ndarray], spec: PoseSearchSpec,
                     refine: bool = True, keep_log: bool = True, stride: int = 1) -> SearchResult:
    """Best SSIM-gray match for a leaked color image over the coarse pose grid.

    Ties keep the first candidate in scan order. ``render_fn`` maps a pose to a
    color image at the leaked image's resolution, or to the same pixel lattice
    when ``stride`` > 1 (see ``model_renderer``).
    """
    target = to_grayscale(np.asarray(leaked)[::stride, ::stride])
    best_pose, best_score = None, -math.inf
    log = []
    for i, pose in enumerate(enumerate_poses(spec)):
        s = _score(render_fn, pose, target)
        if keep_log:
            log.append((i, *pose.position.tolist(), pose.phi, pose.theta, s))
        if s > best_score:
            best_pose, best_score = pose, s
    coarse_pose, coarse_score = best_pose, best_score
    if refine:
        best_pose, best_score = _refine(render_fn, target, coarse_pose, coarse_score, spec)
    return SearchResult(best_pose, best_score, coarse_pose, coarse_score, log)


def lattice(width: int, height: int, stride: int = 1) -> tuple[np.ndarray, tuple[int, int]]:
    """Flat ids of every ``stride``-th pixel in both axes, and the lattice shape."""
    rows, cols = np.arange(0, height, stride), np.arange(0, width, stride)
    return (rows[:, None] * width + cols[None, :]).ravel(), (rows.size, cols.size)


def model_renderer(model: NerfModel, width: int, height: int, n_samples: int, stride: int = 1):
    """Pose -> color image of the full-resolution camera, sampled on a pixel lattice."""
    pixels, shape = lattice(width, height, stride)

    def render(pose: CameraPose) -> np.ndarray:
        o, d = generate_rays(pose, width, height, pixels)
        c, _ = model.render_rays(o, d, n_samples)
        return c.reshape(shape + (3,))
    return render


def scene_aided_finetune(model: NerfModel, leaked: list[tuple[np.ndarray, CameraPose]], steps: int,
                         n_rays: int = 64, n_samples: int = 32, lr: float = 0.01, seed: int = 0) -> NerfModel:
    """Supervised fine-tuning of the surrogate (client) half on leaked pixels.

    The server half stays frozen. With no leaked images this is a no-op.
    """
    if not leaked or steps <= 0:
        return model
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    origins, dirs, labels = [], [], []
    for img, pose in leaked:
        h, w = img.shape[:2]
        o, d = generate_rays(pose, w, h)
        origins.append(o)
        dirs.append(d)
        labels.append(np.asarray(img, dtype=float).reshape(-1, 3))
    origins, dirs, labels = map(np.concatenate, (origins, dirs, labels))
    optim = Adam(model.client.parameters(), lr=lr)
    for t in range(steps):
        idx = rng.integers(0, labels.shape[0], size=n_rays)
        s = sample_along_rays(origins[idx], dirs[idx], n_samples, rng)
        with ad.no_grad():
            emb = model.server(s.positions.reshape(-1, 3))
        model.client.zero_grad()
        c_hat, _, _ = model.render_samples(s, Tensor(emb.value))
        loss = ad.scale(ad.squared_norm(ad.sub(c_hat, Tensor(labels[idx]))), 1.0 / n_rays)
        ad.backward(loss)
        optim.step(lr * 0.1 ** (t / steps))
    return model


def replay_trace(path, cfg: AttackConfig):
    """Run the surrogate attack over a recorded trace file; returns ``(attack, train_config)``."""
    from .training import TrainConfig
    from .transport import iter_trace

    config, exchanges = iter_trace(path)
    tc = TrainConfig.from_dict(config)
    atk = SurrogateAttack(tc.model, cfg, tc.iterations)
    for points, emb, grads in exchanges:
        atk.step(points, emb.values, grads.values)
    return atk, tc
