"""Compact radiance field split into a server front (encoding + hidden layer) and a
client back (density head + color MLP), with alpha-composited rendering."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

T_NEAR = 0.05
T_FAR = 3.5
BOUND_TOL = 1e-9


class ContractError(ValueError):
    """Inputs violate an operation's precondition."""


# ---------------------------------------------------------------- encoding


@dataclass(frozen=True)
class PosEncodingConfig:
    n_freqs: int = 10
    include_identity: bool = True

    def __post_init__(self):
        if self.n_freqs < 1:
            raise ContractError("n_freqs must be >= 1")

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.n_freqs + int(self.include_identity))


def encode(u, cfg: PosEncodingConfig) -> np.ndarray:
    """Frequency features per component: [u?, sin(2^0 pi u), cos(2^0 pi u), sin(2^1 pi u), ...].

    Works on a single vector or a batch ``(N, k)``; output is grouped by component.
    """
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    freqs = (2.0 ** np.arange(cfg.n_freqs)) * np.pi
    ang = u[:, :, None] * freqs  # (N, k, L)
    sc = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(u.shape[0], u.shape[1], -1)
    if cfg.include_identity:
        sc = np.concatenate([u[:, :, None], sc], axis=-1)
    out = sc.reshape(u.shape[0], -1)
    return out[0] if single else out


# ---------------------------------------------------------------- models


@dataclass
class ModelConfig:
    width: int = 64  # server hidden width
    cut_dim: int = 64  # d, the cut-layer embedding size
    geo_feat: int = 15
    color_width: int = 64
    color_layers: int = 3
    pos_freqs: int = 10
    dir_freqs: int = 4
    encoding: str = "frequency"  # or "grid"
    grid_res: int = 16
    grid_feat: int = 8

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def pos_cfg(self) -> PosEncodingConfig:
        return PosEncodingConfig(self.pos_freqs, True)

    @property
    def dir_cfg(self) -> PosEncodingConfig:
        return PosEncodingConfig(self.dir_freqs, True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


class _Module:
    params: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            self.params[k].value[...] = v

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class ServerModel(_Module):
    """Location encoding followed by one hidden layer; emits the cut embedding."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        p = {}
        if cfg.encoding == "grid":
            cells = cfg.grid_res ** 3
            p["grid"] = Tensor(rng.uniform(-1e-1, 1e-1, size=(cells, cfg.grid_feat)), True, "grid")
            in_dim = cfg.grid_feat
        elif cfg.encoding == "frequency":
            in_dim = cfg.pos_cfg.out_dim(3)
        else:
            raise ContractError(f"unknown encoding {cfg.encoding!r}")
        p["w1"] = Tensor(glorot(rng, in_dim, cfg.width), True, "w1")
        p["b1"] = Tensor(np.zeros(cfg.width), True, "b1")
        p["w2"] = Tensor(glorot(rng, cfg.width, cfg.cut_dim), True, "w2")
        p["b2"] = Tensor(np.zeros(cfg.cut_dim), True, "b2")
        self.params = p

    def features(self, x: np.ndarray) -> Tensor:
        if self.cfg.encoding == "frequency":
            return Tensor(encode(x, self.cfg.pos_cfg))
        return _trilinear(self.params["grid"], x, self.cfg.grid_res)

    def forward(self, positions) -> Tensor:
        x = np.asarray(positions, dtype=float).reshape(-1, 3)
        if x.size and np.abs(x).max() > 1.0 + BOUND_TOL:
            raise ContractError(f"sample position outside [-1,1]^3 (max |x| = {np.abs(x).max():.6g})")
        h = ad.relu(dense(self.features(x), self.params["w1"], self.params["b1"]))
        return ad.relu(dense(h, self.params["w2"], self.params["b2"]))

    __call__ = forward


def _trilinear(grid: Tensor, x: np.ndarray, res: int) -> Tensor:
    g = (np.clip(x, -1.0, 1.0) + 1.0) * 0.5 * (res - 1)
    i0 = np.minimum(np.floor(g).astype(np.int64), res - 2)
    f = g - i0
    n, feat = x.shape[0], grid.shape[1]
    out = None
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                idx = ((i0[:, 0] + dx) * res + (i0[:, 1] + dy)) * res + (i0[:, 2] + dz)
                w = (f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1]) * (
                    f[:, 2] if dz else 1 - f[:, 2]
                )
                term = ad.mul(ad.take(grid, idx), Tensor(np.repeat(w[:, None], feat, axis=1)))
                out = term if out is None else ad.add(out, term)
    assert out is not None and out.shape == (n, feat)
    return out


class ClientModel(_Module):
    """Density head (softplus sigma + geometry feature) and an MLP color head (sigmoid)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, color_layers: int | None = None):
        self.cfg = cfg
        self.color_layers = color_layers or cfg.color_layers
        if self.color_layers < 2:
            raise ContractError("color MLP needs at least 2 layers")
        d, gf, cw = cfg.cut_dim, cfg.geo_feat, cfg.color_width
        dir_dim = cfg.dir_cfg.out_dim(3)
        p = {
            "ws": Tensor(glorot(rng, d, 1), True, "ws"),
            "bs": Tensor(np.zeros(1), True, "bs"),
            "wz": Tensor(glorot(rng, d, gf), True, "wz"),
            "bz": Tensor(np.zeros(gf), True, "bz"),
            "c0z": Tensor(glorot(rng, gf + dir_dim, cw)[:gf], True, "c0z"),
            "c0d": Tensor(glorot(rng, gf + dir_dim, cw)[gf:], True, "c0d"),
            "c0b": Tensor(np.zeros(cw), True, "c0b"),
        }
        for i in range(1, self.color_layers - 1):
            p[f"c{i}w"] = Tensor(glorot(rng, cw, cw), True, f"c{i}w")
            p[f"c{i}b"] = Tensor(np.zeros(cw), True, f"c{i}b")
        last = self.color_layers - 1
        p[f"c{last}w"] = Tensor(glorot(rng, cw, 3), True, f"c{last}w")
        p[f"c{last}b"] = Tensor(np.zeros(3), True, f"c{last}b")
        self.params = p

    def forward(self, emb: Tensor, dir_enc: np.ndarray) -> tuple[Tensor, Tensor]:
        p = self.params
        if emb.value.ndim != 2 or emb.shape[1] != self.cfg.cut_dim:
            raise ContractError(f"embedding shape {emb.shape} does not match cut dim {self.cfg.cut_dim}")
        if dir_enc.shape[0] != emb.shape[0]:
            raise ContractError(f"{dir_enc.shape[0]} direction rows for {emb.shape[0]} embeddings")
        sigma = ad.softplus(dense(emb, p["ws"], p["bs"]))
        z = dense(emb, p["wz"], p["bz"])
        h = ad.relu(ad.add(ad.add(ad.matmul(z, p["c0z"]), ad.matmul(Tensor(dir_enc), p["c0d"])), p["c0b"]))
        for i in range(1, self.color_layers - 1):
            h = ad.relu(dense(h, p[f"c{i}w"], p[f"c{i}b"]))
        last = self.color_layers - 1
        color = ad.sigmoid(dense(h, p[f"c{last}w"], p[f"c{last}b"]))
        return ad.reshape(sigma, (emb.shape[0],)), color

    __call__ = forward


# ---------------------------------------------------------------- rendering


def composite(sigma, color, deltas, t_mid):
    """Front-to-back alpha compositing of ``(R, P)`` samples.

    Returns ``(C_hat (R,3), D_hat (R,), weights (R,P))`` as Tensors.
    """
    sigma, color = ad.as_tensor(sigma), ad.as_tensor(color)
    deltas = np.asarray(deltas, dtype=float)
    t_mid = np.asarray(t_mid, dtype=float)
    r, p = sigma.shape
    if color.shape != (r, p, 3) or deltas.shape != (r, p) or t_mid.shape != (r, p):
        raise ContractError(
            f"composite: sigma {sigma.shape}, color {color.shape}, deltas {deltas.shape}, t {t_mid.shape}"
        )
    tau = ad.mul(sigma, Tensor(deltas))
    alpha = ad.sub(Tensor(np.ones((r, p))), ad.exp(ad.scale(tau, -1.0)))
    # exclusive prefix sum along the ray, as a matmul with a strictly upper-triangular ones matrix
    upper = np.triu(np.ones((p, p)), k=1)
    trans = ad.exp(ad.scale(ad.matmul(tau, Tensor(upper)), -1.0))
    w = ad.mul(trans, alpha)
    wc = ad.mul(ad.broadcast_to(ad.reshape(w, (r, p, 1)), (r, p, 3)), color)
    c_hat = ad.sum(wc, axis=1)
    d_hat = ad.sum(ad.mul(w, Tensor(t_mid)), axis=1)
    return c_hat, d_hat, w


def transmittance(sigma: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    tau = np.asarray(sigma) * np.asarray(deltas)
    # exclusive prefix sum; ``cumsum - tau`` would round upwards by an ulp now and then
    excl = np.concatenate([np.zeros(tau.shape[:-1] + (1,)), np.cumsum(tau, axis=-1)[..., :-1]], axis=-1)
    return np.exp(-excl)


def recon_loss(c_hat, c_gt) -> Tensor:
    """Mean over rays of the squared L2 color error."""
    c_hat = ad.as_tensor(c_hat)
    c_gt = np.asarray(c_gt, dtype=float)
    if c_hat.shape != c_gt.shape or c_hat.shape[0] < 1:
        raise ContractError(f"recon_loss: {c_hat.shape} vs {c_gt.shape}")
    return ad.scale(ad.squared_norm(ad.sub(c_hat, Tensor(c_gt))), 1.0 / c_hat.shape[0])


# ---------------------------------------------------------------- sampling


@dataclass
class RaySamples:
    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3) unit
    positions: np.ndarray  # (R, P, 3)
    deltas: np.ndarray  # (R, P)
    t_mid: np.ndarray  # (R, P) segment midpoints
    pixel: np.ndarray = field(default=None)  # (R,) flat ids, optional

    @property
    def n_rays(self) -> int:
        return self.positions.shape[0]

    @property
    def n_samples(self) -> int:
        return self.positions.shape[1]

    def dir_per_point(self) -> np.ndarray:
        return np.repeat(self.directions, self.n_samples, axis=0)


def box_exit(origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Distance along each ray to where it leaves [-1,1]^3 (origins assumed inside)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(dirs > 0, 1.0, -1.0)
        t = (bound - origins) / dirs
        t = np.where(np.abs(dirs) < 1e-12, np.inf, t)
    return np.maximum(t.min(axis=1), 0.0)


def sample_along_rays(origins, dirs, n_samples: int, rng: np.random.Generator | None = None,
                      t_near: float = T_NEAR, t_far: float = T_FAR) -> RaySamples:
    """Stratified samples clipped to the scene box; ``rng=None`` places samples at bin centres.

    Segment edges sit halfway between consecutive samples, so the deltas tile
    the clipped interval exactly.
    """
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    r = origins.shape[0]
    far = np.minimum(t_far, box_exit(origins, dirs))
    # degenerate rays (camera on the boundary looking out) get a vanishing interval
    far = np.maximum(far, t_near + 1e-6)
    span = (far - t_near)[:, None]
    u = np.full((r, n_samples), 0.5) if rng is None else rng.uniform(size=(r, n_samples))
    s = t_near + (np.arange(n_samples)[None, :] + u) / n_samples * span
    edges = np.concatenate([np.full((r, 1), t_near), 0.5 * (s[:, 1:] + s[:, :-1]), far[:, None]], axis=1)
    deltas = np.diff(edges, axis=1)
    t_mid = 0.5 * (edges[:, 1:] + edges[:, :-1])
    pos = origins[:, None, :] + s[:, :, None] * dirs[:, None, :]
    pos = np.clip(pos, -1.0, 1.0)
    return RaySamples(origins, dirs, pos, deltas, t_mid)


class NerfModel:
    """Server front + client back composed into one renderer."""

    def __init__(self, server: ServerModel, client: ClientModel):
        self.server = server
        self.client = client

    def parameters(self) -> list[Tensor]:
        return self.server.parameters() + self.client.parameters()

    def render_samples(self, samples: RaySamples, emb: Tensor | None = None):
        if emb is None:
            emb = self.server(samples.positions.reshape(-1, 3))
        dir_enc = encode(samples.dir_per_point(), self.client.cfg.dir_cfg)
        sigma, color = self.client(emb, dir_enc)
        r, p = samples.n_rays, samples.n_samples
        return composite(
            ad.reshape(sigma, (r, p)), ad.reshape(color, (r, p, 3)), samples.deltas, samples.t_mid
        )

    def render_rays(self, origins, dirs, n_samples: int, chunk: int = 2048):
        """Deterministic (bin-centre) render of many rays; returns numpy color and depth."""
        cols, deps = [], []
        with ad.no_grad():
            for i in range(0, origins.shape[0], chunk):
                s = sample_along_rays(origins[i : i + chunk], dirs[i : i + chunk], n_samples)
                c, d, _ = self.render_samples(s)
                cols.append(c.value)
                deps.append(d.value)
        return np.concatenate(cols), np.concatenate(deps)


def save_model(path, model: NerfModel) -> None:
    arrays = {f"server/{k}": v for k, v in model.server.state_dict().items()}
    arrays.update({f"client/{k}": v for k, v in model.client.state_dict().items()})
    np.savez(path, **arrays)


def load_state(path, prefix: str) -> dict[str, np.ndarray]:
    with np.load(path) as z:
        return {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith(prefix + "/")}
