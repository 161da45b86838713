"""Split training protocol (client holds labels, server holds the front of the model)
and the single-process reference trainer that runs the same math."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .defense import DefenseConfig, LabelNoiseConfig, NoiseSchedule, perturb_gradients, perturb_labels
from .nerf import ClientModel, ModelConfig, NerfModel, RaySamples, ServerModel, encode, recon_loss, composite, \
    sample_along_rays
from .optim import Adam, exp_decay_lr
from .protocol import Control, CutGradientsBatch, EmbeddingsBatch, PointsBatch, ProtocolError
from .scene import Dataset, generate_rays
from .transport import Transport, memory_pair, tcp_accept, tcp_connect, tcp_listen

log = logging.getLogger(__name__)

STREAMS = {"sampler": 0, "init-server": 1, "init-client": 2, "defense-noise": 3, "attack": 4, "eval": 5}
RECV_TIMEOUT = 600.0


class NumericError(RuntimeError):
    pass


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible generator for one named purpose."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name]]))


@dataclass
class TrainConfig:
    iterations: int = 2000
    n_rays: int = 64
    n_samples: int = 32
    lr: float = 0.01
    lr_final_ratio: float = 0.1
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.defense, dict):
            self.defense = DefenseConfig.from_dict(self.defense)
        for name in ("iterations", "n_rays", "n_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def lr_at(self, t: int) -> float:
        return exp_decay_lr(self.lr, t, self.iterations, self.lr_final_ratio)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# ---------------------------------------------------------------- data


class RaySampler:
    """Uniform random pixels from a dataset, with stratified samples along each ray."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        origins, dirs = [], []
        for pose in dataset.poses:
            o, d = generate_rays(pose, dataset.width, dataset.height)
            origins.append(o)
            dirs.append(d)
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.labels = dataset.pixels()

    def sample(self, rng: np.random.Generator, n_rays: int, n_samples: int) -> tuple[RaySamples, np.ndarray]:
        idx = rng.integers(0, self.labels.shape[0], size=n_rays)
        s = sample_along_rays(self.origins[idx], self.dirs[idx], n_samples, rng)
        s.pixel = idx
        return s, self.labels[idx]


def render_from_embeddings(client: ClientModel, emb: Tensor, directions: np.ndarray, deltas: np.ndarray,
                           t_mid: np.ndarray | None = None):
    """Client half of the forward pass: embeddings of (R*P) points -> composited color/depth."""
    r, p = deltas.shape
    dir_enc = encode(np.repeat(directions, p, axis=0), client.cfg.dir_cfg)
    sigma, color = client(emb, dir_enc)
    if t_mid is None:
        t_mid = np.zeros((r, p))
    return composite(ad.reshape(sigma, (r, p)), ad.reshape(color, (r, p, 3)), deltas, t_mid)


def _check_loss(value: float, t: int):
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} at iteration {t}")


# ---------------------------------------------------------------- sessions


@dataclass
class SplitSession:
    role: str  # "client" | "server"
    transport: Transport
    config: TrainConfig | None = None
    t: int = 0
    model: ServerModel | ClientModel | None = None
    optim: Adam | None = None
    rngs: dict = field(default_factory=dict)
    hooks: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    sigma_log: list = field(default_factory=list)
    wire_bytes: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.config.iterations


def client_session(transport: Transport, config: TrainConfig) -> SplitSession:
    s = SplitSession("client", transport, config)
    s.rngs = {k: rng_stream(config.seed, k) for k in ("sampler", "defense-noise")}
    s.model = ClientModel(config.model, rng_stream(config.seed, "init-client"))
    s.optim = Adam(s.model.parameters(), lr=config.lr)
    return s


def server_session(transport: Transport, hooks=()) -> SplitSession:
    return SplitSession("server", transport, hooks=list(hooks))


def _configure_server(session: SplitSession, config: TrainConfig):
    session.config = config
    session.model = ServerModel(config.model, rng_stream(config.seed, "init-server"))
    session.optim = Adam(session.model.parameters(), lr=config.lr)


def _expect(msg, kind, t: int):
    if not isinstance(msg, kind) or type(msg) is not kind:
        raise ProtocolError(f"expected {kind.__name__} for iteration {t}, got {type(msg).__name__}")
    if msg.t != t:
        raise ProtocolError(f"iteration mismatch: expected {t}, peer sent {msg.t}")


def client_iteration(session: SplitSession, samples: RaySamples, labels: np.ndarray) -> float:
    """One client-driven exchange: points out, embeddings in, cut gradients out."""
    if session.role != "client":
        raise ProtocolError("client_iteration needs a client session")
    cfg, t, tr = session.config, session.t, session.transport
    sent_before, recv_before = tr.bytes_sent, tr.bytes_received
    tr.send(PointsBatch(t, samples.positions, samples.directions, samples.deltas))
    reply = tr.recv(timeout=RECV_TIMEOUT)
    _expect(reply, EmbeddingsBatch, t)
    n_pts = samples.n_rays * samples.n_samples
    if reply.values.shape != (n_pts, cfg.model.cut_dim):
        raise ProtocolError(f"embedding block {reply.values.shape} != {(n_pts, cfg.model.cut_dim)}")

    if cfg.defense.mode == "noisy-label":
        labels = perturb_labels(labels, LabelNoiseConfig(cfg.defense.sigma_l), session.rngs["defense-noise"])
    emb = Tensor(reply.values, requires_grad=True)
    session.model.zero_grad()
    c_hat, _, _ = render_from_embeddings(session.model, emb, samples.directions, samples.deltas, samples.t_mid)
    loss = recon_loss(c_hat, labels)
    _check_loss(float(loss.value), t)
    ad.backward(loss)
    grads = emb.grad
    if cfg.defense.mode == "s2nerf":
        sched = NoiseSchedule(cfg.defense.c, cfg.defense.r, cfg.iterations)
        grads, sigma = perturb_gradients(grads, t, sched, session.rngs["defense-noise"])
        session.sigma_log.append(sigma)
        log.debug("iteration %d sigma_t=%.6g", t, sigma)
    session.optim.step(cfg.lr_at(t))
    tr.send(CutGradientsBatch(t, grads))
    session.wire_bytes.append((tr.bytes_sent - sent_before) + (tr.bytes_received - recv_before))
    session.losses.append(float(loss.value))
    session.t += 1
    return float(loss.value)


def server_iteration(session: SplitSession) -> bool:
    """Serve one exchange. Returns False once the client has sent stop."""
    if session.role != "server":
        raise ProtocolError("server_iteration needs a server session")
    tr = session.transport
    msg = tr.recv(timeout=RECV_TIMEOUT)
    if isinstance(msg, Control):
        if msg.kind == "config":
            _configure_server(session, TrainConfig.from_dict(msg.config))
            return True
        if msg.kind == "stop":
            return False
        return True
    if session.model is None:
        raise ProtocolError("points arrived before the session was configured")
    t = session.t
    _expect(msg, PointsBatch, t)
    session.model.zero_grad()
    emb = session.model(msg.positions.reshape(-1, 3))
    out = EmbeddingsBatch(t, emb.value)
    tr.send(out)
    gmsg = tr.recv(timeout=RECV_TIMEOUT)
    _expect(gmsg, CutGradientsBatch, t)
    if gmsg.values.shape != emb.shape:
        raise ProtocolError(f"cut gradient block {gmsg.values.shape} != {emb.shape}")
    ad.backward(ad.sum(ad.mul(emb, Tensor(gmsg.values))))
    session.optim.step(session.config.lr_at(t))
    for hook in session.hooks:
        hook(msg, out, gmsg)
    session.t += 1
    return True


def serve(session: SplitSession) -> SplitSession:
    while server_iteration(session):
        pass
    return session


# ---------------------------------------------------------------- trainers


@dataclass
class TrainResult:
    model: NerfModel
    losses: list
    wire_bytes: list = field(default_factory=list)
    sigma_log: list = field(default_factory=list)
    aborted: bool = False
    error: str | None = None
    frames: int = 0


def train_monolithic(config: TrainConfig, dataset: Dataset,
                     callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Centralised reference trainer; same streams and math as the split protocol."""
    server = ServerModel(config.model, rng_stream(config.seed, "init-server"))
    client = ClientModel(config.model, rng_stream(config.seed, "init-client"))
    s_opt = Adam(server.parameters(), lr=config.lr)
    c_opt = Adam(client.parameters(), lr=config.lr)
    sampler_rng = rng_stream(config.seed, "sampler")
    noise_rng = rng_stream(config.seed, "defense-noise")
    sampler = RaySampler(dataset)
    losses, sigmas = [], []
    for t in range(config.iterations):
        samples, labels = sampler.sample(sampler_rng, config.n_rays, config.n_samples)
        if config.defense.mode == "noisy-label":
            labels = perturb_labels(labels, LabelNoiseConfig(config.defense.sigma_l), noise_rng)
        server.zero_grad()
        client.zero_grad()
        emb = server(samples.positions.reshape(-1, 3))
        cut = emb
        if config.defense.mode == "s2nerf":
            cut = Tensor(emb.value, requires_grad=True)
        c_hat, _, _ = render_from_embeddings(client, cut, samples.directions, samples.deltas, samples.t_mid)
        loss = recon_loss(c_hat, labels)
        _check_loss(float(loss.value), t)
        ad.backward(loss)
        if config.defense.mode == "s2nerf":
            sched = NoiseSchedule(config.defense.c, config.defense.r, config.iterations)
            g, sigma = perturb_gradients(cut.grad, t, sched, noise_rng)
            sigmas.append(sigma)
            ad.backward(ad.sum(ad.mul(emb, Tensor(g))))
        lr_t = config.lr_at(t)
        c_opt.step(lr_t)
        s_opt.step(lr_t)
        losses.append(float(loss.value))
        if callback:
            callback(t, losses[-1])
    return TrainResult(NerfModel(server, client), losses, sigma_log=sigmas)


def run_client(session: SplitSession, dataset: Dataset,
               callback: Callable[[int, float], None] | None = None) -> SplitSession:
    cfg = session.config
    tr = session.transport
    tr.send(Control("config", cfg.to_dict()))
    sampler = RaySampler(dataset)
    while session.t < cfg.iterations:
        samples, labels = sampler.sample(session.rngs["sampler"], cfg.n_rays, cfg.n_samples)
        loss = client_iteration(session, samples, labels)
        if callback:
            callback(session.t - 1, loss)
    tr.send(Control("stop"))
    return session


def train_split(config: TrainConfig, dataset: Dataset, transport: str = "memory", hooks=(),
                callback: Callable[[int, float], None] | None = None, address=None) -> TrainResult:
    """Run both parties; the server lives in a background thread.

    ``transport`` is ``memory`` (lossless objects), ``codec`` (in-process bytes
    through the f32 codec) or ``tcp``. With ``address=(host, port)`` and
    ``tcp`` the client connects to an external server instead (see ``serve``).
    """
    server_box: dict = {}

    def server_main(tr):
        try:
            server_box["session"] = serve(server_session(tr, hooks))
        except BaseException as exc:  # surfaced to the caller below
            server_box["error"] = exc
        finally:
            tr.close()

    thread = None
    listener = None
    if transport in ("memory", "codec"):
        client_tr, server_tr = memory_pair(codec=(transport == "codec"))
        thread = threading.Thread(target=server_main, args=(server_tr,), daemon=True)
        thread.start()
    elif transport == "tcp":
        if address is None:
            listener = tcp_listen()
            host, port = listener.getsockname()

            def accept_and_serve():
                try:
                    tr = tcp_accept(listener, timeout=30)
                except BaseException as exc:
                    server_box["error"] = exc
                    return
                server_main(tr)

            thread = threading.Thread(target=accept_and_serve, daemon=True)
            thread.start()
        else:
            host, port = address
        client_tr = tcp_connect(host, port)
    else:
        raise ValueError(f"unknown transport {transport!r}")

    session = client_session(client_tr, config)
    error = None
    try:
        run_client(session, dataset, callback)
    except NumericError:
        raise
    except (ConnectionError, TimeoutError, ProtocolError) as exc:
        error = exc
    finally:
        # closing first unblocks a server still waiting on this client
        client_tr.close()
        if thread is not None:
            thread.join(timeout=RECV_TIMEOUT)
        if listener is not None:
            listener.close()
    server_error = server_box.get("error")
    if server_error is not None and (error is None or not isinstance(server_error, ConnectionError)):
        error = server_error  # the server's own failure is the root cause of the client's disconnect
    if isinstance(error, NumericError):
        raise error
    server_sess = server_box.get("session")
    external = thread is None
    if error is None and external:
        # the server half lives in another process; only the client side is returned
        return TrainResult(NerfModel(None, session.model), session.losses, session.wire_bytes,
                           session.sigma_log, frames=client_tr.frames_sent + client_tr.frames_received)
    if server_sess is None or error is not None:
        server_model = None if server_sess is None else server_sess.model
        return TrainResult(NerfModel(server_model, session.model), session.losses, session.wire_bytes,
                           session.sigma_log, aborted=True, error=repr(error), frames=client_tr.frames_sent)
    return TrainResult(NerfModel(server_sess.model, session.model), session.losses, session.wire_bytes,
                       session.sigma_log, frames=client_tr.frames_sent + client_tr.frames_received)
