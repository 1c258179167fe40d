"""Toy rectified flow over voxel latents and sampling from an injected shape prior.

Time runs from data (t = 0) to noise (t = 1) along straight paths
``x(t) = (1 - t) * data + t * noise``; the velocity is ``noise - data``.

The velocity network is a small residual MLP on the flattened latent. It
produces a data estimate ``D(x, t)`` and the velocity is read off as
``(x - D) / t``, which keeps the network output well scaled near t = 0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .voxels import LatentGrid

CHECKPOINT_VERSION = 1


class FlowDivergence(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"flow training diverged at step {step}")
        self.step = step


@dataclass(frozen=True)
class FlowConfig:
    hidden: int = 256
    blocks: int = 2
    time_dim: int = 16
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 128
    seed: int = 0


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = 2.0 ** np.arange(dim // 2)
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1)


def _layout(dim: int, cfg: FlowConfig) -> list[tuple[str, tuple[int, ...]]]:
    h, e = cfg.hidden, cfg.time_dim
    shapes = [("w_in", (dim, h)), ("w_t", (e, h)), ("b_in", (h,))]
    for k in range(cfg.blocks):
        shapes += [(f"w{k}", (h, h)), (f"u{k}", (e, h)), (f"b{k}", (h,))]
    shapes += [("w_out", (h, dim)), ("b_out", (dim,))]
    return shapes


@dataclass
class FlowModel:
    latent_shape: tuple[int, int, int, int]
    config: FlowConfig
    params: np.ndarray
    loss_history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return int(np.prod(self.latent_shape))

    @classmethod
    def init(cls, latent_shape: Sequence[int], config: FlowConfig | None = None, rng=None) -> FlowModel:
        cfg = config or FlowConfig()
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
        shape = tuple(int(s) for s in latent_shape)
        dim = int(np.prod(shape))
        parts = []
        for name, shp in _layout(dim, cfg):
            if name.startswith("b") or name == "w_out":
                parts.append(np.zeros(shp))
            else:
                parts.append(rng.normal(0.0, 1.0 / math.sqrt(shp[0]), shp))
        return cls(shape, cfg, np.concatenate([p.ravel() for p in parts]))

    def _views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for name, shp in _layout(self.dim, self.config):
            size = int(np.prod(shp))
            out[name] = flat[pos:pos + size].reshape(shp)
            pos += size
        return out

    def _forward(self, x: np.ndarray, t: np.ndarray, keep: bool = False):
        p = self._views(self.params)
        e = time_embedding(t, self.config.time_dim)
        z0 = x @ p["w_in"] + e @ p["w_t"] + p["b_in"]
        h, s0 = _silu(z0)
        cache = [(z0, s0, None)]
        for k in range(self.config.blocks):
            z = h @ p[f"w{k}"] + e @ p[f"u{k}"] + p[f"b{k}"]
            a, s = _silu(z)
            cache.append((z, s, h))
            h = h + a
        est = h @ p["w_out"] + p["b_out"]
        return (est, (x, e, h, cache)) if keep else est

    def denoise(self, x: np.ndarray, t) -> np.ndarray:
        """Data estimate for flattened latents ``x`` (batch, dim) at times ``t``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
        return self._forward(x, t)

    def velocity(self, x: np.ndarray, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
        if np.any(t <= 0):
            raise ValueError("velocity is evaluated at t > 0 only")
        return (x - self._forward(x, t)) / t[:, None]

    def loss_and_grad(self, x0: np.ndarray, eps: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
        """Velocity MSE weighted by t^2 (equal to the data-estimate MSE) and its parameter gradient."""
        xt = (1.0 - t)[:, None] * x0 + t[:, None] * eps
        est, (x, e, h, cache) = self._forward(xt, t, keep=True)
        resid = est - x0
        loss = float(np.mean(resid ** 2))
        p = self._views(self.params)
        grad = np.zeros_like(self.params)
        g = self._views(grad)
        d_out = 2.0 * resid / resid.size
        g["w_out"][...] = h.T @ d_out
        g["b_out"][...] = d_out.sum(axis=0)
        dh = d_out @ p["w_out"].T
        for k in reversed(range(self.config.blocks)):
            z, s, h_in = cache[k + 1]
            dz = dh * s * (1.0 + z * (1.0 - s))
            g[f"w{k}"][...] = h_in.T @ dz
            g[f"u{k}"][...] = e.T @ dz
            g[f"b{k}"][...] = dz.sum(axis=0)
            dh = dh + dz @ p[f"w{k}"].T
        z0, s0, _ = cache[0]
        dz0 = dh * s0 * (1.0 + z0 * (1.0 - s0))
        g["w_in"][...] = x.T @ dz0
        g["w_t"][...] = e.T @ dz0
        g["b_in"][...] = dz0.sum(axis=0)
        return loss, grad

    def save(self, path) -> list[Path]:
        """Flat float32 parameter file plus a JSON architecture descriptor."""
        p = io.write_raw(path, self.params.astype(np.float32), kind="flow_params")
        arch = io.write_json(Path(str(path) + ".arch.json"), {
            "version": CHECKPOINT_VERSION, "latent_shape": list(self.latent_shape),
            "config": asdict(self.config), "n_params": int(self.params.size),
        })
        return [p, p.with_name(p.name + ".json"), arch]

    @classmethod
    def load(cls, path) -> FlowModel:
        arch = io.read_json(Path(str(path) + ".arch.json"))
        if arch.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {arch.get('version')}")
        params, _ = io.read_raw(path)
        model = cls(tuple(arch["latent_shape"]), FlowConfig(**arch["config"]), params.astype(np.float64))
        if model.params.size != arch["n_params"]:
            raise ValueError("checkpoint parameter count does not match its architecture")
        return model


def _stack(dataset: Sequence[LatentGrid]) -> np.ndarray:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    shapes = {d.values.shape for d in dataset}
    if len(shapes) != 1:
        raise ValueError(f"latents differ in shape: {sorted(shapes)}")
    return np.stack([d.flat() for d in dataset])


def flow_loss(model: FlowModel, dataset: Sequence[LatentGrid], rng, n: int = 512) -> float:
    """Monte-Carlo training objective on ``n`` fresh draws."""
    data = _stack(dataset)
    rng = np.random.default_rng(rng)
    idx = rng.integers(0, len(data), n)
    t = rng.uniform(0.0, 1.0, n)
    eps = rng.normal(size=(n, data.shape[1]))
    return model.loss_and_grad(data[idx], eps, t)[0]


def initial_model(dataset: Sequence[LatentGrid], config: FlowConfig | None = None) -> FlowModel:
    """Untrained network whose output bias starts at the dataset mean."""
    cfg = config or FlowConfig()
    data = _stack(dataset)
    init_rng = np.random.default_rng(cfg.seed).spawn(2)[0]
    model = FlowModel.init(dataset[0].values.shape, cfg, init_rng)
    model._views(model.params)["b_out"][...] = data.mean(axis=0)
    return model


def train_toy_flow(dataset: Sequence[LatentGrid], config: FlowConfig | None = None, *,
                   log_every: int = 0, logger=None) -> FlowModel:
    """Fit the velocity network with Adam and a cosine learning-rate decay."""
    cfg = config or FlowConfig()
    data = _stack(dataset)
    model = initial_model(dataset, cfg)
    data_rng = np.random.default_rng(cfg.seed).spawn(2)[1]
    m = np.zeros_like(model.params)
    v = np.zeros_like(model.params)
    b1, b2 = 0.9, 0.999
    for step in range(cfg.steps):
        idx = data_rng.integers(0, len(data), cfg.batch)
        t = data_rng.uniform(0.0, 1.0, cfg.batch)
        eps = data_rng.normal(size=(cfg.batch, data.shape[1]))
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = model.loss_and_grad(data[idx], eps, t)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise FlowDivergence(step)
        lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mh = m / (1 - b1 ** (step + 1))
        vh = v / (1 - b2 ** (step + 1))
        model.params -= lr * mh / (np.sqrt(vh) + 1e-8)
        model.loss_history.append(loss)
        if logger is not None and log_every and (step % log_every == 0 or step == cfg.steps - 1):
            logger.info("flow step %d loss %.5f", step, loss)
    return model


def active_steps(t: float, n_steps: int) -> int:
    """Number of Euler steps taken from time ``t``: floor(n_steps * t)."""
    # guard against products such as 50 * 0.3 = 15.000000000000002 or 14.999999999999998
    return int(math.floor(n_steps * t + 1e-9))


def integrate(model: FlowModel, x: np.ndarray, t: float, k: int) -> np.ndarray:
    """Euler steps of equal size from time ``t`` down to 0."""
    x = np.array(x, dtype=np.float64)
    for j in range(k, 0, -1):
        ti = t * j / k
        h = ti - t * (j - 1) / k
        x = x - h * model.velocity(x, ti)
    return x


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t


def inject_prior_samples(model: FlowModel, prior: LatentGrid, t: float = 0.3, n_steps: int = 50,
                         rng=None, n: int = 1) -> np.ndarray:
    """``n`` samples started from the noised prior; returns an (n, dim) array."""
    t = _check_t(t)
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if prior.values.shape != model.latent_shape:
        raise ValueError(f"prior shape {prior.values.shape} does not match model {model.latent_shape}")
    rng = np.random.default_rng(rng)
    base = np.broadcast_to(prior.flat(), (n, model.dim))
    eps = rng.normal(size=(n, model.dim))
    x = (1.0 - t) * base + t * eps
    k = active_steps(t, n_steps)
    return x if k == 0 else integrate(model, x, t, k)


def inject_prior_sample(model: FlowModel, prior: LatentGrid, t: float = 0.3, n_steps: int = 50,
                        rng=None) -> LatentGrid:
    """Noise ``prior`` to time ``t`` and integrate back to data."""
    flat = inject_prior_samples(model, prior, t, n_steps, rng, 1)[0]
    return LatentGrid.from_flat(flat, model.latent_shape[0], model.latent_shape[3])


def sample(model: FlowModel, rng=None, n_steps: int = 50, n: int = 1) -> np.ndarray:
    """Unconditional samples integrated from pure noise."""
    rng = np.random.default_rng(rng)
    x = rng.normal(size=(n, model.dim))
    return integrate(model, x, 1.0, n_steps)
