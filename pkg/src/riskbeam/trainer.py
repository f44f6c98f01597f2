"""Stochastic subgradient training of the graph policy and the CVaR thresholds."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gnn, metrics
from . import numerics as nx
from .channel import ChannelDataset, NetworkConfig, config_to_text, format_value, parse_kv

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr_theta: float = 1e-3
    lr_t: float = 1e-5
    decay_theta: float = 0.794
    decay_t: float = 0.912
    warmup_epochs: int = 5
    epochs: int = 40
    batch_size: int = 64
    seed: int = 0
    t0: float = 0.0
    clip_norm: float = 10.0
    optimizer: str = "sgd"
    # policy architecture
    L: int = 4
    d_u: int = 16
    d_w: int = 16
    hidden: int = 256
    msg: int = 64
    shared: bool = True
    # noise seen by the loss: True keeps the physical SNR after channel normalisation
    rescale_noise: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_theta < 0 or self.lr_t < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def arch(self, M: int) -> gnn.PolicyArch:
        return gnn.PolicyArch(M=M, d_u=self.d_u, d_w=self.d_w, hidden=self.hidden,
                              msg=self.msg, L=self.L, shared=self.shared)

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)


def train_config_from_kv(kv: dict[str, str]) -> TrainConfig:
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name not in kv:
            continue
        raw = kv[f.name]
        if f.type in ("bool",) or isinstance(f.default, bool):
            kwargs[f.name] = raw.strip().lower() in ("1", "true", "yes")
        elif isinstance(f.default, int):
            kwargs[f.name] = int(raw)
        elif isinstance(f.default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw.strip()
    return TrainConfig(**kwargs)


def load_train_config(path) -> TrainConfig:
    return train_config_from_kv(parse_kv(Path(path).read_text()))


def train_config_to_text(cfg: TrainConfig) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in asdict(cfg).items())


def config_hash(net: NetworkConfig, tc: TrainConfig) -> str:
    return hashlib.sha256((config_to_text(net) + train_config_to_text(tc)).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# loss and update rules
# ---------------------------------------------------------------------------

def effective_channel(H: np.ndarray, norm_scale: np.ndarray, net: NetworkConfig, rescale_noise: bool = True):
    """Normalised channels plus the noise that goes with precoders in budget units.

    With ``rescale_noise`` the rates equal the physical ones; otherwise the
    physical noise power is kept against the normalised channel.
    """
    ns = np.asarray(norm_scale, dtype=np.float64)[..., None, None]
    Hn = H / ns
    s2 = net.noise_mw / net.power_mw
    if rescale_noise:
        s2 = s2 / ns[..., 0] ** 2
    else:
        s2 = np.broadcast_to(s2, Hn.shape[:-2] + (net.K,))
    return Hn, s2


def sample_loss(v_r, Hn, t, gamma, alpha, sigma2):
    """Batch-mean of ``sum_i gamma_i/alpha_i (t_i - r_i)_+`` and the rate values.

    ``v_r`` are realified budget-unit precoders ``(B, K, 2M)`` (tape var or
    array); ``Hn`` and ``sigma2`` come from :func:`effective_channel`.
    """
    r = gnn.tape_rates(v_r, Hn, sigma2)
    wts = np.asarray(gamma, dtype=np.float64) / np.asarray(alpha, dtype=np.float64)
    per = nx.mul(nx.hinge(nx.add(nx.neg(r), np.asarray(t, dtype=np.float64))), wts)
    B = r.value.shape[0] if r.value.ndim > 1 else 1
    return nx.mul(nx.vsum(per), 1.0 / B), r.value


def theta_step(theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite policy gradient")
    return theta - lr * grad


def t_step(t, r, lr: float, gamma, alpha) -> np.ndarray:
    """Threshold ascent step with batch-averaged hinge subgradients (0 on ties)."""
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    active = (t[None, :] > r).mean(axis=0)
    return t + lr * np.asarray(gamma) / alpha * (alpha - active)


def lr_schedule(epoch: int, cfg: TrainConfig) -> tuple[float, float]:
    """Constant for ``warmup_epochs`` epochs, then geometric decay per epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    k = 0 if epoch < cfg.warmup_epochs else epoch - cfg.warmup_epochs + 1
    return cfg.lr_theta * cfg.decay_theta ** k, cfg.lr_t * cfg.decay_t ** k


class Adam:
    """Adaptive alternative to the plain subgradient step (opt-in)."""

    def __init__(self, n: int, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.k = 0
        self.b1, self.b2, self.eps = b1, b2, eps

    def step(self, theta, grad, lr):
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("non-finite policy gradient")
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.k)
        vh = self.v / (1 - self.b2 ** self.k)
        return theta - lr * mh / (np.sqrt(vh) + self.eps)

    def state(self) -> np.ndarray:
        return np.concatenate([self.m, self.v, [self.k]])

    def load(self, flat: np.ndarray):
        n = self.m.size
        self.m, self.v, self.k = flat[:n].copy(), flat[n:2 * n].copy(), int(flat[2 * n])


# ---------------------------------------------------------------------------
# batch helpers
# ---------------------------------------------------------------------------

def batch_graph(Hn: np.ndarray, net: NetworkConfig, tc: TrainConfig) -> gnn.GraphSample:
    M, K = Hn.shape[-2:]
    return gnn.build_graph(Hn, net.gamma, gnn.uniform_init(M, K), d_u=tc.d_u, d_w=tc.d_w)


def loss_and_grad(params: gnn.PolicyParams, Hn, s2, t, net: NetworkConfig, tc: TrainConfig,
                  track_kinks: bool = False):
    """One forward/backward sweep over a batch. Returns ``(loss, grad, rates, kink_margin)``."""
    graph = batch_graph(Hn, net, tc)
    tape = nx.Tape(track_kinks=track_kinks)
    leaves = params.on_tape(tape)
    v = gnn.unfold_core(graph, leaves, params.arch)
    loss, r = sample_loss(v, Hn, t, net.gamma, net.alpha, s2)
    tape.backward(loss)
    return float(loss.value), params.flat_grad(leaves), r, tape.kink_margin


def loss_value(params: gnn.PolicyParams, theta, Hn, s2, t, net: NetworkConfig, tc: TrainConfig) -> float:
    graph = batch_graph(Hn, net, tc)
    v = gnn.unfold_core(graph, params.arrays(theta), params.arch)
    loss, _ = sample_loss(v, Hn, t, net.gamma, net.alpha, s2)
    return float(loss.value)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    objective: float
    mean_rate: np.ndarray
    t: np.ndarray
    lr_theta: float
    lr_t: float
    clipped: int
    steps: int


@dataclass
class TrainResult:
    params: gnn.PolicyParams
    t: np.ndarray
    history: list[EpochLog] = field(default_factory=list)
    checkpoint_hashes: list[str] = field(default_factory=list)
    steps: int = 0


def write_log(path, history: list[EpochLog]) -> None:
    if not history:
        return
    K = history[0].t.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "objective"] + [f"mean_rate_{i}" for i in range(K)]
                   + [f"t_{i}" for i in range(K)] + ["lr_theta", "lr_t", "clipped", "steps"])
        for e in history:
            w.writerow([e.epoch, repr(e.objective)] + [repr(float(x)) for x in e.mean_rate]
                       + [repr(float(x)) for x in e.t] + [repr(e.lr_theta), repr(e.lr_t), e.clipped, e.steps])


def train(ds: ChannelDataset, net: NetworkConfig, tc: TrainConfig, out_dir=None,
          resume=None, progress: bool = False) -> TrainResult:
    """Run the subgradient scheme over ``tc.epochs`` shuffled passes of ``ds``.

    ``net`` supplies gamma/alpha (and must describe the same cell as ``ds``).
    Writes ``ckpt_epochNNN.bin``, ``policy.bin`` and ``train_log.csv`` when
    ``out_dir`` is given. ``resume`` is a checkpoint path to continue from.
    """
    M, K = net.M, net.K
    if ds.H.shape[1:] != (M, K):
        raise ValueError("dataset shape does not match the network config")
    arch = tc.arch(M)
    chash = config_hash(net, tc)
    params = gnn.init_params(arch, tc.seed)
    t = np.full(K, float(tc.t0))
    opt = Adam(arch.size()) if tc.optimizer == "adam" else None
    start_epoch = 0
    step = 0
    if resume is not None:
        params, t, meta, extra = load_training_checkpoint(resume)
        if meta.get("config_hash") != chash:
            raise ValueError("checkpoint was written under a different config")
        start_epoch = int(meta["epoch"]) + 1
        step = int(meta["step"])
        if opt is not None:
            opt.load(extra)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    Hn_all, s2_all = effective_channel(ds.H, ds.norm_scale, net, tc.rescale_noise)
    n = len(ds)
    result = TrainResult(params, t, steps=step)
    for epoch in range(start_epoch, tc.epochs):
        lr_th, lr_t = lr_schedule(epoch, tc)
        order = nx.SeededRng(tc.seed, nx.STREAM_SHUFFLE).generator(epoch).permutation(n)
        objs, rate_sum, clipped, nb = [], np.zeros(K), 0, 0
        for b0 in range(0, n, tc.batch_size):
            idx = order[b0:b0 + tc.batch_size]
            Hn, s2 = Hn_all[idx], s2_all[idx]
            loss, grad, r, _ = loss_and_grad(params, Hn, s2, t, net, tc)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise NonFiniteError(f"non-finite loss or gradient at epoch {epoch}, "
                                     f"samples {ds.seeds[idx].tolist()}")
            objs.append(metrics.risk_objective(r, t, net.gamma, net.alpha))
            gnorm = float(np.linalg.norm(grad))
            if tc.clip_norm and gnorm > tc.clip_norm:
                grad = grad * (tc.clip_norm / gnorm)
                clipped += 1
            if opt is None:
                params.theta = theta_step(params.theta, grad, lr_th)
            else:
                params.theta = opt.step(params.theta, grad, lr_th)
            t = t_step(t, r, lr_t, net.gamma, net.alpha)
            rate_sum += r.sum(axis=0)
            nb += len(idx)
            step += 1
        entry = EpochLog(epoch, float(np.mean(objs)), rate_sum / nb, t.copy(), lr_th, lr_t, clipped, step)
        result.history.append(entry)
        if clipped:
            log.info("epoch %d: gradient clipped in %d batches", epoch, clipped)
        if progress:
            print(f"epoch {epoch:3d} obj={entry.objective:.4f} rate={np.round(entry.mean_rate / metrics.LN2, 3)} "
                  f"t={np.round(t, 3)} clipped={clipped}", flush=True)
        if out is not None:
            meta = {"epoch": epoch, "step": step, "seed": tc.seed, "config_hash": chash}
            h = save_training_checkpoint(out / f"ckpt_epoch{epoch:03d}.bin", params, t, meta, opt)
            result.checkpoint_hashes.append(h)
            write_log(out / "train_log.csv", result.history)
    result.params, result.t, result.steps = params, t, step
    if out is not None:
        meta = {"epoch": tc.epochs - 1, "step": step, "seed": tc.seed, "config_hash": chash}
        h = save_training_checkpoint(out / "policy.bin", params, t, meta, opt)
        result.checkpoint_hashes.append(h)
        (out / "config.txt").write_text(config_to_text(net) + train_config_to_text(tc))
    return result


def save_training_checkpoint(path, params, t, meta, opt: Adam | None = None) -> str:
    extra = opt.state() if opt is not None else np.zeros(0)
    meta = dict(meta, n_opt=extra.size)
    h = gnn.save_checkpoint(path, params, t, meta)
    if extra.size:
        with open(path, "ab") as fh:
            fh.write(extra.astype("<f8").tobytes())
        h = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return h


def load_training_checkpoint(path):
    params, t, meta = gnn.load_checkpoint(path)
    n_opt = int(meta.get("n_opt", 0))
    extra = np.zeros(0)
    if n_opt:
        raw = Path(path).read_bytes()
        extra = np.frombuffer(raw[len(raw) - 8 * n_opt:], "<f8").copy()
    return params, t, meta, extra
