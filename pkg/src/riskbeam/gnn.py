"""Unfolded graph policy mapping a channel realization to precoders.

Each unfolding layer runs three message-passing blocks (receiver embedding,
weight embedding, precoder update) followed by a rescaling onto the power
budget. All six sub-networks are 3-layer ReLU MLPs. Complex vectors are
handled in realified ``[Re, Im]`` form.

Shapes: a batch of graphs carries node arrays ``(B, K, D)``; the forward pass
also accepts a single graph without the batch axis.

Precoders inside the network are expressed in units of ``sqrt(P_BS)`` so the
budget is 1 there; :func:`unfold_forward` returns physical precoders.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Var
from .wmmse import uniform_precoder

BLOCKS = ("psi_u", "phi_u", "psi_w", "phi_w", "psi_v", "phi_v")
CHECKPOINT_MAGIC = "RISKBEAM-POLICY"
CHECKPOINT_VERSION = 1


class InfeasibleInit(ValueError):
    pass


# ---------------------------------------------------------------------------
# graph data
# ---------------------------------------------------------------------------

@dataclass
class GraphSample:
    """Node features ``z`` (..., K, F) and edge tensor ``A`` (..., K, K, 2M).

    ``A[..., j, i, :]`` holds the realified channel of user ``j`` when ``j``
    is a neighbour of ``i``.
    """

    z: np.ndarray
    A: np.ndarray
    neighbors: np.ndarray  # (K, K) bool, neighbors[i, j] <=> j in N(i)
    M: int
    d_u: int
    d_w: int

    @property
    def K(self) -> int:
        return self.z.shape[-2]

    def _block(self, start, width):
        return self.z[..., start:start + width]

    @property
    def v0(self):
        return self._block(0, 2 * self.M)

    @property
    def h(self):
        return self._block(2 * self.M, 2 * self.M)

    @property
    def u0(self):
        return self._block(4 * self.M, 2 * self.d_u)

    @property
    def w0(self):
        return self._block(4 * self.M + 2 * self.d_u, self.d_w)

    @property
    def gamma(self):
        return self.z[..., -1]

    def permute(self, perm) -> "GraphSample":
        perm = np.asarray(perm)
        A = self.A[..., perm, :, :][..., :, perm, :]
        nb = self.neighbors[np.ix_(perm, perm)]
        return GraphSample(self.z[..., perm, :], A, nb, self.M, self.d_u, self.d_w)


def full_neighbors(K: int) -> np.ndarray:
    return ~np.eye(K, dtype=bool)


def build_graph(H_norm, gamma, v0, u0=None, w0=None, d_u: int = 16, d_w: int = 16,
                neighbors=None) -> GraphSample:
    """Assemble graph features from normalised channels ``(..., M, K)``.

    ``v0`` is the initial precoder in budget units (power at most 1), complex
    ``(..., M, K)``.
    """
    H_norm = np.asarray(H_norm)
    M, K = H_norm.shape[-2:]
    batch = H_norm.shape[:-2]
    v0 = np.broadcast_to(np.asarray(v0, dtype=np.complex128), batch + (M, K))
    if np.any((np.abs(v0) ** 2).sum(axis=(-2, -1)) > 1 + 1e-9):
        raise InfeasibleInit("initial precoder exceeds the power budget")
    if neighbors is None:
        neighbors = full_neighbors(K)
    neighbors = np.asarray(neighbors, dtype=bool)
    h_r = nx.realify(np.swapaxes(H_norm, -1, -2))  # (..., K, 2M)
    v_r = nx.realify(np.swapaxes(v0, -1, -2))
    u = np.zeros(batch + (K, 2 * d_u)) if u0 is None else np.broadcast_to(u0, batch + (K, 2 * d_u))
    w = np.zeros(batch + (K, d_w)) if w0 is None else np.broadcast_to(w0, batch + (K, d_w))
    g = np.broadcast_to(np.asarray(gamma, dtype=np.float64), batch + (K,))[..., None]
    z = np.concatenate([v_r, h_r, u, w, g], axis=-1)
    # A[..., j, i, :] = h_j for j in N(i)
    A = np.where(neighbors.T[..., None], h_r[..., :, None, :], 0.0)
    return GraphSample(z, A, neighbors, M, d_u, d_w)


def uniform_init(M: int, K: int) -> np.ndarray:
    """Uniform initial precoder in budget units."""
    return uniform_precoder(M, K, 1.0)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolicyArch:
    M: int
    d_u: int = 16
    d_w: int = 16
    hidden: int = 256
    msg: int = 64
    L: int = 4
    shared: bool = True

    def io_dims(self) -> dict[str, tuple[int, int]]:
        m2, u2, w = 2 * self.M, 2 * self.d_u, self.d_w
        return {
            "psi_u": (m2, self.msg),
            "phi_u": (2 * m2 + self.msg, u2),
            "psi_w": (m2, self.msg),
            "phi_w": (2 * m2 + u2 + self.msg, w),
            "psi_v": (2 * m2 + u2 + w, self.msg),
            "phi_v": (2 * m2 + u2 + w + self.msg, m2),
        }

    def shapes(self) -> list[tuple[str, tuple]]:
        """Ordered ``(name, shape)`` list defining the flat parameter layout."""
        out = []
        copies = 1 if self.shared else self.L
        for c in range(copies):
            for name, (din, dout) in self.io_dims().items():
                dims = [din, self.hidden, self.hidden, dout]
                for k in range(3):
                    out.append((f"{c}.{name}.W{k + 1}", (dims[k], dims[k + 1])))
                    out.append((f"{c}.{name}.b{k + 1}", (dims[k + 1],)))
        return out

    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())


@dataclass
class PolicyParams:
    arch: PolicyArch
    theta: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.arch.size(),):
            raise ValueError(f"expected {self.arch.size()} parameters, got {self.theta.shape}")

    def arrays(self, flat=None) -> dict[str, np.ndarray]:
        """Named views into ``flat`` (defaults to ``theta``)."""
        flat = self.theta if flat is None else flat
        out, pos = {}, 0
        for name, shape in self.arch.shapes():
            n = int(np.prod(shape))
            out[name] = flat[pos:pos + n].reshape(shape)
            pos += n
        return out

    def on_tape(self, tape: nx.Tape) -> dict[str, Var]:
        """Register every parameter block as a tape leaf."""
        return {name: tape.var(arr) for name, arr in self.arrays().items()}

    def flat_grad(self, leaves: dict[str, Var]) -> np.ndarray:
        """Concatenate leaf gradients in the flat parameter order."""
        parts = []
        for name, shape in self.arch.shapes():
            g = leaves[name].grad
            parts.append(np.zeros(int(np.prod(shape))) if g is None else g.reshape(-1))
        return np.concatenate(parts)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.arch, self.theta.copy())


def init_params(arch: PolicyArch, seed: int) -> PolicyParams:
    """Uniform(+-1/sqrt(fan_in)) weights and biases."""
    gen = nx.SeededRng(seed, nx.STREAM_INIT).generator(0)
    parts = []
    fan_in = 1
    for _, shape in arch.shapes():
        if len(shape) == 2:
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(gen.uniform(-bound, bound, size=int(np.prod(shape))))
    return PolicyParams(arch, np.concatenate(parts))


def _blocks_for_layer(named: dict, arch: PolicyArch, layer: int) -> dict[str, tuple]:
    c = 0 if arch.shared else layer
    return {b: tuple(named[f"{c}.{b}.{p}{k}"] for k in (1, 2, 3) for p in ("W", "b")) for b in BLOCKS}


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def mlp(x, p):
    W1, b1, W2, b2, W3, b3 = p
    y = nx.relu(nx.affine(x, W1, b1))
    y = nx.relu(nx.affine(y, W2, b2))
    return nx.affine(y, W3, b3)


def ugnn_step(v, graph: GraphSample, psi_u, phi_u):
    agg = nx.neighbor_max(mlp(v, psi_u), graph.neighbors)
    return mlp(nx.concat([graph.h, v, agg]), phi_u)


def wgnn_step(v, u, graph: GraphSample, psi_w, phi_w):
    agg = nx.neighbor_max(mlp(v, psi_w), graph.neighbors)
    return mlp(nx.concat([graph.h, v, u, agg]), phi_w)


def vgnn_step(v, u, w, graph: GraphSample, psi_v, phi_v):
    xi = mlp(nx.concat([graph.h, v, u, w]), psi_v)
    agg = nx.neighbor_max(xi, graph.neighbors)
    return mlp(nx.concat([graph.h, v, u, w, agg]), phi_v)


def project_power(vhat, budget: float = 1.0):
    """Rescale ``(..., K, 2M)`` precoders onto the budget when they exceed it.

    The feasible branch multiplies by exactly 1, so feasible inputs pass
    through bit-for-bit.
    """
    total = nx.vsum(nx.mul(vhat, vhat), axis=(-2, -1), keepdims=True)
    excess = nx.hinge(nx.add(nx.mul(total, 1.0 / budget), -1.0))
    scale = nx.power(nx.add(excess, 1.0), -0.5)
    return nx.mul(vhat, scale)


@dataclass
class UnfoldTrace:
    v: list = field(default_factory=list)  # v-tilde per layer, layer 0 is the init
    u: list = field(default_factory=list)
    w: list = field(default_factory=list)
    vhat: list = field(default_factory=list)


def unfold_core(graph: GraphSample, named: dict, arch: PolicyArch, trace: UnfoldTrace | None = None):
    """Budget-unit forward pass. ``named`` maps parameter names to arrays or tape vars."""
    v = graph.v0
    u, w = graph.u0, graph.w0
    if trace is not None:
        trace.v.append(_value(v))
        trace.u.append(_value(u))
        trace.w.append(_value(w))
    for layer in range(arch.L):
        p = _blocks_for_layer(named, arch, layer)
        u = ugnn_step(v, graph, p["psi_u"], p["phi_u"])
        w = wgnn_step(v, u, graph, p["psi_w"], p["phi_w"])
        vhat = vgnn_step(v, u, w, graph, p["psi_v"], p["phi_v"])
        v = project_power(vhat)
        if trace is not None:
            trace.u.append(_value(u))
            trace.w.append(_value(w))
            trace.vhat.append(_value(vhat))
            trace.v.append(_value(v))
    return v


def _value(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def realified_to_precoder(v_r: np.ndarray) -> np.ndarray:
    """``(..., K, 2M)`` realified rows to complex ``(..., M, K)``."""
    return np.swapaxes(nx.complexify(v_r), -1, -2)


def unfold_forward(graph: GraphSample, params: PolicyParams, P_BS: float, with_trace: bool = False):
    """Physical precoders ``(..., M, K)`` after ``L`` layers (plus the trace in budget units)."""
    trace = UnfoldTrace() if with_trace else None
    v = unfold_core(graph, params.arrays(), params.arch, trace)
    V = np.sqrt(P_BS) * realified_to_precoder(_value(v))
    return (V, trace) if with_trace else V


# ---------------------------------------------------------------------------
# rates on the tape
# ---------------------------------------------------------------------------

def rate_coefficients(H: np.ndarray):
    """Constant matrices turning realified precoders into Re/Im of ``h_i^H v_j``."""
    Ht = np.swapaxes(H, -1, -2)  # (..., K, M)
    hr, hi = Ht.real, Ht.imag
    return np.concatenate([hr, hi], axis=-1), np.concatenate([-hi, hr], axis=-1)


def tape_rates(v_r, H: np.ndarray, sigma2):
    """Per-user rates (nats) for realified precoders ``(..., K, 2M)`` and channels ``(..., M, K)``."""
    K = H.shape[-1]
    c_re, c_im = rate_coefficients(H)
    g_re = nx.contract(c_re, v_r)
    g_im = nx.contract(c_im, v_r)
    p = nx.sq_mag(g_re, g_im)
    eye = np.eye(K)
    sig = nx.vsum(nx.mul(p, eye), axis=-1)
    interf = nx.add(nx.vsum(nx.mul(p, 1.0 - eye), axis=-1), sigma2)
    return nx.add(nx.log(nx.add(sig, interf)), nx.neg(nx.log(interf)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: PolicyParams, t=None, meta: dict | None = None) -> str:
    """Write header + little-endian float64 parameters (then ``t``). Returns the sha256."""
    a = params.arch
    t = np.zeros(0) if t is None else np.asarray(t, dtype=np.float64)
    head = io.StringIO()
    head.write(f"{CHECKPOINT_MAGIC}\nversion={CHECKPOINT_VERSION}\n")
    for k in ("M", "d_u", "d_w", "hidden", "msg", "L"):
        head.write(f"{k}={getattr(a, k)}\n")
    head.write(f"shared={int(a.shared)}\nn_params={a.size()}\nn_t={t.size}\n")
    for k, v in (meta or {}).items():
        head.write(f"{k}={v}\n")
    head.write("END\n")
    blob = head.getvalue().encode("ascii") + params.theta.astype("<f8").tobytes() + t.astype("<f8").tobytes()
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path):
    """Returns ``(params, t, meta)``."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(CHECKPOINT_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a policy checkpoint")
    kv = {}
    for line in raw[:end].decode("ascii").splitlines()[1:]:
        k, v = line.split("=", 1)
        kv[k] = v
    if int(kv.pop("version")) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    arch = PolicyArch(M=int(kv.pop("M")), d_u=int(kv.pop("d_u")), d_w=int(kv.pop("d_w")),
                      hidden=int(kv.pop("hidden")), msg=int(kv.pop("msg")), L=int(kv.pop("L")),
                      shared=bool(int(kv.pop("shared"))))
    n = int(kv.pop("n_params"))
    nt = int(kv.pop("n_t"))
    off = end + len(b"\nEND\n")
    theta = np.frombuffer(raw, "<f8", count=n, offset=off).copy()
    t = np.frombuffer(raw, "<f8", count=nt, offset=off + 8 * n).copy()
    return PolicyParams(arch, theta), t, kv
