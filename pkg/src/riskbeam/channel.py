"""MISO downlink cell: geometry, pathloss, Rician fading and dataset files."""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .numerics import STREAM_ICSI, STREAM_SCSI, SeededRng

DATASET_MAGIC = "RISKBEAM-CHANNELS"
DATASET_VERSION = 1

DEFAULT_DISTANCES = (30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0, 80.0, 90.0, 100.0)


def db_to_lin(x):
    return 10.0 ** (np.asarray(x, dtype=np.float64) / 10.0)


@dataclass
class NetworkConfig:
    """Cell description. Powers in dBm, ``C0`` and ``beta`` in dB."""

    K: int = 10
    M: int = 6
    P_BS: float = 5.0
    sigma2: np.ndarray = None
    C0: float = -30.0
    delta: float = 2.2
    beta: float = -3.0
    user_distances: np.ndarray = None
    gamma: np.ndarray = None
    alpha: np.ndarray = None

    def __post_init__(self):
        self.K = int(self.K)
        self.M = int(self.M)
        K = self.K

        def vec(x, default):
            if x is None:
                x = default
            arr = np.asarray(x, dtype=np.float64).reshape(-1)
            if arr.size == 1:
                arr = np.full(K, float(arr[0]))
            return arr

        if self.user_distances is None and K == len(DEFAULT_DISTANCES):
            self.user_distances = DEFAULT_DISTANCES
        self.sigma2 = vec(self.sigma2, -80.0)
        self.user_distances = vec(self.user_distances, np.linspace(30.0, 100.0, K))
        self.gamma = vec(self.gamma, 1.0)
        self.alpha = vec(self.alpha, 1.0)
        self.validate()

    def validate(self):
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be >= 1")
        for name in ("sigma2", "user_distances", "gamma", "alpha"):
            if getattr(self, name).shape != (self.K,):
                raise ValueError(f"{name} must have length K={self.K}")
        if np.any(self.alpha <= 0) or np.any(self.alpha > 1):
            raise ValueError("alpha must lie in (0, 1]")
        if np.any(self.gamma <= 0):
            raise ValueError("gamma must be positive")
        if np.any(self.user_distances <= 0):
            raise ValueError("user distances must be positive")

    # linear-unit views
    @property
    def power_mw(self) -> float:
        return float(db_to_lin(self.P_BS))

    @property
    def noise_mw(self) -> np.ndarray:
        return db_to_lin(self.sigma2)

    @property
    def rician_lin(self) -> float:
        return float(db_to_lin(self.beta))

    def pathloss(self) -> np.ndarray:
        return np.array([pathloss(d, self.C0, self.delta) for d in self.user_distances])

    def replace(self, **changes) -> "NetworkConfig":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return NetworkConfig(**kw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def channel_key(self) -> dict:
        """Fields that determine the channel law (alpha/gamma do not)."""
        d = self.to_dict()
        d.pop("alpha")
        d.pop("gamma")
        return d


# ---------------------------------------------------------------------------
# flat key=value config files
# ---------------------------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, np.ndarray) or isinstance(v, (list, tuple)):
        return ",".join(repr(float(x)) for x in np.asarray(v).reshape(-1))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def config_from_kv(kv: dict[str, str]) -> NetworkConfig:
    kwargs = {}
    for f in fields(NetworkConfig):
        if f.name not in kv:
            continue
        raw = kv[f.name]
        if f.name in ("K", "M"):
            kwargs[f.name] = int(raw)
        elif f.name in ("sigma2", "user_distances", "gamma", "alpha"):
            kwargs[f.name] = np.array([float(x) for x in raw.split(",")])
        else:
            kwargs[f.name] = float(raw)
    return NetworkConfig(**kwargs)


def config_to_text(cfg: NetworkConfig) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in cfg.to_dict().items())


def load_config(path) -> NetworkConfig:
    return config_from_kv(parse_kv(Path(path).read_text()))


# ---------------------------------------------------------------------------
# channel model
# ---------------------------------------------------------------------------

def pathloss(d: float, C0: float, delta: float) -> float:
    """Amplitude pathloss ``sqrt(C0_lin * d**-delta)``."""
    if d <= 0:
        raise ValueError(f"distance must be positive, got {d}")
    return float(np.sqrt(db_to_lin(C0) * d ** (-delta)))


def _cn(gen: np.random.Generator, shape) -> np.ndarray:
    """Circularly-symmetric CN(0, 1) draws."""
    z = gen.standard_normal(shape + (2,))
    return (z[..., 0] + 1j * z[..., 1]) * np.sqrt(0.5)


@dataclass
class ScsiMatrix:
    Hbar: np.ndarray  # (M, K) complex
    cell_seed: int


@dataclass
class ChannelRealization:
    H: np.ndarray  # (M, K) complex, column i is h_i
    seed: int
    norm_scale: float = field(default=None)

    def __post_init__(self):
        if self.norm_scale is None:
            self.norm_scale = float(np.max(np.abs(self.H)))


def sample_scsi(cfg: NetworkConfig, cell_seed: int) -> ScsiMatrix:
    gen = SeededRng(cell_seed, STREAM_SCSI).generator(0)
    return ScsiMatrix(_cn(gen, (cfg.M, cfg.K)), int(cell_seed))


def sample_channel(cfg: NetworkConfig, scsi: ScsiMatrix, rng: np.random.Generator | SeededRng,
                   index: int = 0) -> ChannelRealization:
    """One Rician realization. ``rng`` is a Generator or a stream (then ``index`` picks the sample)."""
    if isinstance(rng, SeededRng):
        gen = rng.generator(index)
    else:
        gen = rng
    b = cfg.rician_lin
    if np.isinf(b):
        los, nlos = 1.0, 0.0
    else:
        los, nlos = np.sqrt(b / (1 + b)), np.sqrt(1 / (1 + b))
    Htil = _cn(gen, (cfg.M, cfg.K))
    H = cfg.pathloss()[None, :] * (los * scsi.Hbar + nlos * Htil)
    return ChannelRealization(H, int(index))


def icsi_stream(cell_seed: int) -> SeededRng:
    return SeededRng(cell_seed, STREAM_ICSI)


def sample_channels(cfg: NetworkConfig, cell_seed: int, indices) -> np.ndarray:
    """Stack of realizations for the given sample indices, shape ``(n, M, K)``."""
    scsi = sample_scsi(cfg, cell_seed)
    stream = icsi_stream(cell_seed)
    return np.stack([sample_channel(cfg, scsi, stream, int(i)).H for i in indices])


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

@dataclass
class ChannelDataset:
    config: NetworkConfig
    cell_seed: int
    seeds: np.ndarray  # (n,) int64
    H: np.ndarray  # (n, M, K) complex128
    norm_scale: np.ndarray  # (n,)

    def __len__(self):
        return len(self.seeds)

    def __getitem__(self, i) -> ChannelRealization:
        return ChannelRealization(self.H[i], int(self.seeds[i]), float(self.norm_scale[i]))

    def subset(self, idx) -> "ChannelDataset":
        return ChannelDataset(self.config, self.cell_seed, self.seeds[idx], self.H[idx], self.norm_scale[idx])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(config_to_text(self.config.replace(alpha=1.0, gamma=1.0)).encode())
        h.update(np.int64(self.cell_seed).tobytes())
        h.update(np.ascontiguousarray(self.seeds, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.H, dtype="<c16").tobytes())
        return h.hexdigest()[:16]


def _record_dtype(M: int, K: int) -> np.dtype:
    return np.dtype([("seed", "<i8"), ("norm_scale", "<f8"), ("re", "<f8", (M, K)), ("im", "<f8", (M, K))])


def make_dataset(cfg: NetworkConfig, cell_seed: int, n: int, start: int = 0) -> ChannelDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    seeds = np.arange(start, start + n, dtype=np.int64)
    H = sample_channels(cfg, cell_seed, seeds)
    norm = np.abs(H).reshape(n, -1).max(axis=1)
    return ChannelDataset(cfg, int(cell_seed), seeds, H, norm)


def write_dataset(ds: ChannelDataset, path) -> None:
    cfg = ds.config
    header = io.StringIO()
    header.write(f"{DATASET_MAGIC}\nversion={DATASET_VERSION}\ncell_seed={ds.cell_seed}\nn={len(ds)}\n")
    header.write(config_to_text(cfg))
    header.write("END\n")
    rec = np.zeros(len(ds), dtype=_record_dtype(cfg.M, cfg.K))
    rec["seed"] = ds.seeds
    rec["norm_scale"] = ds.norm_scale
    rec["re"] = ds.H.real
    rec["im"] = ds.H.imag
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        fh.write(rec.tobytes())


def read_dataset(path, expect: NetworkConfig | None = None) -> ChannelDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(DATASET_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a channel dataset file")
    lines = raw[:end].decode("ascii").splitlines()[1:]
    kv = parse_kv("\n".join(lines))
    if int(kv.pop("version")) != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version")
    cell_seed = int(kv.pop("cell_seed"))
    n = int(kv.pop("n"))
    cfg = config_from_kv(kv)
    if expect is not None:
        mismatched = [k for k, v in expect.channel_key().items()
                      if not np.array_equal(np.asarray(v), np.asarray(cfg.channel_key()[k]))]
        if mismatched:
            raise ValueError(f"{path}: config mismatch on {', '.join(mismatched)}")
    rec = np.frombuffer(raw, dtype=_record_dtype(cfg.M, cfg.K), count=n, offset=end + len(b"\nEND\n"))
    H = rec["re"] + 1j * rec["im"]
    return ChannelDataset(cfg, cell_seed, rec["seed"].copy(), H, rec["norm_scale"].copy())


def generate_dataset(cfg: NetworkConfig, cell_seed: int, n: int, path, start: int = 0) -> ChannelDataset:
    ds = make_dataset(cfg, cell_seed, n, start=start)
    write_dataset(ds, path)
    return ds


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
