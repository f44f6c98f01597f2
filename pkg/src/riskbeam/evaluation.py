"""Evaluation of trained policies and baselines, reports, sweeps and comparisons."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gnn, metrics, trainer
from .channel import ChannelDataset, NetworkConfig
from .wmmse import uniform_precoder, wmmse_solve

METHODS = ("policy", "wmmse", "uniform", "zero")


class ConfigMismatch(ValueError):
    pass


def histogram(samples, bins: int = 200, range=None, density: bool = False):
    """Equal-width histogram. Returns ``(edges, counts)``."""
    z = np.asarray(samples, dtype=np.float64).reshape(-1)
    if z.size == 0:
        raise ValueError("empty sample set")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if range is None:
        lo, hi = float(z.min()), float(z.max())
        if hi <= lo:
            hi = lo + 1.0
        range = (lo, hi)
    counts, edges = np.histogram(z, bins=bins, range=range, density=density)
    return edges, counts


@dataclass
class EvalReport:
    """Per-user rate samples (bits) plus the statistics derived from them."""

    method: str
    rates: np.ndarray  # (n, K) bits per channel use
    config_hash: str = ""
    dataset: str = ""
    zero_threshold: float = metrics.ZERO_RATE_BITS
    bins: int = 200
    hist_range: tuple | None = None
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)
    sharpe: np.ndarray = field(init=False)
    sharpe_defined: np.ndarray = field(init=False)
    zero_fraction: np.ndarray = field(init=False)
    sum_rate: float = field(init=False)
    hist_edges: np.ndarray = field(init=False)
    hist_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        r = np.atleast_2d(np.asarray(self.rates, dtype=np.float64))
        self.rates = r
        self.mean = r.mean(axis=0)
        self.std = r.std(axis=0, ddof=1) if len(r) > 1 else np.zeros(r.shape[1])
        sh = [metrics.sharpe_ratio(r[:, i]) if len(r) > 1 else (np.inf, False) for i in range(r.shape[1])]
        self.sharpe = np.array([s for s, _ in sh])
        self.sharpe_defined = np.array([ok for _, ok in sh])
        self.zero_fraction = np.array([metrics.zero_rate_fraction(r[:, i], self.zero_threshold)
                                       for i in range(r.shape[1])])
        self.sum_rate = float(r.sum(axis=1).mean())
        if self.hist_range is None:
            lo, hi = float(r.min()), float(r.max())
            self.hist_range = (lo, hi if hi > lo else lo + 1.0)
        self.hist_range = tuple(float(x) for x in self.hist_range)
        hs = [histogram(r[:, i], self.bins, self.hist_range) for i in range(r.shape[1])]
        self.hist_edges = hs[0][0]
        self.hist_counts = np.stack([c for _, c in hs])

    @property
    def K(self) -> int:
        return self.rates.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return (self.method == other.method and self.config_hash == other.config_hash
                and self.dataset == other.dataset and self.zero_threshold == other.zero_threshold
                and self.bins == other.bins and self.hist_range == other.hist_range
                and np.array_equal(self.rates, other.rates))

    # csv ----------------------------------------------------------------
    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# method={self.method}\n# config_hash={self.config_hash}\n# dataset={self.dataset}\n")
        buf.write(f"# zero_threshold={self.zero_threshold!r}\n# bins={self.bins}\n")
        buf.write(f"# hist_range={self.hist_range[0]!r},{self.hist_range[1]!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample"] + [f"rate_bits_{i}" for i in range(self.K)])
        for k, row in enumerate(self.rates):
            w.writerow([k] + [repr(float(x)) for x in row])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# method={self.method}\n# config_hash={self.config_hash}\n# dataset={self.dataset}\n")
        buf.write(f"# average_sum_rate_bits={self.sum_rate!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["user", "mean", "std", "sharpe", "sharpe_defined", "zero_fraction"])
        for i in range(self.K):
            w.writerow([i, repr(float(self.mean[i])), repr(float(self.std[i])), repr(float(self.sharpe[i])),
                        int(self.sharpe_defined[i]), repr(float(self.zero_fraction[i]))])
        return buf.getvalue()

    def histogram_csv(self, density: bool = False) -> str:
        """Shared-range histogram per user; ``density`` normalises each user's column to unit area."""
        buf = io.StringIO()
        buf.write(f"# method={self.method}\n# dataset={self.dataset}\n# density={int(density)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi"] + [f"{'density' if density else 'count'}_{i}" for i in range(self.K)])
        width = np.diff(self.hist_edges)
        for b in range(self.bins):
            col = self.hist_counts[:, b]
            vals = [repr(float(c / (len(self.rates) * width[b]))) for c in col] if density else [int(c) for c in col]
            w.writerow([repr(float(self.hist_edges[b])), repr(float(self.hist_edges[b + 1]))] + vals)
        return buf.getvalue()

    def write(self, path, density: bool = False) -> None:
        """Write ``path`` (samples) plus ``*.summary.csv`` and ``*.hist.csv`` next to it."""
        path = Path(path)
        path.write_text(self.to_csv())
        path.with_suffix(".summary.csv").write_text(self.summary_csv())
        path.with_suffix(".hist.csv").write_text(self.histogram_csv(density))


def read_report(path) -> EvalReport:
    meta, rows = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                k, v = line[1:].strip().split("=", 1)
                meta[k] = v
                continue
            rows.append(line)
    data = list(csv.reader(rows))[1:]
    rates = np.array([[float(x) for x in row[1:]] for row in data])
    lo, hi = (float(x) for x in meta["hist_range"].split(","))
    return EvalReport(meta["method"], rates, meta["config_hash"], meta["dataset"],
                      float(meta["zero_threshold"]), int(meta["bins"]), (lo, hi))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _check_config(ds: ChannelDataset, net: NetworkConfig):
    a, b = ds.config.channel_key(), net.channel_key()
    bad = [k for k in a if not np.array_equal(np.asarray(a[k]), np.asarray(b[k]))]
    if bad:
        raise ConfigMismatch(f"dataset and config disagree on {', '.join(bad)}")


def policy_rates(params: gnn.PolicyParams, ds: ChannelDataset, net: NetworkConfig, tc: trainer.TrainConfig,
                 batch: int = 1000) -> np.ndarray:
    """Rates in nats of a trained policy over ``ds`` (forward passes only)."""
    if params.arch.M != net.M:
        raise ConfigMismatch("policy antenna count differs from the config")
    out = []
    for b0 in range(0, len(ds), batch):
        sl = slice(b0, b0 + batch)
        Hn, s2 = trainer.effective_channel(ds.H[sl], ds.norm_scale[sl], net, tc.rescale_noise)
        g = trainer.batch_graph(Hn, net, tc)
        V = gnn.unfold_forward(g, params, 1.0)
        out.append(metrics.rates(V, Hn, s2))
    return np.concatenate(out)


def baseline_rates(method: str, ds: ChannelDataset, net: NetworkConfig, iters: int = 20,
                   rescale_noise: bool = True, batch: int = 1000) -> np.ndarray:
    out = []
    for b0 in range(0, len(ds), batch):
        sl = slice(b0, b0 + batch)
        Hn, s2 = trainer.effective_channel(ds.H[sl], ds.norm_scale[sl], net, rescale_noise)
        if method == "wmmse":
            _, r = wmmse_solve(Hn, s2, net.gamma, 1.0, iters)
        elif method == "uniform":
            r = metrics.rates(uniform_precoder(net.M, net.K, 1.0, Hn.shape[:-2]), Hn, s2)
        elif method == "zero":
            r = metrics.rates(np.zeros_like(Hn), Hn, s2)
        else:
            raise ValueError(f"unknown baseline {method!r}")
        out.append(r)
    return np.concatenate(out)


def evaluate(method: str, ds: ChannelDataset, net: NetworkConfig, params: gnn.PolicyParams | None = None,
             tc: trainer.TrainConfig | None = None, iters: int = 20, label: str | None = None,
             zero_threshold: float = metrics.ZERO_RATE_BITS, bins: int = 200, hist_range=None) -> EvalReport:
    _check_config(ds, net)
    tc = tc or trainer.TrainConfig()
    if method == "policy":
        if params is None:
            raise ValueError("policy evaluation needs parameters")
        r = policy_rates(params, ds, net, tc)
        chash = trainer.config_hash(net, tc)
    else:
        r = baseline_rates(method, ds, net, iters, tc.rescale_noise)
        chash = trainer.config_hash(net, trainer.TrainConfig(rescale_noise=tc.rescale_noise))
    return EvalReport(label or method, r / metrics.LN2, chash, ds.fingerprint(), zero_threshold, bins, hist_range)


# ---------------------------------------------------------------------------
# comparison and sweeps
# ---------------------------------------------------------------------------

def compare(reports: list[EvalReport]) -> list[dict]:
    """Per-user table; ``diff_*`` columns are relative to the first report."""
    if not reports:
        return []
    ref = reports[0]
    for r in reports[1:]:
        if r.dataset != ref.dataset:
            raise ConfigMismatch(f"reports {ref.method!r} and {r.method!r} use different test sets")
    rows = []
    stats = ("mean", "std", "sharpe", "zero_fraction")
    for user in list(range(ref.K)) + ["sum"]:
        for rep in reports:
            row = {"user": user, "method": rep.method}
            if user == "sum":
                row.update(mean=rep.sum_rate, std=float(rep.rates.sum(axis=1).std(ddof=1)),
                           sharpe=np.nan, zero_fraction=np.nan)
                base = {"mean": ref.sum_rate, "std": float(ref.rates.sum(axis=1).std(ddof=1)),
                        "sharpe": np.nan, "zero_fraction": np.nan}
            else:
                row.update({s: float(getattr(rep, s)[user]) for s in stats})
                base = {s: float(getattr(ref, s)[user]) for s in stats}
            for s in stats:
                a, b = row[s], base[s]
                row[f"diff_{s}"] = 0.0 if (a == b or (np.isnan(a) and np.isnan(b))) else a - b
            rows.append(row)
    return rows


def rows_to_csv(rows: list[dict], header: str = "") -> str:
    buf = io.StringIO()
    buf.write(header)
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in row.items()})
    return buf.getvalue()


def alpha_sweep(train_ds: ChannelDataset, test_ds: ChannelDataset, net: NetworkConfig,
                tc: trainer.TrainConfig, grid, out_dir=None, progress: bool = False):
    """Train one policy per risk level and tabulate per-user statistics.

    Returns ``(rows, reports)`` with ``len(rows) == len(grid) * K``.
    """
    grid = [float(a) for a in grid]
    if any(not 0 < a <= 1 for a in grid):
        raise ValueError("risk levels must lie in (0, 1]")
    rows, reports = [], {}
    for a in grid:
        net_a = net.replace(alpha=a)
        sub = Path(out_dir) / f"alpha_{a:g}" if out_dir is not None else None
        res = trainer.train(train_ds, net_a, tc, out_dir=sub, progress=progress)
        rep = evaluate("policy", test_ds, net_a, res.params, tc, label=f"alpha={a:g}")
        reports[a] = rep
        for i in range(net.K):
            rows.append({"alpha": a, "user": i, "mean": float(rep.mean[i]), "std": float(rep.std[i]),
                         "sharpe": float(rep.sharpe[i]), "zero_fraction": float(rep.zero_fraction[i])})
    if out_dir is not None:
        Path(out_dir, "sweep.csv").write_text(rows_to_csv(rows))
    return rows, reports
