import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskbeam import evaluation, gnn, metrics, trainer
from riskbeam.channel import NetworkConfig, make_dataset
from riskbeam.evaluation import EvalReport, compare, evaluate, histogram, read_report

TINY = dict(L=2, d_u=2, d_w=2, hidden=8, msg=4)


@pytest.fixture(scope="module")
def cell():
    net = NetworkConfig(K=3, M=2, user_distances=[30, 60, 120])
    return net, make_dataset(net, 3, 200)


# histogram --------------------------------------------------------------------------------

def test_histogram_constant_samples():
    _, counts = histogram(np.full(50, 2.0), bins=10)
    assert np.count_nonzero(counts) == 1 and counts.sum() == 50


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=200), st.integers(1, 300))
def test_histogram_counts_sum(z, bins):
    edges, counts = histogram(z, bins=bins)
    assert counts.sum() == len(z) and edges.size == bins + 1


def test_histogram_uniform_grid_is_flat():
    z = (np.arange(2000) + 0.5) / 2000
    _, counts = histogram(z, bins=200, range=(0, 1))
    assert counts.max() - counts.min() <= 1


def test_histogram_density_and_errors():
    edges, dens = histogram(np.linspace(0, 1, 101), bins=5, density=True)
    assert (dens * np.diff(edges)).sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        histogram([], bins=5)
    with pytest.raises(ValueError):
        histogram([1.0], bins=0)


# reports --------------------------------------------------------------------------------

def test_report_statistics_consistent(rng):
    r = rng.gamma(2.0, 1.0, (500, 3))
    rep = EvalReport("x", r, bins=50)
    assert rep.hist_counts.sum(axis=1).tolist() == [500] * 3
    for i in range(3):
        s, ok = metrics.sharpe_ratio(r[:, i])
        assert ok and rep.sharpe[i] == s
        mids = 0.5 * (rep.hist_edges[1:] + rep.hist_edges[:-1])
        approx = (mids * rep.hist_counts[i]).sum() / 500
        assert abs(approx - rep.mean[i]) <= np.diff(rep.hist_edges)[0]
    assert rep.sum_rate == pytest.approx(r.sum(axis=1).mean())


def test_report_csv_round_trip(tmp_path, rng):
    rep = EvalReport("policy", rng.gamma(2.0, 1.0, (40, 2)), "abc", "def", 0.02, 17)
    rep.write(tmp_path / "r.csv")
    assert read_report(tmp_path / "r.csv") == rep
    assert (tmp_path / "r.summary.csv").exists() and (tmp_path / "r.hist.csv").exists()
    hist_lines = (tmp_path / "r.hist.csv").read_text().splitlines()
    assert len([ln for ln in hist_lines if not ln.startswith("#")]) == 18


def test_density_histogram_has_unit_area(tmp_path, rng):
    rep = EvalReport("p", rng.gamma(2.0, 1.0, (300, 2)), bins=30)
    rep.write(tmp_path / "r.csv", density=True)
    rows = [ln.split(",") for ln in (tmp_path / "r.hist.csv").read_text().splitlines() if not ln.startswith("#")]
    assert rows[0][2] == "density_0"
    table = np.array(rows[1:], dtype=float)
    width = table[:, 1] - table[:, 0]
    np.testing.assert_allclose((table[:, 2:] * width[:, None]).sum(axis=0), 1.0)


def test_evaluate_is_deterministic(cell):
    net, ds = cell
    tc = trainer.TrainConfig(**TINY)
    params = gnn.init_params(tc.arch(net.M), 1)
    a = evaluate("policy", ds, net, params, tc)
    b = evaluate("policy", ds, net, params, tc)
    assert a == b and a.to_csv() == b.to_csv()


def test_zero_power_policy(cell):
    net, ds = cell
    rep = evaluate("zero", ds, net)
    assert not rep.rates.any()
    np.testing.assert_array_equal(rep.zero_fraction, 1.0)


def test_wmmse_beats_uniform(cell):
    net, ds = cell
    assert evaluate("wmmse", ds, net).sum_rate > evaluate("uniform", ds, net).sum_rate


def test_evaluate_rejects_mismatched_config(cell):
    net, ds = cell
    with pytest.raises(evaluation.ConfigMismatch):
        evaluate("wmmse", ds, net.replace(P_BS=10.0))
    with pytest.raises(ValueError):
        evaluate("policy", ds, net)
    with pytest.raises(ValueError):
        evaluate("nonsense", ds, net)


def test_policy_rates_match_single_sample_forward(cell):
    net, ds = cell
    tc = trainer.TrainConfig(**TINY)
    params = gnn.init_params(tc.arch(net.M), 2)
    r = evaluation.policy_rates(params, ds.subset(slice(0, 3)), net, tc)
    Hn, s2 = trainer.effective_channel(ds.H[:3], ds.norm_scale[:3], net)
    for b in range(3):
        g = gnn.build_graph(Hn[b], net.gamma, gnn.uniform_init(net.M, net.K), d_u=2, d_w=2)
        V = gnn.unfold_forward(g, params, 1.0)
        np.testing.assert_allclose(r[b], metrics.rates(V, Hn[b], s2[b]), rtol=1e-12)


def test_physical_rates_independent_of_normalisation(cell):
    net, ds = cell
    V = gnn.uniform_init(net.M, net.K) * np.sqrt(net.power_mw)
    phys = metrics.rates(V, ds.H[:5], net.noise_mw)
    Hn, s2 = trainer.effective_channel(ds.H[:5], ds.norm_scale[:5], net)
    np.testing.assert_allclose(metrics.rates(gnn.uniform_init(net.M, net.K), Hn, s2), phys, rtol=1e-10)


# comparison ---------------------------------------------------------------------------------

def test_compare_with_itself(cell):
    net, ds = cell
    rep = evaluate("uniform", ds, net)
    rows = compare([rep, rep])
    assert len(rows) == 2 * (net.K + 1)
    for row in rows:
        for k, v in row.items():
            if k.startswith("diff_"):
                assert v == 0.0


def test_compare_requires_same_test_set(cell):
    net, ds = cell
    other = make_dataset(net, 4, 10)
    with pytest.raises(evaluation.ConfigMismatch):
        compare([evaluate("uniform", ds, net), evaluate("uniform", other, net)])


def test_rows_csv_has_header():
    text = evaluation.rows_to_csv([{"user": 0, "mean": 1.5}], "# h\n")
    assert text.splitlines() == ["# h", "user,mean", "0,1.5"]


# sweep ----------------------------------------------------------------------------------------

def test_sweep_single_risk_neutral_row(cell, tmp_path):
    net, ds = cell
    tc = trainer.TrainConfig(epochs=1, batch_size=100, **TINY)
    rows, reports = evaluation.alpha_sweep(ds, ds.subset(slice(0, 20)), net, tc, [1.0], out_dir=tmp_path)
    assert len(rows) == net.K and set(reports) == {1.0}
    assert (tmp_path / "sweep.csv").exists()


def test_sweep_shape_and_grid_validation(cell):
    net, ds = cell
    tc = trainer.TrainConfig(epochs=1, batch_size=100, **TINY)
    rows, _ = evaluation.alpha_sweep(ds, ds.subset(slice(0, 20)), net, tc, [0.3, 1.0])
    assert len(rows) == 2 * net.K
    with pytest.raises(ValueError):
        evaluation.alpha_sweep(ds, ds, net, tc, [0.0])
