import numpy as np
import pytest

from riskbeam import gnn, metrics, trainer
from riskbeam import numerics as nx
from riskbeam.channel import NetworkConfig, make_dataset
from riskbeam.trainer import TrainConfig, lr_schedule, t_step, theta_step

TINY = dict(L=2, d_u=2, d_w=2, hidden=8, msg=4)


def _tiny_setup(K=2, M=2, n=64, alpha=1.0, seed=0):
    net = NetworkConfig(K=K, M=M, user_distances=np.linspace(30, 60, K), alpha=alpha)
    ds = make_dataset(net, seed, n)
    return net, ds


# loss -----------------------------------------------------------------------------------

def test_loss_inactive_hinges(rng):
    H = rng.standard_normal((3, 2, 2)) + 1j * rng.standard_normal((3, 2, 2))
    tape = nx.Tape()
    v = tape.var(rng.standard_normal((3, 2, 4)))
    loss, r = trainer.sample_loss(v, H, np.full(2, -1.0), np.ones(2), np.ones(2), 0.1)
    assert loss.value == 0.0
    (g,) = tape.gradient(loss, [v])
    assert not g.any()


def test_loss_single_active_hinge(rng):
    H = rng.standard_normal((1, 2, 3)) + 1j * rng.standard_normal((1, 2, 3))
    v = rng.standard_normal((1, 3, 4))
    r = gnn.tape_rates(v, H, 0.1).value[0]
    t = r - 1.0
    t[1] = r[1] + 0.25
    gamma, alpha = np.array([1.0, 2.0, 1.0]), np.array([0.5, 0.4, 1.0])
    loss, _ = trainer.sample_loss(v, H, t, gamma, alpha, 0.1)
    assert float(loss.value) == pytest.approx(2.0 / 0.4 * 0.25)


def test_loss_loop_oracle(rng):
    B, K = 5, 3
    H = rng.standard_normal((B, 2, K)) + 1j * rng.standard_normal((B, 2, K))
    v = rng.standard_normal((B, K, 4))
    s2 = rng.uniform(0.1, 1, (B, K))
    t, gamma, alpha = rng.uniform(0, 2, K), rng.uniform(0.5, 2, K), rng.uniform(0.2, 1, K)
    loss, r = trainer.sample_loss(v, H, t, gamma, alpha, s2)
    ref = 0.0
    for b in range(B):
        V = gnn.realified_to_precoder(v[b])
        for i in range(K):
            ri = metrics.user_rate(V, H[b][:, i], i, s2[b, i])
            assert r[b, i] == pytest.approx(ri, rel=1e-12)
            ref += gamma[i] / alpha[i] * max(t[i] - ri, 0.0)
    assert float(loss.value) == pytest.approx(ref / B, rel=1e-12)


# update rules ----------------------------------------------------------------------------

def test_theta_step_trivial_cases(rng):
    th = rng.standard_normal(5)
    np.testing.assert_array_equal(theta_step(th, np.zeros(5), 0.1), th)
    np.testing.assert_array_equal(theta_step(th, rng.standard_normal(5), 0.0), th)
    with pytest.raises(trainer.NonFiniteError):
        theta_step(th, np.array([0, np.nan, 0, 0, 0]), 0.1)


def test_theta_step_quadratic_converges():
    th = np.array([5.0])
    for _ in range(200):
        th = theta_step(th, 2 * (th - 1.5), 0.1)
    assert abs(th[0] - 1.5) < 1e-6


def test_t_step_below_all_rates():
    t = t_step(np.zeros(2), np.full((4, 2), 3.0), 0.1, np.array([1.0, 2.0]), np.array([0.3, 0.8]))
    np.testing.assert_allclose(t, [0.1, 0.2])


def test_t_step_above_all_rates():
    t = t_step(np.full(2, 5.0), np.ones((4, 2)), 0.1, np.ones(2), np.array([0.3, 1.0]))
    np.testing.assert_allclose(t, [5.0 + 0.1 / 0.3 * (0.3 - 1.0), 5.0])


def test_t_step_tie_counts_as_inactive():
    t = t_step(np.ones(1), np.ones((1, 1)), 0.5, np.ones(1), np.array([0.5]))
    assert t[0] == pytest.approx(1.5)


def test_quantile_tracking_short():
    gen = np.random.default_rng(1)
    alpha = np.array([0.3, 0.7])
    t = np.zeros(2)
    for k in range(20_000):
        r = gen.exponential([1.0, 2.0], size=(64, 2))
        t = t_step(t, r, 0.5 / (1 + k) ** 0.6, np.ones(2), alpha)
    q = -np.log(1 - alpha) * np.array([1.0, 2.0])
    np.testing.assert_allclose(t, q, rtol=0.02)


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == (1e-3, 1e-5)
    assert lr_schedule(4, cfg) == (1e-3, 1e-5)
    th, tt = lr_schedule(6, cfg)
    assert th == pytest.approx(1e-3 * 0.794 ** 2) and tt == pytest.approx(1e-5 * 0.912 ** 2)
    assert lr_schedule(5, cfg)[0] == pytest.approx(1e-3 * 0.794)
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


def test_train_config_validation_and_text(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    cfg = TrainConfig(epochs=3, shared=False, optimizer="adam", lr_t=0.25)
    (tmp_path / "c.txt").write_text(trainer.train_config_to_text(cfg))
    assert trainer.load_train_config(tmp_path / "c.txt") == cfg


# gradients ---------------------------------------------------------------------------------

def gradient_check(params, Hn, s2, t, net, tc, gen, n_coords=40, n_dirs=4):
    """Relative error of the tape gradient against central differences.

    Checks a random coordinate subset touching every parameter block plus a
    few random directional derivatives. Returns None for draws near a kink.
    """
    _, grad, _, margin = trainer.loss_and_grad(params, Hn, s2, t, net, tc, track_kinks=True)
    if margin < 1e-6:
        return None
    theta0 = params.theta.copy()
    bounds = np.cumsum([0] + [int(np.prod(s)) for _, s in params.arch.shapes()])
    per_block = max(1, n_coords // (len(bounds) - 1))
    idx = np.unique(np.concatenate([gen.integers(a, b, per_block) for a, b in zip(bounds[:-1], bounds[1:])]))

    def f_coords(sub):
        th = theta0.copy()
        th[idx] = sub
        return trainer.loss_value(params, th, Hn, s2, t, net, tc)

    fd = nx.central_difference(f_coords, theta0[idx].copy())
    err = np.max(np.abs(grad[idx] - fd)) / max(1.0, np.max(np.abs(fd)))
    for _ in range(n_dirs):
        d = gen.standard_normal(theta0.size)
        d /= np.linalg.norm(d)
        fd_d = nx.central_difference(lambda s: trainer.loss_value(params, theta0 + s[0] * d, Hn, s2, t, net, tc),
                                     np.zeros(1))[0]
        err = max(err, abs(grad @ d - fd_d) / max(1.0, abs(fd_d)))
    return err


def test_end_to_end_gradient_downsized():
    net, ds = _tiny_setup(alpha=0.7)
    tc = TrainConfig(**TINY)
    Hn, s2 = trainer.effective_channel(ds.H[:4], ds.norm_scale[:4], net)
    gen = np.random.default_rng(2)
    done = 0
    while done < 3:
        params = gnn.init_params(tc.arch(2), int(gen.integers(1 << 30)))
        t = gen.uniform(0, 8, 2)
        err = gradient_check(params, Hn, s2, t, net, tc, gen)
        if err is None:
            continue
        assert err < 1e-4
        done += 1


def test_risk_neutral_degeneracy():
    net, ds = _tiny_setup(alpha=1.0)
    net = net.replace(gamma=[1.0, 2.5])
    tc = TrainConfig(**TINY)
    Hn, s2 = trainer.effective_channel(ds.H[:8], ds.norm_scale[:8], net)
    params = gnn.init_params(tc.arch(2), 3)
    _, grad, r, _ = trainer.loss_and_grad(params, Hn, s2, np.full(2, 1e3), net, tc)
    tape = nx.Tape()
    leaves = params.on_tape(tape)
    v = gnn.unfold_core(trainer.batch_graph(Hn, net, tc), leaves, params.arch)
    wsr = nx.vsum(nx.mul(gnn.tape_rates(v, Hn, s2), net.gamma))
    tape.backward(wsr)
    np.testing.assert_allclose(grad, -params.flat_grad(leaves) / 8, rtol=1e-10, atol=1e-14)


# training loop -------------------------------------------------------------------------------

def test_one_epoch_one_batch_is_one_step():
    net, ds = _tiny_setup(n=64)
    res = trainer.train(ds, net, TrainConfig(epochs=1, batch_size=64, **TINY))
    assert res.steps == 1 and res.history[0].steps == 1


def test_partial_batches_kept():
    net, ds = _tiny_setup(n=70)
    res = trainer.train(ds, net, TrainConfig(epochs=2, batch_size=32, **TINY))
    assert res.steps == 6


def test_training_outputs_and_reproducibility(tmp_path):
    net, ds = _tiny_setup(n=96, alpha=0.7)
    tc = TrainConfig(epochs=3, batch_size=32, lr_t=0.05, **TINY)
    a = trainer.train(ds, net, tc, out_dir=tmp_path / "a")
    b = trainer.train(ds, net, tc, out_dir=tmp_path / "b")
    assert a.checkpoint_hashes == b.checkpoint_hashes
    assert (tmp_path / "a" / "policy.bin").exists()
    assert (tmp_path / "a" / "ckpt_epoch002.bin").exists()
    log = (tmp_path / "a" / "train_log.csv").read_text().splitlines()
    assert log[0].startswith("epoch,objective,mean_rate_0") and len(log) == 4
    params, t, meta, _ = trainer.load_training_checkpoint(tmp_path / "a" / "policy.bin")
    np.testing.assert_array_equal(params.theta, a.params.theta)
    np.testing.assert_array_equal(t, a.t)
    assert meta["config_hash"] == trainer.config_hash(net, tc)


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_resume_is_bit_identical(tmp_path, optimizer):
    net, ds = _tiny_setup(n=96, alpha=0.7)
    tc = TrainConfig(epochs=4, batch_size=32, lr_t=0.05, optimizer=optimizer, warmup_epochs=1, **TINY)
    full = trainer.train(ds, net, tc, out_dir=tmp_path / "full")
    trainer.train(ds, net, tc.replace(epochs=2), out_dir=tmp_path / "half")
    # a checkpoint written under another epoch budget belongs to a different config
    with pytest.raises(ValueError):
        trainer.train(ds, net, tc, resume=tmp_path / "half" / "ckpt_epoch001.bin")
    resumed = trainer.train(ds, net, tc, out_dir=tmp_path / "res", resume=tmp_path / "full" / "ckpt_epoch001.bin")
    assert resumed.params.theta.tobytes() == full.params.theta.tobytes()
    assert resumed.t.tobytes() == full.t.tobytes()
    assert resumed.checkpoint_hashes[-1] == full.checkpoint_hashes[-1]


def test_dataset_shape_mismatch():
    net, ds = _tiny_setup()
    with pytest.raises(ValueError):
        trainer.train(ds, net.replace(M=3), TrainConfig(epochs=1, **TINY))


def test_non_finite_loss_names_samples():
    net, ds = _tiny_setup(n=8)
    ds.H[3] = np.nan
    with pytest.raises(trainer.NonFiniteError, match="3"):
        trainer.train(ds, net, TrainConfig(epochs=1, batch_size=8, **TINY))
