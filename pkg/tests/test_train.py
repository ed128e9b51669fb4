import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbmi.bench import gen_lowdim_task, sample_lowdim
from dbmi.core import Coupling, StateSpace, TimeGrid, ValidationError, make_rng
from dbmi.model import ModelConfig, TransitionModel, load_checkpoint
from dbmi.oracle import JointPMF, ReciprocalSpec, transition_tensor
from dbmi.refproc import UniformKernel
from dbmi.train import TrainConfig, build_batch, sample_time_indices, train


@pytest.fixture(scope="module")
def identity_run():
    """Small model trained on the identity coupling x1 = x0, S=2, D=1, N=2."""
    rng = make_rng(0, "data")
    x0 = rng.integers(0, 2, size=(4096, 1))
    cfg = ModelConfig(S=2, D=1, N=2, alpha=0.2, embed_dim=16, hidden_dims=(32, 32))
    ckpt, report = train(x0, x0.copy(), cfg, TrainConfig(epochs=40, batch_size=256, lr=3e-3, ema_decay=0.99))
    space = StateSpace(2, 1)
    spec = ReciprocalSpec(JointPMF(space, np.diag([0.5, 0.5])), UniformKernel(space, 0.2), TimeGrid(2))
    return TransitionModel(cfg), ckpt.eval_params(), spec, report


def worst_tv(model, params, spec, v):
    worst = 0.0
    for n in range(1, spec.grid.N + 2):
        T = transition_tensor(spec, n)
        for a, y in itertools.product(range(2), repeat=2):
            if (n == 1 and a != y) or np.isnan(T[a, y]).any():
                continue
            r = model.transition_probs(params, [y], [a], n, v)[0]
            worst = max(worst, 0.5 * np.abs(r - T[a, y]).sum())
    return worst


def test_identity_coupling_matches_joint_oracle(identity_run):
    model, params, spec, _ = identity_run
    assert worst_tv(model, params, spec, 1) <= 0.05


def test_identity_coupling_v0_matches_product_oracle(identity_run):
    model, params, spec, _ = identity_run
    assert worst_tv(model, params, spec.with_coupling(Coupling.INDEPENDENT), 0) <= 0.05


def test_flag_changes_prediction(identity_run):
    model, params, _, _ = identity_run
    p1 = model.predict_endpoint(params, [0], [0], 2, 1)
    p0 = model.predict_endpoint(params, [0], [0], 2, 0)
    assert 0.5 * np.abs(p1 - p0).sum() > 0.01


def test_report_series_finite(identity_run):
    report = identity_run[3]
    assert len(report.epoch_loss_v0) == len(report.epoch_loss_v1) == 40
    assert np.all(np.isfinite(report.epoch_loss_v0 + report.epoch_loss_v1))
    assert report.steps == 40 * 16


def test_loss_decreases_on_benchmark():
    task = gen_lowdim_task(2, 10, 0.5, make_rng(1, "task"))
    data = sample_lowdim(task, 10_000, make_rng(1, "data"))
    cfg = ModelConfig(S=10, D=2, N=32, alpha=1e-4)
    _, report = train(data.x0, data.x1, cfg, TrainConfig(epochs=10, seed=1))
    total = np.add(report.epoch_loss_v0, report.epoch_loss_v1)
    assert total[9] < total[0]


def test_batch_size_and_derangement():
    cfg = ModelConfig(S=50, D=1, N=4, alpha=0.1)
    model = TransitionModel(cfg)
    K, M = 20, 3
    x0 = np.arange(K)[:, None]
    x1 = np.arange(K)[:, None] + 20  # unique per row, so the pairing is recoverable
    n = np.zeros(K, int)
    batch = build_batch(model, x0, x1, n, M, make_rng(0))
    assert len(batch) == 2 * K * M
    ind = batch.v == 0
    assert ind.sum() == K * M
    assert not np.any(batch.x1[ind][:, 0] - batch.x0[ind][:, 0] == 20)
    assert np.all(batch.x1[~ind][:, 0] - batch.x0[~ind][:, 0] == 20)
    # n = 0 conditions on x0 itself
    np.testing.assert_array_equal(batch.x_prev, batch.x0)


def test_time_indices_uniform():
    N, K = 7, 80_000
    n = sample_time_indices(N, K, make_rng(3))
    assert n.min() == 0 and n.max() == N
    freq = np.bincount(n, minlength=N + 1) / K
    p = 1 / (N + 1)
    assert np.all(np.abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / K))


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValidationError):
        TrainConfig(m_train=0)
    with pytest.raises(ValidationError):
        TrainConfig(ema_decay=1.0)
    cfg = ModelConfig(S=3, D=1, N=2, alpha=0.1)
    with pytest.raises(ValidationError):
        train(np.zeros((10, 1), int), np.zeros((10, 1), int), cfg, TrainConfig(batch_size=16))


def small_problem():
    rng = make_rng(9)
    x0 = rng.integers(0, 3, size=(256, 2))
    x1 = (x0 + rng.integers(0, 2, size=(256, 2))) % 3
    cfg = ModelConfig(S=3, D=2, N=3, alpha=0.1, embed_dim=8, hidden_dims=(16,))
    return x0, x1, cfg


def test_training_is_deterministic():
    x0, x1, cfg = small_problem()
    tc = TrainConfig(epochs=3, batch_size=64, seed=4, ema_decay=0.9)
    a, ra = train(x0, x1, cfg, tc)
    b, rb = train(x0, x1, cfg, tc)
    assert ra.epoch_loss_v0 == rb.epoch_loss_v0 and ra.epoch_loss_v1 == rb.epoch_loss_v1
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
        assert a.ema[k].tobytes() == b.ema[k].tobytes()


def test_resume_matches_uninterrupted(tmp_path):
    x0, x1, cfg = small_problem()
    full, rfull = train(x0, x1, cfg, TrainConfig(epochs=4, batch_size=64, seed=2, ema_decay=0.9))
    train(x0, x1, cfg, TrainConfig(epochs=2, batch_size=64, seed=2, ema_decay=0.9),
          checkpoint_path=tmp_path / "half.npz", log_path=tmp_path / "log.tsv")
    half = load_checkpoint(tmp_path / "half.npz")
    assert half.meta["epochs_done"] == 2
    resumed, rres = train(x0, x1, cfg, TrainConfig(epochs=4, batch_size=64, seed=2, ema_decay=0.9), resume=half,
                          log_path=tmp_path / "log.tsv")
    for k in full.params:
        assert full.params[k].tobytes() == resumed.params[k].tobytes()
        assert full.ema[k].tobytes() == resumed.ema[k].tobytes()
    assert rres.epoch_loss_v1 == rfull.epoch_loss_v1[2:]
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["step", "epoch", "loss_v0", "loss_v1"]
    assert len(lines) == 1 + 4 * 4
    assert [int(l.split("\t")[0]) for l in lines[1:]] == list(range(1, 17))


def test_resume_rejects_other_config(tmp_path):
    x0, x1, cfg = small_problem()
    ck, _ = train(x0, x1, cfg, TrainConfig(epochs=1, batch_size=64))
    other = ModelConfig(S=3, D=2, N=4, alpha=0.1, embed_dim=8, hidden_dims=(16,))
    with pytest.raises(ValidationError):
        train(x0, x1, other, TrainConfig(epochs=2, batch_size=64), resume=ck)


def test_callback_receives_eval_weights():
    x0, x1, cfg = small_problem()
    seen = []
    ck, _ = train(x0, x1, cfg, TrainConfig(epochs=2, batch_size=64, eval_every=1, ema_decay=0.9),
                  callback=lambda epoch, params: seen.append((epoch, params)))
    assert [e for e, _ in seen] == [1, 2]
    assert seen[-1][1]["head_w"].tobytes() == ck.ema["head_w"].tobytes()


@settings(max_examples=40, deadline=None)
@given(K=st.integers(2, 40), M=st.integers(1, 3), N=st.integers(1, 6), seed=st.integers(0, 2**32 - 1))
def test_build_batch_structure_property(K, M, N, seed):
    """Both couplings keep the multiset of x1 and every x_prev is a valid state."""
    model = TransitionModel(ModelConfig(S=3, D=2, N=N, alpha=0.2, embed_dim=2, hidden_dims=(2,)))
    rng = make_rng(seed)
    x0, x1 = rng.integers(0, 3, (K, 2)), rng.integers(0, 3, (K, 2))
    n = sample_time_indices(N, K, rng)
    batch = build_batch(model, x0, x1, n, M, rng)
    assert len(batch) == 2 * K * M
    for v in (0, 1):
        sel = batch.v == v
        np.testing.assert_array_equal(np.sort(batch.x1[sel], axis=0), np.sort(np.tile(x1, (M, 1)), axis=0))
        np.testing.assert_array_equal(np.sort(batch.x0[sel], axis=0), np.sort(np.tile(x0, (M, 1)), axis=0))
    assert batch.x_prev.min() >= 0 and batch.x_prev.max() <= 2
    assert batch.n.min() >= 0 and batch.n.max() <= N
