import numpy as np
import pytest

from helpers import constant_agent, linear_surrogate
from pgsearch.agents import CqlConfig
from pgsearch.osel import (
    EncoderConfig,
    GridSpec,
    embed,
    encoder_loss,
    hyperparameter_select,
    knn_estimate,
    load_encoder,
    osel_score,
    save_encoder,
    save_grid,
    select_cell,
    train_encoder,
)
from pgsearch.search import pick_starts
from pgsearch.surrogate import SurrogateConfig, train_surrogate
from pgsearch.tasks import generate_offline_dataset, get_task, make_dataset
from pgsearch.trajectories import synthesize_trajectories

ENC = EncoderConfig(latent_dim=4, window=3, hidden=16, layers=2, n_traj=60, T=10, epochs=3, batch_size=64, lr=1e-3)


@pytest.fixture(scope="module")
def small():
    ds = generate_offline_dataset(get_task("quadratic-bowl"), 500, 40, seed=0)
    return ds, train_encoder(ds, ENC, seed=0)


def brute_knn(bank, q, y, k):
    d = [(float(np.sum((q - b) ** 2)), i) for i, b in enumerate(bank)]
    d.sort()
    return float(np.mean([y[i] for _, i in d[:k]]))


def test_knn_matches_brute_force(small):
    ds, enc = small
    bank = embed(enc, ds.inputs)
    rng = np.random.default_rng(0)
    X = rng.uniform(-2, 2, size=(25, 5))
    est = knn_estimate(enc, ds, X, k=10)
    for x, e in zip(X, est):
        assert e == brute_knn(bank, embed(enc, x[None, :])[0], ds.outputs, 10)
    assert knn_estimate(enc, ds, X[0], k=10) == est[0]


def test_knn_all_points_is_mean(small):
    ds, enc = small
    assert knn_estimate(enc, ds, np.zeros(5), k=ds.n) == pytest.approx(ds.outputs.mean(), rel=1e-12)
    with pytest.raises(ValueError):
        knn_estimate(enc, ds, np.zeros(5), k=0)
    with pytest.raises(ValueError):
        knn_estimate(enc, ds, np.zeros(5), k=ds.n + 1)


def test_knn_exact_point(small):
    ds, enc = small
    bank = embed(enc, ds.inputs)
    i = 7
    dist = np.sum((bank - bank[i]) ** 2, axis=1)
    if np.sum(dist == 0) == 1:
        assert knn_estimate(enc, ds, ds.inputs[i], k=1) == ds.outputs[i]


def test_knn_ties_take_lower_index():
    # all embeddings identical -> the first k indices win
    x = np.zeros((6, 2))
    ds = make_dataset("quadratic-bowl", x, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 0.0, 7.0, -2, 2)
    enc = train_encoder(ds, EncoderConfig(latent_dim=2, window=2, hidden=4, n_traj=5, T=4, epochs=1), 0)
    assert knn_estimate(enc, ds, np.zeros(2), k=2) == 1.5


def test_constant_outputs_give_zero_loss():
    x = np.random.default_rng(0).uniform(-1, 1, size=(80, 3))
    ds = make_dataset("quadratic-bowl", x, np.full(80, 4.0), 0.0, 5.0, -2, 2)
    enc = train_encoder(ds, ENC, seed=0)
    assert enc.loss_log[-1] < 1e-8


def test_training_reduces_held_out_loss(small):
    ds, _ = small
    cfg = EncoderConfig(latent_dim=8, window=4, hidden=32, n_traj=200, T=20, epochs=8, lr=1e-3)
    enc = train_encoder(ds, cfg, seed=1)
    untrained = train_encoder(ds, EncoderConfig(**{**cfg.__dict__, "epochs": 0}), seed=1)
    held_out = synthesize_trajectories(np.arange(ds.n), 100, 20, seed=999)
    assert encoder_loss(enc, ds, held_out) < encoder_loss(untrained, ds, held_out)


def test_encoder_deterministic_and_round_trip(small, tmp_path):
    ds, enc = small
    again = train_encoder(ds, ENC, seed=0)
    assert all(np.array_equal(a, b) for a, b in zip(enc.net.params(), again.net.params()))
    save_encoder(enc, tmp_path / "e.ckpt")
    back = load_encoder(tmp_path / "e.ckpt")
    assert np.array_equal(embed(back, ds.inputs[:4]), embed(enc, ds.inputs[:4]))
    assert back.window == 3


def test_zero_actor_scores_start_points(small):
    ds, enc = small
    s = linear_surrogate(np.ones(5), -2, 2)
    agent = constant_agent(5, 0.0)
    starts = pick_starts(ds, 16)
    assert osel_score(enc, ds, s, agent, N=16, T=10) == pytest.approx(np.mean(knn_estimate(enc, ds, starts, 10)))
    assert osel_score(enc, ds, s, agent, N=1, T=3) == knn_estimate(enc, ds, pick_starts(ds, 1)[0], 10)


def test_select_cell_rules():
    assert select_cell({(40.0, 50): 1.0}) == ((40.0, 50), {})
    assert select_cell({(10.0, 50): 1.0, (20.0, 100): 2.0})[0] == (20.0, 100)
    tied = {(10.0, 100): 5.0, (20.0, 50): 5.0 + 1e-12, (30.0, 50): 4.0}
    # re-score prefers (10, 100)
    sel, ties = select_cell(tied, lambda c: {(10.0, 100): 3.0, (20.0, 50): 2.0}[c])
    assert sel == (10.0, 100) and set(ties) == {(10.0, 100), (20.0, 50)}
    # re-score tie again -> fewer epochs, then smaller p
    assert select_cell(tied, lambda c: 1.0)[0] == (20.0, 50)
    assert select_cell({(30.0, 50): 1.0, (20.0, 50): 1.0}, lambda c: 0.0)[0] == (20.0, 50)
    with pytest.raises(ValueError):
        select_cell({})


TINY_AGENT = CqlConfig(steps_per_epoch=2, batch_size=32, hidden=8, n_actions=4)


@pytest.fixture(scope="module")
def tuned(small):
    ds, enc = small
    s = train_surrogate(ds, SurrogateConfig(hidden=16, epochs=2))
    grid = GridSpec(p_values=(20.0, 40.0), max_epochs=2, interval=1)
    return ds, s, enc, hyperparameter_select(ds, s, enc, grid, (0,), TINY_AGENT, m=10, T=10, N=8, k=5, k_tie=20)


def test_grid_selects_argmax(tuned):
    _, _, _, res = tuned
    assert set(res.scores) == {(20.0, 1), (20.0, 2), (40.0, 1), (40.0, 2)}
    assert res.scores[res.selected] == max(res.scores.values())


def test_single_cell_and_missing(small, tuned):
    ds, s, enc, _ = tuned
    grid = GridSpec(p_values=(40.0, 0.5), max_epochs=1, interval=1)
    res = hyperparameter_select(ds, s, enc, grid, (0,), TINY_AGENT, m=5, T=10, N=4, k=5)
    assert res.selected == (40.0, 1) and res.missing == [0.5]


def test_default_grid_has_32_cells():
    assert len(GridSpec().p_values) * len(GridSpec().epoch_values) == 32


def test_grid_csv(tuned, tmp_path):
    *_, res = tuned
    save_grid(res, tmp_path / "g.csv", "abc")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "p,epochs,osel_score,selected,config_hash"
    assert len(lines) == 5 and sum(",True," in l for l in lines) == 1
