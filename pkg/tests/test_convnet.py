import math

import numpy as np
import pytest

from brushforge.convnet import (AdamState, NetConfig, Phase, TrainSchedule, _forward, adam_step,
                                ensemble_predict, forward, init_network, load_checkpoint,
                                loss_and_grads, save_checkpoint, train_arrays, train_ensemble)
from oracles import gradient_check

TINY = NetConfig(input_side_px=8, conv_filters=(4,), dense_units=8)


def zeroed(net):
    for v in net.params.values():
        v[...] = 0
    return net


def test_init_deterministic_and_seed_sensitive():
    a, b, c = init_network(TINY, 3), init_network(TINY, 3), init_network(TINY, 4)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert a.params["conv0.W"].tobytes() != c.params["conv0.W"].tobytes()
    assert not a.params["conv0.b"].any() and not a.params["dense2.b"].any()


def test_zero_weights_give_uniform():
    net = zeroed(init_network(TINY, 0))
    x = np.random.default_rng(0).normal(size=(5, 8, 8))
    np.testing.assert_allclose(forward(net, x), 0.25)


def test_feature_sides_and_config_errors():
    assert NetConfig(input_side_px=64, conv_filters=(16, 32, 64)).feature_sides == [32, 16, 8]
    with pytest.raises(ValueError):
        NetConfig(input_side_px=36, conv_filters=(4, 4, 4))
    with pytest.raises(ValueError):
        NetConfig(classes=3)
    with pytest.raises(ValueError):
        NetConfig(kernel_size=2)


def test_softmax_valid_and_eval_deterministic():
    net = init_network(NetConfig(input_side_px=16, conv_filters=(4, 4), dense_units=8), 1)
    x = np.random.default_rng(1).normal(0, 50, size=(7, 16, 16))
    p = forward(net, x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert forward(net, x).tobytes() == p.tobytes()
    with pytest.raises(ValueError):
        forward(net, np.zeros((1, 8, 8)))


def test_identity_micro_net_hand_example():
    cfg = NetConfig(input_side_px=4, conv_filters=(1,), kernel_size=1, dense_units=4)
    net = init_network(cfg, 0, dtype=np.float64)
    net.params["conv0.W"][...] = 1.0
    net.params["dense1.W"] = np.eye(4)
    net.params["dense2.W"] = np.eye(4)
    x = (np.arange(16.0) - 5).reshape(1, 4, 4)
    # ReLU then 2x2 means: [0, 0, 0, 0] [0, 0, 1, 2] [3, 4, 7, 8] [5, 6, 9, 10]
    logits = [0.0, 0.75, 5.5, 7.5]
    e = [math.exp(v) for v in logits]
    expected = [v / sum(e) for v in e]
    np.testing.assert_allclose(forward(net, x)[0], expected, rtol=1e-14)


def test_cross_entropy_ln4_at_zero_weights():
    net = zeroed(init_network(TINY, 0, dtype=np.float64))
    loss, _ = loss_and_grads(net, np.ones((4, 8, 8)), [1, 2, 3, 4])
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    with pytest.raises(ValueError):
        loss_and_grads(net, np.ones((1, 8, 8)), [5])


def test_l2_doubling_adds_penalty():
    import dataclasses
    net = init_network(dataclasses.replace(TINY, dropout_rate=0.0), 2, dtype=np.float64)
    x = np.random.default_rng(2).normal(size=(3, 8, 8))
    y = [1, 3, 4]
    lo, _ = loss_and_grads(net, x, y, train=False)
    net2 = net.copy()
    net2.config = dataclasses.replace(net.config, l2_factor=2 * net.config.l2_factor)
    hi, _ = loss_and_grads(net2, x, y, train=False)
    penalty = net.config.l2_factor * np.sum(net.params["dense1.W"] ** 2)
    assert hi - lo == pytest.approx(penalty, rel=1e-9)


@pytest.mark.parametrize("seed", range(25))
def test_gradients_match_finite_differences(seed):
    worst, _, _ = gradient_check(seed, step=1e-3)
    assert worst <= 1e-4


def test_adam_first_step_closed_form():
    params = {"w": np.array([0.0])}
    adam_step(AdamState(), params, {"w": np.array([2.0])}, 1e-3)
    assert params["w"][0] == pytest.approx(-0.001, abs=1e-6)


def test_adam_zero_gradient_is_fixed_point():
    params = {"w": np.array([1.5, -2.0])}
    st = AdamState()
    for _ in range(50):
        adam_step(st, params, {"w": np.zeros(2)}, 1e-2)
    np.testing.assert_array_equal(params["w"], [1.5, -2.0])


def test_adam_deterministic_trajectory():
    def run():
        rng = np.random.default_rng(5)
        params = {"w": np.zeros(3)}
        st = AdamState()
        for _ in range(20):
            adam_step(st, params, {"w": rng.normal(size=3)}, 1e-3)
        return params["w"].tobytes()
    assert run() == run()


def constant_task(n):
    x = np.concatenate([np.zeros((n // 2, 8, 8)), np.ones((n // 2, 8, 8))])
    y = np.array([1] * (n // 2) + [2] * (n // 2))
    return x, y


def test_two_artist_toy_task():
    xt, yt = constant_task(20)
    xv, yv = constant_task(6)
    sched = TrainSchedule((Phase(1e-3, 25, batch_size=4),))
    res = train_arrays(init_network(TINY, 0), xt, yt, xv, yv, sched, seed=0)
    assert res.best_val_acc == 1.0
    again = train_arrays(init_network(TINY, 0), xt, yt, xv, yv, sched, seed=0)
    assert res.log == again.log
    with pytest.raises(ValueError):
        train_arrays(init_network(TINY, 0), xt, yt, xv[:0], yv[:0], sched)
    with pytest.raises(ValueError):
        TrainSchedule((Phase(1e-3, 0),))


def test_memorize_eight_patches():
    cfg = NetConfig(input_side_px=8, conv_filters=(8,), dense_units=32, dropout_rate=0.0,
                    l2_factor=0.0)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(8, 8, 8))
    y = np.array([1, 2, 3, 4] * 2)
    res = train_arrays(init_network(cfg, 1), x, y, x, y,
                       TrainSchedule((Phase(1e-2, 200, batch_size=8),)), seed=1)
    assert min(r.train_loss for r in res.log) <= 0.01


def test_inverted_dropout_expectation():
    # positive weights and inputs keep every ReLU active, so the net is linear
    cfg = NetConfig(input_side_px=4, conv_filters=(2,), kernel_size=1, dense_units=3,
                    dropout_rate=0.5)
    net = init_network(cfg, 0, dtype=np.float64)
    rng = np.random.default_rng(7)
    for k in net.params:
        net.params[k] = np.abs(rng.normal(size=net.params[k].shape))
    x = np.abs(rng.normal(size=(1, 4, 4, 1)))
    ev = _forward(net, x, False)[0][0]
    rng = np.random.default_rng(8)
    samples = np.array([_forward(net, x, True, rng)[0][0] for _ in range(10_000)])
    se = samples.std(axis=0) / math.sqrt(len(samples))
    assert np.all(np.abs(samples.mean(axis=0) - ev) <= 4 * se)


def test_ensemble_mean_and_single_member(monkeypatch):
    class Fixed:
        def __init__(self, p):
            self.p = np.asarray(p, dtype=float)

    with monkeypatch.context() as mp:
        mp.setattr("brushforge.convnet.forward", lambda net, x: np.tile(net.p, (len(x), 1)))
        m = ensemble_predict([Fixed([1, 0, 0, 0]), Fixed([0, 1, 0, 0])], np.zeros((2, 1)))
        np.testing.assert_array_equal(m, [[0.5, 0.5, 0, 0]] * 2)
    net = init_network(TINY, 9)
    x = np.random.default_rng(9).normal(size=(3, 8, 8))
    np.testing.assert_allclose(ensemble_predict([net], x), forward(net, x))
    np.testing.assert_allclose(ensemble_predict([net, init_network(TINY, 10)], x).sum(axis=1),
                               1.0, atol=1e-6)
    with pytest.raises(ValueError):
        ensemble_predict([], x)


def test_checkpoint_roundtrip(tmp_path):
    net = init_network(TINY, 11)
    save_checkpoint(net, tmp_path / "m.cnnw")
    back = load_checkpoint(tmp_path / "m.cnnw", TINY)
    x = np.random.default_rng(11).normal(size=(4, 8, 8))
    assert forward(back, x).tobytes() == forward(net, x).tobytes()
    assert (tmp_path / "m.cnnw").read_bytes()[:4] == b"CNNW"
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "m.cnnw", NetConfig(input_side_px=8, conv_filters=(4,),
                                                      dense_units=9))


def test_ensemble_jobs_invariant():
    xt, yt = constant_task(8)
    sched = TrainSchedule((Phase(1e-3, 2),))
    a = train_ensemble(TINY, xt, yt, xt, yt, 2, sched, seed=3, jobs=1)
    b = train_ensemble(TINY, xt, yt, xt, yt, 2, sched, seed=3, jobs=2)
    assert a.seeds == b.seeds and a.seeds[0] != a.seeds[1]
    for na, nb in zip(a.members, b.members):
        for k in na.params:
            assert na.params[k].tobytes() == nb.params[k].tobytes()
    assert a.members[0].params["conv0.W"].tobytes() != a.members[1].params["conv0.W"].tobytes()
