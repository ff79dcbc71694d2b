import math

import numpy as np
import pytest

from kktrecon.data import Dataset, SyntheticSpec, make_synthetic
from kktrecon.mlp import InitScheme, MarginJacobian, MlpParams, init_params
from kktrecon.trainer import (TrainConfig, TrainingDivergedError, cross_entropy, fit_dual_coefficients, kkt_audit,
                              on_margin_fraction, read_train_config, train, train_config_from_text)
from oracles import central_difference, plain_cross_entropy, relative_error
from conftest import generic_points


@pytest.fixture
def small_set():
    return make_synthetic(SyntheticSpec(3, 5, 6, seed=0))


def test_cross_entropy_equal_logits_is_log_c():
    p = MlpParams([np.zeros((4, 5))])
    ds = Dataset(np.ones((3, 4)), [0, 2, 4], 5)
    loss, grad = cross_entropy(p, ds)
    assert loss == pytest.approx(math.log(5), rel=1e-14)


def test_cross_entropy_closed_form_two_classes():
    p = MlpParams([np.array([[10.0, -10.0]])])
    loss, _ = cross_entropy(p, Dataset(np.array([[1.0]]), [0], 2))
    assert loss == pytest.approx(math.log1p(math.exp(-20)), rel=1e-10)


def test_cross_entropy_stable_for_huge_logits():
    p = MlpParams([np.array([[1e4, -1e4]])])
    loss, grad = cross_entropy(p, Dataset(np.array([[1.0], [-1.0]]), [0, 0], 2))
    assert math.isfinite(loss) and np.all(np.isfinite(grad))
    assert loss == pytest.approx(1e4, rel=1e-12)


def test_cross_entropy_gradient_matches_finite_differences(tiny_params, rng):
    for X, y in generic_points(tiny_params, rng, 20, n_per_point=4):
        ds = Dataset(X, y, 3)
        _, grad = cross_entropy(tiny_params, ds)
        fd = central_difference(lambda t: plain_cross_entropy(tiny_params.unflatten(t), X, y), tiny_params.flatten())
        assert relative_error(grad, fd) <= 1e-6


def test_cross_entropy_matches_plain_oracle(tiny_params, small_set):
    loss, _ = cross_entropy(tiny_params, small_set)
    assert loss == pytest.approx(plain_cross_entropy(tiny_params.layer_weights, small_set.samples, small_set.labels),
                                 rel=1e-12)


def test_zero_learning_rate_leaves_params(small_set, tiny_params):
    out, _ = train(tiny_params, small_set, TrainConfig(learning_rate=0.0, epochs=5, checkpoint_every=2))
    assert all(np.array_equal(a, b) for a, b in zip(out.layer_weights, tiny_params.layer_weights))


def test_train_does_not_mutate_input(small_set, tiny_params):
    before = tiny_params.flatten().copy()
    train(tiny_params, small_set, TrainConfig(epochs=3))
    assert np.array_equal(before, tiny_params.flatten())


def test_weight_decay_step_is_shrink_then_step(small_set, tiny_params):
    lr, wd = 0.3, 0.05
    out, _ = train(tiny_params, small_set, TrainConfig(learning_rate=lr, epochs=1, weight_decay=wd))
    _, g = cross_entropy(tiny_params, small_set)
    expected = (1 - lr * wd) * tiny_params.flatten() - lr * g
    np.testing.assert_array_equal(out.flatten(), expected)


def test_checkpoints_and_report(small_set, tiny_params):
    _, rep = train(tiny_params, small_set, TrainConfig(epochs=25, checkpoint_every=10))
    epochs = [c.epoch for c in rep.checkpoints]
    assert epochs == [0, 10, 20, 25]
    lines = rep.to_csv().splitlines()
    assert lines[0] == "epoch,loss,train_error,test_error,mean_margin,min_margin,on_margin_fraction,kkt_residual"
    assert len(lines) == 5
    assert math.isnan(rep.final.test_error)


def test_reaches_zero_error_and_loss_decreases(small_set, tiny_params):
    _, rep = train(tiny_params, small_set, TrainConfig(epochs=3000, checkpoint_every=100), test=small_set)
    assert rep.final.train_error == 0.0 and rep.final.test_error == 0.0
    zero = next(k for k, c in enumerate(rep.checkpoints) if c.train_error == 0)
    losses = [c.loss for c in rep.checkpoints[zero:]]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_training_is_bit_deterministic(small_set):
    cfg = TrainConfig(epochs=200, weight_decay=1e-3, init=InitScheme("standard", 5))
    a, _ = train(init_params(cfg.init, [6, 8, 3]), small_set, cfg)
    b, _ = train(init_params(cfg.init, [6, 8, 3]), small_set, cfg)
    assert np.array_equal(a.flatten(), b.flatten())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch(small_set):
    p = init_params(InitScheme("standard", 0), [6, 8, 3])
    with pytest.raises(TrainingDivergedError) as err:
        train(p, small_set, TrainConfig(learning_rate=1e300, epochs=50))
    assert err.value.epoch >= 1 and "epoch" in str(err.value)


def test_config_validation():
    for bad in (dict(learning_rate=-1), dict(epochs=0), dict(weight_decay=-0.1), dict(checkpoint_every=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_config_file(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("learning_rate = 0.25\nepochs = 40\n[train]\nweight_decay = 0.001\ninit_kind = small_first_layer\n"
                    "init_seed = 9\n")
    cfg = read_train_config(path)
    assert (cfg.learning_rate, cfg.epochs, cfg.weight_decay) == (0.25, 40, 0.001)
    assert cfg.init.kind == "small_first_layer" and cfg.init.seed == 9
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        train_config_from_text("epochz = 3\n")


def constructed_dual_instance(seed=0):
    """Binary linear model whose weights are exactly 2 g_1 + 3 g_2.

    With two classes the runner-up is fixed, so the margin gradients
    ``x_i (e_y - e_other)^T`` do not depend on the weights.
    """
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(5, 6))
    y = np.array([0, 1, 0, 1, 1])
    G = MarginJacobian(MlpParams([np.ones((6, 2))]), X, y).flat_gradients()
    return MlpParams([(2 * G[0] + 3 * G[1]).reshape(6, 2)]), Dataset(X, y, 2)


def test_dual_recovery_constructed():
    params, ds = constructed_dual_instance()
    lam, res = fit_dual_coefficients(params, ds, max_iter=200000, tol=1e-15)
    np.testing.assert_allclose(lam, [2, 3, 0, 0, 0], atol=1e-4)
    assert res <= 1e-6


def test_dual_single_orthogonal_sample():
    # theta = e_0 column 0; the single sample's gradient lives on row 1
    W = np.zeros((2, 2))
    W[0, 0] = 1.0
    p = MlpParams([W])
    lam, res = fit_dual_coefficients(p, Dataset(np.array([[0.0, 1.0]]), [0], 2))
    assert lam.tolist() == [0.0] and res == 1.0


def test_dual_nonnegative_and_monotone(small_set, tiny_params):
    trained, _ = train(tiny_params, small_set, TrainConfig(epochs=300))
    lam, res, hist = fit_dual_coefficients(trained, small_set, max_iter=500, return_history=True)
    assert np.all(lam >= 0)
    assert np.all(np.diff(hist) <= 1e-12)
    assert hist[-1] == pytest.approx(res, rel=1e-6)


def test_dual_matches_scipy_nnls(small_set, tiny_params):
    scipy_opt = pytest.importorskip("scipy.optimize")
    trained, _ = train(tiny_params, small_set, TrainConfig(epochs=300))
    G = MarginJacobian(trained, small_set.samples, small_set.labels).flat_gradients()
    theta = trained.flatten()
    _, rnorm = scipy_opt.nnls(G.T, theta)
    _, res = fit_dual_coefficients(trained, small_set, max_iter=100000, tol=1e-14)
    assert res == pytest.approx(rnorm / np.linalg.norm(theta), abs=1e-6)


def test_residual_decreases_with_weight_decay(small_set):
    p = init_params(InitScheme("standard", 0), [6, 8, 3])
    _, rep = train(p, small_set, TrainConfig(learning_rate=0.5, epochs=20000, weight_decay=1e-3,
                                             checkpoint_every=2000))
    zero = next(c for c in rep.checkpoints if c.train_error == 0)
    assert rep.final.kkt_residual < zero.kkt_residual


def test_kkt_audit_untrained_net_violates(small_set, tiny_params):
    audit = kkt_audit(tiny_params, small_set)
    assert audit.violations == small_set.n
    assert set(audit.as_dict()) == {"stationarity_residual", "min_margin", "max_margin", "violations",
                                    "slackness_violation_fraction"}


def test_kkt_audit_linear_trained_long():
    ds = make_synthetic(SyntheticSpec(2, 6, 4, seed=1))
    p = init_params(InitScheme("small_first_layer", 0), [4, 2])
    trained, _ = train(p, ds, TrainConfig(learning_rate=5.0, epochs=20000, checkpoint_every=20000))
    audit = kkt_audit(trained, ds)
    assert audit.violations == 0 and audit.min_margin == pytest.approx(1.0)
    assert audit.stationarity_residual <= 0.1


def test_zero_duals_give_residual_one(tiny_params, small_set):
    from kktrecon.trainer import _relative_residual
    jac = MarginJacobian(tiny_params, small_set.samples, small_set.labels)
    sq = float(sum(np.vdot(w, w) for w in tiny_params.layer_weights))
    assert _relative_residual(jac, tiny_params.layer_weights, np.zeros(small_set.n), sq) == 1.0


def test_on_margin_fraction():
    assert on_margin_fraction(np.array([1.0, 1.05, 2.0, 3.0]), 0.1) == 0.5
    assert math.isnan(on_margin_fraction(np.array([-1.0, 2.0]), 0.1))
