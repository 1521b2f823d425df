import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advlens import tensor as T
from advlens.advtrain import TrainConfig, train
from advlens.attacks import (AttackConfig, attack_success_rate, fgsm, frequency_filtered_attack, pgd,
                             predict, radius_step_sweep, transfer_attack_matrix)
from advlens.data import synthetic_dataset
from advlens.frequency import custom_mask, make_mask
from advlens.models import Classifier, ConfigError
from advlens.tensor import Tensor

from conftest import tiny_config


class Linear:
    """logits = x W + b on flattened inputs."""

    def __init__(self, W, b=None):
        self.W = Tensor(np.asarray(W, dtype=float))
        self.b = Tensor(np.zeros(self.W.shape[1]) if b is None else np.asarray(b, dtype=float))

    def __call__(self, x):
        x = T.as_tensor(x)
        return T.matmul(T.reshape(x, (x.shape[0], -1)), self.W) + self.b


class Recorder:
    """Wraps a model and keeps every input it was evaluated on."""

    def __init__(self, model):
        self.model, self.seen = model, []

    def __call__(self, x):
        self.seen.append(np.array(x.data))
        return self.model(x)


def test_config_invariants():
    with pytest.raises(ConfigError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(ConfigError):
        AttackConfig(n_iter=0)
    with pytest.raises(ConfigError):
        AttackConfig(step_size=0.0, n_iter=5)
    assert AttackConfig(epsilon=0.04, n_iter=10).alpha == pytest.approx(0.01)


def test_fgsm_eps_zero_is_identity(rng):
    model = Classifier(tiny_config("cnn"), seed=0)
    x, y = rng.random((6, 2, 8, 8)), rng.integers(0, 3, 6)
    res = fgsm(model, x, y, AttackConfig(epsilon=0.0))
    np.testing.assert_array_equal(res.x_adv, x)
    assert not res.success.any()
    np.testing.assert_array_equal(res.adv_pred, res.clean_pred)


def test_fgsm_zero_gradient_is_identity(rng):
    model = Linear(np.zeros((4, 3)), [1.0, 0.0, 0.0])
    x = rng.random((5, 4))
    np.testing.assert_array_equal(fgsm(model, x, np.zeros(5, int), AttackConfig(epsilon=0.1)).x_adv, x)


def test_fgsm_scalar_closed_form():
    # logits [0, w x] with label 0: loss log(1 + e^{wx}) rises in x for w > 0
    model = Linear([[0.0, 2.0]])
    x0 = np.array([[0.2], [0.95]])
    res = fgsm(model, x0, np.zeros(2, int), AttackConfig(epsilon=0.1))
    np.testing.assert_allclose(res.x_adv, np.minimum(x0 + 0.1, 1.0), rtol=0, atol=1e-15)


def test_pgd_single_step_equals_fgsm(rng):
    model = Classifier(tiny_config("vit"), seed=2)
    x, y = rng.random((5, 2, 8, 8)), rng.integers(0, 3, 5)
    cfg = AttackConfig(epsilon=0.05, n_iter=1, step_size=0.05, random_start=False)
    np.testing.assert_array_equal(pgd(model, x, y, cfg).x_adv, fgsm(model, x, y, cfg).x_adv)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 0.3), st.integers(1, 6), st.integers(1, 2), st.booleans(), st.booleans(),
       st.integers(0, 1000))
def test_every_iterate_respects_ball_and_range(eps, n_iter, restarts, rand, clamp, seed):
    rng = np.random.default_rng(seed)
    model = Recorder(Linear(rng.normal(size=(6, 3))))
    x0 = rng.random((4, 6))
    cfg = AttackConfig(epsilon=eps, n_iter=n_iter, n_restarts=restarts, random_start=rand,
                       clamp_to_valid_range=clamp, seed=seed, step_size=0.05)
    res = pgd(model, x0, rng.integers(0, 3, 4), cfg)
    for x in model.seen:
        assert np.abs(x - x0).max() <= eps + 1e-9
        if clamp:
            assert x.min() >= 0 and x.max() <= 1
    assert res.linf.max() <= eps + 1e-9
    assert np.all(np.diff(res.loss_trajectory, axis=1) >= 0)


def test_trajectory_starts_at_clean_loss(rng):
    model = Classifier(tiny_config("cnn"), seed=0)
    x, y = rng.random((4, 2, 8, 8)), rng.integers(0, 3, 4)
    res = pgd(model, x, y, AttackConfig(epsilon=0.03, n_iter=5))
    clean = T.cross_entropy(model(x), y, reduction="none").data
    np.testing.assert_allclose(res.loss_trajectory[:, 0], clean, rtol=1e-12)
    assert res.loss_trajectory.shape == (4, 6)


def test_linear_model_reaches_closed_form_worst_case():
    rng = np.random.default_rng(0)
    for _ in range(10):
        d = 12
        W = rng.normal(size=(d, 2))
        x0 = rng.uniform(0.3, 0.7, (1, d))
        y = np.array([rng.integers(0, 2)])
        eps = rng.uniform(0.01, 0.2)
        res = pgd(Linear(W), x0, y, AttackConfig(epsilon=eps, n_iter=40, clamp_to_valid_range=False,
                                                  seed=int(rng.integers(1 << 30))))
        w = W[:, 1 - y[0]] - W[:, y[0]]
        worst = T.cross_entropy(Tensor(((x0 + eps * np.sign(w)) @ W)), y).item()
        assert res.loss_trajectory[0, -1] == pytest.approx(worst, abs=1e-6)


def test_determinism_and_parallel_equivalence(rng):
    model = Classifier(tiny_config("cnn"), seed=0)
    x, y = rng.random((10, 2, 8, 8)), rng.integers(0, 3, 10)
    cfg = AttackConfig(epsilon=0.05, n_iter=4, n_restarts=2, batch_size=3, seed=9)
    a, b, c = pgd(model, x, y, cfg), pgd(model, x, y, cfg), pgd(model, x, y, cfg, workers=4)
    for r in (b, c):
        assert a.x_adv.tobytes() == r.x_adv.tobytes()
        assert a.loss_trajectory.tobytes() == r.loss_trajectory.tobytes()
    d = pgd(model, x, y, AttackConfig(epsilon=0.05, n_iter=4, n_restarts=2, batch_size=3, seed=10))
    assert a.x_adv.tobytes() != d.x_adv.tobytes()


def test_restarts_never_lower_the_loss(rng):
    model = Classifier(tiny_config("vit"), seed=1)
    x, y = rng.random((6, 2, 8, 8)), rng.integers(0, 3, 6)
    one = pgd(model, x, y, AttackConfig(epsilon=0.05, n_iter=3, n_restarts=1))
    three = pgd(model, x, y, AttackConfig(epsilon=0.05, n_iter=3, n_restarts=3))
    assert np.all(three.loss_trajectory[:, -1] >= one.loss_trajectory[:, -1])


def test_frequency_filter_identities(rng):
    model = Classifier(tiny_config("cnn"), seed=0)
    x, y = rng.random((4, 2, 8, 8)), rng.integers(0, 3, 4)
    cfg = AttackConfig(epsilon=0.05, n_iter=3)
    base = pgd(model, x, y, cfg)
    full = frequency_filtered_attack(model, x, y, cfg, make_mask(8, 8, "full"), base=base)
    np.testing.assert_allclose(full.x_adv, base.x_adv, atol=1e-9, rtol=0)
    assert full.asr == base.asr
    zero = frequency_filtered_attack(model, x, y, cfg, custom_mask(np.zeros((8, 8))), base=base)
    np.testing.assert_allclose(zero.x_adv, x, atol=1e-15)
    assert zero.asr == 0.0
    with pytest.raises(ValueError, match="extents"):
        frequency_filtered_attack(model, x, y, cfg, make_mask(4, 4, "low", 1), base=base)


def test_frequency_filter_reports_inflated_norm_and_post_clip(rng):
    model = Classifier(tiny_config("cnn"), seed=0)
    x, y = rng.uniform(0.2, 0.8, (6, 2, 8, 8)), rng.integers(0, 3, 6)
    cfg = AttackConfig(epsilon=0.05, n_iter=3, clamp_to_valid_range=False)
    base = pgd(model, x, y, cfg)
    high = frequency_filtered_attack(model, x, y, cfg, make_mask(8, 8, "high", 5), base=base)
    assert high.linf.max() > 0
    clipped = frequency_filtered_attack(model, x, y, AttackConfig(epsilon=0.05, n_iter=3,
                                        clamp_to_valid_range=False, post_clip=True),
                                        make_mask(8, 8, "high", 5), base=base)
    assert clipped.linf.max() <= 0.05 + 1e-12


def test_attack_success_rate_examples():
    assert attack_success_rate([1, 2, 3], [1, 0, 3]) == pytest.approx(1 / 3)
    assert attack_success_rate([1, 2], [1, 2]) == 0.0
    assert attack_success_rate([1, 2], [0, 0]) == 1.0
    asr, robust = attack_success_rate([1, 2, 0], [1, 0, 0], labels=[1, 2, 2])
    assert asr == pytest.approx(1 / 3) and robust == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        attack_success_rate([1, 2], [1])


def test_robust_accuracy_never_exceeds_clean(rng):
    model = Classifier(tiny_config("cnn"), seed=4)
    x, y = rng.random((12, 2, 8, 8)), rng.integers(0, 3, 12)
    res = pgd(model, x, y, AttackConfig(epsilon=0.1, n_iter=3))
    assert res.robust_accuracy <= float((res.clean_pred == y).mean())


def test_csv_exports(tmp_path, rng):
    model = Classifier(tiny_config("cnn"), seed=0)
    res = pgd(model, rng.random((3, 2, 8, 8)), np.array([0, 1, 2]), AttackConfig(n_iter=2),
              example_ids=[7, 8, 9])
    res.to_csv(tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "example_id,clean_pred,adv_pred,label,linf_dist,success"
    assert [l.split(",")[0] for l in lines[1:]] == ["7", "8", "9"]
    res.trajectory_to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "example_id,step_0,step_1,step_2"


def test_transfer_matrix_properties(rng):
    a = Classifier(tiny_config("cnn"), seed=0)
    b = Classifier(tiny_config("vit"), seed=1)
    x, y = rng.random((8, 2, 8, 8)), rng.integers(0, 3, 8)
    cfg = AttackConfig(epsilon=0.1)
    single = transfer_attack_matrix([a], x, y, cfg)
    assert single.shape == (1, 1) and single[0, 0] == fgsm(a, x, y, cfg).asr
    assert not transfer_attack_matrix([a, b], x, y, AttackConfig(epsilon=0.0)).any()
    twin = transfer_attack_matrix([a, Classifier(a.cfg, a.params.copy())], x, y, cfg)
    assert np.all(twin == twin[0, 0])


def test_sweep_eps_zero_row_is_clean_accuracy(rng):
    model = Classifier(tiny_config("cnn"), seed=0)
    x, y = rng.random((8, 2, 8, 8)), rng.integers(0, 3, 8)
    grid = radius_step_sweep(model, x, y, [0.0, 0.05, 0.2], [1, 2, 4], AttackConfig(seed=1))
    clean = float((predict(model, x) == y).mean())
    np.testing.assert_array_equal(grid[0], clean)
    assert np.all(np.diff(grid, axis=1) <= 0)
    with pytest.raises(ValueError):
        radius_step_sweep(model, x, y, [], [1])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sweep_on_trained_model_decreases_along_both_axes(seed):
    tr = synthetic_dataset(seed, 4, 400, 1, 8, "train")
    te = synthetic_dataset(seed, 4, 100, 1, 8, "test")
    cfg = tiny_config("cnn", channels=1, num_classes=4, conv_channels=[6, 12])
    model, _ = train(cfg, tr.images, tr.labels, TrainConfig(epochs=4, batch_size=50, lr=0.05,
                                                            decay_epochs=[3], seed=seed))
    grid = radius_step_sweep(model, te.images, te.labels, [0.02, 0.05, 0.1], [1, 3, 10],
                             AttackConfig(seed=seed))
    ok = 0
    for i in range(3):
        for j in range(3):
            ok += (i == 0 or grid[i, j] <= grid[i - 1, j]) and (j == 0 or grid[i, j] <= grid[i, j - 1])
    assert ok >= 8, grid
