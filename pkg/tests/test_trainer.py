import csv
import json

import numpy as np
import pytest

from jafr import autodiff as ad
from jafr.attacks import AttackConfig, fgsm
from jafr.autodiff import ContractViolation
from jafr.data import synth_blobs
from jafr.evaluator import accuracy, model_profile
from jafr.models import Model, ModelSpec, cross_entropy, jacobian, one_hot
from jafr.trainer import SGD, NumericalAbort, TrainConfig, frequency_terms, jafr_step, lr_at, train

SOFT = ModelSpec(architecture="mlp", input_shape=(1, 4, 4), num_classes=3, hidden=(8,), activation="softplus")
CNN = ModelSpec(architecture="small-cnn", input_shape=(1, 6, 6), num_classes=3, hidden=(6,),
                conv_channels=(2, 3), activation="softplus")


def _batch(rng, spec, n=6):
    x = rng.random((n,) + spec.input_shape)
    return x, one_hot(rng.integers(0, spec.num_classes, n), spec.num_classes)


def test_zero_lambda_matches_plain_sgd(rng):
    x, y = _batch(rng, CNN)
    a, b = Model(CNN, seed=1), Model(CNN, seed=1)
    cfg = TrainConfig(lambda_freq=0.0, lr=0.1, momentum=0.9)
    opt_a = SGD(a.params, momentum=0.9, clip=cfg.grad_clip)
    opt_b = SGD(b.params, momentum=0.9, clip=cfg.grad_clip)
    for step in range(3):
        jafr_step(a, x, y, cfg, opt_a, 0.1, np.random.default_rng(0), step)
        grads = ad.grad(cross_entropy(b(x), y), b.params)
        opt_b.step([g.data for g in grads], 0.1)
    assert a.get_flat().tobytes() == b.get_flat().tobytes()


def test_replay_is_deterministic(rng):
    x, y = _batch(rng, CNN)
    cfg = TrainConfig(lambda_freq=0.001, lr=0.05)
    runs = []
    for _ in range(2):
        m = Model(CNN, seed=2)
        opt = SGD(m.params, momentum=cfg.momentum, clip=cfg.grad_clip)
        for step in range(2):
            jafr_step(m, x, y, cfg, opt, cfg.lr, np.random.default_rng(step), step)
        runs.append(m.get_flat())
    assert runs[0].tobytes() == runs[1].tobytes()


@pytest.mark.parametrize("spec", [SOFT, CNN])
def test_step_matches_fd_of_full_objective(spec, rng):
    lam, lr = 0.01, 1.0
    x, y = _batch(rng, spec, n=4)
    m = Model(spec, seed=3)
    assert m.num_params <= 1000
    theta = m.get_flat()

    def objective(flat):
        m.set_flat(flat)
        J, per = jacobian(m, x, y, create_graph=False)
        _, lf = frequency_terms(J, TrainConfig().bias)
        return float(np.mean(per.data)) + lam * lf.item()

    m.set_flat(theta)
    cfg = TrainConfig(lambda_freq=lam, lr=lr, momentum=0.0, grad_clip=None)
    jafr_step(m, x, y, cfg, SGD(m.params), lr, np.random.default_rng(0))
    delta = m.get_flat() - theta
    for i in rng.choice(theta.size, 6, replace=False):
        h = 1e-5
        e = np.zeros_like(theta)
        e[i] = h
        fd = (objective(theta + e) - objective(theta - e)) / (2 * h)
        assert abs(delta[i] + lr * fd) <= 1e-4 * max(abs(fd), 1e-3), (i, delta[i], fd)


def test_blobs_reach_high_accuracy():
    ds = synth_blobs(400, 2, seed=0)
    spec = ModelSpec(architecture="mlp", input_shape=ds.image_shape, num_classes=2)
    for seed in range(3):
        m, log = train(spec, ds, TrainConfig(lambda_freq=0.0, epochs=5, seed=seed))
        assert log.epoch_acc[-1] > 0.95
        assert accuracy(m, ds.images, ds.labels) > 0.95


def test_sign_law(desk_runs):
    b = {lam: model_profile(desk_runs.model(0, lam), desk_runs.test).bias_low for lam in (-0.01, 0.0, 0.01)}
    assert b[-0.01] < b[0.0] < b[0.01]


def test_fgsm_at_composition(rng):
    x, y = _batch(rng, CNN)
    atk = AttackConfig(epsilon=8 / 255, step=8 / 255, iters=1, restarts=1, random_init=False)
    cfg = TrainConfig(lambda_freq=0.0, at_mode="fgsm", attack=atk, lr=0.1, momentum=0.0)
    a, b = Model(CNN, seed=4), Model(CNN, seed=4)
    jafr_step(a, x, y, cfg, SGD(a.params, clip=cfg.grad_clip), 0.1, np.random.default_rng(0))
    x_adv = fgsm(b, x, y, 8 / 255)
    grads = ad.grad(cross_entropy(b(x_adv), y), b.params)
    SGD(b.params, clip=cfg.grad_clip).step([g.data for g in grads], 0.1)
    assert a.get_flat().tobytes() == b.get_flat().tobytes()


def test_relu_training_stays_finite(rng):
    spec = ModelSpec(architecture="mlp", input_shape=(1, 8, 8), num_classes=3, hidden=(16,))
    for lam in (0.01, -0.01):
        m = Model(spec, seed=5)
        cfg = TrainConfig(lambda_freq=lam, lr=0.05)
        opt = SGD(m.params, momentum=cfg.momentum, clip=cfg.grad_clip)
        for step in range(1000):
            x, y = _batch(rng, spec, n=8)
            rec = jafr_step(m, x, y, cfg, opt, cfg.lr, rng, step)
            assert np.isfinite(rec.loss_cls) and np.isfinite(rec.loss_freq) and np.isfinite(rec.bias_low)
        assert np.all(np.isfinite(m.get_flat()))


def test_nan_aborts_with_dump(rng):
    x, y = _batch(rng, SOFT)
    m = Model(SOFT, seed=0)
    m.params[0].data[0, 0] = np.nan
    cfg = TrainConfig(lambda_freq=0.01)
    with np.errstate(all="ignore"), pytest.raises(NumericalAbort) as err:
        jafr_step(m, x, y, cfg, SGD(m.params), 0.1, rng)
    dump = json.loads(str(err.value).split(": ", 1)[1])
    assert {"step", "loss_cls", "spectrum_min", "spectrum_max"} <= set(dump)


def test_lr_schedule():
    cfg = TrainConfig(lr=1.0, lr_schedule="linear-warmup-decay", warmup_frac=0.2)
    lrs = [lr_at(cfg, s, 10) for s in range(10)]
    assert lrs[:2] == [0.5, 1.0]
    assert all(a >= b for a, b in zip(lrs[1:], lrs[2:]))
    assert lrs[-1] == pytest.approx(0.125)
    assert lr_at(TrainConfig(lr=0.3), 7, 10) == 0.3


def test_config_validation():
    with pytest.raises(ContractViolation):
        TrainConfig(lr=0.0)
    with pytest.raises(ContractViolation):
        TrainConfig(epochs=0)
    with pytest.raises(ContractViolation):
        TrainConfig(at_mode="trades")
    cfg = TrainConfig(attack={"epsilon": 0.1, "step": 0.05, "iters": 2, "restarts": 1})
    assert isinstance(cfg.attack, AttackConfig)
    assert json.loads(json.dumps(cfg.to_dict()))["bias"]["index_mode"] == "raw-dft"


def test_shape_mismatch_rejected():
    ds = synth_blobs(20, 2)
    with pytest.raises(ContractViolation):
        train(SOFT, ds, TrainConfig(epochs=1))


def test_log_csv(tmp_path):
    ds = synth_blobs(40, 2, seed=1)
    spec = ModelSpec(architecture="mlp", input_shape=ds.image_shape, num_classes=2, hidden=(8,))
    _, log = train(spec, ds, TrainConfig(lambda_freq=0.001, epochs=2, batch_size=16))
    log.write_csv(tmp_path / "log.csv")
    log.write_epoch_csv(tmp_path / "ep.csv")
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert len(rows) == 6 and [int(r["step"]) for r in rows] == list(range(6))
    assert all(np.isfinite(float(r["bias_low"])) for r in rows)
    assert len(list(csv.DictReader(open(tmp_path / "ep.csv")))) == 2
