import numpy as np
import pytest

from dcft.data import Dataset, bundled, token_majority
from dcft.errors import DataError, NumericError, UsageError
from dcft.model import ModelSpec, attach_adapters, build_model
from dcft.train import AdamW, SGD, TrainConfig, evaluate, pretrain_backbone, train
from dcft.engine import Matrix


def _fresh(cfg: TrainConfig, spec: ModelSpec = ModelSpec()):
    model = build_model(spec)
    attach_adapters(model, cfg.adapter_config())
    return model


def _smoothed_drop(losses, window=20):
    return np.mean(losses[:window]) - np.mean(losses[-window:])


@pytest.fixture(scope="module")
def small_ds():
    return token_majority(96, seed=11)


def test_zero_lr_leaves_parameters_bitwise(small_ds):
    cfg = TrainConfig(learning_rate=0.0, lambda_orth=0.0, epochs=1)
    model = _fresh(cfg)
    before = {k: p.data.copy() for k, p in model.adapter_parameters().items()}
    train(model, small_ds, cfg)
    for k, p in model.adapter_parameters().items():
        assert np.array_equal(p.data, before[k]), k


def test_reports_are_reproducible(small_ds):
    cfg = TrainConfig(epochs=2, dropout=0.1)
    a = train(_fresh(cfg), small_ds, cfg)
    b = train(_fresh(cfg), small_ds, cfg)
    assert a.step_loss == b.step_loss
    assert a.epoch_records() == b.epoch_records()


def test_backbone_untouched_and_count_reported(small_ds):
    cfg = TrainConfig(epochs=2)
    model = _fresh(cfg)
    frozen = model.frozen_state()
    report = train(model, small_ds, cfg)
    for k, w in model.weights.items():
        assert np.array_equal(w.data, frozen[k]), k
    assert report.trainable_params == model.num_trainable()
    assert len(report.epoch_loss) == len(report.eval_accuracy) == len(report.epoch_seconds) == 2
    assert all(np.isfinite(report.epoch_loss))


def test_learns_token_majority_in_200_steps():
    cfg = TrainConfig(d=2, s=2, epochs=20, max_steps=200)
    model = _fresh(cfg, ModelSpec(hidden_dim=16))
    ds = bundled()
    report = train(model, ds, cfg)
    assert report.steps == 200
    assert evaluate(model, ds) >= 0.95
    assert report.orth_final <= report.orth_initial


@pytest.mark.parametrize("adapter", ["dcft", "lora"])
def test_dcft_and_lora_both_reduce_loss(adapter):
    cfg = TrainConfig(adapter=adapter, d=1, s=1, lora_rank=1, epochs=12, max_steps=150)
    report = train(_fresh(cfg), bundled(), cfg)
    assert all(np.isfinite(report.step_loss))
    assert _smoothed_drop(report.step_loss) > 0.05


def test_dcft_and_lora_parameterizations_differ():
    d = _fresh(TrainConfig(d=1, s=1))
    lora = _fresh(TrainConfig(adapter="lora", lora_rank=1))
    # a 1x1 kernel costs exactly one extra parameter per matrix
    assert d.num_trainable() - lora.num_trainable() == len(d.adapters)


def test_orth_penalty_decreases(small_ds):
    cfg = TrainConfig(epochs=3, lambda_orth=0.1)
    report = train(_fresh(cfg), small_ds, cfg)
    assert report.orth_final < report.orth_initial


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(small_ds):
    cfg = TrainConfig(epochs=1)
    model = _fresh(cfg)
    next(iter(model.adapter_parameters().values())).data[0, 0] = np.inf
    with pytest.raises(NumericError, match="step 0.*lr=0.01"):
        train(model, small_ds, cfg)


def test_empty_dataset_rejected():
    cfg = TrainConfig()
    with pytest.raises(DataError):
        train(_fresh(cfg), Dataset([], np.zeros(0)), cfg)


def test_train_needs_adapters(small_ds):
    with pytest.raises(UsageError):
        train(build_model(ModelSpec()), small_ds, TrainConfig())


def test_untrained_accuracy_near_chance():
    ds = bundled()
    accs = []
    for seed in range(5):
        model = build_model(ModelSpec(seed=seed))
        accs.append(evaluate(model, ds))
    assert abs(np.mean(accs) - 0.5) <= 0.15


def test_single_example_accuracy_is_binary():
    ds = token_majority(1, seed=0)
    assert evaluate(build_model(ModelSpec()), ds) in (0.0, 1.0)


def test_merged_eval_matches_adapter_eval(small_ds):
    cfg = TrainConfig(epochs=2)
    model = _fresh(cfg)
    train(model, small_ds, cfg)
    assert evaluate(model.merged(), small_ds) == evaluate(model, small_ds)


def test_pretrain_then_freeze(small_ds):
    model = build_model(ModelSpec())
    before = model.frozen_state()
    losses = pretrain_backbone(model, small_ds, steps=10)
    assert len(losses) == 10 and model.backbone_modified
    assert any(not np.array_equal(before[k], w.data) for k, w in model.weights.items())
    assert all(not w.requires_grad and w.grad is None for w in model.weights.values())


@pytest.mark.parametrize("opt_cls", [SGD, AdamW])
def test_optimizers_descend_quadratic(opt_cls):
    p = Matrix(np.array([[3.0, -2.0]]), requires_grad=True)
    opt = opt_cls([p], lr=0.1)
    for _ in range(200):
        p.grad = 2 * p.data
        opt.step()
    assert np.abs(p.data).max() < 0.1
    assert p.version == 200
