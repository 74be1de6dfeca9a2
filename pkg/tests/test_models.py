import numpy as np
import pytest

from capstraffic.data import ScalingStats, WindowedDataset
from capstraffic.errors import GeometryError, ShapeError, TrainingError
from capstraffic.models import (
    EXPECTED_COUNTS,
    ModelSpec,
    TrainConfig,
    audit_parameters,
    build_model,
    count_parameters,
    predict,
    to_speeds,
    train,
)
from capstraffic.tasks import TASKS, TaskSpec
from capstraffic.tensor import Tensor, backward, finite_difference_check, mul, tsum

from oracles import capsnet_count, cnn_count

SMALL_CNN = ModelSpec.cnn((4, 4, 4), seed=1)
SMALL_CAPS = ModelSpec.capsnet(conv_channels=(3, 3), primary_channels=8, capsule_dim=4, traffic_dim=4, seed=1)


def toy_dataset(task, n, rng, label=None):
    inputs = rng.uniform(size=(n, task.M, task.N))
    labels = np.full((n, task.label_size), label) if label is not None else rng.uniform(size=(n, task.label_size))
    stats = ScalingStats(0.0, 100.0)
    return WindowedDataset(inputs, labels, stats, task, stats.unscale(labels),
                           np.arange(n).astype("datetime64[s]"))


@pytest.mark.parametrize("name", list(TASKS))
def test_counts_match_oracle(name):
    t = TASKS[name]
    cnn = build_model(ModelSpec.default("cnn"), t, initialize=False)
    caps = build_model(ModelSpec.default("capsnet"), t, initialize=False)
    assert count_parameters(cnn) == cnn_count(t.M, t.N, t.L) == EXPECTED_COUNTS[("cnn", name)]
    assert count_parameters(caps) == capsnet_count(t.M, t.N, t.L) == EXPECTED_COUNTS[("capsnet", name)]


def test_documented_counts():
    assert EXPECTED_COUNTS[("cnn", "task1")] == 2560 + 295040 + 73792 + 2580
    assert EXPECTED_COUNTS[("cnn", "task4")] - (2560 + 295040 + 73792) == 384 * 100 + 100
    assert EXPECTED_COUNTS[("capsnet", "task1")] == 46_560 + 3200 * 20 * 128


def test_audit_rows():
    rows = audit_parameters()
    assert len(rows) == 8
    for row in rows:
        assert row["count"] == row["expected"]
        if row["reported"] is not None:
            assert row["relative_diff"] <= 0.01


def test_cnn_shape_chain():
    model = build_model(ModelSpec.default("cnn"), TASKS["task1"])
    x = Tensor(np.zeros((2, 10, 20)))
    h = model._check_input(x)
    shapes = []
    for _, layer in model.layers[:-1]:
        h = layer(h)
        shapes.append(h.shape[1:])
        h = Tensor(h.data[:, : h.shape[1] // 2 * 2 : 2, : h.shape[2] // 2 * 2 : 2])
        shapes.append(h.shape[1:])
    assert shapes == [(10, 20, 256), (5, 10, 256), (5, 10, 128), (2, 5, 128), (2, 5, 64), (1, 2, 64)]
    assert model.forward(x).shape == (2, 20)
    t4 = build_model(ModelSpec.default("cnn"), TASKS["task4"], initialize=False)
    assert t4.layers[-1][1].param_specs()["weights"][0] == (384, 100)


def test_capsnet_task1_shapes():
    model = build_model(ModelSpec.default("capsnet"), TASKS["task1"])
    primary = model.layers[2][1]
    assert primary.num_capsules(10, 20) == 3200
    out = model.forward(np.random.default_rng(0).uniform(size=(1, 10, 20)))
    assert out.shape == (1, 20)
    assert np.all((out.data >= 0) & (out.data < 1))


def test_cnn_too_small_geometry():
    with pytest.raises(GeometryError, match="M >= 8"):
        build_model(ModelSpec.default("cnn"), TaskSpec(1, 4, 20))


def test_input_shape_checked():
    model = build_model(SMALL_CNN, TaskSpec(1, 8, 8))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 8, 9)))


def test_init_is_seeded():
    a = build_model(SMALL_CAPS, TaskSpec(1, 4, 5))
    b = build_model(SMALL_CAPS, TaskSpec(1, 4, 5))
    for name, p in a.parameters().items():
        np.testing.assert_array_equal(p.data, b.parameters()[name].data)


@pytest.mark.parametrize("spec,task", [(SMALL_CNN, TaskSpec(2, 8, 8)), (SMALL_CAPS, TaskSpec(2, 3, 4))])
def test_whole_model_gradients(spec, task):
    model = build_model(spec, task)
    rng = np.random.default_rng(0)
    # large inputs keep output capsules well away from zero length, where the
    # length gradient is deliberately smoothed
    x = 100 * rng.uniform(size=(2, task.M, task.N))
    y = rng.uniform(size=(2, task.label_size))
    name = "conv1.kernels"
    base = dict(model.parameters())

    def loss(t):
        model.load_parameters({**base, name: t})
        pred = model.forward(x)
        diff = pred - Tensor(y)
        return tsum(mul(diff, diff))

    assert finite_difference_check(loss, base[name].data) < 1e-4


def test_constant_label_learned():
    task = TaskSpec(1, 8, 8)
    rng = np.random.default_rng(0)
    model = build_model(SMALL_CNN, task)
    data = toy_dataset(task, 1024, rng, label=0.5)
    result = train(model, data, TrainConfig(lr0=1e-2, decay=0.999, epochs=20, seed=0))
    held = model.predict_scaled(rng.uniform(size=(64, 8, 8)))
    assert np.all(np.abs(held - 0.5) < 0.02)
    assert result.epoch_losses[-1] < result.epoch_losses[0]


def test_zero_epochs_returns_initialisation():
    task = TaskSpec(1, 8, 8)
    model = build_model(SMALL_CNN, task)
    init = {k: v.data.copy() for k, v in model.parameters().items()}
    ckpt = train(model, toy_dataset(task, 8, np.random.default_rng(0)), TrainConfig(epochs=0)).checkpoint
    assert ckpt.step == 0
    for k, v in init.items():
        np.testing.assert_array_equal(ckpt.params[k], v)


def test_training_is_deterministic():
    task = TaskSpec(1, 3, 4)
    ds = toy_dataset(task, 40, np.random.default_rng(0))
    runs = []
    for _ in range(2):
        model = build_model(SMALL_CAPS, task)
        runs.append(train(model, ds, TrainConfig(epochs=2, batch_size=8, seed=3)))
    assert runs[0].step_losses == runs[1].step_losses
    for k, v in runs[0].checkpoint.params.items():
        np.testing.assert_array_equal(v, runs[1].checkpoint.params[k])


def test_nan_loss_aborts_with_step():
    task = TaskSpec(1, 8, 8)
    ds = toy_dataset(task, 64, np.random.default_rng(0))
    ds.labels[40] = np.nan
    with pytest.raises(TrainingError) as info:
        train(build_model(SMALL_CNN, task), ds, TrainConfig(epochs=1, batch_size=64))
    assert info.value.step == 1
    assert "step 1" in str(info.value)


def test_task_mismatch_rejected():
    ds = toy_dataset(TaskSpec(1, 8, 8), 4, np.random.default_rng(0))
    with pytest.raises(GeometryError):
        train(build_model(SMALL_CNN, TaskSpec(1, 8, 9)), ds)


def test_clamp_then_unscale():
    stats = ScalingStats(0.0, 100.0)
    np.testing.assert_array_equal(to_speeds(np.array([1.3, -0.2, 0.5]), stats), [100.0, 0.0, 50.0])


def test_predict_deterministic_and_shape():
    task = TaskSpec(2, 3, 4)
    model = build_model(SMALL_CAPS, task)
    ckpt = train(model, toy_dataset(task, 8, np.random.default_rng(0)), TrainConfig(epochs=1)).checkpoint
    window = np.random.default_rng(1).uniform(20, 80, size=(3, 4))
    a, b = predict(ckpt, window), predict(ckpt, window)
    assert a.shape == (8,)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(GeometryError):
        predict(ckpt, window[:, :3])
    window[0, 0] = np.nan
    with pytest.raises(ValueError):
        predict(ckpt, window)


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec.cnn((4, 4))
    with pytest.raises(ValueError):
        ModelSpec.capsnet(primary_channels=12, capsule_dim=8)
    assert ModelSpec.from_dict(SMALL_CAPS.to_dict()) == SMALL_CAPS
