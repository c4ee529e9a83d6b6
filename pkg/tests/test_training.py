"""SGD mechanics, loss weighting and masking, metrics, and the ensemble."""

import numpy as np
import pytest

from conftest import tiny_conv_spec, tiny_dense_spec
from stitchnet.datagen import DatasetConfig, generate
from stitchnet.network import build_one_task, init_networks, stitch
from stitchnet.training import (
    DivergenceError,
    TaskBatch,
    TrainConfig,
    compute_loss,
    ensemble_eval,
    evaluate,
    sgd_step,
    train,
)


def make_batch(rng, spec, n=6, classes=3, dtype=np.float64, mask=None):
    x = rng.standard_normal((n, *spec.input_shape)).astype(dtype)
    mb = np.ones(n, dtype=bool) if mask is None else np.asarray(mask)
    return TaskBatch(x, rng.integers(0, classes, n), rng.integers(0, classes, n), mb)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(alpha_lr_scale=0)
    with pytest.raises(ValueError):
        TrainConfig(loss_weight_b=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(iterations=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    TrainConfig(iterations=0)  # an empty run is allowed


def _stitched(seed=0):
    net_a, net_b = init_networks("common_init", spec=tiny_conv_spec(), seed=seed,
                                 dtype=np.float64)
    return stitch(net_a, net_b, granularity="per_map", alpha_s=0.9, alpha_d=0.1)


def zero_grads(model):
    return {g.name: np.zeros_like(g.array) for g in model.parameter_groups()}


def test_sgd_alpha_scaling_hand_case():
    # base_lr 0.1 at scale 100 turns an alpha gradient of 0.001 into a 0.01 step
    model = _stitched()
    before = {g.name: g.array.copy() for g in model.parameter_groups()}
    grads = zero_grads(model)
    for name in grads:
        if name.startswith("stitch."):
            grads[name][...] = 0.001
    cfg = TrainConfig(base_lr=0.1, momentum=0.0, alpha_lr_scale=100.0)
    sgd_step(model, grads, cfg, {})
    for g in model.parameter_groups():
        if g.alpha:
            np.testing.assert_allclose(before[g.name] - g.array, 0.01, rtol=1e-12)
        else:
            np.testing.assert_array_equal(g.array, before[g.name])


def test_sgd_zero_gradients_are_a_fixed_point():
    model = _stitched()
    before = {g.name: g.array.copy() for g in model.parameter_groups()}
    cfg = TrainConfig(base_lr=0.5, momentum=0.9)
    state = {}
    for _ in range(3):
        sgd_step(model, zero_grads(model), cfg, state)
    for g in model.parameter_groups():
        np.testing.assert_array_equal(g.array, before[g.name])


def test_sgd_scale_one_treats_alphas_like_other_parameters():
    model = _stitched()
    grads = {g.name: np.full_like(g.array, 0.25) for g in model.parameter_groups()}
    cfg = TrainConfig(base_lr=0.01, momentum=0.0, alpha_lr_scale=1.0)
    before = {g.name: g.array.copy() for g in model.parameter_groups()}
    sgd_step(model, grads, cfg, {})
    for g in model.parameter_groups():
        np.testing.assert_allclose(before[g.name] - g.array, 0.01 * 0.25, rtol=1e-12)


def test_lr_mult_equivalence_bitwise():
    # alpha_lr_scale=s at base lr b moves alphas exactly like a per-unit
    # multiplier of s at alpha_lr_scale=1
    s, b = 37.0, 0.003
    m1 = _stitched(seed=5)
    m2 = m1.copy()
    for unit in m2.units.values():
        unit.lr_scale = s
    rng = np.random.default_rng(0)
    grads = {g.name: rng.standard_normal(g.array.shape) for g in m1.parameter_groups()}
    sgd_step(m1, grads, TrainConfig(base_lr=b, momentum=0.0, alpha_lr_scale=s), {})
    sgd_step(m2, grads, TrainConfig(base_lr=b, momentum=0.0, alpha_lr_scale=1.0), {})
    for g1, g2 in zip(m1.parameter_groups(), m2.parameter_groups()):
        np.testing.assert_array_equal(g1.array, g2.array)


def test_sgd_rejects_non_finite_gradients():
    model = _stitched()
    grads = zero_grads(model)
    grads["A.conv1.W"][0] = np.nan
    with pytest.raises(DivergenceError, match="A.conv1.W"):
        sgd_step(model, grads, TrainConfig(), {})


def test_freeze_alphas_blocks_updates():
    model = _stitched()
    grads = {g.name: np.ones_like(g.array) for g in model.parameter_groups()}
    before = {g.name: g.array.copy() for g in model.parameter_groups()}
    sgd_step(model, grads, TrainConfig(base_lr=0.1, momentum=0.0, freeze_alphas=True), {})
    for g in model.parameter_groups():
        if g.alpha:
            np.testing.assert_array_equal(g.array, before[g.name])
        else:
            assert not np.array_equal(g.array, before[g.name])


def test_compute_loss_weighting(rng):
    model = _stitched()
    batch = make_batch(rng, tiny_conv_spec())
    total_eq, per_task = compute_loss(model, batch, 1.0, 1.0)
    assert total_eq == pytest.approx(per_task["A"] + per_task["B"], rel=1e-12)
    total_scaled, _ = compute_loss(model, batch, 1.0, 1.0 / 64.0)
    assert total_scaled == pytest.approx(per_task["A"] + per_task["B"] / 64.0, rel=1e-12)


def test_all_false_mask_drops_task_b_entirely(rng):
    model = _stitched()
    batch = make_batch(rng, tiny_conv_spec(), mask=np.zeros(6, dtype=bool))
    total, per_task = compute_loss(model, batch, 1.0, 1.0)
    assert per_task["B"] == 0.0
    assert total == per_task["A"]
    _, _, grads = model.loss_and_grads(batch, 1.0, 1.0)
    np.testing.assert_array_equal(grads["B.head.W"], 0.0)
    np.testing.assert_array_equal(grads["B.head.b"], 0.0)


def test_masked_examples_contribute_nothing(rng):
    # flipping the labels of masked-out rows cannot change any gradient
    net = build_one_task(tiny_conv_spec(), seed=1, task="B", dtype=np.float64)
    mask = np.array([True, False, True, False, True, False])
    batch = make_batch(rng, tiny_conv_spec(), mask=mask)
    _, _, g1 = net.loss_and_grads(batch)
    labels2 = batch.labels_b.copy()
    labels2[~mask] = (labels2[~mask] + 1) % 3
    batch2 = TaskBatch(batch.inputs, batch.labels_a, labels2, mask)
    _, _, g2 = net.loss_and_grads(batch2)
    for name in g1:
        np.testing.assert_array_equal(g1[name], g2[name])


def test_loss_weight_scaling_is_exact_for_power_of_two(rng):
    net = build_one_task(tiny_conv_spec(), seed=2, task="B", dtype=np.float64)
    batch = make_batch(rng, tiny_conv_spec(), mask=np.array([True] * 4 + [False] * 2))
    _, _, g1 = net.loss_and_grads(batch, w_b=0.25)
    _, _, g4 = net.loss_and_grads(batch, w_b=1.0)
    for name in g1:
        np.testing.assert_array_equal(g4[name], 4.0 * g1[name])


def small_dataset(n=320, seed=0, **kw):
    # 8x8 canvas to match tiny_conv_spec; jitter 1 keeps the glyphs inside
    return generate(DatasetConfig(n=n, classes_a=4, classes_b=4, height=8, width=8,
                                  jitter=1, **kw), seed)


def test_train_zero_iterations_returns_model_unchanged():
    ds = small_dataset()
    net = build_one_task(tiny_conv_spec(classes=4).with_classes(4), seed=0)
    spec = net.spec
    before = {n: {p: a.copy() for p, a in d.items()} for n, d in net.params.items()}
    net, history = train(net, ds, TrainConfig(iterations=0))
    assert history.iterations == []
    for name in before:
        for p in before[name]:
            np.testing.assert_array_equal(net.params[name][p], before[name][p])
    assert spec is net.spec


def test_train_is_deterministic():
    ds = small_dataset()
    spec = tiny_conv_spec(classes=4)
    cfg = TrainConfig(base_lr=0.05, iterations=40, batch_size=16, seed=3, eval_every=20)
    runs = []
    for _ in range(2):
        net = build_one_task(spec, seed=9)
        net, history = train(net, ds, cfg)
        runs.append((history.loss_total, net))
    assert runs[0][0] == runs[1][0]
    for name in runs[0][1].params:
        for p in runs[0][1].params[name]:
            np.testing.assert_array_equal(runs[0][1].params[name][p],
                                          runs[1][1].params[name][p])


def test_train_records_history_and_evals():
    ds = small_dataset()
    net = build_one_task(tiny_conv_spec(classes=4), seed=0)
    cfg = TrainConfig(iterations=25, batch_size=16, seed=0, eval_every=10)
    net, history = train(net, ds, cfg)
    assert history.iterations == list(range(1, 26))
    eval_points = [it for it, _ in history.evals]
    assert eval_points == [10, 20, 25]  # every eval_every plus the final iteration
    assert all("A" in m for _, m in history.evals)
    assert not history.diverged


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
def test_train_divergence_guard_flags_partial_history():
    ds = small_dataset()
    net_a, net_b = init_networks("common_init", spec=tiny_conv_spec(classes=4), seed=1)
    model = stitch(net_a, net_b, granularity="per_map", alpha_s=0.5, alpha_d=0.5)
    cfg = TrainConfig(base_lr=0.05, alpha_lr_scale=1e7, iterations=300, batch_size=16,
                      seed=0, eval_every=300)
    model, history = train(model, ds, cfg)
    assert history.diverged
    assert history.diverged_at is not None
    assert len(history.loss_total) < 300


class ProbeModel:
    """Duck-typed single-task model with scripted class probabilities."""

    def __init__(self, probs_fn, task="A"):
        self.probs_fn = probs_fn
        self.task = task
        self.tasks = (task,)
        self.dtype = np.dtype(np.float32)  # match dataset dtype so inputs pass through

    def predict_probs(self, x):
        return {self.task: self.probs_fn(x)}


def one_hot(idx, n_classes):
    out = np.zeros((len(idx), n_classes))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def test_evaluate_perfect_and_constant_predictors():
    ds = small_dataset(n=800)  # 4 classes, perfectly stratified splits
    x, la, lb, mb = ds.split_arrays("train")
    lookup = {x[i].tobytes(): la[i] for i in range(len(la))}
    perfect = ProbeModel(lambda xx: one_hot(
        np.array([lookup[xx[i].tobytes()] for i in range(len(xx))]), 4))
    m = evaluate(perfect, ds, "train")["A"]
    assert m.overall_accuracy == 1.0
    assert m.mean_per_class_accuracy == 1.0
    constant = ProbeModel(lambda xx: np.tile([0.7, 0.1, 0.1, 0.1], (len(xx), 1)))
    m = evaluate(constant, ds, "train")["A"]
    assert m.overall_accuracy == pytest.approx(0.25)  # balanced 4-class split


def test_evaluate_agrees_with_confusion_recount(rng):
    ds = small_dataset(n=400, seed=3)
    probs = rng.random((400, 4))
    probs /= probs.sum(axis=1, keepdims=True)
    idx_of = {ds.inputs[i].tobytes(): i for i in range(400)}
    model = ProbeModel(lambda xx: probs[[idx_of[xx[i].tobytes()] for i in range(len(xx))]])
    m = evaluate(model, ds, "test")["A"]
    x, la, _, _ = ds.split_arrays("test")
    preds = probs[[idx_of[x[i].tobytes()] for i in range(len(x))]].argmax(axis=1)
    confusion = np.zeros((4, 4), dtype=int)
    for t, p in zip(la, preds):
        confusion[t, p] += 1
    assert m.overall_accuracy == pytest.approx(np.trace(confusion) / confusion.sum())
    for c in range(4):
        row = confusion[c]
        if row.sum():
            assert m.per_class_accuracy[c] == pytest.approx(row[c] / row.sum())
    assert m.class_counts.tolist() == confusion.sum(axis=1).tolist()


def test_evaluate_task_b_respects_mask():
    ds = small_dataset(n=400, seed=5)
    ds.mask_b[ds.split == 2] = False  # hide every test-split B label
    net = build_one_task(tiny_conv_spec(classes=4), seed=0, task="B")
    with pytest.raises(ValueError, match="no examples"):
        evaluate(net, ds, "test")


def test_evaluate_empty_split_errors():
    ds = small_dataset(n=40)
    ds.split[:] = 0  # everything train
    net = build_one_task(tiny_conv_spec(classes=4), seed=0)
    with pytest.raises(ValueError, match="empty"):
        evaluate(net, ds, "test")


def test_ensemble_of_a_network_with_itself_is_identity():
    ds = small_dataset(n=400, seed=6)
    net = build_one_task(tiny_conv_spec(classes=4), seed=4)
    solo = evaluate(net, ds, "test")["A"]
    duo = ensemble_eval(net, net, ds, "test")
    assert duo.overall_accuracy == solo.overall_accuracy
    assert duo.loss == pytest.approx(solo.loss, rel=1e-12)
    np.testing.assert_array_equal(duo.per_class_accuracy, solo.per_class_accuracy)


def test_ensemble_averages_probabilities():
    ds = small_dataset(n=400, seed=7)
    x, la, _, _ = ds.split_arrays("test")
    n = len(la)
    spec = tiny_conv_spec(classes=4)
    m1 = ProbeModel(lambda xx: np.tile([0.6, 0.4, 0.0, 0.0], (len(xx), 1)))
    m2 = ProbeModel(lambda xx: np.tile([0.2, 0.8, 0.0, 0.0], (len(xx), 1)))
    for m in (m1, m2):
        m.spec = spec
    duo = ensemble_eval(m1, m2, ds, "test")
    # averaged to (0.4, 0.6): everything lands on class 1
    assert duo.overall_accuracy == pytest.approx((la == 1).mean())


def test_ensemble_prediction_invariant_to_common_rescaling():
    ds = small_dataset(n=200, seed=8)
    rng = np.random.default_rng(0)
    raw = rng.random((200, 4))
    idx_of = {ds.inputs[i].tobytes(): i for i in range(200)}
    spec = tiny_conv_spec(classes=4)

    def model_for(scale):
        m = ProbeModel(lambda xx, s=scale: s * raw[[idx_of[xx[i].tobytes()]
                                                    for i in range(len(xx))]])
        m.spec = spec
        return m

    base = ensemble_eval(model_for(1.0), model_for(1.0), ds, "test")
    scaled = ensemble_eval(model_for(16.0), model_for(16.0), ds, "test")
    assert base.overall_accuracy == scaled.overall_accuracy
    np.testing.assert_array_equal(base.per_class_accuracy, scaled.per_class_accuracy)


def test_ensemble_rejects_mismatched_members():
    net_a = build_one_task(tiny_conv_spec(classes=4), seed=0, task="A")
    net_b = build_one_task(tiny_conv_spec(classes=4), seed=0, task="B")
    ds = small_dataset(n=40)
    with pytest.raises(ValueError, match="same task"):
        ensemble_eval(net_a, net_b, ds, "test")
    other = build_one_task(tiny_dense_spec(classes=4).with_classes(4), seed=0)
    with pytest.raises(ValueError, match="topology"):
        ensemble_eval(net_a, other, ds, "test")


def test_ensemble_param_bookkeeping():
    net1 = build_one_task(tiny_conv_spec(classes=4), seed=0)
    net2 = build_one_task(tiny_conv_spec(classes=4), seed=1)
    assert net1.param_count() + net2.param_count() == 2 * net1.param_count()
