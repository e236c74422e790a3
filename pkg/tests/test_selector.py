import numpy as np
import pytest
from hypothesis import given, strategies as st

from spmmkit.boosting import BoostConfig, Tree, TreeEnsembleModel, fit_boosted_trees
from spmmkit.kernels import ALL_KERNELS, Dimension, KernelId
from spmmkit.selector import (
    FEATURE_NAMES,
    ModelFormatError,
    ModelVersionError,
    TrainingSample,
    average_normalized,
    best_static,
    dumps_model,
    encode_features,
    evaluate,
    evaluate_choices,
    load_model,
    loads_model,
    normalized_performance,
    predict,
    predict_index,
    project_dimension,
    save_model,
    split_dataset,
    train,
)
from spmmkit.sparse import FeatureVector

RB = KernelId.parse("RB+RM+SR").index
EB = KernelId.parse("EB+RM+SR").index


def timings_favoring(best, rng, n=8):
    t = 1.0 + rng.random(n)
    t[best] = 0.5
    return t


def fv(std_row, nnz=1000, m=100, n_cols=8, hw=None):
    return FeatureVector(nnz, m, std_row, n_cols, hw)


def threshold_samples(rng, count, cut=15.0):
    """RB fastest when std_row < cut, EB fastest above; a 10-wide margin."""
    out = []
    for i in range(count):
        s = rng.uniform(0, 10) if i % 2 else rng.uniform(20, 30)
        best = RB if s < cut else EB
        out.append(TrainingSample(fv(s, nnz=int(rng.integers(500, 5000))),
                                  timings_favoring(best, rng)))
    return out


# ---------------------------------------------------------------- samples and metrics

def test_sample_label_ties_lowest_index():
    s = TrainingSample(fv(1.0), [3, 2, 2, 5, 2, 9, 9, 9])
    assert s.label == 1 and s.best_kernel == KernelId.from_index(1)


@pytest.mark.parametrize("bad", [[1, 2, 0, 1, 1, 1, 1, 1], [1, -1] + [1] * 6,
                                 [np.inf] + [1] * 7, [np.nan] + [1] * 7])
def test_sample_rejects_bad_timings(bad):
    with pytest.raises(ValueError):
        TrainingSample(fv(1.0), bad)


@given(st.lists(st.floats(1e-6, 1e3), min_size=8, max_size=8), st.floats(1e-3, 1e3))
def test_label_scale_invariant(t, c):
    a = TrainingSample(fv(1.0), t)
    b = TrainingSample(fv(1.0), np.asarray(t) * c)
    assert a.label == b.label
    assert normalized_performance(t, a.label) == 1.0
    for k in range(8):
        assert 0 < normalized_performance(t, k) <= 1.0


def test_normalized_performance_examples():
    t = [1.0, 1.25, 2.0, 4.0, 1.5, 3.0, 5.0, 6.0]
    assert normalized_performance(t, 0) == 1.0
    assert normalized_performance(t, 1) == 0.8
    assert normalized_performance(np.asarray(t) * 3, 1) == pytest.approx(0.8, rel=1e-15)
    assert normalized_performance(t, KernelId.from_index(1)) == 0.8
    with pytest.raises(ValueError):
        normalized_performance([1.0, 0.0], 0)


def test_average_normalized_examples():
    assert average_normalized([1.0, 0.64]) == 0.8
    assert average_normalized([1.0] * 5) == 1.0
    assert average_normalized([0.5, 0.5, 0.5]) == pytest.approx(0.5, rel=1e-15)
    for bad in ([], [0.0, 1.0], [1.2]):
        with pytest.raises(ValueError):
            average_normalized(bad)


# ---------------------------------------------------------------- splitting

def test_split_sizes_and_disjoint():
    items = list(range(10))
    tr, va, te = split_dataset(items, (0.4, 0.1, 0.5), seed=3)
    assert (len(tr), len(va), len(te)) == (4, 1, 5)
    assert sorted(tr + va + te) == items
    assert split_dataset(items, seed=3) == (tr, va, te)
    assert split_dataset(items, seed=4) != (tr, va, te)


@pytest.mark.parametrize("n, sizes", [(3, (1, 0, 2)), (7, (2, 0, 5)), (200, (80, 20, 100)),
                                      (213, (85, 21, 107))])
def test_split_floor_rule(n, sizes):
    assert tuple(map(len, split_dataset(list(range(n))))) == sizes


def test_split_errors():
    with pytest.raises(ValueError):
        split_dataset(list(range(10)), (0.5, 0.5, 0.1))
    with pytest.raises(ValueError):
        split_dataset([1, 2])


# ---------------------------------------------------------------- training

def test_single_class_dataset():
    rng = np.random.default_rng(0)
    data = [TrainingSample(fv(rng.uniform(0, 50)), timings_favoring(5, rng)) for _ in range(30)]
    model = train(data, config=BoostConfig(num_rounds=10))
    assert all(predict_index(model, s.features) == 5 for s in data)
    assert predict(model, fv(1e6, nnz=3, m=2, n_cols=999)) == KernelId.from_index(5)
    assert evaluate(model, data).accuracy == 1.0


def test_threshold_rule_learned():
    rng = np.random.default_rng(1)
    data = threshold_samples(rng, 120)
    tr, va, te = split_dataset(data, seed=0)
    model = train(tr, va, BoostConfig(max_depth=2))
    rep = evaluate(model, te)
    assert rep.accuracy == 1.0 and rep.average_normalized == 1.0
    for s in np.linspace(0, 10, 21):
        assert predict_index(model, fv(s)) == RB
    for s in np.linspace(20, 30, 21):
        assert predict_index(model, fv(s)) == EB
    assert rep.feature_importance["std_row"] == max(rep.feature_importance.values())


def test_training_is_deterministic():
    rng = np.random.default_rng(2)
    data = threshold_samples(rng, 60)
    for s in data[::3]:
        object.__setattr__(s, "timings", timings_favoring(int(rng.integers(8)), rng))
    a = train(data[:40], data[40:], BoostConfig(seed=7))
    b = train(data[:40], data[40:], BoostConfig(seed=7))
    assert dumps_model(a) == dumps_model(b)
    probe = np.random.default_rng(9).random((50, 4)) * [13, 7, 40, 128]
    np.testing.assert_array_equal(a.predict_class(probe), b.predict_class(probe))


def test_train_errors():
    with pytest.raises(ValueError):
        train([])
    with pytest.raises(ValueError):
        BoostConfig(num_rounds=0)


def test_early_stopping_truncates():
    rng = np.random.default_rng(4)
    # labels independent of features: validation loss stops improving quickly
    data = [TrainingSample(fv(rng.uniform(0, 50)), timings_favoring(int(rng.integers(8)), rng))
            for _ in range(80)]
    model = train(data[:60], data[60:], BoostConfig(num_rounds=200, patience=5, min_leaf=1))
    assert model.num_rounds == model.metadata["best_round"] < 200
    assert all(len(ct) == model.num_rounds for ct in model.trees)


def test_rank_transform_keeps_topology():
    rng = np.random.default_rng(5)
    X = rng.random((90, 3)) * [5, 100, 1]
    y = (X[:, 0] > 2.5).astype(int) + (X[:, 1] > 60).astype(int)
    Xr = X.copy()
    Xr[:, 1] = np.argsort(np.argsort(X[:, 1]))
    cfg = BoostConfig(num_rounds=15, max_depth=3, min_leaf=3)
    a = fit_boosted_trees(X, y, 3, cfg, ["a", "b", "c"])
    b = fit_boosted_trees(Xr, y, 3, cfg, ["a", "b", "c"])
    for ta, tb in zip(sum(a.trees, []), sum(b.trees, [])):
        np.testing.assert_array_equal(ta.feature, tb.feature)
        np.testing.assert_array_equal(ta.left, tb.left)
        np.testing.assert_array_equal(ta.right, tb.right)
        np.testing.assert_array_equal(ta.value, tb.value)


def test_leaf_scaling_keeps_argmax():
    rng = np.random.default_rng(6)
    data = threshold_samples(rng, 60)
    model = train(data, config=BoostConfig(num_rounds=20))
    scaled = TreeEnsembleModel(
        [[Tree(t.feature, t.threshold, t.left, t.right, t.value * 7.5, t.gain) for t in ct]
         for ct in model.trees], model.learning_rate, model.feature_names)
    probe = np.column_stack([rng.uniform(8, 13, 200), rng.uniform(6, 7, 200),
                             rng.uniform(0, 40, 200), np.full(200, 8.0)])
    np.testing.assert_array_equal(model.predict_class(probe), scaled.predict_class(probe))


def test_predict_arity_checked():
    model = train(threshold_samples(np.random.default_rng(0), 20),
                  config=BoostConfig(num_rounds=2))
    with pytest.raises(ValueError):
        predict_index(model, [1.0, 2.0])
    with pytest.raises(ValueError):
        model.raw_scores(np.ones((3, 5)))


def test_feature_encoding():
    row = encode_features(FeatureVector(1023, 255, 2.5, 16))
    assert row.tolist() == [10.0, 8.0, 2.5, 16.0]
    assert encode_features(FeatureVector(1, 1, 0, 1, 3), unified=True)[-1] == 3.0
    with pytest.raises(ValueError):
        encode_features(FeatureVector(1, 1, 0, 1), unified=True)


# ---------------------------------------------------------------- evaluation

def test_evaluate_oracle_and_constant():
    rng = np.random.default_rng(8)
    data = [TrainingSample(fv(1.0), 0.1 + rng.random(8)) for _ in range(12)]
    oracle = evaluate_choices(data, [s.label for s in data])
    assert oracle.average_normalized == 1.0 and oracle.accuracy == 1.0
    assert np.all(oracle.per_sample_normalized == 1.0)
    j = 3
    const = evaluate_choices(data, [j] * len(data))
    want = np.exp(np.mean(np.log([s.timings.min() / s.timings[j] for s in data])))
    assert const.average_normalized == pytest.approx(want, rel=1e-14)
    k, score = best_static(data)
    assert score == max(evaluate_choices(data, [i] * 12).average_normalized for i in range(8))
    assert score <= 1.0
    with pytest.raises(ValueError):
        evaluate_choices([], [])


def test_tie_with_best_counts_as_hit():
    s = TrainingSample(fv(1.0), [2, 1, 1, 3, 3, 3, 3, 3])
    rep = evaluate_choices([s], [2])
    assert rep.accuracy == 1.0 and rep.per_sample_normalized[0] == 1.0


def test_importance_of_unused_feature_is_zero():
    rng = np.random.default_rng(1)
    rep = evaluate(train(threshold_samples(rng, 80), config=BoostConfig(max_depth=1)),
                   threshold_samples(rng, 20))
    imp = rep.feature_importance
    assert set(imp) == set(FEATURE_NAMES)
    assert imp["n_cols"] == 0.0 and imp["log2_mat_size"] == 0.0
    assert sum(imp.values()) == pytest.approx(1.0)
    assert all(v >= 0 for v in imp.values())


def test_report_csv():
    rng = np.random.default_rng(2)
    data = threshold_samples(rng, 40)
    rep = evaluate(train(data, config=BoostConfig(num_rounds=5)), data)
    text = rep.to_csv()
    lines = text.splitlines()
    assert lines[0] == "metric,value"
    assert lines[1].startswith("average_normalized,")
    assert any(line.startswith("importance:std_row,") for line in lines)


def test_project_dimension():
    t = np.arange(1, 9, dtype=float)[::-1]  # EB+CM+PR fastest
    s = TrainingSample(fv(1.0), t)
    rb_eb = project_dimension(s, Dimension.RB_EB)
    assert rb_eb.timings.tolist() == [min(t[:4]), min(t[4:])] and rb_eb.label == 1
    sr_pr = project_dimension(s, Dimension.SR_PR)
    assert sr_pr.timings.tolist() == [min(t[k.index] for k in ALL_KERNELS if k.k_choice == 0),
                                      1.0]


# ---------------------------------------------------------------- persistence

def test_model_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    data = threshold_samples(rng, 50)
    model = train(data[:40], data[40:], BoostConfig(num_rounds=12))
    p = tmp_path / "m.json"
    save_model(model, p)
    back = load_model(p)
    probe = rng.random((100, 4)) * [13, 7, 40, 128]
    np.testing.assert_array_equal(model.raw_scores(probe), back.raw_scores(probe))
    assert back.metadata["config"]["seed"] == 0
    assert loads_model(dumps_model(back)) is not None


def test_model_corrupt_and_version():
    model = train(threshold_samples(np.random.default_rng(3), 20),
                  config=BoostConfig(num_rounds=3))
    blob = dumps_model(model)
    with pytest.raises(ModelFormatError):
        loads_model(blob[: len(blob) // 2])
    with pytest.raises(ModelFormatError):
        loads_model(b"\xff\xfe")
    with pytest.raises(ModelVersionError):
        loads_model(blob.replace(b'"version":1', b'"version":2'))
    with pytest.raises(ModelFormatError):
        loads_model(blob.replace(b'"format":"spmmkit-selector"', b'"format":"other"'))


# ---------------------------------------------------------------- unified

def test_unified_model_uses_hardware_tag():
    rng = np.random.default_rng(11)
    data = []
    for hw, best in ((0, RB), (1, EB)):
        for _ in range(40):
            data.append(TrainingSample(fv(rng.uniform(0, 30), hw=hw), timings_favoring(best, rng)))
    model = train(data, config=BoostConfig(num_rounds=20), unified=True)
    assert model.feature_names[-1] == "hardware_id"
    assert predict_index(model, fv(12.0, hw=0)) == RB
    assert predict_index(model, fv(12.0, hw=1)) == EB
    for hw in (0, 1):
        rep = evaluate(model, [s for s in data if s.features.hardware_id == hw])
        assert rep.accuracy == 1.0
        assert sum(rep.feature_importance.values()) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        predict_index(model, fv(12.0))
