"""Learned kernel selection: training samples, normalized-performance
metrics, dataset splitting, the boosted-tree selector and its file format."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .boosting import BoostConfig, Tree, TreeEnsembleModel, fit_boosted_trees
from .kernels import ALL_KERNELS, Dimension, KernelId
from .sparse import FeatureVector

__all__ = [
    "TrainingSample",
    "EvalReport",
    "BoostConfig",
    "TreeEnsembleModel",
    "ModelFormatError",
    "ModelVersionError",
    "FEATURE_NAMES",
    "normalized_performance",
    "average_normalized",
    "split_dataset",
    "encode_features",
    "project_dimension",
    "train",
    "predict",
    "predict_index",
    "evaluate",
    "evaluate_choices",
    "save_model",
    "load_model",
    "dumps_model",
    "loads_model",
]

FEATURE_NAMES = ["log2_nnz", "log2_mat_size", "std_row", "n_cols"]
HARDWARE_FEATURE = "hardware_id"
MODEL_FORMAT = "spmmkit-selector"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


class ModelVersionError(ModelFormatError):
    pass


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """Features of one (matrix, N) pair plus the measured time of every kernel.

    ``timings`` is indexed by canonical kernel index (or by class index for
    a projected binary sample).
    """

    features: FeatureVector
    timings: np.ndarray
    matrix_id: str = ""

    def __post_init__(self):
        t = np.asarray(self.timings, dtype=np.float64)
        if t.ndim != 1 or t.shape[0] < 2:
            raise ValueError("need one timing per class")
        if not np.all(np.isfinite(t)) or np.any(t <= 0):
            raise ValueError(f"timings must be finite and positive: {t}")
        t.setflags(write=False)
        object.__setattr__(self, "timings", t)

    @property
    def label(self) -> int:
        # np.argmin returns the first minimum: lowest index wins ties
        return int(np.argmin(self.timings))

    @property
    def best_kernel(self) -> KernelId:
        return KernelId.from_index(self.label)


# ---------------------------------------------------------------- metrics

def normalized_performance(timings: Sequence[float], chosen: Union[KernelId, int]) -> float:
    """Best time over the chosen kernel's time, in (0, 1]."""
    t = np.asarray(timings, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t <= 0):
        raise ValueError(f"timings must be finite and positive: {t}")
    i = chosen.index if isinstance(chosen, KernelId) else int(chosen)
    return float(t.min() / t[i])


def average_normalized(values: Iterable[float]) -> float:
    """Geometric mean of normalized-performance values."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to average")
    if np.any(v <= 0) or np.any(v > 1):
        raise ValueError("normalized performance values must lie in (0, 1]")
    return float(np.exp(np.mean(np.log(v))))


# ---------------------------------------------------------------- splitting

def split_dataset(samples: Sequence, ratios=(0.4, 0.1, 0.5), seed: int = 0):
    """Seeded shuffle, then contiguous train/valid/test slices.

    Train and valid sizes are floor(ratio * n); the remainder goes to test.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    n = len(samples)
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(ratios[0] * n + 1e-9)
    n_valid = math.floor(ratios[1] * n + 1e-9)
    pick = lambda ix: [samples[i] for i in ix]
    return (pick(order[:n_train]), pick(order[n_train:n_train + n_valid]),
            pick(order[n_train + n_valid:]))


# ---------------------------------------------------------------- features

def encode_features(fv: FeatureVector, unified: bool = False) -> np.ndarray:
    """Model input row. nnz and mat_size enter as log2(1 + x)."""
    row = [math.log2(1 + fv.nnz), math.log2(1 + fv.mat_size), fv.std_row, float(fv.n_cols)]
    if unified:
        if fv.hardware_id is None:
            raise ValueError("unified model needs a hardware_id on every feature vector")
        row.append(float(fv.hardware_id))
    return np.asarray(row)


def _matrix(samples: Sequence[TrainingSample], unified: bool) -> np.ndarray:
    return np.stack([encode_features(s.features, unified) for s in samples])


def project_dimension(sample: TrainingSample, dimension: Dimension) -> TrainingSample:
    """Binary sample for one design axis: each side's time is the best time
    over the four kernels taking that choice."""
    t = sample.timings
    sides = [min(t[k.index] for k in ALL_KERNELS if dimension.choice_of(k) == side)
             for side in (0, 1)]
    return TrainingSample(sample.features, np.asarray(sides), sample.matrix_id)


# ---------------------------------------------------------------- training

def train(train_set: Sequence[TrainingSample], valid_set: Sequence[TrainingSample] = (),
          config: Optional[BoostConfig] = None, unified: bool = False) -> TreeEnsembleModel:
    """Fit a selector mapping features to the fastest kernel.

    With ``unified=True`` the hardware tag is appended as an extra feature so
    one model serves several machines.
    """
    config = config or BoostConfig()
    if not train_set:
        raise ValueError("empty training set")
    num_classes = len(train_set[0].timings)
    if any(len(s.timings) != num_classes for s in list(train_set) + list(valid_set)):
        raise ValueError("all samples need the same number of timings")
    names = FEATURE_NAMES + ([HARDWARE_FEATURE] if unified else [])
    X = _matrix(train_set, unified)
    y = np.array([s.label for s in train_set])
    Xv = _matrix(valid_set, unified) if valid_set else None
    yv = np.array([s.label for s in valid_set]) if valid_set else None
    model = fit_boosted_trees(X, y, num_classes, config, names, Xv, yv)
    model.metadata.update({
        "unified": unified,
        "encoding": {"log2_nnz": "log2(1+nnz)", "log2_mat_size": "log2(1+mat_size)"},
        "num_train": len(train_set),
        "num_valid": len(valid_set),
    })
    return model


def _is_unified(model: TreeEnsembleModel) -> bool:
    return HARDWARE_FEATURE in model.feature_names


def predict_index(model: TreeEnsembleModel, features) -> int:
    """Class index for a FeatureVector, or for an already-encoded row."""
    if isinstance(features, FeatureVector):
        row = encode_features(features, _is_unified(model))
    else:
        row = np.asarray(features, dtype=np.float64)
        if row.shape != (len(model.feature_names),):
            raise ValueError(f"model expects {len(model.feature_names)} features, "
                             f"got {row.shape}")
    return int(model.predict_class(row[None, :])[0])


def predict(model: TreeEnsembleModel, features) -> KernelId:
    if model.num_classes != len(ALL_KERNELS):
        raise ValueError(f"model has {model.num_classes} classes; use predict_index")
    return KernelId.from_index(predict_index(model, features))


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    per_sample_normalized: np.ndarray
    average_normalized: float
    accuracy: float
    feature_importance: dict[str, float]
    predictions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def summary_rows(self) -> list[tuple[str, float]]:
        rows = [("average_normalized", self.average_normalized),
                ("accuracy", self.accuracy),
                ("num_samples", float(len(self.per_sample_normalized)))]
        rows += [(f"importance:{k}", v) for k, v in self.feature_importance.items()]
        return rows

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.summary_rows():
            w.writerow([k, repr(float(v))])
        text = buf.getvalue()
        if dest is not None:
            with open(dest, "w", newline="") as fh:
                fh.write(text)
        return text

    def samples_to_csv(self, samples: Sequence[TrainingSample], dest) -> None:
        with open(dest, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["matrix_id", "N", "hardware_id", "predicted", "best", "normalized"])
            for s, p, v in zip(samples, self.predictions, self.per_sample_normalized):
                hw = "" if s.features.hardware_id is None else s.features.hardware_id
                w.writerow([s.matrix_id, s.features.n_cols, hw, int(p), s.label, repr(float(v))])


def evaluate_choices(test_set: Sequence[TrainingSample], choices: Sequence[int],
                     importance: Optional[dict[str, float]] = None) -> EvalReport:
    """Score arbitrary per-sample choices (model output, a fixed kernel, ...)."""
    if not test_set:
        raise ValueError("empty test set")
    choices = np.asarray(choices, dtype=np.int64)
    per = np.array([normalized_performance(s.timings, c) for s, c in zip(test_set, choices)])
    labels = np.array([s.label for s in test_set])
    # a tie with the best time counts as a hit
    hits = np.array([s.timings[c] == s.timings.min() for s, c in zip(test_set, choices)])
    return EvalReport(per, average_normalized(per), float(hits.mean()),
                      dict(importance or {}), choices, labels)


def evaluate(model: TreeEnsembleModel, test_set: Sequence[TrainingSample]) -> EvalReport:
    if not test_set:
        raise ValueError("empty test set")
    X = _matrix(test_set, _is_unified(model))
    choices = model.predict_class(X)
    imp = dict(zip(model.feature_names, model.feature_importance().tolist()))
    return evaluate_choices(test_set, choices, imp)


def best_static(test_set: Sequence[TrainingSample]) -> tuple[int, float]:
    """The single fixed choice with the highest average normalized
    performance over ``test_set``, and that value."""
    n = len(test_set[0].timings)
    scores = [evaluate_choices(test_set, [k] * len(test_set)).average_normalized
              for k in range(n)]
    k = int(np.argmax(scores))
    return k, scores[k]


# ---------------------------------------------------------------- persistence

def dumps_model(model: TreeEnsembleModel) -> bytes:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "learning_rate": model.learning_rate,
        "feature_names": model.feature_names,
        "metadata": model.metadata,
        "trees": [[t.to_dict() for t in class_trees] for class_trees in model.trees],
    }
    return json.dumps(doc, indent=None, separators=(",", ":")).encode("utf-8") + b"\n"


def loads_model(data: bytes) -> TreeEnsembleModel:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot decode model: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a selector model file")
    if doc.get("version") != MODEL_VERSION:
        raise ModelVersionError(f"unsupported model version {doc.get('version')!r}; "
                                f"this build reads version {MODEL_VERSION}")
    try:
        trees = [[Tree.from_dict(t) for t in class_trees] for class_trees in doc["trees"]]
        model = TreeEnsembleModel(trees, float(doc["learning_rate"]),
                                  list(doc["feature_names"]), dict(doc["metadata"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model: {exc}") from None
    nf = len(model.feature_names)
    for class_trees in trees:
        for t in class_trees:
            split = t.feature >= 0
            if np.any(t.feature[split] >= nf) or not np.all(np.isfinite(t.value)):
                raise ModelFormatError("tree references an unknown feature or has a bad leaf")
    return model


def save_model(model: TreeEnsembleModel, path: Union[str, os.PathLike]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_model(model))


def load_model(path: Union[str, os.PathLike]) -> TreeEnsembleModel:
    with open(path, "rb") as fh:
        return loads_model(fh.read())
