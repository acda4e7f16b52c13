"""scikit-learn style estimators around the DS model and its training loop.

``X`` holds all modalities side by side, ``modality_dims`` says how wide each
block is. Training rows must be complete (missing cases are simulated during
training). At prediction time a modality whose block is entirely NaN counts as
absent for that row, so one matrix can mix rows with different missing cases.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .cases import ModalityCase, SamplerConfig
from .data import MultimodalDataset
from .model import ModelSpec, predict
from .trainer import OptimizerConfig, TrainConfig, evaluate_all_cases, train_seed


class _DSBase(BaseEstimator):
    _loss = "cross_entropy"

    def __init__(
        self,
        modality_dims=(1,),
        hidden_dim=16,
        encoder=((16, "relu"),),
        backbone=((16, "relu"),),
        fusion="mean",
        steps=500,
        batch_size=64,
        optimizer="adam",
        lr=1e-3,
        momentum=0.0,
        gmd=True,
        k=5,
        pool="all",
        include_full=True,
        random_state=0,
    ):
        self.modality_dims = modality_dims
        self.hidden_dim = hidden_dim
        self.encoder = encoder
        self.backbone = backbone
        self.fusion = fusion
        self.steps = steps
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.gmd = gmd
        self.k = k
        self.pool = pool
        self.include_full = include_full
        self.random_state = random_state

    # helpers -----------------------------------------------------------------

    def _bounds(self):
        dims = [int(d) for d in self.modality_dims]
        if not dims or any(d < 1 for d in dims):
            raise ValueError(f"modality_dims must be positive widths, got {self.modality_dims}")
        edges = np.cumsum([0] + dims)
        return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def _blocks(self, X):
        X = check_array(X, dtype=np.float64, ensure_all_finite=False)
        bounds = self._bounds()
        if X.shape[1] != bounds[-1][1]:
            raise ValueError(f"X has {X.shape[1]} columns, modality_dims add up to {bounds[-1][1]}")
        if np.isinf(X).any():
            raise ValueError("X contains infinite values")
        return X, [X[:, a:b] for a, b in bounds]

    def _row_cases(self, blocks) -> np.ndarray:
        """Case mask of every row; raises on partially observed blocks and on
        rows with no modality at all."""
        masks = np.zeros(len(blocks[0]), dtype=np.int64)
        for i, block in enumerate(blocks):
            missing = np.isnan(block)
            partial = missing.any(axis=1) & ~missing.all(axis=1)
            if partial.any():
                row = int(np.argmax(partial))
                raise ValueError(f"row {row}: modality {i + 1} is partially missing")
            masks |= (~missing.all(axis=1)).astype(np.int64) << i
        if (masks == 0).any():
            raise ValueError(f"row {int(np.argmax(masks == 0))}: every modality is missing")
        return masks

    def _encode_target(self, y, refit=True):
        raise NotImplementedError

    def _output_dim(self, y) -> int:
        raise NotImplementedError

    def fit(self, X, y):
        X, blocks = self._blocks(X)
        if np.isnan(X).any():
            raise ValueError("training rows must be complete; missing cases are simulated during training")
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} rows, y has {len(y)}")
        target = self._encode_target(y)
        spec = ModelSpec(
            tuple(int(d) for d in self.modality_dims),
            int(self.hidden_dim),
            tuple(self.encoder),
            tuple(self.backbone),
            ((self._output_dim(target), "identity"),),
            self.fusion,
        )
        m = spec.n_modalities
        k = min(int(self.k), (1 << m) - 1)
        cfg = TrainConfig(
            steps=int(self.steps),
            batch_size=int(self.batch_size),
            optimizer=OptimizerConfig(self.optimizer, float(self.lr), float(self.momentum)),
            gmd_enabled=bool(self.gmd) and k >= 2,
            sampler=SamplerConfig(k, self.pool, bool(self.include_full)),
            loss=self._loss,
            seeds=(int(self.random_state),),
        )
        empty = np.array([], dtype=np.int64)
        dataset = MultimodalDataset(
            [b.copy() for b in blocks],
            target,
            {"train": np.arange(len(X)), "val": empty, "test": empty},
            getattr(self, "_n_classes", None),
        )
        state, _, _ = train_seed(spec, dataset, cfg, int(self.random_state))
        self.model_ = state.model
        self.n_features_in_ = X.shape[1]
        return self

    def _raw_predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X, blocks = self._blocks(X)
        masks = self._row_cases(blocks)
        m = len(blocks)
        out = np.empty((len(X), self.model_.spec.output_dim))
        for mask in np.unique(masks):
            rows = masks == mask
            case = ModalityCase(int(mask), m)
            inputs = [b[rows] if i in case else None for i, b in enumerate(blocks)]
            out[rows] = predict(self.model_, inputs, case)
        return out

    def score_cases(self, X, y, pool="all") -> dict[str, float]:
        """Score of complete rows under every case of ``pool``, keyed by case mask."""
        check_is_fitted(self, "model_")
        X, blocks = self._blocks(X)
        if np.isnan(X).any():
            raise ValueError("score_cases needs complete rows")
        target = self._encode_target(np.asarray(y), refit=False)
        metric = "accuracy" if self._loss == "cross_entropy" else "mse"
        table = evaluate_all_cases(self.model_, blocks, target, metric, pool)
        return table.as_dict()


class DSClassifier(ClassifierMixin, _DSBase):
    """Classifier; ``predict_proba`` is the softmax of the head output."""

    _loss = "cross_entropy"

    def _encode_target(self, y, refit=True):
        if y.ndim != 1:
            raise ValueError("y must be one-dimensional")
        if refit:
            self.classes_ = np.unique(y)
            if len(self.classes_) < 2:
                raise ValueError("need at least 2 classes")
            self._n_classes = len(self.classes_)
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise ValueError("y contains labels not seen during fit")
        return idx.astype(np.int64)

    def _output_dim(self, y) -> int:
        return len(self.classes_)

    def predict_proba(self, X) -> np.ndarray:
        logits = self._raw_predict(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        logits = self._raw_predict(X)
        return self.classes_[logits.argmax(axis=1)]


class DSRegressor(RegressorMixin, _DSBase):
    """Regressor trained with squared error; ``y`` may be 1-D or 2-D."""

    _loss = "mse"

    def _encode_target(self, y, refit=True):
        y = np.asarray(y, dtype=np.float64)
        if y.ndim not in (1, 2):
            raise ValueError("y must be one- or two-dimensional")
        if not np.isfinite(y).all():
            raise ValueError("y contains non-finite values")
        if refit:
            self._y_ndim = y.ndim
        return y

    def _output_dim(self, y) -> int:
        return 1 if y.ndim == 1 else y.shape[1]

    def predict(self, X) -> np.ndarray:
        out = self._raw_predict(X)
        return out[:, 0] if self._y_ndim == 1 else out
