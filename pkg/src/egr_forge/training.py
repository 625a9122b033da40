"""Empirical risk, edge-graph-regularized risk and detector training.

The regularized objective scores each image and its edge graph with the
same detector::

    R(theta) = mean_i BCE(f(I_i), y_i) + lam * mean_i BCE(f(E_i), y_i)

``lam = 0`` recovers plain empirical risk minimization.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_binary_labels, check_images
from .corruptions import Corruption, CorruptionSpec
from .detector import INPUT_SIZE, Detector, init_detector, probe_mask
from .edges import EDGE_MODES, EdgeGraphTransformer
from .metrics import auc
from .nn import Adam, bce_loss, make_rng

STRATEGIES = ("retrain", "linear_probe", "fine_tune")
FINE_TUNE_LR_DIVISOR = 10.0
BINARY_EDGE_THRESHOLD = 0.5


class ConfigError(ValueError):
    """Invalid training configuration."""


def to_nchw(images):
    """(N, H, W, C) channel-last images -> (N, 3, H, W) detector input."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[3] == 1:
        images = np.repeat(images, 3, axis=3)
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


def _mean_bce(model, images, labels):
    images = check_images(images)
    if len(images) == 0:
        raise ValueError("risk of an empty sample list is undefined")
    labels = check_binary_labels(labels, len(images))
    scores = model.predict_scores(to_nchw(images))
    return bce_loss(scores, labels)


def empirical_risk(model, images, labels):
    """Mean BCE of ``model`` over the images."""
    return _mean_bce(model, images, labels)


def edge_only_risk(model, images, labels, edge_mode="magnitude", threshold=None, edges=None):
    """Mean BCE of ``model`` scoring edge graphs in place of the images."""
    if edges is None:
        edges = EdgeGraphTransformer(edge_mode, threshold).transform(images)
    return _mean_bce(model, edges, labels)


def egr_risk(model, images, labels, lam, edge_mode="magnitude", threshold=None, edges=None):
    """Empirical risk plus ``lam`` times the edge-graph risk."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    risk = empirical_risk(model, images, labels)
    edge_term = edge_only_risk(model, images, labels, edge_mode, threshold, edges)
    return risk + lam * edge_term


class EGRClassifier(ClassifierMixin, BaseEstimator):
    """Compact CNN forgery detector trained with edge-graph regularization.

    Parameters
    ----------
    lam : float, default=0.5
        Weight of the edge-graph risk, in [0, 1].
    strategy : {"retrain", "linear_probe", "fine_tune"}, default="retrain"
        ``retrain`` starts from a fresh seeded detector. ``linear_probe``
        loads ``init_checkpoint`` and trains only the final linear layer.
        ``fine_tune`` loads it and trains everything at ``lr / 10``.
    lr : float, default=1e-3
        Adam learning rate.
    epochs, batch_size : int
        Mini-batch schedule; batches come from a seeded shuffle per epoch.
    seed : int, default=0
        Seeds detector initialization and batch order.
    edge_mode : {"magnitude", "binary"}, default="magnitude"
    edge_threshold : float or None
        Threshold for binary edge graphs (0.5 when unset).
    init_checkpoint : str or None
        Checkpoint to start from for ``linear_probe`` and ``fine_tune``.
    edge_branch : {"auto", True, False}, default="auto"
        Whether the edge-graph term is evaluated. ``"auto"`` evaluates it
        only when ``lam > 0``; ``True`` forces it even at ``lam = 0``.

    Attributes
    ----------
    model_ : Detector
        Best-validation-AUC detector (last epoch when no validation set).
    history_ : list of dict
        Per epoch: ``epoch``, ``train_risk``, ``val_auc``, ``seconds``.
    best_epoch_ : int
    classes_ : ndarray of shape (2,)
    """

    def __init__(
        self,
        lam=0.5,
        strategy="retrain",
        lr=1e-3,
        epochs=10,
        batch_size=32,
        seed=0,
        edge_mode="magnitude",
        edge_threshold=None,
        init_checkpoint=None,
        edge_branch="auto",
    ):
        self.lam = lam
        self.strategy = strategy
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.edge_mode = edge_mode
        self.edge_threshold = edge_threshold
        self.init_checkpoint = init_checkpoint
        self.edge_branch = edge_branch

    def _validate_params(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.strategy != "retrain" and not self.init_checkpoint:
            raise ConfigError(f"strategy {self.strategy!r} requires init_checkpoint")
        if self.edge_mode not in EDGE_MODES:
            raise ConfigError(f"edge_mode must be one of {EDGE_MODES}, got {self.edge_mode!r}")
        if not (self.lr > 0 and self.epochs >= 1 and self.batch_size >= 1):
            raise ConfigError("lr must be positive; epochs and batch_size at least 1")
        if self.edge_branch not in ("auto", True, False):
            raise ConfigError(f"edge_branch must be 'auto', True or False, got {self.edge_branch!r}")

    def _threshold(self):
        if self.edge_mode != "binary":
            return None
        return BINARY_EDGE_THRESHOLD if self.edge_threshold is None else self.edge_threshold

    def edge_graphs(self, X):
        return EdgeGraphTransformer(self.edge_mode, self._threshold()).transform(X)

    def _initial_model(self):
        if self.strategy == "retrain":
            return init_detector(self.seed), self.lr
        model = Detector.load(self.init_checkpoint)
        if self.strategy == "linear_probe":
            model.store.freeze(probe_mask(model))
            return model, self.lr
        return model, self.lr / FINE_TUNE_LR_DIVISOR

    def fit(self, X, y, X_val=None, y_val=None, edges=None, on_step=None):
        """Train on images ``X`` (N, 64, 64, 3) with labels ``y``.

        ``edges`` may hold precomputed edge graphs for ``X``. ``on_step`` is
        called as ``on_step(step, model)`` after every optimizer update.
        """
        self._validate_params()
        X = check_images(X, channels=3)
        if X.shape[1:3] != (INPUT_SIZE, INPUT_SIZE):
            raise ValueError(f"X: expected {INPUT_SIZE}x{INPUT_SIZE} images, got {X.shape[1:3]}")
        y = check_binary_labels(y, len(X))
        if len(X) == 0:
            raise ValueError("cannot fit on an empty training set")
        use_edges = self.edge_branch is True or (self.edge_branch == "auto" and self.lam > 0)
        if self.edge_branch is False and self.lam > 0:
            raise ConfigError("edge_branch=False requires lam == 0")
        if use_edges and edges is None:
            edges = self.edge_graphs(X)
        x_img = to_nchw(X)
        x_edge = to_nchw(edges) if use_edges else None
        has_val = X_val is not None
        if has_val:
            x_val = to_nchw(check_images(X_val, channels=3))
            y_val = check_binary_labels(y_val, len(x_val))

        model, lr = self._initial_model()
        opt = Adam(lr=lr)
        rng = make_rng(self.seed, 1)
        history = []
        best = (-np.inf, None, 0)
        step = 0
        for epoch in range(1, self.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(X))
            total = 0.0
            for start in range(0, len(X), self.batch_size):
                idx = order[start : start + self.batch_size]
                model.store.zero_grad()
                risk = model.loss_and_backward(x_img[idx], y[idx])
                if use_edges:
                    edge_risk = model.loss_and_backward(x_edge[idx], y[idx], weight=self.lam)
                    risk = risk + self.lam * edge_risk
                opt.step(model.store)
                step += 1
                total += risk * len(idx)
                if on_step is not None:
                    on_step(step, model)
            val_auc = auc(model.predict_scores(x_val), y_val) if has_val else float("nan")
            history.append(
                {
                    "epoch": epoch,
                    "train_risk": total / len(X),
                    "val_auc": val_auc,
                    "seconds": time.perf_counter() - t0,
                }
            )
            if not has_val or val_auc > best[0]:
                best = (val_auc, model.store.copy_values(), epoch)
        model.store.load_values(best[1])
        self.model_ = model
        self.history_ = history
        self.best_epoch_ = best[2]
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, channels=3)
        return self.model_.predict_scores(to_nchw(X))

    def predict_proba(self, X):
        s = self.decision_function(X)
        return np.column_stack([1.0 - s, s])

    def predict(self, X):
        return (self.decision_function(X) >= 0.5).astype(np.int64)


# ---------------------------------------------------------------------------
# config-driven training


@dataclass
class TrainConfig:
    lam: float = 0.5
    strategy: str = "retrain"
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    edge_mode: str = "magnitude"
    edge_threshold: float | None = None
    corruption: dict | None = None
    init_checkpoint: str | None = None

    # JSON uses "lambda"; the attribute cannot
    _aliases = {"lambda": "lam"}

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("training config must be a JSON object")
        names = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            attr = cls._aliases.get(key, key)
            if attr not in names or attr == "lam" and key != "lambda":
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[attr] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def validate(self):
        checks = [
            (isinstance(self.lam, (int, float)) and 0 <= self.lam <= 1, "lambda must lie in [0, 1]"),
            (self.strategy in STRATEGIES, f"strategy must be one of {STRATEGIES}"),
            (isinstance(self.lr, (int, float)) and self.lr > 0, "lr must be positive"),
            (isinstance(self.epochs, int) and self.epochs >= 1, "epochs must be an integer >= 1"),
            (isinstance(self.batch_size, int) and self.batch_size >= 1, "batch_size must be an integer >= 1"),
            (isinstance(self.seed, int), "seed must be an integer"),
            (self.edge_mode in EDGE_MODES, f"edge_mode must be one of {EDGE_MODES}"),
            (self.edge_threshold is None
             or isinstance(self.edge_threshold, (int, float)) and 0 < self.edge_threshold <= 1,
             "edge_threshold must lie in (0, 1]"),
            (self.strategy == "retrain" or bool(self.init_checkpoint),
             f"strategy {self.strategy!r} requires init_checkpoint"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if self.corruption is not None:
            CorruptionSpec.from_dict(self.corruption)
        return self

    def corruption_spec(self):
        return None if self.corruption is None else CorruptionSpec.from_dict(self.corruption)

    def estimator(self, **overrides):
        params = dict(
            lam=self.lam,
            strategy=self.strategy,
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            edge_mode=self.edge_mode,
            edge_threshold=self.edge_threshold,
            init_checkpoint=self.init_checkpoint,
        )
        params.update(overrides)
        return EGRClassifier(**params)


def prepare_images(manifest, corruption=None, corruption_seed=0):
    """Decode a manifest's images and apply an optional corruption."""
    from .manifest import load_images

    images = load_images(manifest)
    if corruption is not None and len(images):
        spec = corruption
        images = Corruption(spec.kind, spec.sigma, spec.radius, spec.quality, corruption_seed).transform(images)
    return images


def train(manifest, split, config, cache=None):
    """Train a detector on the ``train`` identities of ``manifest``.

    Returns ``(model, history)``; the model is the epoch with the best AUC on
    the ``val`` identities. Edge graphs are computed after any corruption,
    through ``cache`` (an :class:`~egr_forge.edges.EdgeCache`) when given.
    """
    if isinstance(config, dict):
        config = TrainConfig.from_dict(config)
    config.validate()
    train_m = manifest.select_split(split, "train")
    val_m = manifest.select_split(split, "val")
    if not len(train_m) or not len(val_m):
        raise ConfigError("split must leave non-empty train and val sets")
    train_m.check_trainable()
    val_m.check_trainable()
    spec = config.corruption_spec()
    X = prepare_images(train_m, spec, config.seed)
    X_val = prepare_images(val_m, spec, config.seed)
    est = config.estimator()
    edges = None
    if config.lam > 0:
        threshold = est._threshold()
        if cache is not None:
            edges = cache.transform(X, config.edge_mode, threshold)
        else:
            edges = est.edge_graphs(X)
    est.fit(X, train_m.labels, X_val, val_m.labels, edges=edges)
    return est.model_, est.history_
