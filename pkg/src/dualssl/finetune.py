"""Supervised fine-tuning with stratified k-fold cross-validation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .augment import AugmentSpec, apply_batch, eval_spec, finetune_spec, identity_spec
from .checkpoint import Checkpoint
from .data import ImageDataset
from .errors import ConfigError, ContractError, DataError, ShapeError
from .metrics import roc_auc_ovr
from .nn import BatchNorm1d, Dropout, Linear, Module, ReLU
from .optim import Adam
from .rng import CounterRNG, derive_seed
from .tensor import Tensor
from .vit import ViTConfig, ViTModel

log = logging.getLogger(__name__)

IMPROVEMENT_THRESHOLD = 1e-4


@dataclass
class FinetuneConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    epochs: int = 50
    dropout: float = 0.5
    weight_decay: float = 1e-4
    folds: int = 10
    early_stop_patience: int = 3
    scheduler_factor: float = 0.5
    scheduler_patience: int = 2
    min_lr: float = 1e-6
    head_hidden: int = 128
    freeze_backbone: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.early_stop_patience < 1 or self.scheduler_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if not 0.0 < self.scheduler_factor < 1.0:
            raise ConfigError("scheduler_factor must be in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm in the head)")
        if self.epochs < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs must be >= 1 and learning_rate > 0")


class ClassifierHead(Module):
    """fc -> batch norm -> ReLU -> dropout -> linear logits."""

    def __init__(self, embed_dim: int, num_classes: int, hidden: int, dropout: float, rng: CounterRNG):
        self.fc = Linear(embed_dim, hidden, rng.split(0))
        self.bn = BatchNorm1d(hidden)
        self.act = ReLU()
        self.drop = Dropout(dropout, rng.split(1))
        self.out = Linear(hidden, num_classes, rng.split(2))

    def forward(self, x):
        return self.out(self.drop(self.act(self.bn(self.fc(x)))))


class Classifier(Module):
    def __init__(self, backbone: ViTModel, head: ClassifierHead, freeze_backbone: bool = False):
        self.backbone = backbone
        self.head = head
        self.freeze_backbone = freeze_backbone
        if freeze_backbone:
            backbone.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.freeze_backbone:
            self.backbone.eval()
        return self

    def forward(self, images) -> Tensor:
        if self.freeze_backbone:
            with T.no_grad():
                feats = self.backbone(images)
        else:
            feats = self.backbone(images)
        return self.head(feats)


def build_classifier(checkpoint: Optional[Checkpoint], num_classes: int, config: FinetuneConfig,
                     model_config: Optional[ViTConfig] = None, seed: int = 0) -> Classifier:
    """Backbone from the checkpoint's online encoder (or fresh), plus a new head."""
    if checkpoint is not None:
        model_config = checkpoint.model_config
    model_config = model_config or ViTConfig()
    backbone = ViTModel(model_config, derive_seed(seed, 0))
    if checkpoint is not None:
        backbone.load_state_dict(checkpoint.section("backbone"))
    head = ClassifierHead(model_config.embed_dim, num_classes, config.head_hidden, config.dropout,
                          CounterRNG(derive_seed(seed, 1)))
    return Classifier(backbone, head, config.freeze_backbone)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def class_weights(labels, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights ``n / (K * n_c)``."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)[:num_classes]
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ConfigError(f"class {int(missing[0])} has no samples; cannot compute class weights")
    return counts.sum() / (num_classes * counts)


def weighted_cross_entropy(logits, labels, weights) -> Tensor:
    """``-sum_i w[y_i] log softmax(logits_i)[y_i] / sum_i w[y_i]``."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{len(labels)} labels for {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = int(np.argmax((labels < 0) | (labels >= k)))
        raise DataError(f"label {labels[bad]} at index {bad} is outside [0, {k})")
    w = np.asarray(weights, dtype=np.float64)[labels]
    picked = np.zeros((n, k))
    picked[np.arange(n), labels] = w / w.sum()
    return -(T.log_softmax(logits, axis=-1) * picked).sum()


# ---------------------------------------------------------------------------
# schedule control
# ---------------------------------------------------------------------------

class ReduceLROnPlateau:
    """Multiply the lr by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 2, min_lr: float = 1e-6,
                 threshold: float = IMPROVEMENT_THRESHOLD):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, val_metric: float) -> float:
        if val_metric < self.best - self.threshold:
            self.best = val_metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


class EarlyStopping:
    """Stop after ``patience`` epochs without improvement; keeps the best weights."""

    def __init__(self, patience: int = 3, threshold: float = IMPROVEMENT_THRESHOLD):
        self.patience = patience
        self.threshold = threshold
        self.best = float("inf")
        self.best_epoch = -1
        self.best_state = None
        self.bad_epochs = 0
        self.epoch = 0

    def step(self, val_metric: float, model: Optional[Module] = None) -> bool:
        self.epoch += 1
        if val_metric < self.best - self.threshold:
            self.best = val_metric
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            if model is not None:
                self.best_state = model.state_dict()
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def restore(self, model: Module) -> None:
        if self.best_state is not None:
            model.load_state_dict(self.best_state)


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

@dataclass
class FoldPlan:
    folds: list  # [(train_idx, val_idx), ...]

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def __getitem__(self, i):
        return self.folds[i]


def stratified_kfold(labels, k: int, seed: int) -> FoldPlan:
    """Deal each class's shuffled members round-robin over the folds.

    The starting fold of each class continues where the previous class
    stopped, which keeps total fold sizes within one of each other as well.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ConfigError("k must be >= 2")
    counts = np.bincount(labels)
    small = [c for c, n in enumerate(counts) if 0 < n < k]
    if small:
        raise ConfigError(f"class {small[0]} has {counts[small[0]]} samples, fewer than k={k}")
    rng = CounterRNG(seed)
    assignment = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in range(len(counts)):
        members = np.flatnonzero(labels == c)
        if not members.size:
            continue
        members = members[rng.split(c).permutation(len(members))]
        assignment[members] = (offset + np.arange(len(members))) % k
        offset = (offset + len(members)) % k
    everything = np.arange(len(labels))
    return FoldPlan([(everything[assignment != f], everything[assignment == f]) for f in range(k)])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    model: Classifier
    val_auc: float
    val_loss: float
    history: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def predict(model: Classifier, images: np.ndarray, spec: Optional[AugmentSpec] = None,
            batch_size: int = 256) -> np.ndarray:
    """Eval-mode softmax probabilities; ``spec`` should be deterministic (see ``eval_spec``)."""
    spec = spec or identity_spec()
    was_training = model.training
    model.eval()
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            x = apply_batch(chunk, spec, [0] * len(chunk))
            out.append(T.softmax(model(x), axis=-1).data)
    model.train(was_training)
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, 0))


def evaluate_loss(model: Classifier, dataset: ImageDataset, weights, spec=None) -> tuple[float, np.ndarray]:
    probs = predict(model, dataset.images, spec)
    logp = np.log(np.clip(probs[np.arange(len(dataset)), dataset.labels], 1e-300, None))
    w = np.asarray(weights)[dataset.labels]
    return float(-(w * logp).sum() / w.sum()), probs


def finetune_fold(checkpoint: Optional[Checkpoint], train: ImageDataset, val: ImageDataset,
                  config: FinetuneConfig, model_config: Optional[ViTConfig] = None,
                  spec: Optional[AugmentSpec] = None, fold: int = 0) -> FoldResult:
    """Train backbone + head on ``train``; validation loss drives lr and early stopping.

    The returned model carries the weights of the best validation epoch.
    ``checkpoint=None`` trains from a random initialization.
    """
    if train.labels is None or val.labels is None:
        raise ConfigError("fine-tuning needs labeled train and validation sets")
    k = train.num_classes
    seed = derive_seed(config.seed, fold)
    model = build_classifier(checkpoint, k, config, model_config, seed)
    c = model.backbone.config
    if train.image_shape != (c.in_channels, c.image_size, c.image_size):
        raise ShapeError(f"data images {train.image_shape} do not match the backbone config")
    spec = spec if spec is not None else finetune_spec(c.image_size)
    weights = class_weights(train.labels, k)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    scheduler = ReduceLROnPlateau(config.learning_rate, config.scheduler_factor,
                                  config.scheduler_patience, config.min_lr)
    stopper = EarlyStopping(config.early_stop_patience)
    rng = CounterRNG(derive_seed(seed, 2))
    history = []
    stopped = False
    for epoch in range(config.epochs):
        model.train()
        order = rng.split(epoch).permutation(len(train))
        losses, sizes = [], []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two samples
            seeds = [derive_seed(seed, 3, epoch, int(i)) for i in idx]
            x = apply_batch(train.images[idx], spec, seeds)
            loss = weighted_cross_entropy(model(x), train.labels[idx], weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))
        val_loss, probs = evaluate_loss(model, val, weights, eval_spec(spec))
        _, val_auc, _ = roc_auc_ovr(probs, val.labels)
        lr = optimizer.lr
        history.append({"epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss,
                        "val_auc": val_auc, "lr": lr})
        log.info("fold %d epoch %d: train %.4f val %.4f auc %.4f lr %.2e",
                 fold, epoch + 1, train_loss, val_loss, val_auc, lr)
        stop = stopper.step(val_loss, model)
        optimizer.lr = scheduler.step(val_loss)
        if stop:
            stopped = True
            break
    stopper.restore(model)
    best = history[stopper.best_epoch - 1]
    return FoldResult(fold, model, best["val_auc"], best["val_loss"], history,
                      stopper.best_epoch, stopped)


def select_best(results) -> FoldResult:
    """Highest validation mAUC; ties go to lower validation loss, then lower fold index."""
    results = list(results)
    if not results:
        raise ContractError("select_best needs at least one fold result")
    return min(results, key=lambda r: (-r.val_auc, r.val_loss, r.fold))


def cross_validate(checkpoint: Optional[Checkpoint], dataset: ImageDataset, config: FinetuneConfig,
                   model_config: Optional[ViTConfig] = None, spec: Optional[AugmentSpec] = None,
                   max_folds: Optional[int] = None) -> tuple[FoldPlan, list]:
    """Run :func:`finetune_fold` on the first ``max_folds`` folds of a stratified plan."""
    if dataset.labels is None:
        raise ConfigError("cross-validation needs a labeled dataset")
    plan = stratified_kfold(dataset.labels, config.folds, derive_seed(config.seed, 99))
    results = []
    for f, (tr, va) in enumerate(plan.folds[:max_folds]):
        if np.intersect1d(tr, va).size:
            raise ContractError(f"fold {f}: train and validation indices overlap")
        results.append(finetune_fold(checkpoint, dataset.subset(tr, "train"), dataset.subset(va, "val"),
                                     config, model_config, spec, fold=f))
    return plan, results
