"""Dual-stream self-supervised pretraining.

An online network (backbone, projector, predictor) learns to predict the
target network's projection of a second augmented view.  The target
(backbone, projector) is never trained by gradients; it follows the online
weights through an exponential moving average.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .augment import AugmentSpec, dual_view_batch, pretrain_spec
from .data import ImageDataset
from .errors import ConfigError, ContractError, ShapeError
from .nn import BatchNorm1d, Linear, Module, ReLU, Sequential, copy_module_state
from .optim import Adam
from .rng import CounterRNG, derive_seed
from .tensor import Tensor
from .vit import ViTConfig, ViTModel

log = logging.getLogger(__name__)


class ProjectionHead(Module):
    """Linear -> BatchNorm -> ReLU -> Linear."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: CounterRNG):
        self.net = Sequential(Linear(in_dim, hidden, rng.split(0)), BatchNorm1d(hidden), ReLU(),
                              Linear(hidden, out_dim, rng.split(1)))
        self.out_dim = out_dim

    def forward(self, x):
        return self.net(x)


class PredictionHead(ProjectionHead):
    """Same layout as the projector, mapping proj_dim back to proj_dim."""


@dataclass
class SSPConfig:
    batch_size: int = 128
    learning_rate: float = 1e-4
    momentum: float = 0.999
    epochs: int = 50
    accumulation_steps: int = 4
    proj_hidden: int = 256
    proj_dim: int = 128
    pred_hidden: int = 64
    symmetric: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"momentum must be in (0, 1), got {self.momentum}")
        if self.accumulation_steps < 1:
            raise ConfigError("accumulation_steps must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm in the heads)")
        if self.epochs < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs must be >= 1 and learning_rate > 0")


class DualStreamState:
    """Online and target networks plus the gradient-accumulation bookkeeping."""

    def __init__(self, model_config: ViTConfig, config: SSPConfig):
        self.model_config = model_config
        self.config = config
        self.momentum = config.momentum
        rng = CounterRNG(config.seed)
        seed = derive_seed(config.seed, 0)
        self.online_backbone = ViTModel(model_config, seed)
        self.online_projector = ProjectionHead(model_config.embed_dim, config.proj_hidden,
                                               config.proj_dim, rng.split(1))
        self.predictor: Module = PredictionHead(config.proj_dim, config.pred_hidden,
                                                config.proj_dim, rng.split(2))
        self.target_backbone = ViTModel(model_config, seed)
        self.target_projector = ProjectionHead(model_config.embed_dim, config.proj_hidden,
                                               config.proj_dim, rng.split(1))
        self.sync_target()
        self.pending = 0
        self.step_count = 0

    # parameter groups ------------------------------------------------------
    def online_modules(self):
        return [self.online_backbone, self.online_projector, self.predictor]

    def online_parameters(self):
        return [p for m in self.online_modules() for p in m.parameters()]

    def target_parameters(self):
        return self.target_backbone.parameters() + self.target_projector.parameters()

    def paired_parameters(self):
        online = self.online_backbone.parameters() + self.online_projector.parameters()
        return list(zip(self.target_parameters(), online))

    def sync_target(self) -> None:
        """Copy online backbone/projector into the target and freeze it."""
        copy_module_state(self.online_backbone, self.target_backbone)
        copy_module_state(self.online_projector, self.target_projector)
        self.target_backbone.requires_grad_(False)
        self.target_projector.requires_grad_(False)

    def train(self, mode: bool = True):
        for m in self.online_modules() + [self.target_backbone, self.target_projector]:
            m.train(mode)

    # forward passes ----------------------------------------------------------
    def online_forward(self, views) -> tuple[Tensor, Tensor]:
        z = self.online_projector(self.online_backbone(views))
        return z, self.predictor(z)

    def target_forward(self, views) -> Tensor:
        with T.no_grad():
            return self.target_projector(self.target_backbone(views))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cosine_similarity(p, z, eps: float = 1e-12) -> Tensor:
    """Row-wise cosine similarity of ``[..., d]`` inputs."""
    p, z = T.as_tensor(p), T.as_tensor(z)
    if p.shape != z.shape:
        raise ShapeError(f"cosine similarity needs equal shapes, got {p.shape} and {z.shape}")
    cos = (T.l2_normalize(p, eps) * T.l2_normalize(z, eps)).sum(axis=-1)
    return T.clip_value(cos, -1.0, 1.0)


def pair_loss(p, z) -> Tensor:
    """``-cos(p, z)``; zero-norm inputs give 0 rather than NaN."""
    z = T.as_tensor(z).detach()
    return -cosine_similarity(p, z)


def batch_loss(P, Z) -> Tensor:
    """Mean pair loss over the rows of ``[N, d]`` predictions and targets."""
    P, Z = T.as_tensor(P), T.as_tensor(Z).detach()
    if P.ndim != 2 or P.shape != Z.shape:
        raise ShapeError(f"batch_loss needs equal [N, d] inputs, got {P.shape} and {Z.shape}")
    if P.shape[0] == 0:
        raise ContractError("batch_loss needs at least one row")
    return -cosine_similarity(P, Z).mean()


def accumulate_loss(batch_losses, S: int):
    """Mean of the ``S`` micro-batch losses."""
    if len(batch_losses) != S:
        raise ContractError(f"expected {S} batch losses, got {len(batch_losses)}")
    total = batch_losses[0]
    for loss in batch_losses[1:]:
        total = total + loss
    return total * (1.0 / S)


def ema_update(state: DualStreamState) -> None:
    """``target <- m * target + (1 - m) * online`` for every paired parameter."""
    m = state.momentum
    pairs = state.paired_parameters()
    if len(pairs) != len(state.target_parameters()):
        raise ContractError("online and target streams have different parameter counts")
    for tgt, onl in pairs:
        if tgt.shape != onl.shape:
            raise ContractError(f"EMA shape divergence: target {tgt.shape} vs online {onl.shape}")
        tgt.data *= m
        tgt.data += (1.0 - m) * onl.data


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def pretrain_step(state: DualStreamState, images: np.ndarray, spec: AugmentSpec,
                  optimizer: Adam, seed: int, record: Optional[Callable] = None) -> float:
    """One micro-batch: forward both streams, backprop ``loss / S``.

    After every ``S``-th call the optimizer is stepped and the target follows
    via :func:`ema_update`.  ``record(P, Z)`` receives the raw prediction and
    target arrays when given.  Returns the micro-batch loss value.
    """
    S = state.config.accumulation_steps
    seeds = [derive_seed(seed, i) for i in range(len(images))]
    v1, v2 = dual_view_batch(images, spec, seeds)
    _, P = state.online_forward(v1)
    Z = state.target_forward(v2)
    loss = batch_loss(P, Z)
    if record is not None:
        record(P.data.copy(), Z.data.copy())
    if state.config.symmetric:
        _, P2 = state.online_forward(v2)
        Z2 = state.target_forward(v1)
        loss = (loss + batch_loss(P2, Z2)) * 0.5
    (loss * (1.0 / S)).backward()
    state.pending += 1
    if state.pending == S:
        apply_update(state, optimizer)
    return loss.item()


def apply_update(state: DualStreamState, optimizer: Adam) -> None:
    optimizer.step()
    optimizer.zero_grad()
    ema_update(state)
    state.pending = 0
    state.step_count += 1


@dataclass
class PretrainResult:
    state: DualStreamState
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)

    def to_checkpoint(self):
        from .checkpoint import Checkpoint

        s = self.state
        tensors = {}
        tensors.update(("backbone." + k, v) for k, v in s.online_backbone.state_dict().items())
        tensors.update(("projector." + k, v) for k, v in s.online_projector.state_dict().items())
        tensors.update(("predictor." + k, v) for k, v in s.predictor.state_dict().items())
        tensors.update(("target_backbone." + k, v) for k, v in s.target_backbone.state_dict().items())
        tensors.update(("target_projector." + k, v) for k, v in s.target_projector.state_dict().items())
        meta = {"epoch_losses": self.epoch_losses, "ssp_config": vars(s.config).copy()}
        return Checkpoint(stage="pretrain", model_config=s.model_config, tensors=tensors,
                          rng_state=self.rng_state, meta=meta)


def pretrain(dataset: ImageDataset, config: SSPConfig, model_config: Optional[ViTConfig] = None,
             spec: Optional[AugmentSpec] = None, record: Optional[Callable] = None,
             state: Optional[DualStreamState] = None) -> PretrainResult:
    """Run ``config.epochs`` epochs of dual-stream pretraining on the images of ``dataset``.

    Labels are ignored.  The last partial batch of every epoch is dropped.
    ``record(epoch, P, Z)`` is called for every micro-batch if given.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot pretrain on an empty dataset")
    model_config = model_config or ViTConfig()
    if dataset.image_shape != (model_config.in_channels, model_config.image_size, model_config.image_size):
        raise ShapeError(f"dataset images {dataset.image_shape} do not match the model config")
    spec = spec if spec is not None else pretrain_spec()
    state = state or DualStreamState(model_config, config)
    state.train()
    optimizer = Adam(state.online_parameters(), lr=config.learning_rate)
    rng = CounterRNG(derive_seed(config.seed, 7))
    n_batches = len(dataset) // config.batch_size
    if n_batches == 0:
        raise ConfigError(f"dataset of {len(dataset)} images is smaller than one batch ({config.batch_size})")
    result = PretrainResult(state)
    for epoch in range(config.epochs):
        order = rng.split(epoch).permutation(len(dataset))
        losses = []
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            rec = None if record is None else (lambda P, Z, e=epoch: record(e, P, Z))
            loss = pretrain_step(state, dataset.images[idx], spec, optimizer,
                                 derive_seed(config.seed, 1, epoch, b), record=rec)
            losses.append(loss)
            result.step_losses.append(loss)
        mean_loss = float(np.mean(losses))
        result.epoch_losses.append(mean_loss)
        log.info("pretrain epoch %d/%d mean loss %.6f", epoch + 1, config.epochs, mean_loss)
    if state.pending:
        # leftover micro-batches: rescale so the update uses their mean
        for p in optimizer.params:
            if p.grad is not None:
                p.grad *= config.accumulation_steps / state.pending
        apply_update(state, optimizer)
    result.rng_state = rng.get_state()
    return result
