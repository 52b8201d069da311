"""Optimization recipe: MSE loss, SGD with momentum and weight decay,
elementwise gradient clipping bounded by A / learning-rate, and a staircase
learning-rate schedule."""

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .tensor import ShapeError


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_initial: float = 0.1
    lr_decay: float = 0.1
    lr_step_epochs: int = 10
    clip_A: float = 0.01
    epochs: int = 1
    seed: int = 0
    # stop early if mean epoch loss improves < plateau_rel for plateau_epochs
    # consecutive epochs; 0 disables
    plateau_rel: float = 0.0
    plateau_epochs: int = 3

    def validate(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.lr_initial <= 0:
            raise ValueError("lr_initial must be positive")
        if self.clip_A <= 0:
            raise ValueError("clip_A must be positive")


@dataclass
class OptimizerState:
    velocity: dict  # name -> array, zeros at start, keyed like the registry


def init_state(registry) -> OptimizerState:
    return OptimizerState(velocity={k: np.zeros_like(v) for k, v in registry.items()})


def mse_loss(pred, target):
    """loss = (1/2N) sum_i ||target_i - pred_i||^2 over the batch; returns
    (loss, d loss / d pred)."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    n = pred.shape[0]
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.sum(diff * diff) / (2 * n))
    grad = (diff / n).astype(pred.dtype)
    return loss, grad


def clip_gradients(grads: dict, lr_current: float, clip_A: float) -> dict:
    """Clamp every gradient element to [-A/alpha, A/alpha], alpha = current lr."""
    if lr_current <= 0:
        raise ValueError("lr_current must be positive")
    bound = clip_A / lr_current
    return {k: np.clip(g, -bound, bound) for k, g in grads.items()}


def _decayed(name):
    # weight decay applies to conv/transposed-conv weights only
    return name.endswith(".weight")


def sgd_step(registry: dict, grads: dict, state: OptimizerState, lr: float, cfg: TrainConfig):
    """v <- momentum*v + (g + decay*theta); theta <- theta - lr*v.  Parameters
    update in place so the model's layer views stay current."""
    if set(registry) != set(grads) or set(registry) != set(state.velocity):
        raise KeyError("registry, grads, and optimizer state must share keys")
    for name, theta in registry.items():
        g = grads[name]
        if cfg.weight_decay and _decayed(name):
            g = g + (cfg.weight_decay * theta).astype(g.dtype)
        v = state.velocity[name]
        v *= cfg.momentum
        v += g
        theta -= (lr * v).astype(theta.dtype)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr_initial * cfg.lr_decay ** (epoch // cfg.lr_step_epochs)


def train_loop(model, pairs, cfg: TrainConfig, sink=None, epoch_sink=None):
    """Run epochs x batches of forward / loss / backward / clip / step over a
    list of patch pairs.  Returns (model, history) where history is a list of
    (iteration, epoch, lr, loss) rows, one per step.  Deterministic for a
    fixed seed."""
    cfg.validate()
    if not pairs:
        raise TrainError("empty patch archive")
    rng = np.random.default_rng(cfg.seed)
    history = []
    iteration = 0
    epoch_means = []
    state = init_state(model.registry)
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch):
            batch_idx = order[start : start + cfg.batch]
            lr_batch = np.concatenate([pairs[i].lr for i in batch_idx], axis=0)
            hr_batch = np.concatenate([pairs[i].hr for i in batch_idx], axis=0)
            pred, tape = model_mod.forward(model, lr_batch)
            loss, grad_pred = mse_loss(pred, hr_batch)
            if not np.isfinite(loss):
                raise TrainError(
                    f"non-finite loss {loss} at iteration {iteration} (epoch {epoch})"
                )
            grads = model_mod.backward(model, tape, grad_pred)
            grads = clip_gradients(grads, lr, cfg.clip_A)
            sgd_step(model.registry, grads, state, lr, cfg)
            row = (iteration, epoch, lr, loss)
            history.append(row)
            epoch_losses.append(loss)
            if sink is not None:
                sink(*row)
            iteration += 1
        epoch_means.append(float(np.mean(epoch_losses)))
        if epoch_sink is not None:
            epoch_sink(epoch)
        if cfg.plateau_rel > 0 and len(epoch_means) > cfg.plateau_epochs:
            best_before = min(epoch_means[: -cfg.plateau_epochs])
            recent = min(epoch_means[-cfg.plateau_epochs :])
            if recent > best_before * (1.0 - cfg.plateau_rel):
                break
    return model, history


def format_log(history):
    """One 'iteration,epoch,lr,loss' line per step; floats via repr so two
    identical runs serialize bit-identically."""
    lines = ["iteration,epoch,lr,loss"]
    for it, epoch, lr, loss in history:
        lines.append(f"{it},{epoch},{lr!r},{loss!r}")
    return "\n".join(lines) + "\n"
