"""Losses, hand-written gradients, Adam optimization, and inference.

Training is full-batch over the (small) labeled set: only the labeled
rows of the basis and context caches are ever materialized, so peak
training memory is independent of graph size.  Inference batches over
all nodes with results independent of the batch split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chebyshev import ChebBasisCache
from .context import ContextCache
from .errors import ConfigError
from .graph import GraphDataset, SplitSet
from .metrics import average_precision
from .model import (
    ModelConfig,
    ModelState,
    RowBundle,
    backward_bundle,
    dropout_rng,
    forward_bundle,
    gather_rows,
    init_model,
    iter_params,
)


@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 0.0
    max_epochs: int = 1000
    patience: int = 50
    batch_size: int = 8192
    clamp_eps: float = 1e-7
    seed: int = 0
    beta_override: float | None = None

    def validate(self) -> None:
        if not 0.0 < self.clamp_eps < 0.5:
            raise ConfigError(f"clamp_eps must lie in (0, 0.5), got {self.clamp_eps}")
        if self.patience > self.max_epochs:
            raise ConfigError("patience must not exceed max_epochs")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


@dataclass
class OptimizerState:
    """Adam moment accumulators, one pair per parameter array."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(state: ModelState) -> OptimizerState:
    m = {name: np.zeros_like(arr) for name, arr in iter_params(state)}
    v = {name: np.zeros_like(arr) for name, arr in iter_params(state)}
    return OptimizerState(m=m, v=v)


def adam_step(
    state: ModelState,
    grads: dict[str, np.ndarray],
    opt: OptimizerState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """One bias-corrected Adam update, in place."""
    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for name, param in iter_params(state):
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param)
        if g.shape != param.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, want {param.shape}")
        if weight_decay:
            g = g + weight_decay * param
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def compute_beta(split: SplitSet, labels: np.ndarray) -> float:
    """Ratio of anomalies to normals over the labeled train+val nodes."""
    ids = np.concatenate([np.asarray(split.train), np.asarray(split.val)]).astype(np.int64)
    y = labels[ids]
    n_anom = int(np.sum(y == 1))
    n_norm = int(np.sum(y == 0))
    if n_anom == 0 or n_norm == 0:
        raise ValueError(
            f"labeled set must contain both classes (anomalies={n_anom}, normals={n_norm})"
        )
    return n_anom / n_norm


def _clamp(p: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    clamped = np.clip(p, eps, 1.0 - eps)
    passthrough = ((p >= eps) & (p <= 1.0 - eps)).astype(np.float64)
    return clamped, passthrough


def bce_loss(yhat: np.ndarray, labels: np.ndarray, beta: float, eps: float = 1e-7) -> float:
    loss, _ = bce_loss_grad(yhat, labels, beta, eps)
    return loss


def bce_loss_grad(
    yhat: np.ndarray, labels: np.ndarray, beta: float, eps: float = 1e-7
) -> tuple[float, np.ndarray]:
    """Class-weighted binary cross entropy and its gradient w.r.t. yhat.

    Probabilities are clamped to [eps, 1-eps] before the logs; the clamp
    contributes zero gradient outside the pass-through region.
    """
    y = np.asarray(labels, dtype=np.float64)
    p, inside = _clamp(np.asarray(yhat, dtype=np.float64), eps)
    n = len(y)
    loss = -np.sum(beta * y * np.log(p) + (1.0 - y) * np.log(1.0 - p)) / n
    d_p = -(beta * y / p - (1.0 - y) / (1.0 - p)) / n
    return float(loss), d_p * inside


def fpg_loss(
    cbar: np.ndarray,
    labels: np.ndarray,
    beta: float,
    p_a: float,
    p_n: float,
    eps: float = 1e-7,
) -> float:
    loss, _ = fpg_loss_grad(cbar, labels, beta, p_a, p_n, eps)
    return loss


def fpg_loss_grad(
    cbar: np.ndarray,
    labels: np.ndarray,
    beta: float,
    p_a: float,
    p_n: float,
    eps: float = 1e-7,
) -> tuple[float, np.ndarray]:
    """Frequency-preference regularizer: a BCE pulling mean fusion gates
    toward p_a for anomalies (weighted by beta) and p_n for normals."""
    y = np.asarray(labels, dtype=np.float64)
    c, inside = _clamp(np.asarray(cbar, dtype=np.float64), eps)
    n = len(y)
    target = np.where(y == 1, p_a, p_n)
    weight = np.where(y == 1, beta, 1.0)
    loss = -np.sum(weight * (target * np.log(c) + (1.0 - target) * np.log(1.0 - c))) / n
    d_c = -(weight * (target / c - (1.0 - target) / (1.0 - c))) / n
    return float(loss), d_c * inside


def total_loss(
    yhat: np.ndarray,
    cbar: np.ndarray | None,
    labels: np.ndarray,
    beta: float,
    config: ModelConfig,
    eps: float = 1e-7,
) -> float:
    loss = bce_loss(yhat, labels, beta, eps)
    if config.use_fpg:
        if cbar is None:
            raise ValueError("use_fpg requires fusion coefficients in the forward pass")
        loss += fpg_loss(cbar, labels, beta, config.p_a, config.p_n, eps)
    return loss


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    data_loss: float
    objective: float  # data loss plus the L2 (weight decay) term
    grads: dict[str, np.ndarray]


def loss_and_grads_bundle(
    state: ModelState,
    bundle: RowBundle,
    labels: np.ndarray,
    beta: float,
    train_config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """Objective value and exact gradients on a pre-gathered row bundle.

    The objective is total_loss plus 0.5 * weight_decay * ||params||^2, so
    gradients (including the decay term) match finite differences of the
    returned objective.
    """
    cfg = state.config
    eps = train_config.clamp_eps
    trace = forward_bundle(state, bundle, train_mode=True, rng=rng)
    loss, d_yhat = bce_loss_grad(trace.yhat, labels, beta, eps)
    d_cbar = None
    if cfg.use_fpg:
        fpg, d_cbar = fpg_loss_grad(trace.cbar, labels, beta, cfg.p_a, cfg.p_n, eps)
        loss += fpg
    grads = backward_bundle(state, trace, d_yhat, d_cbar)
    objective = loss
    if train_config.weight_decay:
        wd = train_config.weight_decay
        for name, param in iter_params(state):
            g = grads.get(name)
            grads[name] = wd * param if g is None else g + wd * param
            objective += 0.5 * wd * float(np.sum(param * param))
    return LossBreakdown(data_loss=loss, objective=objective, grads=grads)


def evaluate_objective(
    state: ModelState,
    bundle: RowBundle,
    labels: np.ndarray,
    beta: float,
    train_config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> float:
    """Scalar objective only (used by finite-difference checks)."""
    cfg = state.config
    eps = train_config.clamp_eps
    trace = forward_bundle(state, bundle, train_mode=True, rng=rng)
    loss = bce_loss(trace.yhat, labels, beta, eps)
    if cfg.use_fpg:
        loss += fpg_loss(trace.cbar, labels, beta, cfg.p_a, cfg.p_n, eps)
    if train_config.weight_decay:
        for _, param in iter_params(state):
            loss += 0.5 * train_config.weight_decay * float(np.sum(param * param))
    return loss


def backward_gradients(
    state: ModelState,
    cheb_cache: ChebBasisCache,
    context_cache: ContextCache | None,
    batch_ids: np.ndarray,
    labels: np.ndarray,
    beta: float,
    train_config: TrainConfig,
    epoch: int = 0,
) -> LossBreakdown:
    """Gradients of the training objective for one labeled batch."""
    bundle = gather_rows(cheb_cache, context_cache, np.asarray(batch_ids), state.config)
    rng = dropout_rng(state.config.seed, epoch) if _dropout_active(state) else None
    return loss_and_grads_bundle(state, bundle, labels[np.asarray(batch_ids)], beta, train_config, rng)


def _dropout_active(state: ModelState) -> bool:
    return state.config.dropout > 0.0


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auprc: float


def train(
    dataset: GraphDataset,
    cheb_cache: ChebBasisCache,
    context_cache: ContextCache | None,
    model_config: ModelConfig,
    train_config: TrainConfig,
    split: SplitSet,
) -> tuple[ModelState, list[EpochRecord]]:
    """Full-batch training on the labeled train set with early stopping.

    Keeps the checkpoint with the best validation AUPRC; stops once
    `patience` epochs pass without improvement.  Only labeled cache rows
    are gathered, so memory does not scale with graph size.
    """
    model_config.validate()
    train_config.validate()
    train_ids = np.asarray(split.train, dtype=np.int64)
    val_ids = np.asarray(split.val, dtype=np.int64)
    if train_ids.size == 0 or val_ids.size == 0:
        raise ValueError("train and val splits must be non-empty")

    labels = dataset.labels
    beta = (
        train_config.beta_override
        if train_config.beta_override is not None
        else compute_beta(split, labels)
    )
    y_train = labels[train_ids].astype(np.float64)
    y_val = labels[val_ids].astype(np.float64)

    state = init_model(model_config, cheb_cache.dim)
    opt = init_optimizer(state)
    train_bundle = gather_rows(cheb_cache, context_cache, train_ids, model_config)
    val_bundle = gather_rows(cheb_cache, context_cache, val_ids, model_config)

    history: list[EpochRecord] = []
    best_auprc = -np.inf
    best_params: dict[str, np.ndarray] = {}
    epochs_since_improve = 0

    for epoch in range(train_config.max_epochs):
        rng = dropout_rng(model_config.seed, epoch) if _dropout_active(state) else None
        breakdown = loss_and_grads_bundle(state, train_bundle, y_train, beta, train_config, rng)
        adam_step(state, breakdown.grads, opt, train_config.lr)

        val_out = forward_bundle(state, val_bundle, train_mode=False)
        val_auprc = average_precision(val_out.yhat, y_val)
        history.append(EpochRecord(epoch=epoch, train_loss=breakdown.data_loss, val_auprc=val_auprc))

        if val_auprc > best_auprc:
            best_auprc = val_auprc
            best_params = {name: arr.copy() for name, arr in iter_params(state)}
            epochs_since_improve = 0
        else:
            epochs_since_improve += 1
        if epochs_since_improve >= train_config.patience:
            break

    if best_params:
        for name, arr in iter_params(state):
            arr[...] = best_params[name]
    return state, history


def score_all(
    state: ModelState,
    cheb_cache: ChebBasisCache,
    context_cache: ContextCache | None,
    batch_size: int = 8192,
) -> np.ndarray:
    """Eval-mode anomaly probability for every node, batched over id ranges.

    The output is independent of batch_size: every row is processed by
    row-local arithmetic only.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = cheb_cache.num_nodes
    scores = np.empty(n, dtype=np.float64)
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        bundle = gather_rows(cheb_cache, context_cache, slice(lo, hi), state.config)
        out = forward_bundle(state, bundle, train_mode=False)
        scores[lo:hi] = out.yhat
    return scores
