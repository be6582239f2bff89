"""Symmetric InfoNCE objective, Adam, and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, ContractViolation, NonFiniteError, ShapeError
from .model import FusionConfig, FusionParams, fuse_backward, fuse_forward_batch, init_params

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    temperature: float = 0.07
    batch_size: int = 128
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    clip_norm: float = 5.0
    save_every: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for in-batch negatives")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0 (0 disables clipping)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)


def info_nce_loss(Z_q, Z_t, tau: float):
    """Symmetric InfoNCE over a batch of matched unit rows.

    Row i of ``Z_t`` is the positive for row i of ``Z_q``; all other rows are
    negatives. Returns ``(loss, grad_Zq, grad_Zt)``.
    """
    Zq = np.asarray(Z_q, dtype=np.float64)
    Zt = np.asarray(Z_t, dtype=np.float64)
    if Zq.ndim != 2 or Zq.shape != Zt.shape:
        raise ShapeError(f"query {Zq.shape} and target {Zt.shape} batches must match")
    B = Zq.shape[0]
    if B < 2:
        raise ConfigError("InfoNCE needs at least 2 rows for in-batch negatives")
    if not tau > 0:
        raise ConfigError("temperature must be > 0")
    for name, Z in (("Z_q", Zq), ("Z_t", Zt)):
        dev = np.abs(np.linalg.norm(Z, axis=1) - 1.0)
        if dev.max() > UNIT_TOL:
            raise ContractViolation(f"{name} row {int(dev.argmax())} is not unit-norm (off by {dev.max():.2e})")

    S = (Zq @ Zt.T) / tau
    row_lse = _logsumexp(S, axis=1)
    col_lse = _logsumexp(S, axis=0)
    diag = np.diag(S)
    loss = 0.5 * (np.mean(row_lse - diag) + np.mean(col_lse - diag))

    P_row = np.exp(S - row_lse[:, None])
    P_col = np.exp(S - col_lse[None, :])
    eye = np.eye(B)
    dS = 0.5 * ((P_row - eye) + (P_col - eye)) / B
    dtype = nx.storage_dtype()
    grad_q = (dS @ Zt) / tau
    grad_t = (dS.T @ Zq) / tau
    return float(loss), grad_q.astype(dtype), grad_t.astype(dtype)


def _logsumexp(S: np.ndarray, axis: int) -> np.ndarray:
    m = S.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(S - m).sum(axis=axis, keepdims=True))).squeeze(axis)


class Adam:
    """Bias-corrected Adam over a dict of named tensors.

    Moments are kept in float64 regardless of parameter storage precision.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8, clip_norm=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.clip_norm = clip_norm
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    @classmethod
    def from_config(cls, config: TrainConfig) -> "Adam":
        return cls(config.learning_rate, config.beta1, config.beta2, config.epsilon, config.clip_norm)

    def step(self, params: FusionParams, grads: dict[str, np.ndarray]) -> float:
        """Update ``params`` in place; returns the pre-clip global gradient norm."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in tensor {name!r}; aborting")
            if g.shape != params[name].shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")

        total = math.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2)) for g in grads.values()))
        scale = 1.0
        if self.clip_norm > 0 and total > self.clip_norm:
            scale = self.clip_norm / total

        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.tensors.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if scale != 1.0:
                g = g * scale
            if name not in self.m:
                self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            update = self.lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.epsilon)
            params.tensors[name] = (p.astype(np.float64) - update).astype(p.dtype)
            if not np.all(np.isfinite(params.tensors[name])):
                raise NonFiniteError(f"parameter {name!r} became non-finite after step {self.t}")
        params.step += 1
        return total


def adam_step(params: FusionParams, grads, state: Adam, config: TrainConfig | None = None) -> tuple[FusionParams, Adam]:
    state.step(params, grads)
    return params, state


def batch_loss_and_grads(params: FusionParams, Z_T, Z_D, Z_star, tau: float):
    """One forward/backward pass through fusion and InfoNCE for a batch."""
    Zq, acts = fuse_forward_batch(params, Z_T, Z_D)
    loss, g_q, _ = info_nce_loss(Zq, Z_star, tau)
    grads, _, _ = fuse_backward(params, acts, Z_T, Z_D, g_q)
    return loss, grads


def flatten_dialogues(dialogues) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pool every (dialogue, round) pair into row arrays.

    Returns ``(Z_T, Z_D, target_ids, rounds)``; targets are looked up by the
    caller against the corpus.
    """
    zt, zd, tgt, rnd = [], [], [], []
    for dlg in dialogues:
        for n in range(dlg.n_rounds):
            zt.append(dlg.z_T[n])
            zd.append(dlg.z_D[n])
            tgt.append(dlg.target_id)
            rnd.append(n)
    return np.asarray(zt), np.asarray(zd), np.asarray(tgt), np.asarray(rnd)


def fit_arrays(Z_T, Z_D, Z_star, fusion_config: FusionConfig, train_config: TrainConfig,
               params: FusionParams | None = None, on_epoch=None):
    """Train on pre-pooled row arrays. Returns ``(params, loss_curve)``.

    ``on_epoch(epoch, mean_loss, params, wall_ms)`` is called after every epoch.
    """
    Z_T = nx.as_storage(Z_T)
    Z_D = nx.as_storage(Z_D)
    Z_star = nx.as_storage(Z_star)
    n, d = Z_T.shape if Z_T.ndim == 2 else (0, 0)
    if n == 0:
        raise ConfigError("training set is empty")
    if Z_D.shape != (n, d) or Z_star.shape != (n, d):
        raise ConfigError(f"inconsistent training shapes: {Z_T.shape}, {Z_D.shape}, {Z_star.shape}")
    if d != fusion_config.d:
        raise ConfigError(f"embedding dim {d} does not match FusionConfig.d={fusion_config.d}")
    if n < 2:
        raise ConfigError("need at least 2 training rows for in-batch negatives")

    if params is None:
        params = init_params(fusion_config, train_config.seed)
    opt = Adam.from_config(train_config)
    # shuffle stream is independent of the init stream
    rng = np.random.default_rng([train_config.seed, 1])
    bs = min(train_config.batch_size, n)

    curve = []
    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if idx.size < 2:
                continue
            loss, grads = batch_loss_and_grads(params, Z_T[idx], Z_D[idx], Z_star[idx], train_config.temperature)
            opt.step(params, grads)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        curve.append(mean_loss)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        logger.info(json.dumps({"epoch": epoch + 1, "mean_loss": mean_loss, "wall_ms": round(wall_ms, 3)}))
        if on_epoch is not None:
            on_epoch(epoch + 1, mean_loss, params, wall_ms)
    return params, curve


def train(dataset, corpus: np.ndarray, fusion_config: FusionConfig, train_config: TrainConfig,
          corpus_ids=None, on_epoch=None):
    """Train on a list of dialogues whose targets index into ``corpus``.

    ``corpus_ids`` maps target ids to rows; by default id == row.
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    corpus = np.asarray(corpus)
    if corpus.ndim != 2 or corpus.shape[1] != fusion_config.d:
        raise ConfigError(f"corpus shape {corpus.shape} inconsistent with d={fusion_config.d}")
    for dlg in dataset:
        if dlg.z_T.shape[1] != fusion_config.d or dlg.z_D.shape != dlg.z_T.shape:
            raise ConfigError(f"dialogue {dlg.dialogue_id} has inconsistent embedding dims")
    Z_T, Z_D, targets, _ = flatten_dialogues(dataset)
    if corpus_ids is None:
        rows = targets
    else:
        lookup = {cid: i for i, cid in enumerate(corpus_ids)}
        rows = np.asarray([lookup[t] for t in targets])
    return fit_arrays(Z_T, Z_D, corpus[rows], fusion_config, train_config, on_epoch=on_epoch)
