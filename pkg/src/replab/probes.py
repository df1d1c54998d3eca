"""Representation quality probes: state prediction, cross-representation
prediction, and linear subspace alignment with the true latent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import env
from .data import DatasetHandle
from .netcore import (Adam, AdamConfig, Network, NetworkSpec, backward,
                      forward, forward_cache, mse_grad, mse_loss)
from .pretrain import Encoder

Array = np.ndarray


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 2000
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    widths: tuple[int, ...] = (256, 256)
    activation: str = "gelu"


@dataclass
class ProbeResult:
    target: str
    train_loss: float
    val_loss: float
    normalizer: float = float("nan")
    r_squared: float = float("nan")

    def normalized_val(self) -> float:
        return self.val_loss / self.normalizer


def _fit_mlp(x_train, y_train, x_val, y_val, cfg: ProbeConfig,
             rng: np.random.Generator):
    net = Network(NetworkSpec(
        layer_widths=(x_train.shape[1], *cfg.widths, y_train.shape[1]),
        activation=cfg.activation, dropout_rate=0.0), rng)
    params = net.params()
    opt = Adam(params, AdamConfig(learning_rate=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay,
                                  total_steps=cfg.steps))
    n = x_train.shape[0]
    last_train = float("nan")
    for _ in range(cfg.steps):
        idx = rng.integers(0, n, size=min(cfg.batch_size, max(2, n)))
        pred, cache = forward_cache(net, x_train[idx])
        last_train = mse_loss(pred, y_train[idx])
        _, grads = backward(net, cache, mse_grad(pred, y_train[idx]))
        opt.step(params, grads)
    pred_val = forward(net, x_val)
    val = mse_loss(pred_val, y_val)
    resid = pred_val - y_val
    tss = float(np.sum((y_val - y_val.mean(axis=0)) ** 2))
    r2 = 1.0 - float(np.sum(resid * resid)) / tss if tss > 0 else float("nan")
    return net, float(last_train), float(val), r2


def probe_state(encoder: Encoder, ds_pre: DatasetHandle, cfg: ProbeConfig,
                rng: np.random.Generator) -> ProbeResult:
    """Train a fresh MLP from frozen embeddings to the ground-truth latents
    on the pretraining split; val MSE measures what the representation
    retained about the simulator state."""
    obs_tr, lat_tr = ds_pre.privileged_states("train")
    obs_va, lat_va = ds_pre.privileged_states("val")
    if obs_va.shape[0] == 0:
        obs_va, lat_va = obs_tr, lat_tr
    x_tr = encoder.encode(obs_tr)
    x_va = encoder.encode(obs_va)
    _, train, val, r2 = _fit_mlp(x_tr, lat_tr, x_va, lat_va, cfg, rng)
    return ProbeResult(target="state", train_loss=train, val_loss=val,
                       r_squared=r2)


def probe_cross(src_encoder: Encoder, tgt_encoder: Encoder,
                ds_pre: DatasetHandle, cfg: ProbeConfig,
                rng: np.random.Generator) -> ProbeResult:
    """Predict one frozen representation from another with a small MLP."""
    obs_tr, _ = ds_pre.privileged_states("train")
    obs_va, _ = ds_pre.privileged_states("val")
    if obs_va.shape[0] == 0:
        obs_va = obs_tr
    x_tr = src_encoder.encode(obs_tr)
    x_va = src_encoder.encode(obs_va)
    y_tr = tgt_encoder.encode(obs_tr)
    y_va = tgt_encoder.encode(obs_va)
    _, train, val, r2 = _fit_mlp(x_tr, y_tr, x_va, y_va, cfg, rng)
    tag = f"representation({tgt_encoder.objective_tag})"
    return ProbeResult(target=tag, train_loss=train, val_loss=val,
                       r_squared=r2)


def cross_grid(encoders: dict[str, Encoder], ds_pre: DatasetHandle,
               cfg: ProbeConfig, rng: np.random.Generator):
    """Full source-by-target val-MSE matrix, normalized by the grid mean.

    Returns (tags, raw matrix, normalized matrix).
    """
    tags = list(encoders)
    n = len(tags)
    raw = np.zeros((n, n))
    for i, src in enumerate(tags):
        for j, tgt in enumerate(tags):
            sub = np.random.default_rng(rng.integers(0, 2 ** 63 - 1))
            raw[i, j] = probe_cross(encoders[src], encoders[tgt], ds_pre,
                                    cfg, sub).val_loss
    mean = raw.mean()
    normalized = raw / mean if mean > 0 else raw.copy()
    return tags, raw, normalized


@dataclass(frozen=True)
class AlignmentResult:
    value: float
    degenerate: bool

    def __float__(self):
        return self.value


def reference_latents(mdp: env.LatentMdp, n_samples: int,
                      rng: np.random.Generator) -> Array:
    """On-distribution latents: uniform in the ball of radius 0.6 * arena."""
    radius = 0.6 * mdp.arena_radius
    v = rng.normal(size=(n_samples, mdp.latent_dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    u = rng.random((n_samples, 1)) ** (1.0 / mdp.latent_dim)
    return radius * u * v


def subspace_alignment(encoder: Encoder, mdp: env.LatentMdp, n_samples: int,
                       rng: np.random.Generator) -> AlignmentResult:
    """R-squared of the best affine map from embeddings to true latents.

    This is the operational reading of recovery "up to linear
    transformation": it depends only on the linear span of the embedding,
    so it is invariant under invertible affine maps of the encoder output.
    """
    if n_samples < 10 * mdp.latent_dim:
        raise ValueError("need at least 10 * latent_dim samples")
    latents = reference_latents(mdp, n_samples, rng)
    obs = mdp.lift.decode(latents)
    emb = encoder.encode(obs)
    centered = emb - emb.mean(axis=0)
    rank = np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, float(np.abs(centered).max())))
    degenerate = rank < min(centered.shape[1], n_samples - 1, mdp.latent_dim)
    design = np.concatenate([emb, np.ones((n_samples, 1))], axis=1)
    coef, _, _, _ = np.linalg.lstsq(design, latents, rcond=None)
    resid = design @ coef - latents
    rss = float(np.sum(resid * resid))
    tss = float(np.sum((latents - latents.mean(axis=0)) ** 2))
    value = 1.0 - rss / tss if tss > 0 else 0.0
    return AlignmentResult(value=float(np.clip(value, 0.0, 1.0)),
                           degenerate=bool(degenerate))
