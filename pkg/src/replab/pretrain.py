"""The five pretraining objectives, each yielding a frozen encoder.

All objectives share one encoder architecture (MLP with a layer-norm +
tanh embedding tail) and one optimizer recipe, differing only in the
self-supervision target:

    ID    predict a from (o, o')        -- inverse dynamics
    BC    predict a from o              -- behavior cloning
    FD-e  reconstruct o' from (o, a)    -- explicit forward dynamics
    FD-i  contrast (o, a) against o'    -- implicit forward dynamics
    Cont  contrast two augmented views of o

plus the untrained Scratch baseline and the ground-truth States oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import netcore
from .data import DatasetHandle, TransitionBatch
from .env import LatentMdp, true_encode
from .netcore import (Adam, AdamConfig, Network, NetworkSpec, backward,
                      forward, forward_cache, infonce_grads, mse_grad,
                      mse_loss)

Array = np.ndarray

ID = "ID"
BC = "BC"
FD_E = "FD-e"
FD_I = "FD-i"
CONT = "Cont"
SCRATCH = "Scratch"
STATES = "States"

PRETRAINED_OBJECTIVES = (ID, BC, FD_E, FD_I, CONT)


@dataclass(frozen=True)
class AugSpec:
    """Structure-free vector corruptions standing in for image crops."""

    noise_std: float = 0.1
    mask_fraction: float = 0.2

    def __post_init__(self):
        if self.noise_std < 0 or not 0 <= self.mask_fraction < 1:
            raise ValueError("invalid augmentation spec")

    @property
    def is_identity(self) -> bool:
        return self.noise_std == 0.0 and self.mask_fraction == 0.0


def augment(obs: Array, aug: AugSpec, rng: np.random.Generator) -> Array:
    out = obs
    if aug.noise_std > 0:
        out = out + rng.normal(0.0, aug.noise_std, size=obs.shape)
    if aug.mask_fraction > 0:
        keep = rng.random(obs.shape) >= aug.mask_fraction
        out = np.where(keep, out, 0.0)
    return out if out is not obs else obs.copy()


@dataclass(frozen=True)
class PretrainConfig:
    objective: str
    steps: int = 20_000
    batch_size: int = 256
    kappa: int = 1
    augmentation: AugSpec = field(default_factory=AugSpec)
    seed: int = 0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    embedding_dim: int = 64
    encoder_widths: tuple[int, ...] = (256, 256)
    head_widths: tuple[int, ...] = (256, 256)
    encoder_activation: str = "tanh"
    head_activation: str = "gelu"
    head_dropout: float = 0.1
    encoder_normalize: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.kappa < 1:
            raise ValueError("steps and kappa must be >= 1")


def default_config(objective: str, **overrides) -> PretrainConfig:
    """Objective defaults; FD-e halves the batch to even out compute."""
    kwargs = {"objective": objective}
    if objective == FD_E:
        kwargs["batch_size"] = 128
    kwargs.update(overrides)
    return PretrainConfig(**kwargs)


@dataclass
class Encoder:
    """A frozen observation embedding plus its training log.

    Only forward evaluation is exposed; downstream code never receives the
    parameters except through the deliberate joint-training path used by
    the Scratch baseline.
    """

    net: Network | None
    objective_tag: str
    train_log: list[float]
    mdp: LatentMdp | None = None     # States oracle only

    def encode(self, obs: Array) -> Array:
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if self.objective_tag == STATES:
            return true_encode(self.mdp, obs)
        return forward(self.net, obs, train=False)

    @property
    def embedding_dim(self) -> int:
        if self.objective_tag == STATES:
            return self.mdp.latent_dim
        return self.net.spec.output_dim

    def parameter_fingerprint(self) -> bytes:
        if self.net is None:
            return b"states-oracle"
        return b"".join(p.tobytes() for p in self.net.params())

    def save(self, path) -> None:
        if self.net is None:
            raise ValueError("the States oracle is not serializable")
        netcore.save_network(path, self.net, tag=self.objective_tag,
                             train_step=len(self.train_log))


def load_encoder(path) -> Encoder:
    net, tag, _ = netcore.load_network(path)
    return Encoder(net=net, objective_tag=tag, train_log=[])


# ---------------------------------------------------------------------------
# shared training scaffolding

def make_encoder_net(cfg: PretrainConfig, obs_dim: int,
                     rng: np.random.Generator) -> Network:
    spec = NetworkSpec(
        layer_widths=(obs_dim, *cfg.encoder_widths, cfg.embedding_dim),
        activation=cfg.encoder_activation,
        output_normalize=cfg.encoder_normalize,
        dropout_rate=0.0)
    return Network(spec, rng)


def _head_net(cfg, in_dim, out_dim, rng, dropout=None, normalize=False):
    spec = NetworkSpec(
        layer_widths=(in_dim, *cfg.head_widths, out_dim),
        activation=cfg.head_activation,
        output_normalize=normalize,
        dropout_rate=cfg.head_dropout if dropout is None else dropout)
    return Network(spec, rng)


class _Loop:
    """Minibatch sampler + optimizer shared by every objective."""

    def __init__(self, cfg: PretrainConfig, nets: list[Network], n_rows: int,
                 rng: np.random.Generator, batch_size: int | None = None):
        if n_rows == 0:
            raise ValueError("empty dataset")
        self.cfg = cfg
        self.nets = nets
        self.n_rows = n_rows
        self.batch_size = batch_size or cfg.batch_size
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        self.rng = rng
        params = []
        for net in nets:
            params.extend(net.params())
        self.params = params
        self.opt = Adam(params, AdamConfig(
            learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
            total_steps=cfg.steps))
        self.log: list[float] = []

    def batches(self):
        for _ in range(self.cfg.steps):
            yield self.rng.integers(0, self.n_rows, size=self.batch_size)

    def update(self, loss: float, grads_per_net: list[list[Array]]) -> None:
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite pretraining loss {loss!r}")
        flat: list[Array] = []
        for g in grads_per_net:
            flat.extend(g)
        self.opt.step(self.params, flat)
        self.log.append(float(loss))


def _encode_pair_grads(enc, o, o_next, head, target, loop):
    """Shared ID-style step: loss = MSE(head([enc(o), enc(o')]), target)."""
    e = enc.spec.output_dim
    z1, c1 = forward_cache(enc, o)
    z2, c2 = forward_cache(enc, o_next)
    h, ch = forward_cache(head, np.concatenate([z1, z2], axis=1),
                          train=True, rng=loop.rng)
    loss = mse_loss(h, target)
    dcat, g_head = backward(head, ch, mse_grad(h, target))
    _, g_enc1 = backward(enc, c1, dcat[:, :e])
    _, g_enc2 = backward(enc, c2, dcat[:, e:])
    g_enc = [a + b for a, b in zip(g_enc1, g_enc2)]
    return loss, [g_enc, g_head]


# ---------------------------------------------------------------------------
# objectives

def pretrain_id(ds: DatasetHandle, cfg: PretrainConfig,
                rng: np.random.Generator) -> Encoder:
    """Inverse dynamics: predict a_t from (o_t, o_{t+kappa})."""
    trans = ds.transitions(cfg.kappa, "train")
    enc = make_encoder_net(cfg, ds.obs_dim, rng)
    head = _head_net(cfg, 2 * cfg.embedding_dim, ds.action_dim, rng)
    loop = _Loop(cfg, [enc, head], len(trans), rng)
    aug = cfg.augmentation
    for idx in loop.batches():
        o = augment(trans.obs[idx], aug, loop.rng)
        o_next = augment(trans.obs_next[idx], aug, loop.rng)
        loss, grads = _encode_pair_grads(enc, o, o_next, head,
                                         trans.actions[idx], loop)
        loop.update(loss, grads)
    return Encoder(net=enc, objective_tag=ID, train_log=loop.log)


def pretrain_bc(ds: DatasetHandle, cfg: PretrainConfig,
                rng: np.random.Generator) -> Encoder:
    """Multitask behavior cloning: predict a_t from o_t alone."""
    trans = ds.transitions(cfg.kappa, "train")
    enc = make_encoder_net(cfg, ds.obs_dim, rng)
    head = _head_net(cfg, cfg.embedding_dim, ds.action_dim, rng)
    loop = _Loop(cfg, [enc, head], len(trans), rng)
    for idx in loop.batches():
        o = augment(trans.obs[idx], cfg.augmentation, loop.rng)
        z, cz = forward_cache(enc, o)
        pred, ch = forward_cache(head, z, train=True, rng=loop.rng)
        target = trans.actions[idx]
        loss = mse_loss(pred, target)
        dz, g_head = backward(head, ch, mse_grad(pred, target))
        _, g_enc = backward(enc, cz, dz)
        loop.update(loss, [g_enc, g_head])
    return Encoder(net=enc, objective_tag=BC, train_log=loop.log)


def pretrain_fd_explicit(ds: DatasetHandle, cfg: PretrainConfig,
                         rng: np.random.Generator) -> Encoder:
    """Explicit forward dynamics: reconstruct o_{t+kappa} from the encoded
    o_t and the action window. No augmentations (reconstruction targets
    would be corrupted too)."""
    trans = ds.transitions(cfg.kappa, "train")
    enc = make_encoder_net(cfg, ds.obs_dim, rng)
    act_width = trans.action_window.shape[1]
    dec = _head_net(cfg, cfg.embedding_dim + act_width, ds.obs_dim, rng,
                    dropout=0.0)
    loop = _Loop(cfg, [enc, dec], len(trans), rng)
    e = cfg.embedding_dim
    for idx in loop.batches():
        o = trans.obs[idx]
        a = trans.action_window[idx]
        target = trans.obs_next[idx]
        z, cz = forward_cache(enc, o)
        recon, cd = forward_cache(dec, np.concatenate([z, a], axis=1),
                                  train=True, rng=loop.rng)
        loss = mse_loss(recon, target)
        dcat, g_dec = backward(dec, cd, mse_grad(recon, target))
        _, g_enc = backward(enc, cz, dcat[:, :e])
        loop.update(loss, [g_enc, g_dec])
    return Encoder(net=enc, objective_tag=FD_E, train_log=loop.log)


def pretrain_fd_implicit(ds: DatasetHandle, cfg: PretrainConfig,
                         rng: np.random.Generator) -> Encoder:
    """Implicit forward dynamics: InfoNCE between f1(enc(o), enc_a(a)) and
    f2(enc(o')) with in-batch negatives."""
    trans = ds.transitions(cfg.kappa, "train")
    e = cfg.embedding_dim
    enc = make_encoder_net(cfg, ds.obs_dim, rng)
    act_enc = Network(NetworkSpec(
        layer_widths=(trans.action_window.shape[1], *cfg.head_widths, e),
        activation=cfg.head_activation, output_normalize=True), rng)
    f1 = _head_net(cfg, 2 * e, e, rng, dropout=0.0)
    f2 = _head_net(cfg, e, e, rng, dropout=0.0)
    loop = _Loop(cfg, [enc, act_enc, f1, f2], len(trans), rng)
    aug = cfg.augmentation
    for idx in loop.batches():
        o = augment(trans.obs[idx], aug, loop.rng)
        o_next = augment(trans.obs_next[idx], aug, loop.rng)
        a = trans.action_window[idx]
        z, cz = forward_cache(enc, o)
        za, ca = forward_cache(act_enc, a)
        zn, cn = forward_cache(enc, o_next)
        anchor, c1 = forward_cache(f1, np.concatenate([z, za], axis=1))
        positive, c2 = forward_cache(f2, zn)
        loss, d_anchor, d_pos = infonce_grads(anchor, positive)
        dcat, g_f1 = backward(f1, c1, d_anchor)
        dzn, g_f2 = backward(f2, c2, d_pos)
        _, g_enc1 = backward(enc, cz, dcat[:, :e])
        _, g_act = backward(act_enc, ca, dcat[:, e:])
        _, g_enc2 = backward(enc, cn, dzn)
        g_enc = [x + y for x, y in zip(g_enc1, g_enc2)]
        loop.update(loss, [g_enc, g_act, g_f1, g_f2])
    return Encoder(net=enc, objective_tag=FD_I, train_log=loop.log)


def pretrain_contrastive(ds: DatasetHandle, cfg: PretrainConfig,
                         rng: np.random.Generator) -> Encoder:
    """Static observation modeling: InfoNCE between projections of two
    independently augmented views of the same observation."""
    if cfg.augmentation.is_identity:
        raise ValueError(
            "contrastive pretraining needs a nonzero augmentation "
            "(identical views make the loss degenerate)")
    trans = ds.transitions(cfg.kappa, "train")
    e = cfg.embedding_dim
    enc = make_encoder_net(cfg, ds.obs_dim, rng)
    f1 = _head_net(cfg, e, e, rng, dropout=0.0)
    f2 = _head_net(cfg, e, e, rng, dropout=0.0)
    loop = _Loop(cfg, [enc, f1, f2], len(trans), rng)
    for idx in loop.batches():
        o = trans.obs[idx]
        v1 = augment(o, cfg.augmentation, loop.rng)
        v2 = augment(o, cfg.augmentation, loop.rng)
        z1, cz1 = forward_cache(enc, v1)
        z2, cz2 = forward_cache(enc, v2)
        anchor, c1 = forward_cache(f1, z1)
        positive, c2 = forward_cache(f2, z2)
        loss, d_anchor, d_pos = infonce_grads(anchor, positive)
        dz1, g_f1 = backward(f1, c1, d_anchor)
        dz2, g_f2 = backward(f2, c2, d_pos)
        _, g_enc1 = backward(enc, cz1, dz1)
        _, g_enc2 = backward(enc, cz2, dz2)
        g_enc = [x + y for x, y in zip(g_enc1, g_enc2)]
        loop.update(loss, [g_enc, g_f1, g_f2])
    return Encoder(net=enc, objective_tag=CONT, train_log=loop.log)


def scratch_encoder(cfg: PretrainConfig, obs_dim: int) -> Encoder:
    """Untrained encoder; the finetuner trains it jointly with the head."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5C2A]))
    return Encoder(net=make_encoder_net(cfg, obs_dim, rng),
                   objective_tag=SCRATCH, train_log=[])


def states_oracle(mdp: LatentMdp) -> Encoder:
    """Skyline: the ground-truth low-dimensional state as the embedding."""
    return Encoder(net=None, objective_tag=STATES, train_log=[], mdp=mdp)


_DISPATCH = {
    ID: pretrain_id,
    BC: pretrain_bc,
    FD_E: pretrain_fd_explicit,
    FD_I: pretrain_fd_implicit,
    CONT: pretrain_contrastive,
}


def pretrain(ds: DatasetHandle, cfg: PretrainConfig,
             rng: np.random.Generator) -> Encoder:
    """Dispatch to the objective named in cfg.objective."""
    try:
        fn = _DISPATCH[cfg.objective]
    except KeyError:
        raise ValueError(f"unknown objective {cfg.objective!r}") from None
    return fn(ds, cfg, rng)
