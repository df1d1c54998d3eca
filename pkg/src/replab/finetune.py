"""Policy-head training on frozen features and rollout evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import env
from .data import DatasetHandle
from .netcore import (Adam, AdamConfig, Network, NetworkSpec, backward,
                      forward, forward_cache, mse_grad, mse_loss)
from .pretrain import AugSpec, Encoder, PretrainConfig, SCRATCH, augment

Array = np.ndarray


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 2000
    batch_size: int = 256
    seed: int = 0
    joint: bool = False              # train the encoder too (Scratch only)
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    head_widths: tuple[int, ...] = (256, 256)
    head_activation: str = "gelu"
    head_dropout: float = 0.1
    action_clip: float = 1.0
    augmentation: AugSpec = field(default_factory=AugSpec)
    val_every: int = 100

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass
class PolicyHead:
    """Deterministic MSE-trained policy: clip(head(encode(o)))."""

    net: Network
    encoder: Encoder
    train_log: list[float]
    val_log: list[tuple[int, float]]
    action_clip: float = 1.0

    def action(self, obs: Array) -> Array:
        return self.action_batch(np.atleast_2d(obs))[0]

    def action_batch(self, obs: Array) -> Array:
        z = self.encoder.encode(obs)
        a = forward(self.net, z, train=False)
        return np.clip(a, -self.action_clip, self.action_clip)


def finetune(encoder: Encoder, ds_fine: DatasetHandle, cfg: FinetuneConfig,
             rng: np.random.Generator) -> PolicyHead:
    """Fit the policy head by MSE on (embedded) observation/action pairs.

    Frozen encoders have their embeddings precomputed once; the joint path
    (Scratch) backpropagates into the encoder and applies the same vector
    augmentations the pretrained objectives saw.
    """
    if cfg.joint and encoder.objective_tag != SCRATCH:
        raise ValueError("joint finetuning is reserved for the Scratch baseline")
    trans = ds_fine.transitions(1, "train")
    trans_val = ds_fine.transitions(1, "val")
    if len(trans_val) == 0:
        trans_val = trans                     # tiny sets: fall back to train
    if encoder.embedding_dim is None:
        raise ValueError("encoder has no embedding dimension")

    head = Network(NetworkSpec(
        layer_widths=(encoder.embedding_dim, *cfg.head_widths,
                      ds_fine.action_dim),
        activation=cfg.head_activation,
        dropout_rate=cfg.head_dropout), rng)

    if cfg.joint:
        nets = [encoder.net, head]
    else:
        nets = [head]
        emb_train = encoder.encode(trans.obs)
        emb_val = encoder.encode(trans_val.obs)
    params = [p for net in nets for p in net.params()]
    opt = Adam(params, AdamConfig(learning_rate=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay,
                                  total_steps=max(cfg.steps, 1)))
    train_log: list[float] = []
    val_log: list[tuple[int, float]] = []

    def val_loss() -> float:
        if cfg.joint:
            zv = forward(encoder.net, trans_val.obs, train=False)
        else:
            zv = emb_val
        pred = forward(head, zv, train=False)
        return mse_loss(pred, trans_val.actions)

    n = len(trans)
    for step_i in range(cfg.steps):
        idx = rng.integers(0, n, size=min(cfg.batch_size, max(n, 2)))
        target = trans.actions[idx]
        if cfg.joint:
            o = augment(trans.obs[idx], cfg.augmentation, rng)
            z, cz = forward_cache(encoder.net, o)
            pred, ch = forward_cache(head, z, train=True, rng=rng)
            loss = mse_loss(pred, target)
            dz, g_head = backward(head, ch, mse_grad(pred, target))
            _, g_enc = backward(encoder.net, cz, dz)
            opt.step(params, g_enc + g_head)
        else:
            z = emb_train[idx]
            pred, ch = forward_cache(head, z, train=True, rng=rng)
            loss = mse_loss(pred, target)
            _, g_head = backward(head, ch, mse_grad(pred, target))
            opt.step(params, g_head)
        train_log.append(float(loss))
        if step_i % cfg.val_every == 0 or step_i == cfg.steps - 1:
            val_log.append((step_i, float(val_loss())))
    if not val_log:
        val_log.append((0, float(val_loss())))

    return PolicyHead(net=head, encoder=encoder, train_log=train_log,
                      val_log=val_log, action_clip=cfg.action_clip)


def action_losses(policy_head: PolicyHead) -> tuple[float, float]:
    """(final train MSE, last recorded validation MSE)."""
    train = policy_head.train_log[-1] if policy_head.train_log else float("nan")
    val = policy_head.val_log[-1][1]
    return train, val


@dataclass(frozen=True)
class EvalResult:
    success_rate: float
    stderr: float
    outcomes: Array      # per-episode 0/1

    def __float__(self):
        return self.success_rate


def evaluate(mdp: env.LatentMdp, c_fine: env.Context, policy,
             eval_spec: env.EvaluationSpec, rng: np.random.Generator) -> EvalResult:
    """Success rate of a policy over fresh episodes.

    Episodes run in vectorized lockstep with one RNG stream per episode
    derived from (root seed, episode index), so results do not depend on
    scheduling or on the number of episodes evaluated together.
    """
    root = int(rng.integers(0, 2 ** 63 - 1))
    episode_rngs = [np.random.default_rng(np.random.SeedSequence([root, ep]))
                    for ep in range(eval_spec.episodes)]
    n = eval_spec.episodes
    states = np.stack([env.initial_latent(mdp, c_fine, g)
                       for g in episode_rngs])
    obs = mdp.lift.decode(states)
    success = np.zeros(n, dtype=bool)
    start_states = states.copy()
    if c_fine.kind in (env.GOAL, env.DISCRETE):
        success |= np.linalg.norm(states - c_fine.goal, axis=1) <= eval_spec.success_radius

    use_expert = isinstance(policy, env.ExpertPolicy)
    noisy = bool(mdp.noise_chol.any())
    for _ in range(eval_spec.max_steps):
        if use_expert:
            actions = np.stack([
                env.expert_action(mdp, policy, c_fine, states[i],
                                  rng=episode_rngs[i]) for i in range(n)])
        else:
            actions = policy.action_batch(obs)
        states = states @ mdp.a_mat.T + actions @ mdp.b_mat.T
        if noisy:
            eps = np.stack([g.normal(size=mdp.latent_dim)
                            for g in episode_rngs])
            states = states + eps @ mdp.noise_chol.T
        norms = np.linalg.norm(states, axis=1)
        over = norms > mdp.arena_radius
        if over.any():
            states[over] *= (mdp.arena_radius / norms[over])[:, None]
        obs = mdp.lift.decode(states)
        if c_fine.kind in (env.GOAL, env.DISCRETE):
            success |= np.linalg.norm(states - c_fine.goal, axis=1) <= eval_spec.success_radius
    if c_fine.kind == env.ROTATION:
        for i in range(n):
            success[i] = env._rotation_success(mdp, c_fine, start_states[i],
                                               states[i], eval_spec)
    outcomes = success.astype(float)
    p = float(outcomes.mean())
    stderr = float(np.sqrt(p * (1.0 - p) / n))
    return EvalResult(success_rate=p, stderr=stderr, outcomes=outcomes)


class ExpertPolicyHead:
    """Expert wrapped behind the observation-policy interface (testing)."""

    def __init__(self, mdp: env.LatentMdp, policy: env.ExpertPolicy,
                 context: env.Context):
        self.mdp = mdp
        self.policy = policy
        self.context = context

    def action_batch(self, obs: Array) -> Array:
        states = env.true_encode(self.mdp, obs)
        return np.stack([
            env.expert_action(self.mdp, self.policy, self.context, s)
            for s in np.atleast_2d(states)])

    def action(self, obs: Array) -> Array:
        return self.action_batch(np.atleast_2d(obs))[0]
