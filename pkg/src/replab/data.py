"""Trajectory datasets: generation, k-step transition views, binary IO.

Learners only ever see TransitionBatch views (observations and actions);
the ground-truth latents and context tags ride along for probes and
bookkeeping behind privileged accessors that count their uses, so tests
can assert a training run never touched them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import binio, env

Array = np.ndarray

DATASET_MAGIC = b"IMPD"
DATASET_VERSION = 1

VAL_FRACTION = 0.1

_CONTEXT_KIND_CODES = {env.GOAL: 0, env.DISCRETE: 1, env.ROTATION: 2}
_CONTEXT_KIND_NAMES = {v: k for k, v in _CONTEXT_KIND_CODES.items()}


@dataclass(frozen=True)
class Trajectory:
    observations: Array         # (H+1, d)
    actions: Array              # (H, k)
    latents: Array              # (H+1, ell), privileged
    context: env.Context        # privileged

    def __post_init__(self):
        n_obs = self.observations.shape[0]
        if self.actions.shape[0] != n_obs - 1 or self.latents.shape[0] != n_obs:
            raise ValueError("trajectory field lengths inconsistent")


@dataclass(frozen=True)
class TransitionBatch:
    """Learner-facing rows (o_t, a_t, o_{t+kappa}); deliberately carries no
    latents or context tags. action_window stacks a_{t:t+kappa} for
    multi-step forward models (equals actions when kappa = 1)."""

    obs: Array
    actions: Array
    obs_next: Array
    step_gap: int
    action_window: Array

    def __len__(self) -> int:
        return self.obs.shape[0]


def _derive_split(n_traj: int, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5917]))
    perm = rng.permutation(n_traj)
    n_val = int(VAL_FRACTION * n_traj)   # tiny sets keep everything in train
    val = np.sort(perm[:n_val])
    train = np.sort(perm[n_val:])
    return train, val


class DatasetHandle:
    """Immutable trajectory collection with a fixed train/val split."""

    def __init__(self, trajectories, seed: int, provenance: dict):
        self._trajectories = tuple(trajectories)
        self.seed = int(seed)
        self.provenance = dict(provenance)
        self.train_indices, self.val_indices = _derive_split(
            len(self._trajectories), self.seed)
        self._privileged_reads = 0

    def __len__(self) -> int:
        return len(self._trajectories)

    @property
    def horizon(self) -> int:
        return self._trajectories[0].actions.shape[0]

    @property
    def obs_dim(self) -> int:
        return self._trajectories[0].observations.shape[1]

    @property
    def action_dim(self) -> int:
        return self._trajectories[0].actions.shape[1]

    @property
    def privileged_reads(self) -> int:
        return self._privileged_reads

    def _split_indices(self, split: str) -> Array:
        if split == "train":
            idx = self.train_indices
        elif split == "val":
            idx = self.val_indices
        elif split == "all":
            idx = np.arange(len(self._trajectories))
        else:
            raise ValueError(f"unknown split {split!r}")
        return idx

    # -- learner-facing ----------------------------------------------------

    def transitions(self, kappa: int = 1, split: str = "train") -> TransitionBatch:
        """All (o_t, a_t, o_{t+kappa}) rows of the chosen split, in
        deterministic (trajectory, time) order."""
        if not 1 <= kappa <= self.horizon:
            raise ValueError(f"kappa must be in [1, {self.horizon}]")
        obs, acts, nxt, windows = [], [], [], []
        for i in self._split_indices(split):
            tr = self._trajectories[i]
            h = tr.actions.shape[0]
            t_max = h - kappa + 1
            obs.append(tr.observations[:t_max])
            nxt.append(tr.observations[kappa:kappa + t_max])
            acts.append(tr.actions[:t_max])
            win = [tr.actions[j:j + t_max] for j in range(kappa)]
            windows.append(np.concatenate(win, axis=1))
        if not obs:
            k = self.action_dim
            return TransitionBatch(
                obs=np.zeros((0, self.obs_dim)), actions=np.zeros((0, k)),
                obs_next=np.zeros((0, self.obs_dim)), step_gap=kappa,
                action_window=np.zeros((0, kappa * k)))
        return TransitionBatch(
            obs=np.concatenate(obs), actions=np.concatenate(acts),
            obs_next=np.concatenate(nxt), step_gap=kappa,
            action_window=np.concatenate(windows))

    # -- privileged --------------------------------------------------------

    def privileged_trajectories(self):
        self._privileged_reads += 1
        return self._trajectories

    def privileged_states(self, split: str = "train"):
        """(observations, latents) pairs for probing, one row per step."""
        self._privileged_reads += 1
        idx = self._split_indices(split)
        obs = np.concatenate([self._trajectories[i].observations for i in idx])
        lat = np.concatenate([self._trajectories[i].latents for i in idx])
        return obs, lat

    def privileged_context_tags(self):
        self._privileged_reads += 1
        return tuple(tr.context.tag() for tr in self._trajectories)

    def privileged_contexts(self):
        self._privileged_reads += 1
        return tuple(tr.context for tr in self._trajectories)


# ---------------------------------------------------------------------------
# generation

def mdp_spec_hash(mdp: env.LatentMdp) -> str:
    if mdp.spec is None:
        payload = {"direct": True, "seed": mdp.seed,
                   "dims": [mdp.latent_dim, mdp.obs_dim, mdp.action_dim]}
    else:
        payload = {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in vars(mdp.spec).items()}
        payload["seed"] = mdp.seed
    blob = json.dumps(payload, sort_keys=True)
    return hashlib.blake2b(blob.encode(), digest_size=8).hexdigest()


def _provenance(mdp, policy, context_spec, seed, role):
    return {
        "mdp_spec_hash": mdp_spec_hash(mdp),
        "policy_family": policy.family,
        "context_kind": context_spec.kind if context_spec else "fixed",
        "seed": int(seed),
        "role": role,
    }


def _run_trajectory(mdp, policy, context, rng):
    spec = env.EvaluationSpec(success_radius=0.1 * mdp.arena_radius,
                              episodes=1, max_steps=mdp.horizon)
    roll = env.rollout(mdp, policy, context, spec, rng)
    return Trajectory(observations=roll.observations, actions=roll.actions,
                      latents=roll.latents, context=context)


def generate_pretraining(mdp: env.LatentMdp, policy: env.ExpertPolicy,
                         context_spec: env.ContextSpec, n_traj: int,
                         rng: np.random.Generator) -> DatasetHandle:
    """Multi-context pretraining data: continuous contexts draw one fresh
    context per trajectory, discrete contexts round-robin over the allowed
    set."""
    if n_traj < 1:
        raise ValueError("need at least one trajectory")
    seed = int(rng.integers(0, 2 ** 63 - 1))
    gen = np.random.default_rng(np.random.SeedSequence([seed, 0xD5E7]))
    trajectories = []
    for i in range(n_traj):
        context = env.sample_context(mdp, context_spec, gen, index=i)
        trajectories.append(_run_trajectory(mdp, policy, context, gen))
    return DatasetHandle(trajectories, seed,
                         _provenance(mdp, policy, context_spec, seed, "pretrain"))


def generate_finetuning(mdp: env.LatentMdp, policy: env.ExpertPolicy,
                        c_fine: env.Context, n_traj: int,
                        rng: np.random.Generator) -> DatasetHandle:
    """Single-context finetuning data; every trajectory shares c_fine."""
    if n_traj < 1:
        raise ValueError("need at least one trajectory")
    seed = int(rng.integers(0, 2 ** 63 - 1))
    gen = np.random.default_rng(np.random.SeedSequence([seed, 0xF13E]))
    trajectories = [_run_trajectory(mdp, policy, c_fine, gen)
                    for _ in range(n_traj)]
    return DatasetHandle(trajectories, seed,
                         _provenance(mdp, policy, None, seed, "finetune"))


# ---------------------------------------------------------------------------
# binary IO

def _write_context(w: binio.Writer, c: env.Context) -> None:
    w.u8(_CONTEXT_KIND_CODES[c.kind])
    w.u8(1 if c.inferrable else 0)
    w.i64(c.discrete_id if c.discrete_id is not None else -1)
    if c.kind == env.ROTATION:
        w.array(c.rotation)
    else:
        w.array(c.goal)


def _read_context(r: binio.Reader) -> env.Context:
    kind = _CONTEXT_KIND_NAMES[r.u8()]
    inferrable = bool(r.u8())
    cid = r.i64()
    payload = r.array()
    if kind == env.ROTATION:
        return env.Context(kind=kind, inferrable=inferrable, rotation=payload)
    return env.Context(kind=kind, inferrable=inferrable, goal=payload,
                       discrete_id=None if cid < 0 else int(cid))


def save(ds: DatasetHandle, path) -> None:
    w = binio.Writer(DATASET_MAGIC, DATASET_VERSION)
    w.json_({"n_traj": len(ds), "seed": ds.seed, "provenance": ds.provenance})
    for tr in ds._trajectories:
        w.array(tr.latents)
        w.array(tr.observations)
        w.array(tr.actions)
        _write_context(w, tr.context)
    w.write(path)


def load(path) -> DatasetHandle:
    r = binio.read_file(path, DATASET_MAGIC, DATASET_VERSION)
    header = r.json_()
    trajectories = []
    for _ in range(header["n_traj"]):
        latents = r.array()
        observations = r.array()
        actions = r.array()
        context = _read_context(r)
        trajectories.append(Trajectory(observations=observations,
                                       actions=actions, latents=latents,
                                       context=context))
    return DatasetHandle(trajectories, header["seed"], header["provenance"])
