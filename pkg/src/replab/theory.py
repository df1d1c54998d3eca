"""Executable checks of the analysis claims: closed-form inverse-dynamics
recovery, rotation-context confounding of behavior cloning, and the
encoder/decoder complexity asymmetry of explicit forward dynamics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data, env, finetune, pretrain, probes
from .env import LatentMdp, LinearLift, MdpSpec, haar_rotation, make_mdp

Array = np.ndarray


class InsufficientExcitationError(ValueError):
    """Regression design is rank-deficient; transitions do not excite the
    full latent space."""


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    kind: str          # "le" or "ge"
    threshold: float

    @property
    def ok(self) -> bool:
        if self.kind == "le":
            return self.value <= self.threshold
        return self.value >= self.threshold


@dataclass
class TheoryReport:
    experiment: str
    metrics: dict[str, float]
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def thresholds(self) -> dict[str, float]:
        return {c.name: c.threshold for c in self.checks}

    def to_text(self) -> str:
        lines = [f"experiment: {self.experiment}",
                 f"pass: {self.passed}"]
        lines.append("metrics:")
        for k in sorted(self.metrics):
            lines.append(f"  {k} = {self.metrics[k]:.6g}")
        lines.append("checks:")
        for c in self.checks:
            sym = "<=" if c.kind == "le" else ">="
            lines.append(f"  [{'ok' if c.ok else 'FAIL'}] "
                         f"{c.name} = {c.value:.6g} {sym} {c.threshold:.6g}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# inverse-dynamics recovery

def id_closed_form(mdp: LatentMdp, n_samples: int, rng: np.random.Generator,
                   noise_std: float | None = None):
    """Joint least squares a ~ W1 o + W2 o' on random-excitation transitions.

    Latents are drawn uniformly in the arena and actions uniformly in the
    clip box, so the second moments are full rank whenever the dims allow.
    Returns (W1, W2, diagnostics dict).
    """
    if not isinstance(mdp.lift, LinearLift):
        raise ValueError("closed-form recovery assumes the linear lift")
    ell, k = mdp.latent_dim, mdp.action_dim
    latents = probes.reference_latents(mdp, n_samples, rng)
    actions = rng.uniform(-1.0, 1.0, size=(n_samples, k))
    nxt = latents @ mdp.a_mat.T + actions @ mdp.b_mat.T
    sigma = noise_std if noise_std is not None else 0.0
    if sigma > 0:
        nxt = nxt + rng.normal(0.0, sigma, size=nxt.shape)
    obs = mdp.lift.decode(latents)
    obs_next = mdp.lift.decode(nxt)

    design = np.concatenate([obs, obs_next], axis=1)
    coef, _, rank, _ = np.linalg.lstsq(design, actions, rcond=None)
    if rank < 2 * ell:
        raise InsufficientExcitationError(
            f"design rank {rank} < {2 * ell}: transitions do not excite "
            f"the joint latent space")
    d = mdp.obs_dim
    w1 = coef[:d].T
    w2 = coef[d:].T

    q = mdp.lift.q
    w2_true = mdp.b_pinv @ q.T
    w1_true = -mdp.b_pinv @ mdp.a_mat @ q.T
    err1 = np.linalg.norm(w1 - w1_true) / max(np.linalg.norm(w1_true), 1e-300)
    err2 = np.linalg.norm(w2 - w2_true) / np.linalg.norm(w2_true)

    # row-space alignment with the lifted latent subspace
    proj = q @ q.T
    stacked = np.concatenate([w1, w2], axis=0)
    projected = stacked @ proj
    alignment = float(np.sum(projected ** 2) / np.sum(stacked ** 2))
    return w1, w2, {"w1_rel_error": float(err1), "w2_rel_error": float(err2),
                    "alignment": alignment}


def verify_id_recovery(spec: MdpSpec, n_samples: int,
                       rng: np.random.Generator,
                       rate_sizes: tuple[int, ...] = (1000, 4000, 16000),
                       rate_noise: float = 0.3,
                       rate_reps: int = 8) -> TheoryReport:
    """Noiseless closed-form identities plus the noisy 1/sqrt(n) rate."""
    mdp = make_mdp(spec, seed=int(rng.integers(0, 2 ** 31)))
    _, _, diag = id_closed_form(mdp, n_samples, rng)

    errs = []
    for n in rate_sizes:
        reps = []
        for _ in range(rate_reps):
            _, _, d = id_closed_form(mdp, n, rng, noise_std=rate_noise)
            reps.append(d["w2_rel_error"])
        errs.append(float(np.mean(reps)))
    ratios = [errs[i + 1] / errs[i] for i in range(len(errs) - 1)]

    metrics = {
        "max_rel_error": max(diag["w1_rel_error"], diag["w2_rel_error"]),
        "alignment": diag["alignment"],
        **{f"rate_err_n{n}": e for n, e in zip(rate_sizes, errs)},
        **{f"rate_ratio_{i}": r for i, r in enumerate(ratios)},
    }
    checks = [
        Check("max_rel_error", metrics["max_rel_error"], "le", 1e-8),
        Check("alignment", metrics["alignment"], "ge", 1.0 - 1e-8),
    ]
    for i, r in enumerate(ratios):
        checks.append(Check(f"rate_ratio_{i}_low", r, "ge", 0.4))
        checks.append(Check(f"rate_ratio_{i}_high", r, "le", 0.6))
    return TheoryReport("id-recovery", metrics, checks)


# ---------------------------------------------------------------------------
# BC confounding

def confounded_mdp(k: int, obs_dim: int, horizon: int, seed: int) -> LatentMdp:
    """The rotation construction: unit-sphere states, a = R s/|s| experts,
    dynamics s' = B a with A = 0 and no noise, so the state marginal at
    every step is uniform on the sphere for every context.

    The lift is an invertible coupling map: the latent stays recoverable
    in principle, but is not linearly exposed, so only encoders that were
    actually trained to invert it transfer downstream.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0F0]))
    g = rng.normal(size=(obs_dim, k))
    q, r = np.linalg.qr(g)
    lift = env.CouplingLift(q * np.sign(np.diag(r)), rng, scale=1.0)
    return LatentMdp(a_mat=np.zeros((k, k)), b_mat=np.eye(k),
                     noise_cov=np.zeros((k, k)), lift=lift, horizon=horizon,
                     arena_radius=2.0, seed=seed)


def marginal_action_mean(k: int, n_contexts: int,
                         rng: np.random.Generator) -> float:
    """Norm of the empirical conditional action mean at one fixed
    observation, across Haar-random rotation contexts."""
    s0 = np.zeros(k)
    s0[0] = 1.0
    acts = np.stack([haar_rotation(k, rng) @ s0 for _ in range(n_contexts)])
    return float(np.linalg.norm(acts.mean(axis=0)))


def verify_bc_confounding(k: int, n_contexts: int, n_samples_per_context: int,
                          rng: np.random.Generator,
                          pretrain_steps: int = 2000,
                          finetune_steps: int = 2000,
                          n_traj_fine: int = 5,
                          episodes: int = 100,
                          obs_dim: int | None = None) -> TheoryReport:
    """Pooled rotation-context data: BC's best loss is the action variance
    while ID fits nearly exactly, and only the ID features transfer."""
    if k < 2:
        raise ValueError("confounding construction needs k >= 2")
    seed = int(rng.integers(0, 2 ** 31))
    mdp = confounded_mdp(k, obs_dim or 8 * k, n_samples_per_context, seed)
    ctx_spec = env.ContextSpec(kind=env.ROTATION)
    expert = env.ExpertPolicy(family=env.ROTATION_LINEAR)

    marginal = marginal_action_mean(k, n_contexts, rng)

    ds = data.generate_pretraining(mdp, expert, ctx_spec, n_contexts, rng)
    action_sq = float(np.mean(np.sum(
        ds.transitions(1, "train").actions ** 2, axis=1)))

    def train_cfg(objective):
        return pretrain.default_config(objective, steps=pretrain_steps,
                                       seed=seed)

    enc_bc = pretrain.pretrain_bc(ds, train_cfg(pretrain.BC), rng)
    enc_id = pretrain.pretrain_id(ds, train_cfg(pretrain.ID), rng)
    tail = max(1, pretrain_steps // 10)
    bc_plateau = float(np.mean(enc_bc.train_log[-tail:])) * k
    id_loss = float(np.mean(enc_id.train_log[-tail:])) * k

    c_fine = env.sample_context(mdp, ctx_spec, rng)
    ds_fine = data.generate_finetuning(mdp, expert, c_fine, n_traj_fine, rng)
    eval_spec = env.EvaluationSpec(success_radius=0.1 * mdp.arena_radius,
                                   episodes=episodes, max_steps=mdp.horizon)
    ft_cfg = finetune.FinetuneConfig(steps=finetune_steps, seed=seed)
    successes = {}
    for tag, enc in (("bc", enc_bc), ("id", enc_id)):
        head = finetune.finetune(enc, ds_fine, ft_cfg, rng)
        successes[tag] = finetune.evaluate(mdp, c_fine, head, eval_spec,
                                           rng).success_rate
    random_pol = env.ExpertPolicy(family=env.RANDOM_UNIFORM)
    success_random = finetune.evaluate(mdp, c_fine, random_pol, eval_spec,
                                       rng).success_rate

    metrics = {
        "marginal_action_mean_norm": marginal,
        "action_sq_norm": action_sq,
        "bc_loss_plateau": bc_plateau,
        "id_final_loss": id_loss,
        "success_bc": successes["bc"],
        "success_id": successes["id"],
        "success_random": success_random,
        "id_minus_bc": successes["id"] - successes["bc"],
        "bc_vs_random_gap": abs(successes["bc"] - success_random),
    }
    checks = [
        Check("marginal_action_mean_norm", marginal, "le",
              3.0 / np.sqrt(n_contexts)),
        Check("bc_loss_plateau", bc_plateau, "ge", 0.9 * action_sq),
        Check("id_final_loss", id_loss, "le", 0.1 * action_sq),
        Check("id_minus_bc", metrics["id_minus_bc"], "ge", 0.4),
        Check("bc_vs_random_gap", metrics["bc_vs_random_gap"], "le", 0.1),
    ]
    return TheoryReport("bc-confounding", metrics, checks)


# ---------------------------------------------------------------------------
# forward-dynamics complexity

def verify_fd_complexity(omega_list: tuple[float, ...],
                         budget: int, rng: np.random.Generator,
                         latent_dim: int = 2, n_traj: int = 200,
                         probe_steps: int = 2000,
                         noise_std: float = 0.02) -> TheoryReport:
    """State-probe error of FD-e vs ID encoders across manifold frequency.

    The encoder's job (read the first coordinates) is identical at every
    frequency; only the decoder's job hardens, so ID should stay flat
    while FD-e degrades.
    """
    omega_list = tuple(omega_list)
    seed = int(rng.integers(0, 2 ** 31))
    expert = env.ExpertPolicy()
    probe_cfg = probes.ProbeConfig(steps=probe_steps)
    results: dict[str, dict[float, float]] = {"FD-e": {}, "ID": {}}
    for omega in omega_list:
        spec = MdpSpec(latent_dim=latent_dim, obs_dim=2 * latent_dim,
                       action_dim=latent_dim, lift_kind=env.GRAPH_LIFT,
                       omega=omega, noise_std=noise_std, horizon=50,
                       arena_radius=1.5)
        mdp = make_mdp(spec, seed)
        ctx_spec = env.ContextSpec(kind=env.GOAL)
        ds = data.generate_pretraining(
            mdp, expert, ctx_spec, n_traj,
            np.random.default_rng(np.random.SeedSequence([seed, int(omega * 8)])))
        for obj_code, objective in enumerate((pretrain.FD_E, pretrain.ID)):
            cfg = pretrain.default_config(objective, steps=budget, seed=seed)
            enc = pretrain.pretrain(
                ds, cfg,
                np.random.default_rng(np.random.SeedSequence(
                    [seed, int(omega * 8), obj_code])))
            probe = probes.probe_state(
                enc, ds, probe_cfg,
                np.random.default_rng(np.random.SeedSequence([seed, 77])))
            results[objective][omega] = probe.val_loss

    lo, hi = omega_list[0], omega_list[-1]
    fd_growth = results[pretrain.FD_E][hi] / results[pretrain.FD_E][lo]
    id_growth = results[pretrain.ID][hi] / results[pretrain.ID][lo]
    ratio_high = results[pretrain.FD_E][hi] / results[pretrain.ID][hi]
    metrics = {}
    for obj, per_omega in results.items():
        for omega, value in per_omega.items():
            metrics[f"probe_mse_{obj}_omega{omega:g}"] = value
    metrics.update({"fd_growth": fd_growth, "id_growth": id_growth,
                    "fd_over_id_at_high": ratio_high})
    checks = [
        Check("fd_growth", fd_growth, "ge", 2.0),
        Check("id_growth", id_growth, "le", 1.5),
        Check("fd_over_id_at_high", ratio_high, "ge", 2.0),
    ]
    return TheoryReport("fd-complexity", metrics, checks)
