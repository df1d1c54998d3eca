"""Synthetic contextual MDPs with latent linear dynamics.

The world state lives in a low-dimensional latent space with linear
dynamics s' = A s + B a + eps; observations are an invertible lift of the
latent state. Tasks are set by a context (goal vector, discrete goal id,
or rotation matrix) that shapes the expert policy and, optionally, the
initial-state distribution, but never the dynamics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

Array = np.ndarray

MANIFOLD_TOL = 1e-6

GOAL = "goal"
DISCRETE = "discrete"
ROTATION = "rotation"

PD_TO_GOAL = "pd-to-goal"
ROTATION_LINEAR = "rotation-linear"
RANDOM_UNIFORM = "random-uniform"

LINEAR_LIFT = "linear-orthonormal"
COUPLING_LIFT = "mlp-bijective"
GRAPH_LIFT = "graph-manifold"


class OffManifoldError(ValueError):
    """Observation is not (close enough to) a lifted latent state."""


class DegenerateSpecError(ValueError):
    """MDP spec could not be realized within its conditioning bounds."""


# ---------------------------------------------------------------------------
# observation lifts

class LinearLift:
    """decode(s) = Q s with orthonormal columns; encode(o) = Q^T o."""

    kind = LINEAR_LIFT

    def __init__(self, q: Array):
        q = np.asarray(q, dtype=float)
        if not np.allclose(q.T @ q, np.eye(q.shape[1]), atol=1e-9):
            raise ValueError("columns of Q must be orthonormal")
        self.q = q

    @property
    def latent_dim(self) -> int:
        return self.q.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.q.shape[0]

    def decode(self, latents: Array) -> Array:
        return np.atleast_2d(latents) @ self.q.T

    def encode(self, obs: Array) -> Array:
        return np.atleast_2d(obs) @ self.q


class GraphManifoldLift:
    """decode(s) = (s, sin(omega * s)) per coordinate; d = 2 * latent_dim.

    The encoder just reads the first half of the coordinates, so recovery
    is trivially easy while reconstruction gets harder as omega grows.
    """

    kind = GRAPH_LIFT

    def __init__(self, latent_dim: int, omega: float):
        if omega <= 0:
            raise ValueError("omega must be positive")
        self._latent_dim = int(latent_dim)
        self.omega = float(omega)

    @property
    def latent_dim(self) -> int:
        return self._latent_dim

    @property
    def obs_dim(self) -> int:
        return 2 * self._latent_dim

    def decode(self, latents: Array) -> Array:
        s = np.atleast_2d(latents)
        return np.concatenate([s, np.sin(self.omega * s)], axis=1)

    def encode(self, obs: Array) -> Array:
        return np.atleast_2d(obs)[:, :self._latent_dim]


class CouplingLift:
    """Two additive coupling layers on R^d composed with an orthonormal
    embedding: decode(s) = C(Q s). Exactly invertible, so encode(o) =
    Q^T C^{-1}(o)."""

    kind = COUPLING_LIFT

    def __init__(self, q: Array, rng: np.random.Generator, hidden: int = 32,
                 scale: float = 0.5):
        self.q = np.asarray(q, dtype=float)
        d = self.q.shape[0]
        self._d1 = d // 2
        self._d2 = d - self._d1
        self._nets = []
        for fan_in, fan_out in ((self._d1, self._d2), (self._d2, self._d1)):
            w1 = rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, hidden))
            b1 = rng.normal(0.0, 0.1, hidden)
            w2 = rng.normal(0.0, scale / math.sqrt(hidden), (hidden, fan_out))
            self._nets.append((w1, b1, w2))

    @property
    def latent_dim(self) -> int:
        return self.q.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.q.shape[0]

    def _shift(self, which: int, x: Array) -> Array:
        w1, b1, w2 = self._nets[which]
        return np.tanh(x @ w1 + b1) @ w2

    def _couple(self, x: Array) -> Array:
        x1, x2 = x[:, :self._d1], x[:, self._d1:]
        u2 = x2 + self._shift(0, x1)
        u1 = x1 + self._shift(1, u2)
        return np.concatenate([u1, u2], axis=1)

    def _uncouple(self, y: Array) -> Array:
        y1, y2 = y[:, :self._d1], y[:, self._d1:]
        x1 = y1 - self._shift(1, y2)
        x2 = y2 - self._shift(0, x1)
        return np.concatenate([x1, x2], axis=1)

    def decode(self, latents: Array) -> Array:
        return self._couple(np.atleast_2d(latents) @ self.q.T)

    def encode(self, obs: Array) -> Array:
        return self._uncouple(np.atleast_2d(obs)) @ self.q


def manifold_residual(lift, obs: Array) -> Array:
    """Per-row distance between obs and its reconstruction through the lift."""
    obs = np.atleast_2d(obs)
    recon = lift.decode(lift.encode(obs))
    return np.linalg.norm(obs - recon, axis=1)


# ---------------------------------------------------------------------------
# the MDP

@dataclass(frozen=True)
class MdpSpec:
    latent_dim: int
    obs_dim: int
    action_dim: int
    lift_kind: str = LINEAR_LIFT
    omega: float = 0.0
    noise_std: float = 0.0
    horizon: int = 50
    arena_radius: float = 3.0
    spectral_radius: float = 0.95
    b_cond_bound: float = 10.0
    b_column_scales: tuple[float, ...] | None = None

    def __post_init__(self):
        if not (self.obs_dim >= self.latent_dim >= self.action_dim >= 1):
            raise ValueError("need obs_dim >= latent_dim >= action_dim >= 1")
        if self.lift_kind == GRAPH_LIFT and self.obs_dim != 2 * self.latent_dim:
            raise ValueError(
                f"graph-manifold lift needs obs_dim = 2*latent_dim "
                f"= {2 * self.latent_dim}, got {self.obs_dim}")
        if self.horizon < 1 or self.arena_radius <= 0:
            raise ValueError("horizon and arena_radius must be positive")


@dataclass(frozen=True)
class LatentMdp:
    a_mat: Array
    b_mat: Array
    noise_cov: Array
    lift: object
    horizon: int
    arena_radius: float
    seed: int = 0
    spec: MdpSpec | None = None
    b_pinv: Array = field(init=False, repr=False)
    noise_chol: Array = field(init=False, repr=False)

    def __post_init__(self):
        a = np.asarray(self.a_mat, dtype=float)
        b = np.asarray(self.b_mat, dtype=float)
        sig = np.asarray(self.noise_cov, dtype=float)
        ell, k = b.shape
        if a.shape != (ell, ell) or sig.shape != (ell, ell):
            raise ValueError("A and noise_cov must be latent_dim square")
        if np.linalg.matrix_rank(b) < k:
            raise ValueError("B must have full column rank")
        if not np.allclose(sig, sig.T, atol=1e-12):
            raise ValueError("noise_cov must be symmetric")
        eigs = np.linalg.eigvalsh(sig)
        if eigs.min() < -1e-12:
            raise ValueError("noise_cov must be PSD")
        if max(abs(np.linalg.eigvals(a))) > 1.0 + 1e-9:
            raise ValueError("spectral radius of A must be <= 1")
        object.__setattr__(self, "a_mat", a)
        object.__setattr__(self, "b_mat", b)
        object.__setattr__(self, "noise_cov", sig)
        object.__setattr__(self, "b_pinv", np.linalg.pinv(b))
        if eigs.max() <= 0.0:
            chol = np.zeros_like(sig)
        else:
            w, vecs = np.linalg.eigh(sig)
            chol = vecs @ np.diag(np.sqrt(np.clip(w, 0.0, None)))
        object.__setattr__(self, "noise_chol", chol)
        # lift must round-trip on the reachable set
        probe = np.random.default_rng(12345).uniform(
            -self.arena_radius / math.sqrt(ell), self.arena_radius / math.sqrt(ell),
            size=(16, ell))
        err = np.abs(self.lift.encode(self.lift.decode(probe)) - probe).max()
        if err > 1e-9:
            raise ValueError(f"lift round-trip error {err:.2e} exceeds 1e-9")

    @property
    def latent_dim(self) -> int:
        return self.b_mat.shape[0]

    @property
    def action_dim(self) -> int:
        return self.b_mat.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.lift.obs_dim


def _draw_lift(spec: MdpSpec, rng: np.random.Generator):
    if spec.lift_kind == LINEAR_LIFT:
        g = rng.normal(size=(spec.obs_dim, spec.latent_dim))
        q, r = np.linalg.qr(g)
        return LinearLift(q * np.sign(np.diag(r)))
    if spec.lift_kind == GRAPH_LIFT:
        return GraphManifoldLift(spec.latent_dim, spec.omega)
    if spec.lift_kind == COUPLING_LIFT:
        g = rng.normal(size=(spec.obs_dim, spec.latent_dim))
        q, r = np.linalg.qr(g)
        return CouplingLift(q * np.sign(np.diag(r)), rng)
    raise ValueError(f"unknown lift kind {spec.lift_kind!r}")


def make_mdp(spec: MdpSpec, seed: int) -> LatentMdp:
    """Draw an MDP deterministically from (spec, seed).

    A is a symmetrized Gaussian rescaled to the requested spectral radius
    (symmetric keeps the PD expert's closed loop contractive for any
    spectrum); B starts from orthonormal columns, optionally rescaled
    per column, and is redrawn if its condition number lands beyond the
    configured bound.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0EBF]))
    ell, k = spec.latent_dim, spec.action_dim

    g = rng.normal(size=(ell, ell))
    a = 0.5 * (g + g.T)
    rho = max(abs(np.linalg.eigvalsh(a)))
    a = a * (spec.spectral_radius / rho)

    b = None
    for _ in range(100):
        gb = rng.normal(size=(ell, k))
        qb, rb = np.linalg.qr(gb)
        cand = qb * np.sign(np.diag(rb))
        if spec.b_column_scales is not None:
            if len(spec.b_column_scales) != k:
                raise ValueError("b_column_scales length must equal action_dim")
            cand = cand * np.asarray(spec.b_column_scales, dtype=float)
        if np.linalg.cond(cand) <= spec.b_cond_bound:
            b = cand
            break
    if b is None:
        raise DegenerateSpecError(
            f"could not draw B with condition number <= {spec.b_cond_bound} "
            f"in 100 attempts")

    lift = _draw_lift(spec, rng)
    sigma = (spec.noise_std ** 2) * np.eye(ell)
    return LatentMdp(a_mat=a, b_mat=b, noise_cov=sigma, lift=lift,
                     horizon=spec.horizon, arena_radius=spec.arena_radius,
                     seed=seed, spec=spec)


# ---------------------------------------------------------------------------
# contexts

@dataclass(frozen=True)
class Context:
    kind: str
    inferrable: bool = False
    goal: Array | None = None
    discrete_id: int | None = None
    rotation: Array | None = None

    def __post_init__(self):
        if self.kind not in (GOAL, DISCRETE, ROTATION):
            raise ValueError(f"unknown context kind {self.kind!r}")
        if self.kind in (GOAL, DISCRETE):
            if self.goal is None:
                raise ValueError("goal contexts need a goal vector")
            object.__setattr__(self, "goal",
                               np.asarray(self.goal, dtype=float))
        if self.kind == ROTATION:
            r = np.asarray(self.rotation, dtype=float)
            if not np.allclose(r.T @ r, np.eye(r.shape[0]), atol=1e-9):
                raise ValueError("rotation must be orthogonal")
            if abs(np.linalg.det(r) - 1.0) > 1e-9:
                raise ValueError("rotation must have determinant +1")
            object.__setattr__(self, "rotation", r)

    def tag(self) -> str:
        """Opaque bookkeeping identifier; never shown to learners."""
        if self.kind == DISCRETE:
            return f"discrete:{self.discrete_id}"
        if self.kind == GOAL:
            return "goal:" + ",".join(f"{v:.12g}" for v in self.goal)
        return "rotation:" + ",".join(f"{v:.12g}" for v in self.rotation.ravel())


@dataclass(frozen=True)
class ContextSpec:
    kind: str = GOAL
    inferrable: bool = False
    n_discrete: int = 0
    allowed_ids: tuple[int, ...] | None = None
    goal_fraction: float = 0.8       # goal norm cap as fraction of the arena
    hold_margin: float = 0.5         # cap on the action needed to hold a goal

    def __post_init__(self):
        if self.kind == DISCRETE and self.n_discrete < 1:
            raise ValueError("discrete contexts need n_discrete >= 1")
        if self.allowed_ids is not None and len(self.allowed_ids) == 0:
            raise ValueError("context spec excludes every context")


def haar_rotation(k: int, rng: np.random.Generator) -> Array:
    """Haar-uniform rotation in SO(k) via sign-corrected QR."""
    g = rng.normal(size=(k, k))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q = q.copy()
        q[:, 0] = -q[:, 0]
    return q


def _achievable_goal(mdp: LatentMdp, raw: Array, goal_cap: float,
                     hold_margin: float) -> Array:
    """Map a raw k-vector to a goal the PD expert can reach and hold.

    Goals g = (I - A)^-1 B u are exactly the states whose holding action
    lies in the actuation range, so the closed loop settles on g with no
    steady-state offset. Scaling keeps g in the arena and the holding
    action well inside the clip box.
    """
    ell = mdp.latent_dim
    fix = np.linalg.solve(np.eye(ell) - mdp.a_mat, mdp.b_mat @ raw)
    norm = np.linalg.norm(fix)
    if norm > goal_cap:
        fix = fix * (goal_cap / norm)
    hold = mdp.b_pinv @ (np.eye(ell) - mdp.a_mat) @ fix
    peak = np.abs(hold).max()
    if peak > hold_margin:
        fix = fix * (hold_margin / peak)
    return fix


def goal_table(mdp: LatentMdp, spec: ContextSpec) -> Array:
    """Deterministic per-MDP table of discrete-context goals."""
    rng = np.random.default_rng(np.random.SeedSequence([mdp.seed, 0x90A1]))
    cap = spec.goal_fraction * mdp.arena_radius
    rows = []
    for _ in range(spec.n_discrete):
        raw = rng.uniform(-1.0, 1.0, size=mdp.action_dim)
        rows.append(_achievable_goal(mdp, raw, cap, spec.hold_margin))
    return np.stack(rows)


def sample_context(mdp: LatentMdp, spec: ContextSpec,
                   rng: np.random.Generator, index: int = 0) -> Context:
    """Draw one context; discrete contexts round-robin over allowed ids."""
    if spec.kind == GOAL:
        raw = rng.uniform(-1.0, 1.0, size=mdp.action_dim)
        goal = _achievable_goal(mdp, raw, spec.goal_fraction * mdp.arena_radius,
                                spec.hold_margin)
        return Context(kind=GOAL, inferrable=spec.inferrable, goal=goal)
    if spec.kind == DISCRETE:
        ids = (tuple(range(spec.n_discrete)) if spec.allowed_ids is None
               else spec.allowed_ids)
        cid = ids[index % len(ids)]
        table = goal_table(mdp, spec)
        return Context(kind=DISCRETE, inferrable=spec.inferrable,
                       goal=table[cid], discrete_id=cid)
    if spec.kind == ROTATION:
        return Context(kind=ROTATION, inferrable=spec.inferrable,
                       rotation=haar_rotation(mdp.action_dim, rng))
    raise ValueError(f"unknown context kind {spec.kind!r}")


def initial_latent(mdp: LatentMdp, c: Context, rng: np.random.Generator) -> Array:
    """Draw s0 from rho_c: a fixed ball, shifted toward the goal when the
    context is inferrable (for rotation contexts: uniform on the sphere)."""
    if c.kind == ROTATION:
        v = rng.normal(size=mdp.latent_dim)
        return v / np.linalg.norm(v)
    radius = 0.3 * mdp.arena_radius
    v = rng.normal(size=mdp.latent_dim)
    u = rng.random() ** (1.0 / mdp.latent_dim)
    point = radius * u * v / np.linalg.norm(v)
    if c.inferrable:
        point = point + 0.5 * c.goal
    return point


# ---------------------------------------------------------------------------
# policies

@dataclass(frozen=True)
class ExpertPolicy:
    family: str = PD_TO_GOAL
    k_p: float = 1.0
    k_d: float = 1.0
    action_clip: float = 1.0

    def __post_init__(self):
        if self.family not in (PD_TO_GOAL, ROTATION_LINEAR, RANDOM_UNIFORM):
            raise ValueError(f"unknown policy family {self.family!r}")


def expert_action(mdp: LatentMdp, policy: ExpertPolicy, c: Context,
                  s: Array, rng: np.random.Generator | None = None) -> Array:
    """Demonstrator action from the latent state (experts see the context).

    pd-to-goal: clip(k_p * Bpinv (g - s) - k_d * Bpinv (A - I) s); with the
    default k_p = k_d = 1 this is the one-step-optimal clip(Bpinv (g - A s)).
    rotation-linear: R s / ||s||, exact and deterministic.
    random-uniform: uniform over the clip box (needs rng).
    """
    s = np.asarray(s, dtype=float)
    clip = policy.action_clip
    if policy.family == RANDOM_UNIFORM:
        if rng is None:
            raise ValueError("random-uniform policy needs an rng")
        return rng.uniform(-clip, clip, size=mdp.action_dim)
    if policy.family == PD_TO_GOAL:
        if c.kind not in (GOAL, DISCRETE):
            raise ValueError("pd-to-goal needs a goal-bearing context")
        drift = (mdp.a_mat - np.eye(mdp.latent_dim)) @ s
        a = policy.k_p * (mdp.b_pinv @ (c.goal - s)) - policy.k_d * (mdp.b_pinv @ drift)
        return np.clip(a, -clip, clip)
    if policy.family == ROTATION_LINEAR:
        if c.kind != ROTATION:
            raise ValueError("rotation-linear needs a rotation context")
        norm = np.linalg.norm(s)
        if norm == 0.0:
            raise ValueError("rotation-linear action undefined at s = 0")
        return c.rotation @ (s / norm)
    raise ValueError(f"unknown policy family {policy.family!r}")


# ---------------------------------------------------------------------------
# dynamics

def step(mdp: LatentMdp, s: Array, a: Array,
         rng: np.random.Generator | None = None,
         action_clip: float = 1.0):
    """One transition: s' = A s + B a + eps, radially projected into the
    arena; returns (s', o')."""
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
        raise ValueError("non-finite state or action")
    if np.abs(a).max() > action_clip + 1e-9:
        raise ValueError(f"action outside clip box (|a| up to {np.abs(a).max():.3g})")
    s_next = mdp.a_mat @ s + mdp.b_mat @ a
    if rng is not None and mdp.noise_chol.any():
        s_next = s_next + mdp.noise_chol @ rng.normal(size=mdp.latent_dim)
    norm = np.linalg.norm(s_next)
    if norm > mdp.arena_radius:
        s_next = s_next * (mdp.arena_radius / norm)
    obs = mdp.lift.decode(s_next[None, :])[0]
    return s_next, obs


def true_encode(mdp: LatentMdp, obs: Array) -> Array:
    """Ground-truth encoder; rejects observations off the lift manifold."""
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    obs2 = np.atleast_2d(obs)
    resid = manifold_residual(mdp.lift, obs2)
    if resid.max() > MANIFOLD_TOL:
        raise OffManifoldError(
            f"observation off manifold (residual {resid.max():.3e})")
    s = mdp.lift.encode(obs2)
    return s[0] if single else s


# ---------------------------------------------------------------------------
# rollouts

@dataclass(frozen=True)
class EvaluationSpec:
    success_radius: float
    episodes: int = 100
    max_steps: int = 50

    def __post_init__(self):
        if self.success_radius <= 0 or self.episodes < 1 or self.max_steps < 1:
            raise ValueError("invalid evaluation spec")


def default_eval_spec(mdp: LatentMdp, episodes: int = 100) -> EvaluationSpec:
    return EvaluationSpec(success_radius=0.1 * mdp.arena_radius,
                          episodes=episodes, max_steps=mdp.horizon)


@dataclass(frozen=True)
class RolloutResult:
    observations: Array     # (T+1, d)
    actions: Array          # (T, k)
    latents: Array          # (T+1, ell)
    success: bool


def _policy_action(mdp, policy, c, s, o, rng):
    if isinstance(policy, ExpertPolicy):
        return expert_action(mdp, policy, c, s, rng=rng)
    return np.asarray(policy.action(o), dtype=float)


def rollout(mdp: LatentMdp, policy, c: Context, eval_spec: EvaluationSpec,
            rng: np.random.Generator, s0: Array | None = None) -> RolloutResult:
    """Run one episode. policy is either an ExpertPolicy (acts on the
    latent state) or any object with .action(obs) (acts on observations).

    Success: goal contexts succeed if the latent state passes within
    success_radius of the goal at any step; rotation contexts succeed if
    the terminal direction aligns (cosine >= 0.95) with the direction a
    reference expert reaches from the same start under noiseless dynamics.
    """
    if s0 is None:
        s = initial_latent(mdp, c, rng)
    else:
        s = np.asarray(s0, dtype=float)
    obs = mdp.lift.decode(s[None, :])[0]
    states = [s]
    observations = [obs]
    actions = []
    success = False
    if c.kind in (GOAL, DISCRETE):
        success = bool(np.linalg.norm(s - c.goal) <= eval_spec.success_radius)
    for _ in range(eval_spec.max_steps):
        a = _policy_action(mdp, policy, c, s, obs, rng)
        s, obs = step(mdp, s, a, rng=rng)
        states.append(s)
        observations.append(obs)
        actions.append(a)
        if c.kind in (GOAL, DISCRETE):
            if np.linalg.norm(s - c.goal) <= eval_spec.success_radius:
                success = True
    if c.kind == ROTATION:
        success = _rotation_success(mdp, c, states[0], s, eval_spec)
    return RolloutResult(observations=np.stack(observations),
                         actions=np.stack(actions),
                         latents=np.stack(states), success=success)


def _rotation_success(mdp, c, s0, s_final, eval_spec,
                      threshold: float = 0.95) -> bool:
    target = _rotation_reference_direction(mdp, c, s0, eval_spec.max_steps)
    norm = np.linalg.norm(s_final)
    if norm == 0.0 or target is None:
        return False
    return bool(float(np.dot(s_final / norm, target)) >= threshold)


def _rotation_reference_direction(mdp, c, s0, n_steps):
    """Terminal direction of the rotation expert from s0, noiseless."""
    expert = ExpertPolicy(family=ROTATION_LINEAR)
    s = np.asarray(s0, dtype=float)
    for _ in range(n_steps):
        a = expert_action(mdp, expert, c, s)
        s = mdp.a_mat @ s + mdp.b_mat @ a
        norm = np.linalg.norm(s)
        if norm > mdp.arena_radius:
            s = s * (mdp.arena_radius / norm)
    norm = np.linalg.norm(s)
    if norm == 0.0:
        return None
    return s / norm
