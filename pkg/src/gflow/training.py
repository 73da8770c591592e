"""Training steps for every strategy in the roster.

Value-based strategies (detailed balance, trajectory balance, sub-trajectory
balance) take one Adam step per parameter group on a differentiable batch
loss.  Policy-gradient strategies build per-step policy-dependent rewards,
sweep lambda advantages, and update the forward policy by a plain surrogate
step or a trust-region step; log Z descends its unbiased gradient estimate
(the batch mean of the lambda=1 root value estimates), value estimators
regress on lambda targets, and a learned backward policy trains on
backward-sampled trajectories against the forward policy or a guide.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import exact
from . import objectives as obj
from .envs import HyperGrid, SequenceEnv
from .errors import ConfigError, NumericFault
from .guides import HyperGridGuide, SequenceGuide
from .policy import make_suite, score_matrix
from .sampling import MixtureSchedule, ReplayBuffer, sample_backward, sample_forward

logger = logging.getLogger("gflow")

STRATEGIES = ("DB-U", "DB-B", "TB-U", "TB-B", "TB-Sub",
              "RL-U", "RL-B", "RL-T", "RL-G")

# Component needs per strategy: (learned backward, value_f, value_b, flow).
_NEEDS = {
    "DB-U": (False, False, False, True),
    "DB-B": (True, False, False, True),
    "TB-U": (False, False, False, False),
    "TB-B": (True, False, False, False),
    "TB-Sub": (False, False, False, True),
    "RL-U": (False, True, False, False),
    "RL-B": (True, True, True, False),
    "RL-T": (False, True, False, False),
    "RL-G": (True, True, True, False),
}


@dataclass
class TrustRegionConfig:
    """Knobs of the trust-region forward-policy step."""

    zeta: float = 0.01
    cg_iters: int = 10
    cg_tol: float = 1e-10
    damping: float = 1e-3
    backtrack: float = 0.8
    max_backtracks: int = 10


def conjugate_gradient(matvec, b, iters=10, tol=1e-10):
    """Solve A x = b for symmetric positive definite A given only x -> A x."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    for _ in range(iters):
        if np.sqrt(rs) < tol:
            break
        ap = matvec(p)
        alpha = rs / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


# ---------------------------------------------------------------------------
# Advantage assembly
# ---------------------------------------------------------------------------

def _slices(lengths):
    ends = np.cumsum(lengths)
    return [(int(e - n), int(e)) for n, e in zip(lengths, ends)]


def forward_advantages(sb, suite, lam):
    """Per-step lambda advantages of the forward chain.

    Returns (advantages, value targets at the given lambda, per-trajectory
    lambda=1 root value estimates).  The root estimates equal each
    trajectory's balance log-ratio and feed the log Z update.
    """
    if suite.value_f is not None:
        values = suite.value_f.values_numpy(sb.states)
    else:
        values = np.zeros(sb.n_steps)
    rewards = obj.forward_step_rewards(sb, suite)
    adv = np.empty(sb.n_steps)
    targets = np.empty(sb.n_steps)
    root_v1 = np.empty(sb.n_traj)
    for b, (lo, hi) in enumerate(_slices(sb.lengths)):
        a, t, _ = obj.gae_advantages(rewards[lo:hi], values[lo:hi], lam)
        adv[lo:hi] = a
        targets[lo:hi] = t
        if lam == 1.0:
            root_v1[b] = t[0]
        else:
            root_v1[b] = obj.gae_advantages(rewards[lo:hi], values[lo:hi], 1.0)[1][0]
    return adv, targets, root_v1


def backward_advantages(sb, suite, ref_int, lam, target_lam=1.0):
    """Advantages of the backward chain over interior edges.

    The sweep runs x -> root (reversed interior order) with the root value
    pinned to 0; outputs are re-aligned with the forward-order interior
    arrays.  Value targets default to the unbiased lambda=1 estimates.
    """
    values = suite.value_b.values_numpy(sb.in_states) if sb.in_states else np.zeros(0)
    rewards = obj.backward_step_rewards(sb, suite, ref_int)
    adv = np.empty_like(rewards)
    targets = np.empty_like(rewards)
    for lo, hi in _slices(sb.lengths - 1):
        if hi == lo:
            continue
        r_rev = rewards[lo:hi][::-1]
        v_rev = values[lo:hi][::-1]
        a, t, _ = obj.gae_advantages(r_rev, v_rev, lam)
        adv[lo:hi] = a[::-1]
        if target_lam == lam:
            targets[lo:hi] = t[::-1]
        else:
            targets[lo:hi] = obj.gae_advantages(r_rev, v_rev, target_lam)[1][::-1]
    return adv, targets


def surrogate_loss(tape, policy, states, slots, adv, n_traj):
    """(1/B) sum over steps of stopgrad(advantage) * log pi(slot | state)."""
    lp = policy.step_log_probs(tape, states, slots)
    weighted = ad.mul(tape, lp, ad.Tensor(np.asarray(adv)))
    return ad.scale(tape, ad.sum(tape, weighted), 1.0 / n_traj)


def surrogate_gradient(suite, trajectories, lam, weights=None):
    """Flat gradient of the forward surrogate over a trajectory set.

    `weights` (one per trajectory) replaces the batch mean with a weighted
    sum, which computes exact expectations over enumerated trajectories.
    """
    sb = obj.step_batch(trajectories)
    adv, _, _ = forward_advantages(sb, suite, lam)
    params = suite.forward.params()
    tape = ad.Tape()
    if weights is None:
        loss = surrogate_loss(tape, suite.forward, sb.states, sb.slots, adv, sb.n_traj)
    else:
        w = np.asarray(weights, dtype=np.float64)[sb.traj]
        lp = suite.forward.step_log_probs(tape, sb.states, sb.slots)
        loss = ad.sum(tape, ad.mul(tape, lp, ad.Tensor(adv * w)))
    ad.zero_grads(params)
    tape.backward(loss)
    return ad.flat_grad(params)


def _value_step(estimator, states, targets, optimizer, n_traj):
    tape = ad.Tape()
    v = estimator.values(tape, states)
    resid = ad.sub(tape, v, ad.Tensor(np.asarray(targets)))
    loss = ad.scale(tape, ad.sum(tape, ad.square(tape, resid)), 1.0 / n_traj)
    if not np.isfinite(loss.data):
        raise NumericFault("non-finite value regression loss")
    params = estimator.params()
    ad.zero_grads(params)
    tape.backward(loss)
    optimizer.step()
    return float(loss.data)


def _logz_step(suite, root_v1, optimizer):
    suite.log_z.value.grad = np.array([float(np.mean(root_v1))])
    optimizer.step()


# ---------------------------------------------------------------------------
# Strategy steps
# ---------------------------------------------------------------------------

def balance_step(suite, trajectories, optimizers, loss_fn, **kwargs):
    """One Adam step of every parameter group on a balance loss."""
    tape = ad.Tape()
    loss = loss_fn(tape, trajectories, suite, **kwargs)
    if not np.isfinite(loss.data):
        raise NumericFault("non-finite balance loss")
    params = suite.all_params()
    ad.zero_grads(params)
    tape.backward(loss)
    for opt in optimizers.values():
        opt.step()
    return {"loss": float(loss.data)}


def _policy_b_update(suite, xs, optimizers, lam, rng, guide=None):
    """Backward-policy step on trajectories sampled from P_B given xs.

    The per-step reward is log pi_B minus the forward policy's edge log-prob
    (standard) or the guide kernel's (guided).
    """
    trajs = sample_backward(suite.env, suite.backward, xs, rng)
    sb = obj.step_batch(trajs)
    if not sb.in_states:
        return {"backward_loss": 0.0, "backward_value_loss": 0.0}
    interior = ~sb.terminal
    if guide is None:
        src = [sb.states[i] for i in np.flatnonzero(interior)]
        lp = suite.forward.log_probs_numpy(src)
        ref = lp[np.arange(len(src)), sb.slots[interior]]
    else:
        ref = np.concatenate([guide.edge_log_probs(tr) for tr in trajs])
    adv, targets = backward_advantages(sb, suite, ref, lam)
    tape = ad.Tape()
    loss = surrogate_loss(tape, suite.backward, sb.in_states, sb.in_bslots,
                          adv, sb.n_traj)
    if not np.isfinite(loss.data):
        raise NumericFault("non-finite backward surrogate")
    params = suite.backward.params()
    ad.zero_grads(params)
    tape.backward(loss)
    optimizers["policy_b"].step()
    vloss = _value_step(suite.value_b, sb.in_states, targets,
                        optimizers["value_b"], sb.n_traj)
    return {"backward_loss": float(loss.data), "backward_value_loss": vloss}


def actor_critic_step(suite, trajectories, optimizers, lam=0.99, rng=None,
                      guide=None):
    """Policy-gradient step: forward surrogate, log Z, value regression, and
    (when the backward policy is learned) the mirrored backward update."""
    sb = obj.step_batch(trajectories)
    adv, targets, root_v1 = forward_advantages(sb, suite, lam)
    tape = ad.Tape()
    loss = surrogate_loss(tape, suite.forward, sb.states, sb.slots, adv, sb.n_traj)
    if not np.isfinite(loss.data):
        raise NumericFault("non-finite policy surrogate")
    params = suite.forward.params()
    ad.zero_grads(params)
    tape.backward(loss)
    optimizers["policy_f"].step()
    _logz_step(suite, root_v1, optimizers["log_z"])
    vloss = _value_step(suite.value_f, sb.states, targets,
                        optimizers["value_f"], sb.n_traj)
    stats = {"loss": float(np.mean(root_v1 ** 2)), "surrogate": float(loss.data),
             "value_loss": vloss, "accepted": True}
    if "policy_b" in optimizers:
        if rng is None:
            raise ConfigError("learned backward policy updates need an rng")
        xs = [tr.x for tr in trajectories]
        stats.update(_policy_b_update(suite, xs, optimizers, lam, rng, guide=guide))
    return stats


def _batch_kl(old_log, new_log, masks):
    """Mean over batch states of KL(old || new) across valid slots."""
    p = np.where(masks, np.exp(old_log), 0.0)
    valid = masks & (p > 0)
    diff = np.zeros_like(p)
    diff[valid] = old_log[valid] - new_log[valid]
    return float((p * diff).sum(axis=1).mean())


def trpo_step(suite, trajectories, optimizers, cfg=None, lam=0.99):
    """Trust-region forward-policy step; log Z and values as the plain step.

    The step direction solves F x = g by conjugate gradients with F the
    damped empirical Fisher of the batch scores, scaled to the KL budget and
    backtracked until the batch KL stays inside it and the surrogate
    improves.  An exhausted search restores the old parameters.
    """
    cfg = cfg or TrustRegionConfig()
    sb = obj.step_batch(trajectories)
    adv, targets, root_v1 = forward_advantages(sb, suite, lam)
    params = suite.forward.params()
    old = ad.flatten(params).copy()
    masks = suite.forward.masks(sb.states)
    old_log = suite.forward.log_probs_numpy(sb.states, masks)

    tape = ad.Tape()
    loss = surrogate_loss(tape, suite.forward, sb.states, sb.slots, adv, sb.n_traj)
    surr0 = float(loss.data)
    if not np.isfinite(surr0):
        raise NumericFault("non-finite policy surrogate")
    ad.zero_grads(params)
    tape.backward(loss)
    g = ad.flat_grad(params)

    stats = {"loss": float(np.mean(root_v1 ** 2)), "surrogate": surr0,
             "accepted": False, "kl": 0.0, "step_scale": 0.0}
    direction_ok = bool(np.any(g))
    if direction_ok:
        scores = score_matrix(suite.forward, sb.states, sb.slots)
        m = scores.shape[0]

        def matvec(v):
            return scores.T @ (scores @ v) / m + cfg.damping * v

        x = conjugate_gradient(matvec, g, cfg.cg_iters, cfg.cg_tol)
        gx = float(g @ x)
        if not np.all(np.isfinite(x)):
            logger.warning("conjugate gradient produced non-finite direction; "
                           "skipping policy update")
            direction_ok = False
        elif gx <= 0.0:
            direction_ok = False
    if direction_ok:
        full = -np.sqrt(2.0 * cfg.zeta / gx) * x
        scale = 1.0
        for _ in range(cfg.max_backtracks + 1):
            ad.assign_flat(params, old + scale * full)
            new_log = suite.forward.log_probs_numpy(sb.states, masks)
            kl = _batch_kl(old_log, new_log, masks)
            chosen = new_log[np.arange(sb.n_steps), sb.slots]
            new_surr = float((chosen * adv).sum() / sb.n_traj)
            if kl <= cfg.zeta and new_surr < surr0:
                stats.update(accepted=True, kl=kl, step_scale=scale,
                             surrogate=new_surr)
                break
            scale *= cfg.backtrack
        if not stats["accepted"]:
            ad.assign_flat(params, old)
    _logz_step(suite, root_v1, optimizers["log_z"])
    vloss = _value_step(suite.value_f, sb.states, targets,
                        optimizers["value_f"], sb.n_traj)
    stats["value_loss"] = vloss
    return stats


def guided_coupled_step(suite, trajectories, optimizers, guide, lam=0.99,
                        rng=None):
    """Coupled training round: forward policy-gradient update first, then the
    backward policy trained toward the guide on trajectories resampled
    backward from the forward batch's terminating states."""
    return actor_critic_step(suite, trajectories, optimizers, lam=lam, rng=rng,
                             guide=guide)


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainerConfig:
    strategy: str = "TB-U"
    batch_size: int = 128
    lam: float = 0.99
    gamma: float = 0.99
    zeta: float = 0.01
    lr_policy: float = 1e-3
    lr_value: float = 5e-3
    lr_logz: float = 0.1
    subtb_base: float = 0.9
    hidden: tuple = (64, 64)
    tabular: bool = False
    guide_eps: float = 1e-5
    buffer_factor: int = 10
    extra: dict = field(default_factory=dict)


_LR_BY_GROUP = {"policy_f": "lr_policy", "policy_b": "lr_policy",
                "log_z": "lr_logz", "value_f": "lr_value",
                "value_b": "lr_value", "flow": "lr_value"}


def default_guide(env, cfg):
    if isinstance(env, HyperGrid):
        return HyperGridGuide(env, eps=cfg.guide_eps)
    if isinstance(env, SequenceEnv):
        return SequenceGuide(env, ReplayBuffer(cfg.buffer_factor * cfg.batch_size))
    raise ConfigError(f"no guided backward kernel defined for {type(env).__name__}")


class Trainer:
    """One training strategy bound to an environment and a policy suite.

    step(rng) runs one iteration: sample a batch, apply the strategy's
    update, return a stats dict whose "loss" entry is the balance loss for
    value-based strategies and the batch mean squared balance log-ratio for
    policy-gradient ones.
    """

    def __init__(self, env, cfg, rng, suite=None, guide=None):
        if cfg.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {cfg.strategy!r}; "
                              f"choose from {', '.join(STRATEGIES)}")
        if cfg.strategy == "TB-Sub" and not env.graded:
            raise ConfigError("TB-Sub needs a graded environment "
                              "(equal-length trajectories)")
        self.env = env
        self.cfg = cfg
        learned_b, need_vf, need_vb, need_flow = _NEEDS[cfg.strategy]
        if suite is None:
            suite = make_suite(env, rng, tabular=cfg.tabular, hidden=cfg.hidden,
                               learned_backward=learned_b, need_value_f=need_vf,
                               need_value_b=need_vb, need_flow=need_flow)
        self.suite = suite
        self.optimizers = {
            name: ad.Adam(params, getattr(cfg, _LR_BY_GROUP[name]))
            for name, params in suite.param_groups().items()
        }
        self.guide = guide
        if cfg.strategy == "RL-G" and self.guide is None:
            self.guide = default_guide(env, cfg)
        self.value_based = cfg.strategy.startswith(("TB", "DB"))
        self.mixture = MixtureSchedule(cfg.gamma) if self.value_based else None
        self.trust = TrustRegionConfig(zeta=cfg.zeta) if cfg.strategy == "RL-T" else None
        self.iteration = 0

    def step(self, rng):
        cfg = self.cfg
        eps = self.mixture.eps(self.iteration) if self.mixture else 0.0
        batch = sample_forward(self.env, self.suite.forward, self.suite.backward,
                               cfg.batch_size, rng, eps=eps)
        if self.guide is not None:
            if isinstance(self.guide, SequenceGuide):
                self.guide.buffer.update(batch)
            self.guide.refresh(self.suite.forward)
        name = cfg.strategy
        if name in ("TB-U", "TB-B"):
            stats = balance_step(self.suite, batch, self.optimizers, obj.tb_loss)
        elif name in ("DB-U", "DB-B"):
            stats = balance_step(self.suite, batch, self.optimizers, obj.db_loss)
        elif name == "TB-Sub":
            stats = balance_step(self.suite, batch, self.optimizers,
                                 obj.subtb_loss, weight_base=cfg.subtb_base)
        elif name in ("RL-U", "RL-B"):
            stats = actor_critic_step(self.suite, batch, self.optimizers,
                                      lam=cfg.lam, rng=rng)
        elif name == "RL-T":
            stats = trpo_step(self.suite, batch, self.optimizers,
                              cfg=self.trust, lam=cfg.lam)
        else:  # RL-G
            stats = guided_coupled_step(self.suite, batch, self.optimizers,
                                        self.guide, lam=cfg.lam, rng=rng)
        self.iteration += 1
        stats["batch"] = batch
        return stats


# ---------------------------------------------------------------------------
# Exact bound checks
# ---------------------------------------------------------------------------

def _forward_table(env, forward):
    if isinstance(forward, np.ndarray):
        return forward
    return exact.forward_log_table(env.enumeration(), forward)


def _backward_table(env, backward):
    if isinstance(backward, np.ndarray):
        return backward
    return exact.backward_log_table(env.enumeration(), backward)


def _guide_table(guide):
    if isinstance(guide, np.ndarray):
        return guide
    return guide.backward_kernel()


def check_theorem_bounds(env, forward, backward, log_z, guide,
                         forward_alt=None, tol=1e-9):
    """Exact verification of the coupling and performance-difference bounds.

    Bound 1: the guided objective J_F^G is at most J_F + J_B^G plus a slack
    proportional to the largest guided backward reward magnitude and the
    square root of half the balance divergence J_F + log Z* - log Z.

    Bound 2 (when a second forward policy is supplied): the per-step change
    of J_F is at most the old-distribution expectation of the new policy's
    advantages plus zeta + eps_F * sqrt(2 zeta), where zeta is the
    accumulated-distribution KL between new and old policies.

    Policies may be dense log tables or policy objects.  Returns a report
    dict with both sides and a boolean per bound.
    """
    enum = env.enumeration()
    fwd_log = _forward_table(env, forward)
    bwd_log = _backward_table(env, backward)
    g_table = _guide_table(guide)
    log_z = float(log_z)
    log_z_star = float(np.log(enum.partition()))

    ref_b = exact.edge_logs_backward(enum, bwd_log)
    ref_g = exact.edge_logs_backward(enum, g_table)
    t_len = len(enum.layers)

    j_f = exact.forward_values(enum, fwd_log, ref_b, log_z)[0][enum.root_index]
    j_fg = exact.forward_values(enum, fwd_log, ref_g, log_z)[0][enum.root_index]
    pt = exact.terminating_distribution(enum, fwd_log)
    v_bg = exact.backward_values(enum, bwd_log, ref_g)[0]
    j_bg = float(pt @ v_bg)
    r_max = float(np.max(np.abs(ref_b - ref_g))) if ref_b.size else 0.0
    kl_mu = max(j_f + log_z_star - log_z, 0.0)
    slack = (t_len - 1) * r_max * np.sqrt(kl_mu / 2.0)
    rhs1 = j_f + j_bg + slack
    report = {
        "theorem1": {
            "lhs": float(j_fg), "rhs": float(rhs1), "holds": bool(j_fg <= rhs1 + tol),
            "j_f": float(j_f), "j_b_g": float(j_bg), "r_max": r_max,
            "kl_mu": float(kl_mu), "slack": float(slack),
        },
    }
    if forward_alt is None:
        return report

    alt_log = _forward_table(env, forward_alt)
    masks = enum.action_masks()
    d_old = exact.accumulated_distribution(enum, fwd_log)
    d_new = exact.accumulated_distribution(enum, alt_log)
    zeta = exact.policy_kl(alt_log, fwd_log, d_new, masks)
    v, q = exact.forward_values(enum, fwd_log, ref_b, log_z)
    a = exact.advantages(v, q, masks)
    pi_new = np.where(masks, np.exp(alt_log), 0.0)
    ea_new = (pi_new * a).sum(axis=1)
    expected = float(d_old @ ea_new)
    eps_f = float(np.abs(ea_new).max())
    j_new = exact.forward_values(enum, alt_log, ref_b, log_z)[0][enum.root_index]
    lhs2 = (j_new - j_f) / t_len
    rhs2 = expected + zeta + eps_f * np.sqrt(2.0 * zeta)
    report["theorem2"] = {
        "lhs": float(lhs2), "rhs": float(rhs2), "holds": bool(lhs2 <= rhs2 + tol),
        "zeta": float(zeta), "eps_f": eps_f, "expected_advantage": expected,
        "j_f": float(j_f), "j_f_new": float(j_new),
    }
    return report
