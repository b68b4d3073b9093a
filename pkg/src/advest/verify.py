"""Release gate: named identity and oracle checks grouped into suites.

Each check takes a :class:`VerifyContext` and returns ``(passed, detail)``.
The context carries the GAE recursion under test so a deliberately broken
implementation can be swapped in to confirm the checks catch it.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from advest import estimators
from advest.estimators import BootstrapMode, EstimatorParams
from advest.nn import CategoricalPolicy, GaussianPolicy, Mlp, gradient_check
from advest.oracle import (TabularPolicy, chain_mdp, deterministic_chain, exact_advantage, exact_state_values)
from advest.ppo import Minibatch, TrainerConfig, loss_and_grads
from advest.trajectory import Segment, Transition, split_partial

GAMMAS = (0.5, 0.9, 0.99)
LAMBDAS = (0.0, 0.5, 0.95)


@dataclass
class VerifyContext:
    gae_fn: Callable = estimators.gae_truncated
    n_cases: int = 1000
    seed: int = 0


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float


CHECKS: Dict[str, List[Tuple[str, Callable]]] = {}


def check(suite: str):
    def register(fn):
        CHECKS.setdefault(suite, []).append((fn.__name__, fn))
        return fn
    return register


def _param_grid():
    return [EstimatorParams(g, l, mode) for (g, l), mode in
            itertools.product(itertools.product(GAMMAS, LAMBDAS), BootstrapMode)]


def segment_corpus(n: int, seed: int, max_len: int = 64, p_done: float = 0.05):
    """Random segments with rewards and values in [-1, 1], cycling over the (gamma, lambda, mode) grid."""
    rng = np.random.default_rng(seed)
    grid = _param_grid()
    for i in range(n):
        size = int(rng.integers(1, max_len + 1))
        yield (rng.uniform(-1, 1, size), rng.uniform(-1, 1, size), rng.random(size) < p_done,
               float(rng.uniform(-1, 1)), grid[i % len(grid)])


def trajectory_corpus(n: int, seed: int, max_len: int = 64):
    """Random terminated episodes ``(rewards, values, horizon, params)`` with ``horizon < D``."""
    rng = np.random.default_rng(seed)
    grid = _param_grid()
    for i in range(n):
        size = int(rng.integers(2, max_len + 1))
        horizon = int(rng.integers(1, size))
        yield rng.uniform(-1, 1, size), rng.uniform(-1, 1, size), horizon, grid[i % len(grid)]


# -- estimators --------------------------------------------------------------

@check("estimators")
def recursion_vs_direct_sum(ctx: VerifyContext):
    worst = 0.0
    for r, v, d, boot, p in segment_corpus(ctx.n_cases, ctx.seed):
        got = ctx.gae_fn(r, v, d, p, boot)
        worst = max(worst, float(np.max(np.abs(got - estimators.gae_direct_sum(r, v, d, p, boot)))))
    return worst <= 1e-10, f"max abs diff {worst:.2e} (tol 1e-10)"


@check("estimators")
def recursion_vs_exponential_form(ctx: VerifyContext):
    worst = 0.0
    for r, v, d, boot, p in segment_corpus(ctx.n_cases, ctx.seed + 1):
        got = ctx.gae_fn(r, v, d, p, boot)
        expo = [estimators.gae_exponential_form(r, v, d, t, p, boot) for t in range(r.size)]
        worst = max(worst, float(np.max(np.abs(got - expo))))
    return worst <= 1e-8, f"max abs diff {worst:.2e} (tol 1e-8)"


@check("estimators")
def decomposition_identity(ctx: VerifyContext):
    worst = 0.0
    for r, v, d, boot, p in segment_corpus(ctx.n_cases, ctx.seed + 2):
        rp, vp = estimators.decompose(r, v, d, p, boot)
        worst = max(worst, float(np.max(np.abs(rp + vp - ctx.gae_fn(r, v, d, p, boot)))))
    return worst <= 1e-10, f"max abs diff {worst:.2e} (tol 1e-10)"


# -- bias --------------------------------------------------------------------

@check("bias")
def bias_identity(ctx: VerifyContext):
    """B_t = (gamma*lam)^(T-t) B_T, and B_t equals complete minus truncated GAE."""
    worst_rel = worst_abs = 0.0
    for r, v, horizon, p in trajectory_corpus(ctx.n_cases, ctx.seed + 3):
        size = r.size
        terminal = np.zeros(size, dtype=bool)
        terminal[-1] = True
        complete = ctx.gae_fn(r, v, terminal, p, 0.0)
        truncated = ctx.gae_fn(r[:horizon], v[:horizon], np.zeros(horizon, bool), p, float(v[horizon]))
        b = np.array([estimators.bias_term(r, v, t, horizon, p) for t in range(horizon)])
        expected = p.decay ** (horizon - 1 - np.arange(horizon)) * b[-1]
        scale = np.maximum(np.abs(b), np.abs(expected))
        nz = scale > 0
        if nz.any():
            worst_rel = max(worst_rel, float(np.max(np.abs(b - expected)[nz] / scale[nz])))
        worst_abs = max(worst_abs, float(np.max(np.abs(complete[:horizon] - truncated - b))))
    ok = worst_rel <= 1e-12 and worst_abs <= 1e-10
    return ok, f"decay identity rel {worst_rel:.2e} (tol 1e-12); complete-truncated abs {worst_abs:.2e} (tol 1e-10)"


# -- nn ----------------------------------------------------------------------

@check("nn")
def mlp_gradient(ctx: VerifyContext):
    rng = np.random.default_rng(ctx.seed)
    net = Mlp((4, 8, 3), "tanh", rng)
    x = rng.normal(size=(5, 4))
    target = rng.normal(size=(5, 3))

    def loss():
        return float(0.5 * ((net.forward(x) - target) ** 2).sum())

    out = net.forward(x)
    err = gradient_check(loss, net.params, net.backward(out - target))
    return err < 1e-4, f"max rel err {err:.2e} (tol 1e-4)"


def frozen_minibatch(policy, obs_dim: int, size: int, rng: np.random.Generator) -> Minibatch:
    obs = rng.normal(size=(size, obs_dim))
    actions, logp = policy.sample(obs, [rng] * size)
    return Minibatch(obs, actions, logp + rng.normal(scale=0.1, size=size), rng.normal(size=size),
                     rng.normal(size=size), rng.normal(size=size))


def ppo_gradient_error(continuous: bool = False, value_clip: bool = False, seed: int = 0) -> float:
    """Max relative error of the total PPO loss gradient against central differences."""
    rng = np.random.default_rng(seed)
    obs_dim = 3
    cfg = TrainerConfig(hidden_sizes=(6,), value_clip=value_clip, clip_coef=0.2, entropy_coef=0.01)
    head = GaussianPolicy if continuous else CategoricalPolicy
    policy = head(obs_dim, 2, cfg.hidden_sizes, rng=rng, output_scale=1.0)
    value_net = Mlp((obs_dim, *cfg.hidden_sizes, 1), rng=rng)
    batch = frozen_minibatch(policy, obs_dim, 16, rng)
    _, _, pg, vg = loss_and_grads(policy, value_net, batch, cfg)
    params = policy.params + value_net.params

    def loss():
        return loss_and_grads(policy, value_net, batch, cfg)[0]

    return gradient_check(loss, params, pg + vg)


@check("nn")
def ppo_total_loss_gradient(ctx: VerifyContext):
    errs = [ppo_gradient_error(c, vc, ctx.seed) for c in (False, True) for vc in (False, True)]
    return max(errs) < 1e-4, "max rel err " + ", ".join(f"{e:.2e}" for e in errs) + " (tol 1e-4)"


# -- oracle ------------------------------------------------------------------

@check("oracle")
def deterministic_chain_closed_form(ctx: VerifyContext):
    mdp = deterministic_chain(5, 0.9)
    V = exact_state_values(mdp, TabularPolicy.uniform(mdp.n_states, 1))
    err = float(np.max(np.abs(V[:5] - 0.9 ** (4 - np.arange(5)))))
    return err < 1e-12, f"max abs err {err:.2e}"


@check("oracle")
def advantage_policy_mean(ctx: VerifyContext):
    mdp = chain_mdp()
    rng = np.random.default_rng(ctx.seed)
    probs = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
    pol = TabularPolicy(probs)
    V = exact_state_values(mdp, pol)
    A = exact_advantage(mdp, pol, V)
    err = float(np.max(np.abs((probs * A).sum(axis=1))))
    return err < 1e-10, f"max |E_pi A| {err:.2e}"


# -- trajectory --------------------------------------------------------------

@check("trajectory")
def partial_split_conservation(ctx: VerifyContext):
    rng = np.random.default_rng(ctx.seed)
    for T, eps in ((8, 3), (8, 8), (64, 32), (7, 1)):
        for p_done in (0.0, 0.1):
            steps = [Transition(np.zeros(1), 0, 0.0, bool(rng.random() < p_done), 0.0, 0.0) for _ in range(T)]
            keep, tail = split_partial(Segment(steps, 0, 0, 0.0), eps)
            if int(keep.sum()) + len(tail) != T:
                return False, f"T={T} eps={eps}: kept {int(keep.sum())} + carried {len(tail)} != T"
            if p_done == 0.0 and int(keep.sum()) != eps:
                return False, f"T={T} eps={eps}: kept {int(keep.sum())} on a non-terminal segment"
    return True, "kept + carried == T; kept == eps without episode ends"


# -- runner ------------------------------------------------------------------

def run_checks(filter_name: str | None = None, ctx: VerifyContext | None = None) -> List[CheckResult]:
    ctx = ctx or VerifyContext()
    results = []
    for suite, checks in CHECKS.items():
        for name, fn in checks:
            if filter_name and filter_name not in (suite, name):
                continue
            start = time.perf_counter()
            try:
                ok, detail = fn(ctx)
            except Exception as exc:
                ok, detail = False, f"raised {type(exc).__name__}: {exc}"
            results.append(CheckResult(suite, name, bool(ok), detail, time.perf_counter() - start))
    return results


def format_table(results: List[CheckResult]) -> str:
    width = max([len(f"{r.suite}.{r.name}") for r in results] + [5])
    lines = [f"{'check':<{width}}  status  time     detail"]
    for r in results:
        lines.append(f"{r.suite + '.' + r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  "
                     f"{r.seconds:6.2f}s  {r.detail}")
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines)


def sign_flipped_gae(rewards, values, dones, params, bootstrap_value=0.0):
    """Mutation fixture: the recursion with ``-gamma*lam`` in place of ``gamma*lam``."""
    deltas = estimators.td_residuals(rewards, values, dones, params, bootstrap_value)
    dones = np.asarray(dones, dtype=bool)
    out = np.empty_like(deltas)
    acc = 0.0
    for t in range(deltas.size - 1, -1, -1):
        acc = deltas[t] + (0.0 if dones[t] else -params.decay * acc)
        out[t] = acc
    return out
