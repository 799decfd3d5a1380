"""
Gradient oracle suites.

* primitives:        every registered op against central finite differences
* local_step:        the local model's transition + reward head against finite differences
* decoupling:        anchored rollout gradient vs the closed-form chain on a linear system
                     whose local model differs from the global one
* oracle_consistency: local = global = true dynamics; tape gradient vs finite
                     differences of the imagined return
* lambda_returns:    backward recursion vs the explicit weighted sum
"""

import logging
from typing import Callable, List, Sequence, Tuple

import numpy as np

from dmosapo.core import autodiff as ad
from dmosapo.core.autodiff import Value
from dmosapo.envs.linear import DEFAULT_A, DEFAULT_B, LinearEnv
from dmosapo.models.global_dynamics import SimulatorDynamics
from dmosapo.models.linear import LinearBackwardModel, LinearPolicy, QuadraticValue
from dmosapo.models.local import Latent, LocalWorldModel
from dmosapo.schemas.config import HyperParams
from dmosapo.schemas.metrics import GradcheckResult
from dmosapo.service.dmo_service import imagine, sapo_policy_loss
from dmosapo.utils.returns import lambda_returns, lambda_returns_direct
from dmosapo.utils.seeding import rng_for

logger = logging.getLogger(__name__)

FD_EPS = 1e-5
PRIMITIVE_TOL = 1e-4
DECOUPLING_TOL = 1e-10
CONSISTENCY_TOL = 1e-3
LAMBDA_TOL = 1e-12


# ==========================================
# HELPERS
# ==========================================

def relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-6)
    return float(np.linalg.norm(a - n) / scale)


def finite_difference(fn: Callable[[List[np.ndarray]], float], arrays: List[np.ndarray],
                      eps: float = FD_EPS) -> List[np.ndarray]:
    """Central differences of a scalar function, one input element at a time."""
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            original = arr[idx]
            arr[idx] = original + eps
            up = fn(arrays)
            arr[idx] = original - eps
            down = fn(arrays)
            arr[idx] = original
            grad[idx] = (up - down) / (2.0 * eps)
        grads.append(grad)
    return grads


def check_function(build: Callable[[List[Value]], Value], arrays: List[np.ndarray]) -> float:
    """Relative error between the tape gradient and finite differences of ``build``."""
    values = [Value(a.copy(), requires_grad=True) for a in arrays]
    ad.backward(build(values))
    analytic = [v.grad for v in values]

    def scalar(current):
        with ad.no_grad():
            return build([Value(a) for a in current]).item()

    numeric = finite_difference(scalar, [a.copy() for a in arrays])
    return relative_error(analytic, numeric)


def _away_from(x: np.ndarray, points: Sequence[float], rng: np.random.Generator, margin: float = 1e-3):
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.sign(rng.random(close.sum()) - 0.5) * rng.uniform(0.05, 0.5, close.sum())
    return x


# ==========================================
# PRIMITIVES
# ==========================================

def _primitive_case(kind: str, rng: np.random.Generator) -> Tuple[List[np.ndarray], Callable]:
    shape = (2, 3)

    def normal(*s):
        return rng.normal(size=s or shape)

    if kind in ("add", "sub", "mul"):
        arrays = [normal(), normal(3) if rng.random() < 0.5 else normal()]
        op = lambda v: ad.forward_op(kind, v[0], v[1])  # noqa: E731
    elif kind == "div":
        arrays = [normal(), rng.uniform(0.5, 2.0, shape) * rng.choice([-1.0, 1.0], shape)]
        op = lambda v: ad.div(v[0], v[1])  # noqa: E731
    elif kind in ("neg", "tanh", "exp", "sigmoid", "softplus"):
        arrays = [normal()]
        op = lambda v: ad.forward_op(kind, v[0])  # noqa: E731
    elif kind == "log":
        arrays = [rng.uniform(0.2, 3.0, shape)]
        op = lambda v: ad.log(v[0])  # noqa: E731
    elif kind == "pow":
        exponent = float(rng.choice([2.0, 3.0, 0.5, -1.0, 1.5]))
        arrays = [rng.uniform(0.5, 2.0, shape)]
        op = lambda v: ad.power(v[0], exponent)  # noqa: E731
    elif kind == "matmul":
        arrays = [normal(2, 3), normal(3, 4)]
        op = lambda v: ad.matmul(v[0], v[1])  # noqa: E731
    elif kind == "clip":
        arrays = [_away_from(normal(), [-0.5, 0.5], rng)]
        op = lambda v: ad.clip(v[0], -0.5, 0.5)  # noqa: E731
    elif kind in ("minimum", "maximum"):
        a = normal()
        b = a + rng.choice([-1.0, 1.0], shape) * rng.uniform(0.05, 1.0, shape)
        arrays = [a, b]
        op = lambda v: ad.forward_op(kind, v[0], v[1])  # noqa: E731
    elif kind == "gaussian_sample":
        eps = normal()
        arrays = [normal(), 0.5 * normal()]
        op = lambda v: ad.gaussian_sample(v[0], v[1], eps)  # noqa: E731
    elif kind == "concat":
        arrays = [normal(2, 3), normal(2, 2)]
        op = lambda v: ad.concat(v, axis=-1)  # noqa: E731
    elif kind == "slice":
        index = [slice(1, 3), (Ellipsis, slice(0, 2)), np.array([0, 2, 2])][int(rng.integers(3))]
        arrays = [normal(4, 3)]
        op = lambda v: ad.take(v[0], index)  # noqa: E731
    elif kind == "reshape":
        arrays = [normal()]
        op = lambda v: ad.reshape(v[0], (3, 2))  # noqa: E731
    elif kind == "transpose":
        arrays = [normal()]
        op = lambda v: ad.transpose(v[0])  # noqa: E731
    elif kind in ("sum", "mean"):
        axis = [None, 0, 1, -1][int(rng.integers(4))]
        keepdims = bool(rng.random() < 0.5)
        arrays = [normal()]
        op = lambda v: ad.forward_op(kind, v[0], axis=axis, keepdims=keepdims)  # noqa: E731
    else:
        raise ValueError(f"No finite-difference case for op '{kind}'")

    with ad.no_grad():
        out_shape = op([Value(a) for a in arrays]).shape
    weight = rng.normal(size=out_shape)
    return arrays, lambda v: ad.vsum(op(v) * weight)


def primitive_suite(n_cases: int = 100, seed: int = 0) -> GradcheckResult:
    worst, total = 0.0, 0
    for kind in ad.OPS:
        rng = rng_for(seed, "gradcheck", "primitive", kind)
        errors = [check_function(build, arrays)
                  for arrays, build in (_primitive_case(kind, rng) for _ in range(n_cases))]
        logger.debug(f"gradcheck {kind}: max relative error {max(errors):.2e}")
        worst = max(worst, max(errors))
        total += n_cases
    return GradcheckResult(suite="primitives", cases=total, max_error=worst,
                           tolerance=PRIMITIVE_TOL, passed=worst < PRIMITIVE_TOL)


# ==========================================
# LOCAL STEP
# ==========================================

def local_step_suite(n_cases: int = 100, seed: int = 0) -> GradcheckResult:
    rng = rng_for(seed, "gradcheck", "local_step")
    models = [LocalWorldModel(obs_dim=3, action_dim=2, h_dim=4, z_dim=2, hidden=8, cell=cell, seed=seed)
              for cell in ("gru", "linear")]
    worst = 0.0
    for case in range(n_cases):
        model = models[case % 2]
        eps = rng.normal(size=(1, 2))
        w_h, w_z, w_r = rng.normal(size=(1, 4)), rng.normal(size=(1, 2)), rng.normal(size=(1,))

        def build(v, model=model, eps=eps, w_h=w_h, w_z=w_z, w_r=w_r):
            nxt, r = model.local_step(Latent(v[0], v[1]), v[2], eps)
            return ad.vsum(nxt.h * w_h) + ad.vsum(nxt.z * w_z) + ad.vsum(r * w_r)

        arrays = [0.5 * rng.normal(size=(1, 4)), 0.5 * rng.normal(size=(1, 2)), 0.5 * rng.normal(size=(1, 2))]
        worst = max(worst, check_function(build, arrays))
        model.zero_grad()
    return GradcheckResult(suite="local_step", cases=n_cases, max_error=worst,
                           tolerance=PRIMITIVE_TOL, passed=worst < PRIMITIVE_TOL)


# ==========================================
# DECOUPLING ON THE LINEAR SYSTEM
# ==========================================

def _policy_gradient(policy: LinearPolicy, local, global_model, critic, start: np.ndarray, hp):
    """Tape gradient of the policy loss w.r.t. (K, b) and the imagined trajectory."""
    with local.frozen():
        traj = imagine(policy, global_model, local, start[:, None, :], hp, np.random.default_rng(0))
        loss = sapo_policy_loss(traj, critic, hp)
    policy.zero_grad()
    ad.backward(loss)
    return np.concatenate([policy.K.grad.ravel(), policy.b.grad]), traj, loss.item()


def closed_form_gradient(states: np.ndarray, policy: LinearPolicy, local: LinearBackwardModel,
                         critic: QuadraticValue, hp) -> np.ndarray:
    """dJ/dθ along a recorded trajectory s_1..s_{H+1} for one sample.

    Tangents d l_h/dθ are propagated with the LOCAL Jacobians evaluated at the
    recorded (global) states; J = Σ_{h<H} γ^h R(s_{h+1}, a_h) + γ^H V(s_H).
    """
    K, b = policy.K.data, policy.b.data
    n, m = K.shape
    n_params = n * m + m
    horizon = len(states) - 1
    tangent = np.zeros((n, n_params))
    tangents = [tangent]
    grad = np.zeros(n_params)
    for h in range(1, horizon + 1):
        s = states[h - 1]
        a = s @ K + b
        da = np.zeros((m, n_params))
        for j in range(m):
            da[j, np.arange(n) * m + j] = s
            da[j, n * m + j] = 1.0
        da += K.T @ tangent
        tangent = local.state_jacobian(s) @ tangent + local.B.data @ da
        tangents.append(tangent)
        if h <= horizon - 1:
            grad += hp.gamma ** h * (local.reward_grad_state(states[h]) @ tangent
                                     + local.reward_grad_action(a) @ da)
    value_grad = -2.0 * critic.w.data * states[horizon - 1]
    grad += hp.gamma ** horizon * value_grad @ tangents[horizon - 1]
    return grad


def _linear_problem(rng: np.random.Generator, activation: str, distinct: bool):
    A_g = DEFAULT_A + 0.05 * rng.normal(size=(2, 2))
    B_g = DEFAULT_B + 0.02 * rng.normal(size=(2, 2))
    env = LinearEnv(A_g, B_g, action_cost=0.01)
    if distinct:
        A_l, B_l = A_g + 0.1 * rng.normal(size=(2, 2)), B_g + 0.05 * rng.normal(size=(2, 2))
    else:
        A_l, B_l = A_g, B_g
    local = LinearBackwardModel(A_l, B_l, action_cost=0.01, activation=activation)
    policy = LinearPolicy(2, 2, rng, scale=0.1)
    critic = QuadraticValue(2, weight=float(rng.uniform(0.5, 2.0)))
    start = rng.uniform(-0.8, 0.8, size=(1, 2))
    return SimulatorDynamics(env), local, policy, critic, start


def decoupling_suite(n_cases: int = 20, seed: int = 0, horizon: int = 8) -> GradcheckResult:
    """Also fails when an anchored latent differs from the global observation in any bit."""
    rng = rng_for(seed, "gradcheck", "decoupling")
    hp = HyperParams(horizon=horizon, gamma=0.9, alpha=0.0)
    worst = 0.0
    for case in range(n_cases):
        activation = "identity" if case % 2 == 0 else "tanh"
        global_model, local, policy, critic, start = _linear_problem(rng, activation, distinct=True)
        tape, traj, _ = _policy_gradient(policy, local, global_model, critic, start, hp)
        states = traj.observations[:, 0]
        if not all(np.array_equal(traj.latents[h].h.data, traj.observations[h]) for h in range(horizon + 1)):
            worst = float("inf")
            logger.error("Anchored latent values diverge from the global rollout")
            break
        closed = closed_form_gradient(states, policy, local, critic, hp)
        worst = max(worst, relative_error([-tape], [closed]))
    return GradcheckResult(suite="decoupling", cases=n_cases, max_error=worst,
                           tolerance=DECOUPLING_TOL, passed=worst < DECOUPLING_TOL)


def oracle_consistency_suite(n_cases: int = 10, seed: int = 0, horizon: int = 8) -> GradcheckResult:
    rng = rng_for(seed, "gradcheck", "consistency")
    hp = HyperParams(horizon=horizon, gamma=0.9, alpha=0.0)
    worst = 0.0
    for _ in range(n_cases):
        global_model, local, policy, critic, start = _linear_problem(rng, "identity", distinct=False)
        tape, _, _ = _policy_gradient(policy, local, global_model, critic, start, hp)

        def objective(arrays):
            policy.K.data, policy.b.data = arrays[0].copy(), arrays[1].copy()
            with ad.no_grad():
                traj = imagine(policy, global_model, local, start[:, None, :], hp, np.random.default_rng(0))
                return -sapo_policy_loss(traj, critic, hp).item()

        params = [policy.K.data.copy(), policy.b.data.copy()]
        numeric = finite_difference(objective, [p.copy() for p in params])
        policy.K.data, policy.b.data = params
        worst = max(worst, relative_error([-tape], numeric))
    return GradcheckResult(suite="oracle_consistency", cases=n_cases, max_error=worst,
                           tolerance=CONSISTENCY_TOL, passed=worst < CONSISTENCY_TOL)


# ==========================================
# λ-RETURNS
# ==========================================

def lambda_suite(n_cases: int = 1000, seed: int = 0) -> GradcheckResult:
    rng = rng_for(seed, "gradcheck", "lambda")
    worst = 0.0
    for case in range(n_cases):
        steps = int(rng.integers(1, 12))
        rewards = rng.normal(size=steps)
        values = rng.normal(size=steps + 1) * 3.0
        gamma = float(rng.uniform(0.01, 0.999))
        lam = [0.0, 1.0, float(rng.uniform())][case % 3]
        fast = lambda_returns(rewards, values, gamma, lam)
        direct = lambda_returns_direct(rewards, values, gamma, lam)
        worst = max(worst, float(np.max(np.abs(fast - direct) / np.maximum(1.0, np.abs(direct)))))
        if lam == 0.0:
            worst = max(worst, float(np.max(np.abs(fast - (rewards + gamma * values[1:])))))
    return GradcheckResult(suite="lambda_returns", cases=n_cases, max_error=worst,
                           tolerance=LAMBDA_TOL, passed=worst < LAMBDA_TOL)


def run_gradcheck(n_cases: int = 100, seed: int = 0) -> List[GradcheckResult]:
    results = [
        primitive_suite(n_cases, seed),
        local_step_suite(n_cases, seed),
        decoupling_suite(seed=seed),
        oracle_consistency_suite(seed=seed),
        lambda_suite(seed=seed),
    ]
    for r in results:
        level = logging.INFO if r.passed else logging.ERROR
        logger.log(level, f"gradcheck {r.suite}: {r.cases} cases, max error {r.max_error:.2e} "
                          f"(tolerance {r.tolerance:.0e})")
    return results
