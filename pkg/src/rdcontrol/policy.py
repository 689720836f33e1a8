"""Stochastic policy-gradient agent.

A single-hidden-layer tanh network maps the observed nodal state to the
mean of a Gaussian action distribution on the ``[-1, 1]`` control
space; the log standard deviation is a learnable state-independent
parameter with a hard exploration floor. Training follows the
score-function estimator with immediate (one-step) rewards and a batch
mean baseline, and each episode triggers a multi-step update: ten Adam
iterations, each guarded by a backtracking line search on the batch
loss.

Everything is plain numpy with hand-written reverse-mode gradients,
verified against finite differences in the test suite.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .env import EpisodeAbort, EpisodeTrace, Observation

logger = logging.getLogger(__name__)

PARAM_FIELDS = ("w1", "b1", "w2", "b2", "log_spread")

DEFAULT_LEARNING_RATE = 8e-5
DEFAULT_HIDDEN_SIZE = 128
DEFAULT_SPREAD_FLOOR = 0.1
DEFAULT_INIT_LOG_SPREAD = math.log(0.5)
CHECKPOINT_VERSION = 1


class PolicyError(ValueError):
    """Invalid agent input or state."""


@dataclass
class PolicyParams:
    """Network weights plus the action log-spread."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    log_spread: np.ndarray

    def copy(self) -> "PolicyParams":
        return PolicyParams(*(getattr(self, f).copy() for f in PARAM_FIELDS))

    def add_scaled(self, direction: dict, alpha: float) -> "PolicyParams":
        """New parameters ``self + alpha * direction``."""
        return PolicyParams(
            *(getattr(self, f) + alpha * direction[f] for f in PARAM_FIELDS)
        )

    @property
    def n_inputs(self) -> int:
        return self.w1.shape[0]

    @property
    def n_actions(self) -> int:
        return self.w2.shape[1]


@dataclass
class AdamState:
    """First and second moment estimates plus the step counter."""

    m: dict
    v: dict
    step: int = 0
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: PolicyParams,
                   learning_rate: float = DEFAULT_LEARNING_RATE) -> "AdamState":
        return cls(
            m={f: np.zeros_like(getattr(params, f)) for f in PARAM_FIELDS},
            v={f: np.zeros_like(getattr(params, f)) for f in PARAM_FIELDS},
            learning_rate=learning_rate,
        )


@dataclass
class Batch:
    """Transitions collected from completed episodes."""

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=float))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        self.rewards = np.asarray(self.rewards, dtype=float)
        n = len(self.rewards)
        if self.observations.shape[0] != n or self.actions.shape[0] != n:
            raise PolicyError("batch arrays must agree on the transition count")
        if n == 0:
            raise PolicyError("batch is empty")
        if not np.all(np.isfinite(self.rewards)):
            raise PolicyError("batch rewards must be finite")

    def __len__(self) -> int:
        return len(self.rewards)


def init_params(
    n_inputs: int,
    n_actions: int,
    hidden_size: int = DEFAULT_HIDDEN_SIZE,
    rng: np.random.Generator | None = None,
    init_log_spread: float = DEFAULT_INIT_LOG_SPREAD,
) -> PolicyParams:
    """Seeded uniform init scaled by the inverse root of the fan-in."""
    rng = rng if rng is not None else np.random.default_rng()
    s1 = 1.0 / math.sqrt(n_inputs)
    s2 = 1.0 / math.sqrt(hidden_size)
    return PolicyParams(
        w1=rng.uniform(-s1, s1, (n_inputs, hidden_size)),
        b1=np.zeros(hidden_size),
        w2=rng.uniform(-s2, s2, (hidden_size, n_actions)),
        b2=np.zeros(n_actions),
        log_spread=np.full(n_actions, float(init_log_spread)),
    )


def _forward_batch(params: PolicyParams, obs: np.ndarray,
                   spread_floor: float = DEFAULT_SPREAD_FLOOR):
    hidden = np.tanh(obs @ params.w1 + params.b1)
    mean = np.tanh(hidden @ params.w2 + params.b2)
    spread = np.maximum(np.exp(params.log_spread), spread_floor)
    return mean, spread, hidden


def _observation_vector(observation) -> np.ndarray:
    if isinstance(observation, Observation):
        return np.asarray(observation.state_values, dtype=float)
    return np.asarray(observation, dtype=float)


def forward(params: PolicyParams, observation,
            spread_floor: float = DEFAULT_SPREAD_FLOOR):
    """Policy mean in ``(-1, 1)^n`` and the floored action spread."""
    obs = _observation_vector(observation)
    if obs.shape != (params.n_inputs,):
        raise PolicyError(
            f"observation has length {obs.shape}, network expects ({params.n_inputs},)"
        )
    mean, spread, _ = _forward_batch(params, obs[None, :], spread_floor)
    return mean[0], spread


def sample(mean: np.ndarray, spread: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Gaussian draw around the mean, clipped to the action box."""
    draw = mean + spread * rng.standard_normal(len(mean))
    return np.clip(draw, -1.0, 1.0)


def log_prob(mean: np.ndarray, spread: np.ndarray, action) -> float:
    """Pre-clip Gaussian log density, summed over action dimensions."""
    z = (np.asarray(action, dtype=float) - mean) / spread
    return float(np.sum(-0.5 * np.log(2.0 * np.pi * spread**2) - 0.5 * z * z))


def pg_loss(params: PolicyParams, batch: Batch,
            spread_floor: float = DEFAULT_SPREAD_FLOOR) -> float:
    """Negative advantage-weighted log likelihood of the batch actions.

    Advantages are immediate rewards minus the batch mean, so a batch of
    equal rewards has zero gradient.
    """
    mean, spread, _ = _forward_batch(params, batch.observations, spread_floor)
    adv = batch.rewards - batch.rewards.mean()
    z = (batch.actions - mean) / spread
    logp = np.sum(-0.5 * np.log(2.0 * np.pi * spread**2) - 0.5 * z * z, axis=1)
    return float(-np.mean(adv * logp))


def pg_gradient(params: PolicyParams, batch: Batch,
                spread_floor: float = DEFAULT_SPREAD_FLOOR) -> dict:
    """Exact reverse-mode gradient of :func:`pg_loss`."""
    obs = batch.observations
    n = len(batch)
    mean, spread, hidden = _forward_batch(params, obs, spread_floor)
    adv = batch.rewards - batch.rewards.mean()
    diff = batch.actions - mean

    # d loss / d mean, shape (n, k)
    coeff = -(adv / n)[:, None]
    dmean = coeff * diff / spread**2

    dz2 = dmean * (1.0 - mean * mean)
    gw2 = hidden.T @ dz2
    gb2 = dz2.sum(axis=0)
    dhidden = dz2 @ params.w2.T
    dz1 = dhidden * (1.0 - hidden * hidden)
    gw1 = obs.T @ dz1
    gb1 = dz1.sum(axis=0)

    # Spread gradient dies below the exploration floor.
    dspread = np.sum(coeff * (diff**2 / spread**3 - 1.0 / spread), axis=0)
    active = np.exp(params.log_spread) > spread_floor
    g_ls = dspread * np.exp(params.log_spread) * active

    return {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "log_spread": g_ls}


def _adam_direction(grad: dict, state: AdamState) -> dict:
    """Advance the moment estimates and return the bias-corrected step."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    direction = {}
    for f in PARAM_FIELDS:
        g = grad[f]
        state.m[f] = state.beta1 * state.m[f] + (1.0 - state.beta1) * g
        state.v[f] = state.beta2 * state.v[f] + (1.0 - state.beta2) * g * g
        m_hat = state.m[f] / c1
        v_hat = state.v[f] / c2
        direction[f] = -state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return direction


def adam_step(params: PolicyParams, grad: dict, state: AdamState) -> PolicyParams:
    """One bias-corrected Adam update; mutates the moment state."""
    return params.add_scaled(_adam_direction(grad, state), 1.0)


def multi_step_update(
    params: PolicyParams,
    batch: Batch,
    adam_state: AdamState | None = None,
    iterations: int = 10,
    line_search_iters: int = 10,
    shrink: float = 0.5,
    spread_floor: float = DEFAULT_SPREAD_FLOOR,
    record: list | None = None,
) -> PolicyParams:
    """Repeated Adam steps, each damped by a backtracking line search.

    Every iteration recomputes the gradient at the current parameters,
    advances the Adam moments, and tries step lengths 1, shrink,
    shrink**2, ... on the proposed direction, accepting the first whose
    batch loss does not increase; if all trials fail the iteration
    applies a zero step. The batch loss therefore never increases. If
    ``record`` is a list, the loss after each iteration is appended,
    starting with the initial value.
    """
    if adam_state is None:
        adam_state = AdamState.for_params(params)
    loss = pg_loss(params, batch, spread_floor)
    if record is not None:
        record.append(loss)
    for _ in range(iterations):
        grad = pg_gradient(params, batch, spread_floor)
        direction = _adam_direction(grad, adam_state)
        alpha = 1.0
        for _trial in range(line_search_iters):
            candidate = params.add_scaled(direction, alpha)
            candidate_loss = pg_loss(candidate, batch, spread_floor)
            if candidate_loss <= loss:
                params = candidate
                loss = candidate_loss
                break
            alpha *= shrink
        if record is not None:
            record.append(loss)
    return params


@dataclass
class TrainResult:
    """Outcome of a training run."""

    params: PolicyParams
    adam_state: AdamState
    traces: list
    rng: np.random.Generator


def train(
    env,
    n_episodes: int,
    seed: int | None = 0,
    hidden_size: int = DEFAULT_HIDDEN_SIZE,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    adam_iterations: int = 10,
    line_search_iterations: int = 10,
    spread_floor: float = DEFAULT_SPREAD_FLOOR,
    init_log_spread: float = DEFAULT_INIT_LOG_SPREAD,
    params: PolicyParams | None = None,
    adam_state: AdamState | None = None,
    rng: np.random.Generator | None = None,
) -> TrainResult:
    """Run episodic policy-gradient training against an environment.

    The environment must offer ``n_actions``, ``observation_size``,
    ``episode_len``, ``reset(seed) -> Observation``, ``step(action) ->
    (Observation, reward, done)``, and expose ``last_reward`` and
    ``last_action_rl`` after a reset; both the in-process environment
    and the socket client satisfy this. One parameter update runs per
    completed episode on that episode's transitions. Episodes aborted by
    the environment are dropped and training continues. The run is a
    pure function of the configuration and seed; pass ``params``,
    ``adam_state``, and ``rng`` (from a checkpoint) to resume one.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(
            env.observation_size, env.n_actions, hidden_size, rng, init_log_spread
        )
    if adam_state is None:
        adam_state = AdamState.for_params(params, learning_rate)

    traces = []
    for episode in range(1, n_episodes + 1):
        ep_seed = int(rng.integers(0, 2**63))
        try:
            obs = env.reset(ep_seed)
            actions = [np.asarray(env.last_action_rl, dtype=float)]
            rewards = [float(env.last_reward)]
            norms_c = [obs.norm_c]
            norms_k = [obs.norm_kappa]
            batch_obs, batch_act, batch_rew = [], [], []
            done = False
            while not done:
                state = _observation_vector(obs)
                mean, spread, _ = _forward_batch(params, state[None, :], spread_floor)
                action = sample(mean[0], spread, rng)
                obs, reward, done = env.step(action)
                batch_obs.append(state)
                batch_act.append(action)
                batch_rew.append(reward)
                actions.append(action)
                rewards.append(float(reward))
                norms_c.append(obs.norm_c)
                norms_k.append(obs.norm_kappa)
        except EpisodeAbort as exc:
            logger.warning("episode %d aborted and dropped: %s", episode, exc)
            continue

        batch = Batch(np.array(batch_obs), np.array(batch_act), np.array(batch_rew))
        losses: list = []
        params = multi_step_update(
            params,
            batch,
            adam_state,
            iterations=adam_iterations,
            line_search_iters=line_search_iterations,
            spread_floor=spread_floor,
            record=losses,
        )
        traces.append(
            EpisodeTrace(
                episode=episode,
                actions=np.array(actions),
                rewards=np.array(rewards),
                norm_c=np.array(norms_c),
                norm_kappa=np.array(norms_k),
                update_losses=losses,
            )
        )
    return TrainResult(params, adam_state, traces, rng)


def _write_npz_deterministic(path, arrays: dict) -> None:
    """npz-compatible archive with fixed zip metadata, so identical
    contents produce identical bytes."""
    import io
    import zipfile

    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, value in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(value), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def save_checkpoint(path, params: PolicyParams, adam_state: AdamState,
                    rng: np.random.Generator) -> None:
    """Versioned binary dump of parameters, optimizer moments, and the
    generator state; loading resumes training bit-identically."""
    arrays = {f: getattr(params, f) for f in PARAM_FIELDS}
    arrays.update({f"adam_m_{f}": adam_state.m[f] for f in PARAM_FIELDS})
    arrays.update({f"adam_v_{f}": adam_state.v[f] for f in PARAM_FIELDS})
    arrays.update(
        checkpoint_version=CHECKPOINT_VERSION,
        adam_step=adam_state.step,
        adam_learning_rate=adam_state.learning_rate,
        adam_beta1=adam_state.beta1,
        adam_beta2=adam_state.beta2,
        adam_eps=adam_state.eps,
        rng_state=json.dumps(rng.bit_generator.state),
    )
    _write_npz_deterministic(path, arrays)


def load_checkpoint(path):
    """Restore ``(params, adam_state, rng)`` written by
    :func:`save_checkpoint`."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["checkpoint_version"])
        if version != CHECKPOINT_VERSION:
            raise PolicyError(f"unsupported checkpoint version {version}")
        params = PolicyParams(*(data[f].copy() for f in PARAM_FIELDS))
        adam_state = AdamState(
            m={f: data[f"adam_m_{f}"].copy() for f in PARAM_FIELDS},
            v={f: data[f"adam_v_{f}"].copy() for f in PARAM_FIELDS},
            step=int(data["adam_step"]),
            learning_rate=float(data["adam_learning_rate"]),
            beta1=float(data["adam_beta1"]),
            beta2=float(data["adam_beta2"]),
            eps=float(data["adam_eps"]),
        )
        state = json.loads(str(data["rng_state"]))
    bit_gen = getattr(np.random, state["bit_generator"])()
    bit_gen.state = state
    return params, adam_state, np.random.Generator(bit_gen)


class PolicyGradientAgent(BaseEstimator):
    """Estimator-style front end: ``fit`` an environment, ``predict``
    mean actions for observed states.

    Hyperparameters follow the published agent configuration by
    default: one 128-unit tanh layer, Adam at 8e-5 inside a 10-step
    line-searched meta-update, exploration floor 0.1, one update per
    episode with one-step reward horizon.
    """

    def __init__(
        self,
        n_episodes: int = 200,
        hidden_size: int = DEFAULT_HIDDEN_SIZE,
        learning_rate: float = DEFAULT_LEARNING_RATE,
        adam_iterations: int = 10,
        line_search_iterations: int = 10,
        spread_floor: float = DEFAULT_SPREAD_FLOOR,
        init_log_spread: float = DEFAULT_INIT_LOG_SPREAD,
        random_state: int | None = 0,
    ):
        self.n_episodes = n_episodes
        self.hidden_size = hidden_size
        self.learning_rate = learning_rate
        self.adam_iterations = adam_iterations
        self.line_search_iterations = line_search_iterations
        self.spread_floor = spread_floor
        self.init_log_spread = init_log_spread
        self.random_state = random_state

    def fit(self, env, y=None):
        """Train against an environment handle (in-process or remote)."""
        result = train(
            env,
            n_episodes=self.n_episodes,
            seed=self.random_state,
            hidden_size=self.hidden_size,
            learning_rate=self.learning_rate,
            adam_iterations=self.adam_iterations,
            line_search_iterations=self.line_search_iterations,
            spread_floor=self.spread_floor,
            init_log_spread=self.init_log_spread,
        )
        self.params_ = result.params
        self.adam_state_ = result.adam_state
        self.traces_ = result.traces
        self.rng_ = result.rng
        self.n_features_in_ = result.params.n_inputs
        self.n_actions_ = result.params.n_actions
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise PolicyError("agent is not fitted; call fit first")

    def predict(self, observations) -> np.ndarray:
        """Deterministic mean actions for one observation or a stack."""
        self._check_fitted()
        obs = _observation_vector(observations)
        single = obs.ndim == 1
        obs2d = np.atleast_2d(obs)
        if obs2d.shape[1] != self.n_features_in_:
            raise PolicyError(
                f"observations have length {obs2d.shape[1]}, "
                f"expected {self.n_features_in_}"
            )
        mean, _, _ = _forward_batch(self.params_, obs2d, self.spread_floor)
        return mean[0] if single else mean

    def sample_action(self, observation, rng: np.random.Generator | None = None) -> np.ndarray:
        """Stochastic action for one observation."""
        self._check_fitted()
        rng = rng if rng is not None else self.rng_
        mean, spread = forward(self.params_, observation, self.spread_floor)
        return sample(mean, spread, rng)
