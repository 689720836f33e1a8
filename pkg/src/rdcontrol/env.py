"""Episodic control environment over the diffusivity field.

Wraps the finite element simulator: agent actions in ``[-1, 1]`` per
region map affinely onto a physical diffusivity range, each action
advances the transport problem one implicit Euler step, and rewards
compare the current field and control norms against a recorded
"before training" baseline episode.

Two reward modes: ``diff`` pays for large diffusivity norms and
penalizes the field norm exceeding its baseline; ``state`` penalizes
the field norm and pays (up to zero) for keeping diffusivities at or
above their baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .fem import ControlMap, Field, NewtonError, SimParams, Simulator
from .mesh import Mesh

ACTION_CLIP_TOL = 1e-9
NORM_GUARD = 1e-15

OBJECTIVE_DIFF = "diff"
OBJECTIVE_STATE = "state"


class EnvError(ValueError):
    """Invalid environment configuration or usage."""


class EpisodeAbort(RuntimeError):
    """The simulation failed mid-episode; the episode yields no data."""


def _default_ic() -> dict:
    return {"kind": "circle", "center": (0.5, 0.5), "radius": 0.3,
            "inside": 1.0, "outside": 0.0}


@dataclass
class EnvConfig:
    """Reward, action scaling, and episode settings.

    ``action_low``/``action_high`` bound the control in RL units;
    ``kappa_scale`` converts RL units to physical diffusivity (1 for the
    square experiment, 1e4 for the multi-region one, giving the range
    [1000, 50000]).
    """

    objective: str = OBJECTIVE_DIFF
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0
    action_low: float = 0.1
    action_high: float = 5.0
    kappa_scale: float = 1.0
    episode_len: int = 60
    ic: dict = dc_field(default_factory=_default_ic)
    seed: int = 0

    def __post_init__(self):
        if self.objective not in (OBJECTIVE_DIFF, OBJECTIVE_STATE):
            raise EnvError(f"unknown objective {self.objective!r}")
        if not self.action_low < self.action_high:
            raise EnvError("need action_low < action_high")
        if self.kappa_scale <= 0:
            raise EnvError("kappa_scale must be positive")
        if min(self.w1, self.w2, self.w3, self.w4) < 0:
            raise EnvError("reward weights must be non-negative")
        if self.episode_len < 1:
            raise EnvError("episode_len must be at least 1")


@dataclass
class Observation:
    """What the agent sees after reset or a step."""

    state_values: np.ndarray
    norm_c: float
    norm_kappa: float
    step_index: int


@dataclass
class BaselineTrace:
    """Per-step norms of the before-training episode.

    ``norm_c0`` and ``norm_kappa0`` are the initial norms of that
    episode and normalize all reward terms.
    """

    norm_c_bef: np.ndarray
    norm_kappa_bef: np.ndarray
    norm_c0: float
    norm_kappa0: float

    def __post_init__(self):
        self.norm_c_bef = np.asarray(self.norm_c_bef, dtype=float)
        self.norm_kappa_bef = np.asarray(self.norm_kappa_bef, dtype=float)
        if len(self.norm_c_bef) != len(self.norm_kappa_bef):
            raise EnvError("baseline norm arrays must have equal length")
        if self.norm_c0 <= NORM_GUARD or self.norm_kappa0 <= NORM_GUARD:
            raise EnvError("baseline initial norms must be positive")
        if np.any(self.norm_c_bef <= 0) or np.any(self.norm_kappa_bef <= 0):
            raise EnvError("baseline norms must be positive")


@dataclass
class EpisodeTrace:
    """Everything recorded about one episode.

    Row ``i`` holds the norms at step ``i`` together with the action
    whose control was active at that step (the reset draw for step 0)
    and the reward evaluated there. ``update_losses`` is filled by the
    trainer with the merit-function values of the parameter update that
    followed the episode.
    """

    episode: int
    actions: np.ndarray
    rewards: np.ndarray
    norm_c: np.ndarray
    norm_kappa: np.ndarray
    update_losses: list | None = None


def initial_condition(mesh: Mesh, spec: dict) -> np.ndarray:
    """Evaluate an initial-condition spec to nodal values.

    Kinds: ``uniform`` (value), ``circle`` (center, radius, inside,
    outside; membership tested per node coordinate), ``region``
    (region, value, outside; nodes touching elements of the region).
    """
    kind = spec.get("kind")
    if kind == "uniform":
        return np.full(mesh.n_nodes, float(spec["value"]))
    if kind == "circle":
        center = np.asarray(spec.get("center", (0.5, 0.5)), dtype=float)
        radius = float(spec["radius"])
        inside = float(spec.get("inside", 1.0))
        outside = float(spec.get("outside", 0.0))
        dist = np.linalg.norm(mesh.nodes - center, axis=1)
        return np.where(dist <= radius, inside, outside)
    if kind == "region":
        region = int(spec["region"])
        if not 0 <= region < mesh.n_regions:
            raise EnvError(f"ic region {region} out of range")
        value = float(spec.get("value", 1.0))
        outside = float(spec.get("outside", 0.0))
        out = np.full(mesh.n_nodes, outside)
        out[mesh.region_nodes(region)] = value
        return out
    raise EnvError(f"unknown initial condition kind {kind!r}")


def _check_baseline(baseline) -> BaselineTrace:
    if baseline is None:
        raise EnvError("baseline not recorded; call record_baseline first")
    return baseline


def reward_diff(norm_kappa: float, norm_c: float, baseline: BaselineTrace,
                step_index: int, w1: float = 1.0, w2: float = 1.0) -> float:
    """Diffusivity-seeking reward with a clamped infection penalty."""
    baseline = _check_baseline(baseline)
    excess = (norm_c - baseline.norm_c_bef[step_index]) / baseline.norm_c0
    return w1 * norm_kappa / baseline.norm_kappa0 - w2 * max(0.0, excess)


def reward_state(norm_kappa: float, norm_c: float, baseline: BaselineTrace,
                 step_index: int, w3: float = 1.0, w4: float = 1.0) -> float:
    """Infection-minimizing reward with a clamped mobility penalty."""
    baseline = _check_baseline(baseline)
    shortfall = (norm_kappa - baseline.norm_kappa_bef[step_index]) / baseline.norm_kappa0
    return -w3 * norm_c / baseline.norm_c0 + w4 * min(0.0, shortfall)


class ReactionDiffusionEnv:
    """Gym-style episodic environment over the simulator.

    ``reset(seed)`` restores the initial condition and applies a
    uniformly drawn control; each ``step(action)`` advances one PDE step
    and returns (observation, reward, done). Rewards require a recorded
    baseline. A Newton failure aborts the episode with
    :class:`EpisodeAbort`.
    """

    def __init__(self, mesh: Mesh, params: SimParams, config: EnvConfig):
        self.mesh = mesh
        self.params = params
        self.config = config
        self.sim = Simulator(mesh, params)
        self._ic = initial_condition(mesh, config.ic)
        self.baseline: BaselineTrace | None = None
        self.baseline_episode: EpisodeTrace | None = None
        self.baseline_snapshots: dict | None = None
        self._field: Field | None = None
        self._control: ControlMap | None = None
        self._step_index: int | None = None
        self.last_reward: float = 0.0
        self.last_action_rl: np.ndarray | None = None

    @property
    def n_actions(self) -> int:
        return self.mesh.n_regions

    @property
    def observation_size(self) -> int:
        return self.mesh.n_nodes

    @property
    def episode_len(self) -> int:
        return self.config.episode_len

    # -- action scaling ------------------------------------------------

    def _clip_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=float)
        if a.shape != (self.n_actions,):
            raise EnvError(f"action must have shape ({self.n_actions},), got {a.shape}")
        if np.any(a < -1.0 - ACTION_CLIP_TOL) or np.any(a > 1.0 + ACTION_CLIP_TOL):
            raise EnvError(f"action outside [-1, 1]: extremes "
                           f"[{a.min():.12g}, {a.max():.12g}]")
        return np.clip(a, -1.0, 1.0)

    def scale_action(self, action) -> ControlMap:
        """Map an RL action in ``[-1, 1]^n`` to physical diffusivities."""
        a = self._clip_action(action)
        cfg = self.config
        rl = cfg.action_low + 0.5 * (a + 1.0) * (cfg.action_high - cfg.action_low)
        return ControlMap(rl * cfg.kappa_scale)

    def unscale_action(self, control: ControlMap) -> np.ndarray:
        """Invert :meth:`scale_action`."""
        cfg = self.config
        rl = control.kappa_per_region / cfg.kappa_scale
        return 2.0 * (rl - cfg.action_low) / (cfg.action_high - cfg.action_low) - 1.0

    # -- episode control -----------------------------------------------

    def _observe(self, control: ControlMap) -> Observation:
        return Observation(
            state_values=self._field.values.copy(),
            norm_c=self.sim.l2_norm(self._field),
            norm_kappa=self.sim.l2_norm_control(control),
            step_index=self._step_index,
        )

    def _reward(self, obs: Observation) -> float:
        cfg = self.config
        if cfg.objective == OBJECTIVE_DIFF:
            return reward_diff(obs.norm_kappa, obs.norm_c, self.baseline,
                               obs.step_index, cfg.w1, cfg.w2)
        return reward_state(obs.norm_kappa, obs.norm_c, self.baseline,
                            obs.step_index, cfg.w3, cfg.w4)

    def _begin(self, action_rl: np.ndarray) -> Observation:
        self._field = Field(self._ic.copy(), 0)
        self._step_index = 0
        self._control = self.scale_action(action_rl)
        self.last_action_rl = np.asarray(action_rl, dtype=float).copy()
        return self._observe(self._control)

    def _advance(self, action) -> Observation:
        control = self.scale_action(action)
        try:
            self._field = self.sim.step(self._field, control)
        except NewtonError as exc:
            self._step_index = None
            raise EpisodeAbort(f"simulation step failed: {exc}") from exc
        self._step_index += 1
        self._control = control
        self.last_action_rl = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        return self._observe(control)

    def reset(self, seed: int | None = None) -> Observation:
        """Start an episode: restore the initial condition and apply a
        uniformly random control drawn from the seeded generator."""
        _check_baseline(self.baseline)
        rng = np.random.default_rng(seed)
        obs = self._begin(rng.uniform(-1.0, 1.0, self.n_actions))
        self.last_reward = self._reward(obs)
        return obs

    def step(self, action):
        """Apply an action, advance one PDE step, return
        ``(observation, reward, done)``."""
        _check_baseline(self.baseline)
        if self._step_index is None:
            raise EnvError("no active episode; call reset first")
        if self._step_index >= self.config.episode_len:
            raise EnvError("episode complete; call reset to start another")
        obs = self._advance(action)
        reward = self._reward(obs)
        self.last_reward = reward
        done = obs.step_index >= self.config.episode_len
        return obs, reward, done

    def record_baseline(self, seed: int | None = None) -> BaselineTrace:
        """Run one episode of seeded uniform actions and freeze its
        per-step norms as the reward baseline.

        Also stashes the episode trace (with rewards evaluated against
        the new baseline) and start/final field and control snapshots.
        """
        if seed is None:
            seed = self.config.seed
        rng = np.random.default_rng(seed)
        n = self.config.episode_len

        obs = self._begin(rng.uniform(-1.0, 1.0, self.n_actions))
        actions = [self.last_action_rl.copy()]
        norms_c = [obs.norm_c]
        norms_k = [obs.norm_kappa]
        field_start = Field(self._field.values.copy(), 0)
        control_start = ControlMap(self._control.kappa_per_region.copy())
        try:
            for _ in range(n):
                obs = self._advance(rng.uniform(-1.0, 1.0, self.n_actions))
                actions.append(self.last_action_rl.copy())
                norms_c.append(obs.norm_c)
                norms_k.append(obs.norm_kappa)
        except EpisodeAbort as exc:
            raise EnvError(f"baseline generation failed: {exc}") from exc

        self.baseline = BaselineTrace(
            norm_c_bef=np.array(norms_c),
            norm_kappa_bef=np.array(norms_k),
            norm_c0=norms_c[0],
            norm_kappa0=norms_k[0],
        )
        rewards = np.array([
            self._reward(Observation(None, norms_c[i], norms_k[i], i))
            for i in range(n + 1)
        ])
        self.baseline_episode = EpisodeTrace(
            episode=0,
            actions=np.array(actions),
            rewards=rewards,
            norm_c=np.array(norms_c),
            norm_kappa=np.array(norms_k),
        )
        self.baseline_snapshots = {
            "field_start": field_start,
            "control_start": control_start,
            "field_final": Field(self._field.values.copy(), n),
            "control_final": ControlMap(self._control.kappa_per_region.copy()),
        }
        self._step_index = None
        return self.baseline


def write_trace_csv(path, traces, n_actions: int) -> None:
    """Write episode traces as
    ``episode,step,reward,norm_c,norm_kappa,a0..a{n-1}`` rows."""
    header = "episode,step,reward,norm_c,norm_kappa," + ",".join(
        f"a{j}" for j in range(n_actions)
    )
    with open(path, "w") as f:
        f.write(header + "\n")
        for trace in traces:
            for i in range(len(trace.rewards)):
                cells = [
                    str(trace.episode),
                    str(i),
                    repr(float(trace.rewards[i])),
                    repr(float(trace.norm_c[i])),
                    repr(float(trace.norm_kappa[i])),
                ]
                cells.extend(repr(float(a)) for a in trace.actions[i])
                f.write(",".join(cells) + "\n")


def read_trace_csv(path):
    """Read a trace CSV back into a list of :class:`EpisodeTrace`."""
    with open(path) as f:
        header = f.readline().strip().split(",")
        if header[:5] != ["episode", "step", "reward", "norm_c", "norm_kappa"]:
            raise EnvError(f"unrecognized trace header in {path}")
        n_actions = len(header) - 5
        rows = [line.strip().split(",") for line in f if line.strip()]
    traces = []
    current = None
    for row in rows:
        ep = int(row[0])
        if current is None or ep != current["episode"]:
            if current is not None:
                traces.append(current)
            current = {"episode": ep, "rewards": [], "norm_c": [],
                       "norm_kappa": [], "actions": []}
        current["rewards"].append(float(row[2]))
        current["norm_c"].append(float(row[3]))
        current["norm_kappa"].append(float(row[4]))
        current["actions"].append([float(x) for x in row[5:5 + n_actions]])
    if current is not None:
        traces.append(current)
    return [
        EpisodeTrace(
            episode=t["episode"],
            actions=np.array(t["actions"]),
            rewards=np.array(t["rewards"]),
            norm_c=np.array(t["norm_c"]),
            norm_kappa=np.array(t["norm_kappa"]),
        )
        for t in traces
    ]
