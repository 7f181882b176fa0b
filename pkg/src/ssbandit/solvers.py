"""Lin-UCB, Neural-UCB and SS-Neural-UCB behind one select / observe / maybe_retrain interface."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .env import BanditEnv, Context
from .errors import ConfigurationError, ContractError
from .linalg import ridge_init, ridge_rebuild, ridge_update, ucb_score
from .seeding import spawn_streams

SOLVERS = ("lin_ucb", "neural_ucb", "ss_neural_ucb")
NEURAL = ("neural_ucb", "ss_neural_ucb")
FEATURE_CHUNK = 1024


@dataclass(frozen=True)
class PolicyConfig:
    alpha: float = 1.0
    lam: float = 1.0
    beta: int = 500
    mu: float = 0.9
    epochs: int = 10
    optimizer: str = "sgd"
    learning_rate: float = 0.25
    repr_dim: int = 128
    conv_filters: tuple[int, ...] = (16, 32)
    batch_size: int = 64
    warm_start: bool = True
    reinit_on_retrain: bool = False

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        if self.alpha < 0:
            raise ConfigurationError("alpha must be nonnegative")
        if not self.lam > 0:
            raise ConfigurationError("lambda must be positive")
        if self.beta < 1:
            raise ConfigurationError("beta must be >= 1")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigurationError("mu must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.repr_dim < 1:
            raise ConfigurationError("epochs, batch_size and repr_dim must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ConfigurationError("learning rate must be nonnegative")

    def with_overrides(self, **kw) -> PolicyConfig:
        return replace(self, **kw)


class History:
    """Append-only (image, arm, reward) log with per-arm round indices."""

    def __init__(self, num_arms: int):
        self.images: list[np.ndarray] = []
        self.arms: list[int] = []
        self.rewards: list[float] = []
        self.per_arm: list[list[int]] = [[] for _ in range(num_arms)]

    def append(self, image, arm: int, reward: float) -> None:
        self.per_arm[arm].append(len(self.arms))
        self.images.append(image)
        self.arms.append(int(arm))
        self.rewards.append(float(reward))

    def __len__(self):
        return len(self.arms)

    def arrays(self):
        return np.stack(self.images), np.asarray(self.arms, dtype=np.intp), np.asarray(self.rewards)


@dataclass
class RoundRecord:
    seed: int
    solver: str
    t: int
    chosen_arm: int
    reward: int
    cumulative_reward: int
    max_ucb_score: float
    retrained: bool


@dataclass
class PolicyState:
    kind: str
    config: PolicyConfig
    num_arms: int
    context_shape: tuple[int, int, int]
    seed: int
    label: str = ""
    ridge: list = field(default_factory=list)
    net: nn.RepresentationNet | None = None
    optimizer: nn.OptimizerState | None = None
    history: History | None = None
    rngs: dict = field(default_factory=dict)
    round: int = 0
    last_scores: np.ndarray | None = None
    _cached: tuple | None = field(default=None, repr=False)

    @property
    def is_neural(self) -> bool:
        return self.kind in NEURAL

    @property
    def feature_dim(self) -> int:
        return self.config.repr_dim if self.is_neural else int(np.prod(self.context_shape))


def make_policy(kind: str, config: PolicyConfig, num_arms: int, context_shape, seed: int, label=None) -> PolicyState:
    if kind not in SOLVERS:
        raise ConfigurationError(f"unknown solver {kind!r}; choose from {SOLVERS}")
    state = PolicyState(
        kind=kind,
        config=config,
        num_arms=num_arms,
        context_shape=tuple(context_shape),
        seed=int(seed),
        label=label or kind,
        rngs=spawn_streams(seed),
        history=History(num_arms),
    )
    if state.is_neural:
        spec = nn.NetworkSpec.default(context_shape, num_arms, config.repr_dim, config.conv_filters)
        state.net = nn.RepresentationNet.init(spec, state.rngs["net_init"])
        state.optimizer = nn.OptimizerState(kind=config.optimizer, learning_rate=config.learning_rate)
    state.ridge = [ridge_init(state.feature_dim, config.lam) for _ in range(num_arms)]
    return state


def features(state: PolicyState, context: Context) -> np.ndarray:
    """Raw flattened pixels for Lin-UCB, the current network representation otherwise."""
    if state._cached is not None and state._cached[0] is context:
        return state._cached[1]
    if tuple(context.image.shape) != state.context_shape:
        raise ContractError(f"context shape {context.image.shape} != {state.context_shape}")
    if state.is_neural:
        z = nn.forward_repr(state.net, context.image)
    else:
        z = np.ascontiguousarray(context.flat, dtype=np.float64)
    state._cached = (context, z)
    return z


def arm_scores(state: PolicyState, z: np.ndarray) -> np.ndarray:
    alpha = state.config.alpha
    return np.array([ucb_score(r, z, alpha) for r in state.ridge])


def select_arm(state: PolicyState, context: Context) -> int:
    """Warm-start arms 0..N-1 first, then the UCB argmax with random tie-breaking."""
    z = features(state, context)
    scores = arm_scores(state, z)
    state.last_scores = scores
    if state.config.warm_start and state.round < state.num_arms:
        return state.round
    best = np.flatnonzero(scores == scores.max())
    if len(best) == 1:
        return int(best[0])
    return int(best[state.rngs["tie_break"].integers(len(best))])


def observe(state: PolicyState, context: Context, arm: int, reward: float) -> PolicyState:
    if not 0 <= arm < state.num_arms:
        raise ContractError(f"arm {arm} outside [0, {state.num_arms})")
    z = features(state, context)
    ridge_update(state.ridge[arm], z, reward)
    state.history.append(context.image, arm, reward)
    state.round += 1
    state._cached = None
    return state


def _batch_features(net: nn.RepresentationNet, images: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [nn.forward_repr(net, images[i:i + FEATURE_CHUNK]) for i in range(0, len(images), FEATURE_CHUNK)]
    )


def maybe_retrain(state: PolicyState) -> bool:
    """Retrain and rebuild every arm's ridge state when ``round`` is a positive multiple of beta."""
    cfg = state.config
    if not state.is_neural or state.round == 0 or state.round % cfg.beta != 0:
        return False
    if len(state.history) == 0:
        raise ContractError("retraining triggered with an empty history")
    images, arms, rewards = state.history.arrays()
    if cfg.reinit_on_retrain:
        state.net = nn.RepresentationNet.init(state.net.spec, state.rngs["net_init"])
        state.optimizer = nn.OptimizerState(kind=cfg.optimizer, learning_rate=cfg.learning_rate)
    nn.train(
        state.net,
        state.optimizer,
        images,
        arms,
        rewards,
        epochs=cfg.epochs,
        rng=state.rngs["minibatch"],
        mu=cfg.mu if state.kind == "ss_neural_ucb" else None,
        beta=cfg.beta,
        t=state.round,
        batch_size=cfg.batch_size,
    )
    z = _batch_features(state.net, images)
    state.ridge = [
        ridge_rebuild(cfg.repr_dim, cfg.lam, z[idx], rewards[idx])
        for idx in (np.asarray(ix, dtype=np.intp) for ix in state.history.per_arm)
    ]
    state._cached = None
    return True


def run_policy(env: BanditEnv, state: PolicyState, horizon: int, progress=None) -> list[RoundRecord]:
    """Play ``horizon`` rounds: select, step, observe, maybe retrain."""
    if horizon > env.horizon - env.cursor:
        raise ContractError(f"horizon {horizon} exceeds the {env.horizon - env.cursor} rounds left")
    records = []
    cumulative = 0
    for t in range(horizon):
        context = env.observe()
        arm = select_arm(state, context)
        outcome = env.step(arm)
        observe(state, context, arm, outcome.reward)
        retrained = maybe_retrain(state)
        cumulative += outcome.reward
        records.append(
            RoundRecord(
                seed=state.seed,
                solver=state.label,
                t=t,
                chosen_arm=arm,
                reward=outcome.reward,
                cumulative_reward=cumulative,
                max_ucb_score=float(state.last_scores.max()),
                retrained=retrained,
            )
        )
        if progress is not None:
            progress(t, cumulative)
    return records
