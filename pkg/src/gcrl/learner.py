"""Q-learning over the agent graph.

Transitions are stored and sampled per timestep (whole graphs, not individual
agents). The loss is the mean squared TD error over agents plus an optional
KL penalty pulling each agent's upper-layer attention distribution toward the
distribution the current network produces on the next observations. Targets
reuse the adjacency stored at time t, so the graph is held fixed across the
two timesteps of every TD pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    AdamState,
    ParamSet,
    StructuralError,
    Tape,
    Tensor,
    add,
    adam_step,
    backward,
    gather_rows,
    kl_rows,
    reduce_mean,
    scale,
    soft_update,
    square,
)
from .model import GatherPlan, GraphQNetwork


@dataclass
class LearnerConfig:
    gamma: float
    batch_size: int = 10
    learning_rate: float = 1e-4
    target_blend: float = 0.01       # soft-update coefficient
    reg_weight: float = 0.03         # KL penalty weight
    epsilon_start: float = 0.6
    epsilon_decay: float = 0.996
    epsilon_floor: float = 0.01
    buffer_capacity: int = 200_000
    warmup_transitions: int = 200
    stop_gradient_target: bool = True    # treat the KL target as a constant
    recompute_next_graph: bool = False   # use t+1 adjacency for targets (ablation)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise StructuralError("gamma must be in (0, 1)")
        if self.reg_weight < 0.0 or self.batch_size < 1:
            raise StructuralError("reg_weight >= 0 and batch_size >= 1 required")

    def epsilon_at(self, episode: int) -> float:
        return max(self.epsilon_floor,
                   self.epsilon_start * self.epsilon_decay ** episode)


@dataclass
class Transition:
    """One timestep of the whole graph: (O, A, O', R, C) plus bookkeeping.

    `active` marks agents that actually took a decision this step (packets in
    transit sit out). `neighbors` is the adjacency recorded at time t and is
    reused for the next observations unless the unfixed-graph ablation asks
    for `next_neighbors`.
    """
    obs: np.ndarray            # (N, obs_dim)
    actions: np.ndarray        # (N,) int
    next_obs: np.ndarray       # (N, obs_dim)
    rewards: np.ndarray        # (N,)
    terminals: np.ndarray      # (N,) bool
    active: np.ndarray         # (N,) bool
    neighbors: tuple           # per-agent tuple of neighbor ids at time t
    next_neighbors: tuple      # per-agent tuple at time t+1

    def __post_init__(self):
        n = len(self.obs)
        fields = (self.actions, self.next_obs, self.rewards, self.terminals,
                  self.active, self.neighbors, self.next_neighbors)
        if any(len(f) != n for f in fields):
            raise StructuralError("transition collections must all have N entries")


class ReplayBuffer:
    """FIFO ring of transitions with uniform sampling.

    An optional codec (encode, decode) compresses the observation arrays at
    rest; everything else is stored as given, so sampled transitions share the
    originally stored adjacency objects.
    """

    def __init__(self, capacity: int, codec=None):
        if capacity < 1:
            raise StructuralError("capacity must be positive")
        self.capacity = capacity
        self._items = []
        self._next = 0
        self._codec = codec

    def __len__(self):
        return len(self._items)

    def add(self, tr: Transition):
        if self._codec is not None:
            enc = self._codec[0]
            tr = Transition(enc(tr.obs), tr.actions, enc(tr.next_obs), tr.rewards,
                            tr.terminals, tr.active, tr.neighbors, tr.next_neighbors)
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._next] = tr
        self._next = (self._next + 1) % self.capacity

    def sample(self, rng: np.random.Generator, k: int):
        idx = rng.integers(0, len(self._items), size=k)
        out = []
        for i in idx:
            tr = self._items[i]
            if self._codec is not None:
                dec = self._codec[1]
                tr = Transition(dec(tr.obs), tr.actions, dec(tr.next_obs), tr.rewards,
                                tr.terminals, tr.active, tr.neighbors, tr.next_neighbors)
            out.append(tr)
        return out

    def state(self):
        return list(self._items), self._next

    def restore(self, items, next_slot):
        self._items = list(items)
        self._next = next_slot


@dataclass
class StackedBatch:
    """Minibatch flattened to one row per (sample, agent)."""
    obs: np.ndarray
    next_obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    active_rows: np.ndarray    # indices of rows that took a decision
    plan: GatherPlan | None
    target_plan: GatherPlan | None
    neighbors_used: tuple      # per-sample adjacency objects fed to the plan
    target_neighbors_used: tuple


def stack_batch(batch, cfg: LearnerConfig, width: int, need_plan: bool) -> StackedBatch:
    obs = np.concatenate([tr.obs for tr in batch], axis=0)
    next_obs = np.concatenate([tr.next_obs for tr in batch], axis=0)
    actions = np.concatenate([tr.actions for tr in batch])
    rewards = np.concatenate([tr.rewards for tr in batch])
    terminals = np.concatenate([tr.terminals for tr in batch])
    active = np.concatenate([tr.active for tr in batch])
    plan = target_plan = None
    neighbors_used = tuple(tr.neighbors for tr in batch)
    if cfg.recompute_next_graph:
        target_neighbors_used = tuple(tr.next_neighbors for tr in batch)
    else:
        target_neighbors_used = neighbors_used
    if need_plan:
        plan = GatherPlan.stack(neighbors_used, width)
        if cfg.recompute_next_graph:
            target_plan = GatherPlan.stack(target_neighbors_used, width)
        else:
            target_plan = plan
    return StackedBatch(obs, next_obs, actions, rewards, terminals,
                        np.flatnonzero(active), plan, target_plan,
                        neighbors_used, target_neighbors_used)


def td_targets(stacked: StackedBatch, net: GraphQNetwork, target_params: ParamSet,
               gamma: float) -> np.ndarray:
    """y = r + gamma * max_a' Q(O', a'; target params); terminal rows bootstrap 0."""
    res = net.forward(stacked.next_obs, stacked.target_plan, target_params)
    best = res.q.data.max(axis=1)
    cont = np.where(stacked.terminals, 0.0, gamma * best)
    return stacked.rewards + cont


@dataclass
class LossResult:
    loss: Tensor
    tape: Tape
    td_term: float
    kl_term: float
    targets: np.ndarray
    target_neighbors_used: tuple   # identity probe for the fixed-graph property


def compute_loss(stacked: StackedBatch, net: GraphQNetwork, params: ParamSet,
                 target_params: ParamSet, cfg: LearnerConfig) -> LossResult:
    """TD + KL loss on the tape; returns scalar loss and diagnostics."""
    mcfg = net.config
    act = stacked.active_rows
    if act.size == 0:
        raise StructuralError("batch has no acting agents")
    y = td_targets(stacked, net, target_params, cfg.gamma)

    regularize = cfg.reg_weight > 0.0 and mcfg.conv_layers > 0
    alpha_target = None
    if regularize and cfg.stop_gradient_target:
        alpha_next = net.attention_maps(stacked.next_obs, stacked.target_plan,
                                        params, mcfg.reg_layer)
        alpha_target = Tensor(alpha_next[act])

    onehot = np.zeros((len(stacked.actions), mcfg.n_actions))
    onehot[act, stacked.actions[act]] = 1.0

    tape = Tape()
    with tape:
        res = net.forward(stacked.obs, stacked.plan, params)
        picked = scale(reduce_mean(scale(res.q, onehot), axis=1), mcfg.n_actions)
        diff = add(gather_rows(picked, act), Tensor(-y[act]))
        td = reduce_mean(square(diff))
        kl_value = 0.0
        if regularize:
            if alpha_target is None:
                nxt = net.forward(stacked.next_obs, stacked.target_plan, params,
                                  upto_layer=mcfg.reg_layer, want_q=False)
                alpha_target = gather_rows(nxt.attention[mcfg.reg_layer - 1], act)
            kl = kl_rows(gather_rows(res.attention[mcfg.reg_layer - 1], act),
                         alpha_target)
            kl_mean = reduce_mean(kl)
            loss = add(td, scale(kl_mean, cfg.reg_weight))
            kl_value = kl_mean.item()
        else:
            loss = td
    return LossResult(loss, tape, td.item(), kl_value, y,
                      stacked.target_neighbors_used)


@dataclass
class TrainStepResult:
    loss: float
    td_term: float
    kl_term: float


def train_step(buffer: ReplayBuffer, net: GraphQNetwork, params: ParamSet,
               target_params: ParamSet, adam: AdamState, cfg: LearnerConfig,
               rng: np.random.Generator) -> TrainStepResult | None:
    """Sample, optimize, soft-update. Returns None while the buffer warms up."""
    if len(buffer) < max(cfg.warmup_transitions, cfg.batch_size):
        return None
    batch = buffer.sample(rng, cfg.batch_size)
    stacked = stack_batch(batch, cfg, net.config.neighbor_limit + 1,
                          need_plan=net.config.conv_layers > 0)
    if stacked.active_rows.size == 0:
        return None  # every sampled agent sat this step out
    result = compute_loss(stacked, net, params, target_params, cfg)
    grads = backward(result.tape, result.loss, params)
    adam_step(params, grads, adam)
    soft_update(target_params, params, cfg.target_blend)
    return TrainStepResult(result.loss.item(), result.td_term, result.kl_term)


def select_actions(q_values: np.ndarray, epsilon: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Independent epsilon-greedy per agent; argmax ties go to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise StructuralError("epsilon must be in [0, 1]")
    n, a = q_values.shape
    actions = np.empty(n, dtype=np.int64)
    for i in range(n):
        if rng.random() < epsilon:
            actions[i] = rng.integers(a)
        else:
            actions[i] = int(np.argmax(q_values[i]))
    return actions
