"""Training, evaluation and generalization protocols tying the pieces together.

A run is reproducible from (config, seed): parameter init, action exploration,
replay sampling and per-episode environment seeds all come from named
SeedSequence children of the run seed. Checkpoints cut at episode boundaries,
so resuming needs no mid-episode environment snapshot.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import gridworld, routing
from .autodiff import AdamState, ParamSet
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .learner import (
    LearnerConfig,
    ReplayBuffer,
    Transition,
    select_actions,
    train_step,
)
from .metrics import MetricsWriter
from .model import GraphQNetwork, ModelConfig, init_params

# seed-stream tags (SeedSequence entropy suffixes)
_SS_INIT = 11
_SS_ACTION = 12
_SS_BUFFER = 13
_SS_TOPOLOGY = 14
_SS_EPISODE = 21
_SS_EVAL = 31


def _rng(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


# ---------------------------------------------------------------------------
# scenario adapters
# ---------------------------------------------------------------------------

class GridAdapter:
    def __init__(self, cfg: RunConfig):
        self.scenario = cfg.scenario
        self.n_agents = cfg.n_agents
        self.n_other = cfg.n_enemies if cfg.scenario == "battle" else cfg.n_foods
        self.episode_length = cfg.episode_length
        self.neighbor_limit = cfg.neighbor_limit
        self.obs_dim = gridworld.OBS_LEN
        self.n_actions = 9 if cfg.scenario == "battle" else 8
        self.world = None

    def codec(self):
        return gridworld.obs_codec()

    def reset(self, seed_entropy):
        self.world = gridworld.reset(self.scenario, self.n_agents, self.n_other,
                                     _rng(*seed_entropy), self.episode_length)

    def observe_all(self):
        obs = np.stack([gridworld.observe(self.world, i)
                        for i in range(self.n_agents)])
        return obs, np.ones(self.n_agents, dtype=bool)

    def neighbor_lists(self):
        return gridworld.neighbor_sets(self.world, self.neighbor_limit)

    def step(self, actions):
        return gridworld.step(self.world, actions)


class RoutingAdapter:
    def __init__(self, cfg: RunConfig, topology: routing.Topology, n_packets=None):
        self.topology = topology
        self.n_agents = n_packets if n_packets is not None else cfg.n_agents
        self.episode_length = cfg.episode_length
        self.neighbor_limit = cfg.neighbor_limit
        self.obs_dim = 2 * topology.n + 1 + 2 * routing.DEGREE
        self.n_actions = routing.DEGREE
        self.sim = None

    def codec(self):
        def encode(obs):
            return obs.astype(np.float32)

        def decode(raw):
            return raw.astype(np.float64)

        return encode, decode

    def reset(self, seed_entropy):
        self.sim = routing.PacketSim(self.topology, self.n_agents,
                                     np.random.SeedSequence(list(seed_entropy)))

    def observe_all(self):
        loads = self.sim.link_loads()
        obs = np.stack([routing.observe_any(self.sim, s, loads)
                        for s in range(self.n_agents)])
        active = np.array([not p.in_transit for p in self.sim.packets])
        return obs, active

    def neighbor_lists(self):
        return routing.neighbor_sets(self.sim, self.neighbor_limit)

    def step(self, actions):
        return routing.step(self.sim, actions)


def make_adapter(cfg: RunConfig, topology=None):
    if cfg.scenario in ("battle", "jungle"):
        return GridAdapter(cfg)
    if topology is None:
        topology = routing.generate_topology(
            cfg.n_routers, _rng(cfg.seed, _SS_TOPOLOGY))
    return RoutingAdapter(cfg, topology)


def model_config_for(cfg: RunConfig, obs_dim: int, n_actions: int) -> ModelConfig:
    return ModelConfig(
        obs_dim=obs_dim, n_actions=n_actions, encoder_units=cfg.encoder_units,
        feature_dim=cfg.feature_dim, conv_layers=cfg.conv_layers,
        attention_heads=cfg.attention_heads, head_dim=cfg.head_dim, tau=cfg.tau,
        kernel=cfg.kernel, reg_layer=cfg.reg_layer,
        neighbor_limit=cfg.neighbor_limit, init_std=cfg.init_std)


def learner_config_for(cfg: RunConfig) -> LearnerConfig:
    return LearnerConfig(
        gamma=cfg.gamma, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, target_blend=cfg.target_blend,
        reg_weight=cfg.reg_weight, epsilon_start=cfg.epsilon_start,
        epsilon_decay=cfg.epsilon_decay, epsilon_floor=cfg.epsilon_floor,
        buffer_capacity=cfg.buffer_capacity,
        warmup_transitions=cfg.warmup_transitions,
        stop_gradient_target=cfg.stop_gradient_target,
        recompute_next_graph=cfg.recompute_next_graph)


def _episode_record(cfg, episode, epsilon, reward_sum, infos, train_stats):
    n_steps = cfg.episode_length
    record = {
        "episode": episode,
        "reward_per_agent_step": reward_sum / (cfg.n_agents * n_steps),
        "reward_episode_total": reward_sum,
        "epsilon": epsilon,
        "train_steps": train_stats["count"],
        "loss_mean": (train_stats["loss"] / train_stats["count"]
                      if train_stats["count"] else None),
        "td_mean": (train_stats["td"] / train_stats["count"]
                    if train_stats["count"] else None),
        "kl_mean": (train_stats["kl"] / train_stats["count"]
                    if train_stats["count"] else None),
        "kills": None, "deaths": None, "kill_death_ratio": None, "attacks": None,
        "mean_delay": None, "throughput": None, "delivered": None,
    }
    if cfg.scenario == "battle":
        kills = sum(i["kills"] for i in infos)
        deaths = sum(i["deaths"] for i in infos)
        record["kills"] = kills
        record["deaths"] = deaths
        record["kill_death_ratio"] = kills / deaths if deaths else float(kills)
    elif cfg.scenario == "jungle":
        record["attacks"] = sum(i["agent_attacks"] for i in infos)
    else:
        delays = [d for i in infos for d in i["delays"]]
        delivered = sum(i["delivered"] for i in infos)
        record["mean_delay"] = float(np.mean(delays)) if delays else None
        record["throughput"] = delivered / n_steps
        record["delivered"] = delivered
    return record


def train(cfg: RunConfig, out_dir: str, resume_from: str | None = None,
          full_state_final: bool = False, log=None) -> str:
    """Run training; returns the path of the final checkpoint."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)

    topology_text = None
    resume = None
    if resume_from:
        resume = load_checkpoint(resume_from)
        topology_text = resume.topology_text

    if cfg.scenario == "routing":
        if topology_text is None:
            topo = routing.generate_topology(cfg.n_routers,
                                             _rng(cfg.seed, _SS_TOPOLOGY))
            topology_text = routing.serialize_topology(topo)
        else:
            topo = routing.parse_topology(topology_text)
        with open(os.path.join(out_dir, "topology.txt"), "w", encoding="utf-8") as f:
            f.write(topology_text)
        adapter = RoutingAdapter(cfg, topo)
    else:
        adapter = GridAdapter(cfg)

    mcfg = model_config_for(cfg, adapter.obs_dim, adapter.n_actions)
    net = GraphQNetwork(mcfg)
    lcfg = learner_config_for(cfg)

    if resume is None:
        params = init_params(mcfg, _rng(cfg.seed, _SS_INIT))
        target_params = params.copy()
        adam = AdamState(params, cfg.learning_rate)
        action_rng = _rng(cfg.seed, _SS_ACTION)
        buffer_rng = _rng(cfg.seed, _SS_BUFFER)
        start_episode = 0
        buffer = ReplayBuffer(cfg.buffer_capacity, adapter.codec())
    else:
        params = resume.params
        target_params = resume.target_params
        adam = resume.adam
        action_rng = resume.restore_rng("action")
        buffer_rng = resume.restore_rng("buffer")
        start_episode = resume.episode
        buffer = ReplayBuffer(cfg.buffer_capacity, adapter.codec())
        if resume.buffer_items is not None:
            buffer.restore(resume.buffer_items, resume.buffer_meta["next"])

    writer = MetricsWriter(out_dir)

    def checkpoint_path(tag):
        return os.path.join(out_dir, f"checkpoint_{tag}.gckp")

    def write_checkpoint(tag, episode, with_buffer):
        save_checkpoint(
            checkpoint_path(tag), run_config=cfg, model_config=mcfg,
            params=params, target_params=target_params, adam=adam,
            episode=episode,
            rng_states={"action": action_rng.bit_generator.state,
                        "buffer": buffer_rng.bit_generator.state},
            topology_text=topology_text,
            buffer=buffer if with_buffer else None)
        return checkpoint_path(tag)

    for episode in range(start_episode, cfg.episodes):
        epsilon = lcfg.epsilon_at(episode)
        adapter.reset((cfg.seed, _SS_EPISODE, episode))
        obs, active = adapter.observe_all()
        nbrs = adapter.neighbor_lists()
        reward_sum = 0.0
        infos = []
        train_stats = {"count": 0, "loss": 0.0, "td": 0.0, "kl": 0.0}
        for _ in range(cfg.episode_length):
            q = net.q_values(obs, nbrs, params)
            actions = select_actions(q, epsilon, action_rng)
            rewards, terminals, info = adapter.step(actions)
            next_obs, next_active = adapter.observe_all()
            next_nbrs = adapter.neighbor_lists()
            buffer.add(Transition(obs, actions, next_obs, rewards, terminals,
                                  active, nbrs, next_nbrs))
            result = train_step(buffer, net, params, target_params, adam, lcfg,
                                buffer_rng)
            if result is not None:
                train_stats["count"] += 1
                train_stats["loss"] += result.loss
                train_stats["td"] += result.td_term
                train_stats["kl"] += result.kl_term
            reward_sum += float(rewards.sum())
            infos.append(info)
            obs, active, nbrs = next_obs, next_active, next_nbrs
        writer.write(_episode_record(cfg, episode, epsilon, reward_sum, infos,
                                     train_stats))
        if log is not None and (episode + 1) % max(1, cfg.episodes // 20) == 0:
            log(f"episode {episode + 1}/{cfg.episodes}")
        if cfg.checkpoint_every and (episode + 1) % cfg.checkpoint_every == 0 \
                and episode + 1 < cfg.episodes:
            write_checkpoint(f"ep{episode + 1}", episode + 1, False)

    return write_checkpoint("final", cfg.episodes, full_state_final)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    games: int
    mean_reward: float
    reward_total: float
    kills: int | None = None
    deaths: int | None = None
    kill_death_ratio: float | None = None
    attacks: float | None = None
    mean_delay: float | None = None
    throughput: float | None = None
    delivered: int | None = None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items()}


def _greedy_rollout(adapter, net, params, steps):
    obs, _ = adapter.observe_all()
    nbrs = adapter.neighbor_lists()
    reward_sum = 0.0
    infos = []
    for _ in range(steps):
        q = net.q_values(obs, nbrs, params)
        actions = np.argmax(q, axis=1)
        rewards, _, info = adapter.step(actions)
        obs, _ = adapter.observe_all()
        nbrs = adapter.neighbor_lists()
        reward_sum += float(rewards.sum())
        infos.append(info)
    return reward_sum, infos


def evaluate(checkpoint_path: str, games: int | None = None,
             eval_seed: int = 1000, n_packets: int | None = None) -> EvalResult:
    """Greedy-policy evaluation of a checkpoint on its own scenario."""
    ck = load_checkpoint(checkpoint_path)
    cfg = ck.run_config
    games = games if games is not None else cfg.eval_games
    net = GraphQNetwork(ck.model_config)

    topo = routing.parse_topology(ck.topology_text) if ck.topology_text else None
    if cfg.scenario == "routing":
        adapter = RoutingAdapter(cfg, topo, n_packets=n_packets)
    else:
        if n_packets is not None:
            raise ConfigError("packet-count override only applies to routing")
        adapter = GridAdapter(cfg)
    if adapter.obs_dim != ck.model_config.obs_dim \
            or adapter.n_actions != ck.model_config.n_actions:
        raise ConfigError("checkpoint does not match the scenario's dimensions")

    total_reward = 0.0
    kills = deaths = attacks = delivered = 0
    delays = []
    steps = cfg.episode_length
    for game in range(games):
        adapter.reset((eval_seed, _SS_EVAL, game))
        reward, infos = _greedy_rollout(adapter, net, ck.params, steps)
        total_reward += reward
        if cfg.scenario == "battle":
            kills += sum(i["kills"] for i in infos)
            deaths += sum(i["deaths"] for i in infos)
        elif cfg.scenario == "jungle":
            attacks += sum(i["agent_attacks"] for i in infos)
        else:
            delivered += sum(i["delivered"] for i in infos)
            delays.extend(d for i in infos for d in i["delays"])

    n_agents = adapter.n_agents
    result = EvalResult(
        games=games,
        mean_reward=total_reward / (games * steps * n_agents),
        reward_total=total_reward)
    if cfg.scenario == "battle":
        result.kills = kills
        result.deaths = deaths
        # zero deaths would divide by zero; report kills in that case
        result.kill_death_ratio = kills / deaths if deaths else float(kills)
    elif cfg.scenario == "jungle":
        result.attacks = attacks / games
    else:
        result.mean_delay = float(np.mean(delays)) if delays else float("nan")
        result.throughput = delivered / (games * steps)
        result.delivered = delivered
    return result


def generalization_sweep(checkpoint_path: str, loads, games: int = 10,
                         eval_seed: int = 2000):
    """Apply a routing checkpoint at heavier loads without retraining, paired
    with Floyd-with-bandwidth-limit on the same topology and packet streams."""
    ck = load_checkpoint(checkpoint_path)
    cfg = ck.run_config
    if cfg.scenario != "routing":
        raise ConfigError("generalization sweep applies to routing checkpoints")
    topo = routing.parse_topology(ck.topology_text)
    net = GraphQNetwork(ck.model_config)
    steps = cfg.episode_length
    ideal = routing.ideal_floyd_delay(topo)
    _, nxt = routing.floyd_all_pairs(topo)

    rows = []
    for load in loads:
        for policy in ("learned", "floyd-bl"):
            total_reward = 0.0
            delay_sum = 0.0
            delivered = 0
            for game in range(games):
                # identical entropy for both policies: paired packet streams
                seed = np.random.SeedSequence([eval_seed, load, game])
                if policy == "learned":
                    adapter = RoutingAdapter(cfg, topo, n_packets=load)
                    adapter.sim = routing.PacketSim(topo, load, seed)
                    reward, infos = _greedy_rollout(adapter, net, ck.params, steps)
                    total_reward += reward
                    delivered += sum(i["delivered"] for i in infos)
                    delay_sum += sum(d for i in infos for d in i["delays"])
                else:
                    sim = routing.PacketSim(topo, load, seed)
                    m = routing.rollout(sim, lambda s: routing.floyd_actions(s, nxt),
                                        steps)
                    total_reward += m.reward_sum
                    delivered += m.delivered
                    delay_sum += m.delay_sum
            rows.append({
                "load": load,
                "policy": policy,
                "mean_reward": total_reward / (games * steps * load),
                "mean_delay": delay_sum / delivered if delivered else float("nan"),
                "throughput": delivered / (games * steps),
                "delivered": delivered,
                "ideal_floyd_delay": ideal,
            })
    return rows
