"""Packet-switching network simulator with Floyd shortest-path baselines.

Routers form a connected 3-regular graph with integer link lengths and unit
bandwidth per direction. Packets are the agents: at a router they pick one of
the three attached links; admission is by increasing packet slot while the
link's in-transit load plus the candidate size stays within 1.0. Blocked
packets wait (-0.2); traversal takes `length` timesteps; arrivals earn +10 and
are replaced by a fresh random packet so the population stays constant.

Replacement draws come from per-slot RNG streams, so two rollouts seeded alike
see identical packet sequences per slot regardless of policy timing. That is
what makes learned-vs-Floyd comparisons paired.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import StructuralError

DEGREE = 3
LINK_CAPACITY = 1.0
LENGTH_CHOICES = (1, 2, 3)
REWARD_BLOCKED = -0.2
REWARD_DELIVERED = 10.0
_CAP_SLACK = 1e-12


@dataclass(frozen=True)
class Link:
    u: int
    v: int
    length: int

    def other(self, router: int) -> int:
        return self.v if router == self.u else self.u


class Topology:
    def __init__(self, n_routers: int, links, require_regular: bool = True):
        """`require_regular=False` admits arbitrary graphs; only the shortest-
        path baselines accept those (the packet action space needs degree 3)."""
        self.n = n_routers
        self.links = list(links)
        self.incident = [[] for _ in range(n_routers)]
        for lid, link in enumerate(self.links):
            self.incident[link.u].append((lid, link.v))
            self.incident[link.v].append((lid, link.u))
        for r in range(n_routers):
            self.incident[r].sort(key=lambda e: e[1])
            if require_regular and len(self.incident[r]) != DEGREE:
                raise StructuralError(f"router {r} has degree {len(self.incident[r])}")


def generate_topology(n_routers: int, rng: np.random.Generator,
                      max_tries: int = 500) -> Topology:
    """Connected 3-regular graph via the pairing model, lengths uniform in 1..3."""
    if n_routers < 4 or (n_routers * DEGREE) % 2 != 0:
        raise StructuralError("need n >= 4 routers with 3n even")
    for _ in range(max_tries):
        stubs = np.repeat(np.arange(n_routers), DEGREE)
        rng.shuffle(stubs)
        pairs = stubs.reshape(-1, 2)
        edges = set()
        ok = True
        for u, v in pairs:
            u, v = int(u), int(v)
            if u == v or (min(u, v), max(u, v)) in edges:
                ok = False
                break
            edges.add((min(u, v), max(u, v)))
        if not ok or not _connected(n_routers, edges):
            continue
        ordered = sorted(edges)
        lengths = rng.integers(LENGTH_CHOICES[0], LENGTH_CHOICES[-1] + 1,
                               size=len(ordered))
        return Topology(n_routers, [Link(u, v, int(l))
                                    for (u, v), l in zip(ordered, lengths)])
    raise StructuralError("failed to generate a connected 3-regular graph")


def _connected(n: int, edges) -> bool:
    adj = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    seen = [False] * n
    stack = [0]
    seen[0] = True
    count = 1
    while stack:
        for w in adj[stack.pop()]:
            if not seen[w]:
                seen[w] = True
                count += 1
                stack.append(w)
    return count == n


def serialize_topology(topo: Topology) -> str:
    lines = [f"routers {topo.n}"]
    for link in topo.links:
        lines.append(f"link {link.u} {link.v} {link.length}")
    return "\n".join(lines) + "\n"


def parse_topology(text: str) -> Topology:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("routers "):
        raise StructuralError("malformed topology text")
    n = int(lines[0].split()[1])
    links = []
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] != "link" or len(parts) != 4:
            raise StructuralError(f"malformed topology line: {ln!r}")
        links.append(Link(int(parts[1]), int(parts[2]), int(parts[3])))
    return Topology(n, links)


def floyd_all_pairs(topo: Topology):
    """Exact all-pairs shortest paths by summed link lengths.

    Returns (dist, next_hop); next_hop[i, j] is the router after i on a
    shortest i->j path (-1 on the diagonal).
    """
    n = topo.n
    dist = np.full((n, n), np.inf)
    nxt = np.full((n, n), -1, dtype=np.int64)
    np.fill_diagonal(dist, 0.0)
    for link in topo.links:
        if link.length < dist[link.u, link.v]:
            dist[link.u, link.v] = dist[link.v, link.u] = float(link.length)
            nxt[link.u, link.v] = link.v
            nxt[link.v, link.u] = link.u
    for k in range(n):
        for i in range(n):
            dik = dist[i, k]
            if not np.isfinite(dik):
                continue
            through = dik + dist[k]
            better = through < dist[i]
            if better.any():
                dist[i, better] = through[better]
                nxt[i, better] = nxt[i, k]
    return dist, nxt


class Packet:
    __slots__ = ("slot", "at", "link", "direction", "remaining",
                 "src", "dst", "size", "age")

    def __init__(self, slot, src, dst, size):
        self.slot = slot
        self.at = src
        self.link = -1
        self.direction = 0
        self.remaining = 0
        self.src = src
        self.dst = dst
        self.size = size
        self.age = 0

    @property
    def in_transit(self) -> bool:
        return self.at < 0


class PacketSim:
    """Mutable routing state: one topology, N packet slots, per-slot RNG streams."""

    def __init__(self, topo: Topology, n_packets: int, seed):
        self.topo = topo
        self.n_packets = n_packets
        ss = seed if isinstance(seed, np.random.SeedSequence) \
            else np.random.SeedSequence(seed)
        children = ss.spawn(n_packets + 1)
        init = np.random.default_rng(children[0])
        self._slot_rng = [np.random.default_rng(c) for c in children[1:]]
        self.packets = [self._draw_packet(slot, init) for slot in range(n_packets)]
        self.t = 0

    def _draw_packet(self, slot: int, rng: np.random.Generator) -> Packet:
        src = int(rng.integers(self.topo.n))
        dst = int(rng.integers(self.topo.n))
        while dst == src:
            dst = int(rng.integers(self.topo.n))
        size = 1.0 - rng.random()  # uniform in (0, 1]
        return Packet(slot, src, dst, size)

    def link_loads(self) -> np.ndarray:
        """In-transit size totals per (link, direction), recomputed exactly."""
        loads = np.zeros((len(self.topo.links), 2))
        for p in self.packets:
            if p.in_transit:
                loads[p.link, p.direction] += p.size
        return loads

    @property
    def obs_dim(self) -> int:
        return 2 * self.topo.n + 1 + 2 * DEGREE

    def _observe_from(self, router: int, p: Packet, loads) -> np.ndarray:
        n = self.topo.n
        obs = np.zeros(self.obs_dim)
        obs[router] = 1.0
        obs[n + p.dst] = 1.0
        obs[2 * n] = p.size
        base = 2 * n + 1
        for k, (lid, nbr) in enumerate(self.topo.incident[router]):
            link = self.topo.links[lid]
            direction = 0 if router == link.u else 1
            obs[base + 2 * k] = loads[lid, direction]
            obs[base + 2 * k + 1] = float(link.length)
        return obs


def observe(sim: PacketSim, slot: int, loads=None) -> np.ndarray:
    """Decision observation: own attributes plus the three outgoing links'
    (load, length). Requires the packet to sit at a router."""
    p = sim.packets[slot]
    if p.in_transit:
        raise StructuralError("packet in transit has no decision observation")
    if loads is None:
        loads = sim.link_loads()
    return sim._observe_from(p.at, p, loads)


def observe_any(sim: PacketSim, slot: int, loads=None) -> np.ndarray:
    """Like observe(), but a packet in transit reports from the router it is
    about to reach (used to fill transition rows uniformly)."""
    p = sim.packets[slot]
    if loads is None:
        loads = sim.link_loads()
    if p.in_transit:
        link = sim.topo.links[p.link]
        router = link.v if p.direction == 0 else link.u
    else:
        router = p.at
    return sim._observe_from(router, p, loads)


def neighbor_sets(sim: PacketSim, limit: int = 3):
    """For each at-router packet: up to `limit` other packets, nearest first
    (same router, then on an attached cable, then at an adjacent router),
    ties by lower slot. Packets in transit get empty sets."""
    out = []
    for p in sim.packets:
        if p.in_transit:
            out.append(())
            continue
        incident = {lid for lid, _ in sim.topo.incident[p.at]}
        adjacent = {nbr for _, nbr in sim.topo.incident[p.at]}
        ranked = []
        for q in sim.packets:
            if q.slot == p.slot:
                continue
            if q.in_transit:
                if q.link in incident:
                    ranked.append((1, q.slot))
            elif q.at == p.at:
                ranked.append((0, q.slot))
            elif q.at in adjacent:
                ranked.append((2, q.slot))
        ranked.sort()
        out.append(tuple(slot for _, slot in ranked[:limit]))
    return tuple(out)


def step(sim: PacketSim, actions: np.ndarray):
    """Advance one timestep. Actions index each at-router packet's outgoing
    link (positions in the router's sorted incident list); values for packets
    in transit are ignored. Returns (rewards, terminals, info)."""
    n = sim.n_packets
    actions = np.asarray(actions)
    if actions.shape != (n,):
        raise StructuralError("one action per packet required")
    rewards = np.zeros(n)
    terminals = np.zeros(n, dtype=bool)
    info = {"delivered": 0, "delays": [], "blocked": 0}
    loads = sim.link_loads()

    # admission in increasing slot order
    for p in sim.packets:
        if p.in_transit:
            continue
        a = int(actions[p.slot])
        if not 0 <= a < DEGREE:
            raise StructuralError("routing action out of range")
        lid, _ = sim.topo.incident[p.at][a]
        link = sim.topo.links[lid]
        direction = 0 if p.at == link.u else 1
        if loads[lid, direction] + p.size <= LINK_CAPACITY + _CAP_SLACK:
            loads[lid, direction] += p.size
            p.link = lid
            p.direction = direction
            p.remaining = link.length
            p.at = -1
        else:
            rewards[p.slot] += REWARD_BLOCKED
            info["blocked"] += 1

    # transit advance; arrivals leave and are replaced from the slot's stream
    spawned = set()
    for p in list(sim.packets):
        if not p.in_transit:
            continue
        p.remaining -= 1
        if p.remaining > 0:
            continue
        link = sim.topo.links[p.link]
        router = link.v if p.direction == 0 else link.u
        if router == p.dst:
            rewards[p.slot] += REWARD_DELIVERED
            terminals[p.slot] = True
            info["delivered"] += 1
            info["delays"].append(p.age + 1)
            fresh = sim._draw_packet(p.slot, sim._slot_rng[p.slot])
            sim.packets[p.slot] = fresh
            spawned.add(p.slot)
        else:
            p.at = router
            p.link = -1

    for p in sim.packets:
        if p.slot not in spawned:
            p.age += 1
    sim.t += 1
    return rewards, terminals, info


def floyd_actions(sim: PacketSim, nxt: np.ndarray) -> np.ndarray:
    """Next-hop choices following the precomputed shortest-path tables."""
    actions = np.zeros(sim.n_packets, dtype=np.int64)
    for p in sim.packets:
        if p.in_transit:
            continue
        target = nxt[p.at, p.dst]
        for k, (_, nbr) in enumerate(sim.topo.incident[p.at]):
            if nbr == target:
                actions[p.slot] = k
                break
        else:
            raise StructuralError("next-hop router not adjacent")
    return actions


@dataclass
class RoutingMetrics:
    mean_reward: float
    mean_delay: float
    throughput: float
    delivered: int
    reward_sum: float
    delay_sum: float


def floyd_bl_rollout(topo: Topology, n_packets: int, seed, steps: int) -> RoutingMetrics:
    """Shortest-path routing under the same admission rule (wait when blocked)."""
    sim = PacketSim(topo, n_packets, seed)
    _, nxt = floyd_all_pairs(topo)
    return rollout(sim, lambda s: floyd_actions(s, nxt), steps)


def rollout(sim: PacketSim, policy, steps: int) -> RoutingMetrics:
    """Drive `sim` with `policy(sim) -> actions` and aggregate metrics."""
    total_reward = 0.0
    delay_sum = 0.0
    delivered = 0
    for _ in range(steps):
        rewards, _, info = step(sim, policy(sim))
        total_reward += float(rewards.sum())
        delay_sum += float(sum(info["delays"]))
        delivered += info["delivered"]
    mean_delay = delay_sum / delivered if delivered else float("nan")
    return RoutingMetrics(total_reward / (sim.n_packets * steps), mean_delay,
                          delivered / steps, delivered, total_reward, delay_sum)


def ideal_floyd_delay(topo: Topology) -> float:
    """Expected shortest-path delay over uniformly random (src != dst) pairs,
    ignoring bandwidth: the no-contention reference point."""
    dist, _ = floyd_all_pairs(topo)
    n = topo.n
    off = ~np.eye(n, dtype=bool)
    return float(dist[off].mean())
