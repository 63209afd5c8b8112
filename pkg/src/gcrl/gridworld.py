"""Lite 30x30 grid engine for the battle and jungle scenarios.

Battle: N learning agents fight L scripted enemies. Agents move or attack one
of the four neighbor cells (plus idle); enemies move up to two cells (any cell
at L1 distance 1 or 2) or attack any of the eight surrounding cells. Everyone
has 6 hit points, the fallen are replaced at random free cells so the
population stays constant.

Jungle: N agents and L stationary one-bite foods. Agents move or attack one of
the four neighbor cells; eating gives +1, attacking another agent +2 (victim
-4), hitting a blank cell -0.01.

All attacks resolve simultaneously against pre-step positions; moves are then
processed in increasing entity id (losers of a cell conflict stay put); damage
and deaths apply last, followed by respawns.
"""

from __future__ import annotations

import numpy as np

from .autodiff import StructuralError

GRID = 30
VIEW = 11
HALF = VIEW // 2
OBS_LEN = VIEW * VIEW * 5 + 2
BATTLE_HP = 6

KIND_AGENT = 1
KIND_ENEMY = 2
KIND_FOOD = 3

# action layout: 0-3 move, 4-7 attack (same direction order), battle adds 8 idle
DIRS4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
DIRS8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))
# enemy move set: the 12 cells at L1 distance 1 or 2, in this fixed tie-break order
MOVES12 = ((-2, 0), (-1, -1), (-1, 0), (-1, 1), (0, -2), (0, -1),
           (0, 1), (0, 2), (1, -1), (1, 0), (1, 1), (2, 0))

REWARD_BLANK_ATTACK = -0.01
BATTLE_HIT_ENEMY = 5.0
BATTLE_KILLED = -2.0
JUNGLE_EAT = 1.0
JUNGLE_HIT_AGENT = 2.0
JUNGLE_ATTACKED = -4.0


class Entity:
    __slots__ = ("eid", "row", "col", "kind", "hp", "alive")

    def __init__(self, eid, row, col, kind, hp):
        self.eid = eid
        self.row = row
        self.col = col
        self.kind = kind
        self.hp = hp
        self.alive = True


class GridWorld:
    def __init__(self, scenario: str, n_agents: int, n_other: int,
                 rng: np.random.Generator, episode_length: int):
        if scenario not in ("battle", "jungle"):
            raise StructuralError(f"unknown scenario {scenario!r}")
        total = n_agents + n_other
        if total > GRID * GRID:
            raise StructuralError("entity count exceeds free cells")
        self.scenario = scenario
        self.n_agents = n_agents
        self.n_other = n_other
        self.episode_length = episode_length
        self.rng = rng
        self.t = 0
        self.kind_grid = np.zeros((GRID, GRID), dtype=np.int8)
        self.hp_grid = np.zeros((GRID, GRID))
        self.eid_grid = np.full((GRID, GRID), -1, dtype=np.int32)

        cells = rng.choice(GRID * GRID, size=total, replace=False)
        other_kind = KIND_ENEMY if scenario == "battle" else KIND_FOOD
        hp = BATTLE_HP if scenario == "battle" else 0
        other_hp = BATTLE_HP if scenario == "battle" else 1
        self.agents = []
        self.others = []
        for i in range(n_agents):
            e = Entity(i, cells[i] // GRID, cells[i] % GRID, KIND_AGENT, hp)
            self.agents.append(e)
            self._place(e)
        for j in range(n_other):
            c = cells[n_agents + j]
            e = Entity(n_agents + j, c // GRID, c % GRID, other_kind, other_hp)
            self.others.append(e)
            self._place(e)

    @property
    def n_actions(self) -> int:
        return 9 if self.scenario == "battle" else 8

    def _place(self, e: Entity):
        self.kind_grid[e.row, e.col] = e.kind
        self.eid_grid[e.row, e.col] = e.eid
        self.hp_grid[e.row, e.col] = self._hp_norm(e)

    def _clear(self, e: Entity):
        self.kind_grid[e.row, e.col] = 0
        self.eid_grid[e.row, e.col] = -1
        self.hp_grid[e.row, e.col] = 0.0

    def _hp_norm(self, e: Entity) -> float:
        if self.scenario == "battle":
            return e.hp / BATTLE_HP
        return 1.0 if e.kind == KIND_FOOD else 0.0

    def entity_by_eid(self, eid: int) -> Entity:
        return self.agents[eid] if eid < self.n_agents else self.others[eid - self.n_agents]

    def _spawn_replacement(self, slot_list, index: int):
        free = np.flatnonzero(self.eid_grid.ravel() == -1)
        cell = int(free[self.rng.integers(len(free))])
        old = slot_list[index]
        e = Entity(old.eid, cell // GRID, cell % GRID, old.kind, BATTLE_HP)
        slot_list[index] = e
        self._place(e)


def reset(scenario: str, n_agents: int, n_other: int, rng: np.random.Generator,
          episode_length: int | None = None) -> GridWorld:
    if episode_length is None:
        episode_length = 300 if scenario == "battle" else 120
    return GridWorld(scenario, n_agents, n_other, rng, episode_length)


def enemy_policy(world: GridWorld, enemy: Entity):
    """Scripted battle opponent.

    Attack the lowest-index agent in the 8-neighborhood if any; otherwise take
    the 12-move step minimizing L1 distance to the nearest agent (ties broken
    by MOVES12 order). Returns ('attack', cell), ('move', delta) or ('hold', None).
    """
    if not enemy.alive:
        raise StructuralError("dead enemy cannot act")
    best_slot = None
    best_cell = None
    for dr, dc in DIRS8:
        r, c = enemy.row + dr, enemy.col + dc
        if 0 <= r < GRID and 0 <= c < GRID and world.kind_grid[r, c] == KIND_AGENT:
            slot = world.eid_grid[r, c]
            if best_slot is None or slot < best_slot:
                best_slot = slot
                best_cell = (r, c)
    if best_cell is not None:
        return ("attack", best_cell)

    targets = [(a.row, a.col) for a in world.agents if a.alive]
    if not targets:
        return ("hold", None)
    pos = np.array(targets)
    best = None
    best_dist = None
    for dr, dc in MOVES12:
        r, c = enemy.row + dr, enemy.col + dc
        if not (0 <= r < GRID and 0 <= c < GRID):
            continue
        dist = int(np.abs(pos - (r, c)).sum(axis=1).min())
        if best_dist is None or dist < best_dist:
            best_dist = dist
            best = (dr, dc)
    if best is None:
        return ("hold", None)
    return ("move", best)


def step(world: GridWorld, actions: np.ndarray):
    """Advance one timestep. Returns (rewards, terminals, info)."""
    n = world.n_agents
    actions = np.asarray(actions)
    if actions.shape != (n,):
        raise StructuralError("one action per agent required")
    if np.any(actions < 0) or np.any(actions >= world.n_actions):
        raise StructuralError("action index out of range")

    rewards = np.zeros(n)
    terminals = np.zeros(n, dtype=bool)
    damage = {}
    eaten = set()
    info = {"kills": 0, "deaths": 0, "agent_attacks": 0, "blank_attacks": 0,
            "enemy_hits": 0}

    # attacks resolve against pre-step positions
    for i, agent in enumerate(world.agents):
        a = int(actions[i])
        if not 4 <= a <= 7:
            continue
        dr, dc = DIRS4[a - 4]
        r, c = agent.row + dr, agent.col + dc
        if not (0 <= r < GRID and 0 <= c < GRID) or world.kind_grid[r, c] == 0:
            rewards[i] += REWARD_BLANK_ATTACK
            info["blank_attacks"] += 1
            continue
        kind = world.kind_grid[r, c]
        eid = int(world.eid_grid[r, c])
        if world.scenario == "battle":
            if kind == KIND_ENEMY:
                rewards[i] += BATTLE_HIT_ENEMY
                damage[eid] = damage.get(eid, 0) + 1
            # hitting a teammate neither damages nor counts as a blank attack
        else:
            if kind == KIND_FOOD:
                rewards[i] += JUNGLE_EAT
                eaten.add(eid)
            elif kind == KIND_AGENT and eid != agent.eid:
                rewards[i] += JUNGLE_HIT_AGENT
                rewards[eid] += JUNGLE_ATTACKED
                info["agent_attacks"] += 1

    movers = []
    for i, agent in enumerate(world.agents):
        a = int(actions[i])
        if a < 4:
            movers.append((agent.eid, agent, DIRS4[a]))

    if world.scenario == "battle":
        for enemy in world.others:
            kind, arg = enemy_policy(world, enemy)
            if kind == "attack":
                r, c = arg
                if world.kind_grid[r, c] == KIND_AGENT:
                    slot = int(world.eid_grid[r, c])
                    damage[slot] = damage.get(slot, 0) + 1
                    info["enemy_hits"] += 1
            elif kind == "move":
                movers.append((enemy.eid, enemy, arg))

    # moves in increasing entity id; a move succeeds only into a currently free cell
    movers.sort(key=lambda m: m[0])
    for _, ent, (dr, dc) in movers:
        r, c = ent.row + dr, ent.col + dc
        if 0 <= r < GRID and 0 <= c < GRID and world.eid_grid[r, c] == -1:
            world._clear(ent)
            ent.row, ent.col = r, c
            world._place(ent)

    # apply damage, then deaths, then respawns
    if world.scenario == "battle":
        for eid, hits in sorted(damage.items()):
            ent = world.entity_by_eid(eid)
            ent.hp -= hits
            if ent.hp <= 0:
                ent.alive = False
                world._clear(ent)
                if ent.kind == KIND_AGENT:
                    rewards[eid] += BATTLE_KILLED
                    terminals[eid] = True
                    info["deaths"] += 1
                else:
                    info["kills"] += 1
            else:
                world.hp_grid[ent.row, ent.col] = world._hp_norm(ent)
        for i, agent in enumerate(world.agents):
            if not agent.alive:
                world._spawn_replacement(world.agents, i)
        for j, enemy in enumerate(world.others):
            if not enemy.alive:
                world._spawn_replacement(world.others, j)
    else:
        for eid in sorted(eaten):
            food = world.entity_by_eid(eid)
            if food.alive:
                food.alive = False
                world._clear(food)

    world.t += 1
    return rewards, terminals, info


def observe(world: GridWorld, agent_index: int) -> np.ndarray:
    """Flattened 11x11x5 egocentric view plus own coordinates scaled to [0,1].

    Channel blocks, in order: own-team presence, opponent presence, food
    presence, normalized hit points, out-of-bounds mask; then row/29, col/29.
    """
    agent = world.agents[agent_index]
    if not agent.alive:
        raise StructuralError("cannot observe for a dead agent")
    r0, c0 = agent.row - HALF, agent.col - HALF
    kinds = np.zeros((VIEW, VIEW), dtype=np.int8)
    hp = np.zeros((VIEW, VIEW))
    oob = np.ones((VIEW, VIEW))
    sr0, sc0 = max(r0, 0), max(c0, 0)
    sr1, sc1 = min(r0 + VIEW, GRID), min(c0 + VIEW, GRID)
    if sr0 < sr1 and sc0 < sc1:
        dst = (slice(sr0 - r0, sr1 - r0), slice(sc0 - c0, sc1 - c0))
        kinds[dst] = world.kind_grid[sr0:sr1, sc0:sc1]
        hp[dst] = world.hp_grid[sr0:sr1, sc0:sc1]
        oob[dst] = 0.0
    own = (kinds == KIND_AGENT).astype(float)
    opp = (kinds == KIND_ENEMY).astype(float)
    food = (kinds == KIND_FOOD).astype(float)
    return np.concatenate([own.ravel(), opp.ravel(), food.ravel(), hp.ravel(),
                           oob.ravel(),
                           [agent.row / (GRID - 1), agent.col / (GRID - 1)]])


def neighbor_sets(world: GridWorld, limit: int = 3):
    """Up to `limit` nearest other agents (L1 distance) inside each agent's
    11x11 view; ties broken by lower index. Not symmetric by construction."""
    coords = np.array([(a.row, a.col) for a in world.agents])
    out = []
    for i in range(world.n_agents):
        d = np.abs(coords - coords[i])
        inview = (d[:, 0] <= HALF) & (d[:, 1] <= HALF)
        inview[i] = False
        cand = np.flatnonzero(inview)
        l1 = d[cand].sum(axis=1)
        order = np.lexsort((cand, l1))
        out.append(tuple(int(cand[k]) for k in order[:limit]))
    return tuple(out)


# lossless uint8 storage for grid observations: presence/oob channels are 0/1,
# the hp channel holds sixths, and the two coordinates are 29ths
_SCALE = np.concatenate([np.ones(VIEW * VIEW * 3), np.full(VIEW * VIEW, BATTLE_HP),
                         np.ones(VIEW * VIEW), [GRID - 1, GRID - 1]])


def obs_codec():
    def encode(obs: np.ndarray) -> np.ndarray:
        return np.rint(obs * _SCALE).astype(np.uint8)

    def decode(raw: np.ndarray) -> np.ndarray:
        return raw.astype(np.float64) / _SCALE

    return encode, decode
