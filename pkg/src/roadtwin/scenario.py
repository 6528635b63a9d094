"""Synthetic highway scenario: lanes, vehicle agents, and ground truth.

Vehicles follow constant-velocity kinematics with a hard car-following
clamp that preserves a minimum bumper-to-bumper gap.  The simulated
roadway extends `approach_length` beyond each end of the evaluated
stretch so that sensors can acquire targets before they enter it;
ground-truth frames cover the stretch [0, stretch_length] only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

VEHICLE_CLASSES = ("car", "truck", "bus", "motorcycle")

# per class: length std and clip range (mean for cars is configured),
# fixed width/height, and a factor on the sampled cruise speed
CLASS_TABLE = {
    "car": {"length_mean": None, "length_std": 0.45, "length_clip": (3.4, 5.8),
            "width": 1.85, "height": 1.5, "speed_factor": 1.0},
    "truck": {"length_mean": 12.0, "length_std": 2.0, "length_clip": (8.0, 18.0),
              "width": 2.5, "height": 3.7, "speed_factor": 0.82},
    "bus": {"length_mean": 13.0, "length_std": 1.0, "length_clip": (10.5, 15.0),
            "width": 2.55, "height": 3.3, "speed_factor": 0.85},
    "motorcycle": {"length_mean": 2.2, "length_std": 0.15, "length_clip": (1.9, 2.5),
                   "width": 0.8, "height": 1.4, "speed_factor": 1.05},
}


@dataclass(frozen=True)
class LaneSpec:
    lane_id: int
    y: float
    direction: int  # +1 drives toward +x, -1 toward -x
    width: float = 3.5


@dataclass
class VehicleAgent:
    agent_id: int
    vclass: str
    length: float
    width: float
    height: float
    x: float
    y: float
    vx: float
    vy: float
    lane_id: int
    target_y: float | None = None

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)

    def heading(self) -> float:
        if self.speed > 1e-6:
            return math.atan2(self.vy, self.vx)
        return 0.0


@dataclass(frozen=True)
class ScenarioConfig:
    stretch_length: float = 440.0
    approach_length: float = 120.0
    lanes_per_direction: int = 3
    lane_width: float = 3.5
    median_offset: float = 1.75  # |y| of the innermost lane center
    spawn_rate_per_lane: float = 0.185  # vehicles / s
    speed_mean: float = 27.0
    speed_std: float = 3.0
    v_min: float = 18.0
    v_max: float = 38.0
    class_mix: dict = field(default_factory=lambda: {
        "car": 0.86, "truck": 0.09, "bus": 0.02, "motorcycle": 0.03})
    car_length_mean: float = 4.6
    min_gap: float = 6.0
    dt: float = 1.0 / 5.4
    duration: float = 120.0
    gt_rate: float = 1.0  # ground-truth frames / s
    prefill: bool = True
    lane_change_rate: float = 0.0  # changes / vehicle / s, 0 disables
    lane_change_duration: float = 3.0

    def validate(self):
        if self.stretch_length <= 0 or self.approach_length < 0:
            raise ValueError("lengths must be positive")
        if self.spawn_rate_per_lane < 0:
            raise ValueError("spawn rate must be >= 0")
        if self.dt <= 0 or self.duration < 0:
            raise ValueError("dt must be > 0 and duration >= 0")
        if self.duration and self.duration < self.dt:
            raise ValueError("duration must be >= dt")
        if not (0 < self.v_min <= self.v_max):
            raise ValueError("need 0 < v_min <= v_max")
        if abs(sum(self.class_mix.values()) - 1.0) > 1e-9:
            raise ValueError("class mix must sum to 1")
        if set(self.class_mix) - set(VEHICLE_CLASSES):
            raise ValueError(f"unknown vehicle class in mix: {self.class_mix}")
        if self.min_gap <= 0 or self.lane_width <= 0:
            raise ValueError("min_gap and lane_width must be positive")


@dataclass(frozen=True)
class GroundTruthFrame:
    t: float
    vehicles: tuple

    def ids(self):
        return [v.agent_id for v in self.vehicles]


def build_lanes(cfg: ScenarioConfig) -> list[LaneSpec]:
    lanes = []
    for i in range(cfg.lanes_per_direction):
        y = cfg.median_offset + i * cfg.lane_width
        lanes.append(LaneSpec(lane_id=i, y=-y, direction=+1, width=cfg.lane_width))
        lanes.append(LaneSpec(lane_id=cfg.lanes_per_direction + i, y=y,
                              direction=-1, width=cfg.lane_width))
    return lanes


class World:
    """Owns all agents; stepped by a single driver loop."""

    def __init__(self, cfg: ScenarioConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.rng = rng
        self.lanes = build_lanes(cfg)
        self.agents: list[VehicleAgent] = []
        self.t = 0.0
        self.spawned = 0
        self.retired = 0
        self._next_id = 0
        self._pending = {lane.lane_id: 0 for lane in self.lanes}
        if cfg.prefill:
            self._prefill()

    # -- coordinates along travel -------------------------------------
    def _entry_x(self, lane: LaneSpec) -> float:
        if lane.direction > 0:
            return -self.cfg.approach_length
        return self.cfg.stretch_length + self.cfg.approach_length

    def _travel_pos(self, lane: LaneSpec, x: float) -> float:
        return lane.direction * (x - self._entry_x(lane))

    def _total_length(self) -> float:
        return self.cfg.stretch_length + 2.0 * self.cfg.approach_length

    # -- sampling ------------------------------------------------------
    def _sample_agent(self, lane: LaneSpec) -> VehicleAgent:
        cfg = self.cfg
        classes = sorted(cfg.class_mix)
        probs = np.array([cfg.class_mix[c] for c in classes])
        vclass = classes[self.rng.choice(len(classes), p=probs)]
        row = CLASS_TABLE[vclass]
        mean = cfg.car_length_mean if vclass == "car" else row["length_mean"]
        length = float(np.clip(self.rng.normal(mean, row["length_std"]), *row["length_clip"]))
        speed = float(np.clip(self.rng.normal(cfg.speed_mean * row["speed_factor"],
                                              cfg.speed_std), cfg.v_min, cfg.v_max))
        agent = VehicleAgent(
            agent_id=self._next_id, vclass=vclass, length=length,
            width=row["width"], height=row["height"],
            x=self._entry_x(lane), y=lane.y,
            vx=lane.direction * speed, vy=0.0, lane_id=lane.lane_id)
        self._next_id += 1
        return agent

    def _prefill(self):
        """Stationary initial traffic: exponential time headways converted
        to space by each vehicle's own speed."""
        lam = self.cfg.spawn_rate_per_lane
        if lam <= 0:
            return
        for lane in self.lanes:
            pos = float(self.rng.exponential(1.0 / lam)) * self.cfg.speed_mean
            prev = None
            while pos < self._total_length():
                agent = self._sample_agent(lane)
                agent.x = self._entry_x(lane) + lane.direction * pos
                if prev is not None:
                    # never prefill tighter than the following gap
                    floor = self.cfg.min_gap + 0.5 * (agent.length + prev.length)
                    gap = pos - self._travel_pos(lane, prev.x)
                    if gap < floor:
                        pos = self._travel_pos(lane, prev.x) + floor
                        agent.x = self._entry_x(lane) + lane.direction * pos
                        if pos >= self._total_length():
                            self._next_id -= 1
                            break
                self.agents.append(agent)
                self.spawned += 1
                prev = agent
                pos += float(self.rng.exponential(1.0 / lam)) * abs(agent.vx)

    # -- dynamics ------------------------------------------------------
    def _lane_agents(self, lane_id: int) -> list[VehicleAgent]:
        return [a for a in self.agents if a.lane_id == lane_id]

    def _entry_clear(self, lane: LaneSpec, new_half_length: float) -> bool:
        margin = self.cfg.min_gap + new_half_length
        for a in self._lane_agents(lane.lane_id):
            if self._travel_pos(lane, a.x) - 0.5 * a.length < margin:
                return False
        return True

    def spawn_step(self, dt: float):
        """Poisson arrivals per lane; blocked arrivals stay queued and
        enter as soon as the entry clears."""
        for lane in self.lanes:
            expected = self.cfg.spawn_rate_per_lane * dt
            if expected > 0:
                self._pending[lane.lane_id] += int(self.rng.poisson(expected))
            while self._pending[lane.lane_id] > 0:
                agent = self._sample_agent(lane)
                if not self._entry_clear(lane, 0.5 * agent.length):
                    self._next_id -= 1  # agent not admitted; id not consumed
                    break
                self.agents.append(agent)
                self.spawned += 1
                self._pending[lane.lane_id] -= 1

    def _maybe_start_lane_changes(self, dt: float):
        cfg = self.cfg
        if cfg.lane_change_rate <= 0:
            return
        by_dir = {}
        for lane in self.lanes:
            by_dir.setdefault(lane.direction, []).append(lane)
        lane_map = {lane.lane_id: lane for lane in self.lanes}
        for agent in self.agents:
            if agent.target_y is not None:
                continue
            if self.rng.random() >= cfg.lane_change_rate * dt:
                continue
            lane = lane_map[agent.lane_id]
            neighbors = [l for l in by_dir[lane.direction]
                         if abs(l.y - lane.y) - lane.width < 1e-6 and l.lane_id != lane.lane_id]
            if not neighbors:
                continue
            target = neighbors[self.rng.choice(len(neighbors))]
            clear = all(abs(self._travel_pos(target, a.x) - self._travel_pos(target, agent.x))
                        > 2.0 * cfg.min_gap + a.length
                        for a in self._lane_agents(target.lane_id))
            if not clear:
                continue
            agent.target_y = target.y
            agent.vy = (target.y - agent.y) / cfg.lane_change_duration
            agent.lane_id = target.lane_id

    def step(self, dt: float):
        if dt <= 0:
            raise ValueError("dt must be positive")
        cfg = self.cfg
        for lane in self.lanes:
            members = self._lane_agents(lane.lane_id)
            members.sort(key=lambda a: self._travel_pos(lane, a.x), reverse=True)
            leader = None
            for agent in members:
                agent.x += agent.vx * dt
                if agent.target_y is not None:
                    agent.y += agent.vy * dt
                    if (agent.vy > 0) == (agent.y >= agent.target_y):
                        agent.y = agent.target_y
                        agent.vy = 0.0
                        agent.target_y = None
                if leader is not None:
                    gap = (self._travel_pos(lane, leader.x) - 0.5 * leader.length
                           - self._travel_pos(lane, agent.x) - 0.5 * agent.length)
                    if gap < cfg.min_gap:
                        pos = (self._travel_pos(lane, leader.x) - 0.5 * leader.length
                               - cfg.min_gap - 0.5 * agent.length)
                        agent.x = self._entry_x(lane) + lane.direction * pos
                        agent.vx = lane.direction * min(abs(agent.vx), abs(leader.vx))
                leader = agent
        self._retire()
        self._maybe_start_lane_changes(dt)
        self.spawn_step(dt)
        self.t += dt

    def _retire(self):
        lane_map = {lane.lane_id: lane for lane in self.lanes}
        keep = []
        for agent in self.agents:
            lane = lane_map[agent.lane_id]
            if self._travel_pos(lane, agent.x) - 0.5 * agent.length > self._total_length():
                self.retired += 1
            else:
                keep.append(agent)
        self.agents = keep

    # -- observation ---------------------------------------------------
    def on_stretch(self) -> list[VehicleAgent]:
        return [a for a in self.agents if 0.0 <= a.x <= self.cfg.stretch_length]

    def sample_ground_truth(self, t: float) -> GroundTruthFrame:
        """Snapshot of every agent currently on the evaluated stretch."""
        return GroundTruthFrame(t=t, vehicles=tuple(replace(a) for a in self.on_stretch()))

    def present(self) -> int:
        return len(self.agents)
