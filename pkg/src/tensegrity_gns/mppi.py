"""Sampling-based model predictive control with obstacle-aware costs.

Each MPPI "control" is one actuation vector held for a model-call chunk
(n integration steps), aligning the control horizon with the multi-step
predictor. K noisy control sequences are rolled out from the current
state through a pluggable transition model (the analytical oracle or
the learned graph network), scored by summing the per-frame cost
``alpha1 * d_L1(CoM) + alpha2 / d_collision``, and softmin-combined
into the executed sequence.

The cost field d_L1 is the length of the shortest 4-connected grid path
to the goal around obstacles (a breadth-first wavefront from the goal
cell); d_collision is the smallest 2D distance from any endcap to an
obstacle box.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import refsim
from .gnn import RecurrentState, TensegrityGNN
from .graphgen import GraphConfig, build_graph, slice_control_window
from .refsim import FullState, Observation, SimParams, sim_tables
from .topology import RobotTopology
from .trajectory import Dataset, Trajectory

COST_SENTINEL = 1e9
COLLISION_FLOOR = 0.01


class InvalidGoalError(ValueError):
    pass


class NoValidSampleError(RuntimeError):
    pass


@dataclass
class MppiConfig:
    K: int = 64                 # sampled control sequences
    T: int = 15                 # horizon in model-call chunks
    beta: float = 0.5           # inverse temperature
    noise_sigma: float = 0.4
    alpha1: float = 1.0
    alpha2: float = 0.05
    seed: int = 0
    success_radius: float = 0.25

    def __post_init__(self):
        if self.K < 1 or self.T < 1 or self.beta <= 0 or self.noise_sigma < 0:
            raise ValueError("need K >= 1, T >= 1, beta > 0, noise_sigma >= 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "K", "T", "beta", "noise_sigma", "alpha1", "alpha2", "seed",
            "success_radius")}


# ---------------------------------------------------------------------------
# cost map
# ---------------------------------------------------------------------------

@dataclass
class CostMap:
    origin: np.ndarray          # (2,) lower corner
    cell_size: float
    occupied: np.ndarray        # (nx, ny) bool
    distance: np.ndarray        # (nx, ny) meters; +inf where unreachable
    obstacles: list             # axis-aligned boxes (xmin, ymin, xmax, ymax)
    goal: np.ndarray            # (2,)

    def cell_of(self, x: float, y: float) -> tuple[int, int, bool]:
        """Grid cell containing (x, y); clamps outside points and flags them."""
        i = int(np.floor((x - self.origin[0]) / self.cell_size))
        j = int(np.floor((y - self.origin[1]) / self.cell_size))
        nx, ny = self.occupied.shape
        clamped = not (0 <= i < nx and 0 <= j < ny)
        return min(max(i, 0), nx - 1), min(max(j, 0), ny - 1), clamped

    def lookup(self, x: float, y: float) -> tuple[float, bool]:
        i, j, clamped = self.cell_of(x, y)
        return float(self.distance[i, j]), clamped


def build_costmap(obstacles: list, goal, bounds, cell_size: float) -> CostMap:
    """Breadth-first wavefront distances from the goal over free cells.

    ``bounds`` is (xmin, ymin, xmax, ymax). A cell is occupied when its
    center lies inside any obstacle box. Edge cost is one cell size, so
    an empty map reproduces the Manhattan metric exactly.
    """
    xmin, ymin, xmax, ymax = bounds
    nx = max(1, int(round((xmax - xmin) / cell_size)))
    ny = max(1, int(round((ymax - ymin) / cell_size)))
    origin = np.array([xmin, ymin], dtype=float)

    cx = xmin + (np.arange(nx) + 0.5) * cell_size
    cy = ymin + (np.arange(ny) + 0.5) * cell_size
    occupied = np.zeros((nx, ny), dtype=bool)
    for (oxmin, oymin, oxmax, oymax) in obstacles:
        occupied |= ((cx[:, None] >= oxmin) & (cx[:, None] <= oxmax)
                     & (cy[None, :] >= oymin) & (cy[None, :] <= oymax))

    goal = np.asarray(goal, dtype=float)
    gi = int(np.floor((goal[0] - origin[0]) / cell_size))
    gj = int(np.floor((goal[1] - origin[1]) / cell_size))
    if not (0 <= gi < nx and 0 <= gj < ny):
        raise InvalidGoalError("goal outside map bounds")
    if occupied[gi, gj]:
        raise InvalidGoalError("goal inside an obstacle")

    distance = np.full((nx, ny), np.inf)
    distance[gi, gj] = 0.0
    queue = deque([(gi, gj)])
    while queue:
        i, j = queue.popleft()
        d = distance[i, j] + cell_size
        for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if 0 <= ni < nx and 0 <= nj < ny and not occupied[ni, nj] \
                    and distance[ni, nj] == np.inf:
                distance[ni, nj] = d
                queue.append((ni, nj))
    return CostMap(origin=origin, cell_size=cell_size, occupied=occupied,
                   distance=distance, obstacles=list(obstacles), goal=goal)


def _box_distance_2d(points_xy: np.ndarray, box) -> np.ndarray:
    """Euclidean distance from points to an axis-aligned rectangle (0 inside)."""
    xmin, ymin, xmax, ymax = box
    dx = np.maximum(np.maximum(xmin - points_xy[..., 0],
                               points_xy[..., 0] - xmax), 0.0)
    dy = np.maximum(np.maximum(ymin - points_xy[..., 1],
                               points_xy[..., 1] - ymax), 0.0)
    return np.sqrt(dx * dx + dy * dy)


def collision_distance(endcaps: np.ndarray, obstacles: list) -> float:
    """Minimum endcap-to-obstacle distance in the plane (inf with no obstacles)."""
    if not obstacles:
        return float("inf")
    pts = endcaps[..., :2]
    return float(min(np.min(_box_distance_2d(pts, box)) for box in obstacles))


def cost(com: np.ndarray, endcaps: np.ndarray, costmap: CostMap,
         config: MppiConfig) -> tuple[float, bool]:
    """Instantaneous navigation cost of one frame; flags out-of-map states."""
    d_l1, clamped = costmap.lookup(com[0], com[1])
    d_coll = collision_distance(endcaps, costmap.obstacles)
    coll_term = config.alpha2 / max(d_coll, COLLISION_FLOOR) \
        if np.isfinite(d_coll) else 0.0
    return config.alpha1 * d_l1 + coll_term, clamped


def trajectory_cost(endcap_frames: np.ndarray, costmap: CostMap,
                    config: MppiConfig) -> float:
    """Sum of per-frame costs; endcap_frames is (frames, 2R, 3)."""
    total = 0.0
    for frame in endcap_frames:
        com = frame.mean(axis=0)
        c, _ = cost(com, frame, costmap, config)
        total += c
    return total


# ---------------------------------------------------------------------------
# sampling and the update rule
# ---------------------------------------------------------------------------

@dataclass
class MppiResult:
    U_star: np.ndarray       # (T, m)
    weights: np.ndarray      # (K,)
    costs: np.ndarray        # (K,)
    rho: float
    eta: float
    samples: np.ndarray      # (K, T, m)


def sample_controls(nominal: np.ndarray, config: MppiConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """K noisy sequences clamped to [-1, 1]; sample 0 keeps the nominal."""
    nominal = np.asarray(nominal, dtype=float)
    eps = rng.normal(0.0, config.noise_sigma,
                     (config.K,) + nominal.shape)
    eps[0] = 0.0
    return np.clip(nominal[None] + eps, -1.0, 1.0)


def weights_and_update(costs: np.ndarray, samples: np.ndarray,
                       config: MppiConfig) -> MppiResult:
    costs = np.asarray(costs, dtype=float).copy()
    costs[~np.isfinite(costs)] = COST_SENTINEL
    if np.all(costs >= COST_SENTINEL):
        raise NoValidSampleError("every sampled rollout diverged")
    rho = float(costs.min())
    raw = np.exp(-(costs - rho) / config.beta)
    eta = float(raw.sum())
    weights = raw / eta
    u_star = np.einsum("k,ktm->tm", weights, samples)
    return MppiResult(U_star=u_star, weights=weights, costs=costs, rho=rho,
                      eta=eta, samples=samples)


# ---------------------------------------------------------------------------
# transition models
# ---------------------------------------------------------------------------

class OracleTransition:
    """Ground-truth dynamics as the MPPI state-transition model.

    Clones the full rigid-body state per sample and steps the batch of
    samples together; one chunk is ``chunk_steps`` emitted frames of
    ``sample_dt`` each, with the control held constant.
    """

    def __init__(self, topology: RobotTopology, params: SimParams,
                 chunk_steps: int):
        params.validate()
        self.topology = topology
        self.params = params
        self.chunk_steps = chunk_steps
        self.tables = sim_tables(topology)
        self._state: FullState | None = None

    def sync_full_state(self, state: FullState) -> None:
        self._state = state.copy()

    def sync_observation(self, obs_window: list[Observation],
                         executed: np.ndarray, plant_state: FullState) -> None:
        # the oracle model has privileged state access
        self.sync_full_state(plant_state)

    def sample_rollouts(self, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (endcap frames (K, T*chunk, 2R, 3), diverged mask (K,))."""
        K, T, _ = V.shape
        s = self._state
        P = np.repeat(s.P[None], K, axis=0)
        R = np.repeat(s.R[None], K, axis=0)
        Vv = np.repeat(s.V[None], K, axis=0)
        Om = np.repeat(s.Omega[None], K, axis=0)
        rest = np.repeat(s.rest_lengths[None], K, axis=0)
        frames = np.zeros((K, T * self.chunk_steps,
                           self.topology.num_endcaps, 3))
        diverged = np.zeros(K, dtype=bool)
        substeps = self.params.substeps
        idx = 0
        for t in range(T):
            u = V[:, t, :]
            for _ in range(self.chunk_steps):
                for _ in range(substeps):
                    P, R, Vv, Om, rest = refsim.step_batched(
                        self.tables, self.params, P, R, Vv, Om, rest, u)
                diverged |= refsim.divergence_mask(P, Vv)
                frames[:, idx] = refsim._endcap_positions(self.tables, P, R)
                idx += 1
        return frames, diverged


class GnnTransition:
    """Learned graph-network dynamics as the MPPI transition model.

    Keeps the controller's belief state (endcap positions, finite-
    difference velocities, an open-loop rest-length estimate, and the
    recurrent state) and clones it per sample. Rollouts batch all K
    graphs into one disjoint union per chunk.
    """

    def __init__(self, model: TensegrityGNN, graph_config: GraphConfig,
                 dataset_id: int = 0):
        self.model = model
        self.graph_config = graph_config
        self.topology = model.topology
        self.dataset_id = dataset_id
        self.tables = sim_tables(self.topology)
        self._caps = None       # (2R, 3)
        self._prev_caps = None
        self._rest = None       # (M,)
        self._rec = None        # RecurrentState for one graph
        self._past = None       # (h, m) recent executed controls

    def reset(self, obs: Observation, rest_estimate: np.ndarray) -> None:
        self._caps = obs.endcap_positions.copy()
        self._prev_caps = None
        self._rest = np.asarray(rest_estimate, dtype=float).copy()
        self._rec = self.model.init_recurrent(self.topology.num_nodes)
        self._past = np.zeros((self.graph_config.h,
                               len(self.topology.actuated_cable_ids)))

    def sync_full_state(self, state: FullState) -> None:
        obs = refsim.observe(state, self.topology)
        if self._caps is None:
            self.reset(obs, state.rest_lengths)

    def sync_observation(self, obs_window: list[Observation],
                         executed: np.ndarray,
                         plant_state: FullState | None = None) -> None:
        """Fold one executed chunk's observations into the belief state.

        ``obs_window`` holds the chunk's last two plant observations so
        the finite-difference velocity matches the frame spacing.
        """
        chunk = np.asarray(executed, dtype=float)
        n = self.model.config.n
        obs = obs_window[-1]
        self._prev_caps = (obs_window[-2].endcap_positions.copy()
                           if len(obs_window) >= 2 else None)
        self._caps = obs.endcap_positions.copy()
        rest = self._rest[None]
        for _ in range(n):
            rest = refsim._motor_step_batched(self.tables, rest, chunk[None],
                                              self.model.integration_dt)
        self._rest = rest[0]
        if self.graph_config.h > 0:
            self._past = np.concatenate(
                [self._past, np.repeat(chunk[None], n, axis=0)], axis=0
            )[-self.graph_config.h:]
        # teacher-force the recurrent state with the realized graph
        graph = self._build_graph(self._prev_caps, self._caps, obs.time,
                                  self._window_controls())
        self._rec = self.model.encode_only([graph], self._rec)

    def _window_controls(self) -> np.ndarray:
        n, m = self.graph_config.n, self._past.shape[1]
        return np.concatenate([self._past, np.zeros((n, m))], axis=0)

    def _build_graph(self, prev_caps, caps, time, ctrl_window,
                     rest=None):
        window = [Observation(caps, time)] if prev_caps is None else [
            Observation(prev_caps, time - self.model.integration_dt),
            Observation(caps, time)]
        return build_graph(window, ctrl_window,
                           self._rest if rest is None else rest,
                           self.dataset_id, self.topology, self.graph_config)

    def sample_rollouts(self, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        K, T, m = V.shape
        n = self.model.config.n
        dt = self.model.integration_dt
        n_caps = self.topology.num_endcaps
        n_nodes = self.topology.num_nodes
        lw = self.model.config.latent_width

        caps = np.repeat(self._caps[None], K, axis=0)
        prev = (np.repeat(self._prev_caps[None], K, axis=0)
                if self._prev_caps is not None else None)
        rest = np.repeat(self._rest[None], K, axis=0)
        rec = RecurrentState(np.tile(self._rec.H, (K, 1)),
                             np.tile(self._rec.C, (K, 1)))
        past = np.repeat(self._past[None], K, axis=0)     # (K, h, m)

        frames = np.zeros((K, T * n, n_caps, 3))
        diverged = np.zeros(K, dtype=bool)
        vel = np.zeros((K, n_nodes, 3))
        if prev is not None:
            vel[:, :n_caps] = (caps - prev) / dt

        for t in range(T):
            graphs = []
            for k in range(K):
                ctrl = np.concatenate(
                    [past[k], np.repeat(V[k, t][None], n, axis=0)], axis=0)
                p_prev = None if prev is None else prev[k]
                graphs.append(self._build_graph(p_prev, caps[k],
                                                0.0, ctrl, rest=rest[k]))
            blocks, rec = self.model.predict_batch(graphs, rec)
            dv = np.stack([b.delta_v for b in blocks], axis=0)   # (K, N, n, 3)
            dl = np.stack([b.delta_rest for b in blocks], axis=0)
            p = np.concatenate([caps, np.zeros((K, 1, 3))], axis=1)
            for i in range(n):
                vel = vel + dv[:, :, i, :]
                vel[:, -1] = 0.0
                p = p + dt * vel
                rest = np.maximum(rest + dl[:, :, i], 1e-6)
                frames[:, t * n + i] = p[:, :n_caps]
            prev = frames[:, t * n + n - 2] if n >= 2 else caps
            caps = p[:, :n_caps]
            diverged |= (np.abs(vel) > 1e3).any(axis=(1, 2))
            diverged |= ~np.isfinite(caps).all(axis=(1, 2))
            if self.graph_config.h > 0:
                held = np.repeat(V[:, t][:, None, :], n, axis=1)
                past = np.concatenate([past, held],
                                      axis=1)[:, -self.graph_config.h:]
        return frames, diverged


# ---------------------------------------------------------------------------
# closed-loop control against the oracle plant
# ---------------------------------------------------------------------------

@dataclass
class ControlLoopResult:
    trajectory: Trajectory
    success: bool
    completion_time: float
    cycles: int
    mean_costs: list[float] = field(default_factory=list)


def robot_com(state: FullState) -> np.ndarray:
    return state.P.mean(axis=0)


def control_loop(initial: FullState, costmap: CostMap, transition,
                 plant_topology: RobotTopology, plant_params: SimParams,
                 config: MppiConfig, chunk_steps: int,
                 max_time: float) -> ControlLoopResult:
    """Receding-horizon MPPI against the analytical plant.

    Executes the first chunk of each cycle's weighted-average sequence,
    shifts the nominal, and repeats until the CoM reaches the goal or
    simulated time runs out.
    """
    m = len(plant_topology.actuated_cable_ids)
    rng = np.random.default_rng(config.seed)
    tables = sim_tables(plant_topology)
    plant_params.validate()

    state = initial.copy()
    transition.sync_full_state(state)

    goal = costmap.goal
    times, caps_log, ctrl_log = [state.time], \
        [refsim.endcap_positions(state, plant_topology)], [np.zeros(m)]
    full_log = [state.copy()]
    nominal = np.zeros((config.T, m))
    chunk_dt = chunk_steps * plant_params.sample_dt
    cycles = 0
    success = bool(np.linalg.norm(robot_com(state)[:2] - goal)
                   <= config.success_radius)
    elapsed = 0.0
    mean_costs = []

    while not success and elapsed + 1e-12 < max_time:
        V = sample_controls(nominal, config, rng)
        frames, diverged = transition.sample_rollouts(V)
        costs = np.array([
            COST_SENTINEL if diverged[k]
            else trajectory_cost(frames[k], costmap, config)
            for k in range(config.K)])
        result = weights_and_update(costs, V, config)
        mean_costs.append(float(np.mean(result.costs[result.costs
                                                     < COST_SENTINEL])))
        u0 = result.U_star[0]

        P, R, Vv, Om, rest = (state.P[None], state.R[None], state.V[None],
                              state.Omega[None], state.rest_lengths[None])
        for _ in range(chunk_steps):
            for _ in range(plant_params.substeps):
                P, R, Vv, Om, rest = refsim.step_batched(
                    tables, plant_params, P, R, Vv, Om, rest, u0[None])
            state = FullState(P[0].copy(), R[0].copy(), Vv[0].copy(),
                              Om[0].copy(), rest[0].copy(),
                              time=state.time + plant_params.sample_dt)
            times.append(state.time)
            caps_log.append(refsim.endcap_positions(state, plant_topology))
            ctrl_log.append(u0.copy())
            full_log.append(state.copy())

        obs_window = [Observation(caps_log[-2].copy(), times[-2]),
                      Observation(caps_log[-1].copy(), times[-1])]
        transition.sync_observation(obs_window, u0, state)
        nominal = np.concatenate([result.U_star[1:],
                                  np.zeros((1, m))], axis=0)
        elapsed += chunk_dt
        cycles += 1
        success = bool(np.linalg.norm(robot_com(state)[:2] - goal)
                       <= config.success_radius)

    ctrl = np.array(ctrl_log)
    ctrl[-1] = 0.0
    traj = Trajectory(
        sample_dt=plant_params.sample_dt, times=np.array(times),
        endcaps=np.array(caps_log), controls=ctrl,
        P=np.array([s.P for s in full_log]),
        R=np.array([s.R for s in full_log]),
        V=np.array([s.V for s in full_log]),
        Omega=np.array([s.Omega for s in full_log]),
        rest_lengths=np.array([s.rest_lengths for s in full_log]),
        sim_params=plant_params.to_dict())
    return ControlLoopResult(trajectory=traj, success=success,
                             completion_time=elapsed if success else max_time,
                             cycles=cycles, mean_costs=mean_costs)


# ---------------------------------------------------------------------------
# controller-in-the-loop data collection
# ---------------------------------------------------------------------------

@dataclass
class Task:
    seed: int
    goal: tuple[float, float]
    obstacles: list
    bounds: tuple[float, float, float, float]
    max_time: float = 30.0
    cell_size: float = 0.05

    @classmethod
    def from_dict(cls, d: dict) -> "Task":
        return cls(seed=d["seed"], goal=tuple(d["goal"]),
                   obstacles=[tuple(b) for b in d.get("obstacles", [])],
                   bounds=tuple(d["bounds"]),
                   max_time=d.get("max_time", 30.0),
                   cell_size=d.get("cell_size", 0.05))


def load_tasks(path) -> list[Task]:
    with open(path) as fh:
        doc = json.load(fh)
    return [Task.from_dict(d) for d in doc["tasks"]]


def collect_iteration(transition_factory, tasks: list[Task],
                      topology: RobotTopology, plant_params: SimParams,
                      config: MppiConfig, chunk_steps: int,
                      dataset_id: int, iteration: int) -> tuple[Dataset, dict]:
    """Run the controller over each task and collect executed trajectories.

    ``transition_factory`` builds a fresh transition model per task (the
    recurrent/belief state must not leak between tasks). Failures are
    recorded in the metrics, never raised.
    """
    rows = []
    trajectories = []
    for task in tasks:
        costmap = build_costmap(task.obstacles, task.goal, task.bounds,
                                task.cell_size)
        rng = np.random.default_rng(task.seed)
        state = refsim.standing_state(topology)
        yaw = rng.uniform(0.0, 2.0 * np.pi)
        spin = refsim.quat_from_rotvec(np.array([0.0, 0.0, yaw]))
        state.P = refsim.quat_rotate(spin[None], state.P)
        state.R = refsim.quat_mul(np.repeat(spin[None], state.R.shape[0],
                                            axis=0), state.R)
        task_config = MppiConfig(**{**config.to_dict(), "seed": task.seed})
        result = control_loop(state, costmap, transition_factory(),
                              topology, plant_params, task_config,
                              chunk_steps, task.max_time)
        result.trajectory.dataset_id = dataset_id
        result.trajectory.iteration = iteration
        trajectories.append(result.trajectory)
        rows.append({"seed": task.seed, "success": result.success,
                     "completion_time": result.completion_time,
                     "cycles": result.cycles})
    metrics = {
        "iteration": iteration,
        "rows": rows,
        "success_rate": float(np.mean([r["success"] for r in rows])),
        "mean_completion_time": float(np.mean(
            [r["completion_time"] for r in rows])),
    }
    dataset = Dataset(trajectories=trajectories, dataset_id=dataset_id,
                      source="real_like")
    return dataset, metrics
