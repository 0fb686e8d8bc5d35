"""Analytical rigid-body tensegrity simulator.

Serves as ground-truth oracle, training-data generator, and the source
of parameter-varied datasets for co-training. Rods are rigid cylinders
with spherical endcaps; cables are unilateral spring-dampers acting on
endcap centers; ground contact is a penalty normal force with a
Coulomb-capped viscous friction force on the endcap spheres.

Integration is semi-explicit Euler at ``dt_internal``: velocities are
updated from forces first, then positions/orientations advance with the
new velocities. All core math is vectorized over a leading batch axis
so that many independent robots can be stepped together (used by the
MPPI sampler); the single-robot API wraps a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .topology import (REST_LENGTH_MAX_FRAC, REST_LENGTH_MIN_FRAC,
                       RobotTopology, six_bar_node_positions,
                       three_bar_node_positions)


class DegenerateGeometryError(RuntimeError):
    pass


class NumericalBlowupError(RuntimeError):
    def __init__(self, message: str, rod_id: int | None = None):
        super().__init__(message)
        self.rod_id = rod_id


class InvalidWindowError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quaternions (wxyz), vectorized over arbitrary leading axes
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = np.moveaxis(q1, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(q2, -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v by quaternions q (body -> world)."""
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    """Unit quaternion for a rotation vector (axis * angle)."""
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    small = angle < 1e-12
    axis = np.where(small, 0.0, rv / np.where(small, 1.0, angle))
    half = 0.5 * angle
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_align_z(axis: np.ndarray) -> np.ndarray:
    """Minimal rotation taking body +z to the given unit axis (zero twist)."""
    axis = np.asarray(axis, dtype=float)
    w = 1.0 + axis[..., 2:]
    xyz = np.stack([-axis[..., 1], axis[..., 0], np.zeros_like(axis[..., 0])], axis=-1)
    q = np.concatenate([w, xyz], axis=-1)
    # antiparallel case: rotate 180 degrees about x
    flipped = w[..., 0] < 1e-12
    if np.any(flipped):
        q = np.where(flipped[..., None], np.array([0.0, 1.0, 0.0, 0.0]), q)
    return quat_normalize(q)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class SimParams:
    gravity: float = -9.81             # z acceleration, m/s^2
    ground_stiffness: float = 1.0e4    # N/m
    ground_damping: float = 50.0       # N*s/m, also the viscous friction slope
    friction_mu: float = 0.5
    dt_internal: float = 1.0e-3
    sample_dt: float = 1.0e-2

    def validate(self) -> None:
        if self.dt_internal > self.sample_dt:
            raise ValueError("dt_internal must not exceed sample_dt")
        ratio = self.sample_dt / self.dt_internal
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("sample_dt must be an integer multiple of dt_internal")
        if self.friction_mu < 0:
            raise ValueError("friction_mu must be non-negative")

    @property
    def substeps(self) -> int:
        return int(round(self.sample_dt / self.dt_internal))

    def to_dict(self) -> dict:
        return {"gravity": self.gravity, "ground_stiffness": self.ground_stiffness,
                "ground_damping": self.ground_damping, "friction_mu": self.friction_mu,
                "dt_internal": self.dt_internal, "sample_dt": self.sample_dt}

    @classmethod
    def from_dict(cls, d: dict) -> "SimParams":
        return cls(**d)


@dataclass
class ControlFrame:
    u: np.ndarray           # per-actuated-cable retract fraction, each in [-1, 1]
    time: float = 0.0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        if np.any(np.abs(self.u) > 1.0 + 1e-12):
            raise ValueError("controls must lie in [-1, 1]")


@dataclass
class FullState:
    P: np.ndarray             # (rods, 3) CoM positions
    R: np.ndarray             # (rods, 4) unit quaternions, wxyz
    V: np.ndarray             # (rods, 3) linear velocities
    Omega: np.ndarray         # (rods, 3) angular velocities, body frame
    rest_lengths: np.ndarray  # (cables,)
    time: float = 0.0

    def copy(self) -> "FullState":
        return FullState(self.P.copy(), self.R.copy(), self.V.copy(),
                         self.Omega.copy(), self.rest_lengths.copy(), self.time)

    def validate(self) -> None:
        for name, arr in (("P", self.P), ("R", self.R), ("V", self.V),
                          ("Omega", self.Omega), ("rest_lengths", self.rest_lengths)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
        norms = np.linalg.norm(self.R, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("quaternions not normalized")
        if np.any(self.rest_lengths <= 0):
            raise ValueError("rest lengths must be positive")


@dataclass
class Observation:
    endcap_positions: np.ndarray  # (2*rods, 3), indexed by endcap node id
    time: float = 0.0

    def copy(self) -> "Observation":
        return Observation(self.endcap_positions.copy(), self.time)


# ---------------------------------------------------------------------------
# precomputed per-topology index tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimTables:
    node_rod: np.ndarray        # (2R,) rod index per endcap node
    node_offset: np.ndarray     # (2R, 3) body-frame offset of each endcap
    node_radius: np.ndarray     # (2R,)
    cable_a: np.ndarray         # (M,) first endpoint node id
    cable_b: np.ndarray         # (M,)
    cable_k: np.ndarray         # (M,) stiffness
    cable_c: np.ndarray         # (M,) damping
    cable_init_rest: np.ndarray  # (M,)
    cable_speed: np.ndarray     # (M,) motor speed (0 for non-actuated)
    actuated_idx: np.ndarray    # (m,) cable ids that are actuated, in id order
    rod_mass: np.ndarray        # (R,)
    rod_inertia: np.ndarray     # (R, 3) body-frame diagonal
    rod_length: np.ndarray      # (R,)


_TABLE_CACHE: dict[int, SimTables] = {}


def sim_tables(topology: RobotTopology) -> SimTables:
    key = id(topology)
    cached = _TABLE_CACHE.get(key)
    if cached is not None:
        return cached

    n_end = topology.num_endcaps
    node_rod = np.zeros(n_end, dtype=int)
    node_offset = np.zeros((n_end, 3))
    node_radius = np.zeros(n_end)
    for k, rod in enumerate(topology.rods):
        a, b = rod.endcap_indices
        node_rod[a] = node_rod[b] = k
        node_offset[a] = (0.0, 0.0, -0.5 * rod.length)
        node_offset[b] = (0.0, 0.0, +0.5 * rod.length)
        node_radius[a] = node_radius[b] = rod.endcap_radius

    cables = topology.cables
    mass = np.array([r.mass for r in topology.rods])
    length = np.array([r.length for r in topology.rods])
    radius = np.array([r.endcap_radius for r in topology.rods])
    # solid cylinder about its CoM, axis = body z
    i_trans = mass * (3.0 * radius ** 2 + length ** 2) / 12.0
    i_axial = 0.5 * mass * radius ** 2
    inertia = np.stack([i_trans, i_trans, i_axial], axis=-1)

    tables = SimTables(
        node_rod=node_rod,
        node_offset=node_offset,
        node_radius=node_radius,
        cable_a=np.array([c.endpoints[0] for c in cables], dtype=int),
        cable_b=np.array([c.endpoints[1] for c in cables], dtype=int),
        cable_k=np.array([c.stiffness for c in cables]),
        cable_c=np.array([c.damping for c in cables]),
        cable_init_rest=np.array([c.initial_rest_length for c in cables]),
        cable_speed=np.array([c.motor_speed if c.actuated else 0.0 for c in cables]),
        actuated_idx=np.array(topology.actuated_cable_ids, dtype=int),
        rod_mass=mass,
        rod_inertia=inertia,
        rod_length=length,
    )
    _TABLE_CACHE[key] = tables
    return tables


# ---------------------------------------------------------------------------
# batched core: all arrays carry a leading batch axis B
# ---------------------------------------------------------------------------

def _endcap_positions(tables: SimTables, P: np.ndarray, R: np.ndarray) -> np.ndarray:
    offs_w = quat_rotate(R[:, tables.node_rod], tables.node_offset)
    return P[:, tables.node_rod] + offs_w


def _endcap_velocities(tables: SimTables, P, R, V, Omega, X) -> np.ndarray:
    omega_w = quat_rotate(R, Omega)
    r_w = X - P[:, tables.node_rod]
    return V[:, tables.node_rod] + np.cross(omega_w[:, tables.node_rod], r_w)


def _cable_forces_batched(tables: SimTables, X, Xdot, rest) -> np.ndarray:
    """Per-endcap force array (B, 2R, 3) from all cables."""
    d = X[:, tables.cable_b] - X[:, tables.cable_a]          # (B, M, 3)
    dist = np.linalg.norm(d, axis=-1)                         # (B, M)
    if np.any(dist < 1e-9):
        raise DegenerateGeometryError("coincident cable endpoints")
    unit = d / dist[..., None]
    vrel = Xdot[:, tables.cable_b] - Xdot[:, tables.cable_a]
    ldot = np.sum(vrel * unit, axis=-1)
    taut = dist > rest
    tension = np.where(taut,
                       np.maximum(0.0, tables.cable_k * (dist - rest)
                                  + tables.cable_c * ldot),
                       0.0)
    f = tension[..., None] * unit                             # pull a toward b
    forces = np.zeros_like(X)
    np.add.at(forces, (slice(None), tables.cable_a), f)
    np.add.at(forces, (slice(None), tables.cable_b), -f)
    return forces


def _contact_forces_batched(tables: SimTables, X, Xdot, params: SimParams) -> np.ndarray:
    pen = tables.node_radius - X[..., 2]                      # (B, 2R)
    active = pen > 0.0
    vz = Xdot[..., 2]
    fn = np.where(active,
                  params.ground_stiffness * pen
                  + params.ground_damping * np.maximum(0.0, -vz),
                  0.0)
    vt = Xdot[..., :2]
    vt_mag = np.linalg.norm(vt, axis=-1)
    ft_mag = np.where(active & (vt_mag > 1e-12),
                      np.minimum(params.friction_mu * fn,
                                 params.ground_damping * vt_mag),
                      0.0)
    forces = np.zeros_like(X)
    forces[..., 2] = fn
    safe = np.where(vt_mag > 1e-12, vt_mag, 1.0)
    forces[..., :2] = -(ft_mag / safe)[..., None] * vt
    return forces


def _motor_step_batched(tables: SimTables, rest, u, dt: float) -> np.ndarray:
    """Rate-limited rest-length integration with travel clamps."""
    delta = np.zeros_like(rest)
    delta[..., tables.actuated_idx] = (
        u * tables.cable_speed[tables.actuated_idx] * dt)
    lo = REST_LENGTH_MIN_FRAC * tables.cable_init_rest
    hi = REST_LENGTH_MAX_FRAC * tables.cable_init_rest
    return np.clip(rest - delta, lo, hi)


def step_batched(tables: SimTables, params: SimParams,
                 P, R, V, Omega, rest, u):
    """One dt_internal semi-explicit Euler step for a batch of robots.

    Returns updated (P, R, V, Omega, rest). Raises on non-finite forces
    for a batch of one; callers running larger batches should screen
    with :func:`divergence_mask` instead.
    """
    dt = params.dt_internal
    X = _endcap_positions(tables, P, R)
    Xdot = _endcap_velocities(tables, P, R, V, Omega, X)
    f_end = (_cable_forces_batched(tables, X, Xdot, rest)
             + _contact_forces_batched(tables, X, Xdot, params))

    n_rods = P.shape[1]
    f_rod = f_end.reshape(P.shape[0], n_rods, 2, 3).sum(axis=2)
    r_w = X - P[:, tables.node_rod]
    tau_w = np.cross(r_w, f_end).reshape(P.shape[0], n_rods, 2, 3).sum(axis=2)

    if P.shape[0] == 1 and not np.all(np.isfinite(f_rod)):
        bad = int(np.argwhere(~np.isfinite(f_rod).all(axis=-1))[0][1])
        raise NumericalBlowupError(f"non-finite force on rod {bad}", rod_id=bad)

    accel = f_rod / tables.rod_mass[:, None]
    accel[..., 2] += params.gravity
    V = V + dt * accel

    # Euler's equations in the body frame
    q_conj = R * np.array([1.0, -1.0, -1.0, -1.0])
    tau_b = quat_rotate(q_conj, tau_w)
    inertia = tables.rod_inertia
    gyro = np.cross(Omega, inertia * Omega)
    Omega = Omega + dt * (tau_b - gyro) / inertia

    P = P + dt * V
    R = quat_normalize(quat_mul(R, quat_from_rotvec(Omega * dt)))
    rest = _motor_step_batched(tables, rest, u, dt)
    return P, R, V, Omega, rest


def divergence_mask(P, V, limit: float = 1e3) -> np.ndarray:
    """Per-batch-entry flag for blown-up or non-finite states."""
    bad = ~np.isfinite(P).all(axis=(1, 2)) | ~np.isfinite(V).all(axis=(1, 2))
    return bad | (np.abs(V) > limit).any(axis=(1, 2))


# ---------------------------------------------------------------------------
# single-robot operations
# ---------------------------------------------------------------------------

def endcap_positions(state: FullState, topology: RobotTopology) -> np.ndarray:
    tables = sim_tables(topology)
    return _endcap_positions(tables, state.P[None], state.R[None])[0]


def endcap_velocities(state: FullState, topology: RobotTopology) -> np.ndarray:
    tables = sim_tables(topology)
    X = _endcap_positions(tables, state.P[None], state.R[None])
    return _endcap_velocities(tables, state.P[None], state.R[None],
                              state.V[None], state.Omega[None], X)[0]


def cable_forces(state: FullState, topology: RobotTopology) -> np.ndarray:
    """Force on each endcap node from all cables, (2R, 3)."""
    tables = sim_tables(topology)
    X = _endcap_positions(tables, state.P[None], state.R[None])
    Xdot = _endcap_velocities(tables, state.P[None], state.R[None],
                              state.V[None], state.Omega[None], X)
    return _cable_forces_batched(tables, X, Xdot, state.rest_lengths[None])[0]


def contact_forces(state: FullState, topology: RobotTopology,
                   params: SimParams) -> np.ndarray:
    """Penalty normal + capped viscous friction per endcap, (2R, 3)."""
    tables = sim_tables(topology)
    X = _endcap_positions(tables, state.P[None], state.R[None])
    Xdot = _endcap_velocities(tables, state.P[None], state.R[None],
                              state.V[None], state.Omega[None], X)
    return _contact_forces_batched(tables, X, Xdot, params)[0]


def motor_step(rest_lengths: np.ndarray, controls: ControlFrame,
               topology: RobotTopology, dt: float) -> np.ndarray:
    tables = sim_tables(topology)
    return _motor_step_batched(tables, np.asarray(rest_lengths, dtype=float),
                               controls.u, dt)


def step(state: FullState, controls: ControlFrame, topology: RobotTopology,
         params: SimParams) -> FullState:
    """Advance one dt_internal step."""
    tables = sim_tables(topology)
    P, R, V, Omega, rest = step_batched(
        tables, params, state.P[None], state.R[None], state.V[None],
        state.Omega[None], state.rest_lengths[None], controls.u[None])
    return FullState(P[0], R[0], V[0], Omega[0], rest[0],
                     time=state.time + params.dt_internal)


def observe(state: FullState, topology: RobotTopology) -> Observation:
    """Project to the partially observable view: endcap positions only."""
    return Observation(endcap_positions(state, topology), time=state.time)


def add_observation_noise(obs: Observation, sigma: float, seed: int) -> Observation:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return obs.copy()
    rng = np.random.default_rng(seed)
    noisy = obs.endcap_positions + rng.normal(0.0, sigma, obs.endcap_positions.shape)
    return Observation(noisy, obs.time)


def rollout(initial: FullState, control_sequence: np.ndarray,
            topology: RobotTopology, params: SimParams):
    """Roll the oracle forward, emitting one frame per sample_dt.

    ``control_sequence`` has one row per sample interval (shape
    (steps, n_actuated)); the returned trajectory has steps+1 frames,
    inclusive of the initial state. The final frame stores zero controls.
    """
    from .trajectory import Trajectory

    params.validate()
    tables = sim_tables(topology)
    controls = np.asarray(control_sequence, dtype=float)
    if controls.ndim == 1:
        controls = controls[:, None]
    n_steps = controls.shape[0]
    substeps = params.substeps

    P = initial.P[None].copy()
    R = initial.R[None].copy()
    V = initial.V[None].copy()
    Om = initial.Omega[None].copy()
    rest = initial.rest_lengths[None].copy()

    n_frames = n_steps + 1
    times = initial.time + params.sample_dt * np.arange(n_frames)
    caps = np.zeros((n_frames, topology.num_endcaps, 3))
    ctrl = np.zeros((n_frames, controls.shape[1]))
    ctrl[:n_steps] = controls
    Ps = np.zeros((n_frames,) + initial.P.shape)
    Rs = np.zeros((n_frames,) + initial.R.shape)
    Vs = np.zeros_like(Ps)
    Oms = np.zeros_like(Ps)
    rests = np.zeros((n_frames, rest.shape[1]))

    def record(i):
        caps[i] = _endcap_positions(tables, P, R)[0]
        Ps[i], Rs[i], Vs[i], Oms[i], rests[i] = P[0], R[0], V[0], Om[0], rest[0]

    record(0)
    for i in range(n_steps):
        u = controls[i][None]
        for _ in range(substeps):
            P, R, V, Om, rest = step_batched(tables, params, P, R, V, Om, rest, u)
        if divergence_mask(P, V)[0]:
            raise NumericalBlowupError(f"rollout diverged at sample step {i + 1}")
        record(i + 1)

    return Trajectory(sample_dt=params.sample_dt, times=times, endcaps=caps,
                      controls=ctrl, P=Ps, R=Rs, V=Vs, Omega=Oms,
                      rest_lengths=rests, sim_params=params.to_dict())


# ---------------------------------------------------------------------------
# initial states
# ---------------------------------------------------------------------------

def state_from_endcaps(topology: RobotTopology, endcaps: np.ndarray,
                       rest_lengths: np.ndarray | None = None,
                       time: float = 0.0) -> FullState:
    """Static FullState whose rods reproduce the given endcap positions.

    Orientation twist about each rod axis is unobservable from endcaps,
    so the minimal (zero-twist) rotation is used.
    """
    n_rods = len(topology.rods)
    P = np.zeros((n_rods, 3))
    R = np.zeros((n_rods, 4))
    for k, rod in enumerate(topology.rods):
        a, b = rod.endcap_indices
        P[k] = 0.5 * (endcaps[a] + endcaps[b])
        axis = endcaps[b] - endcaps[a]
        norm = np.linalg.norm(axis)
        if norm < 1e-9:
            raise DegenerateGeometryError(f"rod {k} endcaps coincide")
        R[k] = quat_align_z(axis / norm)
    if rest_lengths is None:
        rest_lengths = np.array([c.initial_rest_length for c in topology.cables])
    return FullState(P=P, R=R, V=np.zeros((n_rods, 3)),
                     Omega=np.zeros((n_rods, 3)),
                     rest_lengths=np.asarray(rest_lengths, dtype=float).copy(),
                     time=time)


def standing_state(topology: RobotTopology, height_offset: float = 0.0) -> FullState:
    """Canonical rest pose for the built-in 3-bar and 6-bar robots."""
    n_rods = len(topology.rods)
    rod_length = topology.rods[0].length
    if n_rods == 3:
        caps = three_bar_node_positions(rod_length)
    elif n_rods == 6:
        caps = six_bar_node_positions(rod_length)
    else:
        raise ValueError(f"no canonical pose for a {n_rods}-rod robot")
    caps = caps.copy()
    lift = topology.rods[0].endcap_radius - caps[:, 2].min() + height_offset
    caps[:, 2] += lift
    return state_from_endcaps(topology, caps)


def settle(state: FullState, topology: RobotTopology, params: SimParams,
           duration: float = 1.0) -> FullState:
    """Run the passive dynamics until transients decay; returns the final state."""
    n_act = len(topology.actuated_cable_ids)
    steps = int(round(duration / params.sample_dt))
    traj = rollout(state, np.zeros((steps, n_act)), topology, params)
    return FullState(P=traj.P[-1], R=traj.R[-1], V=traj.V[-1],
                     Omega=traj.Omega[-1], rest_lengths=traj.rest_lengths[-1],
                     time=state.time)


def mechanical_energy(state: FullState, topology: RobotTopology,
                      params: SimParams, include_ground: bool = False) -> float:
    """Kinetic + gravitational + elastic cable energy (optionally ground spring)."""
    tables = sim_tables(topology)
    ke = 0.5 * np.sum(tables.rod_mass[:, None] * state.V ** 2)
    ke += 0.5 * np.sum(tables.rod_inertia * state.Omega ** 2)
    pe = float(np.sum(tables.rod_mass * (-params.gravity) * state.P[:, 2]))
    X = endcap_positions(state, topology)
    dist = np.linalg.norm(X[tables.cable_b] - X[tables.cable_a], axis=-1)
    stretch = np.maximum(0.0, dist - state.rest_lengths)
    elastic = 0.5 * np.sum(tables.cable_k * stretch ** 2)
    total = float(ke + pe + elastic)
    if include_ground:
        pen = np.maximum(0.0, tables.node_radius - X[:, 2])
        total += 0.5 * params.ground_stiffness * float(np.sum(pen ** 2))
    return total
