"""Multi-step semi-explicit Euler integration of model predictions.

One model call yields n per-step velocity and rest-length deltas; these
are folded in sequentially (velocity first, then position with the
updated velocity), so a rollout of T steps needs ceil(T/n) model calls
while still emitting a frame at every dt. The ground node is pinned
here: its velocity stays zero and its position never moves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gnn import PredictionBlock, RecurrentState, TensegrityGNN
from .graphgen import GraphConfig, build_graph
from .refsim import Observation
from .topology import RobotTopology
from .trajectory import Trajectory

REST_FLOOR = 1e-6
VELOCITY_LIMIT = 1e3


class DivergedError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass
class SimNodeState:
    p: np.ndarray              # (nodes, 3), ground row last and fixed
    v: np.ndarray              # (nodes, 3)
    rest_lengths: np.ndarray   # (cables,)
    time: float
    dt: float

    def copy(self) -> "SimNodeState":
        return SimNodeState(self.p.copy(), self.v.copy(),
                            self.rest_lengths.copy(), self.time, self.dt)


def integrate_multistep(state: SimNodeState, pred: PredictionBlock
                        ) -> tuple[list[SimNodeState], bool]:
    """Apply n predicted deltas; returns all n intermediate states.

    Rest lengths are clamped at a small positive floor; the returned
    flag reports whether any clamp fired.
    """
    n_nodes = state.p.shape[0]
    if pred.delta_v.shape[0] != n_nodes:
        raise ValueError(
            f"delta_v covers {pred.delta_v.shape[0]} nodes, state has {n_nodes}")
    if pred.delta_rest.shape[0] != state.rest_lengths.shape[0]:
        raise ValueError("delta_rest does not match cable count")
    if not (np.all(np.isfinite(state.p)) and np.all(np.isfinite(state.v))):
        raise ValueError("non-finite state")

    n = pred.delta_v.shape[1]
    clamped = False
    states = []
    p, v, rest = state.p.copy(), state.v.copy(), state.rest_lengths.copy()
    t = state.time
    for i in range(n):
        v = v + pred.delta_v[:, i, :]
        v[-1] = 0.0                      # ground node pinned
        p = p + state.dt * v
        rest = rest + pred.delta_rest[:, i]
        if np.any(rest < REST_FLOOR):
            rest = np.maximum(rest, REST_FLOOR)
            clamped = True
        t = t + state.dt
        states.append(SimNodeState(p.copy(), v.copy(), rest.copy(), t, state.dt))
    return states, clamped


@dataclass
class ModelRolloutResult:
    trajectory: Trajectory
    model_calls: int
    clamp_events: int
    final_state: SimNodeState
    recurrent: RecurrentState


def state_from_window(obs_window: list[Observation], topology: RobotTopology,
                      rest_lengths: np.ndarray, dt: float) -> SimNodeState:
    """Node state at the window's last frame; velocity by finite difference."""
    caps = obs_window[-1].endcap_positions
    n_nodes = topology.num_nodes
    p = np.zeros((n_nodes, 3))
    p[:topology.num_endcaps] = caps
    v = np.zeros((n_nodes, 3))
    if len(obs_window) >= 2:
        prev = obs_window[-2].endcap_positions
        v[:topology.num_endcaps] = (caps - prev) / dt
    return SimNodeState(p=p, v=v, rest_lengths=np.asarray(rest_lengths,
                                                          dtype=float).copy(),
                        time=obs_window[-1].time, dt=dt)


def rollout_model(obs_window: list[Observation], controls: np.ndarray,
                  model: TensegrityGNN, topology: RobotTopology,
                  graph_config: GraphConfig, dataset_id: int = 0,
                  rest_lengths: np.ndarray | None = None,
                  recurrent: RecurrentState | None = None,
                  past_controls: np.ndarray | None = None,
                  gt_rest_deltas: np.ndarray | None = None
                  ) -> ModelRolloutResult:
    """Autoregressive model rollout emitting a frame every dt.

    ``controls`` has one row per future step, starting at the window's
    last frame time. ``past_controls`` optionally supplies the h rows
    preceding the window (defaults to zero padding). When the model runs
    in ground-truth motor mode, ``gt_rest_deltas`` must provide per-step
    logged rest-length deltas aligned with ``controls``.
    """
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1:
        controls = controls[:, None]
    h, n = graph_config.h, graph_config.n
    horizon = controls.shape[0]
    if rest_lengths is None:
        rest_lengths = np.array([c.initial_rest_length for c in topology.cables])

    if past_controls is None:
        past_controls = np.zeros((h, controls.shape[1]))
    overshoot = (-horizon) % n
    padded = np.concatenate(
        [past_controls[-h:] if h else np.zeros((0, controls.shape[1])),
         controls, np.zeros((overshoot + n, controls.shape[1]))], axis=0)

    state = state_from_window(obs_window, topology, rest_lengths,
                              model.integration_dt)
    rec = recurrent if recurrent is not None else model.init_recurrent(
        topology.num_nodes)

    n_caps = topology.num_endcaps
    frames_p = [state.p[:n_caps].copy()]
    frames_rest = [state.rest_lengths.copy()]
    prev_caps = (obs_window[-2].endcap_positions.copy()
                 if len(obs_window) >= 2 else None)
    clamps = 0
    calls = 0
    step = 0
    while step < horizon:
        cur = Observation(state.p[:n_caps].copy(), time=state.time)
        window = [cur] if prev_caps is None else [
            Observation(prev_caps, time=state.time - state.dt), cur]
        ctrl_window = padded[step:step + h + n]
        graph = build_graph(window, ctrl_window, state.rest_lengths,
                            dataset_id, topology, graph_config)
        gt_chunk = None
        if model.config.motor_mode == "ground_truth":
            if gt_rest_deltas is None:
                raise ValueError("ground_truth motor mode needs gt_rest_deltas")
            chunk = np.zeros((topology.num_cables, n))
            avail = min(n, gt_rest_deltas.shape[0] - step)
            if avail > 0:
                chunk[:, :avail] = gt_rest_deltas[step:step + avail].T
            gt_chunk = chunk
        pred, rec = model.predict(graph, rec, gt_delta_rest=gt_chunk)
        calls += 1
        states, clamped = integrate_multistep(state, pred)
        clamps += int(clamped)
        for s in states:
            if step >= horizon:
                break
            if np.any(np.abs(s.v) > VELOCITY_LIMIT) or not np.all(np.isfinite(s.p)):
                raise DivergedError(f"model rollout diverged at step {step + 1}",
                                    step=step + 1)
            frames_p.append(s.p[:n_caps].copy())
            frames_rest.append(s.rest_lengths.copy())
            step += 1
        prev_caps = states[-2].p[:n_caps].copy() if len(states) >= 2 else \
            frames_p[-2].copy()
        state = states[-1]

    times = obs_window[-1].time + state.dt * np.arange(horizon + 1)
    ctrl_frames = np.zeros((horizon + 1, controls.shape[1]))
    ctrl_frames[:horizon] = controls
    traj = Trajectory(sample_dt=state.dt, times=times,
                      endcaps=np.array(frames_p), controls=ctrl_frames,
                      rest_lengths=np.array(frames_rest),
                      dataset_id=dataset_id)
    return ModelRolloutResult(trajectory=traj, model_calls=calls,
                              clamp_events=clamps, final_state=state,
                              recurrent=rec)
