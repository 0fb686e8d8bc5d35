"""Error metrics and rollout evaluation protocols.

Positional error is the mean squared CoM deviation over all (rod,
timestep) pairs, normalized by rod length and reported as a percentage.
Rotational error is the mean angle between ground-truth and predicted
rod center-axes in degrees; axes follow the endcap-pair order of the
topology for both sides, so identical inputs give exactly zero.

Two protocols: full-trajectory rollouts from each test trajectory's
start, and short-horizon rollouts from seeded random mid-trajectory
states with the recurrent state warmed up on the preceding frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gnn import TensegrityGNN
from .graphgen import GraphConfig
from .integrate import DivergedError, rollout_model
from .refsim import Observation
from .topology import RobotTopology
from .trajectory import Trajectory


class DegenerateAxisError(ValueError):
    pass


@dataclass
class EvalConfig:
    N_SH: int = 10           # short-horizon segments per trajectory
    T_SH: int = 100          # short-horizon length in steps
    seed: int = 0
    warm_encodes: int = 6    # teacher-forced recurrent warm-up steps

    def __post_init__(self):
        if self.N_SH < 1 or self.T_SH < 1:
            raise ValueError("N_SH and T_SH must be positive")

    def to_dict(self) -> dict:
        return {"N_SH": self.N_SH, "T_SH": self.T_SH, "seed": self.seed,
                "warm_encodes": self.warm_encodes}


@dataclass
class MetricsReport:
    e_pos_full: tuple[float, float] | None = None   # (mean, std)
    e_rot_full: tuple[float, float] | None = None
    e_pos_sh: tuple[float, float] | None = None
    e_rot_sh: tuple[float, float] | None = None
    per_trajectory: list[dict] = field(default_factory=list)
    num_samples: int = 0
    diverged: int = 0

    def to_dict(self) -> dict:
        return {"e_pos_full": self.e_pos_full, "e_rot_full": self.e_rot_full,
                "e_pos_sh": self.e_pos_sh, "e_rot_sh": self.e_rot_sh,
                "per_trajectory": self.per_trajectory,
                "num_samples": self.num_samples, "diverged": self.diverged}

    def summary_csv(self) -> str:
        def fmt(pair):
            return ("" if pair is None else f"{pair[0]!r},{pair[1]!r}")
        lines = ["full_pos_pct_mean,full_pos_pct_std,full_rot_deg_mean,"
                 "full_rot_deg_std,sh_pos_pct_mean,sh_pos_pct_std,"
                 "sh_rot_deg_mean,sh_rot_deg_std",
                 ",".join([fmt(self.e_pos_full), fmt(self.e_rot_full),
                           fmt(self.e_pos_sh), fmt(self.e_rot_sh)])]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def e_pos(gt_coms: np.ndarray, pred_coms: np.ndarray, rod_length: float
          ) -> float:
    """Mean squared CoM error per (rod, timestep) pair, as % of rod length."""
    gt = np.asarray(gt_coms, dtype=float)
    pred = np.asarray(pred_coms, dtype=float)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {pred.shape}")
    sq = np.sum((gt - pred) ** 2, axis=-1)
    return float(sq.mean() / rod_length * 100.0)


def e_rot(gt_axes: np.ndarray, pred_axes: np.ndarray) -> float:
    """Mean rod center-axis angle error in degrees."""
    gt = np.asarray(gt_axes, dtype=float)
    pred = np.asarray(pred_axes, dtype=float)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {pred.shape}")
    gn = np.linalg.norm(gt, axis=-1)
    pn = np.linalg.norm(pred, axis=-1)
    if np.any(gn < 1e-12) or np.any(pn < 1e-12):
        raise DegenerateAxisError("zero-length rod axis")
    dots = np.clip(np.sum(gt * pred, axis=-1) / (gn * pn), -1.0, 1.0)
    return float(np.degrees(np.arccos(dots)).mean())


def rod_coms(endcaps: np.ndarray, topology: RobotTopology) -> np.ndarray:
    """(T, R, 3) rod midpoints from (T, 2R, 3) endcap frames."""
    a = np.array([r.endcap_indices[0] for r in topology.rods])
    b = np.array([r.endcap_indices[1] for r in topology.rods])
    return 0.5 * (endcaps[:, a] + endcaps[:, b])


def rod_axes(endcaps: np.ndarray, topology: RobotTopology) -> np.ndarray:
    """(T, R, 3) unit axes, first endcap toward second."""
    a = np.array([r.endcap_indices[0] for r in topology.rods])
    b = np.array([r.endcap_indices[1] for r in topology.rods])
    axes = endcaps[:, b] - endcaps[:, a]
    return axes / np.linalg.norm(axes, axis=-1, keepdims=True)


def segment_errors(gt_caps: np.ndarray, pred_caps: np.ndarray,
                   topology: RobotTopology) -> tuple[float, float]:
    rod_length = topology.rods[0].length
    pos = e_pos(rod_coms(gt_caps, topology), rod_coms(pred_caps, topology),
                rod_length)
    rot = e_rot(rod_axes(gt_caps, topology), rod_axes(pred_caps, topology))
    return pos, rot


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def _rest_series(traj: Trajectory, topology: RobotTopology) -> np.ndarray:
    from .train import open_loop_rest_estimate
    if traj.rest_lengths is not None:
        return traj.rest_lengths
    return open_loop_rest_estimate(traj, topology)


def _warm_recurrent(model: TensegrityGNN, traj: Trajectory,
                    rest_series: np.ndarray, t_start: int,
                    graph_config: GraphConfig, warm_encodes: int):
    """Teacher-forced stride-n encoder passes on the frames before t_start."""
    from .train import graph_at
    rec = model.init_recurrent(model.topology.num_nodes)
    if not model.config.use_recurrence or warm_encodes <= 0:
        return rec
    n = model.config.n
    warm = min(warm_encodes, (t_start - 1) // n)
    for j in range(warm, 0, -1):
        graph = graph_at(traj, t_start - j * n, rest_series,
                         traj.dataset_id, model.topology, graph_config)
        rec = model.encode_only([graph], rec)
    return rec


def _rollout_against(model: TensegrityGNN, traj: Trajectory,
                     graph_config: GraphConfig, t_start: int, horizon: int,
                     warm_encodes: int):
    """Model rollout from the trajectory's state at t_start.

    Returns (gt_caps, pred_caps) over the horizon, or raises
    DivergedError.
    """
    topology = model.topology
    rest_series = _rest_series(traj, topology)
    rec = _warm_recurrent(model, traj, rest_series, t_start, graph_config,
                          warm_encodes)
    window = [Observation(traj.endcaps[t_start - 1], traj.times[t_start - 1]),
              Observation(traj.endcaps[t_start], traj.times[t_start])]
    controls = traj.controls[t_start:t_start + horizon]
    h = graph_config.h
    past = traj.controls[max(0, t_start - h):t_start]
    if past.shape[0] < h:
        past = np.concatenate(
            [np.zeros((h - past.shape[0], past.shape[1])), past], axis=0)
    gt_deltas = None
    if model.config.motor_mode == "ground_truth":
        rs = rest_series
        gt_deltas = rs[t_start + 1:t_start + horizon + 1] - \
            rs[t_start:t_start + horizon]
    result = rollout_model(window, controls, model, topology, graph_config,
                           dataset_id=traj.dataset_id,
                           rest_lengths=rest_series[t_start],
                           recurrent=rec, past_controls=past,
                           gt_rest_deltas=gt_deltas)
    pred_caps = result.trajectory.endcaps[1:]
    gt_caps = traj.endcaps[t_start + 1:t_start + 1 + horizon]
    return gt_caps, pred_caps


def _mean_std(values: list[float]) -> tuple[float, float] | None:
    if not values:
        return None
    arr = np.array(values)
    return float(arr.mean()), float(arr.std())


def full_traj_eval(model: TensegrityGNN, trajectories: list[Trajectory],
                   graph_config: GraphConfig, eval_config: EvalConfig
                   ) -> MetricsReport:
    """Rollout from each trajectory's start through its full duration."""
    report = MetricsReport()
    pos_list, rot_list = [], []
    for idx, traj in enumerate(trajectories):
        horizon = len(traj) - 2
        row = {"trajectory": idx, "protocol": "full", "diverged": False}
        try:
            gt, pred = _rollout_against(model, traj, graph_config, 1, horizon,
                                        warm_encodes=0)
            row["e_pos"], row["e_rot"] = segment_errors(gt, pred,
                                                        model.topology)
            pos_list.append(row["e_pos"])
            rot_list.append(row["e_rot"])
        except DivergedError:
            row["diverged"] = True
            report.diverged += 1
        report.per_trajectory.append(row)
        report.num_samples += 1
    report.e_pos_full = _mean_std(pos_list)
    report.e_rot_full = _mean_std(rot_list)
    return report


def short_horizon_eval(model: TensegrityGNN, trajectories: list[Trajectory],
                       graph_config: GraphConfig, eval_config: EvalConfig
                       ) -> MetricsReport:
    """Seeded random mid-trajectory starts, rolled out T_SH steps each."""
    rng = np.random.default_rng(eval_config.seed)
    report = MetricsReport()
    pos_list, rot_list = [], []
    for idx, traj in enumerate(trajectories):
        lo = 1
        hi = len(traj) - 1 - eval_config.T_SH
        if hi <= lo:
            raise ValueError(
                f"trajectory {idx} too short for T_SH={eval_config.T_SH}")
        starts = rng.integers(lo, hi, size=eval_config.N_SH)
        for start in starts:
            row = {"trajectory": idx, "protocol": "short_horizon",
                   "start": int(start), "diverged": False}
            try:
                gt, pred = _rollout_against(model, traj, graph_config,
                                            int(start), eval_config.T_SH,
                                            eval_config.warm_encodes)
                row["e_pos"], row["e_rot"] = segment_errors(
                    gt, pred, model.topology)
                pos_list.append(row["e_pos"])
                rot_list.append(row["e_rot"])
            except DivergedError:
                row["diverged"] = True
                report.diverged += 1
            report.per_trajectory.append(row)
            report.num_samples += 1
    report.e_pos_sh = _mean_std(pos_list)
    report.e_rot_sh = _mean_std(rot_list)
    return report


def evaluate_model(model: TensegrityGNN, trajectories: list[Trajectory],
                   graph_config: GraphConfig, eval_config: EvalConfig
                   ) -> MetricsReport:
    """Both protocols combined into one report."""
    full = full_traj_eval(model, trajectories, graph_config, eval_config)
    short = short_horizon_eval(model, trajectories, graph_config, eval_config)
    return MetricsReport(
        e_pos_full=full.e_pos_full, e_rot_full=full.e_rot_full,
        e_pos_sh=short.e_pos_sh, e_rot_sh=short.e_rot_sh,
        per_trajectory=full.per_trajectory + short.per_trajectory,
        num_samples=full.num_samples + short.num_samples,
        diverged=full.diverged + short.diverged)


def oracle_self_eval(trajectories: list[Trajectory],
                     topology: RobotTopology) -> MetricsReport:
    """Re-simulate each trajectory from its logged initial full state.

    With a deterministic oracle this reproduces the frames exactly, so
    all metrics are zero; serves as the metrics-pipeline self-test.
    """
    from .refsim import FullState, SimParams, rollout

    report = MetricsReport()
    pos_list, rot_list = [], []
    for idx, traj in enumerate(trajectories):
        if not traj.has_full_state:
            raise ValueError("oracle self-eval needs full-state trajectories")
        params = SimParams.from_dict(traj.sim_params)
        initial = FullState(traj.P[0].copy(), traj.R[0].copy(),
                            traj.V[0].copy(), traj.Omega[0].copy(),
                            traj.rest_lengths[0].copy(), time=traj.times[0])
        redo = rollout(initial, traj.controls[:-1], topology, params)
        row = {"trajectory": idx, "protocol": "full", "diverged": False}
        row["e_pos"], row["e_rot"] = segment_errors(traj.endcaps, redo.endcaps,
                                                    topology)
        pos_list.append(row["e_pos"])
        rot_list.append(row["e_rot"])
        report.per_trajectory.append(row)
        report.num_samples += 1
    report.e_pos_full = _mean_std(pos_list)
    report.e_rot_full = _mean_std(rot_list)
    report.e_pos_sh = (0.0, 0.0)
    report.e_rot_sh = (0.0, 0.0)
    return report
