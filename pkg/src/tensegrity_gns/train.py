"""Targets, loss, co-training pool, and the mini-batch training loop.

Targets come from finite differences of observed endcap positions:
velocity at frame i is (p_i - p_{i-1}) / dt, and the per-step velocity
change is the difference of consecutive velocities. Rest-length deltas
come from simulator logs when present, otherwise from an open-loop
integration of the commanded motor model from the initial rest length.

The recurrent encoder is trained the same way it is used: each sample's
hidden state is warmed up by teacher-forced encoder passes on graphs at
stride n before the supervised prediction step. The warm-up depth is
drawn per batch (0..warm_encodes, capped by history availability) so
the model sees fresh, partially warmed, and fully warmed states.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field

import numpy as np

from . import net
from .gnn import GraphBatch, RecurrentState, TensegrityGNN, collate
from .graphgen import (FeatureNormalizer, GraphConfig, accumulate_normalizer,
                       build_graph, slice_control_window)
from .net import Tensor
from .refsim import Observation, _motor_step_batched, sim_tables
from .topology import RobotTopology
from .trajectory import Dataset, Trajectory


@dataclass
class TrainConfig:
    w1: float = 1.0
    w2: float = 1.0
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    input_noise_sigma: float = 0.01    # m/s, on velocity features; 0 disables
    learning_rate: float = 1e-4
    decay_rate: float = 0.995
    warm_encodes: int = 6              # max teacher-forced state warm-up steps
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0 or (self.w1 == 0 and self.w2 == 0):
            raise ValueError("weights must be non-negative and not both zero")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "w1", "w2", "batch_size", "epochs", "seed", "input_noise_sigma",
            "learning_rate", "decay_rate", "warm_encodes", "val_fraction")}


@dataclass
class TrainSample:
    traj: Trajectory
    t: int                       # frame index of the model call
    dataset_id: int
    delta_v: np.ndarray          # (endcaps, n, 3) ground truth
    delta_rest: np.ndarray       # (cables, n) ground truth
    rest_inputs: np.ndarray      # (T, cables) estimate series for features
    warm_capacity: int           # how many stride-n warm steps history allows


@dataclass
class SamplePool:
    train_samples: list[TrainSample]
    val_samples: list[TrainSample]
    num_datasets: int
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_samples) + len(self.val_samples)


def open_loop_rest_estimate(traj: Trajectory, topology: RobotTopology
                            ) -> np.ndarray:
    """Commanded motor model integrated from the initial rest lengths."""
    tables = sim_tables(topology)
    T = len(traj)
    est = np.zeros((T, topology.num_cables))
    est[0] = tables.cable_init_rest
    for i in range(T - 1):
        est[i + 1] = _motor_step_batched(tables, est[i][None],
                                         traj.controls[i][None],
                                         traj.sample_dt)[0]
    return est


def build_targets(traj: Trajectory, topology: RobotTopology,
                  config: GraphConfig) -> tuple[list[TrainSample], list[str]]:
    """One sample per valid frame index t in [h+1, T-1-n], stride 1."""
    h, n = config.h, config.n
    T = len(traj)
    if T < h + n + 2:
        return [], [f"trajectory too short for targets: {T} < {h + n + 2}"]

    dt = traj.sample_dt
    caps = traj.endcaps
    vel = np.zeros_like(caps)
    vel[1:] = (caps[1:] - caps[:-1]) / dt
    dvel = np.zeros_like(caps)
    dvel[1:] = vel[1:] - vel[:-1]      # valid from index 2 on; t >= 1 guarantees it

    if traj.rest_lengths is not None:
        rest_series = traj.rest_lengths
    else:
        rest_series = open_loop_rest_estimate(traj, topology)
    drest = np.zeros_like(rest_series)
    drest[1:] = rest_series[1:] - rest_series[:-1]

    samples = []
    for t in range(h + 1, T - n):
        samples.append(TrainSample(
            traj=traj, t=t, dataset_id=traj.dataset_id,
            delta_v=np.transpose(dvel[t + 1:t + 1 + n], (1, 0, 2)).copy(),
            delta_rest=drest[t + 1:t + 1 + n].T.copy(),
            rest_inputs=rest_series,
            warm_capacity=(t - 1) // n))
    return samples, []


def make_cotrain_pool(sim_datasets: list[Dataset],
                      real_dataset: Dataset | None,
                      topology: RobotTopology, config: GraphConfig,
                      seed: int = 0, val_fraction: float = 0.1) -> SamplePool:
    """Pool sim datasets (ids 0..N-1) with an optional real dataset (id N).

    Records the one-hot width (N+1 with real data, N without) into the
    graph config, splits held-out validation trajectories per dataset,
    and interleaves samples with a seeded shuffle.
    """
    datasets = list(sim_datasets)
    for i, ds in enumerate(datasets):
        ds.assign_id(i)
    if real_dataset is not None:
        real_dataset.assign_id(len(datasets))
        datasets.append(real_dataset)
    if not datasets or all(len(ds) == 0 for ds in datasets):
        raise ValueError("empty co-training pool")

    config.num_datasets = len(datasets)
    rng = np.random.default_rng(seed)
    train_samples, val_samples, skipped = [], [], []
    for ds in datasets:
        trajs = list(ds.trajectories)
        n_val = int(round(val_fraction * len(trajs)))
        if len(trajs) >= 2 and n_val == 0 and val_fraction > 0:
            n_val = 1
        val_idx = set(rng.choice(len(trajs), size=n_val, replace=False).tolist()
                      if n_val else [])
        for j, traj in enumerate(trajs):
            samples, skips = build_targets(traj, topology, config)
            skipped.extend(skips)
            (val_samples if j in val_idx else train_samples).extend(samples)

    order = rng.permutation(len(train_samples))
    train_samples = [train_samples[i] for i in order]
    return SamplePool(train_samples, val_samples, len(datasets), skipped)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def loss(pred, sample: TrainSample, config: TrainConfig) -> float:
    """Scalar weighted MSE for one prediction block vs one sample."""
    dv_pred = pred.delta_v[:-1]      # drop the ground row
    if dv_pred.shape != sample.delta_v.shape:
        raise net.ShapeError(f"delta_v shape {dv_pred.shape} != "
                             f"target {sample.delta_v.shape}")
    if pred.delta_rest.shape != sample.delta_rest.shape:
        raise net.ShapeError("delta_rest shape mismatch")
    n_nodes = dv_pred.shape[0]
    n_cables = pred.delta_rest.shape[0]
    term_v = config.w1 * float(np.sum((dv_pred - sample.delta_v) ** 2)) / n_nodes
    term_l = config.w2 * float(
        np.sum((pred.delta_rest - sample.delta_rest) ** 2)) / n_cables
    return term_v + term_l


def _loss_tensor(dv: Tensor, dl, batch: GraphBatch,
                 dv_target: np.ndarray, dl_target: np.ndarray,
                 config: TrainConfig) -> Tensor:
    endcap_dv = net.gather_rows(dv, batch.endcap_rows)
    diff_v = net.sub(endcap_dv, Tensor(dv_target))
    term_v = net.scale(net.sum_all(net.mul(diff_v, diff_v)),
                       config.w1 / batch.endcap_rows.size)
    dl_t = dl if isinstance(dl, Tensor) else Tensor(dl)
    diff_l = net.sub(dl_t, Tensor(dl_target))
    term_l = net.scale(net.sum_all(net.mul(diff_l, diff_l)),
                       config.w2 / max(1, batch.cable_canonical_rows.size))
    return net.add(term_v, term_l)


# ---------------------------------------------------------------------------
# sample -> graphs
# ---------------------------------------------------------------------------

def graph_at(traj: Trajectory, t: int, rest_series: np.ndarray,
             dataset_id: int, topology: RobotTopology, config: GraphConfig,
             noise: np.ndarray | None = None):
    """Model-input graph for frame t of a trajectory (t >= 1)."""
    window = [Observation(traj.endcaps[t - 1], traj.times[t - 1]),
              Observation(traj.endcaps[t], traj.times[t])]
    ctrl = slice_control_window(traj.controls, t, config.h, config.n)
    return build_graph(window, ctrl, rest_series[t], dataset_id,
                       topology, config, velocity_noise=noise)


def _graph_at(sample: TrainSample, t: int, topology: RobotTopology,
              config: GraphConfig, noise: np.ndarray | None):
    return graph_at(sample.traj, t, sample.rest_inputs, sample.dataset_id,
                    topology, config, noise)


def _sample_graphs(sample: TrainSample, warm: int, topology: RobotTopology,
                   config: GraphConfig, sigma: float,
                   rng: np.random.Generator | None) -> list:
    n = config.n
    graphs = []
    for j in range(warm, -1, -1):
        t = sample.t - j * n
        noise = None
        if sigma > 0 and rng is not None:
            noise = rng.normal(0.0, sigma, (topology.num_nodes, 3))
            noise[-1] = 0.0
        graphs.append(_graph_at(sample, t, topology, config, noise))
    return graphs


def _forward_batch(model: TensegrityGNN, samples: list[TrainSample],
                   warm: int, config: GraphConfig, train_config: TrainConfig,
                   rng: np.random.Generator | None):
    """Warm-up encodes then the supervised step; returns (loss_tensor, batch)."""
    topology = model.topology
    sigma = train_config.input_noise_sigma if rng is not None else 0.0
    per_sample = [_sample_graphs(s, warm, topology, config, sigma, rng)
                  for s in samples]
    bound = model.store.bind()
    total_nodes = sum(g[0].num_nodes for g in per_sample)
    h_t = Tensor(np.zeros((total_nodes, model.config.latent_width)))
    c_t = Tensor(np.zeros((total_nodes, model.config.latent_width)))

    if model.config.use_recurrence:
        for j in range(warm):
            wb = collate([g[j] for g in per_sample], model.config.n)
            _, h_t, c_t = model.encode_t(bound, wb, h_t, c_t)

    main = collate([g[-1] for g in per_sample], model.config.n)
    latent, h_t, c_t = model.encode_t(bound, main, h_t, c_t)
    latent = model.process_t(bound, main, latent)

    dv_target = np.concatenate([s.delta_v for s in samples], axis=0)
    dl_target = np.concatenate([s.delta_rest for s in samples], axis=0)
    gt_dl = dl_target if model.config.motor_mode == "ground_truth" else None
    dv, dl = model.decode_t(bound, main, latent, gt_delta_rest=gt_dl)
    return _loss_tensor(dv, dl, main, dv_target, dl_target, train_config)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    optimizer_steps: int
    wall_time_s: float

    def to_dict(self) -> dict:
        return {"train_losses": self.train_losses, "val_losses": self.val_losses,
                "best_epoch": self.best_epoch,
                "optimizer_steps": self.optimizer_steps,
                "wall_time_s": self.wall_time_s}

    def curve_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        for i, (tr, va) in enumerate(zip(self.train_losses, self.val_losses)):
            lines.append(f"{i},{tr!r},{va!r}")
        return "\n".join(lines) + "\n"


def fit_normalizer(pool: SamplePool, model: TensegrityGNN,
                   config: GraphConfig) -> None:
    """Accumulate feature statistics over the training set, then freeze."""
    if config.normalizer is not None and config.normalizer.frozen:
        return
    norm = FeatureNormalizer()
    config.normalizer = None
    for sample in pool.train_samples:
        graph = _graph_at(sample, sample.t, model.topology, config, None)
        accumulate_normalizer(norm, graph)
    norm.freeze()
    config.normalizer = norm


def _evaluate(model: TensegrityGNN, samples: list[TrainSample],
              config: GraphConfig, train_config: TrainConfig) -> float:
    """Validation loss: fixed warm-up, no noise injection."""
    if not samples:
        return float("nan")
    total = 0.0
    weight = 0
    bs = train_config.batch_size
    by_warm: dict[int, list[TrainSample]] = {}
    for s in samples:
        w = min(train_config.warm_encodes, s.warm_capacity) \
            if model.config.use_recurrence else 0
        by_warm.setdefault(w, []).append(s)
    for w, group in sorted(by_warm.items()):
        for i in range(0, len(group), bs):
            chunk = group[i:i + bs]
            loss_t = _forward_batch(model, chunk, w, config, train_config, None)
            total += float(loss_t.value) * len(chunk)
            weight += len(chunk)
    return total / weight


def train_epochs(pool: SamplePool, model: TensegrityGNN,
                 train_config: TrainConfig, config: GraphConfig
                 ) -> TrainReport:
    """Mini-batch descent with best-validation parameter retention."""
    if not pool.train_samples:
        raise ValueError("empty training pool")
    fit_normalizer(pool, model, config)

    opt = net.OptimizerState(learning_rate=train_config.learning_rate,
                             decay_rate=train_config.decay_rate)
    rng = np.random.default_rng(train_config.seed)
    t0 = _time.perf_counter()
    train_losses, val_losses = [], []
    best_val = np.inf
    best_epoch = -1
    best_values = model.store.copy_values()
    steps = 0

    for epoch in range(train_config.epochs):
        order = rng.permutation(len(pool.train_samples))
        epoch_loss = 0.0
        epoch_weight = 0
        bs = train_config.batch_size
        for start in range(0, len(order), bs):
            batch = [pool.train_samples[i] for i in order[start:start + bs]]
            if model.config.use_recurrence:
                cap = min(min(s.warm_capacity for s in batch),
                          train_config.warm_encodes)
                warm = int(rng.integers(0, cap + 1)) if cap > 0 else 0
            else:
                warm = 0
            noise_rng = rng if train_config.input_noise_sigma > 0 else None
            loss_t = _forward_batch(model, batch, warm, config, train_config,
                                    noise_rng)
            value = float(loss_t.value)
            if not np.isfinite(value):
                raise net.NumericalError(
                    f"training loss diverged at epoch {epoch}, "
                    f"batch {start // bs}")
            net.backward(loss_t)
            net.optimizer_step(opt, model.store)
            steps += 1
            epoch_loss += value * len(batch)
            epoch_weight += len(batch)

        train_losses.append(epoch_loss / epoch_weight)
        val = _evaluate(model, pool.val_samples, config, train_config)
        val_losses.append(val)
        score = val if np.isfinite(val) else train_losses[-1]
        if score < best_val:
            best_val = score
            best_epoch = epoch
            best_values = model.store.copy_values()
        net.decay_learning_rate(opt)

    model.store.load_values(best_values)
    return TrainReport(train_losses=train_losses, val_losses=val_losses,
                       best_epoch=best_epoch, optimizer_steps=steps,
                       wall_time_s=_time.perf_counter() - t0)
