"""Graph and feature generation from partial observations.

Converts an observation window, a control window, and a dataset id into
a typed feature graph: endcap body nodes plus one ground node; body
edges between endcaps on the same rod, cable edges mirroring the cable
topology, and contact edges dynamically attached between near-ground
endcaps and the ground node. All structural edges appear in both
directions and edge displacement features are always dst - src.

Node feature layout (fixed order):
    velocity (3) | p - p_designated (3) | p - rod CoM (3) |
    rod axis toward partner (3) | node type one-hot (2) | dataset one-hot (D)

The ground node sits at the world origin with zero velocity; its
rod-relative and axis blocks are zero. Contact-edge geometry uses the
endcap's vertical projection onto the ground plane, which keeps every
edge feature invariant under horizontal translation of the robot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .refsim import Observation
from .topology import RobotTopology


class InvalidWindowError(ValueError):
    pass


class InvalidIdError(ValueError):
    pass


NODE_TYPE_WIDTH = 2
CONFIG_FEATURE_SLICE = slice(3, 12)   # designated-relative, CoM-relative, axis
VELOCITY_SLICE = slice(0, 3)


def node_feature_width(num_datasets: int) -> int:
    return 12 + NODE_TYPE_WIDTH + num_datasets


def edge_feature_widths(h: int, n: int) -> dict[str, int]:
    return {"body": 4, "cable": 6 + h + n, "contact": 4}


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

class FeatureNormalizer:
    """Running per-feature mean/std over the training set, frozen for use."""

    EPS = 1e-8

    def __init__(self):
        self._count: dict[str, int] = {}
        self._sum: dict[str, np.ndarray] = {}
        self._sumsq: dict[str, np.ndarray] = {}
        self.mean: dict[str, np.ndarray] = {}
        self.std: dict[str, np.ndarray] = {}
        self.frozen = False

    def update(self, key: str, rows: np.ndarray) -> None:
        if self.frozen:
            raise RuntimeError("normalizer is frozen")
        if rows.shape[0] == 0:
            return
        if key not in self._count:
            self._count[key] = 0
            self._sum[key] = np.zeros(rows.shape[1])
            self._sumsq[key] = np.zeros(rows.shape[1])
        self._count[key] += rows.shape[0]
        self._sum[key] += rows.sum(axis=0)
        self._sumsq[key] += (rows * rows).sum(axis=0)

    def freeze(self) -> None:
        for key, count in self._count.items():
            mean = self._sum[key] / count
            var = np.maximum(self._sumsq[key] / count - mean ** 2, 0.0)
            self.mean[key] = mean
            self.std[key] = np.sqrt(var)
        self.frozen = True

    def apply(self, key: str, rows: np.ndarray) -> np.ndarray:
        if key not in self.mean or rows.shape[0] == 0:
            return rows
        return (rows - self.mean[key]) / (self.std[key] + self.EPS)

    def to_dict(self) -> dict:
        return {key: {"mean": self.mean[key].tolist(),
                      "std": self.std[key].tolist()} for key in self.mean}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureNormalizer":
        norm = cls()
        for key, stats in d.items():
            norm.mean[key] = np.array(stats["mean"])
            norm.std[key] = np.array(stats["std"])
        norm.frozen = True
        return norm


# ---------------------------------------------------------------------------
# config and snapshot types
# ---------------------------------------------------------------------------

@dataclass
class GraphConfig:
    h: int = 6                      # past control steps
    n: int = 6                      # future control / prediction steps
    contact_threshold: float = 0.05
    num_datasets: int = 1           # one-hot width
    normalizer: FeatureNormalizer | None = None

    def __post_init__(self):
        if self.h < 0 or self.n < 1:
            raise ValueError("need h >= 0 and n >= 1")
        if self.contact_threshold <= 0:
            raise ValueError("contact_threshold must be positive")

    def to_dict(self) -> dict:
        return {"h": self.h, "n": self.n,
                "contact_threshold": self.contact_threshold,
                "num_datasets": self.num_datasets}


@dataclass
class EdgeSet:
    src: np.ndarray     # (E,) int
    dst: np.ndarray     # (E,) int
    feats: np.ndarray   # (E, F)

    @property
    def count(self) -> int:
        return len(self.src)


@dataclass
class GraphSnapshot:
    node_features: np.ndarray
    edges: dict[str, EdgeSet]
    cable_edge_cable_id: np.ndarray      # (E_cable,) cable index per edge row
    cable_canonical_rows: np.ndarray     # (M,) edge row of each cable's canonical edge
    rest_lengths: np.ndarray             # (M,) estimate used in the features
    controls_window: np.ndarray          # (h+n, m)
    time: float = 0.0
    node_latent: np.ndarray | None = None
    edge_latent: dict | None = None

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def estimate_node_velocity(obs_window: list[Observation], sample_dt: float,
                           num_nodes: int) -> np.ndarray:
    """Backward finite-difference endcap velocities; ground node is zero.

    A single-frame window (trajectory start) yields all-zero velocities.
    """
    vel = np.zeros((num_nodes, 3))
    if len(obs_window) < 2:
        return vel
    prev, cur = obs_window[-2], obs_window[-1]
    spacing = cur.time - prev.time
    if abs(spacing - sample_dt) > 1e-9:
        raise InvalidWindowError(
            f"window spacing {spacing} does not match sample_dt {sample_dt}")
    n_caps = cur.endcap_positions.shape[0]
    vel[:n_caps] = (cur.endcap_positions - prev.endcap_positions) / sample_dt
    return vel


def node_features(obs: Observation, velocities: np.ndarray,
                  topology: RobotTopology, dataset_id: int,
                  config: GraphConfig) -> np.ndarray:
    if dataset_id >= config.num_datasets or dataset_id < 0:
        raise InvalidIdError(
            f"dataset_id {dataset_id} out of range [0, {config.num_datasets})")
    caps = obs.endcap_positions
    n_nodes = topology.num_nodes
    feats = np.zeros((n_nodes, node_feature_width(config.num_datasets)))
    p_designated = caps[topology.designated_node]

    feats[:, 0:3] = velocities
    for k, rod in enumerate(topology.rods):
        a, b = rod.endcap_indices
        com = 0.5 * (caps[a] + caps[b])
        for node, partner in ((a, b), (b, a)):
            axis = caps[partner] - caps[node]
            norm = np.linalg.norm(axis)
            feats[node, 3:6] = caps[node] - p_designated
            feats[node, 6:9] = caps[node] - com
            feats[node, 9:12] = axis / norm if norm > 1e-12 else 0.0
            feats[node, 12] = 1.0                      # endcap type

    ground = topology.ground_node
    feats[ground, 3:6] = -p_designated                 # ground node at the origin
    feats[ground, 13] = 1.0                            # ground type
    feats[:, 14 + dataset_id] = 1.0
    return feats


def _cable_control_columns(topology: RobotTopology) -> np.ndarray:
    """Column of each cable in the actuated-control vector (-1 if passive)."""
    cols = -np.ones(topology.num_cables, dtype=int)
    for col, cid in enumerate(topology.actuated_cable_ids):
        cols[cid] = col
    return cols


def edge_features(obs: Observation, rest_lengths_estimate: np.ndarray,
                  controls_window: np.ndarray, topology: RobotTopology,
                  config: GraphConfig) -> dict[str, EdgeSet]:
    """Body and cable edge sets (contact edges are built separately)."""
    window = np.asarray(controls_window, dtype=float)
    if window.shape[0] != config.h + config.n:
        raise InvalidWindowError(
            f"controls window length {window.shape[0]} != h+n = {config.h + config.n}")
    caps = obs.endcap_positions

    src_b, dst_b, feat_b = [], [], []
    for rod in topology.rods:
        a, b = rod.endcap_indices
        for s, d in ((a, b), (b, a)):
            dp = caps[d] - caps[s]
            src_b.append(s)
            dst_b.append(d)
            feat_b.append(np.concatenate([dp, [np.linalg.norm(dp)]]))

    cols = _cable_control_columns(topology)
    src_c, dst_c, feat_c, edge_cid = [], [], [], []
    for cable in topology.cables:
        lo, hi = sorted(cable.endpoints)
        col = cols[cable.id]
        ctrl = window[:, col] if col >= 0 else np.zeros(window.shape[0])
        for s, d in ((lo, hi), (hi, lo)):
            dp = caps[d] - caps[s]
            feat_c.append(np.concatenate([
                dp, [np.linalg.norm(dp)],
                [rest_lengths_estimate[cable.id]],
                [1.0 if cable.actuated else 0.0],
                ctrl]))
            src_c.append(s)
            dst_c.append(d)
            edge_cid.append(cable.id)

    widths = edge_feature_widths(config.h, config.n)
    body = EdgeSet(np.array(src_b, dtype=int), np.array(dst_b, dtype=int),
                   np.array(feat_b).reshape(-1, widths["body"]))
    cable_set = EdgeSet(np.array(src_c, dtype=int), np.array(dst_c, dtype=int),
                        np.array(feat_c).reshape(-1, widths["cable"]))
    return {"body": body, "cable": cable_set,
            "_cable_edge_cable_id": np.array(edge_cid, dtype=int)}


def contact_edges(obs: Observation, topology: RobotTopology,
                  config: GraphConfig) -> EdgeSet:
    """Bidirectional endcap-ground edges for every endcap near the floor.

    An endcap participates when clearance (height - radius) is strictly
    below the threshold; the ground attachment point is the endcap's
    vertical projection, so features only see the height.
    """
    caps = obs.endcap_positions
    ground = topology.ground_node
    src, dst, feats = [], [], []
    for rod in topology.rods:
        for node in rod.endcap_indices:
            clearance = caps[node][2] - rod.endcap_radius
            if clearance < config.contact_threshold:
                gap = clearance - config.contact_threshold
                down = np.array([0.0, 0.0, -caps[node][2]])
                feats.append(np.concatenate([down, [gap]]))
                src.append(node)
                dst.append(ground)
                feats.append(np.concatenate([-down, [gap]]))
                src.append(ground)
                dst.append(node)
    # rods are visited in index order, so edges come out sorted by endcap id
    width = edge_feature_widths(config.h, config.n)["contact"]
    if not src:
        return EdgeSet(np.zeros(0, dtype=int), np.zeros(0, dtype=int),
                       np.zeros((0, width)))
    return EdgeSet(np.array(src, dtype=int), np.array(dst, dtype=int),
                   np.array(feats).reshape(-1, width))


def build_graph(obs_window: list[Observation], controls_window: np.ndarray,
                rest_lengths_estimate: np.ndarray, dataset_id: int,
                topology: RobotTopology, config: GraphConfig,
                velocity_noise: np.ndarray | None = None) -> GraphSnapshot:
    """Assemble the full typed graph for one model call."""
    obs = obs_window[-1]
    velocities = estimate_node_velocity(obs_window, _window_dt(obs_window),
                                        topology.num_nodes)
    if velocity_noise is not None:
        velocities = velocities + velocity_noise
    nodes = node_features(obs, velocities, topology, dataset_id, config)
    edges = edge_features(obs, rest_lengths_estimate, controls_window,
                          topology, config)
    cable_cid = edges.pop("_cable_edge_cable_id")
    edges["contact"] = contact_edges(obs, topology, config)

    canonical = np.zeros(topology.num_cables, dtype=int)
    seen = set()
    for row, cid in enumerate(cable_cid):
        if cid not in seen:
            canonical[cid] = row          # first row per cable is lo -> hi
            seen.add(int(cid))

    norm = config.normalizer
    if norm is not None and norm.frozen:
        nodes = norm.apply("node", nodes)
        for key in ("body", "cable", "contact"):
            edges[key] = EdgeSet(edges[key].src, edges[key].dst,
                                 norm.apply(key, edges[key].feats))

    return GraphSnapshot(node_features=nodes, edges=edges,
                         cable_edge_cable_id=cable_cid,
                         cable_canonical_rows=canonical,
                         rest_lengths=np.asarray(rest_lengths_estimate,
                                                 dtype=float).copy(),
                         controls_window=np.asarray(controls_window,
                                                    dtype=float).copy(),
                         time=obs.time)


def _window_dt(obs_window: list[Observation]) -> float:
    if len(obs_window) < 2:
        return 1.0
    return obs_window[-1].time - obs_window[-2].time


def accumulate_normalizer(norm: FeatureNormalizer, graph: GraphSnapshot) -> None:
    """Feed one (unnormalized) graph's features into the running statistics."""
    norm.update("node", graph.node_features)
    for key in ("body", "cable", "contact"):
        norm.update(key, graph.edges[key].feats)


def slice_control_window(controls: np.ndarray, t: int, h: int, n: int) -> np.ndarray:
    """Rows t-h .. t+n-1 of a per-frame control array, zero-padded at the ends."""
    controls = np.asarray(controls, dtype=float)
    m = controls.shape[1]
    window = np.zeros((h + n, m))
    lo, hi = t - h, t + n
    src_lo, src_hi = max(lo, 0), min(hi, controls.shape[0])
    if src_hi > src_lo:
        window[src_lo - lo:src_hi - lo] = controls[src_lo:src_hi]
    return window
