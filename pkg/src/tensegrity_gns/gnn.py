"""Encode-process-decode graph network over tensegrity feature graphs.

The encoder maps raw node features through an MLP and, when recurrence
is enabled, a per-node LSTM cell with weights shared across nodes; each
edge type has its own encoder MLP. The processor runs L message-passing
rounds with distinct parameters per round and per edge type, sum-
aggregating same-type incoming messages at each node. Two decoders emit
n-step velocity changes per node and n-step rest-length changes per
cable (one per physical cable, taken from the canonical low-id to
high-id edge direction).

Models operate on batches of disjoint graphs; a single graph is a batch
of one. All forward passes build an autodiff tape (see :mod:`net`), so
the same code path serves training and inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import net
from .graphgen import (CONFIG_FEATURE_SLICE, GraphConfig, GraphSnapshot,
                       edge_feature_widths, node_feature_width)
from .net import LstmSpec, MlpSpec, ParamStore, Tensor
from .refsim import _motor_step_batched, sim_tables
from .topology import RobotTopology

EDGE_TYPES = ("body", "cable", "contact")
MOTOR_MODES = ("learned", "analytical", "ground_truth")


@dataclass
class ModelConfig:
    latent_width: int = 128
    L: int = 5                      # message-passing rounds
    n: int = 6                      # prediction steps per call
    use_config_features: bool = True
    use_recurrence: bool = True
    motor_mode: str = "learned"
    num_hidden_layers: int = 2

    def __post_init__(self):
        if self.latent_width <= 0 or self.L < 1 or self.n < 1:
            raise ValueError("latent_width > 0, L >= 1, n >= 1 required")
        if self.motor_mode not in MOTOR_MODES:
            raise ValueError(f"motor_mode must be one of {MOTOR_MODES}")

    def to_dict(self) -> dict:
        return {"latent_width": self.latent_width, "L": self.L, "n": self.n,
                "use_config_features": self.use_config_features,
                "use_recurrence": self.use_recurrence,
                "motor_mode": self.motor_mode,
                "num_hidden_layers": self.num_hidden_layers}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class RecurrentState:
    H: np.ndarray   # (total_nodes, latent)
    C: np.ndarray

    @classmethod
    def zeros(cls, num_nodes: int, latent_width: int) -> "RecurrentState":
        return cls(np.zeros((num_nodes, latent_width)),
                   np.zeros((num_nodes, latent_width)))

    def copy(self) -> "RecurrentState":
        return RecurrentState(self.H.copy(), self.C.copy())


@dataclass
class PredictionBlock:
    delta_v: np.ndarray      # (nodes, n, 3) -- includes the ground row
    delta_rest: np.ndarray   # (cables, n)


@dataclass
class LatentGraph:
    """Intermediate node/edge latents for one (possibly batched) graph."""
    node: Tensor
    edges: dict[str, Tensor]


# ---------------------------------------------------------------------------
# batching: disjoint union of graphs
# ---------------------------------------------------------------------------

@dataclass
class GraphBatch:
    num_graphs: int
    total_nodes: int
    node_counts: np.ndarray          # (B,)
    node_offsets: np.ndarray         # (B,)
    node_features: np.ndarray        # (sum N, F)
    edge_src: dict[str, np.ndarray]
    edge_dst: dict[str, np.ndarray]
    edge_feats: dict[str, np.ndarray]
    ground_rows: np.ndarray          # (B,) global row of each graph's ground node
    endcap_rows: np.ndarray          # all non-ground rows, grouped by graph
    cable_canonical_rows: np.ndarray  # (sum M,) rows into the cable edge arrays
    cables_per_graph: np.ndarray     # (B,)
    rest_lengths: np.ndarray         # (sum M,)
    controls_future: np.ndarray      # (B, n, m)


def collate(graphs: list[GraphSnapshot], n_future: int) -> GraphBatch:
    counts = np.array([g.num_nodes for g in graphs], dtype=int)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    feats = np.concatenate([g.node_features for g in graphs], axis=0)

    src, dst, efeats = {}, {}, {}
    for etype in EDGE_TYPES:
        src[etype] = np.concatenate(
            [g.edges[etype].src + off for g, off in zip(graphs, offsets)])
        dst[etype] = np.concatenate(
            [g.edges[etype].dst + off for g, off in zip(graphs, offsets)])
        efeats[etype] = np.concatenate([g.edges[etype].feats for g in graphs], axis=0)

    ground = offsets + counts - 1
    endcaps = np.concatenate(
        [off + np.arange(c - 1) for off, c in zip(offsets, counts)])

    cable_rows = []
    edge_off = 0
    for g in graphs:
        cable_rows.append(g.cable_canonical_rows + edge_off)
        edge_off += g.edges["cable"].count
    controls_future = np.stack(
        [g.controls_window[-n_future:] for g in graphs], axis=0)

    return GraphBatch(
        num_graphs=len(graphs), total_nodes=int(counts.sum()),
        node_counts=counts, node_offsets=offsets, node_features=feats,
        edge_src=src, edge_dst=dst, edge_feats=efeats,
        ground_rows=ground, endcap_rows=endcaps,
        cable_canonical_rows=np.concatenate(cable_rows),
        cables_per_graph=np.array([len(g.cable_canonical_rows) for g in graphs]),
        rest_lengths=np.concatenate([g.rest_lengths for g in graphs]),
        controls_future=controls_future)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class TensegrityGNN:
    def __init__(self, model_config: ModelConfig, graph_config: GraphConfig,
                 topology: RobotTopology, seed: int = 0,
                 integration_dt: float = 0.01):
        self.config = model_config
        self.graph_config = graph_config
        self.topology = topology
        self.integration_dt = integration_dt   # used by the analytical motor
        self.store = ParamStore()
        self._build_params(seed)

    # -- construction -------------------------------------------------------

    def _node_input_width(self) -> int:
        width = node_feature_width(self.graph_config.num_datasets)
        if not self.config.use_config_features:
            width -= CONFIG_FEATURE_SLICE.stop - CONFIG_FEATURE_SLICE.start
        return width

    def _build_params(self, seed: int) -> None:
        cfg = self.config
        lw = cfg.latent_width
        rng = np.random.default_rng(seed)
        hidden = lw

        def mlp(in_w, out_w, ln=False):
            return MlpSpec(in_w, hidden, out_w,
                           num_hidden_layers=cfg.num_hidden_layers,
                           layer_norm_output=ln)

        ew = edge_feature_widths(self.graph_config.h, self.graph_config.n)
        self.specs: dict[str, MlpSpec] = {
            "enc_node": mlp(self._node_input_width(), lw, ln=True)}
        for etype in EDGE_TYPES:
            self.specs[f"enc_{etype}"] = mlp(ew[etype], lw, ln=True)
        for layer in range(cfg.L):
            for etype in EDGE_TYPES:
                self.specs[f"mp{layer}_{etype}"] = mlp(3 * lw, lw)
            self.specs[f"upd{layer}"] = mlp(4 * lw, lw)
        self.specs["dec_node"] = mlp(lw, 3 * cfg.n)
        self.specs["dec_cable"] = mlp(lw, cfg.n)

        for name, spec in self.specs.items():
            net.init_mlp(self.store, name, spec, rng)
        self.lstm_spec = LstmSpec(lw, lw)
        if cfg.use_recurrence:
            net.init_lstm(self.store, "lstm", self.lstm_spec, rng)

    def init_recurrent(self, num_nodes: int) -> RecurrentState:
        return RecurrentState.zeros(num_nodes, self.config.latent_width)

    # -- forward pieces (tensor level) --------------------------------------

    def _node_inputs(self, features: np.ndarray) -> np.ndarray:
        if self.config.use_config_features:
            return features
        sl = CONFIG_FEATURE_SLICE
        return np.concatenate([features[:, :sl.start], features[:, sl.stop:]],
                              axis=1)

    def encode_t(self, bound, batch: GraphBatch, h: Tensor, c: Tensor
                 ) -> tuple[LatentGraph, Tensor, Tensor]:
        x = Tensor(self._node_inputs(batch.node_features))
        encoded = net.mlp_forward(self.specs["enc_node"], bound, "enc_node", x)
        if self.config.use_recurrence:
            if h.value.shape[0] != batch.total_nodes:
                raise net.TapeStateError(
                    f"recurrent state carries {h.value.shape[0]} nodes, "
                    f"graph has {batch.total_nodes}")
            h_new, c_new = net.lstm_step(self.lstm_spec, bound, "lstm",
                                         encoded, h, c)
            node0 = h_new
        else:
            node0 = encoded
            h_new, c_new = h, c
        edges = {etype: net.mlp_forward(self.specs[f"enc_{etype}"], bound,
                                        f"enc_{etype}",
                                        Tensor(batch.edge_feats[etype]))
                 for etype in EDGE_TYPES}
        return LatentGraph(node0, edges), h_new, c_new

    def process_t(self, bound, batch: GraphBatch, latent: LatentGraph
                  ) -> LatentGraph:
        node = latent.node
        edges = dict(latent.edges)
        for layer in range(self.config.L):
            new_edges = {}
            agg = []
            for etype in EDGE_TYPES:
                if batch.edge_src[etype].size:
                    msg_in = net.concat([
                        net.gather_rows(node, batch.edge_src[etype]),
                        net.gather_rows(node, batch.edge_dst[etype]),
                        edges[etype]], axis=1)
                    msg = net.mlp_forward(self.specs[f"mp{layer}_{etype}"],
                                          bound, f"mp{layer}_{etype}", msg_in)
                    new_edges[etype] = msg
                    agg.append(net.segment_sum(msg, batch.edge_dst[etype],
                                               batch.total_nodes))
                else:
                    new_edges[etype] = edges[etype]   # empty set stays empty
                    agg.append(Tensor(np.zeros((batch.total_nodes,
                                                self.config.latent_width))))
            upd_in = net.concat([node] + agg, axis=1)
            node = net.mlp_forward(self.specs[f"upd{layer}"], bound,
                                   f"upd{layer}", upd_in)
            edges = new_edges
        return LatentGraph(node, edges)

    def decode_t(self, bound, batch: GraphBatch, latent: LatentGraph,
                 gt_delta_rest: np.ndarray | None = None
                 ) -> tuple[Tensor, Tensor | np.ndarray]:
        """Node and cable decoders.

        Returns (delta_v (total_nodes, n, 3) tensor, delta_rest). The
        cable output is a Tensor only in learned mode; analytical and
        ground-truth motor modes return a constant array.
        """
        n = self.config.n
        dv = net.mlp_forward(self.specs["dec_node"], bound, "dec_node",
                             latent.node)
        dv = net.reshape(dv, (batch.total_nodes, n, 3))
        mode = self.config.motor_mode
        if mode == "learned":
            canon = net.gather_rows(latent.edges["cable"],
                                    batch.cable_canonical_rows)
            dl = net.mlp_forward(self.specs["dec_cable"], bound, "dec_cable",
                                 canon)
        elif mode == "analytical":
            dl = self._analytical_motor_deltas(batch)
        else:
            if gt_delta_rest is None:
                raise ValueError("ground_truth motor mode needs logged deltas")
            dl = np.asarray(gt_delta_rest, dtype=float)
        return dv, dl

    def _analytical_motor_deltas(self, batch: GraphBatch) -> np.ndarray:
        tables = sim_tables(self.topology)
        n = self.config.n
        m_cables = self.topology.num_cables
        rest = batch.rest_lengths.reshape(batch.num_graphs, m_cables)
        deltas = np.zeros((batch.num_graphs, m_cables, n))
        for i in range(n):
            new = _motor_step_batched(tables, rest, batch.controls_future[:, i, :],
                                      self.integration_dt)
            deltas[:, :, i] = new - rest
            rest = new
        return deltas.reshape(batch.num_graphs * m_cables, n)

    # -- public single-graph operations --------------------------------------

    def predict(self, graph: GraphSnapshot, rec: RecurrentState,
                gt_delta_rest: np.ndarray | None = None
                ) -> tuple[PredictionBlock, RecurrentState]:
        blocks, rec_new = self.predict_batch([graph], rec,
                                             gt_delta_rest=gt_delta_rest)
        return blocks[0], rec_new

    def predict_batch(self, graphs: list[GraphSnapshot], rec: RecurrentState,
                      gt_delta_rest: np.ndarray | None = None
                      ) -> tuple[list[PredictionBlock], RecurrentState]:
        batch = collate(graphs, self.config.n)
        bound = self.store.bind()
        latent, h_new, c_new = self.encode_t(bound, batch,
                                             Tensor(rec.H), Tensor(rec.C))
        latent = self.process_t(bound, batch, latent)
        dv_t, dl = self.decode_t(bound, batch, latent, gt_delta_rest)
        dv = dv_t.value
        dl_val = dl.value if isinstance(dl, Tensor) else dl

        blocks = []
        cable_off = 0
        for i in range(batch.num_graphs):
            lo, hi = batch.node_offsets[i], batch.node_offsets[i] + batch.node_counts[i]
            m = batch.cables_per_graph[i]
            blocks.append(PredictionBlock(
                delta_v=dv[lo:hi].copy(),
                delta_rest=dl_val[cable_off:cable_off + m].copy()))
            cable_off += m
        return blocks, RecurrentState(h_new.value.copy(), c_new.value.copy())

    def encode_only(self, graphs: list[GraphSnapshot], rec: RecurrentState
                    ) -> RecurrentState:
        """Advance the recurrent state on teacher-forced graphs (no decode)."""
        if not self.config.use_recurrence:
            return rec
        batch = collate(graphs, self.config.n)
        bound = self.store.bind()
        _, h_new, c_new = self.encode_t(bound, batch, Tensor(rec.H), Tensor(rec.C))
        return RecurrentState(h_new.value.copy(), c_new.value.copy())

# ---------------------------------------------------------------------------
# spec-level convenience wrappers over a single graph
# ---------------------------------------------------------------------------

def encode(model: TensegrityGNN, graph: GraphSnapshot, rec: RecurrentState
           ) -> tuple[LatentGraph, RecurrentState]:
    batch = collate([graph], model.config.n)
    bound = model.store.bind()
    latent, h_new, c_new = model.encode_t(bound, batch, Tensor(rec.H),
                                          Tensor(rec.C))
    graph.node_latent = latent.node.value
    graph.edge_latent = {k: v.value for k, v in latent.edges.items()}
    return latent, RecurrentState(h_new.value.copy(), c_new.value.copy())


def process(model: TensegrityGNN, graph: GraphSnapshot, latent: LatentGraph
            ) -> LatentGraph:
    batch = collate([graph], model.config.n)
    bound = model.store.bind()
    return model.process_t(bound, batch, latent)


def decode(model: TensegrityGNN, graph: GraphSnapshot, latent: LatentGraph,
           gt_delta_rest: np.ndarray | None = None) -> PredictionBlock:
    batch = collate([graph], model.config.n)
    bound = model.store.bind()
    dv, dl = model.decode_t(bound, batch, latent, gt_delta_rest)
    dl_val = dl.value if isinstance(dl, Tensor) else dl
    return PredictionBlock(delta_v=dv.value.copy(), delta_rest=dl_val.copy())
