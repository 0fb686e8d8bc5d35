"""Robot structure: rods, endcap nodes, and cable connectivity.

A robot is a set of rigid rods, each contributing two spherical endcap
nodes, plus a single ground node (always the highest node id). Cables
connect endcaps on distinct rods. Topologies are immutable after
construction and shared freely between the simulator, graph generator
and controller.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_ENDCAP_RADIUS = 0.02
DEFAULT_CABLE_STIFFNESS = 500.0
DEFAULT_CABLE_DAMPING = 5.0
DEFAULT_MOTOR_SPEED = 0.08

# rest-length travel limits as fractions of the initial rest length
REST_LENGTH_MIN_FRAC = 0.2
REST_LENGTH_MAX_FRAC = 1.5


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class RodSpec:
    length: float
    mass: float
    endcap_radius: float
    endcap_indices: tuple[int, int]


@dataclass(frozen=True)
class CableSpec:
    id: int
    endpoints: tuple[int, int]
    stiffness: float
    damping: float
    initial_rest_length: float
    actuated: bool
    motor_speed: float


@dataclass(frozen=True)
class RobotTopology:
    rods: tuple[RodSpec, ...]
    cables: tuple[CableSpec, ...]
    designated_node: int
    num_nodes: int = field(default=0)

    def __post_init__(self):
        if self.num_nodes == 0:
            object.__setattr__(self, "num_nodes", 2 * len(self.rods) + 1)

    @property
    def ground_node(self) -> int:
        return self.num_nodes - 1

    @property
    def num_endcaps(self) -> int:
        return 2 * len(self.rods)

    @property
    def num_cables(self) -> int:
        return len(self.cables)

    def rod_of_node(self, node: int) -> int:
        """Rod index owning an endcap node."""
        for k, rod in enumerate(self.rods):
            if node in rod.endcap_indices:
                return k
        raise KeyError(f"node {node} is not an endcap")

    def partner_of(self, node: int) -> int:
        """The other endcap on the same rod."""
        for rod in self.rods:
            a, b = rod.endcap_indices
            if node == a:
                return b
            if node == b:
                return a
        raise KeyError(f"node {node} is not an endcap")

    @property
    def actuated_cable_ids(self) -> list[int]:
        return [c.id for c in self.cables if c.actuated]


def _cable(cid, a, b, rest, actuated=True,
           stiffness=DEFAULT_CABLE_STIFFNESS, damping=DEFAULT_CABLE_DAMPING,
           motor_speed=DEFAULT_MOTOR_SPEED) -> CableSpec:
    return CableSpec(id=cid, endpoints=(a, b), stiffness=stiffness,
                     damping=damping, initial_rest_length=rest,
                     actuated=actuated, motor_speed=motor_speed)


def three_bar_node_positions(rod_length: float) -> np.ndarray:
    """Standing-prism endcap positions, bottom triangle in the z=0 plane.

    Rod k runs from bottom node 2k to top node 2k+1. The top ring is a
    copy of the bottom ring rotated by the prism equilibrium twist, so
    all three vertical cables carry uniform pretension at rest.
    """
    radius = 0.35 * rod_length
    height = np.sqrt(rod_length ** 2 - 2.0 * radius ** 2)
    pos = np.zeros((6, 3))
    for k in range(3):
        phi_b = 2.0 * np.pi * k / 3.0
        # top endcap of rod k sits above bottom vertex k+1, twisted 150 deg
        phi_t = 2.0 * np.pi * (k + 1) / 3.0 + 5.0 * np.pi / 6.0
        pos[2 * k] = (radius * np.cos(phi_b), radius * np.sin(phi_b), 0.0)
        pos[2 * k + 1] = (radius * np.cos(phi_t), radius * np.sin(phi_t), height)
    return pos


def build_three_bar(rod_length: float, rod_mass: float,
                    endcap_radius: float = DEFAULT_ENDCAP_RADIUS,
                    stiffness: float = DEFAULT_CABLE_STIFFNESS,
                    damping: float = DEFAULT_CABLE_DAMPING,
                    motor_speed: float = DEFAULT_MOTOR_SPEED,
                    pretension_slack: float = 0.95) -> RobotTopology:
    """Standard 3-prism tensegrity: 3 rods, 9 cables, all actuated.

    Cables: 3 bottom-ring, 3 top-ring, 3 vertical. Every endcap has
    cable degree 3. Initial rest lengths are the standing-pose cable
    lengths scaled by ``pretension_slack`` so the structure is taut.
    """
    if rod_length <= 0 or rod_mass <= 0:
        raise InvalidParameterError(
            f"rod_length and rod_mass must be positive, got ({rod_length}, {rod_mass})")

    pos = three_bar_node_positions(rod_length)
    rods = tuple(RodSpec(length=rod_length, mass=rod_mass,
                         endcap_radius=endcap_radius,
                         endcap_indices=(2 * k, 2 * k + 1)) for k in range(3))

    # bottom ring b0-b1-b2, top ring t0-t1-t2, verticals b_k to the top
    # endcap directly above the adjacent vertex (all on distinct rods)
    pairs = [(0, 2), (2, 4), (4, 0),       # bottom ring
             (1, 3), (3, 5), (5, 1),       # top ring
             (0, 5), (2, 1), (4, 3)]       # verticals
    cables = []
    for cid, (a, b) in enumerate(pairs):
        rest = pretension_slack * float(np.linalg.norm(pos[a] - pos[b]))
        cables.append(_cable(cid, a, b, rest, stiffness=stiffness,
                             damping=damping, motor_speed=motor_speed))
    return RobotTopology(rods=rods, cables=tuple(cables), designated_node=0)


def six_bar_node_positions(rod_length: float) -> np.ndarray:
    """Expanded-octahedron endcap positions centered at the origin.

    Node coordinates are the classic (0, +-2, +-1) pattern scaled so
    rods have the requested length; rods form three orthogonal parallel
    pairs and cables are the 24 shortest inter-rod segments.
    """
    s = rod_length / 4.0
    raw = [
        (0, -2, 1), (0, 2, 1),     # rod 0 (parallel to y, upper)
        (0, -2, -1), (0, 2, -1),   # rod 1 (parallel to y, lower)
        (1, 0, -2), (1, 0, 2),     # rod 2 (parallel to z)
        (-1, 0, -2), (-1, 0, 2),   # rod 3 (parallel to z)
        (-2, 1, 0), (2, 1, 0),     # rod 4 (parallel to x)
        (-2, -1, 0), (2, -1, 0),   # rod 5 (parallel to x)
    ]
    return np.array(raw, dtype=float) * s


def build_six_bar(rod_length: float, rod_mass: float,
                  endcap_radius: float = DEFAULT_ENDCAP_RADIUS,
                  stiffness: float = DEFAULT_CABLE_STIFFNESS,
                  damping: float = DEFAULT_CABLE_DAMPING,
                  motor_speed: float = DEFAULT_MOTOR_SPEED,
                  pretension_slack: float = 0.95) -> RobotTopology:
    """Icosahedron-pattern 6-bar tensegrity: 6 rods, 24 cables, all actuated.

    Cables connect every node pair at the characteristic sqrt(6)/4
    rod-length separation; each endcap ends up with cable degree 4.
    """
    if rod_length <= 0 or rod_mass <= 0:
        raise InvalidParameterError(
            f"rod_length and rod_mass must be positive, got ({rod_length}, {rod_mass})")

    pos = six_bar_node_positions(rod_length)
    rods = tuple(RodSpec(length=rod_length, mass=rod_mass,
                         endcap_radius=endcap_radius,
                         endcap_indices=(2 * k, 2 * k + 1)) for k in range(6))

    cable_len_sq = 6.0 * (rod_length / 4.0) ** 2
    pairs = []
    for a in range(12):
        for b in range(a + 1, 12):
            if abs(float(np.sum((pos[a] - pos[b]) ** 2)) - cable_len_sq) < 1e-9:
                pairs.append((a, b))
    if len(pairs) != 24:
        raise AssertionError(f"expected 24 cables, enumerated {len(pairs)}")

    cables = []
    for cid, (a, b) in enumerate(pairs):
        rest = pretension_slack * float(np.linalg.norm(pos[a] - pos[b]))
        cables.append(_cable(cid, a, b, rest, stiffness=stiffness,
                             damping=damping, motor_speed=motor_speed))
    return RobotTopology(rods=rods, cables=tuple(cables), designated_node=0)


def validate(topology: RobotTopology) -> list[str]:
    """Returns a description of every violated invariant (empty if valid)."""
    violations = []
    endcap_ids = set()
    for k, rod in enumerate(topology.rods):
        if rod.length <= 0:
            violations.append(f"rod {k}: non-positive length {rod.length}")
        if rod.mass <= 0:
            violations.append(f"rod {k}: non-positive mass {rod.mass}")
        a, b = rod.endcap_indices
        if a == b:
            violations.append(f"rod {k}: endcap indices not distinct")
        endcap_ids.update(rod.endcap_indices)

    expected = set(range(topology.num_endcaps))
    if endcap_ids != expected:
        violations.append(
            f"endcap node ids not dense in [0, {topology.num_endcaps}): {sorted(endcap_ids)}")
    if topology.num_nodes != topology.num_endcaps + 1:
        violations.append(
            f"num_nodes {topology.num_nodes} != 2*rods + 1 = {topology.num_endcaps + 1}")

    node_rod = {}
    for k, rod in enumerate(topology.rods):
        for node in rod.endcap_indices:
            node_rod[node] = k

    for cable in topology.cables:
        a, b = cable.endpoints
        if a not in node_rod or b not in node_rod:
            violations.append(f"cable {cable.id}: endpoint not an endcap node ({a}, {b})")
            continue
        if node_rod[a] == node_rod[b]:
            violations.append(f"cable {cable.id}: both endpoints on rod {node_rod[a]}")
        if cable.stiffness < 0:
            violations.append(f"cable {cable.id}: negative stiffness")
        if cable.damping < 0:
            violations.append(f"cable {cable.id}: negative damping")
        if cable.initial_rest_length <= 0:
            violations.append(f"cable {cable.id}: non-positive rest length")

    if topology.designated_node not in node_rod:
        violations.append(
            f"designated_node {topology.designated_node} is not a valid endcap node")
    return violations


def cable_degree(topology: RobotTopology) -> dict[int, int]:
    """Number of cables attached to each endcap node."""
    deg = {n: 0 for n in range(topology.num_endcaps)}
    for cable in topology.cables:
        for node in cable.endpoints:
            deg[node] += 1
    return deg


def to_json_dict(topology: RobotTopology) -> dict:
    return {
        "rods": [{"length": r.length, "mass": r.mass,
                  "endcap_radius": r.endcap_radius,
                  "endcap_indices": list(r.endcap_indices)} for r in topology.rods],
        "cables": [{"id": c.id, "endpoints": list(c.endpoints),
                    "stiffness": c.stiffness, "damping": c.damping,
                    "initial_rest_length": c.initial_rest_length,
                    "actuated": c.actuated, "motor_speed": c.motor_speed}
                   for c in topology.cables],
        "designated_node": topology.designated_node,
    }


def from_json_dict(doc: dict) -> RobotTopology:
    rods = tuple(RodSpec(length=r["length"], mass=r["mass"],
                         endcap_radius=r["endcap_radius"],
                         endcap_indices=tuple(r["endcap_indices"])) for r in doc["rods"])
    cables = tuple(CableSpec(id=c["id"], endpoints=tuple(c["endpoints"]),
                             stiffness=c["stiffness"], damping=c["damping"],
                             initial_rest_length=c["initial_rest_length"],
                             actuated=c["actuated"], motor_speed=c["motor_speed"])
                   for c in doc["cables"])
    return RobotTopology(rods=rods, cables=cables,
                         designated_node=doc["designated_node"])


def save(topology: RobotTopology, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_json_dict(topology), fh, indent=1)


def load(path) -> RobotTopology:
    with open(path) as fh:
        return from_json_dict(json.load(fh))
