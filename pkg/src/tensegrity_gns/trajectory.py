"""Trajectory container and on-disk format.

One JSON document per trajectory: a header (topology reference, sim
params, dataset id, sample_dt) and a frame list. Oracle trajectories
carry the full rigid-body state and rest lengths; "real-like"
trajectories carry only endcap positions and controls, mimicking what a
perception pipeline provides.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Trajectory:
    sample_dt: float
    times: np.ndarray               # (T,)
    endcaps: np.ndarray             # (T, 2R, 3)
    controls: np.ndarray            # (T, m) control held over [t, t+dt)
    P: np.ndarray | None = None     # (T, R, 3)
    R: np.ndarray | None = None     # (T, R, 4)
    V: np.ndarray | None = None
    Omega: np.ndarray | None = None
    rest_lengths: np.ndarray | None = None  # (T, M)
    dataset_id: int = 0
    sim_params: dict | None = None
    topology_ref: str | None = None
    iteration: int | None = None

    def __len__(self) -> int:
        return len(self.times)

    @property
    def has_full_state(self) -> bool:
        return self.P is not None

    def strip_full_state(self) -> "Trajectory":
        """Real-like projection: drop hidden state, keep observations."""
        return Trajectory(sample_dt=self.sample_dt, times=self.times.copy(),
                          endcaps=self.endcaps.copy(), controls=self.controls.copy(),
                          dataset_id=self.dataset_id, sim_params=None,
                          topology_ref=self.topology_ref, iteration=self.iteration)

    def with_endcap_noise(self, sigma: float, seed: int) -> "Trajectory":
        rng = np.random.default_rng(seed)
        out = self.strip_full_state()
        out.endcaps = out.endcaps + rng.normal(0.0, sigma, out.endcaps.shape)
        return out

    def to_json_dict(self) -> dict:
        header = {"sample_dt": self.sample_dt, "dataset_id": self.dataset_id,
                  "topology_ref": self.topology_ref, "sim_params": self.sim_params}
        if self.iteration is not None:
            header["iteration"] = self.iteration
        frames = []
        for i in range(len(self)):
            frame = {"time": float(self.times[i]),
                     "endcaps": self.endcaps[i].tolist(),
                     "controls": self.controls[i].tolist()}
            if self.P is not None:
                frame["full_state"] = {"P": self.P[i].tolist(),
                                       "R": self.R[i].tolist(),
                                       "V": self.V[i].tolist(),
                                       "Omega": self.Omega[i].tolist()}
            if self.rest_lengths is not None:
                frame["rest_lengths"] = self.rest_lengths[i].tolist()
            frames.append(frame)
        return {"header": header, "frames": frames}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Trajectory":
        header = doc["header"]
        frames = doc["frames"]
        times = np.array([f["time"] for f in frames])
        endcaps = np.array([f["endcaps"] for f in frames])
        controls = np.array([f["controls"] for f in frames])
        kwargs = {}
        if frames and "full_state" in frames[0]:
            kwargs["P"] = np.array([f["full_state"]["P"] for f in frames])
            kwargs["R"] = np.array([f["full_state"]["R"] for f in frames])
            kwargs["V"] = np.array([f["full_state"]["V"] for f in frames])
            kwargs["Omega"] = np.array([f["full_state"]["Omega"] for f in frames])
        if frames and "rest_lengths" in frames[0]:
            kwargs["rest_lengths"] = np.array([f["rest_lengths"] for f in frames])
        return cls(sample_dt=header["sample_dt"], times=times, endcaps=endcaps,
                   controls=controls, dataset_id=header.get("dataset_id", 0),
                   sim_params=header.get("sim_params"),
                   topology_ref=header.get("topology_ref"),
                   iteration=header.get("iteration"), **kwargs)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "Trajectory":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass
class Dataset:
    """A set of trajectories sharing one system-parameter regime."""
    trajectories: list[Trajectory]
    dataset_id: int = 0
    source: str = "oracle"          # "oracle" | "real_like"
    sim_params: dict | None = None

    def assign_id(self, dataset_id: int) -> None:
        self.dataset_id = dataset_id
        for traj in self.trajectories:
            traj.dataset_id = dataset_id

    def __len__(self) -> int:
        return len(self.trajectories)
