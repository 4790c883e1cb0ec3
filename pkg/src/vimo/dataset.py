"""In-memory dataset: sensor streams, feature tracks, calibration and ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .magnetometer import MagCalibration
from .trajectory import Trajectory
from .vision import CameraModel, FeatureObservation


@dataclass
class TrackTable:
    """Columnar feature tracks: one row per (frame, landmark) observation."""
    frame_id: np.ndarray
    t: np.ndarray
    landmark_id: np.ndarray
    uv: np.ndarray
    frame_times: np.ndarray | None = None
    track_landmark: np.ndarray | None = None   # simulator only: track id -> landmark index

    def __post_init__(self):
        self.frame_id = np.asarray(self.frame_id, dtype=int).reshape(-1)
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.landmark_id = np.asarray(self.landmark_id, dtype=int).reshape(-1)
        self.uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)

    @classmethod
    def empty(cls) -> "TrackTable":
        return cls(np.zeros(0, int), np.zeros(0), np.zeros(0, int), np.zeros((0, 2)))

    def __len__(self) -> int:
        return len(self.frame_id)

    def frames(self):
        """Yield (frame_id, t, landmark_ids, uv) per frame in order."""
        if len(self) == 0:
            return
        cuts = np.flatnonzero(np.diff(self.frame_id)) + 1
        for sl in np.split(np.arange(len(self)), cuts):
            yield int(self.frame_id[sl[0]]), float(self.t[sl[0]]), self.landmark_id[sl], self.uv[sl]

    def observations(self, sigma_px: float = 1.0):
        for i in range(len(self)):
            yield FeatureObservation(int(self.frame_id[i]), int(self.landmark_id[i]),
                                     self.uv[i].copy(), sigma_px)


@dataclass
class Dataset:
    imu_t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    tracks: TrackTable
    camera: CameraModel
    mag_t: np.ndarray | None = None
    mag: np.ndarray | None = None           # raw, before calibration
    magcal: MagCalibration | None = None
    groundtruth: Trajectory | None = None
    mag_calib: np.ndarray | None = None     # raw calibration sequence
    landmarks: np.ndarray | None = None
    bias_g: np.ndarray | None = None
    bias_a: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def has_mag(self) -> bool:
        return self.mag is not None and len(self.mag) > 0
