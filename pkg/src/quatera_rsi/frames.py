"""Camera frames and identification results."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SPIKE = -1
UNIDENTIFIED = -2


@dataclass
class Frame:
    """Star directions observed in the camera frame at one instant.

    ``ids`` (when present) runs parallel to ``observations``: a catalog id,
    :data:`SPIKE` for a discarded observation, or :data:`UNIDENTIFIED`.
    """

    time: float
    observations: np.ndarray
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=float).reshape(-1, 3)
        if self.ids is not None:
            self.ids = np.asarray(self.ids, dtype=np.int64)
            if len(self.ids) != len(self.observations):
                raise ValueError("ids must be parallel to observations")

    def __len__(self):
        return len(self.observations)


@dataclass
class IdResult:
    ids: np.ndarray
    method: str
    reason: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def n_identified(self):
        return int(np.count_nonzero(self.ids >= 0))

    @property
    def n_spikes(self):
        return int(np.count_nonzero(self.ids == SPIKE))

    @property
    def success(self):
        return self.n_identified > 0

    def identified(self):
        """Indices of identified observations and their catalog ids."""
        idx = np.flatnonzero(self.ids >= 0)
        return idx, self.ids[idx]


def failure(n, method, reason):
    return IdResult(np.full(n, UNIDENTIFIED, dtype=np.int64), method, reason)
