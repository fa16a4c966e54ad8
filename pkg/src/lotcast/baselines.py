"""Reference predictors used for calibration and reporting."""

from __future__ import annotations

import numpy as np

from .metrics import Prediction
from .scene import Scene


def constant_velocity_joint(scene: Scene, t_future: int) -> np.ndarray:
    """One joint future where every agent keeps its last observed velocity."""
    last = scene.last_positions()                     # (N, 2)
    vel = scene.histories[:, -1, 3:5]                 # (N, 2)
    steps = np.arange(1, t_future + 1, dtype=np.float64)[None, :, None]
    return (last[:, None, :] + vel[:, None, :] * steps * scene.dt)[None]


def constant_velocity_prediction(scene: Scene, t_future: int) -> Prediction:
    return Prediction(candidates=constant_velocity_joint(scene, t_future),
                      probs=np.array([1.0]))
