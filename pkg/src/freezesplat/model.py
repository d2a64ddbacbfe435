"""Trainable model bundle: canonical cloud + deformation net + shared camera."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deformation import DeformationNet, deform
from .rasterizer import RasterConfig, render
from .scene import CameraModel, GaussianCloud

DEFAULT_BACKGROUND = (0.0, 0.0, 0.0)


@dataclass
class Model:
    cloud: GaussianCloud
    net: DeformationNet
    camera: CameraModel
    background: tuple = DEFAULT_BACKGROUND

    @property
    def count(self) -> int:
        return self.cloud.count

    def deform_at(self, t: float):
        return deform(self.net, self.cloud, t)

    def render_frame(self, pose, t: float, config: RasterConfig | None = None):
        """Deform once at t and rasterize under the given pose."""
        state = self.deform_at(t)
        return render(state, self.camera, pose, np.asarray(self.background), config)

    def render_state(self, state, pose, config: RasterConfig | None = None):
        """Rasterize an already-deformed state (one deform, many poses)."""
        return render(state, self.camera, pose, np.asarray(self.background), config)

    def copy(self) -> "Model":
        return Model(self.cloud.copy(), self.net.copy(), self.camera, self.background)
