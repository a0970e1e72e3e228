"""Fixtures for the bridge tests: a small stand-in network and tiny images.

The stand-in exposes exactly the frozen classifier's surface
(``trunk_features`` -> 1024 dims, ``task_outputs`` -> 18 pre-sigmoid
scores) but is tiny and smooth, so extraction and gradient plumbing can
be exercised quickly and checked against finite differences.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch
from PIL import Image

from cxrbridge.formats import INTERMEDIATE_DIM, TASKS
from cxrbridge.preprocess import preprocess


class StandInNet(torch.nn.Module):
    def __init__(self, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.conv = torch.nn.Conv2d(1, 16, kernel_size=8, stride=8)
        self.pool = torch.nn.AdaptiveAvgPool2d((8, 8))
        self.classifier = torch.nn.Linear(INTERMEDIATE_DIM, len(TASKS))

    def trunk_features(self, x: torch.Tensor) -> torch.Tensor:
        hidden = torch.tanh(self.conv(x / 1024.0))
        return self.pool(hidden).flatten(1)

    def task_outputs(self, trunk: torch.Tensor) -> torch.Tensor:
        return self.classifier(trunk)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.task_outputs(self.trunk_features(x))


@pytest.fixture
def standin() -> StandInNet:
    model = StandInNet()
    model.eval()
    return model


def write_png(path, array: np.ndarray) -> None:
    Image.fromarray(array.astype(np.uint8), mode="L").save(path)


@pytest.fixture
def sample_image(tmp_path):
    rng = np.random.default_rng(11)
    path = tmp_path / "sample.png"
    write_png(path, rng.integers(0, 256, (96, 80)))
    return preprocess(path)
