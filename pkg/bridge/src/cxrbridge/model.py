"""The frozen 18-task chest X-ray classifier and its weight loading.

The network is a DenseNet-121 trunk taking one 224x224 channel in
[-1024, 1024], globally average-pooled to a 1024-dim vector, with a
single linear layer producing the 18 task scores. Task heads are read
pre-sigmoid. Published checkpoints are accepted only when their SHA-256
digest is pinned (packaged list, explicit flag, or an explicit
override), because every downstream number depends on these weights.
"""

from __future__ import annotations

import hashlib
import re
from collections import OrderedDict
from importlib import resources
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import densenet121

from .formats import INTERMEDIATE_DIM, TASKS


class UnpinnedWeightsError(RuntimeError):
    """The weights file's digest is not in the pinned set."""


class ChestXrayNet(nn.Module):
    """DenseNet-121 trunk + 18-task linear head, single-channel input."""

    def __init__(self) -> None:
        super().__init__()
        backbone = densenet121(weights=None)
        backbone.features.conv0 = nn.Conv2d(
            1, 64, kernel_size=7, stride=2, padding=3, bias=False
        )
        self.features = backbone.features
        self.classifier = nn.Linear(INTERMEDIATE_DIM, len(TASKS))

    def trunk_features(self, x: torch.Tensor) -> torch.Tensor:
        """1024-dim pooled representation of a (B, 1, 224, 224) batch."""
        out = self.features(x)
        out = F.relu(out)
        return F.adaptive_avg_pool2d(out, (1, 1)).flatten(1)

    def task_outputs(self, trunk: torch.Tensor) -> torch.Tensor:
        """Pre-sigmoid scores, one column per task in canonical order."""
        return self.classifier(trunk)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.task_outputs(self.trunk_features(x))


def sha256_digest(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def pinned_digests() -> set[str]:
    """Digests packaged in pinned_digests.txt (one hex digest per line)."""
    text = resources.files("cxrbridge").joinpath("pinned_digests.txt").read_text()
    digests = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            digests.add(line.lower())
    return digests


# legacy checkpoint keys use dotted norm/conv suffixes: norm.1 -> norm1
_LEGACY_KEY = re.compile(
    r"^(.*denselayer\d+\.(?:norm|relu|conv))\.((?:[12])\.(?:weight|bias|running_mean|running_var))$"
)


def _normalize_state_dict(state: dict) -> "OrderedDict[str, torch.Tensor]":
    out: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for key, value in state.items():
        if key.startswith("module."):
            key = key[len("module.") :]
        match = _LEGACY_KEY.match(key)
        if match:
            key = match.group(1) + match.group(2).replace(".", "")
        out[key] = value
    return out


def load_pretrained(
    weights_path: str | Path,
    expected_digest: str | None = None,
    allow_unpinned: bool = False,
) -> ChestXrayNet:
    """Build the network from a digest-verified checkpoint, frozen in eval mode.

    Accepts the file when its SHA-256 matches ``expected_digest`` or any
    packaged pinned digest; otherwise refuses unless ``allow_unpinned``
    is set (ablation escape hatch). Extra checkpoint entries (e.g.
    operating-point buffers) are ignored; missing parameters are an
    error.
    """
    digest = sha256_digest(weights_path)
    accepted = pinned_digests()
    if expected_digest is not None:
        if digest != expected_digest.lower():
            raise UnpinnedWeightsError(
                f"{weights_path}: digest {digest} does not match expected"
                f" {expected_digest.lower()}"
            )
    elif digest not in accepted and not allow_unpinned:
        raise UnpinnedWeightsError(
            f"{weights_path}: digest {digest} is not pinned; pass the release"
            " digest explicitly, add it to pinned_digests.txt, or rerun with"
            " --allow-unpinned for ablation"
        )

    loaded = torch.load(weights_path, map_location="cpu", weights_only=False)
    if hasattr(loaded, "state_dict"):  # whole-module checkpoint
        loaded = loaded.state_dict()
    state = _normalize_state_dict(loaded)

    model = ChestXrayNet()
    wanted = set(model.state_dict())
    filtered = {k: v for k, v in state.items() if k in wanted}
    missing = sorted(wanted - set(filtered))
    if missing:
        raise ValueError(
            f"{weights_path}: checkpoint is missing {len(missing)} parameters,"
            f" first few: {missing[:3]}"
        )
    model.load_state_dict(filtered, strict=True)
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    return model
