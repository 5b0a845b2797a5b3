"""Task heads on top of a feature pyramid."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .synthetic import TaskSpec


class ClassificationHead(nn.Module):
    def __init__(self, dims, num_classes):
        super().__init__()
        self.fc = nn.Linear(dims[-1], num_classes)

    def forward(self, pyramid, out_size=None):
        return self.fc(pyramid[-1].mean(dim=(2, 3)))


class PyramidDecoder(nn.Module):
    """Per-level 1x1 to a common width, upsample to stride 4, sum, optional 3x3 refine, predict, upsample."""

    def __init__(self, dims, out_channels, width=32, refine=True):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(d, width, 1) for d in dims)
        self.refine = (
            nn.Sequential(nn.Conv2d(width, width, 3, padding=1), nn.GELU()) if refine else nn.Identity()
        )
        self.predictor = nn.Conv2d(width, out_channels, 1)

    def forward(self, pyramid, out_size):
        size = pyramid[0].shape[-2:]
        x = 0
        for lat, feat in zip(self.lateral, pyramid):
            y = lat(feat)
            if y.shape[-2:] != size:
                y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
            x = x + y
        x = self.predictor(self.refine(x))
        return F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)


def attach_head(task: TaskSpec, dims, refine=False, width=32) -> nn.Module:
    if not isinstance(task, TaskSpec):
        raise TypeError(f"expected a TaskSpec, got {type(task).__name__}")
    if task.kind == "classification":
        return ClassificationHead(dims, task.num_classes)
    if task.kind in ("segmentation", "regression"):
        return PyramidDecoder(dims, task.out_channels, width=width, refine=refine)
    raise ValueError(f"unknown task kind {task.kind!r}")


def task_loss(output, target, task: TaskSpec):
    if task.kind == "regression":
        return F.mse_loss(output, target)
    return F.cross_entropy(output, target)


def to_prediction(output, task: TaskSpec):
    if task.kind == "regression":
        return output
    return output.argmax(dim=1)
