"""Object classes, per-class tracking thresholds, and config-file loading.

Threshold defaults follow the tracking recipe this package implements:
overlap-ratio filtering at 0.3/0.2/0.2 (vehicle/pedestrian/cyclist),
two-stage association at 0.3/0.15/0.15 then 0.2/0.1/0.1 BEV IoU, track
merging at 0.5/0.4/0.4, a high-score group requiring score > 0.1 and more
than 3/1/1 points inside the box, and a minimum refinable track length of 7.

A TOML config file (path argument, or the OFFTRACK_CONFIG environment
variable) can override any field per class:

    [thresholds.vehicle]
    overlap_filter = 0.25
    high_min_points = 5
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

CONFIG_ENV_VAR = "OFFTRACK_CONFIG"


class ObjectClass(IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1
    CYCLIST = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @staticmethod
    def from_label(label: str) -> "ObjectClass":
        try:
            return ObjectClass[label.upper()]
        except KeyError:
            raise ValueError(f"unknown object class {label!r}") from None


def _per_class(vehicle, pedestrian, cyclist) -> dict:
    return {ObjectClass.VEHICLE: vehicle,
            ObjectClass.PEDESTRIAN: pedestrian,
            ObjectClass.CYCLIST: cyclist}


@dataclass(frozen=True)
class ClassThresholds:
    """Per-class thresholds for detection filtering and tracking."""

    overlap_filter: Mapping[ObjectClass, float] = field(
        default_factory=lambda: _per_class(0.3, 0.2, 0.2))
    assoc_stage1_iou: Mapping[ObjectClass, float] = field(
        default_factory=lambda: _per_class(0.3, 0.15, 0.15))
    assoc_stage2_iou: Mapping[ObjectClass, float] = field(
        default_factory=lambda: _per_class(0.2, 0.1, 0.1))
    merge_overlap: Mapping[ObjectClass, float] = field(
        default_factory=lambda: _per_class(0.5, 0.4, 0.4))
    high_min_score: Mapping[ObjectClass, float] = field(
        default_factory=lambda: _per_class(0.1, 0.1, 0.1))
    high_min_points: Mapping[ObjectClass, int] = field(
        default_factory=lambda: _per_class(3, 1, 1))
    min_refine_length: Mapping[ObjectClass, int] = field(
        default_factory=lambda: _per_class(7, 7, 7))

    _RATIO_FIELDS = ("overlap_filter", "assoc_stage1_iou", "assoc_stage2_iou",
                     "merge_overlap", "high_min_score")
    _COUNT_FIELDS = ("high_min_points", "min_refine_length")

    def __post_init__(self):
        for name in self._RATIO_FIELDS:
            for cls, v in getattr(self, name).items():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{name}[{cls.label}] must be in [0, 1], got {v}")
        for cls, v in self.min_refine_length.items():
            if v < 1:
                raise ValueError(f"min_refine_length[{cls.label}] must be >= 1")
        for cls, v in self.high_min_points.items():
            if v < 0:
                raise ValueError(f"high_min_points[{cls.label}] must be >= 0")

    def replace(self, overrides: Mapping[str, Mapping[str, float]]) -> "ClassThresholds":
        """New thresholds with per-class field overrides applied.

        `overrides` maps class label -> {field name -> value}.
        """
        fields = {name: dict(getattr(self, name))
                  for name in self._RATIO_FIELDS + self._COUNT_FIELDS}
        for label, values in overrides.items():
            cls = ObjectClass.from_label(label)
            for key, value in values.items():
                if key not in fields:
                    raise ValueError(f"unknown threshold field {key!r}")
                fields[key][cls] = type(fields[key][cls])(value)
        return ClassThresholds(**fields)


def read_config_file(path: "Path | str | None" = None) -> dict:
    """Parse the TOML config file; {} when no path is given or configured.

    Resolution order: explicit argument, then OFFTRACK_CONFIG env var.
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_thresholds(path: "Path | str | None" = None) -> ClassThresholds:
    """Default thresholds with any config-file overrides applied."""
    raw = read_config_file(path)
    return ClassThresholds().replace(raw.get("thresholds", {}))
