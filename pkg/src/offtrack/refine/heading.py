"""Bin-based heading codec: 12 bins of 30 degrees covering [0, 360), with a
continuous residual from the bin center in [-15, +15) degrees."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from offtrack.geom import normalize_angle

BIN_COUNT = 12
BIN_WIDTH = 2.0 * math.pi / BIN_COUNT
HALF_BIN = BIN_WIDTH / 2.0


@dataclass(frozen=True)
class HeadingBinCodec:
    bin_count: int = BIN_COUNT

    @property
    def bin_width(self) -> float:
        return 2.0 * math.pi / self.bin_count

    def encode(self, theta: float):
        """(bin, residual) with residual in [-half_bin, +half_bin)."""
        w = math.fmod(theta, 2.0 * math.pi)
        if w < 0.0:
            w += 2.0 * math.pi
        b = min(int(w // self.bin_width), self.bin_count - 1)
        residual = w - (b * self.bin_width + self.bin_width / 2.0)
        return b, residual

    def decode(self, b: int, residual: float) -> float:
        return normalize_angle(b * self.bin_width + self.bin_width / 2.0 + residual)

    def bin_center(self, b) -> "float | np.ndarray":
        return np.asarray(b) * self.bin_width + self.bin_width / 2.0


CODEC = HeadingBinCodec()
