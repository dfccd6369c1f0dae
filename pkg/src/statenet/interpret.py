"""Occlusion maps: where in time (and on which channel) the evidence sits.

A sliding span of the input is zeroed and the drop in the predicted
probability is recorded; positive heat means the span supported the
positive prediction. The model is read-only. Each evaluation chunk
carries the unmodified window alongside its occluded variants, so a span
that is already zero produces heat of exactly 0.0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import Model

MODES = ("temporal", "channel-temporal")


@dataclass
class OcclusionMap:
    heat: np.ndarray               # (1, P) temporal or (C, P) channel-temporal
    mode: str
    occ_len: int                   # samples
    stride: int                    # samples
    base_score: float
    position_starts: np.ndarray    # start sample of each occlusion position
    sampling_rate_hz: float
    meta: dict = field(default_factory=dict)

    @property
    def n_positions(self) -> int:
        return self.heat.shape[1]

    def argmax_region(self) -> dict:
        c, p = np.unravel_index(int(np.argmax(self.heat)), self.heat.shape)
        start = self.position_starts[p] / self.sampling_rate_hz
        return {
            "channel_index": None if self.mode == "temporal" else int(c),
            "start_s": float(start),
            "end_s": float(start + self.occ_len / self.sampling_rate_hz),
            "heat": float(self.heat[c, p]),
        }

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["position_s", "channel", "heat"])
            for c in range(self.heat.shape[0]):
                label = "all" if self.mode == "temporal" else str(c)
                for p in range(self.heat.shape[1]):
                    writer.writerow([
                        repr(self.position_starts[p] / self.sampling_rate_hz),
                        label, repr(float(self.heat[c, p]))])
        return path

    def write_json(self, path) -> Path:
        payload = {
            "mode": self.mode,
            "occ_len_samples": self.occ_len,
            "stride_samples": self.stride,
            "sampling_rate_hz": self.sampling_rate_hz,
            "base_score": self.base_score,
            "argmax_region": self.argmax_region(),
            "meta": self.meta,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        return path


def occlusion_positions(length: int, occ_len: int, stride: int) -> np.ndarray:
    if not 1 <= occ_len <= length:
        raise ValueError(f"occluder length {occ_len} must be in [1, {length}]")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = (length - occ_len) // stride + 1
    return np.arange(n) * stride


def occlusion_map(model: Model, x: np.ndarray, occ_len: int = 200,
                  stride: int = 100, mode: str = "temporal",
                  sampling_rate_hz: float = 200.0,
                  batch_size: int = 64) -> OcclusionMap:
    """Heat per occlusion position: p(x) - p(x with the span zeroed)."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError("x must be a (channels, length) window")
    n_channels, length = x.shape
    starts = occlusion_positions(length, occ_len, stride)
    n_pos = len(starts)

    if mode == "temporal":
        variants = [(None, int(s)) for s in starts]
        heat = np.empty((1, n_pos))
    else:
        variants = [(c, int(s)) for c in range(n_channels) for s in starts]
        heat = np.empty((n_channels, n_pos))

    base_score = None
    for lo in range(0, len(variants), batch_size):
        chunk = variants[lo:lo + batch_size]
        # slot 0 holds the unmodified window so zero-span variants cancel exactly
        batch = np.repeat(x[None], len(chunk) + 1, axis=0)
        for row, (chan, start) in enumerate(chunk, start=1):
            if chan is None:
                batch[row, :, start:start + occ_len] = 0
            else:
                batch[row, chan, start:start + occ_len] = 0
        scores = model.predict(batch, batch_size=len(chunk) + 1)
        if base_score is None:
            base_score = float(scores[0])
        for row, (chan, start) in enumerate(chunk, start=1):
            value = scores[0] - scores[row]
            if chan is None:
                heat[0, start // stride] = value
            else:
                heat[chan, start // stride] = value

    return OcclusionMap(heat=heat, mode=mode, occ_len=occ_len, stride=stride,
                        base_score=base_score, position_starts=starts,
                        sampling_rate_hz=sampling_rate_hz)
