"""Weighted atoms in the plane."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError


@dataclass
class EmpiricalMeasure:
    points: np.ndarray  # (n, 2)
    weights: np.ndarray  # (n,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.points.shape[0] != self.weights.shape[0]:
            raise InputError("points and weights differ in length")
        if np.isnan(self.points).any():
            raise InputError("atom coordinates must not be NaN")
        if (self.weights < 0).any() or not np.isfinite(self.weights).all():
            raise InputError("weights must be finite and nonnegative")

    def __len__(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def uniform(cls, points) -> "EmpiricalMeasure":
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return cls(pts, np.full(len(pts), 1.0 / len(pts)))

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def mass_center(self) -> np.ndarray:
        m = self.total_mass
        if m <= 0:
            raise InputError("mass center of a null measure is undefined")
        return self.weights @ self.points / m

    def integrate(self, f) -> float:
        return float(self.weights @ np.asarray(f(self.points), dtype=float))

    def moved(self, points) -> "EmpiricalMeasure":
        return EmpiricalMeasure(points, self.weights.copy())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "weight"])
            for (x, y), wt in zip(self.points, self.weights):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(wt))])

    @classmethod
    def from_csv(cls, path) -> "EmpiricalMeasure":
        rows = list(csv.DictReader(Path(path).open()))
        pts = [(float(r["x"]), float(r["y"])) for r in rows]
        return cls(np.array(pts).reshape(-1, 2), [float(r["weight"]) for r in rows])
