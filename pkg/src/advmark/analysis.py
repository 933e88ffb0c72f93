"""Layer-wise perturbation levels: relative L2 activation change per layer."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .imaging import RasterImage
from .oracle import ActivationVector, Oracle

__all__ = [
    "DegenerateReferenceError",
    "PerturbationProfile",
    "perturbation_level",
    "profile",
    "average_profiles",
]


class DegenerateReferenceError(ValueError):
    """The reference activation vector has zero norm; the ratio is undefined."""


@dataclass(frozen=True)
class PerturbationProfile:
    """Per-layer perturbation levels, ordered shallow to deep."""

    levels: Tuple[Tuple[str, float], ...]

    def layers(self) -> List[str]:
        return [name for name, _ in self.levels]

    def values(self) -> List[float]:
        return [value for _, value in self.levels]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["layer", "E_l"])
        for name, value in self.levels:
            writer.writerow([name, repr(value)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps([{"layer": name, "E_l": value} for name, value in self.levels])


def perturbation_level(perturbed: ActivationVector, reference: ActivationVector) -> float:
    """Relative activation change: ||perturbed - reference||_2 / ||reference||_2."""
    if perturbed.layer != reference.layer:
        raise ValueError(
            f"activation vectors come from different layers: "
            f"{perturbed.layer!r} vs {reference.layer!r}"
        )
    if len(perturbed.values) != len(reference.values):
        raise ValueError(
            f"layer {reference.layer!r}: length mismatch "
            f"{len(perturbed.values)} vs {len(reference.values)}"
        )
    ref = np.asarray(reference.values, dtype=np.float64)
    per = np.asarray(perturbed.values, dtype=np.float64)
    ref_norm = float(np.linalg.norm(ref))
    if ref_norm == 0.0:
        raise DegenerateReferenceError(
            f"layer {reference.layer!r} reference activations have zero norm"
        )
    return float(np.linalg.norm(per - ref)) / ref_norm


def profile(clean: RasterImage, watermarked: RasterImage, oracle: Oracle) -> PerturbationProfile:
    """One perturbation level per layer the oracle exposes, shallow to deep."""
    reference = oracle.activations(clean)
    perturbed = oracle.activations(watermarked)
    if [a.layer for a in reference] != [a.layer for a in perturbed]:
        raise ValueError("oracle returned differing layer lists for the two images")
    levels = tuple(
        (ref.layer, perturbation_level(per, ref))
        for per, ref in zip(perturbed, reference)
    )
    return PerturbationProfile(levels=levels)


def average_profiles(profiles: Sequence[PerturbationProfile]) -> PerturbationProfile:
    """Arithmetic mean across profiles sharing one layer list."""
    if not profiles:
        raise ValueError("need at least one profile to average")
    layers = profiles[0].layers()
    for p in profiles[1:]:
        if p.layers() != layers:
            raise ValueError("profiles disagree on layer lists")
    stacked = np.array([p.values() for p in profiles], dtype=np.float64)
    means = stacked.mean(axis=0)
    return PerturbationProfile(levels=tuple(zip(layers, means.tolist())))
