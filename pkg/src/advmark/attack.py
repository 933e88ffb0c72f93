"""The untargeted watermark attack: wire compositing and the oracle into the
optimizer, search (p, q, alpha), and package the outcome.

A placement's objective value is the queried probability of the true class
for the watermarked image.  The attack stops as soon as any evaluated
placement flips the predicted class, and counts model queries exactly:
with caching on, one query per distinct placement.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import bhe
from .bhe import (
    BheConfig,
    EvaluationBudgetExceeded,
    GeneSpec,
    OptimizeTrace,
    SearchSpace,
    SpaceConstraint,
    StopRequested,
)
from .imaging import RasterImage, WatermarkAsset, composite, scale_watermark
from .oracle import CachingOracle, Oracle

__all__ = [
    "Placement",
    "RegionConstraint",
    "AttackSpec",
    "AttackOutcome",
    "AttackPreconditionError",
    "build_search_space",
    "constrain_space",
    "build_objective",
    "run_attack",
    "brute_force_grid",
]

DEFAULT_ALPHA_MIN = 100
DEFAULT_ALPHA_MAX = 200

_GRID_LIMIT = 10**6


class AttackPreconditionError(ValueError):
    """The clean image is not classified as the declared true class."""


@dataclass(frozen=True)
class Placement:
    """Where and how strongly the watermark is embedded: offsets and alpha."""

    p: int
    q: int
    alpha: int

    def __post_init__(self):
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "q", int(self.q))
        object.__setattr__(self, "alpha", int(self.alpha))
        if self.p < 0 or self.q < 0:
            raise ValueError(f"placement offsets must be non-negative, got ({self.p}, {self.q})")
        if not 0 <= self.alpha <= 255:
            raise ValueError(f"alpha must be in [0, 255], got {self.alpha}")

    @classmethod
    def from_genes(cls, genes: Sequence[float]) -> "Placement":
        p, q, alpha = genes
        return cls(p=int(round(p)), q=int(round(q)), alpha=int(round(alpha)))

    def genes(self) -> Tuple[float, float, float]:
        return (float(self.p), float(self.q), float(self.alpha))


@dataclass(frozen=True)
class RegionConstraint:
    """Union of allowed host rectangles the watermark must fit inside.

    Rectangles are (x0, y0, x1, y1) half-open in host coordinates, image-slice
    style: a watermark at (p, q) of size w x h is allowed by a rectangle when
    p >= x0, q >= y0, p + w <= x1 and q + h <= y1.
    """

    rectangles: Tuple[Tuple[int, int, int, int], ...]

    def __post_init__(self):
        rects = tuple(tuple(int(v) for v in r) for r in self.rectangles)
        if not rects:
            raise ValueError("region constraint needs at least one rectangle")
        for x0, y0, x1, y1 in rects:
            if x0 >= x1 or y0 >= y1:
                raise ValueError(f"degenerate rectangle ({x0}, {y0}, {x1}, {y1})")
            if x0 < 0 or y0 < 0:
                raise ValueError(f"rectangle ({x0}, {y0}, {x1}, {y1}) leaves the host")
        object.__setattr__(self, "rectangles", rects)

    def validate_within(self, host_w: int, host_h: int) -> None:
        for x0, y0, x1, y1 in self.rectangles:
            if x1 > host_w or y1 > host_h:
                raise ValueError(
                    f"rectangle ({x0}, {y0}, {x1}, {y1}) exceeds host {host_w}x{host_h}"
                )

    def feasible_offset_boxes(self, wm_w: int, wm_h: int) -> List[Tuple[int, int, int, int]]:
        """Per-rectangle (p_min, q_min, p_max, q_max) boxes with room for the watermark."""
        boxes = []
        for x0, y0, x1, y1 in self.rectangles:
            p_max, q_max = x1 - wm_w, y1 - wm_h
            if p_max >= x0 and q_max >= y0:
                boxes.append((x0, y0, p_max, q_max))
        return boxes

    def allows(self, p: int, q: int, wm_w: int, wm_h: int) -> bool:
        return any(
            x0 <= p <= px and y0 <= q <= qx
            for x0, y0, px, qx in self.feasible_offset_boxes(wm_w, wm_h)
        )


class _RegionSpaceConstraint(SpaceConstraint):
    """Feasibility filter over the (p, q) genes for a rectangle union."""

    resample_indices = (0, 1)

    def __init__(self, boxes: List[Tuple[int, int, int, int]]):
        if not boxes:
            raise ValueError("no allowed rectangle can contain the scaled watermark")
        self.boxes = boxes

    def is_feasible(self, genes: np.ndarray) -> bool:
        p, q = genes[0], genes[1]
        return any(x0 <= p <= px and y0 <= q <= qx for x0, y0, px, qx in self.boxes)

    def project(self, genes: np.ndarray) -> np.ndarray:
        p, q = genes[0], genes[1]
        best = None
        best_dist = math.inf
        for x0, y0, px, qx in self.boxes:
            cp = min(max(p, x0), px)
            cq = min(max(q, y0), qx)
            dist = (cp - p) ** 2 + (cq - q) ** 2
            if dist < best_dist:
                best_dist = dist
                best = (cp, cq)
        out = np.array(genes, dtype=np.float64)
        out[0], out[1] = best
        return out


@dataclass(frozen=True)
class AttackSpec:
    """Everything one attack needs: images, scale, oracle, optimizer knobs."""

    host: RasterImage
    watermark: WatermarkAsset
    scale: float = 1.0
    true_class: Optional[int] = None
    config: BheConfig = field(default_factory=BheConfig)
    region: Optional[RegionConstraint] = None
    alpha_min: int = DEFAULT_ALPHA_MIN
    alpha_max: int = DEFAULT_ALPHA_MAX
    cache_enabled: bool = True
    query_budget: Optional[int] = None
    pin_initial_solution: bool = False
    # stop at the first class flip (query-efficient); disable to keep
    # minimizing f_t through the whole budget
    stop_on_success: bool = True

    def __post_init__(self):
        if not 0 <= self.alpha_min <= self.alpha_max <= 255:
            raise ValueError(
                f"need 0 <= alpha_min <= alpha_max <= 255, got [{self.alpha_min}, {self.alpha_max}]"
            )

    @property
    def effective_budget(self) -> Optional[int]:
        return self.query_budget if self.query_budget is not None else self.config.query_budget


@dataclass
class AttackOutcome:
    """What one attack produced, including the exact query bill."""

    success: bool
    best_placement: Optional[Placement]
    best_value: float
    clean_prob_t: float
    final_prob_t: float
    final_class: Optional[int]
    true_class: int
    queries: int
    adversarial_image: Optional[RasterImage]
    trace: OptimizeTrace
    stopped_by: str
    distinct_placements: int

    def to_record(self) -> dict:
        """Flat JSON-ready summary (paths/seed are filled in by the CLI)."""
        return {
            "success": bool(self.success),
            "p": None if self.best_placement is None else self.best_placement.p,
            "q": None if self.best_placement is None else self.best_placement.q,
            "alpha": None if self.best_placement is None else self.best_placement.alpha,
            "clean_prob_t": self.clean_prob_t,
            "final_prob_t": self.final_prob_t,
            "final_class": self.final_class,
            "true_class": self.true_class,
            "queries": self.queries,
        }


def build_search_space(
    host: RasterImage,
    scaled: WatermarkAsset,
    alpha_min: int = DEFAULT_ALPHA_MIN,
    alpha_max: int = DEFAULT_ALPHA_MAX,
    region: Optional[RegionConstraint] = None,
) -> SearchSpace:
    """Box bounds for (p, q, alpha): offsets keep the watermark inside the host."""
    p_max = host.width - scaled.width
    q_max = host.height - scaled.height
    if p_max < 0 or q_max < 0:
        raise ValueError(
            f"scaled watermark {scaled.width}x{scaled.height} exceeds host "
            f"{host.width}x{host.height}"
        )
    space = SearchSpace(
        genes=(
            GeneSpec(0, p_max, integer=True),
            GeneSpec(0, q_max, integer=True),
            GeneSpec(alpha_min, alpha_max, integer=True),
        )
    )
    if region is not None:
        space = constrain_space(space, region, host, scaled)
    return space


def constrain_space(
    space: SearchSpace,
    region: RegionConstraint,
    host: RasterImage,
    scaled: WatermarkAsset,
) -> SearchSpace:
    """Shrink (p, q) bounds to the feasible set's bounding box and attach the
    exact union filter (infeasible proposals resample, then project)."""
    region.validate_within(host.width, host.height)
    boxes = region.feasible_offset_boxes(scaled.width, scaled.height)
    if not boxes:
        raise ValueError(
            f"no allowed rectangle can contain the {scaled.width}x{scaled.height} watermark"
        )
    p_lo = min(b[0] for b in boxes)
    q_lo = min(b[1] for b in boxes)
    p_hi = max(b[2] for b in boxes)
    q_hi = max(b[3] for b in boxes)
    p_spec, q_spec, alpha_spec = space.genes
    genes = (
        GeneSpec(max(p_spec.lower, p_lo), min(p_spec.upper, p_hi), integer=True),
        GeneSpec(max(q_spec.lower, q_lo), min(q_spec.upper, q_hi), integer=True),
        alpha_spec,
    )
    return SearchSpace(genes=genes, constraint=_RegionSpaceConstraint(boxes))


class _AttackObjective:
    """Maps gene vectors to the true-class probability of the composite.

    Memoizes per placement, tracks the best placement seen, remembers any
    placement that flipped the argmax (a witness), enforces the model-query
    budget, and can stop the whole run the moment a witness appears.
    """

    def __init__(
        self,
        host: RasterImage,
        watermark: WatermarkAsset,
        oracle: Oracle,
        true_class: int,
        memoize: bool = True,
        query_budget: Optional[int] = None,
        stop_on_flip: bool = True,
    ):
        self.host = host
        self.watermark = watermark
        self.oracle = oracle
        self.true_class = true_class
        self.memoize = memoize
        self.query_budget = query_budget
        self.stop_on_flip = stop_on_flip
        self.memo: Dict[Placement, float] = {}
        self.seen: Set[Placement] = set()
        self.calls = 0
        self.best_placement: Optional[Placement] = None
        self.best_value = math.inf
        self.witness: Optional[Placement] = None
        self.witness_value = math.inf
        self._lock = threading.Lock()

    def evaluate_placement(self, placement: Placement) -> float:
        with self._lock:
            if self.memoize and placement in self.memo:
                return self.memo[placement]
            if (
                self.query_budget is not None
                and self.oracle.ledger.total_queries >= self.query_budget
            ):
                raise EvaluationBudgetExceeded(
                    f"model query budget {self.query_budget} exhausted"
                )
        image = composite(self.host, self.watermark, placement)
        prediction = self.oracle.predict(image)
        value = prediction.probs[self.true_class]
        flipped = prediction.argmax != self.true_class
        with self._lock:
            self.seen.add(placement)
            if self.memoize:
                self.memo[placement] = value
            if value <= self.best_value:
                self.best_value = value
                self.best_placement = placement
            if flipped and value < self.witness_value:
                self.witness_value = value
                self.witness = placement
        if flipped and self.stop_on_flip:
            raise StopRequested(f"placement {placement} flipped the predicted class")
        return value

    def __call__(self, genes: np.ndarray) -> float:
        self.calls += 1
        return self.evaluate_placement(Placement.from_genes(genes))

    @property
    def preferred(self) -> Optional[Placement]:
        """Witness if one exists, else the lowest-probability placement seen."""
        return self.witness if self.witness is not None else self.best_placement

    @property
    def preferred_value(self) -> float:
        return self.witness_value if self.witness is not None else self.best_value


def build_objective(
    spec: AttackSpec,
    oracle: Oracle,
    true_class: Optional[int] = None,
    stop_on_flip: bool = False,
) -> _AttackObjective:
    """Standalone objective over placements for the given spec and oracle."""
    scaled = scale_watermark(spec.watermark, spec.host.width, spec.host.height, spec.scale)
    t = true_class if true_class is not None else spec.true_class
    if t is None:
        t = oracle.predict(spec.host).argmax
    return _AttackObjective(
        spec.host,
        scaled,
        oracle,
        t,
        memoize=spec.cache_enabled,
        query_budget=spec.effective_budget,
        stop_on_flip=stop_on_flip,
    )


def run_attack(spec: AttackSpec, oracle: Oracle) -> AttackOutcome:
    """Run one full attack and return the packaged outcome.

    The model-query count excludes the single clean-image classification,
    so with caching it equals the number of distinct placements evaluated.
    """
    if spec.cache_enabled and not isinstance(oracle, CachingOracle):
        oracle = CachingOracle(oracle)
    scaled = scale_watermark(spec.watermark, spec.host.width, spec.host.height, spec.scale)

    clean = oracle.predict(spec.host)
    true_class = spec.true_class if spec.true_class is not None else clean.argmax
    if clean.argmax != true_class:
        raise AttackPreconditionError(
            f"clean image is classified as {clean.argmax}, not the declared class {true_class}"
        )
    clean_prob_t = clean.probs[true_class]
    oracle.reset_ledger()

    space = build_search_space(spec.host, scaled, spec.alpha_min, spec.alpha_max, spec.region)
    objective = _AttackObjective(
        spec.host,
        scaled,
        oracle,
        true_class,
        memoize=spec.cache_enabled,
        query_budget=spec.effective_budget,
        stop_on_flip=spec.stop_on_success,
    )
    # the objective enforces the model-query budget itself (memo hits are
    # free), so the optimizer's raw-call budget is lifted
    config = spec.config
    if config.query_budget is not None:
        config = replace(config, query_budget=None)
    warm = [(0.0, 0.0, float(spec.alpha_min))] if spec.pin_initial_solution else None

    result = bhe.optimize(
        objective,
        space,
        config,
        stop_predicate=(
            (lambda _best: objective.witness is not None) if spec.stop_on_success else None
        ),
        warm_starts=warm,
    )

    best_placement = objective.preferred
    if best_placement is None:
        return AttackOutcome(
            success=False,
            best_placement=None,
            best_value=math.inf,
            clean_prob_t=clean_prob_t,
            final_prob_t=clean_prob_t,
            final_class=None,
            true_class=true_class,
            queries=oracle.ledger.total_queries,
            adversarial_image=None,
            trace=result.trace,
            stopped_by=result.stopped_by,
            distinct_placements=len(objective.seen),
        )

    adversarial = composite(spec.host, scaled, best_placement)
    final = oracle.predict(adversarial)
    return AttackOutcome(
        success=final.argmax != true_class,
        best_placement=best_placement,
        best_value=objective.preferred_value,
        clean_prob_t=clean_prob_t,
        final_prob_t=final.probs[true_class],
        final_class=final.argmax,
        true_class=true_class,
        queries=oracle.ledger.total_queries,
        adversarial_image=adversarial,
        trace=result.trace,
        stopped_by=result.stopped_by,
        distinct_placements=len(objective.seen),
    )


def brute_force_grid(
    spec: AttackSpec,
    oracle: Oracle,
    strides: Tuple[int, int, int] = (1, 1, 1),
    true_class: Optional[int] = None,
) -> Tuple[Placement, float, int]:
    """Exhaustive sweep of f_t over a strided (p, q, alpha) grid.

    Completely independent of the optimizer; serves as the ground-truth
    oracle for near-optimality checks.  Returns the exact grid minimum
    (first hit wins ties) and the number of grid points.
    """
    s_p, s_q, s_a = (int(s) for s in strides)
    if s_p < 1 or s_q < 1 or s_a < 1:
        raise ValueError(f"strides must be >= 1, got {strides}")
    scaled = scale_watermark(spec.watermark, spec.host.width, spec.host.height, spec.scale)
    t = true_class if true_class is not None else spec.true_class
    if t is None:
        t = oracle.predict(spec.host).argmax

    p_values = range(0, spec.host.width - scaled.width + 1, s_p)
    q_values = range(0, spec.host.height - scaled.height + 1, s_q)
    a_values = range(spec.alpha_min, spec.alpha_max + 1, s_a)
    total = len(p_values) * len(q_values) * len(a_values)
    if total > _GRID_LIMIT:
        raise ValueError(f"grid of {total} points exceeds the {_GRID_LIMIT} limit")

    best_placement: Optional[Placement] = None
    best_value = math.inf
    count = 0
    for p, q, alpha in itertools.product(p_values, q_values, a_values):
        placement = Placement(p, q, alpha)
        if spec.region is not None and not spec.region.allows(
            placement.p, placement.q, scaled.width, scaled.height
        ):
            continue
        image = composite(spec.host, scaled, placement)
        value = oracle.predict(image).probs[t]
        count += 1
        if value < best_value:
            best_value = value
            best_placement = placement
    if best_placement is None:
        raise ValueError("grid contained no feasible placement")
    return best_placement, best_value, count
