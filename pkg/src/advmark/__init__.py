"""advmark: black-box adversarial watermark attacks with exactly testable parts.

Embeds a visible watermark into a host image and searches its position and
transparency with a basin-hopping-evolution optimizer until a queried
classifier misclassifies the result.
"""

__version__ = "0.1.0"

from .analysis import DegenerateReferenceError, PerturbationProfile, perturbation_level, profile
from .attack import (
    AttackOutcome,
    AttackPreconditionError,
    AttackSpec,
    Placement,
    RegionConstraint,
    brute_force_grid,
    build_objective,
    build_search_space,
    constrain_space,
    run_attack,
)
from .bhe import (
    BheConfig,
    EvaluationBudgetExceeded,
    GeneSpec,
    Individual,
    OptimizeResult,
    OptimizeTrace,
    SearchSpace,
    basin_hop,
    crossover,
    init_population,
    local_search,
    neighborhood_sample,
    optimize,
    select,
)
from .imaging import (
    ImageIOError,
    RasterImage,
    ScaleSpec,
    WatermarkAsset,
    composite,
    compute_scale,
    load_image,
    save_image,
    scale_watermark,
)
from .oracle import (
    BuiltinClassifier,
    CachingOracle,
    HttpOracle,
    OracleConfig,
    OracleUnavailableError,
    Prediction,
    ProtocolError,
    QueryLedger,
    UnsupportedCapabilityError,
    builtin_fragile_classifier,
    make_oracle,
)
