"""scorepack: 2D irregular strip packing with a learned gradient field.

Pipeline: a classical NFP + genetic-algorithm teacher produces training
layouts; an attention/GCN score network learns the pose gradient field via
denoising score matching over a variance-exploding SDE; reverse-time
sampling proposes layouts, and a geometric post-processor resolves residual
overlaps and compacts gaps.
"""

from .geometry import (
    Boundary,
    Container,
    ContourGraph,
    GeometryError,
    PackingInstance,
    Point,
    Polygon,
    Pose,
    Strip,
    apply_pose,
    area,
    contour_graph,
    internal_angles,
    utilization,
)
from .collision import (
    ConvexDecomposition,
    SeparationVector,
    boundary_offset,
    convex_decompose,
    overlap_area,
    sat_mtv,
    separation_vector,
)
from .enhancement import EnhanceConfig, EnhanceReport, displacement_step, eliminate_gaps, enhance, resolve_overlaps
from .teacher import (
    Chromosome,
    NoFitPolygon,
    PlacementImpossible,
    TeacherConfig,
    TeacherRecord,
    evolve,
    generate_corpus,
    nfp,
    place_sequence,
)
from .diffusion import (
    DiffusionState,
    SampleConfig,
    SampleResult,
    SigmaSchedule,
    WeightStats,
    dsm_loss,
    dsm_target,
    g_coeff,
    perturb,
    sample_rsde,
    sigma,
    weight_lambda,
)
from .scoremodel import ModelConfig, ScoreModel, TrainConfig, train
from .dataset import (
    GenerationFailed,
    GroundTruth,
    PuzzleSpec,
    feasibility,
    generate_puzzle,
    iou,
    load_instance,
    save_instance,
)

__version__ = "0.1.0"
