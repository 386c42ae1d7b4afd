"""Map-aided refinement of vehicle detections.

Compares each candidate detection's feature region in the query image with
the co-located region of a place-recognition-retrieved reference map image,
scores the pair with a small trained MLP, fuses that with the detector
confidence, and evaluates the result with detection PR metrics.
"""

from ._kernels import NUMBA_ACTIVE
from .classifier import (
    ClassifierModel,
    TrainConfig,
    TrainResult,
    adam_step,
    backward,
    bce_loss,
    forward,
    init_model,
    init_optimizer,
    train,
)
from .dataset_io import (
    Checkpoint,
    Detection,
    TensorFormatError,
    TraverseManifest,
    ValidationError,
    load_annotations,
    load_checkpoint,
    load_descriptor,
    load_detections,
    load_feature_map,
    load_manifest,
    save_annotations,
    save_checkpoint,
    save_descriptor,
    save_detections,
    save_feature_map,
    save_manifest,
    validate_manifest,
)
from .evaluate import (
    EvalConfig,
    PRCurve,
    evaluate_system,
    fuse,
    l2_ablation_score,
    match_detections,
    metrics,
    pr_curve,
)
from .regions import (
    CandidateDetection,
    build_encoding,
    filter_candidates,
    label_candidates,
    rescale_box,
)
from .retrieval import RetrievalIndex, build_index, compute_global_descriptor, retrieve
from .synth import SynthConfig, corrupt_retrieval, generate_traverse
from .tensors import (
    DEFAULT_GEM_P,
    GEM_EPS,
    FeatureMap,
    FeatureRegion,
    GridBox,
    cosine_similarity,
    gem_pool,
    l2_distance,
    l2_normalize,
)

__version__ = "0.1.0"
