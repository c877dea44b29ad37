"""Intention prediction for reach-to-grasp motions from 3D marker trajectories."""

from .data import (
    Dataset,
    DEFAULT_MARKER_MAP,
    Intention,
    MarkerMap,
    SynthConfig,
    Trial,
    export_feature_matrix,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .kinematics import (
    KinematicSeries,
    SegmentationParams,
    butterworth_lowpass,
    compute_global_features,
    compute_local_features,
    compute_series,
    condition_trial,
    feature_vector,
    resample_unit_time,
    segment_trial,
    truncate_snippet,
)
from .dtw import (
    DistanceMatrix,
    GramMatrix,
    distance_matrix,
    dtw_distance,
    knn_classify,
    laplacian_kernel,
    median_heuristic_sigma,
)
from .spdcov import (
    HCovConfig,
    SpdDescriptor,
    covariance_descriptor,
    hcov_descriptor,
    kercov_gram,
    log_euclidean_vec,
)
from .svm import SvmModel, OvrModel, mine_weights, predict, train_binary, train_ovr
from .fusion import (
    FeatureBlock,
    FusionWeights,
    cmim_select,
    concat_blocks,
    late_fuse,
    pca_reduce,
)
from .protocol import (
    EvalReport,
    PipelineSpec,
    TwoLayerModel,
    comparison_suite,
    loso_evaluate,
    snippet_sweep,
    two_layer_evaluate,
    two_layer_predict,
    two_layer_train,
)

__version__ = "0.1.0"
