"""warpuq: registration and segmentation uncertainty for deformable 3D registration."""

__version__ = "0.1.0"

from .volumes import (
    DisplacementField,
    GridMismatchError,
    GridSpec,
    LabelVolume,
    SampleSet,
    ScalarVolume,
    VolumeError,
    checksum,
    inverse_linear_index,
    linear_index,
    make_volume,
)
from .warp import (
    BoundaryPolicy,
    argmax_discretize,
    mean_warped_labels,
    warp_labels,
    warp_scalar,
)
from .phantom import (
    PhantomSpec,
    RandomFieldSpec,
    Structure,
    generate_phantom,
    generate_smooth_field,
    make_ground_truth_pair,
)
from .registration import (
    RegistrationConfig,
    RegistrationDivergenceError,
    Similarity,
    StochasticMode,
    StochasticPolicy,
    diffusion_energy,
    register,
    sample_registrations,
    similarity_ncc,
    soft_dice_loss,
)
from .uncertainty import (
    UncertaintyKind,
    UncertaintyMap,
    appearance_uncertainty,
    combine_seg_uncertainty,
    epistemic_seg_uncertainty,
    transformation_uncertainty,
)
from .aleatoric import (
    FeatureStack,
    HeadConfig,
    HeadParameters,
    TrainConfig,
    TrainResult,
    beta_nll_loss,
    build_feature_stack,
    forward,
    backward,
    init_head_parameters,
    load_head_parameters,
    predict_aleatoric,
    save_head_parameters,
    train,
)
from .metrics import (
    CorrelationReport,
    DegenerateCorrelationError,
    DiceResult,
    EvaluationReport,
    JacobianMap,
    dice,
    evaluate_all,
    jacobian_determinant,
    label_propagation_error,
    non_diffeomorphic_volume,
    pearson_r,
    percent_nonpositive_jacobian,
    read_report_csv,
    write_report_csv,
)
from .volio import VolumeParseError, read_volume, write_volume
from .runconfig import ConfigError, RunConfig, load_config, parse_config
