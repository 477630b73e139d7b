from .calibration import (
    DEFAULT_DAMP,
    DEFAULT_SAMPLES,
    DEFAULT_SEQ_LEN,
    CalibrationSet,
    hessian,
    inverse_hessian,
    reconstruction_error,
)
from .profiles import (
    OWL_LAMBDA,
    OWL_M,
    ProfileKind,
    SparsityProfile,
    outlier_ratio,
    owl_sparsities,
    profile_owl,
    profile_uniform,
)
from .pruning import (
    LayerReport,
    Method,
    Scope,
    StageResult,
    iterative_prune_schedule,
    prune_count,
    prune_magnitude,
    prune_obs,
    prune_weights,
)
from .quant import (
    QMAX,
    Granularity,
    QuantizedMatrix,
    QuantRecipe,
    QuantReport,
    channel_scales,
    quantize_gptq,
    quantize_layer,
    quantize_weights,
    round_to_grid,
    select_skip_layers,
    smooth_activations,
    weight_kurtosis,
)
