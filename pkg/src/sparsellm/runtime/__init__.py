from .engine import (
    Backend,
    DenseLinear,
    GenRequest,
    GenResult,
    Int8Linear,
    KVCache,
    SparseInt8Linear,
    SparseLinear,
    ToyTransformer,
    capture_inputs,
    decode_step,
    forward_full,
    generate,
    generate_recompute,
    make_linear,
    prefill,
)
from .sweep import (
    DETERMINISTIC_COLUMNS,
    PHASES,
    SWEEP_CSV_COLUMNS,
    SweepSpec,
    backend_for,
    build_model,
    run_sweep,
    time_phases,
    write_sweep_csv,
)
