from .bench import (
    KERNEL_CSV_COLUMNS,
    FlopCounter,
    KernelTiming,
    Workload,
    bench_dense,
    bench_kernel,
    kernel_csv_row,
    time_call,
    write_csv,
)
from .core import (
    SIMD_I8_MAX_COLS,
    dense_gemm,
    dense_gemm_i8_acc,
    dense_gemv,
    dense_gemv_i8_acc,
    dequantize_acc,
    sparse_gemm,
    sparse_gemm_i8_acc,
    sparse_gemv,
    sparse_gemv_i8,
    sparse_gemv_i8_acc,
)

__all__ = [
    "KERNEL_CSV_COLUMNS", "FlopCounter", "KernelTiming", "Workload", "bench_dense", "bench_kernel",
    "kernel_csv_row", "time_call", "write_csv", "SIMD_I8_MAX_COLS", "dense_gemm", "dense_gemm_i8_acc",
    "dense_gemv", "dense_gemv_i8_acc", "dequantize_acc", "sparse_gemm", "sparse_gemm_i8_acc",
    "sparse_gemv", "sparse_gemv_i8", "sparse_gemv_i8_acc",
]
