"""Test-session setup: pin BLAS to one thread before numpy loads.

Bitwise-reproducibility tests compare float results across runs; a
multi-threaded BLAS may vary its reduction order, so parallelism is
off for the whole suite.
"""
import os

for _var in (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")
