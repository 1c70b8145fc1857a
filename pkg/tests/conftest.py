import os

# Pin BLAS pools before numpy loads anywhere: keeps timing comparisons fair
# and spawned reinforcement workers on the same thread budget.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
