import os

NEWTON_TOL = 1e-11
NEWTON_MAX_ITER = 30
DENSITY_FLOOR_FACTOR = 1e-13
STAGNATION_WINDOW = 3
NEWTON_MAX_BACKTRACKS = 4
NEWTON_BACKTRACK_FACTOR = 0.5

TAU_INCREASE = 1.2
TAU_DECREASE = 0.5
ITER_FAST_THRESHOLD = 5
TAU_MIN = 1e-10
TAU_MAX = 1.0

HJ_MAX_ITER = 50
HJ_MAX_BACKTRACKS = 8
HJ_BACKTRACK_FACTOR = 0.5

KANTOROVICH_MAX_ITER = 100
MEAN_ZERO_TOL = 1e-12

ORTHOGONALITY_TOL = 1e-9
DEGENERACY_TOL = 1e-12
AREA_TOL = 1e-10

# Schur elimination is abandoned when the smallest density-block pivot
# falls below this fraction of the largest.
BLOCK_CONDITION_TOL = 1e-12

DEFAULT_G = 1.0
DEFAULT_OUTPUT_DIR = os.getenv("WGF_FV_OUTPUT_DIR", "output")
LOG_LEVEL = os.getenv("WGF_FV_LOG_LEVEL", "INFO")

CSV_FLOAT_FORMAT = "%.17g"
