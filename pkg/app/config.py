import os
from dotenv import load_dotenv

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
load_dotenv()

# Environment: only thread count, output directory and log level
THREADS = int(os.getenv("LAB_THREADS", "1"))
OUTPUT_DIR = os.getenv("LAB_OUTPUT_DIR", os.path.join(BASE_DIR, "..", "reports")).strip()
LOG_LEVEL = os.getenv("LAB_LOG_LEVEL", "INFO").strip().upper()

if THREADS < 1:
    raise ValueError("LAB_THREADS must be a positive integer")

PINNED_CONSTANTS_FILE = os.path.join(BASE_DIR, "data", "pinned_constants.json")

# Dyadic suprema run over the unshifted lattice and the one shifted by ω = −1/6;
# below the top level the latter coincides with the one-third shift
LATTICE_SHIFTS = (0.0, -1 / 6)

# Goodness / stopping defaults
DEFAULT_R = 4
DEFAULT_EPS = 1.0
STOP_MULTIPLIER = 100.0

# Dense linear algebra limits
DENSE_NORM_MAX_CELLS = 4096
DENSE_MODE_MAX_M = 12
POWER_ITERATION_TOL = 1e-8
POWER_ITERATION_MAX_ITER = 10_000

# Verification
FITTED_SLACK = 0.10
SLOPE_LIMIT = 1.15
MIN_CHARACTERISTIC_SPAN = 100.0
RUBIO_TERMS = 30
IDENTITY_RTOL = 1e-10
# with δ ≤ 1/4 no interval is good below r = 6; good pairs at r = 6 need 2^8 cells
GOOD_PAIR_MIN_R = 6
GOOD_PAIR_MIN_M = 8
