import os
from dotenv import load_dotenv

load_dotenv()

# Where simulate/fit/grid write their artifacts
OUTPUT_DIR = os.getenv("STAGEWISE_OUTPUT_DIR", "output")

LOG_LEVEL = os.getenv("STAGEWISE_LOG_LEVEL", "INFO")
LOGGER_NAME = "stagewise_em"

# Additive pseudo-count for M-step counts and CMI joints
SMOOTHING = float(os.getenv("STAGEWISE_SMOOTHING", "1e-6"))

MAX_ITERS = int(os.getenv("STAGEWISE_MAX_ITERS", "100"))
TAU_CMI = float(os.getenv("STAGEWISE_TAU_CMI", "1e-3"))
TAU_LL = float(os.getenv("STAGEWISE_TAU_LL", "1e-6"))

# Family-wise level of the chance-CMI floor and of the informative-worker test; 0 turns both off
NULL_LEVEL = float(os.getenv("STAGEWISE_NULL_LEVEL", "0.05"))

# Processes used for experiment grids
GRID_WORKERS = int(os.getenv("STAGEWISE_GRID_WORKERS", "2"))

# Largest R^M * K table the exact mode will enumerate
EXACT_LIMIT = int(os.getenv("STAGEWISE_EXACT_LIMIT", str(10**6)))

MISSING = -1
FORMAT_VERSION = 1
