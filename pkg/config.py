"""
Configuration management for the quantile McKean-Vlasov solver
All numerical defaults configurable from this single file (or the environment)
"""
import os
from dotenv import load_dotenv

load_dotenv()

# =============================================================================
# MONTE CARLO DEFAULTS
# =============================================================================
DEFAULT_N_PARTICLES = int(os.getenv("DEFAULT_N_PARTICLES", "10000"))
DEFAULT_DT = float(os.getenv("DEFAULT_DT", "0.001"))
DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "20240601"))
MIN_PARTICLES = int(os.getenv("MIN_PARTICLES", "100"))

# Worker threads for block-parallel simulation (0 = auto: os.cpu_count())
WORKER_THREADS = int(os.getenv("WORKER_THREADS", "0"))

# =============================================================================
# RANDOM STREAMS
# =============================================================================
# Particles are grouped in fixed-size blocks; each block owns a Philox stream
# keyed by (seed, stream, block). Changing this changes every ensemble.
RNG_BLOCK_SIZE = int(os.getenv("RNG_BLOCK_SIZE", "4096"))

# =============================================================================
# DERIVATIVES & HYPOTHESIS PROBING
# =============================================================================
FD_STEP_SCALE = float(os.getenv("FD_STEP_SCALE", "1e-5"))       # h = scale * max(1, |x|)
ALLOW_FINITE_DIFFERENCES = os.getenv("ALLOW_FINITE_DIFFERENCES", "true").lower() == "true"
H5_FLOOR = float(os.getenv("H5_FLOOR", "1e-3"))                  # |dF_i/dx_{i-1}| >= floor
PROBE_POINTS = int(os.getenv("PROBE_POINTS", "10000"))
PROBE_RADIUS = float(os.getenv("PROBE_RADIUS", "10.0"))
CHAIN_TOLERANCE = float(os.getenv("CHAIN_TOLERANCE", "1e-10"))

# =============================================================================
# INTEGRABILITY QUADRATURE (hypothesis I)
# =============================================================================
U_TRUNCATION_RADIUS = float(os.getenv("U_TRUNCATION_RADIUS", "50.0"))
U_RADIAL_NODES = int(os.getenv("U_RADIAL_NODES", "400"))
U_DIRECTIONS = int(os.getenv("U_DIRECTIONS", "64"))
U_TAIL_TOLERANCE = float(os.getenv("U_TAIL_TOLERANCE", "1e-3"))

# =============================================================================
# ODE (characteristic flow)
# =============================================================================
ODE_STEP = float(os.getenv("ODE_STEP", "0.01"))
ODE_MIN_STEP = float(os.getenv("ODE_MIN_STEP", "1e-9"))
INVERSE_NEWTON_ITERATIONS = int(os.getenv("INVERSE_NEWTON_ITERATIONS", "3"))

# =============================================================================
# DENSITY ESTIMATION
# =============================================================================
L1_NODES_LOW_DIM = int(os.getenv("L1_NODES_LOW_DIM", "256"))     # n <= 2
L1_NODES_3D = int(os.getenv("L1_NODES_3D", "64"))                # n == 3
L1_MC_POINTS = int(os.getenv("L1_MC_POINTS", "20000"))           # n >= 4
L1_BOX_SIGMAS = float(os.getenv("L1_BOX_SIGMAS", "6.0"))
DELTA_LATTICE_NODES = int(os.getenv("DELTA_LATTICE_NODES", "21"))
S_EPS_FRACTION = float(os.getenv("S_EPS_FRACTION", "0.5"))
K_GRID_STEP = float(os.getenv("K_GRID_STEP", "0.25"))
K_GRID_MAX = float(os.getenv("K_GRID_MAX", "50.0"))

# =============================================================================
# FIXED POINT
# =============================================================================
PATH_THINNING = int(os.getenv("PATH_THINNING", "10"))
PICARD_TOLERANCE = float(os.getenv("PICARD_TOLERANCE", "5e-3"))
PICARD_MAX_ITER = int(os.getenv("PICARD_MAX_ITER", "20"))
TARGET_CONTRACTION = float(os.getenv("TARGET_CONTRACTION", "0.5"))
C0_SAFETY_FACTOR = float(os.getenv("C0_SAFETY_FACTOR", "1.5"))

# =============================================================================
# VERIFICATION
# =============================================================================
KDE_MASK_SIGMAS = float(os.getenv("KDE_MASK_SIGMAS", "6.0"))
GAUSSIAN_C_MAX = float(os.getenv("GAUSSIAN_C_MAX", "1e6"))
NEAR_INITIAL_STEPS = int(os.getenv("NEAR_INITIAL_STEPS", "10"))

# =============================================================================
# PATHS - All local storage
# =============================================================================
OUTPUT_DIR = os.getenv("OUTPUT_DIR", "./output")

# =============================================================================
# LOGGING & DEBUG
# =============================================================================
DEBUG_MODE = os.getenv("DEBUG_MODE", "false").lower() == "true"
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("LOG_FILE", "solver.log")
