# Chain
# Total Gibbs sweeps per chain.
N_ITER = 4000
# Sweeps discarded before draws are retained.
BURN_IN = 2000
# Keep every THIN-th sweep after burn-in.
THIN = 2
# Upper bound on the number of k-means clusters used to start a chain.
K_INIT_MAX = 8
# Auxiliary components drawn from the base measure per assignment update.
N_AUX = 1
# Emit a DEBUG line with cluster count and alpha every LOG_EVERY sweeps.
LOG_EVERY = 500

# Second-stage priors
# Gamma(shape, rate) prior on the DP concentration alpha.
ALPHA_PRIOR_SHAPE = 2.0
ALPHA_PRIOR_RATE = 4.0
# Prior row-scale multiplier for the regression coefficients of the simple model.
SIMPLE_COEF_PRIOR_SCALE = 100.0

# Stage-1 priors
# Prior variance tau for the biomarker main effects (eta, xi).
NUISANCE_VAR = 1.0e4
# Prior covariance between eta_m and xi_m (0 keeps the two regressions apart).
NUISANCE_COV = 0.0
# Override used by the simulation study: bivariate N(0, var 2, cov 0.05).
SIMULATION_NUISANCE_VAR = 2.0
SIMULATION_NUISANCE_COV = 0.05
# Gamma(shape, rate) prior on each residual precision 1/sigma^2.
PRECISION_PRIOR_SHAPE = 1.0
PRECISION_PRIOR_RATE = 1.0

# Scenarios
# Number of active treatments K and biomarker signatures M.
N_TREATMENTS = 4
N_BIOMARKERS = 16
# Skew-normal shape used by the nonlinearskew scenario.
SKEW_SHAPE = 4.0
# Per-treatment Z means in the twotrt scenario are evenly spaced on [-spread, spread].
TWOTRT_Z_SPREAD = 1.5
# Category shares of the manybiom scenario (20, 28, 16 of 64 groups).
MANYBIOM_SHARES = (5, 7, 4)

# Trial design
# Prevalences of the 4 binary markers that define the 16 signatures.
MARKER_PREVALENCES = (0.4, 0.25, 0.25, 0.1)
# Share of the biomarker distribution spread uniformly over signatures.
BIOMARKER_UNIFORM_MIX = 0.5
# Patients per randomization update.
BATCH_SIZE = 40
# Total planned enrollment before the group-size floor is enforced.
HORIZON = 1800
# Minimum subjects per biomarker-treatment group (and per control pool).
MIN_GROUP_SIZE = 2
# Welch t-test thresholds for closing arms.
STOP_ALPHA_BENEFIT = 0.01
STOP_ALPHA_HARM = 0.01
# Stopping rules are checked only once both the arm and its control hold this many subjects.
MIN_INTERIM_N = 10
# Futility closes an arm when |t| falls below this after FUTILITY_MIN_N subjects.
FUTILITY_T = 0.1
FUTILITY_MIN_N = 30
# Floor on the adaptive randomization weight of an open arm.
RANDOMIZATION_FLOOR = 0.05
# Mean of the biomarker main effects on log-time.
LOG_TIME_OFFSET = 1.0
# Residual standard deviations used to generate subject data.
SIGMA_S = 1.0
SIGMA_Y = 1.0
# Uniform censoring window (lower, upper].
CENSOR_LOWER = 20.0
CENSOR_UPPER = 60.0
# Enrollment allowed past the horizon while filling groups below the floor.
MAX_EXTRA_ENROLLMENT = 5000

# Replication
# Replicates per scenario cell at desk scale.
N_REPLICATES = 20
# Default worker processes (overridden by SURROGATE_JOBS in .env).
JOBS = 1
# Root seed used when none is given.
ROOT_SEED = 20240501
# Output root (overridden by SURROGATE_OUTPUT_DIR in .env).
OUTPUT_DIR = "RUNS"
# Group (1-based) whose outcomes are hidden in the illustrative example.
EXAMPLE_GROUP = 9
# Points in each exported density grid.
DENSITY_GRID_POINTS = 256
# Chain used by --quick smoke runs.
QUICK_N_ITER = 200
QUICK_BURN_IN = 100
QUICK_THIN = 1

# Runtime
# Disables .pyc/__pycache__ generation when set to "1"/"true"/"yes"/"on".
PYTHONDONTWRITEBYTECODE = "1"
