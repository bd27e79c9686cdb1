"""Configuration and constants for the distillation lab."""

# Numeric thresholds
EPS_DEGENERATE = 1e-12
LOG_FLOOR = 1e-30
FINITE_DIFF_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_REL_FLOOR = 1e-5
GRADCHECK_BATCH = 8
STATIONARITY_TOLERANCE = 1e-9
GRADCHECK_COORDS = 50

# Loss defaults
DEFAULT_GAMMA = 1.5
DEFAULT_LAMBDA = 1.0
DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 0.1
DEFAULT_MU = 0.005
DEFAULT_LS_EPSILON = 0.1

# Loss variants
TEMPERATURE_MODES = ["classical", "literal"]
NONTARGET_MODES = ["normalized", "raw", "none"]
TARGET_TERMS = ["t1", "t2", "t1_t2"]
SMOOTH_VARIANTS = [
    "sq_mean_shift",
    "mean_shift",
    "softmax_rescale",
    "sqrt_min_shift",
    "max_div",
    "mean_div",
    "teacher_passthrough",
]
RANK_VARIANTS = ["weak_only", "final_only", "combined_raw", "combined_normalized"]
WEAK_MODES = ["cnn_gap", "vit_token"]

# Recipes
RECIPES = ["baseline", "ls", "kd", "nkd", "dkd", "uskd"]
TEACHER_RECIPES = ["kd", "nkd", "dkd"]

# Networks
NET_KINDS = ["mlp", "cnn2stage"]
POOL_SIZE = 2

# Optimizer defaults
DEFAULT_LR = 0.05
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 1e-4
DEFAULT_LR_STEP = 0
DEFAULT_LR_DECAY = 0.1
DEFAULT_BATCH_SIZE = 64

# Dataset formats
DATASET_FORMATS = ["idx", "cifar", "synthetic"]
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_IMAGE_SHAPE = (3, 32, 32)
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32

# Seed streams: each derived generator is SeedSequence([master_seed, stream, *extra])
SEED_STREAM_INIT = 0
SEED_STREAM_SHUFFLE = 1
SEED_STREAM_SUBSAMPLE = 2
SEED_STREAM_TEACHER_INIT = 3
SEED_STREAM_GRADCHECK = 4
SEED_STREAM_DATA = 5

# Checkpoint layout
CHECKPOINT_MAGIC = b"DKCK"
CHECKPOINT_VERSION = 1

# Run directory layout
CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.csv"
STEPS_FILE = "steps.csv"
CHECKPOINT_FILE = "checkpoint.dkck"
ALL_METRICS_FILE = "all_metrics.csv"
SUMMARY_FILE = "summary.csv"

METRICS_COLUMNS = [
    "epoch",
    "recipe",
    "seed",
    "train_loss",
    "l_ori",
    "l_target",
    "l_non",
    "l_weak",
    "test_top1",
    "wall_seconds",
]
STEPS_COLUMNS = ["epoch", "step", "train_loss", "l_ori", "l_target", "l_non", "l_weak"]
SUMMARY_COLUMNS = [
    "group",
    "recipe",
    "n_runs",
    "top1_mean",
    "top1_std",
    "train_loss_mean",
    "train_loss_std",
    "top1_per_seed",
]

# Exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_FAILURE = 3

# CLI commands
COMMANDS = ["run", "gradcheck", "eval", "export-metrics", "sweep", "help"]

LOG_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"
