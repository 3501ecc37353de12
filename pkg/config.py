"""
MADF Inpainting Toolkit - Configuration
Desk-scale mask-aware inpainting: dynamic-filter encoder, point-wise
normalized refinement decoders, incremental supervision.

Per-run training settings live in key = value files (see configs/);
this module only holds project-wide defaults.
"""

import os

# ============================================================
# MODEL SETTINGS
# ============================================================

# Parameter initialization: normal(mean 0, std 0.01); biases start at 0
INIT_STD = 0.01

# Leaky ReLU slope used by every decoder block
LEAKY_SLOPE = 0.2

# Normalization
NORM_EPS = 1e-5
BN_MOMENTUM = 0.1  # running = (1 - m) * running + m * batch

# Channel ladder
MASK_CHANNELS = 16          # C_m^l for l >= 1
IMAGE_CHANNEL_BASE = 16     # C_e^l = min(cap, base * 2^l)
IMAGE_CHANNEL_CAP = 128
DECODER_BASE_WIDTH = 64     # width(l) = min(cap, base * 2^(l-1))
DECODER_MAX_WIDTH = 512
PN_LATENT_WIDTH = 64

# Refinement decoders (two strike the cost/quality balance)
DEFAULT_REFINEMENTS = 2

# Kernel ladders per preset (first level 7x7)
DESK_KERNELS = [7, 5, 3, 3]
FULL_KERNELS = [7, 5, 5, 3, 3, 3, 3]
DESK_IMAGE_SIZE = 64
FULL_IMAGE_SIZE = 256


# ============================================================
# LOSS WEIGHTS
# ============================================================

# L_1 = L_valid + W_HOLE * L_hole
# L_total = L_1 + W_PERC * L_perc + W_STYLE * L_style + W_TV * L_tv
W_HOLE = 6.0
W_PERC = 0.05
W_STYLE = 120.0
W_TV = 0.1

# Frozen feature network standing in for the pretrained backbone
FEATURE_NET_CHANNELS = [16, 32, 64]
FEATURE_NET_SEED = 20200704


# ============================================================
# OPTIMIZER SETTINGS
# ============================================================

ADAM_LR = 0.0002
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.0  # fixed learning rate, no decay


# ============================================================
# TRAINING DEFAULTS (desk scale)
# ============================================================

TRAIN_BATCH_SIZE = 4
TRAIN_ITERATIONS = 2000
TRAIN_DATASET_SIZE = 16
TRAIN_SEED = 1234
TRAIN_EVAL_INTERVAL = 500
TRAIN_EVAL_COUNT = 8
TRAIN_CHECKPOINT_INTERVAL = 500
TRAIN_PREFETCH_DEPTH = 4
TRAIN_DTYPE = "float32"  # gradient checks always run in float64

SCHEDULES = ["coarse-to-fine", "same", "none"]


# ============================================================
# MASK SETTINGS
# ============================================================

# Hole-to-image ratio buckets, half-open (low, high]
MASK_BUCKETS = [(0.01, 0.1), (0.1, 0.2), (0.2, 0.3), (0.3, 0.4), (0.4, 0.5), (0.5, 0.6)]
MASK_MAX_ATTEMPTS = 1000
MASK_AUGMENT_PROB = 0.5

# Free-form stroke shape, as fractions of the shorter canvas side
STROKE_MAX_VERTICES = 4
STROKE_MIN_WIDTH_FRAC = 1 / 32
STROKE_MAX_WIDTH_FRAC = 1 / 12
STROKE_MAX_LENGTH_FRAC = 1 / 4
ELLIPSE_MAX_AXIS_FRAC = 1 / 10
ELLIPSE_PROB = 0.2


# ============================================================
# METRIC SETTINGS
# ============================================================

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP_DB = 100.0


# ============================================================
# SERVICE SETTINGS
# ============================================================

# Logging
ERROR_LOG = "madf.log"
LOG_LEVEL = "INFO"  # DEBUG, INFO, WARNING, ERROR

# Best-effort run status file (overwritten while training)
STATUS_FILE = "run_status.json"

# Intra-op thread cap; 1 keeps reductions bitwise reproducible
THREADS = int(os.environ.get("MADF_THREADS", "1") or "1")


# ============================================================
# CONFIG VALIDATION
# ============================================================

def validate_config():
    """
    Validate configuration parameters.
    Raises ValueError if any parameter is invalid.
    """
    errors = []

    # Model settings
    if INIT_STD <= 0:
        errors.append("INIT_STD must be positive")

    if not (0 < LEAKY_SLOPE < 1):
        errors.append("LEAKY_SLOPE must be between 0 and 1")

    if NORM_EPS <= 0:
        errors.append("NORM_EPS must be positive")

    if not (0 < BN_MOMENTUM <= 1):
        errors.append("BN_MOMENTUM must be in (0, 1]")

    if min(MASK_CHANNELS, IMAGE_CHANNEL_BASE, DECODER_BASE_WIDTH, PN_LATENT_WIDTH) < 1:
        errors.append("Channel counts must be at least 1")

    if DECODER_MAX_WIDTH < DECODER_BASE_WIDTH:
        errors.append("DECODER_MAX_WIDTH must be >= DECODER_BASE_WIDTH")

    if DEFAULT_REFINEMENTS < 0:
        errors.append("DEFAULT_REFINEMENTS must be non-negative")

    for name, ladder in (("DESK_KERNELS", DESK_KERNELS), ("FULL_KERNELS", FULL_KERNELS)):
        if len(ladder) < 2 or any(k < 1 for k in ladder):
            errors.append(f"{name} needs at least 2 levels of kernel size >= 1")

    # Loss weights
    if min(W_HOLE, W_PERC, W_STYLE, W_TV) < 0:
        errors.append("Loss weights must be non-negative")

    if len(FEATURE_NET_CHANNELS) != 3:
        errors.append("FEATURE_NET_CHANNELS must list 3 stages")

    # Optimizer
    if ADAM_LR <= 0:
        errors.append("ADAM_LR must be positive")

    if not (0 <= ADAM_BETA1 < 1 and 0 <= ADAM_BETA2 < 1):
        errors.append("ADAM betas must be in [0, 1)")

    # Training defaults
    if TRAIN_BATCH_SIZE < 1 or TRAIN_ITERATIONS < 1:
        errors.append("TRAIN_BATCH_SIZE and TRAIN_ITERATIONS must be at least 1")

    if TRAIN_DTYPE not in ("float32", "float64"):
        errors.append("TRAIN_DTYPE must be float32 or float64")

    # Masks
    if len(MASK_BUCKETS) != 6:
        errors.append("MASK_BUCKETS must have 6 intervals")
    elif any(lo >= hi for lo, hi in MASK_BUCKETS):
        errors.append("MASK_BUCKETS intervals must be increasing")

    if MASK_MAX_ATTEMPTS < 1:
        errors.append("MASK_MAX_ATTEMPTS must be at least 1")

    if not (0 <= MASK_AUGMENT_PROB <= 1):
        errors.append("MASK_AUGMENT_PROB must be between 0 and 1")

    # Metrics
    if SSIM_WINDOW % 2 == 0:
        errors.append("SSIM_WINDOW must be odd")

    # Service
    if LOG_LEVEL not in ["DEBUG", "INFO", "WARNING", "ERROR"]:
        errors.append("LOG_LEVEL must be one of: DEBUG, INFO, WARNING, ERROR")

    if THREADS < 1:
        errors.append("MADF_THREADS must be at least 1")

    # Raise error if any validation failed
    if errors:
        raise ValueError("Configuration validation failed:\n  - " + "\n  - ".join(errors))
