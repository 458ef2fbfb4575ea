LOGDIR = "."

# Mask generation
DEFAULT_MASK_WEIGHT = 0.5
DEFAULT_COUNT_TERM_WEIGHT = 0.25
DEFAULT_KNN_K = 4
DEFAULT_MASK_SCORE_FLOOR = 0.1
DEGENERATE_EIGEN = 1e-12
EXHAUSTIVE_MAX_CANDIDATES = 14

# Label assignment
ANCHOR_DIAGONALS = (24.0, 16.0, 12.0)
POSITIVE_BAND = (0.7, 1.4)
NMS_IOU_THRESHOLD = 0.5

# Grouping
DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 1.0
DEFAULT_ENTRY_EXIT_COST = 0.4
DEFAULT_GROUP_SCORE_FLOOR = 0.5

# Line models
MODEL_PENALTIES = {"order0": 1.0, "order1": 1.2, "piecewise": 1.4}
PIECEWISE_MAX_NEIGHBORS = 11

# Rectification and word partition
STRIP_HEIGHT = 32
DENSITY_THRESHOLD = 0.15
MIN_GAP_FRAC = 0.5

# Evaluation
EVAL_IOU_THRESHOLD = 0.5

# Simulator
DEFAULT_LEARNING_RATE = 0.5
DEFAULT_SIM_ITERS = 30
FEATURE_NAMES = ("log_aspect", "diagonal", "jitter", "appearance_a", "appearance_b")
