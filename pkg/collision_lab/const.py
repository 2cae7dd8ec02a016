# Configuration Constants
DOMAIN: str = "collision_lab"

CONF_EXPERIMENT: str = "experiment"
CONF_DATASET: str = "dataset"
CONF_AUX: str = "aux"
CONF_EXTRACTOR: str = "extractor"
CONF_HEAD: str = "head"
CONF_FINETUNE: str = "finetune"
CONF_POISON: str = "poison"

# Split tags
SPLIT_TRAIN: str = "train"
SPLIT_TEST1: str = "test1"
SPLIT_TEST2: str = "test2"
SPLIT_AUX: str = "aux"
SPLIT_TAGS = (SPLIT_TRAIN, SPLIT_TEST1, SPLIT_TEST2, SPLIT_AUX)
SPLIT_FRACTIONS: dict[str, float] = {
    SPLIT_TRAIN: 0.8,
    SPLIT_TEST1: 0.1,
    SPLIT_TEST2: 0.1,
}
MIN_INSTANCES_PER_CLASS_FOR_SPLIT: int = 10
MIN_DATASET_SIZE: int = 50

# Numeric tolerances
DISTRIBUTION_TOLERANCE: float = 1e-9
GRAD_CHECK_MAX_EPS: float = 1e-3

# ATF ("attack-transfer format")
ATF_MAGIC: bytes = b"ATF1"
ATF_MAX_NDIM: int = 4
ATF_MAX_ELEMENTS: int = 2**40
ATF_TYPE_F32: int = 0
ATF_TYPE_F64: int = 1
ATF_TYPE_U32: int = 2
ATF_DTYPES: dict[int, str] = {
    ATF_TYPE_F32: "<f4",
    ATF_TYPE_F64: "<f8",
    ATF_TYPE_U32: "<u4",
}
NO_BASE_ID: int = 0xFFFFFFFF

# Models
HEAD_NN1: str = "NN1"
HEAD_NN2: str = "NN2"
HEAD_VARIANTS = (HEAD_NN1, HEAD_NN2)
HEAD_PARAM_CAP: int = 5000
MAX_DROPOUT_RATE: float = 0.5
ACTIVATION_RELU: str = "relu"
ACTIVATION_LINEAR: str = "linear"

# Attack
NORM_SQUARED: str = "squared"
NORM_EXACT: str = "exact"
NORM_MODES = (NORM_SQUARED, NORM_EXACT)
MU_ZERO: str = "zero"
MU_ONE: str = "one"
MU_MEAN: str = "mean"
MU_KINDS = (MU_ZERO, MU_ONE, MU_MEAN)
LR_FLOOR: float = 1e-12
MODALITY_IMAGE: str = "image"
MODALITY_AUDIO: str = "audio"
MODALITY_PRESETS: dict[str, dict[str, float]] = {
    MODALITY_IMAGE: {
        "scale": 127.0,
        "beta_exact": 1e-5,
        "beta_squared": 1e-8,
        "max_iters": 500,
    },
    MODALITY_AUDIO: {
        "scale": 32767.0,
        "beta_exact": 0.3,
        "beta_squared": 1e-8 * (127.0 / 32767.0) ** 2,
        "max_iters": 2000,
    },
}

# Files
CONFIG_ECHO_FILE: str = "config.json"
MANIFEST_FILE: str = "manifest.json"
REPORT_FILE: str = "report.json"
REPORT_ROW_FILE: str = "report.csv"
TABLE_FILE: str = "table.csv"
PCA_FILE: str = "pca.csv"
TRACE_CLEAN_FILE: str = "trace_clean.csv"
TRACE_POISONED_FILE: str = "trace_poisoned.csv"
CURVE_CLEAN_FILE: str = "curve_clean.csv"
CURVE_POISONED_FILE: str = "curve_poisoned.csv"
DEFENSE_FILE: str = "defense.json"
BASELINE_FILE: str = "baseline.json"
DATASET_DIR: str = "dataset"
AUX_DIR: str = "aux"
EXTRACTOR_DIR: str = "extractor"
POISON_DIR: str = "poisons"

# Stage reuse: the configuration keys each reusable stage directory was built from
STAGE_RECORD_KEY: str = "built_from"
STAGE_DEPENDENCIES: dict[str, tuple[str, ...]] = {
    DATASET_DIR: ("experiment.seed", CONF_DATASET),
    EXTRACTOR_DIR: ("experiment.seed", CONF_DATASET, CONF_AUX, CONF_EXTRACTOR),
    POISON_DIR: ("experiment.seed", "experiment.k", CONF_DATASET, CONF_AUX, CONF_EXTRACTOR, CONF_POISON),
}

# Reports
REPORT_SCHEMA_VERSION: int = 1
TRACE_COLUMNS = ("step", "chosen_id", "uncertainty", "was_poison", "label")
PCA_COLUMNS = ("pc1", "pc2", "is_poison", "label")
CURVE_COLUMNS = ("labeled", "accuracy")
SEED_PURPOSES = (
    "geometry",
    "aux-geometry",
    "split",
    "pretrain",
    "craft",
    "active-learning",
    "finetune",
    "random-baseline",
    "spread-sample",
)
TABLE_COLUMNS = (
    "Dataset",
    "Model",
    "Accuracy (Clean)",
    "Accuracy (Poisoned)",
    "Loss (adv.)",
    "Loss (initial)",
    "N",
    "Success Rate (Poison)",
    "Success Rate (Random)",
    "Time (s)",
)
TIMING_FIELDS = ("craft_time_seconds",)

# Exit statuses
EXIT_OK: int = 0
EXIT_FAILURE: int = 1
EXIT_CONFIG: int = 2
EXIT_NUMERIC: int = 3
EXIT_DATA: int = 4
EXIT_ATF: int = 5

SUBCOMMANDS = ("gen-data", "pretrain", "craft", "run", "defend", "baseline", "pca", "report")
