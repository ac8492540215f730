"""Activity cliff pair modeling: parsing, pairing, training, attribution."""

__version__ = "0.1.0"

from .molgraph import (
    Atom,
    Bond,
    FeatureConfig,
    DEFAULT_FEATURES,
    MolecularGraph,
    SmilesParseError,
    StereoDroppedWarning,
    atom_features,
    bond_features,
    parse_smiles,
)
from .pairs import (
    CliffPair,
    CompoundRecord,
    DatasetSplit,
    McsResult,
    PairGenConfig,
    SyntheticConfig,
    build_pair,
    generate_cliff_pairs,
    generate_synthetic_dataset,
    max_common_substructure,
    pic50_from_ic50_nm,
    read_compounds_csv,
    read_pairs_jsonl,
    split_pairs,
    write_compounds_csv,
    write_pairs_jsonl,
)
from .model import (
    CompatibilityError,
    ModelConfig,
    MpnnModel,
    UninitializedStatsError,
    forward,
    init_parameters,
    predict_affinity,
)
from .losses import LossConfig, VARIANTS, pair_loss
from .training import (
    CheckpointError,
    TrainConfig,
    TrainingDivergedError,
    TrainReport,
    evaluate_split,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .attribution import (
    AttributionConfig,
    AttributionMap,
    METHODS,
    attribute,
    attribute_all,
    ground_truth,
    redistribute_edges,
)
from .evaluation import (
    ConstantSeriesError,
    DEFAULT_THRESHOLDS,
    DegenerateComparisonError,
    atom_accuracy,
    global_direction,
    pcc,
    rmse,
    threshold_sweep,
    wilcoxon_signed_rank,
)
from .render import render_molecule_svg

__all__ = [
    "__version__",
    "Atom",
    "Bond",
    "FeatureConfig",
    "DEFAULT_FEATURES",
    "MolecularGraph",
    "SmilesParseError",
    "StereoDroppedWarning",
    "atom_features",
    "bond_features",
    "parse_smiles",
    "CliffPair",
    "CompoundRecord",
    "DatasetSplit",
    "McsResult",
    "PairGenConfig",
    "SyntheticConfig",
    "build_pair",
    "generate_cliff_pairs",
    "generate_synthetic_dataset",
    "max_common_substructure",
    "pic50_from_ic50_nm",
    "read_compounds_csv",
    "read_pairs_jsonl",
    "split_pairs",
    "write_compounds_csv",
    "write_pairs_jsonl",
    "CompatibilityError",
    "ModelConfig",
    "MpnnModel",
    "UninitializedStatsError",
    "forward",
    "init_parameters",
    "predict_affinity",
    "LossConfig",
    "VARIANTS",
    "pair_loss",
    "CheckpointError",
    "TrainConfig",
    "TrainingDivergedError",
    "TrainReport",
    "evaluate_split",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "AttributionConfig",
    "AttributionMap",
    "METHODS",
    "attribute",
    "attribute_all",
    "ground_truth",
    "redistribute_edges",
    "ConstantSeriesError",
    "DEFAULT_THRESHOLDS",
    "DegenerateComparisonError",
    "atom_accuracy",
    "global_direction",
    "pcc",
    "rmse",
    "threshold_sweep",
    "wilcoxon_signed_rank",
    "render_molecule_svg",
]
