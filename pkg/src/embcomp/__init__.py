"""Compressed embedding tables for categorical models.

The package trains small sequence models whose embedding table is swapped
between layouts (hashing, quotient/remainder composition, factorization,
and bucketed tables with per-id scalar multipliers) and benchmarks the
size/accuracy trade-off each layout buys.
"""

from .bench import (
    RunReport,
    SweepConfig,
    emit_report,
    fixed_size_search,
    microbench_lookup_vs_onehot,
    run_sweep,
)
from .data import (
    EncodedDataset,
    ExampleBatch,
    UserRecord,
    VocabMap,
    build_dataset,
    build_vocab,
    encode_sequence,
    generate_synthetic,
    make_ranking_examples,
    read_tsv,
    write_tsv,
)
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .models import (
    Network,
    NetworkSpec,
    build_network,
    count_network_params,
    load_model,
    rank_items,
    save_model,
)
from .ops import Param
from .schemes import (
    SchemeConfig,
    SchemeParams,
    build_scheme,
    count_params,
    expected_collisions,
    load_scheme,
    lookup,
    lookup_backward,
    save_scheme,
    uniqueness_audit,
)
from .training import (
    MetricReport,
    NoiseConfig,
    TrainConfig,
    evaluate,
    evaluate_accuracy,
    evaluate_ndcg,
    quantize_eval,
    train,
)

__version__ = "0.1.0"
