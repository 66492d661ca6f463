"""Evaluation engine for surgical action-triplet recognition benchmarks."""

__version__ = "0.1.0"

from .taxonomy import TripletTaxonomy, load_taxonomy  # noqa: E402
from .dataset_io import (  # noqa: E402
    GroundTruth,
    Run,
    ValidationReport,
    causality_audit,
    parse_ground_truth,
    parse_run,
    validate_submission,
    write_ground_truth,
    write_run,
)
from .disentangle import ComponentViews, disentangle_labels, disentangle_probs  # noqa: E402
from .metrics import (  # noqa: E402
    EvalReport,
    LeaderboardStats,
    aggregate_ap,
    average_precision,
    evaluate_suite,
    leaderboard_stats,
    topk_accuracy,
    video_class_ap,
)
from .ensemble import (  # noqa: E402
    AveragingEnsemble,
    DeepEnsemble,
    DeepWeightedEnsemble,
    SoftVotingEnsemble,
    WeightedAveragingEnsemble,
    apply_deep_ensemble,
    combine_average,
    combine_soft_vote,
    combine_weighted_average,
    compute_performance_weights,
    train_deep_ensemble,
)
from .stability import StabilityMatrix, sample_batches, stability_matrix, wilcoxon_signed_rank  # noqa: E402
from .postprocess import ClassFrequencies, LowFrequencyAdjuster, class_frequencies, low_frequency_adjust  # noqa: E402
from .reporting import Leaderboard, build_leaderboard, emit_tables  # noqa: E402
