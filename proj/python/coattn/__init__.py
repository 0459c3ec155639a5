"""Python access to the coattn C++ core."""

from ._coattn import (
    DataError,
    NumericError,
    UsageError,
    answer,
    downscale_14x14,
    drop_pos,
    evaluate,
    fractional_ranks,
    grid_spearman,
    make_unrelated_pairs,
    mean_sem,
    normalize_map,
    pos_tag,
    probe,
    random_baseline,
    rasterize,
    shuffle_question,
    spearman,
    synth,
    train,
)

__all__ = [
    "DataError",
    "NumericError",
    "UsageError",
    "answer",
    "downscale_14x14",
    "drop_pos",
    "evaluate",
    "fractional_ranks",
    "grid_spearman",
    "make_unrelated_pairs",
    "mean_sem",
    "normalize_map",
    "pos_tag",
    "probe",
    "random_baseline",
    "rasterize",
    "shuffle_question",
    "spearman",
    "synth",
    "train",
]
