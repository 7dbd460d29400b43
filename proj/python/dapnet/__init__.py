"""Domain-adaptive gland segmentation (C++ core)."""

from ._dapnet import (  # noqa: F401
    CheckpointError,
    ConfigError,
    DataError,
    ExperimentConfig,
    Model,
    NumericError,
    ShapeError,
    evaluate,
    generate_synthetic_dataset,
    iou,
    lsgan_d_loss,
    paired_t_test,
    pixel_accuracy,
    render_synthetic,
    run_cli,
    segmentation_loss,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
