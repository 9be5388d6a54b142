"""Transductive self-training for synthetic segmentation tasks."""

from ._tseg import (
    __version__,
    dice,
    expected_ig,
    generate_task,
    ig_zero_crossing,
    paired_significance,
    report,
    run,
    surrogate_entropy,
)

__all__ = [
    "__version__",
    "dice",
    "expected_ig",
    "generate_task",
    "ig_zero_crossing",
    "paired_significance",
    "report",
    "run",
    "surrogate_entropy",
]
