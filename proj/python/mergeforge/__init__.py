"""Model merging toolkit: alignment, task-vector merging and activation correction."""

import json

from . import _core
from ._core import (
    Architecture,
    MergeforgeError,
    TactBundle,
    apply_permutation,
    corrected_forward,
    forward,
    linear_sum_assignment,
    load_weights,
    make_mlp,
    save_weights,
    tact_correct,
    weight_matching,
)

__all__ = [
    "Architecture",
    "MergeforgeError",
    "TactBundle",
    "apply_permutation",
    "corrected_forward",
    "forward",
    "linear_sum_assignment",
    "load_weights",
    "make_mlp",
    "merge",
    "run",
    "save_weights",
    "tact_correct",
    "weight_matching",
]


def merge(init, experts, config=None):
    """Merge expert encoders around init.

    experts is a list of (task_id, encoder, head) tuples; config takes the
    keys of the "merge" section of a run config except setting and use_search.
    """
    return _core._merge(init, list(experts), json.dumps(config or {}))


def run(command, config=None, landscape=False, grid=None):
    """Run one pipeline command in-process and return its summary."""
    text = _core._run_command(command, json.dumps(config or {}), landscape, grid)
    return json.loads(text)

