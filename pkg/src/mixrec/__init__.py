"""mixrec: a recursive transformer with learned per-token recursion depth.

CPU-scale but complete: parameter-sharing schedules, expert-choice and
token-choice depth routing, per-depth KV caching with closed-form cost
ratios, forward-FLOPs budget accounting, a training/eval harness, and a
continuous depth-wise batching decode simulator.
"""

from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
