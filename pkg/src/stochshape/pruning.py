"""Opt-in frontier pruning for long runs.

Curve length grows like ``exp(lambda_1 t)``, so an exact polyline cannot be
carried to the distances used by the passage and shape experiments. A pruner
keeps, for every passage target (or every angular bin), the vertices that
lag the most advanced one by at most ``lag``, and at most ``cap`` of them.
The population per target or bin is therefore bounded, which makes the cost
of a run linear in time. Kept vertices keep their neighbours along the curve,
so no segment crossing the threshold is lost, and ``protect_orig`` keeps the
vertices of the initial discretisation regardless. Pruning runs every
``every`` steps.

Because refinement of a segment depends only on its endpoints and the
increments, the pruned curve is always an exact subset of the unpruned curve
under the same noise. Passage times computed on it are upper bounds of the
exact ones; swept sets and occupation fractions are lower bounds. The bias
shrinks as ``lag`` and ``cap`` grow and is reported by the experiments that
use pruning.

Pruning is applied inside the compiled run loop (:class:`~stochshape.curve_tracker.CurveRun`).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from . import _engine as E


@dataclass(frozen=True)
class _Pruner:
    lag: float
    cap: int | None = None
    protect_orig: bool = False
    every: int = 1

    def __post_init__(self):
        if not self.lag > 0:
            raise ValueError("lag must be positive")
        if self.every < 1:
            raise ValueError("every must be at least 1")
        if self.cap is not None and self.cap < 2:
            raise ValueError("cap must be at least 2")

    def describe(self) -> dict:
        return {"policy": type(self).__name__, **asdict(self)}


@dataclass(frozen=True)
class TargetPruner(_Pruner):
    """Per open target location: the ``cap`` closest vertices within ``lag`` of the closest.

    Works with point and line targets; once every target has been reached
    all target locations are used.
    """

    mode = E.PRUNE_TARGETS


@dataclass(frozen=True)
class RadialPruner(_Pruner):
    """Per angular bin: the ``cap`` outermost vertices within ``lag`` of the bin's record radius.

    Used for swept-set runs, where only the outer envelope is observed.
    """

    n_bins: int = 256
    mode = E.PRUNE_RADIAL

    def __post_init__(self):
        super().__post_init__()
        if self.n_bins < 1:
            raise ValueError("n_bins must be positive")
