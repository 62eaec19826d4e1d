"""Time-axis weight aggregation and post-averaging statistics recomputation.

EMA keeps an exponentially weighted aggregate of parameter snapshots,
weights_new = (1 - rate) * weights + rate * snapshot, initialized from the
first snapshot. SWA keeps their plain arithmetic mean. Both operate on the
flattened parameter vector (norm-layer scale/shift included, running
statistics excluded; those are recomputed exactly from the training set).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError
from .model import DamelModel, forward_experts


@dataclass
class EmaState:
    """Exponential moving average of snapshots; ``rate`` weights the newest."""

    rate: float
    weights: Optional[np.ndarray] = None
    updates: int = 0

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise ContractError(f"EMA rate must lie in (0, 1], got {self.rate}")

    @property
    def initialized(self) -> bool:
        return self.weights is not None


@dataclass
class SwaState:
    """Uniform running mean of snapshots."""

    weights: Optional[np.ndarray] = None
    count: int = 0

    @property
    def initialized(self) -> bool:
        return self.weights is not None


def _check_length(state_weights: np.ndarray, snapshot: np.ndarray, kind: str) -> None:
    if state_weights.shape != snapshot.shape:
        raise ContractError(
            f"{kind}: snapshot length {snapshot.shape} does not match state {state_weights.shape}"
        )


def ema_update(state: EmaState, snapshot: np.ndarray) -> EmaState:
    """Fold one snapshot into the EMA; the first call copies it verbatim."""
    snapshot = np.asarray(snapshot, dtype=np.float64)
    if state.weights is None:
        state.weights = snapshot.copy()
    else:
        _check_length(state.weights, snapshot, "ema_update")
        state.weights = (1.0 - state.rate) * state.weights + state.rate * snapshot
    state.updates += 1
    return state


def swa_update(state: SwaState, snapshot: np.ndarray) -> SwaState:
    snapshot = np.asarray(snapshot, dtype=np.float64)
    if state.weights is None:
        state.weights = snapshot.copy()
        state.count = 1
    else:
        _check_length(state.weights, snapshot, "swa_update")
        state.weights = (state.count * state.weights + snapshot) / (state.count + 1)
        state.count += 1
    return state


def update_average(avg_state, snapshot: np.ndarray, averaging: str):
    """Dispatch one snapshot to whichever averaging scheme is active."""
    if averaging == "none":
        return avg_state
    if averaging == "ema":
        if not isinstance(avg_state, EmaState):
            raise ContractError("averaging=ema requires an EmaState")
        return ema_update(avg_state, snapshot)
    if averaging == "swa":
        if not isinstance(avg_state, SwaState):
            raise ContractError("averaging=swa requires a SwaState")
        return swa_update(avg_state, snapshot)
    raise ContractError(f"unknown averaging scheme {averaging!r}")


def export_eval_weights(avg_state, averaging: str, trained: np.ndarray) -> np.ndarray:
    """The parameter vector the evaluation path consumes."""
    if averaging == "none":
        return np.array(trained, dtype=np.float64, copy=True)
    if averaging in ("ema", "swa"):
        if avg_state is None or not avg_state.initialized:
            raise ContractError(f"averaging={averaging}: state has received no snapshots")
        return avg_state.weights.copy()
    raise ContractError(f"unknown averaging scheme {averaging!r}")


def recompute_running_stats(model: DamelModel, train_ds, chunk_size: Optional[int] = None) -> DamelModel:
    """Replace every norm layer's running statistics with exact aggregates.

    One dataset pass per norm layer: earlier layers already run in eval mode
    with their final statistics, so the accumulated mean/variance are exact
    population statistics of each layer's true eval-time input, and the
    result is identical for any chunking of the pass.
    """
    if not model.norm_states:
        return model
    n = len(train_ds)
    if n == 0:
        raise ContractError("recompute_running_stats: training set is empty")
    step = n if chunk_size is None else int(chunk_size)
    if step < 1:
        raise ContractError(f"recompute_running_stats: chunk_size must be >= 1, got {chunk_size}")
    features = train_ds.features
    for name in model.norm_states:
        state = model.norm_states[name]
        state.begin_accumulation()
        for start in range(0, n, step):
            forward_experts(model, features[start:start + step], mode="eval")
        state.finish_accumulation()
    return model
