"""Federation controller: sync, semi-sync, and async policies on a virtual clock.

The reference execution mode is a deterministic single-threaded simulation.
``speed_factor`` is simulated seconds per mini-batch; the default profile
makes the first half of the learners twice as slow as the second half.

Communication accounting follows the convention that one federation round
costs 2*M parameters (one global-model download plus one local-model upload,
with M the model size), so after R synchronous rounds the ledger reads
exactly R*2*M, and after U asynchronous update requests exactly U*2*M.
Per-learner exchange counts are kept separately as finer telemetry.
"""
from __future__ import annotations

import heapq
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datasim import LabeledDataset
from .params import ModelSpec, ParameterVector, SgdConfig, local_train, train_steps
from .rng import substream

SYNC = "SyncFedAvg"
SEMISYNC = "SemiSyncFedAvg"
ASYNC = "AsyncFedAvg"

_POLICIES = (SYNC, SEMISYNC, ASYNC)


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = SYNC
    rounds: int = 20
    update_budget: int | None = None
    lambda_epochs: int | None = None

    def __post_init__(self):
        if self.kind not in _POLICIES:
            raise ValueError(f"unknown policy: {self.kind!r}")
        if self.kind == ASYNC:
            if self.update_budget is None or self.update_budget < 1:
                raise ValueError("async policy needs a positive update budget")
        elif self.rounds < 1:
            raise ValueError("round budget must be positive")
        if self.kind == SEMISYNC and self.lambda_epochs not in (2, 4):
            raise ValueError("lambda_epochs must be 2 or 4")


@dataclass
class LearnerProfile:
    id: str
    dataset: LabeledDataset
    speed_factor: float = 1.0
    weight: float | None = None  # defaults to |D_k|

    def __post_init__(self):
        if self.speed_factor <= 0:
            raise ValueError("speed_factor must be positive")
        if self.weight is None:
            self.weight = float(len(self.dataset))
        if self.weight < 0:
            raise ValueError("weight must be nonnegative")


def default_speed_factors(sites: int) -> list[float]:
    """Slow/fast hardware split: first half 2.0 s/batch, second half 1.0."""
    half = sites // 2
    return [2.0] * half + [1.0] * (sites - half)


def make_profiles(
    datasets: list[LabeledDataset], speed_factors: list[float] | None = None
) -> list[LearnerProfile]:
    if speed_factors is None:
        speed_factors = default_speed_factors(len(datasets))
    if len(speed_factors) != len(datasets):
        raise ValueError("one speed factor per learner required")
    return [
        LearnerProfile(id=f"learner-{i + 1}", dataset=ds, speed_factor=sf)
        for i, (ds, sf) in enumerate(zip(datasets, speed_factors))
    ]


@dataclass
class CommLedger:
    exchanged_parameters: int = 0
    exchanged_bits: int = 0
    update_requests: int = 0
    rounds: int = 0
    bits_per_parameter: int = 32
    per_learner_parameters: dict[str, int] = field(default_factory=dict)

    def charge_round(self, num_params: int, learner_ids: list[str]) -> None:
        self.exchanged_parameters += 2 * num_params
        self.exchanged_bits += 2 * num_params * self.bits_per_parameter
        self.rounds += 1
        for lid in learner_ids:
            self.per_learner_parameters[lid] = (
                self.per_learner_parameters.get(lid, 0) + 2 * num_params
            )

    def charge_update(self, num_params: int, learner_id: str) -> None:
        self.exchanged_parameters += 2 * num_params
        self.exchanged_bits += 2 * num_params * self.bits_per_parameter
        self.update_requests += 1
        self.per_learner_parameters[learner_id] = (
            self.per_learner_parameters.get(learner_id, 0) + 2 * num_params
        )

    def copy(self) -> "CommLedger":
        return CommLedger(
            self.exchanged_parameters,
            self.exchanged_bits,
            self.update_requests,
            self.rounds,
            self.bits_per_parameter,
            dict(self.per_learner_parameters),
        )


def ledger_bits(ledger: CommLedger, bits_per_parameter: int) -> int:
    if bits_per_parameter not in (32, 64):
        raise ValueError("bits_per_parameter must be 32 or 64")
    return ledger.exchanged_parameters * bits_per_parameter


@dataclass
class FederationState:
    global_model: ParameterVector
    round: int = 0
    clock: float = 0.0
    ledger: CommLedger = field(default_factory=CommLedger)
    cache: dict[str, ParameterVector] = field(default_factory=dict)


def weighted_aggregate(
    models: list[ParameterVector], weights: list[float]
) -> ParameterVector:
    """Elementwise sum of (p_k / P) * w_k over learners."""
    if len(models) != len(weights):
        raise ValueError("one weight per model required")
    if len(models) == 0:
        raise ValueError("nothing to aggregate")
    layout = models[0].layout
    for m in models:
        if m.layout != layout:
            raise ValueError("model layouts differ")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("total weight must be positive")
    stacked = np.stack([m.values for m in models])
    return ParameterVector((w / total) @ stacked, layout)


def _batches_per_epoch(dataset: LabeledDataset, config: SgdConfig) -> int:
    return -(-len(dataset) // config.batch_size)


def sync_round_duration(learners: list[LearnerProfile], config: SgdConfig) -> float:
    """Virtual seconds for a sync round: the slowest learner's finish time."""
    return max(
        config.epochs_per_round * _batches_per_epoch(l.dataset, config) * l.speed_factor
        for l in learners
    )


def semisync_lambda(
    learners: list[LearnerProfile], config: SgdConfig, lambda_epochs: int
) -> float:
    """Synchronization period: the time the slowest learner needs for
    ``lambda_epochs`` epochs over its own data."""
    return max(
        lambda_epochs * _batches_per_epoch(l.dataset, config) * l.speed_factor
        for l in learners
    )


def semisync_step_counts(
    learners: list[LearnerProfile], config: SgdConfig, lambda_epochs: int
) -> list[int]:
    """Whole batch steps each learner fits inside the synchronization period."""
    lam = semisync_lambda(learners, config, lambda_epochs)
    return [int(np.floor(lam / l.speed_factor)) for l in learners]


def _train_one(args):
    learner, model, spec, config, privacy, seed, round_idx = args
    shuffle_rng = substream(seed, "shuffling", learner.id, round_idx)
    noise_rng = substream(seed, "noise", learner.id, round_idx)
    trained, _ = local_train(
        model, spec, learner.dataset, config, privacy,
        shuffle_rng=shuffle_rng, noise_rng=noise_rng,
    )
    return trained


def _train_all(learners, model, spec, config, privacy, seed, round_idx, parallel):
    jobs = [
        (l, model, spec, config, privacy, seed, round_idx) for l in learners
    ]
    if parallel:
        with ThreadPoolExecutor(max_workers=min(8, len(learners))) as pool:
            return list(pool.map(_train_one, jobs))
    return [_train_one(j) for j in jobs]


def run_sync_round(
    state: FederationState,
    learners: list[LearnerProfile],
    spec: ModelSpec,
    config: SgdConfig,
    *,
    seed: int,
    privacy=None,
    parallel: bool = False,
) -> FederationState:
    """One synchronous federation round: every learner trains from the current
    global model, the controller aggregates, the clock advances to the slowest
    learner's finish time."""
    if not learners:
        raise ValueError("no learners registered")
    trained = _train_all(
        learners, state.global_model, spec, config, privacy, seed, state.round, parallel
    )
    new_global = weighted_aggregate(trained, [l.weight for l in learners])
    ledger = state.ledger.copy()
    ledger.charge_round(len(new_global), [l.id for l in learners])
    return FederationState(
        global_model=new_global,
        round=state.round + 1,
        clock=state.clock + sync_round_duration(learners, config),
        ledger=ledger,
        cache=dict(state.cache),
    )


def run_semisync_round(
    state: FederationState,
    learners: list[LearnerProfile],
    spec: ModelSpec,
    config: SgdConfig,
    lambda_epochs: int,
    *,
    seed: int,
    privacy=None,
    parallel: bool = False,
) -> FederationState:
    """One semi-synchronous round: each learner takes as many whole batch
    steps as fit inside the synchronization period at its own speed."""
    if lambda_epochs not in (2, 4):
        raise ValueError("lambda_epochs must be 2 or 4")
    if not learners:
        raise ValueError("no learners registered")
    steps = semisync_step_counts(learners, config, lambda_epochs)

    def _one(args):
        learner, n_steps = args
        return train_steps(
            state.global_model, spec, learner.dataset, n_steps, config, privacy,
            shuffle_rng=substream(seed, "shuffling", learner.id, state.round),
            noise_rng=substream(seed, "noise", learner.id, state.round),
        )

    jobs = list(zip(learners, steps))
    if parallel:
        with ThreadPoolExecutor(max_workers=min(8, len(learners))) as pool:
            trained = list(pool.map(_one, jobs))
    else:
        trained = [_one(j) for j in jobs]
    new_global = weighted_aggregate(trained, [l.weight for l in learners])
    ledger = state.ledger.copy()
    ledger.charge_round(len(new_global), [l.id for l in learners])
    return FederationState(
        global_model=new_global,
        round=state.round + 1,
        clock=state.clock + semisync_lambda(learners, config, lambda_epochs),
        ledger=ledger,
        cache=dict(state.cache),
    )


def run_async(
    state: FederationState,
    learners: list[LearnerProfile],
    spec: ModelSpec,
    config: SgdConfig,
    update_budget: int,
    *,
    seed: int,
    privacy=None,
    on_commit=None,
) -> FederationState:
    """Event-driven asynchronous training with stale-model caching.

    Each learner trains ``epochs_per_round`` epochs independently and commits.
    On a commit the controller replaces that learner's cache entry, recomputes
    the weighted average over all cached models, and the learner immediately
    resumes from the fresh global model. Stops once ``update_budget`` commits
    were applied. Cache entries start as copies of the initial global model so
    the average is defined from the first commit.
    """
    if update_budget < len(learners):
        raise ValueError("update budget must cover at least one commit per learner")
    if not learners:
        raise ValueError("no learners registered")
    cache = {l.id: state.global_model.copy() for l in learners}
    ledger = state.ledger.copy()
    weights = [l.weight for l in learners]
    durations = [
        config.epochs_per_round * _batches_per_epoch(l.dataset, config) * l.speed_factor
        for l in learners
    ]
    # (finish_time, learner_index, commit_index_for_rng, start_model)
    events: list[tuple[float, int, int, ParameterVector]] = []
    for i, l in enumerate(learners):
        heapq.heappush(events, (state.clock + durations[i], i, 0, state.global_model))
    global_model = state.global_model
    clock = state.clock
    commits = 0
    while commits < update_budget:
        finish, i, c, start_model = heapq.heappop(events)
        learner = learners[i]
        trained, _ = local_train(
            start_model, spec, learner.dataset, config, privacy,
            shuffle_rng=substream(seed, "shuffling", learner.id, c),
            noise_rng=substream(seed, "noise", learner.id, c),
        )
        cache[learner.id] = trained
        global_model = weighted_aggregate([cache[l.id] for l in learners], weights)
        clock = finish
        commits += 1
        ledger.charge_update(len(global_model), learner.id)
        if on_commit is not None:
            on_commit(commits, clock, global_model, ledger)
        heapq.heappush(events, (finish + durations[i], i, c + 1, global_model))
    return FederationState(
        global_model=global_model,
        round=state.round,
        clock=clock,
        ledger=ledger,
        cache=cache,
    )
