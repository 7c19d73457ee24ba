"""Privacy defenses and the membership-inference measurement harness.

Two gradient transforms limit what a single sample can contribute:

    gaussian-noise   clip each per-sample gradient to norm C, then add
                     spherical Gaussian noise with std sigma*C to the batch
                     mean (the standard DP-SGD update shape)
    non-unique       decompose each gradient as g_i = g_i_span + g_i_unique,
                     where g_i_span is the orthogonal projection of g_i onto
                     span{g_j : j != i}, and train with
                     g_hat_i = g_i_span + alpha * g_i_unique, alpha < 1

The attack side measures how well a white-box attacker can tell a learner's
training samples from held-out samples using per-sample loss, gradient norm,
and prediction-error features under the shared global model. With N learners,
every learner attacks every other learner's balanced member/non-member set,
giving N*(N-1) accuracies (56 for the default federation of 8); their mean is
the vulnerability score.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from sklearn.linear_model import LogisticRegression

from .datasim import LabeledDataset
from .params import (
    ModelSpec,
    ParameterVector,
    gradient_matrix,
    per_sample_losses,
    predict,
)
from .rng import substream

NONE = "none"
GAUSSIAN = "gaussian-noise"
NON_UNIQUE = "non-unique"

_MODES = (NONE, GAUSSIAN, NON_UNIQUE)

# small enough that the smoothed projector stays within 1e-6 relative
# orthogonality on ill-conditioned batches, large enough to absorb duplicates
GRAM_RIDGE = 1e-10
MIN_ATTACK_SAMPLES = 20


@dataclass(frozen=True)
class PrivacyConfig:
    mode: str = NONE
    clip_norm: float = 1.0
    sigma: float = 0.0
    alpha: float = 0.0

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown privacy mode: {self.mode!r}")
        if self.mode == GAUSSIAN:
            if self.clip_norm <= 0:
                raise ValueError("clip_norm must be positive")
            if self.sigma < 0:
                raise ValueError("sigma must be nonnegative")
        if self.mode == NON_UNIQUE and not (0.0 <= self.alpha < 1.0):
            raise ValueError("alpha must lie in [0, 1)")


def _as_matrix(gradients: list[ParameterVector]) -> tuple[np.ndarray, tuple]:
    if not gradients:
        raise ValueError("empty gradient batch")
    layout = gradients[0].layout
    for g in gradients:
        if g.layout != layout:
            raise ValueError("gradient layouts differ")
    return np.stack([g.values for g in gradients]), layout


def clip_gradients(
    gradients: list[ParameterVector], clip_norm: float
) -> list[ParameterVector]:
    """Scale each gradient by min(1, C / ||g||_2)."""
    G, layout = _as_matrix(gradients)
    norms = np.linalg.norm(G, axis=1)
    factors = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    return [ParameterVector(G[i] * factors[i], layout) for i in range(len(G))]


def clip_and_noise(
    gradients: list[ParameterVector],
    config: PrivacyConfig,
    rng: np.random.Generator,
) -> list[ParameterVector]:
    """Clipped per-sample gradients with the batch noise folded in.

    One spherical Gaussian draw with std sigma*C per coordinate is shared by
    the whole batch (the same vector added to every clipped gradient), so the
    mean of the result is exactly the clipped mean plus that draw: the noisy
    aggregate the optimizer step consumes.
    """
    if config.mode != GAUSSIAN:
        raise ValueError("clip_and_noise requires gaussian-noise mode")
    clipped = clip_gradients(gradients, config.clip_norm)
    if config.sigma == 0.0:
        return clipped
    layout = clipped[0].layout
    noise = rng.normal(0.0, config.sigma * config.clip_norm, len(clipped[0].values))
    return [ParameterVector(g.values + noise, layout) for g in clipped]


class NonUniqueResult(NamedTuple):
    gradients: list[ParameterVector]
    singleton_batch: bool


def non_unique_gradients(
    gradients: list[ParameterVector], alpha: float
) -> NonUniqueResult:
    """Down-weight the part of each gradient orthogonal to the others.

    The projection of g_i onto span{g_j : j != i} is solved by least squares
    on the Gram matrix of the other gradients, ridge-regularized so duplicate
    gradients stay well posed. A batch of one has an empty span, so the whole
    gradient counts as unique and the result is alpha * g (flagged).
    """
    G, layout = _as_matrix(gradients)
    B = G.shape[0]
    if B == 1:
        return NonUniqueResult([ParameterVector(alpha * G[0], layout)], True)
    out = []
    for i in range(B):
        others = np.delete(G, i, axis=0)
        gram = others @ others.T
        gram[np.diag_indices_from(gram)] += GRAM_RIDGE
        coef = np.linalg.solve(gram, others @ G[i])
        span = coef @ others
        unique = G[i] - span
        out.append(ParameterVector(span + alpha * unique, layout))
    return NonUniqueResult(out, False)


# ---------------------------------------------------------------------------
# membership inference


def attack_features(
    model: ParameterVector, spec: ModelSpec, X: np.ndarray, y: np.ndarray
) -> np.ndarray:
    """Per-sample white-box features: [loss, gradient l2 norm, |error|]."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    losses = per_sample_losses(model, spec, X, y)
    grads = gradient_matrix(model, spec, X, y)
    errors = np.abs(predict(model, spec, X) - y)
    return np.column_stack([losses, np.linalg.norm(grads, axis=1), errors])


@dataclass
class AttackDataset:
    """Balanced member/non-member feature sets for one learner."""

    member_features: np.ndarray
    non_member_features: np.ndarray

    def __post_init__(self):
        if len(self.member_features) != len(self.non_member_features):
            raise ValueError("attack sets must be balanced")

    @property
    def size(self) -> int:
        return len(self.member_features)

    def xy(self) -> tuple[np.ndarray, np.ndarray]:
        X = np.vstack([self.member_features, self.non_member_features])
        y = np.concatenate(
            [np.ones(self.size, dtype=int), np.zeros(self.size, dtype=int)]
        )
        return X, y


def build_attack_dataset(
    model: ParameterVector,
    spec: ModelSpec,
    members: LabeledDataset,
    pool: LabeledDataset,
    rng: np.random.Generator,
) -> AttackDataset:
    """Balanced features from a learner's training samples and a held-out pool."""
    k = min(len(members), len(pool))
    mi = rng.permutation(len(members))[:k]
    pi = rng.permutation(len(pool))[:k]
    return AttackDataset(
        attack_features(model, spec, members.features[mi], members.targets[mi]),
        attack_features(model, spec, pool.features[pi], pool.targets[pi]),
    )


@dataclass
class AttackModel:
    mean: np.ndarray
    std: np.ndarray
    clf: LogisticRegression

    def predict_member(self, features: np.ndarray) -> np.ndarray:
        z = (features - self.mean) / self.std
        return self.clf.predict(z).astype(bool)

    def accuracy(self, data: AttackDataset) -> float:
        X, y = data.xy()
        z = (X - self.mean) / self.std
        return float(np.mean(self.clf.predict(z) == y))


def fit_attacker(data: AttackDataset) -> AttackModel:
    X, y = data.xy()
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), 1e-12)
    clf = LogisticRegression(max_iter=2000)
    clf.fit((X - mean) / std, y)
    return AttackModel(mean, std, clf)


def train_attacker(
    attacker: "LearnerLike",
    global_model: ParameterVector,
    spec: ModelSpec,
    held_out_pool: LabeledDataset,
    seed: int,
) -> AttackModel:
    """Fit the attacker's member/non-member classifier under the global model."""
    if len(attacker.dataset) < MIN_ATTACK_SAMPLES or len(held_out_pool) < MIN_ATTACK_SAMPLES:
        raise ValueError(
            f"attacker needs at least {MIN_ATTACK_SAMPLES} member and non-member samples"
        )
    rng = substream(seed, "attack", attacker.id)
    data = build_attack_dataset(global_model, spec, attacker.dataset, held_out_pool, rng)
    return fit_attacker(data)


class LearnerLike:
    """Anything with an ``id`` and a ``dataset`` (see federation.LearnerProfile)."""

    id: str
    dataset: LabeledDataset


@dataclass
class VulnerabilityReport:
    matrix: dict[tuple[str, str], float]  # (attacker, target) -> accuracy
    mean_vulnerability: float
    round: int

    @property
    def n_pairs(self) -> int:
        return len(self.matrix)

    def rows(self) -> list[tuple[int, str, str, float]]:
        return [(self.round, a, t, acc) for (a, t), acc in sorted(self.matrix.items())]


def vulnerability(
    global_model: ParameterVector,
    spec: ModelSpec,
    learners: list,
    held_out_pools: dict[str, LabeledDataset],
    round: int,
    seed: int = 0,
) -> VulnerabilityReport:
    """Every learner attacks every other learner's balanced set; the mean of
    the N*(N-1) accuracies is the vulnerability score."""
    if len(learners) < 2:
        raise ValueError("need at least two learners")
    datasets = {}
    for l in learners:
        pool = held_out_pools[l.id]
        if len(l.dataset) < MIN_ATTACK_SAMPLES or len(pool) < MIN_ATTACK_SAMPLES:
            raise ValueError("every learner needs balanced sets of at least "
                             f"{MIN_ATTACK_SAMPLES} members and non-members")
        # fixed balanced subsets per learner: repeated measurements across
        # rounds then differ only through the model, not through resampling
        rng = substream(seed, "attack", l.id)
        datasets[l.id] = build_attack_dataset(global_model, spec, l.dataset, pool, rng)
    attackers = {l.id: fit_attacker(datasets[l.id]) for l in learners}
    matrix = {}
    for a in learners:
        for t in learners:
            if a.id == t.id:
                continue
            matrix[(a.id, t.id)] = attackers[a.id].accuracy(datasets[t.id])
    mean = float(np.mean(list(matrix.values())))
    return VulnerabilityReport(matrix=matrix, mean_vulnerability=mean, round=round)


def split_holdout_pools(
    test: LabeledDataset, learner_ids: list[str], seed: int = 0
) -> dict[str, LabeledDataset]:
    """Deal the common test set into disjoint per-learner non-member pools."""
    rng = substream(seed, "holdout")
    order = rng.permutation(len(test))
    chunks = np.array_split(order, len(learner_ids))
    return {lid: test.subset(idx) for lid, idx in zip(learner_ids, chunks)}
