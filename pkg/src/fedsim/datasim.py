"""Synthetic datasets and federated partitioning.

Generates bounded "age-like" regression targets (linear signal plus noise,
clipped to a configured range) or binary targets from a logistic ground
truth, then splits them across sites under four environments:

    amount:       Uniform (equal sizes) | Skewed (geometric decay)
    distribution: IID (per-site target mix matches global) | Non-IID
                  (contiguous target-quantile bands, lowest band at site 0)
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .rng import substream

CONTINUOUS = "continuous"
BINARY = "binary"

UNIFORM = "Uniform"
SKEWED = "Skewed"
IID = "IID"
NON_IID = "Non-IID"

QUANTILE_BINS = 10


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, d)
    targets: np.ndarray  # (n,)
    target_kind: str = CONTINUOUS

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a (n, d) matrix")
        if len(self.targets) != len(self.features):
            raise ValueError("feature/target counts differ")
        if len(self.features) == 0:
            raise ValueError("dataset must be non-empty")
        if self.target_kind not in (CONTINUOUS, BINARY):
            raise ValueError(f"unknown target kind: {self.target_kind!r}")

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.features[idx], self.targets[idx], self.target_kind)


def concat(datasets: list[LabeledDataset]) -> LabeledDataset:
    if not datasets:
        raise ValueError("nothing to concatenate")
    kind = datasets[0].target_kind
    return LabeledDataset(
        np.concatenate([d.features for d in datasets]),
        np.concatenate([d.targets for d in datasets]),
        kind,
    )


@dataclass(frozen=True)
class PartitionPlan:
    sites: int = 8
    amount_mode: str = UNIFORM
    distribution_mode: str = IID
    skew_ratio: float = 0.75

    def __post_init__(self):
        if self.sites < 2:
            raise ValueError("need at least 2 sites")
        if self.amount_mode not in (UNIFORM, SKEWED):
            raise ValueError(f"unknown amount mode: {self.amount_mode!r}")
        if self.distribution_mode not in (IID, NON_IID):
            raise ValueError(f"unknown distribution mode: {self.distribution_mode!r}")
        if not (0.0 < self.skew_ratio <= 1.0):
            raise ValueError("skew_ratio must lie in (0, 1]")


def generate_synthetic(
    seed: int,
    n: int,
    input_dim: int,
    target_kind: str = CONTINUOUS,
    *,
    target_lo: float = 45.0,
    target_hi: float = 85.0,
    noise_std: float = 4.0,
) -> LabeledDataset:
    """Standard-normal features; targets from a fixed linear ground truth."""
    if n < 10:
        raise ValueError("need at least 10 samples")
    rng = substream(seed, "data")
    X = rng.normal(0.0, 1.0, (n, input_dim))
    beta = rng.normal(0.0, 1.0, input_dim)
    beta *= (target_hi - target_lo) / 6.0 / max(np.linalg.norm(beta), 1e-12)
    signal = X @ beta
    if target_kind == CONTINUOUS:
        mid = 0.5 * (target_lo + target_hi)
        y = mid + signal + rng.normal(0.0, noise_std, n)
        y = np.clip(y, target_lo, target_hi)
    elif target_kind == BINARY:
        p = 1.0 / (1.0 + np.exp(-signal / max(np.std(signal), 1e-12)))
        y = (rng.uniform(size=n) < p).astype(np.float64)
    else:
        raise ValueError(f"unknown target kind: {target_kind!r}")
    return LabeledDataset(X, y, target_kind)


def _target_bins(targets: np.ndarray, n_bins: int = QUANTILE_BINS) -> np.ndarray:
    """Assign each target to a quantile bin (or to its value group when the
    target takes few distinct values, e.g. binary labels)."""
    uniq = np.unique(targets)
    if len(uniq) <= n_bins:
        return np.searchsorted(uniq, targets)
    edges = np.quantile(targets, np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.searchsorted(edges, targets, side="right")


def split_train_test(
    dataset: LabeledDataset, test_fraction: float, seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint, exhaustive split, stratified over target quantile bins.

    The test set receives exactly floor(test_fraction * n) samples, allocated
    across strata by largest remainder.
    """
    if not (0.0 < test_fraction < 1.0):
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    n = len(dataset)
    rng = substream(seed, "split")
    bins = _target_bins(dataset.targets)
    target_total = int(np.floor(test_fraction * n))
    bin_ids = np.unique(bins)
    quotas = np.array([test_fraction * np.sum(bins == b) for b in bin_ids])
    counts = _largest_remainder(quotas, target_total)
    test_idx = []
    for b, take in zip(bin_ids, counts):
        members = np.flatnonzero(bins == b)
        picked = rng.permutation(len(members))[:take]
        test_idx.append(members[picked])
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.zeros(n, dtype=bool)
    mask[test_idx] = True
    return dataset.subset(np.flatnonzero(~mask)), dataset.subset(test_idx)


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Round nonnegative quotas to integers summing exactly to ``total``."""
    base = np.floor(quotas).astype(int)
    short = total - base.sum()
    if short > 0:
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:short]] += 1
    elif short < 0:
        order = np.argsort(quotas - base, kind="stable")
        for i in order:
            if short == 0:
                break
            if base[i] > 0:
                base[i] -= 1
                short += 1
    return base


def _site_shares(plan: PartitionPlan) -> np.ndarray:
    if plan.amount_mode == UNIFORM:
        return np.full(plan.sites, 1.0 / plan.sites)
    w = plan.skew_ratio ** np.arange(plan.sites)
    return w / w.sum()


def _site_sizes(n: int, plan: PartitionPlan) -> np.ndarray:
    sizes = _largest_remainder(_site_shares(plan) * n, n)
    if plan.amount_mode == UNIFORM:
        # balanced remainder: first r sites take one extra sample
        base, extra = divmod(n, plan.sites)
        sizes = np.array([base + 1] * extra + [base] * (plan.sites - extra))
    else:
        # geometric decay should stay strictly decreasing after rounding
        for i in range(plan.sites - 1):
            while sizes[i] <= sizes[i + 1]:
                sizes[i] += 1
                sizes[i + 1] -= 1
    if sizes.min() < 1:
        raise ValueError(
            f"{n} samples cannot fill {plan.sites} strictly shrinking sites "
            f"at skew ratio {plan.skew_ratio}"
        )
    return sizes


def partition(
    train: LabeledDataset, plan: PartitionPlan, seed: int = 0
) -> list[LabeledDataset]:
    """Split the training set into one dataset per site under the plan."""
    n = len(train)
    if n < plan.sites:
        raise ValueError("more sites than samples")
    rng = substream(seed, "partition")
    if plan.distribution_mode == NON_IID:
        order = np.argsort(train.targets, kind="stable")
        sizes = _site_sizes(n, plan)
        out, at = [], 0
        for s in sizes:
            out.append(train.subset(order[at : at + s]))
            at += s
        return out
    # IID: walk quantile bins in order, shuffle within each bin, and deal the
    # resulting stream to sites with smooth weighted round robin. Every bin
    # then lands on each site in proportion to its share, within one sample
    # for uniform shares.
    bins = _target_bins(train.targets)
    stream = []
    for b in np.unique(bins):
        members = np.flatnonzero(bins == b)
        stream.append(members[rng.permutation(len(members))])
    stream = np.concatenate(stream)
    shares = _site_shares(plan)
    credits = np.zeros(plan.sites)
    assignment = np.empty(n, dtype=int)
    for item in stream:
        credits += shares
        site = int(np.argmax(credits))
        credits[site] -= 1.0
        assignment[item] = site
    return [train.subset(np.flatnonzero(assignment == s)) for s in range(plan.sites)]


def centralized_fraction(
    partitions: list[LabeledDataset], fraction: float
) -> LabeledDataset:
    """Pool whole silos, largest first (ties to the highest silo index), then a
    partial silo, until floor(fraction * total) samples are collected."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must lie in (0, 1]")
    total = sum(len(p) for p in partitions)
    target = int(np.floor(fraction * total))
    order = sorted(
        range(len(partitions)), key=lambda i: (len(partitions[i]), i), reverse=True
    )
    chosen, remaining = [], target
    for i in order:
        if remaining <= 0:
            break
        part = partitions[i]
        if len(part) <= remaining:
            chosen.append(part)
            remaining -= len(part)
        else:
            chosen.append(part.subset(np.arange(remaining)))
            remaining = 0
    return concat(chosen)


def target_histogram(dataset: LabeledDataset, edges: np.ndarray) -> np.ndarray:
    counts, _ = np.histogram(dataset.targets, bins=edges)
    return counts / max(counts.sum(), 1)


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence between two histograms (natural log base)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    m = 0.5 * (p + q)

    def _kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


# ---------------------------------------------------------------------------
# plain-text dataset exchange format: '#'-prefixed header lines, then one
# sample per line, feature columns followed by the target, space separated.

def save_dataset(dataset: LabeledDataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(_dataset_text(dataset))


def _dataset_text(dataset: LabeledDataset) -> str:
    buf = io.StringIO()
    buf.write("# fedsim dataset v1\n")
    buf.write(
        f"# target_kind={dataset.target_kind} n={len(dataset)} dim={dataset.input_dim}\n"
    )
    for x, y in zip(dataset.features, dataset.targets):
        buf.write(" ".join(repr(float(v)) for v in x) + " " + repr(float(y)) + "\n")
    return buf.getvalue()


def load_dataset(path) -> LabeledDataset:
    kind = CONTINUOUS
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if token.startswith("target_kind="):
                        kind = token.split("=", 1)[1]
                continue
            rows.append([float(v) for v in line.split()])
    if not rows:
        raise ValueError("empty dataset file")
    data = np.asarray(rows)
    return LabeledDataset(data[:, :-1], data[:, -1], kind)
