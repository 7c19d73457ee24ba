"""Config-driven experiment runner.

A run is fully described by an ExperimentConfig (JSON on disk): data
generation -> train/test split -> partitioning -> federated or centralized
training -> per-round evaluation (optionally per-round vulnerability) ->
metrics CSV + final model file + a copy of the config. Reruns of the same
config reproduce the metrics byte for byte apart from wall-clock columns.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import datasim, federation, params as par, privacy as priv, secureagg
from .datasim import LabeledDataset, PartitionPlan
from .federation import PolicyConfig
from .he.ckks import SchemeParams, keygen, toy_params
from .params import ModelSpec, ParameterVector, SgdConfig
from .privacy import PrivacyConfig
from .rng import substream

METRICS_COLUMNS = [
    "run_id",
    "round",
    "virtual_time_s",
    "comm_parameters",
    "comm_bits",
    "test_mae",
    "test_accuracy",
    "test_auc",
    "vulnerability",
    "wall_clock_s",
]

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_RUNTIME_ERROR = 2


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 4000
    n_test: int = 1000
    target_lo: float = 45.0
    target_hi: float = 85.0
    noise_std: float = 4.0


@dataclass(frozen=True)
class EncryptionConfig:
    enabled: bool = False
    preset: str = "full"  # default scheme parameters; "toy" for fast tests

    def scheme_params(self) -> SchemeParams:
        if self.preset == "toy":
            return toy_params()
        if self.preset == "full":
            return SchemeParams()
        raise ValueError(f"unknown encryption preset: {self.preset!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    run_id: str = "run"
    seed: int = 1234
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionPlan = field(default_factory=PartitionPlan)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    encryption: EncryptionConfig = field(default_factory=EncryptionConfig)
    centralized_fraction: float | None = None
    vulnerability_every: int = 0
    speed_factors: tuple[float, ...] | None = None
    output_dir: str = "runs"

    def __post_init__(self):
        if self.centralized_fraction is not None and not (
            0.0 < self.centralized_fraction <= 1.0
        ):
            raise ValueError("centralized_fraction must lie in (0, 1]")
        if self.vulnerability_every < 0:
            raise ValueError("vulnerability_every must be >= 0")
        if self.encryption.enabled and self.policy.kind != federation.SYNC:
            raise ValueError("encrypted training is defined for the sync policy only")
        if self.speed_factors is not None and len(self.speed_factors) != self.partition.sites:
            raise ValueError("one speed factor per site required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speed_factors"] = list(self.speed_factors) if self.speed_factors else None
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {
            "run_id", "seed", "model", "data", "partition", "policy", "sgd",
            "privacy", "encryption", "centralized_fraction",
            "vulnerability_every", "speed_factors", "output_dir",
        }
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")

        def build(cls, key):
            # a null section means "use the defaults"
            if key in d:
                if d[key] is None:
                    d.pop(key)
                else:
                    d[key] = cls(**d[key])

        build(ModelSpec, "model")
        build(DataConfig, "data")
        build(PartitionPlan, "partition")
        build(PolicyConfig, "policy")
        build(SgdConfig, "sgd")
        build(PrivacyConfig, "privacy")
        build(EncryptionConfig, "encryption")
        if d.get("speed_factors") is not None:
            d["speed_factors"] = tuple(float(s) for s in d["speed_factors"])
        return ExperimentConfig(**d)

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass
class MetricsRecord:
    run_id: str
    round: int
    virtual_time_s: float
    comm_parameters: int
    comm_bits: int
    test_mae: float | None = None
    test_accuracy: float | None = None
    test_auc: float | None = None
    vulnerability: float | None = None
    wall_clock_s: float = 0.0

    def row(self) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(float(v))
            return str(v)

        return [fmt(getattr(self, c)) for c in METRICS_COLUMNS]


def write_metrics_csv(records: list[MetricsRecord], path: Path) -> None:
    rounds = [r.round for r in records]
    if any(b <= a for a, b in zip(rounds, rounds[1:])):
        raise ValueError("rounds must be strictly increasing within a run")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())


# ---------------------------------------------------------------------------
# model files: magic, version, M, layout digest, then M little-endian f64


_MODEL_MAGIC = b"FSM1"


def _layout_digest(layout) -> bytes:
    return hashlib.sha256(json.dumps(layout).encode()).digest()


def save_model_file(model: ParameterVector, path: Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<BQ", 1, len(model)))
        fh.write(_layout_digest(model.layout))
        fh.write(model.values.astype("<f8").tobytes())


def load_model_file(path: Path, layout) -> ParameterVector:
    blob = Path(path).read_bytes()
    if blob[:4] != _MODEL_MAGIC:
        raise ValueError("not a model file")
    version, m = struct.unpack_from("<BQ", blob, 4)
    if version != 1:
        raise ValueError(f"unsupported model file version {version}")
    digest = blob[13:45]
    if digest != _layout_digest(layout):
        raise ValueError("model file does not match the expected layout")
    values = np.frombuffer(blob, dtype="<f8", offset=45, count=m)
    return ParameterVector(values.copy(), layout)


# ---------------------------------------------------------------------------
# running experiments


class StageError(RuntimeError):
    """A run aborted; the message names the stage that failed."""


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(f"stage '{name}' failed: {type(exc).__name__}: {exc}") from exc


@dataclass
class RunResult:
    config: ExperimentConfig
    run_dir: Path
    records: list[MetricsRecord]
    final_model: ParameterVector
    test_set: LabeledDataset

    @property
    def final_metric(self) -> float:
        rec = self.records[-1]
        return rec.test_mae if rec.test_mae is not None else rec.test_accuracy


def build_environment(config: ExperimentConfig):
    """Materialize datasets, partitions, and learner profiles for a config."""
    spec = config.model
    kind = datasim.BINARY if spec.loss == par.BCE else datasim.CONTINUOUS
    full = datasim.generate_synthetic(
        config.seed,
        config.data.n_train + config.data.n_test,
        spec.input_dim,
        kind,
        target_lo=config.data.target_lo,
        target_hi=config.data.target_hi,
        noise_std=config.data.noise_std,
    )
    test_fraction = config.data.n_test / (config.data.n_train + config.data.n_test)
    train, test = datasim.split_train_test(full, test_fraction, config.seed)
    parts = datasim.partition(train, config.partition, config.seed)
    if config.centralized_fraction is not None:
        pooled = datasim.centralized_fraction(parts, config.centralized_fraction)
        profiles = federation.make_profiles([pooled], [1.0])
    else:
        profiles = federation.make_profiles(parts, _speeds(config))
    return train, test, parts, profiles


def _speeds(config: ExperimentConfig) -> list[float]:
    if config.speed_factors is not None:
        return list(config.speed_factors)
    return federation.default_speed_factors(config.partition.sites)


def _evaluate(model, spec, test) -> dict[str, float]:
    return par.evaluate(model, spec, test)


def run_experiment(config: ExperimentConfig, base_dir: Path | None = None) -> RunResult:
    """Execute one run and write its artifact directory.

    Any module failure aborts the run with a diagnostic naming the stage
    (environment, training, evaluation, artifacts).
    """
    t_start = time.monotonic()
    spec = config.model
    with _stage("environment"):
        train, test, parts, profiles = build_environment(config)
        init = par.init_model(spec, substream(config.seed, "init"))
    privacy_cfg = None if config.privacy.mode == priv.NONE else config.privacy

    pools = None
    if config.vulnerability_every > 0:
        pools = priv.split_holdout_pools(test, [p.id for p in profiles], config.seed)

    def vuln(model, round_idx) -> float | None:
        if pools is None:
            return None
        if round_idx % config.vulnerability_every and round_idx != 0:
            return None
        report = priv.vulnerability(model, spec, profiles, pools, round_idx, config.seed)
        vuln_reports.append(report)
        return report.mean_vulnerability

    vuln_reports: list[priv.VulnerabilityReport] = []
    records: list[MetricsRecord] = []

    def record(round_idx, clock, ledger, model):
        with _stage("evaluation"):
            metrics = _evaluate(model, spec, test)
            vuln_score = vuln(model, round_idx)
        records.append(
            MetricsRecord(
                run_id=config.run_id,
                round=round_idx,
                virtual_time_s=clock,
                comm_parameters=ledger.exchanged_parameters,
                comm_bits=ledger.exchanged_bits,
                test_mae=metrics.get("mae"),
                test_accuracy=metrics.get("accuracy"),
                test_auc=metrics.get("auc"),
                vulnerability=vuln_score,
                wall_clock_s=time.monotonic() - t_start,
            )
        )

    if config.encryption.enabled:
        with _stage("training"):
            scheme = config.encryption.scheme_params()
            keys = keygen(scheme, config.seed)
            state = secureagg.make_encrypted_state(init, keys, substream(config.seed, "he", "init"))
            record(0, state.clock, state.ledger, init)
            for _ in range(config.policy.rounds):
                state = secureagg.run_encrypted_sync_round(
                    state, profiles, keys, spec, config.sgd,
                    seed=config.seed, privacy=privacy_cfg,
                )
                model = secureagg.decrypt_model(state.global_cipher, keys.secret)
                record(state.round, state.clock, state.ledger, model)
            final_model = secureagg.decrypt_model(state.global_cipher, keys.secret)
    else:
        with _stage("training"):
            state = federation.FederationState(global_model=init)
            record(0, state.clock, state.ledger, init)
            if config.policy.kind == federation.ASYNC:
                def on_commit(u, clock, model, ledger):
                    record(u, clock, ledger, model)

                state = federation.run_async(
                    state, profiles, spec, config.sgd, config.policy.update_budget,
                    seed=config.seed, privacy=privacy_cfg, on_commit=on_commit,
                )
            else:
                for _ in range(config.policy.rounds):
                    if config.policy.kind == federation.SYNC:
                        state = federation.run_sync_round(
                            state, profiles, spec, config.sgd,
                            seed=config.seed, privacy=privacy_cfg,
                        )
                    else:
                        state = federation.run_semisync_round(
                            state, profiles, spec, config.sgd, config.policy.lambda_epochs,
                            seed=config.seed, privacy=privacy_cfg,
                        )
                    record(state.round, state.clock, state.ledger, state.global_model)
            final_model = state.global_model

    with _stage("artifacts"):
        out_root = Path(base_dir) if base_dir is not None else Path(config.output_dir)
        run_dir = out_root / config.run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        config.save(run_dir / "config.json")
        write_metrics_csv(records, run_dir / "metrics.csv")
        save_model_file(final_model, run_dir / "model.bin")
        if vuln_reports:
            write_vulnerability_csv(vuln_reports, run_dir / "vulnerability.csv")
    return RunResult(config, run_dir, records, final_model, test)


def write_vulnerability_csv(reports: list[priv.VulnerabilityReport], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "attacker", "target", "accuracy"])
        for report in reports:
            for row in report.rows():
                writer.writerow([row[0], row[1], row[2], repr(float(row[3]))])
            writer.writerow([report.round, "mean", "mean", repr(float(report.mean_vulnerability))])


# ---------------------------------------------------------------------------
# the environment grid


GRID_ENVIRONMENTS = [
    (datasim.UNIFORM, datasim.IID),
    (datasim.UNIFORM, datasim.NON_IID),
    (datasim.SKEWED, datasim.IID),
    (datasim.SKEWED, datasim.NON_IID),
]

CENTRALIZED_FRACTIONS = (0.2, 0.5, 1.0)


def grid_configs(
    base: ExperimentConfig, async_budget_multiplier: int = 8
) -> list[ExperimentConfig]:
    """One config per {amount x distribution} x {sync, semisync(2,4), async}
    cell plus the three centralized baselines (19 in total).

    The async cells get ``async_budget_multiplier`` commits per learner-round;
    event-driven training needs several times the synchronous communication
    budget to reach a comparable model.
    """
    rounds = base.policy.rounds
    sites = base.partition.sites
    policies = [
        ("sync", PolicyConfig(kind=federation.SYNC, rounds=rounds)),
        ("semisync2", PolicyConfig(kind=federation.SEMISYNC, rounds=rounds, lambda_epochs=2)),
        ("semisync4", PolicyConfig(kind=federation.SEMISYNC, rounds=rounds, lambda_epochs=4)),
        ("async", PolicyConfig(
            kind=federation.ASYNC, rounds=rounds,
            update_budget=rounds * sites * async_budget_multiplier,
        )),
    ]
    configs = []
    for amount, dist in GRID_ENVIRONMENTS:
        plan = replace(base.partition, amount_mode=amount, distribution_mode=dist)
        for pname, policy in policies:
            configs.append(
                replace(
                    base,
                    run_id=f"{pname}_{amount.lower()}_{dist.lower().replace('-', '')}",
                    partition=plan,
                    policy=policy,
                )
            )
    for frac in CENTRALIZED_FRACTIONS:
        configs.append(
            replace(
                base,
                run_id=f"centralized_{int(frac * 100)}",
                policy=PolicyConfig(kind=federation.SYNC, rounds=rounds),
                centralized_fraction=frac,
            )
        )
    return configs


def run_grid(base: ExperimentConfig, base_dir: Path) -> tuple[list[RunResult], list[tuple[str, str]]]:
    """Run every grid cell; failures are recorded and the grid continues."""
    base_dir = Path(base_dir)
    results, failures = [], []
    for config in grid_configs(base):
        try:
            results.append(run_experiment(config, base_dir))
        except Exception as exc:  # noqa: BLE001 - cell isolation is the point
            failures.append((config.run_id, f"{type(exc).__name__}: {exc}"))
    write_grid_csv(results, base_dir / "grid.csv")
    if failures:
        with open(base_dir / "failures.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["run_id", "error"])
            writer.writerows(failures)
    return results, failures


def write_grid_csv(results: list[RunResult], path: Path) -> None:
    """Joined per-round table keyed by (environment, policy, round)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["environment", "policy", "round"] + METRICS_COLUMNS[2:])
        for res in results:
            cfg = res.config
            if cfg.centralized_fraction is not None:
                env = f"centralized-{int(cfg.centralized_fraction * 100)}"
                policy = "centralized"
            else:
                env = f"{cfg.partition.amount_mode}/{cfg.partition.distribution_mode}"
                policy = cfg.policy.kind
                if cfg.policy.kind == federation.SEMISYNC:
                    policy += f"(lambda={cfg.policy.lambda_epochs})"
            for rec in res.records:
                writer.writerow([env, policy, rec.round] + rec.row()[2:])


# ---------------------------------------------------------------------------
# defense sweep: vulnerability/performance trade-off rows


GAUSSIAN_ROUNDS = 40
NON_UNIQUE_ROUNDS = 25
DEFAULT_SIGMAS = (0.001, 0.01, 0.1)
DEFAULT_ALPHAS = (0.1, 0.3, 0.5)


@dataclass
class SweepRow:
    mode: str
    parameter: float
    rounds: int
    vulnerability: float
    test_mae: float


def run_defense_sweep(
    base: ExperimentConfig,
    base_dir: Path,
    sigmas=DEFAULT_SIGMAS,
    alphas=DEFAULT_ALPHAS,
    clip_norm: float = 1.0,
) -> list[SweepRow]:
    """Baseline (no defense) plus each defense setting at its round budget.

    The gaussian arm trains for 40 rounds and the non-unique arm for 25;
    each defended run is compared against an undefended run of the same
    length. Emits sweep.csv under ``base_dir``.
    """
    base_dir = Path(base_dir)
    rows: list[SweepRow] = []

    def one(run_id, rounds, privacy_cfg) -> SweepRow:
        cfg = replace(
            base,
            run_id=run_id,
            policy=PolicyConfig(kind=federation.SYNC, rounds=rounds),
            privacy=privacy_cfg,
            vulnerability_every=rounds,  # measure at init and at the final round
        )
        res = run_experiment(cfg, base_dir)
        rec = res.records[-1]
        mode = privacy_cfg.mode if privacy_cfg else priv.NONE
        param = {
            priv.NONE: 0.0,
            priv.GAUSSIAN: privacy_cfg.sigma if privacy_cfg else 0.0,
            priv.NON_UNIQUE: privacy_cfg.alpha if privacy_cfg else 0.0,
        }[mode]
        return SweepRow(mode, param, rounds, rec.vulnerability, rec.test_mae)

    for rounds in (GAUSSIAN_ROUNDS, NON_UNIQUE_ROUNDS):
        rows.append(one(f"sweep_none_{rounds}", rounds, PrivacyConfig(mode=priv.NONE)))
    for sigma in sigmas:
        rows.append(
            one(
                f"sweep_gauss_{sigma}",
                GAUSSIAN_ROUNDS,
                PrivacyConfig(mode=priv.GAUSSIAN, clip_norm=clip_norm, sigma=sigma),
            )
        )
    for alpha in alphas:
        rows.append(
            one(
                f"sweep_nonunique_{alpha}",
                NON_UNIQUE_ROUNDS,
                PrivacyConfig(mode=priv.NON_UNIQUE, alpha=alpha),
            )
        )
    with open(base_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "parameter", "rounds", "vulnerability", "test_mae"])
        for row in rows:
            writer.writerow(
                [row.mode, repr(float(row.parameter)), row.rounds,
                 repr(float(row.vulnerability)), repr(float(row.test_mae))]
            )
    return rows
