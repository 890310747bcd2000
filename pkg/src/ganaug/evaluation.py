"""Classifier training, the strategy x k x repetition matrix, metrics and reports."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ganaug.data import (
    DatasetSplit,
    Label,
    PatchPool,
    StrategyId,
    SubsetLadder,
    TrainingSet,
    build_training_set,
    flip_batch,
    sample_nested_subsets,
    split_dataset,
)
from ganaug.errors import InvalidInputError
from ganaug.gan import GanTrainConfig, synthesize, train_gan
from ganaug.models import (
    Checkpoint,
    ClassifierSpec,
    DiscriminatorSpec,
    GeneratorSpec,
    build_model,
)
from ganaug.seeding import derive_seed

log = logging.getLogger(__name__)

RESULTS_FIELDS = ("strategy", "k", "repetition", "seed", "precision", "recall", "f1", "threshold")
SUMMARY_FIELDS = ("strategy", "k", "f1_mean", "f1_std", "n")
STRATEGY_ORDER = {s: i for i, s in enumerate(StrategyId)}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise InvalidInputError("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, predicted, actual) -> "ConfusionCounts":
        p = np.asarray(predicted, dtype=bool)
        a = np.asarray(actual, dtype=bool)
        return cls(
            tp=int(np.sum(p & a)),
            fp=int(np.sum(p & ~a)),
            tn=int(np.sum(~p & ~a)),
            fn=int(np.sum(~p & a)),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def f1_score(c: ConfusionCounts) -> tuple[float, float, float]:
    """(precision, recall, f1) for the Mass class; every 0/0 is taken as 0."""
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 40
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 64
    patience: int = 10
    threshold: float = 0.5
    base_channels: int = 0  # 0 -> default for the image size
    kernel_size: int = 5

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise InvalidInputError("epochs, batch_size and patience must be >= 1")
        if self.learning_rate < 0:
            raise InvalidInputError("learning_rate must be non-negative")


@dataclass
class ClassifierResult:
    checkpoint: Checkpoint
    best_epoch: int
    val_f1_history: list[float]


@torch.no_grad()
def predict_proba(model, pool: PatchPool, batch_size: int = 512) -> np.ndarray:
    model.eval()
    x = pool.pixels()[:, None]
    out = [torch.sigmoid(model(torch.from_numpy(x[i : i + batch_size]))).numpy() for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def evaluate_pool(model, pool: PatchPool, threshold: float = 0.5) -> ConfusionCounts:
    probs = predict_proba(model, pool)
    return ConfusionCounts.from_predictions(probs >= threshold, pool.targets() > 0.5)


def train_classifier(
    trainset: TrainingSet,
    valset: PatchPool,
    config: ClassifierConfig,
    seed: int = 0,
) -> ClassifierResult:
    """Binary cross-entropy training with early stopping on validation F1.

    Mini-batches are drawn uniformly from the imbalanced training pool. The
    returned checkpoint is the epoch with the highest validation F1; ties
    keep the earlier epoch.
    """
    pool = trainset.pool
    counts = pool.class_counts
    if counts[Label.MASS] == 0 or counts[Label.NORMAL] == 0:
        raise InvalidInputError("training set must contain both classes")
    spec = ClassifierSpec(image_size=pool.image_size, base_channels=config.base_channels, kernel_size=config.kernel_size)
    model = build_model(spec, derive_seed(seed, 11))
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas)
    x_all = pool.pixels()[:, None]
    y_all = pool.targets()
    rng = np.random.default_rng(derive_seed(seed, 12))

    def val_f1() -> float:
        return f1_score(evaluate_pool(model, valset, config.threshold))[2]

    best = Checkpoint.from_model(model, epoch=0, seed=seed)
    best_f1, best_epoch = -1.0, 0
    history: list[float] = []
    stale = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(x_all))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            xb = x_all[idx]
            if trainset.flip:
                xb = flip_batch(xb, rng)
            logits = model(torch.from_numpy(np.ascontiguousarray(xb)))
            loss = F.binary_cross_entropy_with_logits(logits, torch.from_numpy(y_all[idx]))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        f1 = val_f1()
        history.append(f1)
        if f1 > best_f1:
            best, best_f1, best_epoch, stale = Checkpoint.from_model(model, epoch=epoch, seed=seed), f1, epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return ClassifierResult(best, best_epoch, history)


# ---------------------------------------------------------------- experiment matrix


@dataclass(frozen=True)
class ExperimentMatrixConfig:
    k_values: tuple[int, ...] = (100, 250, 500, 750, 1000, 1300)
    imbalance_ratio: int = 10
    synthetic_multiplier: float = 1.5
    strategies: tuple[StrategyId, ...] = tuple(StrategyId)
    repetitions: int = 3
    split_fractions: tuple[float, float, float] = (0.60, 0.066, 0.334)
    master_seed: int = 0
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    g_base_channels: int = 0
    d_base_channels: int = 0
    g_kernel_size: int = 4
    d_kernel_size: int = 5

    def __post_init__(self):
        object.__setattr__(self, "k_values", tuple(int(k) for k in self.k_values))
        object.__setattr__(self, "strategies", tuple(StrategyId(s) for s in self.strategies))
        object.__setattr__(self, "split_fractions", tuple(self.split_fractions))
        if isinstance(self.classifier, dict):
            object.__setattr__(self, "classifier", ClassifierConfig(**self.classifier))
        if isinstance(self.gan, dict):
            object.__setattr__(self, "gan", GanTrainConfig(**self.gan))
        if self.repetitions < 1:
            raise InvalidInputError("repetitions must be >= 1")
        if not self.k_values or any(a >= b for a, b in zip(self.k_values, self.k_values[1:])):
            raise InvalidInputError("k_values must be non-empty and strictly ascending")
        if self.synthetic_multiplier <= 0:
            raise InvalidInputError("synthetic_multiplier must be positive")
        if self.imbalance_ratio < 1:
            raise InvalidInputError("imbalance_ratio must be >= 1")


@dataclass(frozen=True)
class MetricsRecord:
    strategy: StrategyId
    k: int
    repetition: int
    precision: float
    recall: float
    f1: float
    threshold: float
    seed: int
    n_test: int = 0

    def sort_key(self):
        return (STRATEGY_ORDER[StrategyId(self.strategy)], self.k, self.repetition)


# (reals, n, seed) -> synthetic Mass pool
Synthesizer = Callable[[PatchPool, int, int], PatchPool]


@dataclass(frozen=True)
class GanSynthesizer:
    """Train a GAN on the given reals and draw ``n`` synthetic masses from it."""

    config: GanTrainConfig
    g_spec: Optional[GeneratorSpec] = None
    d_spec: Optional[DiscriminatorSpec] = None

    def __call__(self, reals: PatchPool, n: int, seed: int) -> PatchPool:
        result = train_gan(replace(self.config, seed=seed), reals, self.g_spec, self.d_spec)
        return synthesize(result.generator, n, derive_seed(seed, 5), self.config.latent)


def default_synthesizer(config: ExperimentMatrixConfig, image_size: int) -> GanSynthesizer:
    g_spec = GeneratorSpec(
        image_size=image_size,
        latent_dim=config.gan.latent.dim,
        base_channels=config.g_base_channels,
        kernel_size=config.g_kernel_size,
    )
    d_spec = DiscriminatorSpec(image_size=image_size, base_channels=config.d_base_channels, kernel_size=config.d_kernel_size)
    return GanSynthesizer(config.gan, g_spec, d_spec)


@dataclass(frozen=True)
class RepetitionData:
    repetition: int
    seed: int
    ladder: SubsetLadder
    synthetic: PatchPool


@dataclass(frozen=True)
class MatrixData:
    """Everything a cell needs; frozen once built, shared by all cells."""

    positives: DatasetSplit
    negatives: DatasetSplit
    validation: PatchPool
    test: PatchPool
    repetitions: tuple[RepetitionData, ...]


def repetition_seed(master_seed: int, repetition: int) -> int:
    return derive_seed(master_seed, repetition)


def prepare_matrix(
    config: ExperimentMatrixConfig,
    pool: PatchPool,
    synthesizer: Optional[Synthesizer] = None,
) -> MatrixData:
    """Fixed stratified split plus, per repetition, a nested ladder and a synthetic pool.

    The GAN for repetition r is trained on that repetition's largest real
    subset; its pool holds ceil(multiplier * max(k)) patches and each cell
    takes a prefix of it.
    """
    positives = split_dataset(pool.with_label(Label.MASS), config.split_fractions, config.master_seed)
    negatives = split_dataset(pool.with_label(Label.NORMAL), config.split_fractions, config.master_seed)
    k_max = config.k_values[-1]
    if len(negatives.train) < config.imbalance_ratio * k_max:
        raise InvalidInputError(
            f"need {config.imbalance_ratio * k_max} training negatives, split has {len(negatives.train)}"
        )
    needs_gan = any(s.uses_synthetic for s in config.strategies)
    if needs_gan and synthesizer is None:
        synthesizer = default_synthesizer(config, pool.image_size)
    n_syn = math.ceil(config.synthetic_multiplier * k_max)
    reps = []
    for r in range(config.repetitions):
        seed = repetition_seed(config.master_seed, r)
        ladder = sample_nested_subsets(positives.train, config.k_values, seed)
        synthetic = PatchPool()
        if needs_gan:
            log.info("repetition %d: synthesizing %d patches from %d reals", r, n_syn, k_max)
            synthetic = synthesizer(positives.train.select(ladder[k_max]), n_syn, derive_seed(seed, 21))
        reps.append(RepetitionData(r, seed, ladder, synthetic))
    return MatrixData(
        positives=positives,
        negatives=negatives,
        validation=positives.validation + negatives.validation,
        test=positives.test + negatives.test,
        repetitions=tuple(reps),
    )


def cell_training_set(data: MatrixData, config: ExperimentMatrixConfig, strategy, k: int, repetition: int) -> TrainingSet:
    rep = data.repetitions[repetition]
    return build_training_set(
        k,
        rep.ladder,
        data.positives.train,
        data.negatives.train,
        rep.synthetic,
        StrategyId(strategy),
        config.imbalance_ratio,
        config.synthetic_multiplier,
        negative_seed=derive_seed(rep.seed, 22),
    )


def evaluate_strategy(
    strategy: StrategyId,
    k: int,
    repetition: int,
    data: MatrixData,
    config: ExperimentMatrixConfig,
) -> MetricsRecord:
    """Train one classifier for (strategy, k, repetition) and score it on the fixed test pool."""
    rep = data.repetitions[repetition]
    trainset = cell_training_set(data, config, strategy, k, repetition)
    result = train_classifier(trainset, data.validation, config.classifier, seed=rep.seed)
    counts = evaluate_pool(result.checkpoint.build(), data.test, config.classifier.threshold)
    p, r, f1 = f1_score(counts)
    return MetricsRecord(StrategyId(strategy), k, repetition, p, r, f1, config.classifier.threshold, rep.seed, counts.total)


def _cell_worker(args):
    strategy, k, r, data, config = args
    torch.set_num_threads(1)
    return evaluate_strategy(strategy, k, r, data, config)


def run_matrix(
    config: ExperimentMatrixConfig,
    pool: PatchPool,
    synthesizer: Optional[Synthesizer] = None,
    jobs: int = 1,
    data: Optional[MatrixData] = None,
) -> list[MetricsRecord]:
    """One record per (strategy, k, repetition), sorted in that order."""
    data = data or prepare_matrix(config, pool, synthesizer)
    cells = [(s, k, r) for s in config.strategies for k in config.k_values for r in range(config.repetitions)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            records = list(ex.map(_cell_worker, [(s, k, r, data, config) for s, k, r in cells]))
    else:
        records = []
        for s, k, r in cells:
            rec = evaluate_strategy(s, k, r, data, config)
            log.info("cell %s k=%d rep=%d: P=%.3f R=%.3f F1=%.3f", s.value, k, r, rec.precision, rec.recall, rec.f1)
            records.append(rec)
    return sorted(records, key=MetricsRecord.sort_key)


# ---------------------------------------------------------------- reports


def write_results(table: Sequence[MetricsRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_FIELDS)
        for rec in table:
            w.writerow([StrategyId(rec.strategy).value, rec.k, rec.repetition, rec.seed,
                        repr(rec.precision), repr(rec.recall), repr(rec.f1), repr(rec.threshold)])


def read_results(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULTS_FIELDS:
            raise InvalidInputError(f"{path}: header must be {','.join(RESULTS_FIELDS)}")
        return [
            MetricsRecord(
                strategy=StrategyId(row["strategy"]),
                k=int(row["k"]),
                repetition=int(row["repetition"]),
                precision=float(row["precision"]),
                recall=float(row["recall"]),
                f1=float(row["f1"]),
                threshold=float(row["threshold"]),
                seed=int(row["seed"]),
            )
            for row in reader
        ]


@dataclass(frozen=True)
class SummaryRow:
    strategy: StrategyId
    k: int
    f1_mean: float
    f1_std: float
    n: int


def summarize(table: Sequence[MetricsRecord]) -> list[SummaryRow]:
    """Mean and sample standard deviation (0 for a single run) of F1 per (strategy, k)."""
    groups: dict[tuple[StrategyId, int], list[float]] = {}
    for rec in sorted(table, key=MetricsRecord.sort_key):
        groups.setdefault((StrategyId(rec.strategy), rec.k), []).append(rec.f1)
    rows = []
    for (s, k), vals in groups.items():
        arr = np.array(vals, dtype=np.float64)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        rows.append(SummaryRow(s, k, float(arr.mean()), std, len(arr)))
    return rows


def plot_learning_curves(summary: Sequence[SummaryRow], path) -> list[str]:
    """Line plot of mean F1 against k, one series per strategy; returns the legend labels."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    labels = []
    for s in StrategyId:
        rows = [r for r in summary if r.strategy == s]
        if not rows:
            continue
        ks = [r.k for r in rows]
        means = [r.f1_mean for r in rows]
        stds = [r.f1_std for r in rows]
        if any(n > 1 for n in (r.n for r in rows)):
            ax.errorbar(ks, means, yerr=stds, marker="o", capsize=3, label=s.display_name)
        else:
            ax.plot(ks, means, marker="o", label=s.display_name)
        labels.append(s.display_name)
    ax.set_xlabel("k (real positive training patches)")
    ax.set_ylabel("F1 score")
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return labels


def emit_report(table: Sequence[MetricsRecord], out_dir) -> dict[str, Path]:
    """Write results.csv, summary.csv and f1_curve.png into ``out_dir``."""
    if not table:
        raise InvalidInputError("cannot report on an empty results table")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = sorted(table, key=MetricsRecord.sort_key)
    paths = {"results": out / "results.csv", "summary": out / "summary.csv", "plot": out / "f1_curve.png"}
    write_results(table, paths["results"])
    summary = summarize(table)
    with open(paths["summary"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for row in summary:
            w.writerow([row.strategy.value, row.k, repr(row.f1_mean), repr(row.f1_std), row.n])
    plot_learning_curves(summary, paths["plot"])
    return paths
