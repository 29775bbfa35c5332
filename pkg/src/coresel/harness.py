"""Continual-learning simulation, evaluation metrics, and validation oracles.

The training loop replays a bounded buffer alongside each incoming batch and
refreshes the buffer during the last epoch of every task: after each batch
of that epoch the configured selector is run on the union of the previous
buffer and the batch (with the batch reweighted so both cohorts carry equal
total mass in the outer objective). Accuracy on every seen task's test
split is recorded after each task into a lower-triangular matrix, from
which average accuracy and backward transfer are derived.

For validating influence estimates the module provides the exact
leave-one-out retraining delta and a dense-inverse finite-perturbation
probe of the second-order scores, plus the rank-agreement protocol: an
unbiased reservoir over the whole stream scores the samples it shares with
the method's candidate pool, and Kendall's tau between the two scorings is
logged at every selection step where the overlap is large enough.
"""

import csv
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import models
from .influence import (
    CriterionConfig,
    InfluenceContext,
    SecondOrderCase,
    build_context,
)
from .models import FitConfig, ModelSpec, Params, Sample
from .numkit import DEFAULT_DAMPING, CgConfig
from .selection import (
    GREEDY_KINDS,
    ReplayBuffer,
    SelectorKind,
    select_greedy,
    select_reservoir,
    select_ring,
)

DENSE_ORACLE_GUARD = 200
TAU_MIN_OVERLAP = 10

# Fixed tags for the independent named RNG streams of a run.
_RNG_TAGS = {"model_init": 0, "replay": 1, "method_reservoir": 2, "oracle_reservoir": 3}

STREAM_SOURCES = ("synthetic_gaussian", "csv")
CSV_BASE_COLUMNS = ("id", "task", "label")


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named randomness stream of a run."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_RNG_TAGS[name],)))


# ---------------------------------------------------------------------------
# task streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StreamSpec:
    source: str = "synthetic_gaussian"
    num_tasks: int = 2
    classes_per_task: int = 2
    samples_per_class: int = 50
    dim: int = 2
    batch_size: int = 10
    seed: int = 0
    mean_scale: float = 3.0
    within_std: float = 1.0
    drift_offsets: Optional[tuple] = None     # scalar mean shift per task
    label_noise: Optional[tuple] = None       # flip probability per task
    test_fraction: float = 0.2
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None

    def __post_init__(self):
        if self.source not in STREAM_SOURCES:
            raise ValueError(f"unknown stream source {self.source!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.source == "synthetic_gaussian":
            if self.num_tasks < 2:
                raise ValueError("a stream needs at least 2 tasks")
            if self.classes_per_task < 1 or self.samples_per_class < 1 or self.dim < 1:
                raise ValueError("classes_per_task, samples_per_class and dim must be positive")
            if not 0.0 < self.test_fraction < 1.0:
                raise ValueError("test_fraction must lie in (0, 1)")
            for name, values in (("drift_offsets", self.drift_offsets),
                                 ("label_noise", self.label_noise)):
                if values is not None and len(values) != self.num_tasks:
                    raise ValueError(f"{name} must list one value per task")
        else:
            if not self.train_csv or not self.test_csv:
                raise ValueError("csv streams require train_csv and test_csv paths")


@dataclass(frozen=True)
class TaskData:
    task_id: int
    train: tuple
    test: tuple
    classes: tuple


@dataclass(frozen=True)
class Stream:
    tasks: tuple
    batch_size: int
    dim: int
    num_classes: int

    def batches(self, task_index: int):
        """Fixed consecutive slices of the task's train list (same every epoch)."""
        train = self.tasks[task_index].train
        return [train[i:i + self.batch_size] for i in range(0, len(train), self.batch_size)]

    def total_train_size(self) -> int:
        return sum(len(t.train) for t in self.tasks)


def make_stream(spec: StreamSpec) -> Stream:
    """Build a deterministic task stream from its specification.

    Synthetic mode draws one Gaussian blob per class. Template means sit
    evenly spaced on the circle of radius ``mean_scale`` in the first two
    feature coordinates (randomly rotated and randomly assigned to
    classes), which keeps the ideal decision regions realizable by a
    bias-free linear head; extra coordinates are pure noise dimensions.
    Each task owns a disjoint class range; the per-task mean drift and
    label noise apply to the train split, which is shuffled once so batches
    mix classes. A disjoint test split with the same class means (and no
    label noise) is generated per task.
    """
    if spec.source == "csv":
        return _load_csv_stream(spec)
    rng = np.random.default_rng(spec.seed)
    total_classes = spec.num_tasks * spec.classes_per_task
    templates = _circle_templates(rng, total_classes, spec.dim, spec.mean_scale)
    drift = spec.drift_offsets or (0.0,) * spec.num_tasks
    noise = spec.label_noise or (0.0,) * spec.num_tasks
    test_per_class = max(1, round(spec.test_fraction * spec.samples_per_class))

    next_id = 0
    tasks = []
    for t in range(spec.num_tasks):
        classes = tuple(range(t * spec.classes_per_task, (t + 1) * spec.classes_per_task))
        train, test = [], []
        for c in classes:
            mean = templates[c] + drift[t]
            for dest, count in ((train, spec.samples_per_class), (test, test_per_class)):
                X = rng.normal(size=(count, spec.dim)) * spec.within_std + mean
                for row in X:
                    dest.append(Sample(id=next_id, task_id=t, label=c, features=row))
                    next_id += 1
        if noise[t] > 0 and len(classes) > 1:
            noisy = []
            for s in train:
                if rng.random() < noise[t]:
                    others = [c for c in classes if c != s.label]
                    noisy.append(replace(s, label=int(rng.choice(others))))
                else:
                    noisy.append(s)
            train = noisy
        order = rng.permutation(len(train))
        train = [train[i] for i in order]
        tasks.append(TaskData(t, tuple(train), tuple(test), classes))
    return Stream(tuple(tasks), spec.batch_size, spec.dim, total_classes)


def _circle_templates(rng: np.random.Generator, total_classes: int, dim: int,
                      scale: float) -> np.ndarray:
    """Evenly spaced class means on a circle, randomly rotated and assigned."""
    if dim == 1:
        positions = np.linspace(-scale, scale, total_classes)[:, None]
    else:
        angles = 2 * np.pi * (np.arange(total_classes) / total_classes + rng.random())
        positions = np.zeros((total_classes, dim))
        positions[:, 0] = scale * np.cos(angles)
        positions[:, 1] = scale * np.sin(angles)
    return positions[rng.permutation(total_classes)]


def _parse_csv_samples(path: str):
    """Read one sample file, reporting schema violations by row and column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: file is empty") from None
        if tuple(header[:3]) != CSV_BASE_COLUMNS:
            raise ValueError(f"{path}: header must start with id,task,label, got {header[:3]}")
        feature_cols = header[3:]
        expected = [f"f{i}" for i in range(len(feature_cols))]
        if feature_cols != expected or not feature_cols:
            raise ValueError(f"{path}: feature columns must be f0..f{{d-1}}, got {feature_cols}")
        samples = []
        for row_num, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: row {row_num}: expected {len(header)} fields, got {len(row)}")
            values = {}
            for col, cell in zip(header, row):
                kind = int if col in CSV_BASE_COLUMNS else float
                try:
                    values[col] = kind(cell)
                except ValueError:
                    raise ValueError(
                        f"{path}: row {row_num}, column {col!r}: could not parse {cell!r}"
                    ) from None
            features = np.array([values[c] for c in feature_cols])
            samples.append(Sample(id=values["id"], task_id=values["task"],
                                  label=values["label"], features=features))
    return samples, len(feature_cols)


def _load_csv_stream(spec: StreamSpec) -> Stream:
    train, dim = _parse_csv_samples(spec.train_csv)
    test, test_dim = _parse_csv_samples(spec.test_csv)
    if dim != test_dim:
        raise ValueError(f"train file has {dim} features but test file has {test_dim}")
    task_ids = sorted({s.task_id for s in train})
    if len(task_ids) < 2:
        raise ValueError("a stream needs at least 2 tasks")
    num_classes = max(s.label for s in train + test) + 1
    tasks = []
    for t in task_ids:
        t_train = tuple(s for s in train if s.task_id == t)
        t_test = tuple(s for s in test if s.task_id == t)
        if not t_test:
            raise ValueError(f"test file has no rows for task {t}")
        classes = tuple(sorted({s.label for s in t_train}))
        tasks.append(TaskData(t, t_train, t_test, classes))
    return Stream(tuple(tasks), spec.batch_size, dim, num_classes)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class AccuracyMatrix:
    """Lower-triangular grid: entry (i, j) is accuracy on task j after task i."""

    values: np.ndarray

    @classmethod
    def empty(cls, num_tasks: int) -> "AccuracyMatrix":
        return cls(np.full((num_tasks, num_tasks), np.nan))

    @property
    def num_tasks(self) -> int:
        return self.values.shape[0]

    def set(self, after_task: int, on_task: int, value: float):
        if on_task > after_task:
            raise ValueError("cannot evaluate a task before it is trained")
        if not 0.0 <= value <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")
        self.values[after_task, on_task] = value


def acc_bwt(matrix: AccuracyMatrix):
    """Average final accuracy and average backward transfer.

    ACC averages the last row; BWT averages the drop from each task's
    just-trained accuracy to its final accuracy.
    """
    T = matrix.num_tasks
    if T < 2:
        raise ValueError("backward transfer is undefined for fewer than 2 tasks")
    R = matrix.values
    for i in range(T):
        if np.any(np.isnan(R[i, :i + 1])):
            raise ValueError(f"accuracy matrix row {i} is not fully populated")
    acc = float(R[T - 1, :].mean())
    bwt = float(np.mean([R[T - 1, i] - R[i, i] for i in range(T - 1)]))
    return acc, bwt


def kendall_tau(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """Kendall rank correlation over all pairs, tied pairs counting zero.

    tau = (concordant - discordant) / C(n, 2); pairs tied in either list
    contribute to the denominator but not the numerator.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"score lists differ in length: {a.shape[0]} vs {b.shape[0]}")
    n = a.shape[0]
    if n < 2:
        raise ValueError("rank correlation needs at least 2 scores")
    sign_a = np.sign(a[:, None] - a[None, :])
    sign_b = np.sign(b[:, None] - b[None, :])
    upper = np.triu_indices(n, k=1)
    return float((sign_a[upper] * sign_b[upper]).sum() / (n * (n - 1) / 2))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def loo_retrain_delta(model: ModelSpec, coreset: Sequence[Sample],
                      test_set: Sequence[Sample], z: Sample,
                      fit_cfg: FitConfig) -> float:
    """Exact effect of dropping ``z``: refit without it, return the change
    in summed test loss. This is the expensive ground truth that influence
    scores approximate."""
    coreset = list(coreset)
    if len(coreset) < 2:
        raise ValueError("leave-one-out needs a coreset of at least 2 samples")
    if all(s.id != z.id for s in coreset):
        raise ValueError(f"sample {z.id} is not in the coreset")
    base_params = models.fit(model, coreset, fit_cfg)
    rest = [s for s in coreset if s.id != z.id]
    new_params = models.fit(model, rest, fit_cfg, init=base_params)
    old_loss = models.loss_sum(model, base_params, test_set)
    new_loss = models.loss_sum(model, new_params, test_set)
    return new_loss - old_loss


def finite_eps_second_order(ctx: InfluenceContext, z: Sample, zp: Sample,
                            case: SecondOrderCase, eps: float) -> float:
    """Finite-perturbation probe of the second-order influence.

    Evaluates the perturbed score of ``zp`` after upweighting ``z`` by
    ``eps``, with dense inverses throughout, and returns the difference
    quotient against the unperturbed score. In the EXCLUDED case the
    quotient is exactly linear in ``eps``; in the JOINT case the perturbed
    Hessian makes it converge at rate O(eps).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = ctx.dim
    if p > DENSE_ORACLE_GUARD:
        raise ValueError(f"dense oracle is guarded to {DENSE_ORACLE_GUARD} parameters, got {p}")
    H = ctx.hessian.dense(damped=True)
    g_sum = ctx.grad_sum
    g_z = ctx.grad_of(z)
    g_zp = ctx.grad_of(zp)
    base = float(-(g_sum @ np.linalg.solve(H, g_zp)))
    if case is SecondOrderCase.EXCLUDED:
        H_pert = H
    else:
        H_pert = H + eps * models.dense_hessian(ctx.model, ctx.params, [z])
    try:
        q = np.linalg.solve(H_pert, g_zp)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"perturbed Hessian is singular at eps={eps}: {exc}") from exc
    perturbed = float(-((g_sum + eps * g_z) @ q))
    return (perturbed - base) / eps


# ---------------------------------------------------------------------------
# the continual-learning loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleConfig:
    epsilon: float = 1e-4
    buffer_multiplier: int = 4
    refit: FitConfig = field(default_factory=lambda: FitConfig(method="newton"))
    min_overlap: int = TAU_MIN_OVERLAP

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.buffer_multiplier < 1:
            raise ValueError("buffer_multiplier must be at least 1")


@dataclass
class TauPoint:
    step: int
    task: int
    tau: Optional[float]
    buffer_size: int


@dataclass
class RunReport:
    seed: int
    selector: str
    acc_matrix: AccuracyMatrix
    acc: float
    bwt: float
    tau_series: list
    buffer_trace: list                    # (step, sorted kept ids)
    config: dict

    @property
    def mean_tau(self) -> Optional[float]:
        taus = [p.tau for p in self.tau_series if p.tau is not None]
        return float(np.mean(taus)) if taus else None

    def to_json_dict(self) -> dict:
        R = self.acc_matrix.values
        grid = [[None if np.isnan(R[i, j]) else float(R[i, j]) for j in range(R.shape[1])]
                for i in range(R.shape[0])]
        return {
            "schema": "coresel-report-v1",
            "seed": self.seed,
            "selector": self.selector,
            "config": self.config,
            "acc": self.acc,
            "bwt": self.bwt,
            "mean_tau": self.mean_tau,
            "acc_matrix": grid,
            "tau_series": [{"step": p.step, "task": p.task, "tau": p.tau,
                            "buffer_size": p.buffer_size} for p in self.tau_series],
            "buffer_trace": [{"step": step, "kept_ids": list(ids)}
                             for step, ids in self.buffer_trace],
        }


def _reweighted_candidates(buffer_samples, batch, constant):
    """Buffer plus batch with the batch reweighted to balance cohort mass.

    The default constant |buffer| / |batch| gives both cohorts equal total
    weight in the outer objective; with an empty buffer there is nothing to
    balance and the batch stays at weight 1. Reweighted copies exist only
    for the selection round; the buffer always stores original weights.
    """
    if constant is None:
        constant = len(buffer_samples) / len(batch) if buffer_samples else 1.0
    if constant <= 0:
        raise ValueError("reweight constant must be positive")
    reweighted = [replace(s, weight=s.weight * constant) for s in batch]
    return list(buffer_samples) + reweighted


def _tau_checkpoint(model, params, candidates, raw_by_id, method_ctx,
                    oracle_buffer, min_overlap):
    """Rank agreement between method and unbiased influence estimates.

    Both estimates score the same raw samples through the same damped
    Hessian (the one over the method's candidate pool, the set the model
    would be trained on); they differ only in the outer gradient sum, the
    method's candidate pool versus the oracle reservoir. That isolates
    exactly the pool bias the reservoir is meant to expose. Returns None
    when the id overlap is too small to rank.
    """
    oracle_ids = {s.id for s in oracle_buffer.samples}
    overlap = [s.id for s in candidates if s.id in oracle_ids]
    if len(overlap) < min_overlap:
        return None
    G = models.grad_matrix(model, params, [raw_by_id[i] for i in overlap])
    oracle_gsum = models.grad_sum(model, params, oracle_buffer.samples)
    oracle_solve = method_ctx.solve(oracle_gsum)
    method_scores = -(G @ method_ctx.ihvp)
    oracle_scores = -(G @ oracle_solve)
    return kendall_tau(method_scores, oracle_scores)


def run_continual(stream: Stream, model: ModelSpec, selector: SelectorKind,
                  criterion: CriterionConfig, fit_cfg: FitConfig,
                  oracle: Optional[OracleConfig] = None, seed: int = 0, *,
                  reweight_constant: Optional[float] = None,
                  refit_at_selection: bool = False,
                  damping: float = DEFAULT_DAMPING,
                  cg: Optional[CgConfig] = None,
                  config_echo: Optional[dict] = None) -> RunReport:
    """Train on the task stream while maintaining the replay buffer.

    Each SGD step descends the summed loss of the current batch plus a
    replay batch drawn uniformly from the buffer. During the last epoch of
    each task the selector updates the buffer after every batch; with an
    oracle configured, a parallel reservoir of ``buffer_multiplier *
    budget`` capacity ingests the same stream and a Kendall-tau agreement
    point is logged per selection step. After each task the model is
    evaluated on all seen tasks' test splits.

    ``refit_at_selection=True`` fits the candidate set to optimality before
    scoring (the regime the influence formulas assume); the default scores
    at the current SGD parameters. Any sub-operation failure is re-raised
    with the task/epoch/batch position prepended.
    """
    if model.kind != "logistic":
        raise ValueError("the continual loop drives classification models only")
    if criterion.budget > stream.total_train_size():
        raise ValueError("buffer capacity exceeds the total stream size")

    init_rng = named_rng(seed, "model_init")
    replay_rng = named_rng(seed, "replay")
    method_res_rng = named_rng(seed, "method_reservoir")
    oracle_res_rng = named_rng(seed, "oracle_reservoir")

    params = Params(init_rng.normal(scale=0.01, size=model.param_dim))
    buffer = ReplayBuffer.empty(criterion.budget)
    method_seen = 0
    oracle_buffer = None
    oracle_seen = 0
    if oracle is not None:
        oracle_buffer = ReplayBuffer.empty(oracle.buffer_multiplier * criterion.budget)

    num_tasks = len(stream.tasks)
    matrix = AccuracyMatrix.empty(num_tasks)
    tau_series: list = []
    buffer_trace: list = []
    step = 0

    for ti in range(num_tasks):
        batches = stream.batches(ti)
        for epoch in range(1, fit_cfg.epochs + 1):
            last_epoch = epoch == fit_cfg.epochs
            for bi, batch in enumerate(batches):
                where = f"step {step} (task {ti}, epoch {epoch}, batch {bi})"
                try:
                    replay = _draw_replay(buffer, stream.batch_size, replay_rng)
                    g = models.grad_sum(model, params, list(batch) + replay)
                    params = Params(params.theta - fit_cfg.learning_rate * g)
                    if last_epoch:
                        buffer, method_seen, oracle_buffer, oracle_seen, tau = _selection_step(
                            stream, model, params, buffer, batch, selector, criterion,
                            oracle, oracle_buffer, method_res_rng, oracle_res_rng,
                            reweight_constant, refit_at_selection, damping, cg,
                            method_seen, oracle_seen)
                        if len(buffer) > criterion.budget:
                            raise RuntimeError("selector violated the buffer capacity")
                        tau_series.append(TauPoint(step, ti, tau, len(buffer)))
                        buffer_trace.append((step, tuple(sorted(buffer.ids()))))
                        step += 1
                except Exception as exc:
                    raise RuntimeError(f"{where}: {exc}") from exc
        for tj in range(ti + 1):
            matrix.set(ti, tj, models.accuracy(model, params, stream.tasks[tj].test))

    acc, bwt = acc_bwt(matrix) if num_tasks >= 2 else (float(matrix.values[0, 0]), 0.0)
    echo = config_echo if config_echo is not None else _default_echo(
        stream, model, selector, criterion, fit_cfg, oracle, seed,
        reweight_constant, refit_at_selection, damping)
    return RunReport(seed=seed, selector=selector.value, acc_matrix=matrix,
                     acc=acc, bwt=bwt, tau_series=tau_series,
                     buffer_trace=buffer_trace, config=echo)


def _draw_replay(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator):
    if len(buffer) == 0:
        return []
    k = min(batch_size, len(buffer))
    idx = rng.choice(len(buffer), size=k, replace=False)
    return [buffer.samples[i] for i in sorted(idx)]


def _selection_step(stream, model, params, buffer, batch, selector, criterion,
                    oracle, oracle_buffer, method_res_rng, oracle_res_rng,
                    reweight_constant, refit_at_selection, damping, cg,
                    method_seen, oracle_seen):
    """One buffer refresh: update the oracle reservoir, log tau, select."""
    batch = list(batch)
    raw_by_id = {s.id: s for s in list(buffer.samples) + batch}
    if oracle_buffer is not None:
        oracle_buffer, oracle_seen = select_reservoir(
            oracle_buffer, batch, oracle_seen, oracle_res_rng)

    tau = None
    if selector in GREEDY_KINDS or oracle_buffer is not None:
        candidates = _reweighted_candidates(buffer.samples, batch, reweight_constant)
        sel_params = params
        if refit_at_selection:
            refit_cfg = oracle.refit if oracle is not None else FitConfig(method="newton")
            sel_params = models.fit(model, candidates, refit_cfg, init=params)
        ctx = build_context(model, sel_params, candidates, candidates,
                            cg=cg, damping=damping)
        if oracle_buffer is not None and len(oracle_buffer) > 0:
            tau = _tau_checkpoint(model, sel_params, candidates, raw_by_id, ctx,
                                  oracle_buffer, oracle.min_overlap)
        if selector in GREEDY_KINDS:
            selected, _ = select_greedy(ctx, criterion, selector)
            kept = [raw_by_id[i] for i in selected.ids()]
            buffer = ReplayBuffer(kept, criterion.budget)

    if selector is SelectorKind.RESERVOIR:
        buffer, method_seen = select_reservoir(buffer, batch, method_seen, method_res_rng)
    elif selector is SelectorKind.RING:
        buffer = select_ring(buffer, batch, stream.num_classes)

    return buffer, method_seen, oracle_buffer, oracle_seen, tau


def _default_echo(stream, model, selector, criterion, fit_cfg, oracle, seed,
                  reweight_constant, refit_at_selection, damping) -> dict:
    return {
        "stream": {"tasks": len(stream.tasks), "batch_size": stream.batch_size,
                   "dim": stream.dim, "num_classes": stream.num_classes},
        "model": {"kind": model.kind, "dim": model.dim,
                  "num_classes": model.num_classes, "l2_strength": model.l2_strength},
        "selector": selector.value,
        "criterion": {"budget": criterion.budget, "mu": criterion.mu, "nu": criterion.nu},
        "fit": {"learning_rate": fit_cfg.learning_rate, "epochs": fit_cfg.epochs,
                "batch_size": fit_cfg.batch_size},
        "oracle": None if oracle is None else {
            "epsilon": oracle.epsilon, "buffer_multiplier": oracle.buffer_multiplier},
        "seed": seed,
        "reweight_constant": reweight_constant,
        "refit_at_selection": refit_at_selection,
        "damping": damping,
    }
