"""Class-incremental protocol: sessions, missing views, training, inference, evaluation.

Freeze schedule
---------------
Session 1 trains the view encoders, its task prompt and head, the prompt
bank and the view weights. Later sessions train only their own task prompt and
head. The backbone never trains. Two switches widen this:
``train_ept_every_session`` keeps the bank and view weights trainable, and
``train_encoders_every_session`` does the same for the encoders. Either one
lets outputs of earlier tasks drift.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import ept
from .config import ExperimentConfig
from .data import TEST, TRAIN, VAL, Dataset, gen_data, load_dataset, random_splits
from .errors import ConfigError, ValidationError
from .metrics import THRESHOLD, f1_scores, mean_average_precision
from .model import Batch, PromptModel, backward_step, loss_only
from .numcore import Rng, adam_step

log = logging.getLogger(__name__)

EVAL_CHUNK = 512


# Sessions --------------------------------------------------------------------

@dataclass
class SessionPlan:
    class_sets: list[list[int]]
    C_base: int
    C_inc: int

    @property
    def T(self) -> int:
        return len(self.class_sets)

    @property
    def n_classes(self) -> int:
        return sum(len(c) for c in self.class_sets)

    def cumulative(self, t: int) -> list[int]:
        """Class ids of sessions ``0..t`` (0-based) in session order."""
        return [c for cs in self.class_sets[: t + 1] for c in cs]

    def check(self) -> None:
        flat = self.cumulative(self.T - 1)
        if len(set(flat)) != len(flat) or sorted(flat) != list(range(len(flat))):
            raise ValidationError("class sets must be disjoint and cover every class")


def default_base(C: int, T: int) -> int:
    """Base-session size when none is configured: equal increments of ``C // T``."""
    return C if T == 1 else C - (T - 1) * (C // T)


def partition_classes(C: int, C_base: int, T: int, rng: np.random.Generator) -> SessionPlan:
    if T < 1 or C_base < 1 or C_base > C:
        raise ConfigError(f"need T >= 1 and 1 <= C_base <= C (got C={C}, C_base={C_base}, T={T})")
    if T == 1:
        if C_base != C:
            raise ConfigError(f"a single session must hold all {C} classes, not C_base={C_base}")
        C_inc = 0
    else:
        rem = (C - C_base) % (T - 1)
        if rem:
            raise ConfigError(f"(C - C_base) = {C - C_base} is not divisible by T - 1 = {T - 1} (remainder {rem})")
        C_inc = (C - C_base) // (T - 1)
        if C_inc == 0:
            raise ConfigError("incremental sessions would receive no classes")
    order = [int(c) for c in rng.permutation(C)]
    sets = [order[:C_base]] + [order[C_base + i * C_inc: C_base + (i + 1) * C_inc] for i in range(T - 1)]
    plan = SessionPlan(sets, C_base, C_inc)
    plan.check()
    return plan


def assign_samples(labels: np.ndarray, plan: SessionPlan) -> list[np.ndarray]:
    """Row indices per session: a sample joins every session whose classes it carries."""
    labels = np.asarray(labels)
    if labels.shape[1] != plan.n_classes:
        raise ConfigError(f"labels have {labels.shape[1]} classes, plan covers {plan.n_classes}")
    out = [np.flatnonzero(labels[:, cs].any(axis=1)) for cs in plan.class_sets]
    excluded = int((~labels.astype(bool).any(axis=1)).sum())
    if excluded:
        log.warning("excluded %d samples with no positive label in any session", excluded)
    return out


# Missing views ---------------------------------------------------------------

def simulate_missing(ds: Dataset, p: float, rng: np.random.Generator) -> Dataset:
    """Drop exactly ``round(p * N)`` instances from every view.

    Views are processed in order. For each view a uniform permutation of
    instances is walked. An instance is dropped unless that would remove its
    last observed view, in which case the next instance in the permutation
    replaces it. Missing feature rows are zeroed.
    """
    if not 0 <= p < 1:
        raise ConfigError(f"missing rate {p} must lie in [0, 1)")
    n, N = ds.n_views, ds.n_samples
    if n * (1 - p) < 1:
        raise ConfigError(f"missing rate {p} infeasible for {n} views: cannot keep one view per instance")
    if not np.all(ds.indicators == 1):
        raise ValidationError("missing-view simulation expects complete indicators")
    target = int(round(p * N))
    ind = np.ones((N, n), dtype=np.uint8)
    alive = np.full(N, n)
    for v in range(n):
        dropped = 0
        for i in rng.permutation(N):
            if dropped == target:
                break
            if alive[i] > 1:
                ind[i, v] = 0
                alive[i] -= 1
                dropped += 1
        if dropped < target:
            raise ConfigError(f"missing rate {p}: view {v} could only drop {dropped} of {target} instances")
    views = [np.where(ind[:, v:v + 1] == 1, x, 0.0) for v, x in enumerate(ds.views)]
    return Dataset(views, ind, ds.labels.copy(), None if ds.splits is None else ds.splits.copy())


def zero_impute(ds: Dataset) -> Dataset:
    views = [np.where(ds.indicators[:, v:v + 1] == 1, x, 0.0) for v, x in enumerate(ds.views)]
    return Dataset(views, ds.indicators.copy(), ds.labels.copy(), ds.splits)


# Training --------------------------------------------------------------------

def make_batch(ds: Dataset, idx, classes=None) -> Batch:
    idx = np.asarray(idx)
    labels = None if classes is None else ds.labels[np.ix_(idx, classes)].astype(np.float64)
    return Batch([v[idx] for v in ds.views], ds.indicators[idx], labels)


def apply_freeze_schedule(model: PromptModel, t: int, cfg: ExperimentConfig) -> list:
    """Set ``frozen`` flags for session ``t`` (0-based); returns the trainable params."""
    named = model.named_params()
    for p in named.values():
        p.frozen = True
    live = [f"heads.{t}.weight", f"heads.{t}.bias"]
    if model.config.use_prompts:
        live.append(f"prompts.{t}")
    if t == 0 or cfg.train_encoders_every_session:
        live += [k for k in named if k.startswith("encoders.")]
    if model.config.use_prompts and (t == 0 or cfg.train_ept_every_session):
        live += [k for k in named if k.startswith("bank.")] + ["dcl.w"]
    for k in live:
        named[k].frozen = False
    return [named[k] for k in live]


@dataclass
class EpochLog:
    epoch: int
    bce: float
    dcl: float
    total: float
    val_map: float | None


@dataclass
class TrainLog:
    session: int
    n_samples: int
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int | None = None


def _session_map(model, ds, idx, t, classes) -> float | None:
    if len(idx) == 0:
        return None
    probs = np.concatenate([model.forward(make_batch(ds, idx[s:s + EVAL_CHUNK]), t).probs
                            for s in range(0, len(idx), EVAL_CHUNK)])
    value, _ = mean_average_precision(probs, ds.labels[np.ix_(idx, classes)])
    return None if np.isnan(value) else value


def train_session(model: PromptModel, ds: Dataset, train_idx, t: int, classes, cfg: ExperimentConfig,
                  rng: np.random.Generator, val_idx=None) -> TrainLog:
    """Minibatch Adam on ``BCE + lam * DCL`` for session ``t`` (0-based).

    When ``val_idx`` is non-empty, training stops after ``patience`` epochs
    without validation-mAP improvement and the best epoch's parameters are
    restored.
    """
    train_idx = np.asarray(train_idx)
    if train_idx.size == 0:
        raise ValidationError(f"session {t + 1} has no training samples")
    if model.n_tasks < t:
        raise ValidationError(f"sessions before {t + 1} are not trained")
    if model.n_tasks == t:
        model.add_task(len(classes), rng)
    params = apply_freeze_schedule(model, t, cfg)
    names = {id(p): k for k, p in model.named_params().items()}
    for p in params:
        p.reset_optimizer()
    val_idx = np.asarray([] if val_idx is None else val_idx, dtype=np.int64)

    tlog = TrainLog(t + 1, int(train_idx.size))
    best, best_state, stale, step = -np.inf, None, 0, 0
    for epoch in range(cfg.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        sums = np.zeros(3)
        for s in range(0, order.size, cfg.batch_size):
            bidx = order[s:s + cfg.batch_size]
            res = backward_step(model, make_batch(ds, bidx, classes), t, cfg.lam, cfg.alpha,
                                cfg.weighted_positive_term, cfg.dcl_pattern_subsample, rng)
            for p in params:
                p.grad = res.grads.get(names[id(p)], np.zeros_like(p.value))
            step += 1
            adam_step(params, cfg.lr, step=step)
            sums += np.array([res.bce, res.dcl, res.total]) * bidx.size
        sums /= order.size
        vmap = _session_map(model, ds, val_idx, t, classes)
        tlog.epochs.append(EpochLog(epoch + 1, *map(float, sums), vmap))
        if vmap is None:
            continue
        if vmap > best:
            best, stale, tlog.best_epoch = vmap, 0, epoch + 1
            best_state = [p.value.copy() for p in params]
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is not None:
        for p, v in zip(params, best_state):
            p.value[...] = v
    for p in params:
        p.frozen = True
    return tlog


def session_loss(model, ds, idx, t, classes, cfg) -> float:
    return loss_only(model, make_batch(ds, idx, classes), t, cfg.lam, cfg.alpha, cfg.weighted_positive_term)


# Inference and evaluation ----------------------------------------------------

def infer(model: PromptModel, batch: Batch, through: int | None = None):
    """Concatenate every task pathway's probabilities in session order.

    Returns ``(probs, preds)`` with ``preds = probs >= 0.5``.
    """
    last = model.n_tasks - 1 if through is None else through
    probs = np.concatenate([model.forward(batch, tau).probs for tau in range(last + 1)], axis=1)
    return probs, probs >= THRESHOLD


@dataclass
class SessionMetrics:
    session: int
    n_classes: int
    mAP: float
    CF1: float
    OF1: float
    skipped_classes: int
    chance_mAP: float


def evaluate(model: PromptModel, ds: Dataset, test_idx, plan: SessionPlan, t: int) -> SessionMetrics:
    """Scores over the cumulative classes of sessions ``0..t`` on the test rows."""
    test_idx = np.asarray(test_idx)
    if test_idx.size == 0:
        raise ValidationError("empty test set")
    classes = plan.cumulative(t)
    probs = np.concatenate([infer(model, make_batch(ds, test_idx[s:s + EVAL_CHUNK]), t)[0]
                            for s in range(0, test_idx.size, EVAL_CHUNK)])
    labels = ds.labels[np.ix_(test_idx, classes)]
    mAP, skipped = mean_average_precision(probs, labels)
    if skipped:
        log.info("session %d: %d classes without test positives skipped", t + 1, skipped)
    cf1, of1 = f1_scores(probs, labels)
    prev = labels.mean(axis=0)
    chance = float(prev[prev > 0].mean()) if np.any(prev > 0) else float("nan")
    return SessionMetrics(t + 1, len(classes), mAP, cf1, of1, skipped, chance)


# Full experiment -------------------------------------------------------------

@dataclass
class Prepared:
    ds: Dataset
    plan: SessionPlan
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def prepare(cfg: ExperimentConfig, seed: int, ds: Dataset | None = None) -> Prepared:
    """Deterministically load/generate data, split, partition classes and drop views."""
    rng = Rng(seed)
    if ds is None:
        ds = load_dataset(cfg.data) if cfg.data is not None else gen_data(cfg.synthetic_spec(seed))
    if ds.splits is None:
        ds = ds.with_splits(random_splits(ds.n_samples, cfg.val_fraction, cfg.test_fraction, rng.stream("split")))
    C_base = cfg.C_base if cfg.C_base is not None else default_base(ds.n_classes, cfg.T)
    plan = partition_classes(ds.n_classes, C_base, cfg.T, rng.stream("partition"))
    ds = simulate_missing(ds, cfg.missing_rate, rng.stream("missing"))
    return Prepared(ds, plan, *(np.flatnonzero(ds.splits == s) for s in (TRAIN, VAL, TEST)))


def param_counts(model: PromptModel, cfg: ExperimentConfig) -> dict:
    n, R = model.config.n_views, max(ept.normalize_ranks(cfg.ranks, model.config.n_views))
    counts = {"bank_actual": int(sum(p.value.size for p in model.bank.named_params().values()))}
    for kind in ("EPT", "MAP", "MSP", "EPEP"):
        for pc in ept.param_count(kind, n, cfg.d, cfg.k, R, R, ranks=cfg.ranks):
            counts[pc.kind] = pc.count
    counts["trainable_total"] = int(sum(p.value.size for k, p in model.named_params().items()
                                        if not k.startswith("backbone.")))
    return counts


@dataclass
class RunResult:
    report: dict
    model: PromptModel
    prepared: Prepared
    logs: list[TrainLog]
    timing: dict


def run_experiment(cfg: ExperimentConfig, seed: int, ds: Dataset | None = None) -> RunResult:
    t0 = time.perf_counter()
    prep = prepare(cfg, seed, ds)
    rng = Rng(seed)
    data = prep.ds
    model = PromptModel(cfg.model_config(data.view_dims), rng.stream("init"))
    train_sets = assign_samples(data.labels[prep.train], prep.plan)
    val_sets = assign_samples(data.labels[prep.val], prep.plan)
    sessions, logs, timing = [], [], {"sessions_s": []}
    for t in range(prep.plan.T):
        ts = time.perf_counter()
        classes = prep.plan.class_sets[t]
        tlog = train_session(model, data, prep.train[train_sets[t]], t, classes, cfg,
                             rng.stream("batches", t), prep.val[val_sets[t]])
        m = evaluate(model, data, prep.test, prep.plan, t)
        logs.append(tlog)
        timing["sessions_s"].append(time.perf_counter() - ts)
        sessions.append({
            "session": m.session, "new_classes": len(classes), "cumulative_classes": m.n_classes,
            "train_samples": tlog.n_samples, "epochs_run": len(tlog.epochs), "best_epoch": tlog.best_epoch,
            "final_train_loss": tlog.epochs[-1].total,
            "mAP": m.mAP, "CF1": m.CF1, "OF1": m.OF1, "chance_mAP": m.chance_mAP,
            "skipped_classes": m.skipped_classes,
        })
    maps = [s["mAP"] for s in sessions]
    report = {
        "seed": int(seed),
        "config_hash": cfg.digest(),
        "plan": {"T": prep.plan.T, "C_base": prep.plan.C_base, "C_inc": prep.plan.C_inc,
                 "class_sets": prep.plan.class_sets},
        "data": {
            "n_samples": data.n_samples, "n_views": data.n_views, "n_classes": data.n_classes,
            "train": int(prep.train.size), "val": int(prep.val.size), "test": int(prep.test.size),
            "missing_rate": cfg.missing_rate,
            "missing_per_view": [int(x) for x in (data.indicators == 0).sum(axis=0)],
            "label_density": float(data.labels.sum(axis=1).mean()),
        },
        "sessions": sessions,
        "average_mAP": float(np.mean(maps)),
        "last_mAP": maps[-1],
        "param_counts": param_counts(model, cfg),
    }
    timing["total_s"] = time.perf_counter() - t0
    return RunResult(report, model, prep, logs, timing)


def summarize(reports: list[dict]) -> dict:
    """Mean and (population) standard deviation across seeds."""
    out = {"seeds": [r["seed"] for r in reports]}
    for key in ("average_mAP", "last_mAP"):
        vals = np.array([r[key] for r in reports])
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out
