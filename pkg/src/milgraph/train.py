"""Loss, Adam, the training loop, cross-validation, and the metric suite.

Training follows a fixed protocol: one bag per optimizer step, shuffled
epochs, and the parameter snapshot with the smallest mean validation
loss wins (earliest epoch on ties). Evaluation is seeded stratified
k-fold cross-validation repeated several times; fold workers are
independent and may run in parallel without changing the results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from .bags import Bag, ContractError, GraphConfig
from .data import apply_standardizer, fit_standardizer
from .linalg import Vector, new_rng
from .model import (Gradients, ModelConfig, ModelParams, backward, forward,
                    init_params)


class TrainingError(RuntimeError):
    """Numerical failure during optimization (NaN/Inf gradients)."""


class StratificationError(ValueError):
    """A split cannot be stratified (some portion holds a single class)."""


PROB_CLAMP = 1e-12


@dataclass
class TrainConfig:
    max_epochs: int = 200
    batch_size: int = 1            # protocol is one bag per step
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1
    folds: int = 10
    repeats: int = 5
    standardize: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0.0 < self.val_fraction < 0.5:
            raise ValueError("val_fraction must be in (0, 0.5)")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        tensors = params.tensors()
        return cls(m={k: np.zeros_like(a) for k, a in tensors.items()},
                   v={k: np.zeros_like(a) for k, a in tensors.items()})


def bce_loss(prob: float, label: int) -> float:
    p = min(max(prob, PROB_CLAMP), 1.0 - PROB_CLAMP)
    return -(math.log(p) if label == 1 else math.log(1.0 - p))


def ce_loss(probs: Vector, label: int) -> float:
    p = min(max(float(probs[label]), PROB_CLAMP), 1.0 - PROB_CLAMP)
    return -math.log(p)


def adam_step(params: ModelParams, grads: Gradients, state: AdamState,
              cfg: TrainConfig) -> None:
    """One Adam update in place. Weight decay is decoupled (applied first)."""
    state.step += 1
    t = state.step
    p_tensors = params.tensors()
    g_tensors = grads.tensors()
    for name, p in p_tensors.items():
        g = g_tensors[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
        if cfg.weight_decay:
            p -= cfg.learning_rate * cfg.weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


def _loss_of(trace_probs: Vector, label: int, num_classes: int) -> float:
    if num_classes == 2:
        return bce_loss(float(trace_probs[1]), label)
    return ce_loss(trace_probs, label)


def _check_dims(bags: Sequence[Bag], model_cfg: ModelConfig) -> None:
    for bag in bags:
        if bag.feature_dim != model_cfg.input_dim:
            raise ContractError(
                f"bag {bag.id!r} has dim {bag.feature_dim}, "
                f"model expects {model_cfg.input_dim}")


def train_one(train_bags: Sequence[Bag], val_bags: Sequence[Bag],
              model_cfg: ModelConfig, train_cfg: TrainConfig,
              graph_cfg: GraphConfig,
              rng: Optional[np.random.Generator] = None
              ) -> Tuple[ModelParams, List[dict]]:
    """Train on one split; returns the best-validation-loss snapshot + history."""
    if not train_bags or not val_bags:
        raise ContractError("train and validation splits must both be non-empty")
    _check_dims(list(train_bags) + list(val_bags), model_cfg)

    rng = rng if rng is not None else new_rng(train_cfg.seed)
    train_graphs = [graph_cfg.build(b) for b in train_bags]
    val_graphs = [graph_cfg.build(b) for b in val_bags]

    params = init_params(model_cfg, rng)
    state = AdamState.for_params(params)
    nc = model_cfg.num_classes

    best_params = params.copy()
    best_val = math.inf
    history: List[dict] = []
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(len(train_bags))
        train_loss = 0.0
        for idx in order:
            bag, graph = train_bags[idx], train_graphs[idx]
            trace = forward(bag, graph, params, model_cfg)
            train_loss += _loss_of(trace.probs, bag.label, nc)
            grads = backward(trace, bag, graph, params, model_cfg, bag.label)
            adam_step(params, grads, state, train_cfg)
        val_loss = 0.0
        for bag, graph in zip(val_bags, val_graphs):
            trace = forward(bag, graph, params, model_cfg)
            val_loss += _loss_of(trace.probs, bag.label, nc)
        val_loss /= len(val_bags)
        history.append({"epoch": epoch,
                        "train_loss": train_loss / len(train_bags),
                        "val_loss": val_loss})
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
    return best_params, history


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    precision: float
    recall: float
    f_score: float
    auc: Optional[float]    # None when only one class is present

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f_score": self.f_score, "auc": self.auc}


def metrics(predictions: Sequence[Tuple[float, int]]) -> MetricSet:
    """Binary metrics at threshold 0.5; AUC by the rank (Mann-Whitney) statistic."""
    if not predictions:
        raise ValueError("no predictions")
    probs = np.array([p for p, _ in predictions])
    labels = np.array([y for _, y in predictions])
    preds = (probs >= 0.5).astype(int)

    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    accuracy = float(np.mean(preds == labels))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f_score = (2 * precision * recall / (precision + recall)
               if precision + recall > 0 else 0.0)

    npos = int(np.sum(labels == 1))
    nneg = labels.size - npos
    if npos == 0 or nneg == 0:
        auc = None
    else:
        # average ranks give ties 0.5 credit, matching trapezoidal ROC area
        order = np.argsort(probs, kind="mergesort")
        ranks = np.empty(probs.size)
        sorted_probs = probs[order]
        i = 0
        rank_pos = 1.0
        while i < probs.size:
            j = i
            while j + 1 < probs.size and sorted_probs[j + 1] == sorted_probs[i]:
                j += 1
            ranks[order[i:j + 1]] = 0.5 * ((i + 1) + (j + 1))
            i = j + 1
        auc = float((ranks[labels == 1].sum() - npos * (npos + 1) / 2.0)
                    / (npos * nneg))
    return MetricSet(accuracy, precision, recall, f_score, auc)


@dataclass(frozen=True)
class FoldReport:
    fold: int
    repeat: int
    accuracy: float
    precision: float
    recall: float
    f_score: float
    auc: Optional[float]
    best_val_loss: float
    epochs_run: int

    def to_dict(self) -> dict:
        return {"fold": self.fold, "repeat": self.repeat,
                "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f_score": self.f_score, "auc": self.auc,
                "best_val_loss": self.best_val_loss, "epochs_run": self.epochs_run}


def derived_seed(*keys: int) -> int:
    """Stable child seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def stratified_folds(labels: Sequence[int], folds: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Fold index per item; class-stratified, overall sizes differ by <= 1."""
    labels = np.asarray(labels)
    if folds > labels.size:
        raise ValueError(f"folds ({folds}) exceed number of items ({labels.size})")
    assign = np.full(labels.size, -1, dtype=int)
    fold_sizes = np.zeros(folds, dtype=int)
    for cls in sorted(set(labels.tolist())):
        idx = np.nonzero(labels == cls)[0]
        idx = idx[rng.permutation(idx.size)]
        base, rem = divmod(idx.size, folds)
        counts = np.full(folds, base, dtype=int)
        if rem:
            # extras go to the currently smallest folds (deterministic tie-break)
            order = np.lexsort((np.arange(folds), fold_sizes))
            counts[order[:rem]] += 1
        start = 0
        for f in range(folds):
            assign[idx[start:start + counts[f]]] = f
            start += counts[f]
        fold_sizes += counts
    return assign


def _stratified_val_split(bags: List[Bag], val_fraction: float,
                          rng: np.random.Generator
                          ) -> Tuple[List[Bag], List[Bag]]:
    labels = np.array([b.label for b in bags])
    val_idx: List[int] = []
    for cls in sorted(set(labels.tolist())):
        idx = np.nonzero(labels == cls)[0]
        idx = idx[rng.permutation(idx.size)]
        take = min(max(1, int(round(val_fraction * idx.size))), idx.size - 1)
        if take >= 1 and idx.size >= 2:
            val_idx.extend(idx[:take].tolist())
    if not val_idx:
        raise StratificationError("cannot carve a validation split")
    val_set = set(val_idx)
    train = [b for i, b in enumerate(bags) if i not in val_set]
    val = [b for i, b in enumerate(bags) if i in val_set]
    return train, val


def predict_probs(bags: Sequence[Bag], params: ModelParams,
                  model_cfg: ModelConfig, graph_cfg: GraphConfig
                  ) -> List[np.ndarray]:
    out = []
    for bag in bags:
        graph = graph_cfg.build(bag)
        out.append(forward(bag, graph, params, model_cfg).probs)
    return out


def _default_trainer(train_bags, val_bags, model_cfg, train_cfg, graph_cfg, rng):
    return train_one(train_bags, val_bags, model_cfg, train_cfg, graph_cfg, rng)


def _default_predictor(bags, params, model_cfg, graph_cfg):
    return [float(p[1]) for p in predict_probs(bags, params, model_cfg, graph_cfg)]


def _run_fold(bags: List[Bag], assign: np.ndarray, fold: int, repeat: int,
              model_cfg: ModelConfig, train_cfg: TrainConfig,
              graph_cfg: GraphConfig, trainer, predictor) -> FoldReport:
    test = [b for b, a in zip(bags, assign) if a == fold]
    pool = [b for b, a in zip(bags, assign) if a != fold]
    pool_labels = {b.label for b in pool}
    if len(pool_labels) < 2:
        raise StratificationError(
            f"fold {fold}: training portion holds a single class")

    val_rng = new_rng(derived_seed(train_cfg.seed, repeat, fold, 1))
    train_bags, val_bags = _stratified_val_split(pool, train_cfg.val_fraction, val_rng)

    if train_cfg.standardize:
        mean, std = fit_standardizer(train_bags)
        train_bags = apply_standardizer(train_bags, mean, std)
        val_bags = apply_standardizer(val_bags, mean, std)
        test = apply_standardizer(test, mean, std)

    train_rng = new_rng(derived_seed(train_cfg.seed, repeat, fold, 2))
    params, history = trainer(train_bags, val_bags, model_cfg, train_cfg,
                              graph_cfg, train_rng)
    probs = predictor(test, params, model_cfg, graph_cfg)
    mset = metrics(list(zip(probs, [b.label for b in test])))
    best_val = min(h["val_loss"] for h in history) if history else math.nan
    return FoldReport(
        fold=fold, repeat=repeat, accuracy=mset.accuracy,
        precision=mset.precision, recall=mset.recall, f_score=mset.f_score,
        auc=mset.auc, best_val_loss=best_val, epochs_run=len(history),
    )


def aggregate_reports(reports: Sequence[FoldReport],
                      repeats: int) -> dict:
    """Mean and standard error per metric, over all folds and per-repeat means."""
    def mean_stderr(values: List[float]) -> dict:
        arr = np.array(values)
        stderr = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
        return {"mean": float(arr.mean()), "stderr": stderr, "n": int(arr.size)}

    out: dict = {"per_fold": {}, "per_repeat_mean": {}}
    for name in ("accuracy", "precision", "recall", "f_score", "auc"):
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not values:
            continue
        out["per_fold"][name] = mean_stderr(values)
        repeat_means = []
        for rep in range(repeats):
            vals = [getattr(r, name) for r in reports
                    if r.repeat == rep and getattr(r, name) is not None]
            if vals:
                repeat_means.append(float(np.mean(vals)))
        out["per_repeat_mean"][name] = mean_stderr(repeat_means)
    return out


def cross_validate(bags: Sequence[Bag], model_cfg: ModelConfig,
                   train_cfg: TrainConfig, graph_cfg: GraphConfig,
                   trainer: Callable = _default_trainer,
                   predictor: Callable = _default_predictor
                   ) -> Tuple[List[FoldReport], dict]:
    """Seeded stratified k-fold CV repeated ``train_cfg.repeats`` times."""
    bags = list(bags)
    if train_cfg.folds > len(bags):
        raise ValueError(f"folds ({train_cfg.folds}) exceed bag count ({len(bags)})")
    _check_dims(bags, model_cfg)
    labels = [b.label for b in bags]

    tasks = []
    for repeat in range(train_cfg.repeats):
        fold_rng = new_rng(derived_seed(train_cfg.seed, repeat, 0, 0))
        assign = stratified_folds(labels, train_cfg.folds, fold_rng)
        for fold in range(train_cfg.folds):
            tasks.append((assign, fold, repeat))

    runner = Parallel(n_jobs=train_cfg.n_jobs)
    reports = runner(
        delayed(_run_fold)(bags, assign, fold, repeat, model_cfg, train_cfg,
                           graph_cfg, trainer, predictor)
        for assign, fold, repeat in tasks)
    reports = list(reports)
    return reports, aggregate_reports(reports, train_cfg.repeats)
