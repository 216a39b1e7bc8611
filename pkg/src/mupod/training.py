"""Minibatch training, random hyperparameter search and the baseline recipes."""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .batch import make_batch
from .data import Dataset, EnrolleeTimeMatrix
from .encoder import EncoderConfig
from .evaluation import MetricsReport, auc, confusion_metrics
from .models import ConcatLstmModel, Model, MupodModel, SingleTransformerModel
from .optim import make_optimizer
from .representation import DivergenceError, PretrainConfig, pretrain_encoder

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "train_loss", "val_loss", "val_auc")


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 64
    iterations: int = 1000
    l2: float = 1e-6
    seed: int = 0
    optimizer: str = "adam"
    eval_every: int = 50

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.iterations < 0 or self.eval_every < 1:
            raise ValueError(f"invalid training config {self}")


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    best_iteration: int

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.log:
            w.writerow({k: repr(float(row[k])) if k != "iteration" else row[k] for k in LOG_COLUMNS})
        return buf.getvalue()


def _loss_and_auc(model: Model, m: EnrolleeTimeMatrix) -> tuple[float, float]:
    p = model.predict_proba(m.patients)
    y = m.labels
    picked = np.where(y == 1, p, 1.0 - p)
    loss = float(-np.log(np.maximum(picked, ad.LOG_EPS)).mean())
    score = auc(p, y) if 0 < y.sum() < len(y) else float("nan")
    return loss, score


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in model.params().items()}


def _restore(model: Model, snap: dict[str, np.ndarray]) -> None:
    for k, t in model.params().items():
        t.data = snap[k].copy()


def train(model: Model, train_set: EnrolleeTimeMatrix, val_set: EnrolleeTimeMatrix, config: TrainConfig) -> TrainResult:
    """Minibatch descent with L2; returns the model at its best validation loss.

    Ties in validation loss keep the earlier iteration.
    """
    overlap = set(train_set.ids) & set(val_set.ids)
    if overlap:
        raise ValueError(f"train and validation share {len(overlap)} patients")
    params = model.trainable()
    history: list[dict] = []
    val_loss, val_auc = _loss_and_auc(model, val_set)
    history.append({"iteration": 0, "train_loss": float("nan"), "val_loss": val_loss, "val_auc": val_auc})
    best = (val_loss, 0, _snapshot(model))
    if config.iterations == 0 or not params:
        return TrainResult(model, history, 0)

    opt = make_optimizer(config.optimizer, params, config.lr, config.l2)
    rng = np.random.default_rng(config.seed)
    n = len(train_set)
    bs = min(config.batch_size, n)
    order, pos = rng.permutation(n), 0
    running = []
    for it in range(1, config.iterations + 1):
        if pos + bs > n:
            order, pos = rng.permutation(n), 0
        batch = make_batch([train_set.patients[i] for i in order[pos : pos + bs]])
        pos += bs
        opt.zero_grad()
        probs, _ = model.forward(batch)
        loss = ad.cross_entropy(probs, batch.labels)
        value = loss.item()
        if not np.isfinite(value):
            state = _snapshot(model)
            raise DivergenceError(f"loss became {value} at iteration {it}; lower the learning rate", state)
        ad.backward(loss)
        opt.step()
        running.append(value)
        if it % config.eval_every == 0 or it == config.iterations:
            val_loss, val_auc = _loss_and_auc(model, val_set)
            history.append(
                {"iteration": it, "train_loss": float(np.mean(running)), "val_loss": val_loss, "val_auc": val_auc}
            )
            running = []
            if val_loss < best[0]:
                best = (val_loss, it, _snapshot(model))
    _restore(model, best[2])
    return TrainResult(model, history, best[1])


# ---------------------------------------------------------------- search


@dataclass
class SearchGrid:
    lr: Sequence[float] = (1e-2, 1e-3, 1e-4)
    batch_size: Sequence[int] = (64, 256, 512)
    iterations_k: Sequence[int] = (10, 50, 100, 200)  # thousands
    l2: Sequence[float] = (1e-4, 1e-5, 1e-6)
    desk_factor: int = 100

    def iterations(self) -> list[int]:
        return [max(1, n * 1000 // self.desk_factor) for n in self.iterations_k]

    def sample(self, rng: np.random.Generator, base: TrainConfig) -> TrainConfig:
        pick = lambda xs: xs[int(rng.integers(0, len(xs)))]
        return replace(
            base,
            lr=float(pick(list(self.lr))),
            batch_size=int(pick(list(self.batch_size))),
            iterations=int(pick(self.iterations())),
            l2=float(pick(list(self.l2))),
        )

    def contains(self, c: TrainConfig) -> bool:
        return c.lr in self.lr and c.batch_size in self.batch_size and c.iterations in self.iterations() and c.l2 in self.l2


def threads() -> int:
    try:
        return max(1, int(os.environ.get("MUPOD_THREADS", "1")))
    except ValueError:
        return 1


def random_search(
    make_model: Callable[[], Model],
    train_set: EnrolleeTimeMatrix,
    val_set: EnrolleeTimeMatrix,
    grid: SearchGrid = SearchGrid(),
    k: int = 10,
    seed: int = 0,
    base: TrainConfig | None = None,
) -> tuple[TrainConfig, list[dict], Model]:
    """Train ``k`` configurations drawn uniformly from ``grid``; rank by validation AUC.

    Returns the best config, the leaderboard (best first) and the best model.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    base = base or TrainConfig(seed=seed)
    rng = np.random.default_rng(seed)
    configs = [grid.sample(rng, replace(base, seed=seed + i)) for i in range(k)]

    def run(cfg):
        res = train(make_model(), train_set, val_set, cfg)
        loss, score = _loss_and_auc(res.model, val_set)
        return res.model, {"config": asdict(cfg), "val_auc": score, "val_loss": loss, "best_iteration": res.best_iteration}

    n_jobs = min(threads(), k)
    if n_jobs > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(run)(c) for c in configs)
    else:
        results = [run(c) for c in configs]
    order = sorted(range(k), key=lambda i: (-np.nan_to_num(results[i][1]["val_auc"], nan=-1.0), i))
    board = [dict(results[i][1], trial=i) for i in order]
    best = order[0]
    return configs[best], board, results[best][0]


# ---------------------------------------------------------------- recipes


@dataclass
class FitResult:
    model: Model
    log: list[dict]
    val: MetricsReport
    test: MetricsReport
    test_scores: np.ndarray = field(repr=False)


def evaluate_model(model: Model, m: EnrolleeTimeMatrix, threshold: float = 0.5) -> tuple[MetricsReport, np.ndarray]:
    scores = model.predict_proba(m.patients)
    return confusion_metrics(scores, m.labels, threshold), scores


def fit(model: Model, data: Dataset, config: TrainConfig) -> FitResult:
    res = train(model, data.part("train"), data.part("val"), config)
    val, _ = evaluate_model(res.model, data.part("val"))
    test, scores = evaluate_model(res.model, data.part("test"))
    return FitResult(res.model, res.log, val, test, scores)


def build_mupod(
    data: Dataset,
    pretrain: PretrainConfig = PretrainConfig(),
    encoder: EncoderConfig | None = None,
    seed: int = 0,
    finetune: bool = False,
) -> MupodModel:
    """Pretrain one LSTM encoder per stream, then wrap them in a fresh multi-stream model."""
    train_set, val_set = data.part("train"), data.part("val")
    med, _ = pretrain_encoder(train_set, val_set, "med", replace(pretrain, seed=seed))
    diag, _ = pretrain_encoder(train_set, val_set, "diag", replace(pretrain, seed=seed + 1))
    cfg = encoder or EncoderConfig(stream_dim=pretrain.hidden_dim)
    return MupodModel(med, diag, cfg, seed=seed, finetune=finetune)


def baseline_concat_lstm(data: Dataset, config: TrainConfig, hidden_dim: int = 32) -> FitResult:
    m = data.matrix
    from .data import DEMO_DIM

    model = ConcatLstmModel(m.med_vocab_size + m.diag_vocab_size + DEMO_DIM, hidden_dim, config.seed)
    return fit(model, data, config)


def baseline_single_transformer(data: Dataset, config: TrainConfig, encoder: EncoderConfig | None = None) -> FitResult:
    m = data.matrix
    from .data import DEMO_DIM

    model = SingleTransformerModel(m.med_vocab_size + m.diag_vocab_size + DEMO_DIM, encoder, config.seed)
    return fit(model, data, config)
