"""SGD training with per-epoch label delivery and best-checkpoint tracking."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset, stratified_split
from .delivery import build_schedule, mixup_batch
from .errors import ConfigurationError, NumericFaultError
from .metrics import hard_acc_all, proper_scores
from .nnet import ModelState, as_target_matrix, forward, init_model, loss_and_grad
from .rng import stream

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "eval_soft_nll", "eval_hard_acc")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    method: str = "soft"
    hold_period: int = 1
    smoothing_alpha: float = 0.1
    mixup_alpha: float = 0.2
    eval_frac: float = 0.2
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    init_index: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """The full-size optimizer recipe: lr 0.1, 200 epochs, batch 128."""
        return cls(**{"lr0": 0.1, "epochs": 200, "batch_size": 128, **overrides})

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    return config.lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))


def sgd_step(state: ModelState, grads: np.ndarray, lr: float, config: TrainConfig) -> ModelState:
    """Classical momentum with coupled weight decay.

    ``v <- momentum * v + (g + weight_decay * theta)``; ``theta <- theta - lr * v``.
    """
    v = state.velocity if state.velocity is not None else np.zeros_like(state.theta)
    with np.errstate(over="ignore", invalid="ignore"):
        v = config.momentum * v + (grads + config.weight_decay * state.theta)
        theta = state.theta - lr * v
    if not np.all(np.isfinite(theta)):
        raise NumericFaultError("non-finite parameters after SGD step")
    return replace(state, theta=theta, velocity=v)


@dataclass
class RunRecord:
    config: dict
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_eval_soft_nll: float = math.inf
    best_theta: np.ndarray | None = None
    final_theta: np.ndarray | None = None
    widths: tuple[int, ...] = ()
    activation: str = "tanh"
    seeds: dict = field(default_factory=dict)
    fault: str | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.history])

    def best_model(self) -> ModelState:
        return ModelState(self.widths, self.best_theta.copy(), self.activation, meta=self._meta(self.best_epoch))

    def final_model(self) -> ModelState:
        return ModelState(self.widths, self.final_theta.copy(), self.activation, meta=self._meta(len(self.history) - 1))

    def _meta(self, epoch):
        return {"seed": self.config["seed"], "method": self.config["method"], "epoch": int(epoch),
                "metric": "eval_soft_nll", "value": float(self.best_eval_soft_nll)}


def batch_targets(T_all, idx, C: int) -> np.ndarray:
    return as_target_matrix(T_all[idx], C)


def train_run(ds: Dataset, config: TrainConfig, eval_ds: Dataset | None = None) -> RunRecord:
    """Train one model from ``config`` and return its per-epoch record.

    Without ``eval_ds`` the data is split with the ``(seed, "split")`` stream.
    Targets come from ``ds.target()``; the held-out split is scored against
    its ``full_dist``.  Batch order and initialization are keyed by the seed
    alone, so runs that differ only in ``method`` see identical batches.
    """
    seed = config.seed
    if eval_ds is None:
        ds, eval_ds = stratified_split(ds, config.eval_frac, stream(seed, "split"))
    widths = (ds.d, *config.hidden, ds.C)
    model = init_model(widths, seed, config.activation, config.init_index)
    schedule = build_schedule(ds, config.method, seed, config.hold_period, config.smoothing_alpha, config.mixup_alpha)
    record = RunRecord(
        config=asdict(config),
        widths=widths,
        activation=config.activation,
        seeds={"seed": seed, "control_offset": 1000 if config.method == "deterministic_control" else 0},
    )
    n, B, C = len(ds), config.batch_size, ds.C
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config)
        T_all = schedule.epoch_targets(epoch)
        order = stream(seed, "batch_order", epoch).permutation(n)
        mix_rng = stream(seed, "mixup", epoch) if config.method == "mixup" else None
        loss_sum = 0.0
        try:
            for start in range(0, n, B):
                idx = order[start : start + B]
                Xb, Tb = ds.X[idx], batch_targets(T_all, idx, C)
                if mix_rng is not None:
                    Xb, Tb, _ = mixup_batch(Xb, Tb, config.mixup_alpha, mix_rng)
                loss, g = loss_and_grad(model, Xb, Tb)
                model = sgd_step(model, g, lr, config)
                loss_sum += loss * idx.size
            Q = forward(model, eval_ds.X).probs
        except NumericFaultError as exc:
            record.fault = f"epoch {epoch}: {exc}"
            log.error("run aborted: %s", record.fault)
            break
        nll, _, _ = proper_scores(Q, eval_ds.full_dist)
        record.history.append(
            {"epoch": epoch, "lr": lr, "train_loss": loss_sum / n, "eval_soft_nll": nll,
             "eval_hard_acc": hard_acc_all(Q, eval_ds.full_dist)}
        )
        if nll < record.best_eval_soft_nll:
            record.best_eval_soft_nll = nll
            record.best_epoch = epoch
            record.best_theta = model.theta.copy()
    record.final_theta = model.theta.copy()
    return record


def epochs_to_fraction(history, frac: float, rule: str = "relative"):
    """First epoch whose eval soft NLL comes within ``frac`` of the run's best.

    ``rule="relative"``: threshold ``best + (1 - frac) * |best|``.
    ``rule="gap"``: threshold ``best + (1 - frac) * (first - best)``.
    Returns ``None`` if no epoch qualifies (e.g. an all-NaN history).
    """
    if not 0 < frac <= 1:
        raise ConfigurationError("frac must lie in (0, 1]")
    h = np.asarray([row["eval_soft_nll"] if isinstance(row, dict) else row for row in history], dtype=np.float64)
    if h.size == 0:
        raise ConfigurationError("empty history")
    finite = np.isfinite(h)
    if not finite.any():
        return None
    best = h[finite].min()
    if rule == "relative":
        threshold = best + (1.0 - frac) * abs(best)
    elif rule == "gap":
        threshold = best + (1.0 - frac) * (h[0] - best)
    else:
        raise ConfigurationError(f"unknown rule {rule!r}")
    hits = np.flatnonzero(finite & (h <= threshold))
    return int(hits[0]) if hits.size else None


def write_history_csv(record: RunRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in record.history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
