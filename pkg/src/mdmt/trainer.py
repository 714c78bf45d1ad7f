"""Training strategies: supervised, semi-supervised, and multi-domain multi-task.

The full method alternates two stages every outer epoch once warm-up is
over:

1. *label propagation*: the current model labels every domain-2 training
   volume with a soft class probability and every domain-1 training volume
   with a soft ROI map;
2. *multi-task optimisation*: one classification epoch over the real
   domain-1 labels plus the propagated class labels, then one detection
   epoch over the real domain-2 masks plus the propagated maps.

Classification stages touch only encoder and classifier parameters,
detection stages only encoder and detector parameters.
"""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import network as net
from .datagen import DomainDataset
from .exceptions import ConfigError, EvaluationError, NumericError
from .losses import bce, detection_loss
from .metrics import dice_score, roc_auc
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    SUPERVISED_BASELINE = "supervised_baseline"
    SEMI_SUPERVISED = "semi_supervised"
    SUPERVISED_MDMT = "supervised_mdmt"
    SEMI_SUPERVISED_MDMT = "semi_supervised_mdmt"

    @property
    def uses_domain2(self) -> bool:
        return self is not Strategy.SUPERVISED_BASELINE

    @property
    def multitask(self) -> bool:
        return self in (Strategy.SUPERVISED_MDMT, Strategy.SEMI_SUPERVISED_MDMT)

    @property
    def propagates(self) -> bool:
        return self in (Strategy.SEMI_SUPERVISED, Strategy.SEMI_SUPERVISED_MDMT)


# Table order of the four strategies
STRATEGY_ORDER = (
    Strategy.SUPERVISED_BASELINE,
    Strategy.SEMI_SUPERVISED,
    Strategy.SUPERVISED_MDMT,
    Strategy.SEMI_SUPERVISED_MDMT,
)

PAPER_LEARNING_RATE = 0.05
PAPER_EPOCHS = 500


@dataclass(frozen=True)
class TrainConfig:
    strategy: Strategy = Strategy.SEMI_SUPERVISED_MDMT
    arch: net.ArchConfig = field(default_factory=net.ArchConfig)
    epochs: int = 40
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    zeta: float = 0.8
    warmup_epochs: int = 10
    pseudo_weight: float = 1.0
    propagation_period: int = 1
    dice_eps: float = 1.0
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    domain2_splits: tuple[str, ...] = ("train", "val")
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "domain2_splits", tuple(self.domain2_splits))
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be > 0")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("train.warmup_epochs must satisfy 0 <= W < epochs")
        if not 0.0 <= self.pseudo_weight <= 1.0:
            raise ConfigError("train.pseudo_weight must lie in [0, 1]")
        if self.propagation_period < 1:
            raise ConfigError("train.propagation_period must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not 0.0 <= self.zeta <= 1.0:
            raise ConfigError("train.zeta must lie in [0, 1]")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("train Adam hyper-parameters out of range")
        if not self.domain2_splits or any(s not in ("train", "val", "test") for s in self.domain2_splits):
            raise ConfigError(f"train.domain2_splits {self.domain2_splits} invalid")


# -- optimiser ------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam moments per parameter name; ``t`` counts applied updates."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)
    t: int = 0


def adam_update(params: dict[str, Tensor], state: OptimizerState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam step on ``params`` in place, using their ``.grad``.

    Bias correction uses each parameter's own step count, so groups that are
    updated in alternation are corrected independently.
    """
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        grads[name] = g
    state.t += 1
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        step = state.steps.get(name, 0) + 1
        state.steps[name] = step
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _group_params(params: net.ModelParams, groups) -> dict[str, Tensor]:
    return dict(params.named_parameters(groups))


# -- data containers ----------------------------------------------------------

@dataclass
class TrainingData:
    """Normalised arrays the training loop consumes.

    Domain-2 arrays may be ``None`` for the supervised baseline.  Validation
    arrays may be ``None``, in which case the last epoch is kept.
    """

    x1: np.ndarray
    y1: np.ndarray
    x1_val: np.ndarray | None = None
    y1_val: np.ndarray | None = None
    x2: np.ndarray | None = None
    s2: np.ndarray | None = None
    x2_val: np.ndarray | None = None
    s2_val: np.ndarray | None = None


@dataclass
class PseudoLabelledPool:
    """Propagated targets: class probabilities for domain-2 volumes, ROI maps for domain-1."""

    x_cls: np.ndarray | None
    y_cls: np.ndarray | None
    x_det: np.ndarray | None
    s_det: np.ndarray | None
    epoch: int

    @property
    def n_cls(self) -> int:
        return 0 if self.y_cls is None else len(self.y_cls)

    @property
    def n_det(self) -> int:
        return 0 if self.s_det is None else len(self.s_det)


@dataclass
class TrainRun:
    config: TrainConfig
    history: list[dict]
    best_params: net.ModelParams
    best_epoch: int
    best_val_auc: float | None
    final_params: net.ModelParams
    wall_clock: float = 0.0


def _batched_forward(fn, x: np.ndarray, batch_size: int) -> np.ndarray:
    outs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(fn(x[i:i + batch_size]).data)
    return np.concatenate(outs) if outs else np.empty((0,))


def predict_scores(params: net.ModelParams, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Classification probabilities for a batch of volumes, without a graph."""
    return _batched_forward(lambda b: net.predict_proba(params, b), x, batch_size)


def predict_maps(params: net.ModelParams, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
    return _batched_forward(lambda b: net.predict_roi(params, b), x, batch_size)


def mean_dice(params: net.ModelParams, x: np.ndarray, masks: np.ndarray, zeta: float) -> float:
    """Average per-volume Dice of the thresholded ROI maps."""
    maps = predict_maps(params, x)
    pred = net.threshold_mask(maps, zeta)
    return float(np.mean([dice_score(p, m) for p, m in zip(pred, masks)]))


def propagate_labels(params: net.ModelParams, x1_train: np.ndarray | None,
                     x2_train: np.ndarray | None, epoch: int = 0, detection: bool = True,
                     batch_size: int = 8) -> PseudoLabelledPool:
    """Label each domain with the task it lacks, using the current model.

    Domain-2 volumes receive soft class probabilities; domain-1 volumes
    receive soft ROI maps (skipped when ``detection`` is false).  No graph is
    recorded and the input arrays are not modified.
    """
    arch = params.arch
    for name, x in (("domain-1", x1_train), ("domain-2", x2_train)):
        if x is not None and tuple(x.shape[1:]) != arch.input_shape:
            raise ConfigError(f"{name} volumes {x.shape[1:]} do not match arch {arch.input_shape}")
    y_cls = predict_scores(params, x2_train, batch_size) if x2_train is not None else None
    s_det = None
    if detection and x1_train is not None:
        s_det = predict_maps(params, x1_train, batch_size)
    return PseudoLabelledPool(x_cls=x2_train, y_cls=y_cls,
                              x_det=x1_train if s_det is not None else None,
                              s_det=s_det, epoch=epoch)


def _shuffle_rng(seed: int, epoch: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stage])


def _pool(x_real, t_real, x_pseudo, t_pseudo, weight: float):
    """Concatenate real and pseudo samples; zero-weight pseudo samples are dropped."""
    xs, ts, ws = [], [], []
    if x_real is not None and len(x_real):
        xs.append(x_real)
        ts.append(np.asarray(t_real, dtype=np.float64))
        ws.append(np.ones(len(x_real)))
    if weight > 0 and x_pseudo is not None and len(x_pseudo):
        xs.append(x_pseudo)
        ts.append(np.asarray(t_pseudo, dtype=np.float64))
        ws.append(np.full(len(x_pseudo), float(weight)))
    if not xs:
        return None
    return np.concatenate(xs), np.concatenate(ts), np.concatenate(ws)


def _run_epoch(params, state, cfg: TrainConfig, pooled, rng, groups, loss_fn) -> float:
    x, t, w = pooled
    order = rng.permutation(len(x))
    update = _group_params(params, groups)
    total, weight = 0.0, 0.0
    for i in range(0, len(order), cfg.batch_size):
        idx = order[i:i + cfg.batch_size]
        per_sample = loss_fn(params, x[idx], t[idx])
        wb = w[idx]
        loss = (per_sample * Tensor(wb)).sum() * (1.0 / wb.sum())
        params.zero_grad()
        loss.backward()
        adam_update(update, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
        total += float(np.dot(per_sample.data, wb))
        weight += float(wb.sum())
    params.zero_grad()
    mean = total / weight
    if not np.isfinite(mean):
        raise NumericError("non-finite epoch loss")
    return mean


def _cls_loss(params, x, y):
    return bce(net.predict_proba(params, x), y, per_sample=True)


def _det_loss_fn(cfg: TrainConfig):
    def fn(params, x, s):
        return detection_loss(net.predict_roi(params, x), s, eps=cfg.dice_eps,
                              ce_weight=cfg.ce_weight, dice_weight=cfg.dice_weight,
                              per_sample=True)
    return fn


def epoch_classification(params: net.ModelParams, state: OptimizerState, cfg: TrainConfig,
                         x: np.ndarray, y: np.ndarray, pool: PseudoLabelledPool | None = None,
                         weight: float | None = None, epoch: int = 0) -> float:
    """One pass over real plus propagated class labels; updates encoder and classifier.

    Returns the weighted mean classification loss of the epoch.
    """
    if x is None or len(x) == 0:
        raise ConfigError("classification epoch needs at least one labelled volume")
    lam = cfg.pseudo_weight if weight is None else weight
    pooled = _pool(x, y, pool.x_cls if pool else None, pool.y_cls if pool else None, lam)
    rng = _shuffle_rng(cfg.seed, epoch, 0)
    return _run_epoch(params, state, cfg, pooled, rng, ("theta_e", "theta_c"), _cls_loss)


def epoch_detection(params: net.ModelParams, state: OptimizerState, cfg: TrainConfig,
                    x: np.ndarray | None, s: np.ndarray | None,
                    pool: PseudoLabelledPool | None = None, weight: float | None = None,
                    epoch: int = 0) -> float | None:
    """Mirror of :func:`epoch_classification` for the ROI loss; ``None`` if there is no data."""
    lam = cfg.pseudo_weight if weight is None else weight
    pooled = _pool(x, s, pool.x_det if pool else None, pool.s_det if pool else None, lam)
    if pooled is None:
        return None
    rng = _shuffle_rng(cfg.seed, epoch, 1)
    return _run_epoch(params, state, cfg, pooled, rng, ("theta_e", "theta_d"), _det_loss_fn(cfg))


def check_data(cfg: TrainConfig, data: TrainingData) -> None:
    arch = cfg.arch
    if data.x1 is None or len(data.x1) == 0:
        raise ConfigError("no domain-1 training volumes")
    arrays = {"x1": data.x1, "x1_val": data.x1_val, "x2": data.x2, "x2_val": data.x2_val}
    for name, arr in arrays.items():
        if arr is not None and tuple(arr.shape[1:]) != arch.input_shape:
            raise ConfigError(f"{name} volumes have shape {arr.shape[1:]}, arch expects {arch.input_shape}")
    if cfg.strategy.uses_domain2 and (data.x2 is None or len(data.x2) == 0):
        raise ConfigError(f"strategy {cfg.strategy.value} needs domain-2 volumes")
    if cfg.strategy.multitask and data.s2 is None:
        raise ConfigError(f"strategy {cfg.strategy.value} needs domain-2 ROI masks")


def _fit_epoch(params, state, cfg: TrainConfig, data: TrainingData, epoch: int,
               pool: PseudoLabelledPool | None) -> tuple[dict, PseudoLabelledPool | None]:
    strategy = cfg.strategy
    propagated = False
    if strategy.propagates and epoch > cfg.warmup_epochs and \
            (epoch - cfg.warmup_epochs - 1) % cfg.propagation_period == 0:
        pool = propagate_labels(params, data.x1, data.x2, epoch=epoch,
                                detection=strategy.multitask)
        propagated = True
    loss_cls = epoch_classification(params, state, cfg, data.x1, data.y1, pool, epoch=epoch)
    loss_det = None
    if strategy.multitask:
        loss_det = epoch_detection(params, state, cfg, data.x2, data.s2, pool, epoch=epoch)
    record = {
        "epoch": epoch,
        "loss_cls": loss_cls,
        "loss_det": loss_det,
        "propagated": propagated,
        "n_pseudo_cls": pool.n_cls if pool and cfg.pseudo_weight > 0 else 0,
        "n_pseudo_det": pool.n_det if pool and cfg.pseudo_weight > 0 else 0,
        "val_auc": None,
        "val_dice": None,
    }
    if data.x1_val is not None:
        record["val_auc"] = roc_auc(predict_scores(params, data.x1_val), data.y1_val)
    if strategy.multitask and data.x2_val is not None and data.s2_val is not None:
        record["val_dice"] = mean_dice(params, data.x2_val, data.s2_val, cfg.zeta)
    return record, pool


def fit(cfg: TrainConfig, data: TrainingData, on_epoch=None) -> TrainRun:
    """Train one model under ``cfg.strategy`` and keep the best validation checkpoint.

    ``on_epoch(record, params)`` is called after every epoch with that
    epoch's history entry and the live parameters (do not modify them).
    A non-finite value anywhere aborts with a :class:`NumericError` naming
    the epoch.
    """
    check_data(cfg, data)
    strategy = cfg.strategy
    arch = replace(cfg.arch, seed=cfg.seed)
    cfg = replace(cfg, arch=arch)
    params = net.init_params(arch)
    state = OptimizerState()
    history: list[dict] = []
    best, best_epoch, best_auc = params.copy(), 0, None
    pool: PseudoLabelledPool | None = None
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        try:
            record, pool = _fit_epoch(params, state, cfg, data, epoch, pool)
        except NumericError as exc:
            raise NumericError(f"{strategy.value} epoch {epoch}: {exc}") from exc
        history.append(record)
        if on_epoch is not None:
            on_epoch(record, params)
        log.debug("%s epoch %d: %s", strategy.value, epoch, record)
        auc = record["val_auc"]
        # ties keep the earlier epoch; without validation data the last epoch wins
        if auc is None or best_epoch == 0 or auc > best_auc:
            best, best_epoch, best_auc = params.copy(), epoch, auc
    return TrainRun(config=cfg, history=history, best_params=best, best_epoch=best_epoch,
                    best_val_auc=best_auc, final_params=params,
                    wall_clock=time.perf_counter() - start)


def training_data(cfg: TrainConfig, d1: DomainDataset, d2: DomainDataset | None) -> TrainingData:
    """Pick the split arrays ``fit`` trains and validates on."""
    for ds in (d1, d2):
        if ds is not None and not ds.normalized:
            raise ConfigError(f"domain {ds.domain_id} dataset must be normalized before training")
    if d1.labels is None:
        raise ConfigError("domain-1 dataset has no scan labels")
    tr, va = d1.indices("train"), d1.indices("val")
    data = TrainingData(x1=d1.volumes[tr], y1=d1.labels[tr],
                        x1_val=d1.volumes[va], y1_val=d1.labels[va])
    if cfg.strategy.uses_domain2:
        if d2 is None:
            raise ConfigError(f"strategy {cfg.strategy.value} needs a domain-2 dataset")
        idx = d2.indices(cfg.domain2_splits)
        data.x2 = d2.volumes[idx]
        if d2.masks is not None:
            data.s2 = d2.masks[idx].astype(np.float64)
            va2 = d2.indices("val")
            data.x2_val, data.s2_val = d2.volumes[va2], d2.masks[va2]
    return data


def train(cfg: TrainConfig, d1: DomainDataset, d2: DomainDataset | None = None,
          on_epoch=None) -> TrainRun:
    """Train on normalized, split datasets (domain 2 optional for the baseline)."""
    return fit(cfg, training_data(cfg, d1, d2), on_epoch=on_epoch)


def evaluate(params: net.ModelParams, d1: DomainDataset | None = None,
             d2: DomainDataset | None = None, split: str = "test", zeta: float = 0.8) -> dict:
    """AUC on a labelled split and Dice on a masked split, where available."""
    out: dict = {}
    if d1 is not None and d1.labels is not None:
        idx = d1.indices(split)
        out["auc"] = roc_auc(predict_scores(params, d1.volumes[idx]), d1.labels[idx])
    if d2 is not None and d2.masks is not None:
        idx = d2.indices(split)
        if len(idx) == 0:
            raise EvaluationError(f"domain-2 {split} split is empty")
        out["dice"] = mean_dice(params, d2.volumes[idx], d2.masks[idx], zeta)
    return out
