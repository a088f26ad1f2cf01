"""The three-stage freeze/unfreeze fine-tuning protocol.

Stage I trains a fresh head on frozen base groups at a fixed step size.
Stage II keeps the base frozen, turns augmentation on, picks its step
size with a bounded learning-rate sweep, and anneals it with cosine
restarts. Stage III unfreezes everything and fine-tunes under a
discriminative learning-rate slice, smallest at the stem.

Every random stream derives from (seed, fold, stage, epoch), so a stage
is a pure function of its starting checkpoint and config; training can
resume from a checkpoint file bit-exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import batches, compute_channel_stats, stratified_kfold
from .errors import ConfigurationError, DivergenceError, ProtocolOrderError
from .layers import freeze_base, replace_head, unfreeze_all
from .metrics import confusion, metrics, per_sample_losses, top_losses
from .optim import Adam, CosineRestartSchedule, lr_range_test, slice_lrs
from .report_io import write_csv

STAGES = ("I", "II", "III")
# stage codes namespace the RNG streams
_CODE_PRETRAIN = 0
_STAGE_CODES = {"I": 1, "II": 2, "III": 3}
_CODE_BASELINE = 4
_CODE_LRFIND = 5
TOP_LOSS_COUNT = 8


def derive_seed(*parts):
    """Collapse structural indices into one integer seed, reproducibly."""
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


@dataclass
class StageConfig:
    stage: str
    epochs: int
    lr: float | None = None
    olrf_bounds: tuple | None = None
    olrf_iters: int = 30
    slice_bounds: tuple | None = None
    augment: object | None = None
    cosine: bool = False
    cosine_min_ratio: float = 0.01
    cycle_mult: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if self.epochs < 0:
            raise ConfigurationError(f"stage {self.stage}: epochs must be >= 0")
        if self.stage == "III":
            if self.slice_bounds is None:
                raise ConfigurationError("stage III requires a discriminative lr slice")
            if self.lr is not None or self.olrf_bounds is not None:
                raise ConfigurationError("stage III takes its rates from the slice only")
        else:
            if self.slice_bounds is not None:
                raise ConfigurationError(f"stage {self.stage} cannot use a slice policy")
            if (self.lr is None) == (self.olrf_bounds is None):
                raise ConfigurationError(
                    f"stage {self.stage} needs exactly one of a fixed lr or olrf bounds")


@dataclass
class EpochRow:
    stage: str
    epoch: int
    train_loss: float
    valid_loss: float
    error_rate: float
    accuracy: float


@dataclass
class StageReport:
    stage: str
    rows: list
    final: object            # MetricsReport on the validation fold
    confusion: object
    train_loss: float        # last epoch's mean training loss
    valid_loss: float
    chosen_lr: float | None  # sweep-selected rate (stage II), if any
    group_lrs: dict
    top_losses: list
    wall_seconds: float

    def save_rows_csv(self, path):
        write_csv(path, ["stage", "epoch", "train_loss", "valid_loss", "error_rate", "accuracy"],
                  [(r.stage, r.epoch, r.train_loss, r.valid_loss, r.error_rate, r.accuracy)
                   for r in self.rows])

    def summary_dict(self):
        out = {"train_loss": self.train_loss, "valid_loss": self.valid_loss}
        out.update(self.final.to_dict())
        out["chosen_lr"] = self.chosen_lr
        out["group_lrs"] = self.group_lrs
        return out


class FoldData:
    """Deterministic batch provider for one fold of one dataset.

    Channel statistics come from the training portion only and are
    applied to both splits; validation batches are cached since they are
    augmentation-free and fixed-order.
    """

    def __init__(self, dataset, plan, fold, batch_size, seed, standardize=True):
        self.dataset = dataset
        self.plan = plan
        self.fold = fold
        self.batch_size = batch_size
        self.seed = seed
        train_idx = [i for i, s in enumerate(dataset.samples) if plan.fold_of(s.id) != fold]
        self.stats = compute_channel_stats(dataset, train_idx) if standardize else None
        self._valid_cache = None

    def train_batches(self, stage_code, epoch, policy):
        return batches(self.dataset, self.plan, self.fold, "train", self.batch_size,
                       policy=policy, seed=derive_seed(self.seed, self.fold, stage_code),
                       epoch=epoch, stats=self.stats)

    def valid_batches(self):
        if self._valid_cache is None:
            self._valid_cache = batches(self.dataset, self.plan, self.fold, "valid",
                                        self.batch_size, stats=self.stats)
        return self._valid_cache


@dataclass
class EvalOutcome:
    valid_loss: float
    confusion: object
    report: object
    ids: list
    losses: np.ndarray
    predicted: np.ndarray
    true: np.ndarray


def evaluate(model, batch_list, class_names):
    ids, losses, preds, trues = per_sample_losses(model, batch_list)
    cm = confusion(trues, preds, len(class_names), class_names)
    return EvalOutcome(float(losses.sum() / len(losses)), cm, metrics(cm),
                       ids, losses, preds, trues)


def _train_one_epoch(model, optimizer, batch_list, schedule, iteration_offset):
    """Run the optimizer over one epoch of batches; returns the mean loss."""
    losses = []
    for i, batch in enumerate(batch_list):
        factor = 1.0
        if schedule is not None:
            factor = schedule.lr() / schedule.lr_max
        group_lrs = {g.name: g.learning_rate * factor for g in model.groups}
        model.zero_grad()
        loss = T.softmax_cross_entropy(model.forward(batch.x, training=True), batch.y)
        if not np.isfinite(loss.item()):
            raise DivergenceError(
                f"non-finite training loss at iteration {iteration_offset + i}",
                iteration=iteration_offset + i)
        loss.backward()
        optimizer.step(group_lrs)
        if schedule is not None:
            schedule.step()
        losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def _run_training(model, fold_data, stage_code, stage_name, epochs, policy, cosine,
                  cosine_min_ratio, cycle_mult):
    """Shared epoch loop; on divergence, the model is restored to the last
    completed epoch before the error propagates."""
    rows = []
    schedule = None
    last_good = model.state_dict()
    iterations_per_epoch = None
    train_loss = float("nan")
    for epoch in range(epochs):
        batch_list = fold_data.train_batches(stage_code, epoch, policy)
        if cosine and schedule is None:
            iterations_per_epoch = len(batch_list)
            lr_max = max(g.learning_rate for g in model.groups)
            schedule = CosineRestartSchedule(
                lr_max=lr_max, lr_min=lr_max * cosine_min_ratio,
                cycle_length=iterations_per_epoch, cycle_mult=cycle_mult)
        if epoch == 0:
            optimizer = Adam(model)
        try:
            train_loss = _train_one_epoch(model, optimizer, batch_list, schedule,
                                          epoch * len(batch_list))
        except DivergenceError:
            model.load_state_dict(last_good)
            raise
        outcome = evaluate(model, fold_data.valid_batches(), fold_data.dataset.class_names)
        rows.append(EpochRow(stage_name, epoch, train_loss, outcome.valid_loss,
                             outcome.report.error_rate, outcome.report.accuracy))
        last_good = model.state_dict()
    return rows, train_loss


class ProtocolRun:
    """Stage state machine for one fold: enforces I -> II -> III order."""

    def __init__(self, model, fold_data, seed, fold, completed=()):
        self.model = model
        self.fold_data = fold_data
        self.seed = seed
        self.fold = fold
        self.completed = list(completed)
        self.reports = {}
        self.checkpoints = {}  # stage -> state dict snapshot at stage end

    def run_stage(self, cfg: StageConfig) -> StageReport:
        position = len(self.completed)
        expected = STAGES[position] if position < len(STAGES) else None
        if cfg.stage != expected:
            raise ProtocolOrderError(
                f"stage {cfg.stage} cannot run now: expected {expected} "
                f"(completed: {self.completed or 'none'})")
        t0 = time.perf_counter()
        model = self.model
        chosen_lr = None
        if cfg.stage in ("I", "II"):
            freeze_base(model)
        else:
            unfreeze_all(model)

        if cfg.stage == "III":
            lo, hi = cfg.slice_bounds
            rates = slice_lrs(lo, hi, len(model.groups))
        else:
            lr = cfg.lr
            if cfg.olrf_bounds is not None:
                lo, hi = cfg.olrf_bounds
                sweep_batches = self.fold_data.train_batches(_CODE_LRFIND, 0, cfg.augment)
                trace = lr_range_test(model, sweep_batches, lo, hi, cfg.olrf_iters)
                lr = float(min(max(trace.suggested_lr, lo), hi))
                chosen_lr = lr
            rates = [lr] * len(model.groups)
        model.set_group_lrs(rates)

        stage_code = _STAGE_CODES[cfg.stage]
        rows, train_loss = _run_training(
            model, self.fold_data, stage_code, cfg.stage, cfg.epochs, cfg.augment,
            cfg.cosine, cfg.cosine_min_ratio, cfg.cycle_mult)
        outcome = evaluate(model, self.fold_data.valid_batches(),
                           self.fold_data.dataset.class_names)
        report = StageReport(
            stage=cfg.stage,
            rows=rows,
            final=outcome.report,
            confusion=outcome.confusion,
            train_loss=train_loss,
            valid_loss=outcome.valid_loss,
            chosen_lr=chosen_lr,
            group_lrs={g.name: g.learning_rate for g in model.groups},
            top_losses=top_losses(model, self.fold_data.valid_batches(), TOP_LOSS_COUNT),
            wall_seconds=time.perf_counter() - t0,
        )
        self.completed.append(cfg.stage)
        self.reports[cfg.stage] = report
        self.checkpoints[cfg.stage] = model.state_dict()
        return report


def pretrain_source(model, source_dataset, epochs, lr, seed, batch_size=16,
                    policy=None, standardize=True, holdout_k=5):
    """Train all groups on the source task; returns the source validation accuracy.

    An internal stratified split holds out one fold for that accuracy
    number; with epochs=0 the model is returned untouched.
    """
    plan = stratified_kfold(source_dataset, holdout_k, derive_seed(seed, _CODE_PRETRAIN))
    fold_data = FoldData(source_dataset, plan, 0, batch_size,
                         derive_seed(seed, _CODE_PRETRAIN, 1), standardize=standardize)
    unfreeze_all(model)
    model.set_group_lrs([lr] * len(model.groups))
    _run_training(model, fold_data, _CODE_PRETRAIN, "pretrain", epochs, policy,
                  cosine=False, cosine_min_ratio=0.01, cycle_mult=1)
    outcome = evaluate(model, fold_data.valid_batches(), source_dataset.class_names)
    return outcome.report.accuracy


@dataclass
class FoldResult:
    fold: int
    stage_reports: dict
    wall_seconds: float


def _aggregate(stage_reports_per_fold):
    """Mean and population std of every summary metric, per stage."""
    scalar_keys = ("train_loss", "valid_loss", "error_rate", "accuracy",
                   "precision", "recall", "f1", "precision_macro", "recall_macro", "f1_macro")
    out = {}
    for stage in stage_reports_per_fold[0]:
        summaries = [reports[stage].summary_dict() for reports in stage_reports_per_fold]
        stage_agg = {}
        for key in scalar_keys:
            values = np.array([s[key] for s in summaries], dtype=np.float64)
            stage_agg[key] = {"mean": float(values.mean()), "std": float(values.std())}
        out[stage] = stage_agg
    return out


def run_protocol(setting, fold_plan, stage_configs, seed, pretrained, batch_size=16,
                 standardize=True, head_seed=None, fold_subset=None, jobs=1):
    """Run replace-head + stages I-III on every fold; aggregate across folds.

    ``pretrained`` is the source-trained model each fold clones from.
    Returns (fold_results, aggregate dict).
    """
    if fold_plan.k < 2:
        raise ConfigurationError("fold plan must have k >= 2")
    if [c.stage for c in stage_configs] != list(STAGES):
        raise ConfigurationError("stage_configs must be exactly stages I, II, III in order")
    folds = list(range(fold_plan.k)) if fold_subset is None else list(fold_subset)
    args = [(setting, fold_plan, stage_configs, seed, pretrained, batch_size,
             standardize, head_seed, fold) for fold in folds]
    if jobs > 1 and len(folds) > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(min(jobs, len(folds))) as pool:
            results = pool.map(_run_protocol_fold_star, args)
    else:
        results = [_run_protocol_fold_star(a) for a in args]
    aggregate = _aggregate([r.stage_reports for r in results])
    return results, aggregate


def _run_protocol_fold_star(args):
    return run_protocol_fold(*args)


def run_protocol_fold(setting, fold_plan, stage_configs, seed, pretrained, batch_size,
                      standardize, head_seed, fold):
    """One fold's replace-head + three stages; errors carry the fold index."""
    t0 = time.perf_counter()
    model = pretrained.clone()
    replace_head(model, setting.target.class_count,
                 seed=derive_seed(head_seed if head_seed is not None else seed, fold, 7))
    fold_data = FoldData(setting.target, fold_plan, fold, batch_size, seed,
                         standardize=standardize)
    run = ProtocolRun(model, fold_data, seed, fold)
    try:
        for cfg in stage_configs:
            run.run_stage(cfg)
    except DivergenceError as exc:
        raise DivergenceError(f"fold {fold}: {exc}", iteration=exc.iteration) from exc
    return FoldResult(fold, run.reports, time.perf_counter() - t0), run


def scratch_baseline(setting, fold_plan, total_epochs, lr, seed, batch_size=16,
                     standardize=True, policy=None, width=8, model_builder=None):
    """Control arm: train from random init, all groups trainable, per fold.

    Same epoch loop as the protocol but single-stage with a uniform fixed
    rate and no source pretraining.
    """
    from .layers import build_micro_resnet

    per_fold = []
    build = model_builder or (lambda s: build_micro_resnet(
        setting.target.image_shape, setting.target.class_count, width=width, seed=s))
    for fold in range(fold_plan.k):
        model = build(derive_seed(seed, _CODE_BASELINE, fold))
        unfreeze_all(model)
        model.set_group_lrs([lr] * len(model.groups))
        fold_data = FoldData(setting.target, fold_plan, fold, batch_size, seed,
                             standardize=standardize)
        try:
            rows, train_loss = _run_training(model, fold_data, _CODE_BASELINE, "baseline",
                                             total_epochs, policy, cosine=False,
                                             cosine_min_ratio=0.01, cycle_mult=1)
        except DivergenceError as exc:
            raise DivergenceError(f"fold {fold}: {exc}", iteration=exc.iteration) from exc
        outcome = evaluate(model, fold_data.valid_batches(), setting.target.class_names)
        report = StageReport("baseline", rows, outcome.report, outcome.confusion,
                             train_loss, outcome.valid_loss, None,
                             {g.name: g.learning_rate for g in model.groups},
                             top_losses(model, fold_data.valid_batches(), TOP_LOSS_COUNT),
                             0.0)
        per_fold.append({"baseline": report})
    aggregate = _aggregate(per_fold)["baseline"]
    return per_fold, aggregate
