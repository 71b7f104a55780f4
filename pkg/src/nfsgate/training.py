"""Optimizers and the pretrain -> search -> retrain pipeline."""
from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Iterator

import numpy as np

from . import data as data_mod
from .data import Dataset
from .ensemble import (
    AGGREGATIONS,
    GatingEnsemble,
    SelectionResult,
    aggregate,
    intergroup_difference,
    pick_group,
)
from .gating import (
    GateInitSpec,
    anneal_temperature,
    apply_gates,
    apply_gates_backward,
    sparse_regularizer,
)
from .metrics import auc
from .models import CTRModel, load_checkpoint, save_checkpoint, training_objective
from .tensor_core import NumericalError, Parameters

log = logging.getLogger(__name__)

METHODS = ("gating", "ensemble", "gumbel", "random", "all_features")
RETRAIN_SEED_OFFSET = 10007


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Parameters) -> None:
        for name, g in params.grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.values.items():
            g = params.grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: Parameters, state: Adam) -> None:
    state.step(params)


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float) -> None:
    """In-place ``param -= lr * grad``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape:
        raise ValueError(f"shape mismatch {grad.shape} vs {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gate gradient")
    param -= lr * grad


@dataclass
class PipelineConfig:
    method: str = "ensemble"
    model: str = "dcn"
    K: int = 5
    target_N: int = 6
    batch_size: int = 2048
    pretrain_epochs: int = 10
    search_epochs: int = 8
    retrain_epochs: int = 10
    lr_network: float = 1e-3
    lr_gates: float = 1e-3
    gate_lr_scale: float = 1.0
    weight_decay: float = 1e-6
    beta_s: float = 0.4
    V: int = 8
    init_mode: str = "auto"  # auto: random for ensemble, constant otherwise
    init_p: float = 0.8
    init_c: float = 0.01
    init_constant: float | None = None
    search_data: str = "train"
    freeze_network: bool = False
    aggregation: str = "avg"
    seed: int = 0
    split_seed: int = 0
    log_every: int = 500

    def __post_init__(self):
        self.validate()

    def validate(self, num_fields: int | None = None) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.search_data not in ("train", "validation"):
            raise ValueError("search_data must be 'train' or 'validation'")
        if self.init_mode not in ("auto", "constant", "random"):
            raise ValueError(f"unknown init mode {self.init_mode!r}")
        if min(self.pretrain_epochs, self.search_epochs, self.retrain_epochs) < 1:
            raise ValueError("all epoch counts must be >= 1")
        if min(self.lr_network, self.lr_gates, self.gate_lr_scale) <= 0:
            raise ValueError("learning rates must be positive")
        if self.K < 1 or self.batch_size < 1 or self.target_N < 1 or self.log_every < 1:
            raise ValueError("K, batch_size, target_N and log_every must be >= 1")
        if self.beta_s < 0 or self.weight_decay < 0:
            raise ValueError("beta_s and weight_decay must be >= 0")
        if num_fields is not None and self.target_N > num_fields:
            raise ValueError(f"target_N={self.target_N} exceeds M={num_fields}")

    @property
    def num_groups(self) -> int:
        return self.K if self.method == "ensemble" else 1

    @property
    def binarize_kind(self) -> str:
        return "gumbel" if self.method == "gumbel" else "ste"

    def gate_init(self) -> GateInitSpec:
        mode = self.init_mode
        if mode == "auto":
            mode = "random" if self.method == "ensemble" else "constant"
        return GateInitSpec(mode, self.init_p, self.init_c, self.init_constant)

    def replace(self, **changes) -> "PipelineConfig":
        d = asdict(self)
        d.update(changes)
        return PipelineConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict[str, Any]:
        return {f.name: f.type for f in fields(cls)}


def derive_seed(seed: int, tag: str) -> int:
    """Independent, platform-stable integer seed for a named random stream."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def stream(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag))


def log_record(step, phase, *, group=None, loss=None, open_gates=None,
               intergroup_diff=None, gamma=None, epoch=None) -> dict:
    return {"step": step, "phase": phase, "group": group, "loss": loss,
            "open_gates": open_gates, "intergroup_diff": intergroup_diff,
            "gamma": gamma, "epoch": epoch}


def _train_step(model: CTRModel, batch: data_mod.ExampleBatch, wd: float, opt: Adam) -> float:
    model.params.zero_grad()
    logits = model.forward(model.embed(batch.indices))
    loss, dlogit = training_objective(logits, batch.labels, model.params, wd)
    if not np.isfinite(loss):
        raise NumericalError("training loss diverged")
    model.embedding.backward(model.backward(dlogit))
    opt.step(model.params)
    return loss


def train_epochs(model: CTRModel, ds: Dataset, epochs: int, batch_size: int, lr: float,
                 wd: float, batch_seed: int) -> list[float]:
    """Plain Adam training; returns the mean loss of every epoch."""
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    opt = Adam(lr)
    out = []
    for epoch in range(epochs):
        losses = [_train_step(model, b, wd, opt)
                  for b in data_mod.batches(ds, batch_size, batch_seed, epoch)]
        out.append(float(np.mean(losses)))
    return out


def build_model(config: PipelineConfig, schema, seed: int, fields=None) -> CTRModel:
    return CTRModel(config.model, schema.vocab_sizes, config.V, seed=seed, fields=fields)


@dataclass
class PretrainResult:
    model: CTRModel
    epoch_losses: list[float]
    logs: list[dict]

    def save(self, path) -> None:
        save_checkpoint(path, self.model.params.values)


def pretrain(config: PipelineConfig, ds: Dataset, checkpoint_path=None) -> PretrainResult:
    model = build_model(config, ds.schema, derive_seed(config.seed, "pretrain-init"))
    losses = train_epochs(model, ds, config.pretrain_epochs, config.batch_size,
                          config.lr_network, config.weight_decay,
                          derive_seed(config.seed, "pretrain-batches"))
    logs = [log_record(e, "pretrain", loss=l, epoch=e) for e, l in enumerate(losses)]
    result = PretrainResult(model, losses, logs)
    if checkpoint_path is not None:
        result.save(checkpoint_path)
    return result


def load_pretrained(config: PipelineConfig, schema, checkpoint) -> CTRModel:
    """Rebuild a full-feature model and load weights from a path or array dict."""
    arrays = load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    model = build_model(config, schema, 0)
    model.params.load({k: v for k, v in arrays.items() if not k.startswith("gate.")})
    return model


def _cycle(ds: Dataset, batch_size: int, seed: int) -> Iterator[data_mod.ExampleBatch]:
    epoch = 0
    while True:
        yield from data_mod.batches(ds, batch_size, seed, epoch)
        epoch += 1


@dataclass
class SearchResult:
    selection: SelectionResult
    ensemble: GatingEnsemble
    logs: list[dict]
    steps_per_epoch: int
    model: CTRModel | None = None


def search(config: PipelineConfig, model: CTRModel, train: Dataset,
           validation: Dataset | None = None, *, ensemble: GatingEnsemble | None = None,
           retrain_set: Dataset | None = None) -> SearchResult:
    """Alternate network and gate updates over ``search_epochs`` epochs.

    Each mini-batch picks one group uniformly, runs a single forward/backward
    pass with that group's gates, applies Adam to the network (unless frozen)
    and SGD to the picked group's gate weights.  With ``search_data ==
    'validation'`` the gate gradient comes from a separate batch drawn from
    ``validation`` after the network step.
    """
    m = train.schema.num_fields
    config.validate(m)
    if config.search_data == "validation" and (validation is None or len(validation) == 0):
        raise ValueError("search_data='validation' needs a non-empty validation set")
    if ensemble is None:
        ensemble = GatingEnsemble.initialize(config.num_groups, m, config.gate_init(),
                                             stream(config.seed, "gate-init"),
                                             config.binarize_kind)
    picks = stream(config.seed, "group-picks")
    noise = stream(config.seed, "gumbel-noise")
    batch_seed = derive_seed(config.seed, "search-batches")
    val_iter = None
    if config.search_data == "validation":
        val_iter = _cycle(validation, config.batch_size, derive_seed(config.seed, "val-batches"))
    gumbel = config.binarize_kind == "gumbel"
    steps_per_epoch = data_mod.num_batches(train, config.batch_size)
    total = config.search_epochs * steps_per_epoch
    lr_g = config.lr_gates * config.gate_lr_scale
    opt = Adam(config.lr_network)
    params = model.params
    emb_names = model.embedding_names

    def snapshot(step, phase, group=None, loss=None, epoch=None):
        return log_record(
            step, phase, group=group, loss=loss, open_gates=ensemble.open_counts(),
            intergroup_diff=intergroup_difference(ensemble) if ensemble.k > 1 else None,
            gamma=ensemble.groups[0].temperature if gumbel else None, epoch=epoch)

    logs = [snapshot(0, "search", epoch=0)]
    step, pending, warned = 0, [], False
    for epoch in range(config.search_epochs):
        for batch in data_mod.batches(train, config.batch_size, batch_seed, epoch):
            k = pick_group(ensemble, picks)
            group = ensemble.groups[k]
            if gumbel:
                group.temperature = anneal_temperature(step, total)
            params.zero_grad()
            emb = model.embed(batch.indices)
            masked, ctx = apply_gates(emb, group, noise)
            logits = model.forward(masked)
            loss, dlogit = training_objective(logits, batch.labels, params, config.weight_decay)
            if not np.isfinite(loss):
                raise NumericalError("search loss diverged")
            d_emb, d_alpha = apply_gates_backward(ctx, model.backward(dlogit))
            model.embedding.backward(d_emb)
            if step % config.log_every == 0:
                _check_closed_gates(params, emb_names, ctx.gates, d_emb, config.weight_decay)
            # network step, gates held fixed
            if not config.freeze_network:
                opt.step(params)
            # gate step, network held fixed
            if val_iter is not None:
                vb = next(val_iter)
                v_emb = model.embed(vb.indices)
                v_masked, v_ctx = apply_gates(v_emb, group, noise)
                _, v_dlogit = training_objective(model.forward(v_masked), vb.labels,
                                                 Parameters(), 0.0)
                _, d_alpha = apply_gates_backward(v_ctx, model.backward(v_dlogit))
            _, reg_grad = sparse_regularizer(group, config.target_N)
            sgd_step(group.alpha, d_alpha + config.beta_s * reg_grad, lr_g)
            step += 1
            pending.append(loss)
            if ensemble.open_counts() == [0] * ensemble.k and not warned:
                log.warning("all gates closed at step %d; relying on the loss to reopen", step)
                warned = True
            if step % config.log_every == 0:
                logs.append(snapshot(step, "search", k, float(np.mean(pending)), epoch))
                pending = []
        logs.append(snapshot(step, "search_epoch_end", None, None, epoch))

    retrain_fn = None
    if config.aggregation == "min" and config.method == "ensemble":
        retrain_fn = _min_retrain_fn(config, retrain_set if retrain_set is not None else train)
    agg = config.aggregation if config.method == "ensemble" else "avg"
    if agg == "min" and retrain_fn is None:
        agg = "avg"
    selection = aggregate(ensemble, config.target_N, agg, retrain_fn)
    return SearchResult(selection, ensemble, logs, steps_per_epoch, model)


def _check_closed_gates(params, emb_names, gates, d_emb, wd) -> None:
    closed = np.flatnonzero(gates == 0)
    if closed.size and np.any(d_emb[:, closed, :] != 0):
        raise AssertionError("non-zero loss gradient reached a closed field's embedding")


def _min_retrain_fn(config: PipelineConfig, ds: Dataset):
    def fn(selection, k):
        seed = config.seed + k
        model = build_model(config, ds.schema, seed, fields=selection)
        losses = train_epochs(model, ds, 1, config.batch_size, config.lr_network,
                              config.weight_decay, derive_seed(seed, "min-batches"))
        return losses[0]
    return fn


@dataclass
class RetrainResult:
    auc: float
    epoch_losses: list[float]
    logs: list[dict]
    model: CTRModel


def retrain(config: PipelineConfig, selection, train: Dataset, test: Dataset) -> RetrainResult:
    """Fresh model on the selected fields only, trained from scratch, scored on ``test``."""
    if len(test) == 0:
        raise ValueError("empty test set")
    selected = selection.selected if isinstance(selection, SelectionResult) else selection
    selected = sorted(int(i) for i in selected)
    seed = config.seed + RETRAIN_SEED_OFFSET
    model = build_model(config, train.schema, derive_seed(seed, "retrain-init"), fields=selected)
    losses = train_epochs(model, train, config.retrain_epochs, config.batch_size,
                          config.lr_network, config.weight_decay,
                          derive_seed(seed, "retrain-batches"))
    score = auc(model.predict_proba(test.indices), test.labels)
    logs = [log_record(e, "retrain", loss=l, epoch=e) for e, l in enumerate(losses)]
    return RetrainResult(score, losses, logs, model)


def random_selection(config: PipelineConfig, num_fields: int) -> SelectionResult:
    rng = stream(config.seed, "random-select")
    chosen = tuple(sorted(int(i) for i in rng.choice(num_fields, config.target_N, replace=False)))
    return SelectionResult(chosen, np.zeros((0, num_fields)), "random", False)


def all_fields_selection(num_fields: int) -> SelectionResult:
    return SelectionResult(tuple(range(num_fields)), np.zeros((0, num_fields)), "all", False)


@dataclass
class ExperimentRecord:
    method: str
    seed: int
    selected: list[int]
    test_auc: float
    search_logs: list[dict]
    logs: list[dict] = field(default_factory=list)
    selection: dict | None = None
    config: dict | None = None
    recovery: int | None = None

    def summary(self) -> dict:
        return {"method": self.method, "seed": self.seed, "selected": self.selected,
                "test_auc": self.test_auc, "recovery": self.recovery,
                "search_logs": self.search_logs}


def _retrain_key(config: PipelineConfig, selected, n_train, n_test) -> tuple:
    return (config.model, config.V, config.seed, config.split_seed, config.search_data,
            config.retrain_epochs, config.batch_size, config.lr_network, config.weight_decay,
            tuple(selected), n_train, n_test)


def split_for(config: PipelineConfig, ds: Dataset):
    """(train, validation or None, test) per the configured search data."""
    if config.search_data == "validation":
        train, val, test = data_mod.split(ds, [0.8, 0.1, 0.1], config.split_seed)
        return train, val, test
    train, test = data_mod.split(ds, [0.8, 0.2], config.split_seed)
    return train, None, test


def run_pipeline(config: PipelineConfig, dataset: Dataset, *, splits=None,
                 pretrained: "PretrainResult | dict | None" = None,
                 planted_fields=None, retrain_cache: dict | None = None) -> ExperimentRecord:
    """Pretrain, search, retrain; returns the run summary and its full log.

    ``pretrained`` may carry an earlier pretrain with the same config (or
    just its parameter arrays), skipping that phase.  The cached result is
    copied, never mutated.  ``retrain_cache`` memoizes retrain outcomes by
    every input that determines them.
    """
    m = dataset.schema.num_fields
    config.validate(m)
    train, val, test = splits if splits is not None else split_for(config, dataset)
    logs: list[dict] = []
    search_logs: list[dict] = []
    selection_json = None
    if config.method == "random":
        selection = random_selection(config, m)
    elif config.method == "all_features":
        selection = all_fields_selection(m)
    else:
        if pretrained is None:
            pre = pretrain(config, train)
            logs += pre.logs
            model = pre.model
        elif isinstance(pretrained, PretrainResult):
            logs += [dict(r) for r in pretrained.logs]
            model = load_pretrained(config, dataset.schema, dict(pretrained.model.params.values))
        else:
            model = load_pretrained(config, dataset.schema, pretrained)
        result = search(config, model, train, val)
        search_logs = result.logs
        logs += search_logs
        selection = result.selection
    selection_json = selection.to_json()
    selected = [int(i) for i in selection.selected]
    if retrain_cache is None:
        re = retrain(config, selection, train, test)
        re_auc, re_logs = re.auc, re.logs
    else:
        key = _retrain_key(config, selected, len(train), len(test))
        if key not in retrain_cache:
            re = retrain(config, selection, train, test)
            retrain_cache[key] = (re.auc, re.logs)
        re_auc, re_logs = retrain_cache[key]
    logs += [dict(r) for r in re_logs]
    recovery = None
    if planted_fields is not None:
        recovery = len(set(selected) & set(int(i) for i in planted_fields))
    return ExperimentRecord(config.method, config.seed, selected, float(re_auc), search_logs,
                            logs, selection_json, config.to_dict(), recovery)
