"""Two-level MAML over the trainable parameter set, plus plain training modes.

Inner loop: a base-learner copy of the trainable set adapts to one task
with that corpus's own optimizer (moment statistics persist per corpus
across meta-steps). Outer loop: one update of the trainable set per
meta-batch from the summed post-adaptation test loss.

Two outer-gradient modes exist. First-order (default) takes gradients at
the adapted parameters and applies them to the originals. Exact mode
differentiates through the inner updates, which forces plain SGD inside;
it exists to validate the first-order approximation on small models.

All losses are per-token mean NLL (sum-vs-mean is a scale factor folded
into the learning rates); logs report the same quantity.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .data import (
    Corpus,
    Example,
    MetaBatch,
    RoundRobinState,
    Task,
    build_meta_batch,
    collate,
    iter_batches,
)
from .model import Summarizer


@dataclass
class MetaTrainConfig:
    tasks_per_batch: int = 3
    task_batch_size: int = 4
    inner_steps: int = 4
    inner_lr: float = 2e-4
    outer_lr: float = 2e-4
    meta_steps: int = 6000
    first_order: bool = True
    trainable_mode: str = "adapter-only"
    grad_norm_ceiling: float = 1e4
    meta_val_every: int = 200
    meta_val_batches: int = 600
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        problems = []
        for name in ("tasks_per_batch", "task_batch_size", "meta_steps",
                     "meta_val_every", "meta_val_batches"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.inner_steps < 0:
            problems.append("inner_steps must be >= 0")
        for name in ("inner_lr", "outer_lr"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must be in [0, 1)")
        if self.grad_norm_ceiling <= 0:
            problems.append("grad_norm_ceiling must be positive")
        if self.checkpoint_every < 0:
            problems.append("checkpoint_every must be >= 0")
        if self.trainable_mode not in ("adapter-only", "full"):
            problems.append("trainable_mode must be 'adapter-only' or 'full'")
        if problems:
            raise ValueError("; ".join(problems))


class AdamState:
    """Adam with bias correction; moments keyed by parameter name so the
    statistics survive fresh base-learner copies between tasks."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, tensor in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros(tensor.shape)
                v = np.zeros(tensor.shape)
            else:
                v = self.v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name] = m
            self.v[name] = v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            tensor.data[...] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SgdState:
    """Plain SGD; the only inner optimizer usable in exact mode."""

    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        for name, tensor in params.items():
            tensor.data[...] -= self.lr * grads[name]


class PerCorpusOptimizers:
    """One inner optimizer per source corpus plus the single outer optimizer."""

    def __init__(self, inner: dict[str, AdamState | SgdState], outer: AdamState):
        self.inner = inner
        self.outer = outer

    @classmethod
    def create(cls, corpus_names: Iterable[str], config: MetaTrainConfig) -> "PerCorpusOptimizers":
        make_inner = (lambda: AdamState(config.inner_lr)) if config.first_order \
            else (lambda: SgdState(config.inner_lr))
        inner = {name: make_inner() for name in corpus_names}
        return cls(inner=inner, outer=AdamState(config.outer_lr))

    def inner_for(self, corpus: str) -> AdamState | SgdState:
        try:
            return self.inner[corpus]
        except KeyError:
            raise KeyError(f"no inner optimizer registered for corpus {corpus!r}") from None


class GradientOverflowError(RuntimeError):
    """Meta-gradient norm exceeded the ceiling (or went non-finite)."""

    def __init__(self, step: int, norm: float, ceiling: float, cause: str = ""):
        detail = f" ({cause})" if cause else ""
        super().__init__(
            f"meta-step {step}: trainable-gradient norm {norm:.6g} exceeded "
            f"ceiling {ceiling:.6g}{detail}; aborting instead of clipping"
        )
        self.step = step
        self.norm = norm
        self.log: TrainLog | None = None


class DivergenceError(RuntimeError):
    """Training loss went non-finite; parameters restored to the last snapshot."""

    def __init__(self, step: int, restored_step: int):
        super().__init__(
            f"non-finite loss at step {step}; parameters restored to step {restored_step}"
        )
        self.step = step
        self.restored_step = restored_step
        self.log: TrainLog | None = None


@dataclass
class TrainRecord:
    step: int
    inner_loss: float
    outer_loss: float
    grad_norm: float
    seconds: float


TRAIN_LOG_HEADER = ["step", "inner_loss", "outer_loss", "grad_norm", "seconds"]
VAL_LOG_HEADER = ["step", "val_nll"]


def _record_row(r: TrainRecord) -> list:
    return [r.step, f"{r.inner_loss:.10f}", f"{r.outer_loss:.10f}",
            f"{r.grad_norm:.10f}", f"{r.seconds:.4f}"]


@dataclass
class TrainLog:
    """Append-only step records; optionally streamed to a CSV as they land."""

    records: list[TrainRecord] = field(default_factory=list)
    val_records: list[tuple[int, float]] = field(default_factory=list)
    stream_path: str | None = None

    def append(self, record: TrainRecord) -> None:
        if not (np.isfinite(record.grad_norm) and np.isfinite(record.outer_loss)):
            raise NonFiniteError(f"refusing to log non-finite record at step {record.step}")
        self.records.append(record)
        if self.stream_path is not None:
            fresh = len(self.records) == 1
            with Path(self.stream_path).open("w" if fresh else "a", newline="",
                                             encoding="utf-8") as fh:
                writer = csv.writer(fh)
                if fresh:
                    writer.writerow(TRAIN_LOG_HEADER)
                writer.writerow(_record_row(record))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRAIN_LOG_HEADER)
            for r in self.records:
                writer.writerow(_record_row(r))

    def write_val_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(VAL_LOG_HEADER)
            for step, nll in self.val_records:
                writer.writerow([step, f"{nll:.10f}"])


def read_train_csv(path) -> list[TrainRecord]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != TRAIN_LOG_HEADER:
            raise ValueError(f"unexpected training log header: {header}")
        for row in reader:
            out.append(TrainRecord(int(row[0]), float(row[1]), float(row[2]),
                                   float(row[3]), float(row[4])))
    return out


def read_val_csv(path) -> list[tuple[int, float]]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != VAL_LOG_HEADER:
            raise ValueError(f"unexpected validation log header: {header}")
        for row in reader:
            out.append((int(row[0]), float(row[1])))
    return out


# ---------------------------------------------------------------------------
# losses and adaptation
# ---------------------------------------------------------------------------


def batch_loss(
    model: Summarizer,
    examples: Sequence[Example],
    params: Mapping[str, Tensor] | None = None,
    train_rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-token mean NLL of a batch under (optionally overridden) parameters."""
    src, tgt = collate(examples)
    total, n_tokens = model.batch_nll(src, tgt, params=params, train_rng=train_rng)
    return ad.scale(total, 1.0 / n_tokens)


def _dropout_rng(model: Summarizer, key: tuple) -> np.random.Generator | None:
    if model.cfg.enc_dropout == 0.0 and model.cfg.dec_dropout == 0.0:
        return None
    return np.random.default_rng(key)


def adapt_parameters(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    psi: Mapping[str, Tensor],
    steps: int,
    optimizer: AdamState | SgdState,
) -> tuple[dict[str, Tensor], float | None]:
    """Generic inner loop: copy psi, take `steps` optimizer updates on loss_fn.

    Returns the adapted copy and the loss at the final step (None when
    steps == 0). psi itself is never mutated.
    """
    phi = {name: t.copy(requires_grad=True) for name, t in psi.items()}
    last = None
    for _ in range(steps):
        with ad.Tape() as tape:
            loss = loss_fn(phi)
        grads = tape.backward(loss, wrt=list(phi.values()))
        optimizer.step(phi, {name: grads[t].data for name, t in phi.items()})
        last = loss.item()
    return phi, last


def inner_adapt(
    model: Summarizer,
    task: Task,
    config: MetaTrainConfig,
    inner_opt: AdamState | SgdState,
    rng_key: tuple = (),
) -> tuple[dict[str, Tensor], float | None]:
    """Adapt a fresh base-learner to one task; the store stays untouched."""
    psi = model.store.group(config.trainable_mode)
    counter = [0]

    def loss_fn(phi):
        rng = _dropout_rng(model, rng_key + (counter[0],))
        counter[0] += 1
        return batch_loss(model, task.train, params=phi, train_rng=rng)

    return adapt_parameters(loss_fn, psi, config.inner_steps, inner_opt)


def _grad_norm(accum: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in accum.values())))


def outer_step(
    model: Summarizer,
    batch: MetaBatch,
    config: MetaTrainConfig,
    optimizers: PerCorpusOptimizers,
    step: int = 0,
) -> tuple[float, float, float]:
    """One meta-update of the trainable set from a batch of tasks.

    Returns (mean final inner loss, mean post-adaptation test loss,
    trainable-gradient norm). Raises GradientOverflowError instead of
    clipping when the norm crosses the ceiling or goes non-finite.
    """
    psi = model.store.group(config.trainable_mode)
    _set_requires_grad(model, psi)
    names = sorted(psi)
    if config.first_order:
        accum, inner_losses, outer_losses = _outer_grads_first_order(
            model, batch, config, optimizers, psi, step
        )
    else:
        accum, inner_losses, outer_losses = _outer_grads_exact(
            model, batch, config, optimizers, psi, names, step
        )
    norm = _grad_norm(accum)
    if not np.isfinite(norm) or norm > config.grad_norm_ceiling:
        raise GradientOverflowError(step, norm, config.grad_norm_ceiling)
    optimizers.outer.step(psi, accum)
    inner_mean = float(np.mean([x for x in inner_losses if x is not None])) \
        if any(x is not None for x in inner_losses) else float(np.mean(outer_losses))
    return inner_mean, float(np.mean(outer_losses)), norm


TaskLossPair = tuple[Callable[[Mapping[str, Tensor]], Tensor],
                     Callable[[Mapping[str, Tensor]], Tensor]]


def meta_gradients_first_order(
    task_losses: Sequence[TaskLossPair],
    psi: Mapping[str, Tensor],
    inner_steps: int,
    inner_opts: Sequence[AdamState | SgdState],
) -> tuple[dict[str, np.ndarray], list[float | None], list[float]]:
    """Summed test-loss gradients taken AT the adapted parameters.

    Each task adapts a private copy of psi with its own optimizer; the
    gradient of its test loss w.r.t. the copy is credited to psi's names.
    """
    accum = {name: np.zeros(t.shape) for name, t in psi.items()}
    inner_losses: list[float | None] = []
    outer_losses: list[float] = []
    for (tr_fn, te_fn), opt in zip(task_losses, inner_opts):
        phi, inner_loss = adapt_parameters(tr_fn, psi, inner_steps, opt)
        with ad.Tape() as tape:
            te_loss = te_fn(phi)
        grads = tape.backward(te_loss, wrt=list(phi.values()))
        for name, tensor in phi.items():
            accum[name] += grads[tensor].data
        inner_losses.append(inner_loss)
        outer_losses.append(te_loss.item())
    return accum, inner_losses, outer_losses


def meta_gradients_exact(
    task_losses: Sequence[TaskLossPair],
    psi: Mapping[str, Tensor],
    inner_steps: int,
    inner_lrs: Sequence[float],
) -> tuple[dict[str, np.ndarray], list[float | None], list[float]]:
    """Summed test-loss gradients differentiated THROUGH the inner SGD steps."""
    names = sorted(psi)
    inner_losses: list[float | None] = []
    outer_losses: list[float] = []
    with ad.Tape() as tape:
        total = None
        for (tr_fn, te_fn), lr in zip(task_losses, inner_lrs):
            phi = dict(psi)
            last_inner = None
            for _ in range(inner_steps):
                tr_loss = tr_fn(phi)
                grads = tape.grad(tr_loss, [phi[n] for n in names], create_graph=True)
                phi = {n: ad.sub(phi[n], ad.scale(g, lr))
                       for n, g in zip(names, grads)}
                last_inner = tr_loss.item()
            te_loss = te_fn(phi)
            total = te_loss if total is None else ad.add(total, te_loss)
            inner_losses.append(last_inner)
            outer_losses.append(te_loss.item())
        grad_map = tape.backward(total, wrt=[psi[n] for n in names])
    accum = {n: grad_map[psi[n]].data for n in names}
    return accum, inner_losses, outer_losses


def _task_loss_pair(model, task, config, step, t_idx) -> TaskLossPair:
    counter = [0]

    def tr_fn(phi):
        rng = _dropout_rng(model, (step, t_idx, 0, counter[0]))
        counter[0] += 1
        return batch_loss(model, task.train, params=phi, train_rng=rng)

    def te_fn(phi):
        return batch_loss(model, task.test, params=phi,
                          train_rng=_dropout_rng(model, (step, t_idx, 1)))

    return tr_fn, te_fn


def _outer_grads_first_order(model, batch, config, optimizers, psi, step):
    pairs = [_task_loss_pair(model, task, config, step, i)
             for i, task in enumerate(batch.tasks)]
    opts = [optimizers.inner_for(task.corpus) for task in batch.tasks]
    return meta_gradients_first_order(pairs, psi, config.inner_steps, opts)


def _outer_grads_exact(model, batch, config, optimizers, psi, names, step):
    pairs = [_task_loss_pair(model, task, config, step, i)
             for i, task in enumerate(batch.tasks)]
    lrs = []
    for task in batch.tasks:
        opt = optimizers.inner_for(task.corpus)
        if not isinstance(opt, SgdState):
            raise ValueError("exact mode requires plain SGD inner optimizers")
        opt.t += config.inner_steps
        lrs.append(opt.lr)
    return meta_gradients_exact(pairs, psi, config.inner_steps, lrs)


# ---------------------------------------------------------------------------
# training drivers
# ---------------------------------------------------------------------------


def validation_nll(
    model: Summarizer,
    corpus: Corpus,
    batch_size: int,
    n_batches: int,
    rng: np.random.Generator,
) -> float:
    """Eval-mode per-token NLL averaged over sampled batches (no adaptation)."""
    values = []
    for _ in range(n_batches):
        idx = rng.choice(len(corpus), size=min(batch_size, len(corpus)), replace=False)
        values.append(batch_loss(model, [corpus.examples[i] for i in idx]).item())
    return float(np.mean(values))


def meta_train(
    model: Summarizer,
    source_corpora: Sequence[Corpus],
    config: MetaTrainConfig,
    seed: int = 0,
    val_corpus: Corpus | None = None,
    start_step: int = 0,
    optimizers: PerCorpusOptimizers | None = None,
    stream_path: str | None = None,
    checkpoint_fn: Callable[[int], None] | None = None,
) -> TrainLog:
    """Run `meta_steps` outer updates; mutates the model's trainable set.

    With a validation corpus, the per-token NLL is measured every
    ``meta_val_every`` steps and the best-validation parameters are
    restored at the end (checkpoint selection). ``stream_path`` appends
    each record to a CSV as it lands; ``checkpoint_fn`` fires every
    ``config.checkpoint_every`` steps.
    """
    if not source_corpora:
        raise ValueError("meta_train needs at least one source corpus")
    if val_corpus is not None and any(c.name == val_corpus.name for c in source_corpora):
        raise ValueError("validation corpus must be excluded from sources")
    if optimizers is None:
        optimizers = PerCorpusOptimizers.create([c.name for c in source_corpora], config)
    scheduler = RoundRobinState(position=start_step * config.tasks_per_batch)
    task_rng = np.random.default_rng((seed, 1, start_step))
    log = TrainLog(stream_path=str(stream_path) if stream_path else None)
    best_val = np.inf
    best_params: dict[str, np.ndarray] | None = None
    psi = model.store.group(config.trainable_mode)

    for step in range(start_step + 1, start_step + config.meta_steps + 1):
        batch = build_meta_batch(
            source_corpora, config.tasks_per_batch, config.task_batch_size,
            scheduler, task_rng,
        )
        t0 = time.perf_counter()
        try:
            inner, outer, norm = outer_step(model, batch, config, optimizers, step=step)
        except GradientOverflowError as exc:
            exc.log = log
            raise
        except NonFiniteError as exc:
            wrapped = GradientOverflowError(step, float("nan"),
                                            config.grad_norm_ceiling, cause=str(exc))
            wrapped.log = log
            raise wrapped from exc
        log.append(TrainRecord(step, inner, outer, norm, time.perf_counter() - t0))
        if val_corpus is not None and step % config.meta_val_every == 0:
            val = validation_nll(
                model, val_corpus, config.task_batch_size, config.meta_val_batches,
                np.random.default_rng((seed, 2, step)),
            )
            log.val_records.append((step, val))
            if val < best_val:
                best_val = val
                best_params = {n: t.data.copy() for n, t in psi.items()}
        if checkpoint_fn is not None and config.checkpoint_every \
                and step % config.checkpoint_every == 0:
            checkpoint_fn(step)

    if best_params is not None:
        for name, tensor in psi.items():
            tensor.data[...] = best_params[name]
    return log


def _set_requires_grad(model: Summarizer, trainable: Mapping[str, Tensor]) -> None:
    for name, tensor in model.store.all().items():
        tensor.requires_grad = name in trainable


def _plain_training_loop(
    model: Summarizer,
    trainable: dict[str, Tensor],
    examples: Sequence[Example],
    steps: int,
    lr: float,
    batch_size: int,
    seed: int,
    adapters: bool,
    val_examples: Sequence[Example] | None = None,
    eval_every: int = 10,
    snapshot_every: int = 50,
) -> TrainLog:
    _set_requires_grad(model, trainable)
    opt = AdamState(lr)
    rng = np.random.default_rng((seed, 3))
    batches = iter_batches(examples, batch_size, rng)
    log = TrainLog()
    snapshot = {n: t.data.copy() for n, t in trainable.items()}
    snapshot_step = 0
    best_val = np.inf
    best: dict[str, np.ndarray] | None = None
    for step in range(1, steps + 1):
        batch = next(batches)
        t0 = time.perf_counter()
        try:
            with ad.Tape() as tape:
                loss = _loss_with_adapters(model, batch, adapters,
                                           _dropout_rng(model, (seed, 4, step)))
            grads = tape.backward(loss, wrt=list(trainable.values()))
        except NonFiniteError:
            for name, tensor in trainable.items():
                tensor.data[...] = snapshot[name]
            err = DivergenceError(step, snapshot_step)
            err.log = log
            raise err from None
        opt.step(trainable, {n: grads[t].data for n, t in trainable.items()})
        value = loss.item()
        log.append(TrainRecord(step, value, value, _grad_norm(
            {n: grads[t].data for n, t in trainable.items()}), time.perf_counter() - t0))
        if step % snapshot_every == 0:
            snapshot = {n: t.data.copy() for n, t in trainable.items()}
            snapshot_step = step
        if val_examples and step % eval_every == 0:
            val = batch_loss(model, list(val_examples)).item()
            log.val_records.append((step, val))
            if val < best_val:
                best_val = val
                best = {n: t.data.copy() for n, t in trainable.items()}
    if best is not None:
        for name, tensor in trainable.items():
            tensor.data[...] = best[name]
    return log


def _loss_with_adapters(model, examples, adapters, rng):
    src, tgt = collate(examples)
    total, n = model.batch_nll(src, tgt, adapters=adapters, train_rng=rng)
    return ad.scale(total, 1.0 / n)


def pretrain_base(
    model: Summarizer,
    corpus: Corpus,
    steps: int,
    lr: float,
    batch_size: int = 8,
    seed: int = 0,
) -> TrainLog:
    """Train the base model (all non-adapter parameters) by Adam on NLL.

    Adapters stay frozen at their identity initialization and are skipped
    in the forward pass, which is equivalent and cheaper. A non-finite
    loss aborts with parameters restored to the last snapshot.
    """
    trainable = {n: t for n, t in model.store.all().items() if ".adapter." not in n}
    return _plain_training_loop(
        model, trainable, corpus.examples, steps, lr, batch_size, seed,
        adapters=False,
    )


def finetune(
    model: Summarizer,
    examples: Sequence[Example],
    steps: int,
    lr: float,
    mode: str,
    batch_size: int = 4,
    val_examples: Sequence[Example] | None = None,
    seed: int = 0,
) -> TrainLog:
    """Adapt to the target: 'adapter-only' updates the meta set, 'full'
    updates everything (the TL-FULL baseline). steps=0 is a no-op."""
    if not examples:
        raise ValueError("finetune needs at least one example")
    trainable = model.store.group(mode)
    if steps == 0:
        return TrainLog()
    return _plain_training_loop(
        model, trainable, examples, steps, lr, batch_size, seed,
        adapters=True, val_examples=val_examples,
    )
