"""Training loops, the data-parallel gradient contract and grid search."""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint, check_compatible, load_checkpoint
from .errors import ConfigError, ContractError, DataError
from .model import ModelConfig, Parameters, decode_batch, encode_batch, init_params, pad_targets
from .numerics import AdamState, Tensor, adam_step, backward, cross_entropy
from .tasks import RenderedPair
from .tokenization import PAD


@dataclass(frozen=True)
class TrainPlan:
    init: str = "scratch"           # "scratch" or a checkpoint path
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 1
    warmup_ratio: float = 0.0
    label_smoothing: float = 0.1
    seed: int = 0
    workers: int = 1
    max_steps: int | None = None
    resume_optimizer: bool = False

    def validate(self) -> "TrainPlan":
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1]")
        if self.workers < 1 or self.batch_size < self.workers:
            raise ConfigError("batch_size must be at least the worker count (and workers >= 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        return self

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def lr_at(step: int, total: int, warmup: int, base: float) -> float:
    """Linear warmup to ``base`` over ``warmup`` steps, then linear decay towards 0."""
    if step < warmup:
        return base * (step + 1) / warmup
    return base * (total - step) / max(total - warmup, 1)


# -- loss and gradients ------------------------------------------------------

def batch_loss(params: Parameters, pairs: Sequence[RenderedPair], smoothing: float = 0.0,
               rng: np.random.Generator | None = None) -> Tensor:
    """Mean over examples of each example's mean token loss (PAD positions ignored)."""
    if not pairs:
        raise DataError("empty batch")
    states, padding = encode_batch(params, [p.source for p in pairs], rng)
    targets = pad_targets([p.target for p in pairs])
    inputs, labels = targets[:, :-1], targets[:, 1:]
    logits = decode_batch(params, states, padding, inputs, rng)
    live = (labels != PAD).astype(np.float64)
    counts = live.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise DataError("target with no tokens after BOS")
    weights = live / counts / len(pairs)
    return cross_entropy(logits, labels, weights, smoothing)


def gradients(params: Parameters, pairs: Sequence[RenderedPair], smoothing: float = 0.0,
              rng: np.random.Generator | None = None) -> tuple[float, dict[str, np.ndarray]]:
    loss = batch_loss(params, pairs, smoothing, rng)
    names = list(params)
    grads = backward(loss, [params[n] for n in names])
    return loss.item(), dict(zip(names, grads))


def _read_only_view(params: Parameters) -> Parameters:
    view = Parameters(params.config)
    for name, p in params.items():
        data = p.data.view()
        data.flags.writeable = False
        view[name] = Tensor(data, requires_grad=True)
    return view


def data_parallel_gradients(params: Parameters, pairs: Sequence[RenderedPair], workers: int,
                            smoothing: float = 0.0) -> tuple[float, dict[str, np.ndarray]]:
    """Shard the batch contiguously over ``workers`` threads and average their gradients.

    Each shard's gradient is of its own mean loss, so the average over equal
    shards equals the full-batch gradient. Reduction runs in ascending worker order.
    """
    n = len(pairs)
    if workers < 1 or n % workers:
        raise ContractError(f"batch of {n} is not divisible into {workers} equal shards")
    size = n // workers
    shards = [pairs[i * size:(i + 1) * size] for i in range(workers)]
    views = [_read_only_view(params) for _ in range(workers)]
    if workers == 1:
        results = [gradients(views[0], shards[0], smoothing)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda w: gradients(views[w], shards[w], smoothing), range(workers)))
    loss = 0.0
    total = {name: np.zeros_like(p.data) for name, p in params.items()}
    for shard_loss, grads in results:
        loss += shard_loss
        for name in total:
            total[name] += grads[name]
    return loss / workers, {k: v / workers for k, v in total.items()}


# -- batching ------------------------------------------------------------------

def _as_mixture(data) -> dict[str, list[RenderedPair]]:
    if isinstance(data, Mapping):
        mixture = {k: list(v) for k, v in data.items() if len(v)}
    else:
        mixture = {"data": list(data)}
    if not mixture or not any(mixture.values()):
        raise DataError("training data is empty")
    return mixture


class BatchSampler:
    """Seeded batches; with several datasets each batch comes from one task drawn ∝ size."""

    def __init__(self, data, batch_size: int, seed: int, multiple: int = 1):
        self.mixture = _as_mixture(data)
        self.names = sorted(self.mixture)
        sizes = np.array([len(self.mixture[k]) for k in self.names], dtype=np.float64)
        self.probs = sizes / sizes.sum()
        self.total = int(sizes.sum())
        self.batch_size = batch_size
        self.multiple = multiple
        self.rng = np.random.default_rng(seed)
        self._order = {k: [] for k in self.names}

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.total / self.batch_size)

    def _draw(self, task: str, n: int) -> list[RenderedPair]:
        pool = self.mixture[task]
        out = []
        while len(out) < n:
            if not self._order[task]:
                self._order[task] = list(self.rng.permutation(len(pool)))
            out.append(pool[self._order[task].pop()])
        return out

    def next_batch(self) -> list[RenderedPair]:
        task = self.names[0] if len(self.names) == 1 else self.names[self.rng.choice(len(self.names), p=self.probs)]
        n = min(self.batch_size, len(self.mixture[task])) if len(self.names) > 1 else self.batch_size
        n = max(self.multiple, n - n % self.multiple)
        return self._draw(task, n)


# -- training ------------------------------------------------------------------

StepCallback = Callable[[int, float, Parameters], bool]


def _initial_state(plan: TrainPlan, config: ModelConfig) -> tuple[Parameters, AdamState, dict]:
    if plan.init == "scratch":
        params = init_params(config, plan.seed)
        return params, AdamState.for_params(params, lr=plan.lr), {"init": "scratch"}
    donor = load_checkpoint(plan.init)
    check_compatible(config, {k: v.shape for k, v in donor.params.items()})
    params = Parameters(config, donor.params.items())
    adam = donor.adam if plan.resume_optimizer else AdamState.for_params(params, lr=plan.lr)
    return params, adam, {"init": "from_checkpoint", "donor": str(plan.init), "donor_step": donor.step}


def train(plan: TrainPlan, data, config: ModelConfig,
          callback: StepCallback | None = None) -> Checkpoint:
    """Adam on label-smoothed cross-entropy with a warmup/decay schedule.

    ``data`` is a list of rendered pairs or a mapping task -> pairs (mixture).
    ``callback(step, loss, params)`` may return True to stop early.
    """
    plan.validate()
    config = config.validate()
    params, adam, provenance = _initial_state(plan, config)
    sampler = BatchSampler(data, plan.batch_size, plan.seed, plan.workers)
    total = plan.epochs * sampler.steps_per_epoch
    if plan.max_steps is not None:
        total = min(total, plan.max_steps)
    warmup = round(plan.warmup_ratio * total)
    history: list[float] = []
    for step in range(total):
        batch = sampler.next_batch()
        loss, grads = data_parallel_gradients(params, batch, plan.workers, plan.label_smoothing)
        history.append(loss)
        adam_step(params, grads, adam, lr=lr_at(step, total, warmup, plan.lr))
        if callback is not None and callback(step, loss, params):
            break
    provenance.update(plan=plan.digest(), steps=len(history))
    return Checkpoint(config=config, params=params, adam=adam,
                      rng_state=sampler.rng.bit_generator.state, step=len(history),
                      provenance=provenance, history=history)


def first_batch(plan: TrainPlan, data) -> list[RenderedPair]:
    """The batch ``train`` would see at step 0 under ``plan``."""
    return BatchSampler(data, plan.batch_size, plan.seed, plan.workers).next_batch()


def steps_to_target(history: Sequence[float], target: float) -> int | None:
    """1-based index of the first step whose loss is at or below ``target``."""
    for i, loss in enumerate(history):
        if loss <= target:
            return i + 1
    return None


# -- grid search ---------------------------------------------------------------

GRID_AXES = ("lr", "batch_size", "epochs", "warmup_ratio")


def grid_search(grid: Mapping[str, Sequence], base: TrainPlan, train_data, dev_data,
                config: ModelConfig, metric: Callable[[Checkpoint, Sequence], float],
                trainer: Callable[..., Checkpoint] = train) -> tuple[TrainPlan, list[dict]]:
    """Exhaustive search; ties go to lower lr, then smaller batch, then fewer epochs."""
    if not dev_data:
        raise DataError("grid search needs a non-empty dev split")
    axes = []
    for name in GRID_AXES:
        values = list(grid.get(name, [getattr(base, name)]))
        if not values:
            raise ConfigError(f"grid axis {name!r} is empty")
        axes.append(values)
    results = []
    for combo in itertools.product(*axes):
        plan = replace(base, **dict(zip(GRID_AXES, combo))).validate()
        score = float(metric(trainer(plan, train_data, config), dev_data))
        results.append({**dict(zip(GRID_AXES, combo)), "score": score, "plan": plan})
    best = min(results, key=lambda r: (-r["score"], r["lr"], r["batch_size"], r["epochs"], r["warmup_ratio"]))
    return best["plan"], results
