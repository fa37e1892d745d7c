"""Optimization: SGD with decay or Adam, clipping, replicas, checkpoints."""
from __future__ import annotations

import hashlib
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import epoch_batches, read_json, write_json
from .model import ModelConfig, Seq2SeqModel, forward_loss, perplexity
from .tensor import ContainerError, Tape, backward, load_tensors, save_tensors

log = logging.getLogger("minimt.train")

METHODS = ("SGD", "Adam")
MODES = ("sync", "async")
DEFAULT_LR = {"SGD": 1.0, "Adam": 0.001}
CHECKPOINT_VERSION = 1


class TrainError(RuntimeError):
    pass


class NonFiniteError(TrainError):
    pass


class ReplicaDivergence(TrainError):
    pass


class StalenessError(TrainError):
    pass


class CheckpointError(ContainerError):
    pass


@dataclass
class OptimState:
    method: str = "SGD"
    learning_rate: float | None = None
    decay_factor: float = 0.5
    start_decay_at: int = 9
    clip_norm: float = 5.0
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    moments: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"optim method must be one of {METHODS}, got {self.method!r}")
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.method]
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")

    def scalars(self):
        d = asdict(self)
        d.pop("moments")
        return d

    @classmethod
    def from_scalars(cls, d):
        return cls(**d)


@dataclass
class TrainSchedule:
    epochs: int = 13
    replicas: int = 1
    mode: str = "sync"
    staleness_bound: int = 1
    seed: int = 1
    batch_size: int = 64
    report_every: int = 50

    def __post_init__(self):
        if self.replicas < 1:
            raise ValueError(f"replicas must be >= 1, got {self.replicas}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.staleness_bound < 0:
            raise ValueError("staleness_bound must be >= 0")


# ---------------------------------------------------------------------------
# update rules
# ---------------------------------------------------------------------------

def global_norm(grads):
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_and_step(model, grads, optim):
    """Clip ``grads`` (name -> array) to ``optim.clip_norm`` and update in place.

    Returns the pre-clip global norm.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NonFiniteError(f"non-finite gradient in {name!r} ({bad} of {g.size} entries) at step {optim.step}")
    norm = global_norm(grads)
    scale = 1.0
    if optim.clip_norm and norm > optim.clip_norm:
        scale = optim.clip_norm / norm
    lr = optim.learning_rate
    if optim.method == "Adam":
        t = optim.step + 1
        c1 = 1.0 - optim.beta1 ** t
        c2 = 1.0 - optim.beta2 ** t
    for name, g in grads.items():
        p = model.params[name]
        if scale != 1.0:
            g = g * scale
        if optim.method == "SGD":
            p.data -= lr * g
        else:
            m, v = optim.moments.setdefault(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
            m *= optim.beta1
            m += (1.0 - optim.beta1) * g
            v *= optim.beta2
            v += (1.0 - optim.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + optim.adam_eps)
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"update produced non-finite values in {name!r} at step {optim.step}")
    optim.step += 1
    return norm


def maybe_decay(optim, val_ppl_history, epoch, start_decay_at=None):
    """Halve-style decay after ``epoch`` (1-based) under the SGD schedule.

    Decays when ``epoch >= start_decay_at`` or the latest validation
    perplexity is no better than the previous one. Adam is left alone.
    """
    if optim.method != "SGD":
        return optim
    start = optim.start_decay_at if start_decay_at is None else start_decay_at
    stalled = len(val_ppl_history) >= 2 and val_ppl_history[-1] >= val_ppl_history[-2]
    if (start is not None and epoch >= start) or stalled:
        optim.learning_rate *= optim.decay_factor
    return optim


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def step_rng(seed, step, slot):
    """Dropout randomness for one batch of one update."""
    return np.random.default_rng([seed, step, slot])


@dataclass
class GradResult:
    grads: dict
    loss: float
    n_tokens: int


def compute_gradients(model, batch, rng, vocab_tgt=None):
    """Summed (not averaged) NLL gradients of one batch, keyed by name."""
    with Tape() as tape:
        loss, n = forward_loss(model, batch, training=True, rng=rng, vocab_tgt=vocab_tgt)
    by_id = backward(tape, loss)
    grads = {}
    for name, p in model.params.items():
        p.grad = None
        g = by_id.get(p.id)
        grads[name] = np.zeros_like(p.data) if g is None else g
    return GradResult(grads, float(loss.data), n)


def _combine(results):
    """Sum replica gradients in replica order and normalize by total tokens."""
    total = sum(r.n_tokens for r in results)
    out = {}
    for name in results[0].grads:
        acc = results[0].grads[name].copy()
        for r in results[1:]:
            acc += r.grads[name]
        out[name] = acc / total
    return out, total


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    loss: float = 0.0
    n_tokens: int = 0
    steps: int = 0
    batches: int = 0

    @property
    def ppl(self):
        return perplexity(self.loss, self.n_tokens)


class Reporter:
    """Emits "step, lr, ppl, tokens/sec" every ``every`` updates."""

    def __init__(self, every, sink=None):
        self.every = every
        self.sink = sink or log.info
        self._reset()

    def _reset(self):
        self.loss, self.tokens, self.start = 0.0, 0, time.perf_counter()

    def update(self, step, lr, loss, tokens):
        self.loss += loss
        self.tokens += tokens
        if self.every and step % self.every == 0:
            elapsed = max(time.perf_counter() - self.start, 1e-9)
            self.sink(f"step {step}, lr {lr:.6g}, ppl {perplexity(self.loss, self.tokens):.4f}, "
                      f"tokens/sec {self.tokens / elapsed:.0f}")
            self._reset()


def _replicas(model, k, existing=None):
    if existing is not None and len(existing) == k:
        return existing
    return [model] + [model.clone() for _ in range(k - 1)]


def train_epoch_sync(model, batches, optim, replicas=1, seed=1, vocab_tgt=None, on_step=None, max_steps=None,
                     pool=None, replica_models=None):
    """Synchronous data parallelism over ``batches``.

    Each update takes the next ``replicas`` batches, one per replica; the
    summed gradients are normalized by the total target-token count and
    applied once to the master, which is then broadcast back. Replica 0 is
    the master itself. ``on_step(step, loss, n_tokens)`` sees the pre-update
    loss of every update. Returns EpochStats.
    """
    reps = _replicas(model, replicas, replica_models)
    for r in reps[1:]:
        r.copy_from(model)
    stats = EpochStats()
    own_pool = pool is None and replicas > 1
    if own_pool:
        pool = ThreadPoolExecutor(max_workers=replicas)
    try:
        it = iter(batches)
        while max_steps is None or stats.steps < max_steps:
            group = [b for _, b in zip(range(replicas), it)]
            if not group:
                break
            step = optim.step
            jobs = [(reps[k], b, step_rng(seed, step, k)) for k, b in enumerate(group)]
            if len(jobs) == 1:
                results = [compute_gradients(jobs[0][0], jobs[0][1], jobs[0][2], vocab_tgt)]
            else:
                results = list(pool.map(lambda j: compute_gradients(j[0], j[1], j[2], vocab_tgt), jobs))
            grads, n = _combine(results)
            loss = sum(r.loss for r in results)
            clip_and_step(model, grads, optim)
            expect = model.checksum() if replicas > 1 else None
            for r in reps[1:]:
                r.copy_from(model)
                if r.checksum() != expect:
                    raise ReplicaDivergence(f"replica checksum mismatch after broadcast at step {optim.step}")
            stats.loss += loss
            stats.n_tokens += n
            stats.steps += 1
            stats.batches += len(group)
            if on_step is not None:
                on_step(optim.step, loss, n)
    finally:
        if own_pool:
            pool.shutdown()
    return stats


def train_epoch_async(model, batches, optim, replicas=1, staleness_bound=1, seed=1, vocab_tgt=None, on_step=None,
                      max_steps=None):
    """Bounded-staleness asynchronous training on a shared master.

    Worker k handles batches k, k+K, ... Batch i is computed on a snapshot
    of the master taken at version ``max(0, i - s)`` with
    ``s = min(staleness_bound, K - 1)`` and applied as the master's i-th
    update, so a gradient is never more than ``staleness_bound`` updates old.
    Snapshots and applies happen under one lock; gradient computation runs
    without it. The schedule is fixed by (K, bound), which keeps runs
    reproducible; with bound 0 it is sequential single-worker SGD.
    """
    batches = list(batches if max_steps is None else batches[:max_steps])
    n = len(batches)
    stats = EpochStats()
    if n == 0:
        return stats
    s = min(staleness_bound, replicas - 1)
    base = optim.step
    reps = [model.clone() for _ in range(replicas)]
    cond = threading.Condition()
    state = {"version": 0, "snapped": set(), "error": None}

    def snap_version(i):
        return max(0, i - s)

    def readers_of(v):
        # batches whose snapshot is version v; all must snap before v advances
        if v == 0:
            return range(0, min(s, n - 1) + 1)
        return range(v + s, v + s + 1) if v + s < n else range(0)

    def wait(pred):
        while not pred():
            if state["error"] is not None:
                raise TrainError("another worker failed")
            cond.wait()

    def worker(k):
        rep = reps[k]
        try:
            for i in range(k, n, replicas):
                with cond:
                    wait(lambda: state["version"] == snap_version(i))
                    rep.copy_from(model)
                    version = state["version"]
                    state["snapped"].add(i)
                    cond.notify_all()
                res = compute_gradients(rep, batches[i], step_rng(seed, base + i, 0), vocab_tgt)
                with cond:
                    wait(lambda: state["version"] == i and all(j in state["snapped"] for j in readers_of(i)))
                    if i - version > staleness_bound:
                        raise StalenessError(f"batch {i} gradient is {i - version} updates old (bound {staleness_bound})")
                    grads = {name: g / res.n_tokens for name, g in res.grads.items()}
                    clip_and_step(model, grads, optim)
                    stats.loss += res.loss
                    stats.n_tokens += res.n_tokens
                    stats.steps += 1
                    stats.batches += 1
                    if on_step is not None:
                        on_step(optim.step, res.loss, res.n_tokens)
                    state["version"] += 1
                    cond.notify_all()
        except BaseException as exc:
            with cond:
                if state["error"] is None:
                    state["error"] = exc
                cond.notify_all()

    threads = [threading.Thread(target=worker, args=(k,), daemon=True) for k in range(min(replicas, n))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if state["error"] is not None:
        raise state["error"]
    return stats


def evaluate(model, batches, vocab_tgt=None):
    """(perplexity, per-token accuracy, total nll, token count) without a tape."""
    nll, tokens, correct = 0.0, 0, 0
    for b in batches:
        loss, n, c = forward_loss(model, b, vocab_tgt=vocab_tgt, return_stats=True)
        nll += float(loss.data)
        tokens += n
        correct += c
    return perplexity(nll, tokens), correct / max(tokens, 1), nll, tokens


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def sidecar_path(path):
    return path + ".json"


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path, model, optim, progress=None, extra=None):
    """Write parameters and Adam moments plus a JSON sidecar.

    Arrays keep the parameters' dtype so a 64-bit run resumes bitwise. The
    sidecar records the container's SHA-256; both files are written to a
    temporary name and renamed into place.
    """
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    for name, (m, v) in optim.moments.items():
        arrays[f"adam_m/{name}"] = m
        arrays[f"adam_v/{name}"] = v
    save_tensors(path, arrays)
    meta = {
        "format": "minimt-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "config_hash": model.config.digest(),
        "dtype": model.dtype.name,
        "optim": optim.scalars(),
        "progress": progress or {},
        "container_sha256": _file_sha256(path),
    }
    meta.update(extra or {})
    write_json(sidecar_path(path), meta)
    return meta


def load_checkpoint(path):
    """Return (model, optim, meta); raises before building anything on error."""
    try:
        meta = read_json(sidecar_path(path))
    except FileNotFoundError:
        raise CheckpointError(f"missing checkpoint sidecar {sidecar_path(path)}") from None
    if meta.get("format") != "minimt-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")
    arrays = load_tensors(path)
    if _file_sha256(path) != meta["container_sha256"]:
        raise CheckpointError("checkpoint container does not match its sidecar")
    config = ModelConfig.from_dict(meta["model_config"])
    if config.digest() != meta["config_hash"]:
        raise CheckpointError("model config hash mismatch in sidecar")
    model = Seq2SeqModel(config, dtype=np.dtype(meta["dtype"]))
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    optim = OptimState.from_scalars(meta["optim"])
    for k, m in arrays.items():
        if k.startswith("adam_m/"):
            name = k[7:]
            optim.moments[name] = (m.copy(), arrays[f"adam_v/{name}"].copy())
    return model, optim, meta


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass
class Progress:
    epoch: int = 1            # 1-based epoch in progress
    batch_pos: int = 0        # batches of that epoch already consumed
    epoch_loss: float = 0.0   # training nll summed over those batches
    epoch_tokens: int = 0
    val_ppl_history: list = field(default_factory=list)
    train_ppl_history: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class Trainer:
    """Runs epochs over a shard source with validation, decay and checkpoints.

    ``shards`` is anything re-iterable yielding Shard objects (a list or a
    ShardSet). ``checkpoint(trainer, tag)`` is called after each epoch with
    tag "epoch" and, when validation improves, "best".
    """

    def __init__(self, model, optim, schedule, shards, vocab_src, vocab_tgt, valid_batches=None, feat_vocabs=(),
                 progress=None, checkpoint=None, sink=None, on_step=None):
        self.model = model
        self.optim = optim
        self.schedule = schedule
        self.shards = shards
        self.vocab_src = vocab_src
        self.vocab_tgt = vocab_tgt
        self.valid_batches = valid_batches
        self.feat_vocabs = feat_vocabs
        self.progress = progress or Progress()
        self.checkpoint = checkpoint
        self.on_step = on_step
        self.reporter = Reporter(schedule.report_every, sink)
        self._replica_models = None

    def epoch_batches(self, epoch):
        s = self.schedule
        return epoch_batches(self.shards, s.batch_size, self.vocab_src, self.vocab_tgt, s.seed, epoch,
                             feat_vocabs=self.feat_vocabs)

    def _step_hook(self, step, loss, n):
        self.reporter.update(step, self.optim.learning_rate, loss, n)
        if self.on_step is not None:
            self.on_step(step, loss, n)

    def run(self, max_steps=None):
        """Train until the schedule ends or ``max_steps`` more updates happen.

        Returns True when the schedule completed, False when stopped early
        (the position is kept in ``progress`` for a later resume).
        """
        s = self.schedule
        copy = self.vocab_tgt if self.model.config.copy else None
        budget = max_steps
        while self.progress.epoch <= s.epochs:
            if budget is not None and budget <= 0:
                return False
            batches = list(self.epoch_batches(self.progress.epoch))
            todo = batches[self.progress.batch_pos:]
            if s.mode == "sync":
                if self._replica_models is None:
                    self._replica_models = _replicas(self.model, s.replicas)
                stats = train_epoch_sync(self.model, todo, self.optim, s.replicas, s.seed, copy, self._step_hook,
                                         max_steps=budget, replica_models=self._replica_models)
            else:
                stats = train_epoch_async(self.model, todo, self.optim, s.replicas, s.staleness_bound, s.seed,
                                          copy, self._step_hook, max_steps=budget)
            p = self.progress
            p.batch_pos += stats.batches
            p.epoch_loss += stats.loss
            p.epoch_tokens += stats.n_tokens
            if budget is not None:
                budget -= stats.steps
            if p.batch_pos < len(batches):
                return False
            self._end_epoch()
        return True

    def _end_epoch(self):
        p = self.progress
        epoch = p.epoch
        p.train_ppl_history.append(perplexity(p.epoch_loss, p.epoch_tokens))
        improved = False
        if self.valid_batches is not None:
            ppl, acc, _, _ = evaluate(self.model, self.valid_batches, self.vocab_tgt if self.model.config.copy else None)
            improved = not p.val_ppl_history or ppl < min(p.val_ppl_history)
            p.val_ppl_history.append(ppl)
            self.reporter.sink(f"epoch {epoch}, train ppl {p.train_ppl_history[-1]:.4f}, "
                               f"valid ppl {ppl:.4f}, valid acc {acc:.4f}")
        maybe_decay(self.optim, p.val_ppl_history, epoch)
        p.epoch += 1
        p.batch_pos = 0
        p.epoch_loss, p.epoch_tokens = 0.0, 0
        if self.checkpoint is not None:
            self.checkpoint(self, "epoch")
            if improved:
                self.checkpoint(self, "best")

    def save(self, path, extra=None):
        meta = {"schedule": asdict(self.schedule)}
        meta.update(extra or {})
        return save_checkpoint(path, self.model, self.optim, self.progress.to_dict(), meta)


def resume_trainer(path, shards, vocab_src, vocab_tgt, schedule=None, **kwargs):
    """Rebuild a Trainer from a checkpoint written by ``Trainer.save``."""
    model, optim, meta = load_checkpoint(path)
    schedule = schedule or TrainSchedule(**meta.get("schedule", {}))
    progress = Progress.from_dict(meta.get("progress", {}))
    return Trainer(model, optim, schedule, shards, vocab_src, vocab_tgt, progress=progress, **kwargs)
