"""Training engine: Adam, plateau learning-rate decay, early stopping on
validation dice, checkpointing, and the k-fold cross-validation driver.

Runs are deterministic for a fixed seed and configuration: initialization,
sample order, and the augmentation stream all flow from seeded generators,
so two single-threaded runs produce bitwise-identical checkpoints and metric
logs. Divergence (non-finite loss or gradients) aborts the run, keeping the
last good checkpoint on disk.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import losses
from . import tensor as T
from .model import build
from .config import config_to_text, model_config_from_text

CHECKPOINT_MAGIC = b"SGCP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint bytes violate the format contract."""


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient contains NaN/Inf; the step was rejected."""


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, tensor count, per-tensor records,
# trailing 64-bit checksum over all preceding bytes


def _checksum(payload):
    return hashlib.blake2b(payload, digest_size=8).digest()


def checkpoint_bytes(named_params):
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<i", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(named_params))
    for name, arr in named_params:
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        out += struct.pack("<I", arr.ndim)
        for extent in arr.shape:
            out += struct.pack("<q", extent)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += _checksum(bytes(out))
    return bytes(out)


def checkpoint_save(model, path):
    """Write every parameter tensor; the round trip is bit-identical."""
    named = [(name, p.data) for name, p in model.parameters()]
    Path(path).write_bytes(checkpoint_bytes(named))


def checkpoint_load(path):
    """Parse a checkpoint into an ordered {name: float32 array} dict."""
    blob = Path(path).read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 4 + 4 + 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    if _checksum(blob[:-8]) != blob[-8:]:
        raise CheckpointError(f"{path}: checksum mismatch")
    body = memoryview(blob)[4:-8]
    (version,) = struct.unpack_from("<i", body, 0)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<I", body, 4)
    offset = 8
    tensors = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", body, offset)
            offset += 4
            name = bytes(body[offset : offset + name_len]).decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", body, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}q", body, offset)
            offset += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
            tensors[name] = arr.reshape(shape).copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated tensor records ({exc})") from exc
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return tensors


def load_checkpoint_into(model, path):
    """Load a checkpoint into a built model; shapes must match exactly."""
    tensors = checkpoint_load(path)
    params = dict(model.parameters())
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise CheckpointError(
            f"{path}: tensor names disagree with the model "
            f"(missing: {missing or '-'}, unexpected: {extra or '-'})"
        )
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arr.shape}, model expects "
                f"{p.shape}"
            )
    for name, p in params.items():
        p.data = tensors[name].astype(p.dtype)
        p.grad = None
    return model


def save_with_config(model, path):
    checkpoint_save(model, path)
    Path(str(path) + ".cfg").write_text(config_to_text(model.config))


def load_model(checkpoint_path, config_path=None, input_size=None):
    """Rebuild a model from a checkpoint plus its sidecar config."""
    cfg_path = Path(config_path) if config_path else Path(str(checkpoint_path) + ".cfg")
    if not cfg_path.exists():
        raise CheckpointError(
            f"no model config found at {cfg_path}; pass one explicitly"
        )
    config = model_config_from_text(cfg_path.read_text())
    if input_size is not None:
        config.height = config.width = input_size
    model = build(config, seed=0)
    return load_checkpoint_into(model, checkpoint_path)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam over named parameter tensors."""

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self):
        for name, p in self.named_params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(
                    f"non-finite gradient in {name}; step rejected"
                )
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (_, p) in enumerate(self.named_params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                p.dtype
            )
            p.grad = None


# ---------------------------------------------------------------------------
# schedule


@dataclass
class TrainSchedule:
    lr: float = 1e-3
    plateau_window: int = 2000
    decay_factor: float = 0.05
    decay_mode: str = "multiply"  # "multiply": new = f*old; "relative": new = (1-f)*old
    patience: int = 10000
    batch_size: int = 1
    max_iterations: int = 20000
    val_every: int = 200

    def __post_init__(self):
        if self.patience < self.plateau_window:
            raise ValueError(
                f"patience {self.patience} must be >= plateau window "
                f"{self.plateau_window}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.decay_mode not in ("multiply", "relative"):
            raise ValueError(f"unknown decay mode {self.decay_mode!r}")

    def decayed_lr(self, lr):
        if self.decay_mode == "multiply":
            return lr * self.decay_factor
        return lr * (1.0 - self.decay_factor)


class PlateauScheduler:
    """Decay on validation-loss stagnation, stop on validation-dice stagnation."""

    def __init__(self, schedule):
        self.schedule = schedule
        self.best_loss = np.inf
        self.best_loss_iteration = 0
        self.best_dice = -np.inf
        self.best_dice_iteration = 0
        self.last_decay_iteration = 0

    def update(self, iteration, val_loss, val_dice):
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_loss_iteration = iteration
        if val_dice > self.best_dice:
            self.best_dice = val_dice
            self.best_dice_iteration = iteration
        if iteration - self.best_dice_iteration >= self.schedule.patience:
            return "stop"
        reference = max(self.best_loss_iteration, self.last_decay_iteration)
        if iteration - reference >= self.schedule.plateau_window:
            self.last_decay_iteration = iteration
            return "decay"
        return "continue"


def schedule_tick(history, schedule):
    """Replay a (iteration, val_loss, val_dice) history; action after the last
    entry: continue, decay, or stop."""
    sched = PlateauScheduler(schedule)
    action = "continue"
    for iteration, val_loss, val_dice in history:
        action = sched.update(iteration, val_loss, val_dice)
    return action


# ---------------------------------------------------------------------------
# loss assembly and evaluation


def sample_loss(model, image, mask, with_reconstruction=True):
    """Total training loss for one sample: segmentation + scaled masked MSE."""
    cfg = model.config
    lengths, grid = model.forward(image)
    rec_scale = cfg.resolved_rec_scale() if with_reconstruction else 0.0
    weights = losses.inverse_frequency_weights(mask, rec_scale)
    if cfg.loss == "weighted_margin":
        seg = losses.weighted_margin(
            lengths, mask, weights, cfg.m_pos, cfg.m_neg, cfg.lambda_neg
        )
    else:
        seg = losses.weighted_bce(lengths, mask, weights)
    if rec_scale > 0:
        rec = model.reconstruct(grid, mask)
        mse = losses.masked_mse(rec, image, mask)
        total = T.add(seg, T.mul(mse, rec_scale))
    else:
        total = seg
    return total, lengths, grid


def evaluate(model, samples, threshold=None):
    """Mean total loss and median dice over samples (no recording)."""
    tau = model.config.threshold if threshold is None else threshold
    loss_sum = 0.0
    dices = []
    with T.no_grad():
        for s in samples:
            total, lengths, _ = sample_loss(model, s.image, s.mask)
            loss_sum += total.item()
            pred = (lengths.data > tau).astype(np.uint8)
            dices.append(losses.dice(pred, s.mask))
    return loss_sum / max(1, len(samples)), losses.median_aggregate(dices), dices


# ---------------------------------------------------------------------------
# metrics log: one line per event, iteration<TAB>key<TAB>value


class MetricsLog:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def write(self, iteration, key, value):
        if isinstance(value, float):
            value = repr(value)
        self._fh.write(f"{iteration}\t{key}\t{value}\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


@dataclass
class TrainResult:
    best_dice: float
    best_iteration: int
    iterations_run: int
    stop_reason: str
    checkpoint_path: str
    log_path: str
    final_lr: float
    dice_history: list = field(default_factory=list)


def train(model, samples, train_ids, val_ids, schedule, seed, out_dir,
          augment_config=None, log_name="metrics.log"):
    """Train one model on one fold; deterministic for a fixed seed.

    Emits per-iteration training loss, periodic validation loss/dice, decay
    and stop events to the metrics log; checkpoints whenever validation dice
    improves. A non-finite loss or gradient aborts, retaining the last good
    checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {s.identifier: s for s in samples}
    train_samples = [by_id[i] for i in train_ids]
    val_samples = [by_id[i] for i in val_ids]
    if not train_samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng(seed)
    log = MetricsLog(out_dir / log_name)
    ckpt_path = out_dir / "best.ckpt"
    adam = Adam(model.parameters(), schedule.lr)
    sched = PlateauScheduler(schedule)
    best_dice = -np.inf
    best_iteration = 0
    stop_reason = "max_iterations"
    iterations_run = 0
    dice_history = []

    if schedule.max_iterations == 0:
        save_with_config(model, ckpt_path)
        log.write(0, "checkpoint", ckpt_path.name)
        log.close()
        return TrainResult(-1.0, 0, 0, "max_iterations", str(ckpt_path),
                           str(log.path), adam.lr)

    for it in range(1, schedule.max_iterations + 1):
        batch_loss = 0.0
        aborted = False
        for _ in range(schedule.batch_size):
            idx = int(rng.integers(len(train_samples)))
            aug = D.augment(train_samples[idx], rng, augment_config)
            with T.tape() as tp:
                total, _, _ = sample_loss(model, aug.image, aug.mask)
                if schedule.batch_size > 1:
                    total = T.mul(total, 1.0 / schedule.batch_size)
                value = total.item()
                if not np.isfinite(value):
                    aborted = True
                    break
                T.backward(total, tp)
            batch_loss += value
        if aborted:
            log.write(it, "event", "abort_nonfinite_loss")
            stop_reason = "diverged"
            iterations_run = it
            break
        try:
            adam.step()
        except NonFiniteGradientError as exc:
            log.write(it, "event", f"abort_nonfinite_gradient {exc}")
            stop_reason = "diverged"
            iterations_run = it
            break
        log.write(it, "train_loss", batch_loss)
        iterations_run = it

        if it % schedule.val_every == 0 or it == schedule.max_iterations:
            val_loss, val_dice, _ = evaluate(model, val_samples)
            log.write(it, "val_loss", val_loss)
            log.write(it, "val_dice", val_dice)
            dice_history.append((it, val_dice))
            if val_dice > best_dice:
                best_dice = val_dice
                best_iteration = it
                save_with_config(model, ckpt_path)
                log.write(it, "checkpoint", ckpt_path.name)
            action = sched.update(it, val_loss, val_dice)
            if action == "decay":
                adam.lr = schedule.decayed_lr(adam.lr)
                log.write(it, "lr", adam.lr)
            elif action == "stop":
                log.write(it, "event", "early_stop")
                stop_reason = "early_stop"
                break

    if not ckpt_path.exists():
        save_with_config(model, ckpt_path)
        log.write(iterations_run, "checkpoint", ckpt_path.name)
    log.close()
    return TrainResult(
        best_dice=float(best_dice) if np.isfinite(best_dice) else -1.0,
        best_iteration=best_iteration,
        iterations_run=iterations_run,
        stop_reason=stop_reason,
        checkpoint_path=str(ckpt_path),
        log_path=str(log.path),
        final_lr=adam.lr,
        dice_history=dice_history,
    )


@dataclass
class CrossValResult:
    fold_results: list
    fold_dices: list
    median_dice: float


def cross_validate(config, samples, k, seed, schedule, out_dir,
                   augment_config=None):
    """k-fold cross-validation: train one model per fold, report per-fold
    best validation dice and their median."""
    ids = [s.identifier for s in samples]
    split = D.kfold_split(ids, k, seed)
    results = []
    for fold in range(k):
        if k == 1:
            train_ids = val_ids = list(split.folds[0])
        else:
            train_ids, val_ids = split.train_val_ids(fold)
        model = build(config, seed=[seed, fold])
        result = train(
            model, samples, train_ids, val_ids, schedule, [seed, fold, 1],
            Path(out_dir) / f"fold{fold}", augment_config,
        )
        results.append(result)
    dices = [r.best_dice for r in results]
    return CrossValResult(results, dices, losses.median_aggregate(dices))
