"""Two-phase training loop.

Phase 1 pretrains the encoder with a supervised contrastive loss over
projection-head embeddings, using a class-balanced pair sampler so
every anchor has a positive. Phase 2 freezes the encoder (weights and
batch-norm statistics) and trains the decoder and classifier heads
jointly on segmentation + classification loss. Because the frozen
encoder is deterministic at that point, phase 2 runs it outside the
gradient tape and backpropagates only through the heads.

Learning-rate control is reduce-on-plateau in both phases; phase 1
monitors training loss, phase 2 monitors validation loss when a
validation set is given. The best-validation weights are snapshotted
and restored at the end.
"""

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import model as M
from .data import batch_arrays
from .errors import ConfigError
from .losses import bce_dice, categorical_ce, npair_contrastive
from .metrics import dice_coefficient
from .tensor import Tape, Tensor, backward


class Adam:
    """Adam with bias correction. State is keyed by parameter name, so
    the same optimizer survives freeze/unfreeze cycles; parameters whose
    grad is None are skipped (their state does not advance)."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params):
        """Apply one update to every named Tensor with a gradient."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PlateauSchedule:
    """Multiply the optimizer lr by `factor` after `patience` consecutive
    epochs without improvement of the monitored value. The stale counter
    resets on improvement and after each decay."""

    def __init__(self, optimizer, patience=10, factor=0.1, min_lr=0.0):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        if not 0.0 < factor < 1.0:
            raise ConfigError(f"factor must be in (0, 1), got {factor}")
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.best = np.inf
        self.stale = 0

    def step(self, value):
        """Feed one epoch's monitored value; returns True if lr decayed."""
        if value < self.best:
            self.best = value
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
            self.stale = 0
            return True
        return False


@dataclass
class TrainConfig:
    batch_size: int = 32
    # contrastive batches should span many classes to supply negatives;
    # when the joint batch size is small, set this one larger (None
    # falls back to batch_size)
    pretrain_batch_size: Optional[int] = None
    pretrain_epochs: int = 30
    joint_epochs: int = 30
    learning_rate: float = 1e-3
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    min_lr: float = 0.0
    temperature: float = 0.1
    freeze_encoder: bool = True
    seed: int = 0
    # optional early stop for the joint phase, checked on the train set
    target_train_accuracy: Optional[float] = None
    target_train_dice: Optional[float] = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.pretrain_batch_size is None:
            self.pretrain_batch_size = self.batch_size
        if self.pretrain_batch_size < 2:
            raise ConfigError(
                f"pretrain_batch_size must be >= 2, got {self.pretrain_batch_size}")
        if self.pretrain_epochs < 0 or self.joint_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    val_loss: Optional[float] = None
    val_acc: Optional[float] = None
    val_dice: Optional[float] = None


HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_loss", "val_acc", "val_dice")


def history_rows(rows):
    """EpochRows -> list of CSV-ready string tuples (header included)."""
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, int):
            return str(v)
        return f"{v:.6g}"

    out = [HISTORY_FIELDS]
    for r in rows:
        out.append(tuple(fmt(getattr(r, f)) for f in HISTORY_FIELDS))
    return out


def save_history(path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(history_rows(rows))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _pair_batches(labels, batch_size, rng):
    """Class-balanced pair batches for the contrastive phase.

    Each class's samples are shuffled and grouped into pairs (an odd
    one out wraps around to the class's first sample), the pair pool is
    shuffled, and batches take batch_size // 2 pairs each. Every anchor
    therefore has at least one positive. Classes with a single sample
    cannot form a pair and are skipped.
    """
    pairs = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            continue
        members = members[rng.permutation(len(members))]
        for i in range(0, len(members) - 1, 2):
            pairs.append((members[i], members[i + 1]))
        if len(members) % 2:
            pairs.append((members[-1], members[0]))
    pairs = np.asarray(pairs, dtype=np.int64)
    pairs = pairs[rng.permutation(len(pairs))]
    per_batch = max(2, batch_size // 2)
    batches = []
    for i in range(0, len(pairs), per_batch):
        chunk = pairs[i : i + per_batch]
        if len(chunk) >= 2:
            batches.append(chunk.reshape(-1))
    return batches


def _joint_loss(out, masks, onehot):
    return bce_dice(out.mask, masks) + categorical_ce(out.class_probs, onehot)


def evaluate(mdl, dataset, batch_size=32):
    """Eval-mode metrics over a dataset: joint loss, accuracy, mean
    per-image Dice of the thresholded mask."""
    size = mdl.config.input_size
    n = len(dataset)
    total_loss = 0.0
    correct = 0
    dices = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        images, masks, onehot = batch_arrays(dataset, idx, size, mdl.np_dtype)
        out = M.forward(mdl, Tensor(images), training=False)
        loss = _joint_loss(out, Tensor(masks), Tensor(onehot))
        total_loss += loss.item() * len(idx)
        pred = out.class_probs.data.reshape(len(idx), -1).argmax(axis=1)
        correct += int((pred == dataset.labels[idx]).sum())
        for j in range(len(idx)):
            dices.append(dice_coefficient(out.mask.data[j], masks[j]))
    return {
        "loss": total_loss / n,
        "accuracy": correct / n,
        "dice": float(np.mean(dices)),
    }


def pretrain_encoder(mdl, train_ds, config, *, log=None, start_epoch=1):
    """Phase 1: contrastive embedding training. Returns history rows."""
    opt = Adam(lr=config.learning_rate)
    sched = PlateauSchedule(opt, config.plateau_patience, config.plateau_factor,
                            config.min_lr)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))
    size = mdl.config.input_size
    rows = []
    for e in range(config.pretrain_epochs):
        epoch = start_epoch + e
        batches = _pair_batches(train_ds.labels, config.pretrain_batch_size, rng)
        if not batches:
            raise ConfigError("no class has two samples; cannot form pairs")
        loss_sum = 0.0
        n_seen = 0
        for idx in batches:
            images, _, _ = batch_arrays(train_ds, idx, size, mdl.np_dtype)
            with Tape() as tape:
                emb = M.encode(mdl, Tensor(images), training=True)
                loss = npair_contrastive(emb, train_ds.labels[idx],
                                         config.temperature)
            mdl.zero_grad()
            backward(tape, loss)
            opt.step(mdl.params)
            loss_sum += loss.item() * len(idx)
            n_seen += len(idx)
        train_loss = loss_sum / n_seen
        rows.append(EpochRow(epoch=epoch, lr=opt.lr, train_loss=train_loss))
        if log:
            log(f"epoch {epoch:3d}  lr {opt.lr:.2e}  contrastive {train_loss:.4f}")
        sched.step(train_loss)
    return rows


def train_joint(mdl, train_ds, val_ds, config, *, log=None, start_epoch=1):
    """Phase 2: segmentation + classification. Returns (rows, best_state).

    With the encoder frozen its forward pass runs outside the tape, so
    only head activations are kept for backward. Plateau scheduling
    monitors validation loss when val_ds is given, else training loss.
    The retained best checkpoint maximizes validation accuracy (ties
    broken by dice, then loss); without a validation set it minimizes
    training loss. If both early-stop targets are set, training stops
    once the train set meets them.
    """
    opt = Adam(lr=config.learning_rate)
    sched = PlateauSchedule(opt, config.plateau_patience, config.plateau_factor,
                            config.min_lr)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 2)))
    size = mdl.config.input_size
    rows = []
    best_key = (np.inf,)
    best_state = mdl.snapshot()
    check_targets = (config.target_train_accuracy is not None
                     and config.target_train_dice is not None)
    for e in range(config.joint_epochs):
        epoch = start_epoch + e
        loss_sum = 0.0
        n_seen = 0
        for idx in _batches(len(train_ds), config.batch_size, rng):
            images, masks, onehot = batch_arrays(train_ds, idx, size, mdl.np_dtype)
            x = Tensor(images)
            if mdl.encoder_frozen:
                bottleneck, skips = M.encoder_forward(mdl, x, training=False)
                with Tape() as tape:
                    out = M.head_forward(mdl, bottleneck, skips, training=True)
                    loss = _joint_loss(out, Tensor(masks), Tensor(onehot))
            else:
                with Tape() as tape:
                    out = M.forward(mdl, x, training=True)
                    loss = _joint_loss(out, Tensor(masks), Tensor(onehot))
            mdl.zero_grad()
            backward(tape, loss)
            opt.step(mdl.trainable_params())
            loss_sum += loss.item() * len(idx)
            n_seen += len(idx)
        train_loss = loss_sum / n_seen
        row = EpochRow(epoch=epoch, lr=opt.lr, train_loss=train_loss)
        if val_ds is not None:
            val = evaluate(mdl, val_ds, config.batch_size)
            row.val_loss = val["loss"]
            row.val_acc = val["accuracy"]
            row.val_dice = val["dice"]
            monitored = val["loss"]
            key = (-row.val_acc, -row.val_dice, row.val_loss)
        else:
            monitored = train_loss
            key = (train_loss,)
        rows.append(row)
        if log:
            extra = ""
            if val_ds is not None:
                extra = (f"  val_loss {row.val_loss:.4f}  acc {row.val_acc:.3f}"
                         f"  dice {row.val_dice:.3f}")
            log(f"epoch {epoch:3d}  lr {opt.lr:.2e}  loss {train_loss:.4f}{extra}")
        if key < best_key:
            best_key = key
            best_state = mdl.snapshot()
        if check_targets:
            tr = evaluate(mdl, train_ds, config.batch_size)
            if (tr["accuracy"] >= config.target_train_accuracy
                    and tr["dice"] >= config.target_train_dice):
                if log:
                    log(f"targets met at epoch {epoch}: acc {tr['accuracy']:.3f} "
                        f"dice {tr['dice']:.3f}")
                best_state = mdl.snapshot()
                break
        sched.step(monitored)
    return rows, best_state


@dataclass
class TrainResult:
    history: list
    best_epoch: Optional[int]
    final_val: Optional[dict]


def fit(mdl, train_ds, val_ds=None, config=None, *, log=None):
    """Full pipeline: contrastive pretrain, freeze, joint train, restore
    the best weights. Epoch numbering is continuous across phases."""
    config = config or TrainConfig()
    rows = []
    if config.pretrain_epochs > 0:
        rows += pretrain_encoder(mdl, train_ds, config, log=log)
    if config.freeze_encoder and config.pretrain_epochs > 0:
        M.freeze_encoder(mdl)
    joint_rows, best_state = train_joint(
        mdl, train_ds, val_ds, config, log=log, start_epoch=len(rows) + 1
    )
    rows += joint_rows
    mdl.load_state_arrays(best_state)
    best_epoch = None
    if joint_rows:
        if val_ds is not None:
            sort_key = lambda r: (-r.val_acc, -r.val_dice, r.val_loss)
        else:
            sort_key = lambda r: r.train_loss
        best_epoch = min(joint_rows, key=sort_key).epoch
    final_val = evaluate(mdl, val_ds, config.batch_size) if val_ds is not None else None
    return TrainResult(history=rows, best_epoch=best_epoch, final_val=final_val)
