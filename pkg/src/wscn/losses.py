"""Training objectives: BCE, Dice, their sum, categorical CE, and the
supervised contrastive (multi-positive N-pair) loss.

All losses return scalar Tensors built from tape ops, so gradients flow
through them like any other op. Targets are plain ndarrays (or Tensors,
whose data is used) and never receive gradients.
"""

import numpy as np

from .errors import DataError, ShapeError
from .tensor import Tensor, clip, exp, log, tmean, transpose, tsum

_EPS = 1e-7
_DICE_EPS = 1e-6


def _target(t, like, name):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    data = data.astype(like.dtype, copy=False)
    if data.shape != like.shape:
        raise ShapeError(f"{name}: target shape {data.shape} != prediction {like.shape}")
    return data


def bce(pred, target):
    """Mean binary cross-entropy over every element.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    t = _target(target, pred, "bce")
    p = clip(pred, _EPS, 1.0 - _EPS)
    losses = -(t * log(p) + (1.0 - t) * log(1.0 - p))
    return tmean(losses)


def dice_loss(pred, target):
    """1 - Dice similarity with sums over the whole batch.

    The 1e-6 smoothing term makes the empty-vs-empty case a perfect
    match (zero loss) instead of 0/0.
    """
    t = _target(target, pred, "dice_loss")
    inter = tsum(pred * t)
    denom = tsum(pred) + float(t.sum())
    return 1.0 - (2.0 * inter + _DICE_EPS) / (denom + _DICE_EPS)


def bce_dice(pred, target):
    """Equal-weight sum of BCE and Dice losses."""
    return bce(pred, target) + dice_loss(pred, target)


def categorical_ce(pred, target):
    """Mean cross-entropy between predicted probability rows and one-hot rows.

    ``pred`` is (N, K) probabilities; ``target`` must be strictly one-hot
    (or (N, 1, K), which is squeezed). Log arguments are clamped at 1e-7.
    """
    if pred.ndim != 2:
        raise ShapeError(f"categorical_ce expects (N,K) predictions, got {pred.shape}")
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.ndim == 3 and t.shape[1] == 1:
        t = t[:, 0, :]
    if t.shape != pred.shape:
        raise ShapeError(f"categorical_ce target shape {t.shape} != {pred.shape}")
    tf = t.astype(pred.dtype, copy=False)
    if not (np.isin(t, (0, 1)).all() and (tf.sum(axis=1) == 1).all()):
        raise DataError("categorical_ce targets must be one-hot rows")
    p = clip(pred, _EPS, 1.0)
    return -tmean(tsum(tf * log(p), axis=1))


def npair_contrastive(embeddings, labels, temperature=0.1):
    """Supervised contrastive loss with multi-positive averaging.

    For each anchor i with positive set P(i) (same label, excluding i):

        L_i = -(1/|P(i)|) * sum_{p in P(i)} log( exp(z_i.z_p / T)
                                                / sum_{k != i} exp(z_i.z_k / T) )

    and the loss is the mean over anchors. Embeddings are used as given
    (the projection head already emits unit rows). Every anchor must
    have at least one positive; batches should be sampled with at least
    two examples per class.
    """
    if embeddings.ndim != 2:
        raise ShapeError(f"npair_contrastive expects (N,D), got {embeddings.shape}")
    labels = np.asarray(labels)
    n = embeddings.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels must be ({n},), got {labels.shape}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(n, dtype=bool)
    pos_mask = same & off_diag
    pos_counts = pos_mask.sum(axis=1)
    if (pos_counts == 0).any():
        lonely = int(np.argmax(pos_counts == 0))
        raise ValueError(
            f"anchor {lonely} (label {labels[lonely]}) has no positive in the "
            "batch; use a class-balanced sampler with >= 2 examples per class"
        )
    dt = embeddings.dtype
    sim = (embeddings @ transpose(embeddings)) * (1.0 / temperature)
    # detached row max: exact log-sum-exp stabilizer
    shift = Tensor(sim.data.max(axis=1, keepdims=True))
    s = sim - shift
    e = exp(s) * off_diag.astype(dt)
    log_denom = log(tsum(e, axis=1, keepdims=True))
    log_prob = s - log_denom
    per_anchor = tsum(log_prob * pos_mask.astype(dt), axis=1) * (1.0 / pos_counts).astype(dt)
    return -tmean(per_anchor)
