"""MSE plus the phonemic-distinction and ordinal-tightness regularizers over masked batches."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Batch


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda_d: float = 5.0
    lambda_o: float = 0.1
    margin: float = 1.0
    normalize_features: bool = True

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_o < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.margin > 0:
            raise ValueError("margin must be positive")


@dataclass
class CenterMap:
    """Per-category centers of the tokens they were computed from.

    ``tokens`` are the (optionally unit-normalized) valid token embeddings,
    ``token_ids`` their categories and ``slot`` the row of ``centers``
    belonging to each token.
    """

    ids: np.ndarray        # (M,) sorted category ids
    centers: Tensor        # (M, d)
    counts: np.ndarray     # (M,)
    tokens: Tensor         # (N, d)
    token_ids: np.ndarray  # (N,)
    slot: np.ndarray       # (N,)

    def __len__(self):
        return len(self.ids)

    def as_dict(self) -> dict:
        return {int(p): (self.centers.value[i], int(n)) for i, (p, n) in enumerate(zip(self.ids, self.counts))}


@dataclass
class LossBreakdown:
    l_mse: float
    l_pd: float
    l_ot: float
    l_pco: float
    n_centers: int
    n_tokens: int
    total: Tensor
    centers: CenterMap
    terms: Tuple[Tensor, Tensor, Tensor]

    def row(self) -> dict:
        return {"l_mse": self.l_mse, "l_pd": self.l_pd, "l_ot": self.l_ot, "l_pco": self.l_pco}


def mse_loss(predictions: Sequence[Tensor], targets: Sequence[np.ndarray],
             masks: Sequence[Optional[np.ndarray]]) -> Tensor:
    """Mean over (granularity, aspect) pairs of the per-pair mean squared error on valid elements."""
    if not predictions or not (len(predictions) == len(targets) == len(masks)):
        raise LossError("mse_loss needs equally many predictions, targets and masks")
    per_pair = []
    for k, (pred, tgt, mask) in enumerate(zip(predictions, targets, masks)):
        tgt = np.asarray(tgt, dtype=np.float64)
        if pred.shape != tgt.shape or (mask is not None and np.shape(mask) != tgt.shape):
            raise ad.ShapeError("mse_loss", pred.shape, tgt.shape)
        if mask is None:
            diff = pred - tgt
        else:
            idx = np.nonzero(mask)
            if len(idx[0]) == 0:
                raise LossError(f"mse_loss: pair {k} has no valid elements")
            diff = ad.take(pred, idx) - tgt[idx]
        per_pair.append(ad.mean(diff * diff))
    total = per_pair[0]
    for t in per_pair[1:]:
        total = total + t
    return ad.scale(total, 1.0 / len(per_pair))


def grouped_mse(groups: Sequence[Tuple[Tensor, np.ndarray, Optional[np.ndarray]]]) -> Tensor:
    """:func:`mse_loss` over every aspect column of a few stacked predictions.

    Each group is ``(pred, target, row_mask)``. With a mask, rows are the
    masked leading positions and the trailing axes are aspects; without one,
    rows run along axis 0. Equal to ``mse_loss`` on the split pairs up to
    summation order, in a handful of ops instead of several per pair.
    """
    parts, n_pairs = [], 0
    for pred, tgt, mask in groups:
        tgt = np.asarray(tgt, dtype=np.float64)
        if pred.shape != tgt.shape or (mask is not None and np.shape(mask) != tgt.shape[:np.ndim(mask)]):
            raise ad.ShapeError("grouped_mse", pred.shape, tgt.shape)
        rows = tgt.shape[0] if mask is None else int(np.count_nonzero(mask))
        if rows == 0:
            raise LossError("grouped_mse: a group has no valid rows")
        k = math.prod(tgt.shape[1 if mask is None else np.ndim(mask):])
        parts.append((ad.squared_error(pred, tgt, mask), rows))
        n_pairs += k
    total = None
    for sq, rows in parts:
        term = ad.scale(sq, 1.0 / (rows * n_pairs))
        total = term if total is None else total + term
    return total


def _valid_tokens(embeddings, phoneme_ids, mask, normalize: bool):
    emb = embeddings if isinstance(embeddings, Tensor) else ad.const(embeddings)
    ids = np.asarray(phoneme_ids)
    d = emb.shape[-1]
    if mask is None:
        mask = np.ones(ids.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if emb.shape[:-1] != ids.shape or mask.shape != ids.shape:
        raise ad.ShapeError("compute_centers", emb.shape, ids.shape)
    idx = np.nonzero(mask)
    if len(idx[0]) == 0:
        raise LossError("no unmasked tokens")
    tokens = ad.take(emb, idx) if emb.ndim > 1 else emb
    tokens = ad.reshape(tokens, (len(idx[0]), d))
    if normalize:
        tokens = tokens / ad.l2_norm(tokens, keepdims=True)
    return tokens, ids[idx].astype(np.int64), idx


def compute_centers(embeddings, phoneme_ids, mask=None, normalize: bool = True) -> CenterMap:
    """Arithmetic mean of the member tokens of each category present; gradients flow through."""
    tokens, tok_ids, _ = _valid_tokens(embeddings, phoneme_ids, mask, normalize)
    if tok_ids.min() >= 0:
        full = np.bincount(tok_ids)
        cats = np.flatnonzero(full)
        counts = full[cats]
        lookup = np.empty(len(full), dtype=np.int64)
        lookup[cats] = np.arange(len(cats))
        slot = lookup[tok_ids]
    else:
        cats, slot, counts = np.unique(tok_ids, return_inverse=True, return_counts=True)
    avg = np.zeros((len(cats), len(tok_ids)))
    avg[slot, np.arange(len(tok_ids))] = 1.0 / counts[slot]
    return CenterMap(cats, ad.matmul(avg, tokens), counts, tokens, tok_ids, slot)


def phonemic_distinction(centers: CenterMap, margin: float = 1.0) -> Tensor:
    """-(margin / (M(M-1))) * sum of distances over ordered pairs of distinct centers; 0 when M < 2."""
    m = len(centers)
    if m < 2:
        return ad.const(0.0)
    i, j = np.nonzero(~np.eye(m, dtype=bool))
    dist = ad.l2_norm(ad.take(centers.centers, i) - ad.take(centers.centers, j))
    return ad.scale(ad.sum(dist), -margin / (m * (m - 1)))


def ordinal_tightness(embeddings, phoneme_ids, phone_scores, mask, centers: CenterMap,
                      normalize: bool = True) -> Tensor:
    """Score-weighted mean distance of each valid token to its category center."""
    tokens, tok_ids, idx = _valid_tokens(embeddings, phoneme_ids, mask, normalize)
    slot = np.searchsorted(centers.ids, tok_ids)
    if (slot >= len(centers.ids)).any() or (centers.ids[np.minimum(slot, len(centers.ids) - 1)] != tok_ids).any():
        raise LossError("ordinal_tightness: token category missing from centers")
    scores = np.asarray(phone_scores, dtype=np.float64)[idx]
    dist = ad.l2_norm(tokens - ad.take(centers.centers, slot))
    return ad.scale(ad.sum(dist * scores), 1.0 / len(scores))


def _tightness_from_map(centers: CenterMap, scores: np.ndarray) -> Tensor:
    dist = ad.l2_norm(centers.tokens - ad.take(centers.centers, centers.slot))
    return ad.scale(ad.sum(dist * scores), 1.0 / len(scores))


def pco_loss(predictions, targets, masks, embeddings, phoneme_ids, phone_scores,
             config: LossConfig = LossConfig(), phone_mask=None) -> LossBreakdown:
    """L_mse + lambda_d * L_pd + lambda_o * L_ot.

    ``phone_mask`` selects the valid phone tokens of ``embeddings``; it
    defaults to the mask of the last prediction pair (the phone pair).
    """
    l_mse = mse_loss(predictions, targets, masks)
    if phone_mask is None:
        phone_mask = masks[-1]
    return _combine(l_mse, embeddings, phoneme_ids, phone_scores, config, phone_mask)


def _combine(l_mse: Tensor, embeddings, phoneme_ids, phone_scores, config: LossConfig,
             phone_mask) -> LossBreakdown:
    centers = compute_centers(embeddings, phoneme_ids, phone_mask, config.normalize_features)
    l_pd = phonemic_distinction(centers, config.margin)
    scores = np.asarray(phone_scores, dtype=np.float64)
    scores = scores[np.nonzero(phone_mask)] if phone_mask is not None else scores.reshape(-1)
    l_ot = _tightness_from_map(centers, scores)

    total = l_mse
    if config.lambda_d:
        total = total + ad.scale(l_pd, config.lambda_d)
    if config.lambda_o:
        total = total + ad.scale(l_ot, config.lambda_o)
    return LossBreakdown(
        l_mse=l_mse.item(), l_pd=l_pd.item(), l_ot=l_ot.item(), l_pco=total.item(),
        n_centers=len(centers), n_tokens=len(scores), total=total, centers=centers,
        terms=(l_mse, l_pd, l_ot),
    )


def score_pairs(out, batch: Batch) -> Tuple[List[Tensor], List[np.ndarray], List[Optional[np.ndarray]]]:
    """The nine (prediction, target, mask) pairs: 5 utterance, 3 word, 1 phone (last)."""
    preds, tgts, masks = [], [], []
    for a in range(batch.utt_targets.shape[1]):
        preds.append(out.utt_pred[:, a])
        tgts.append(batch.utt_targets[:, a])
        masks.append(None)
    for a in range(batch.word_targets.shape[2]):
        preds.append(out.word_pred[:, :, a])
        tgts.append(batch.word_targets[:, :, a])
        masks.append(batch.mask)
    preds.append(out.phone_pred)
    tgts.append(batch.phone_targets)
    masks.append(batch.mask)
    return preds, tgts, masks


def batch_mse(out, batch: Batch) -> Tensor:
    """L_mse over the nine (granularity, aspect) pairs of a batch."""
    return grouped_mse([(out.utt_pred, batch.utt_targets, None),
                        (out.word_pred, batch.word_targets, batch.mask),
                        (out.phone_pred, batch.phone_targets, batch.mask)])


def batch_loss(out, batch: Batch, config: LossConfig = LossConfig()) -> LossBreakdown:
    return _combine(batch_mse(out, batch), out.h_phone, batch.phoneme_ids, batch.phone_targets,
                    config, batch.mask)
