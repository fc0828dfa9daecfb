"""PCC/MSE evaluation per granularity and embedding-geometry summaries."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .dataset import UTT_ASPECTS, WORD_ASPECTS, UtteranceSample, make_batches
from .model import ModelParams, extract_phone_embeddings, forward


class MetricError(ValueError):
    pass


def pearson(xs, ys) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError(f"pearson: sequences must be 1-D and equally long, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise MetricError("pearson: need at least two points")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise MetricError("pearson: correlation undefined for a constant sequence")
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


@dataclass
class EvalReport:
    phone_mse: float
    phone_pcc: float
    word_pcc: Dict[str, float]
    utt_pcc: Dict[str, float]

    def flat(self) -> Dict[str, float]:
        out = {"phone.mse": self.phone_mse, "phone.pcc": self.phone_pcc}
        out.update({f"word.{a}.pcc": v for a, v in self.word_pcc.items()})
        out.update({f"utt.{a}.pcc": v for a, v in self.utt_pcc.items()})
        return out

    def table(self) -> str:
        return format_table(self.flat())


@dataclass
class GeometryReport:
    mean_inter_center_distance: float
    score_weighted_scatter: float
    scatter_by_score: Dict[int, float]
    category_scatter: Dict[int, Dict[int, float]] = field(default_factory=dict)
    n_centers: int = 0
    n_tokens: int = 0

    def flat(self) -> Dict[str, float]:
        out = {"mean_inter_center_distance": self.mean_inter_center_distance,
               "score_weighted_scatter": self.score_weighted_scatter}
        out.update({f"scatter.score{k}": v for k, v in sorted(self.scatter_by_score.items())})
        for p, buckets in sorted(self.category_scatter.items()):
            out.update({f"scatter.phoneme{p}.score{k}": v for k, v in sorted(buckets.items())})
        return out

    def table(self) -> str:
        return format_table(self.flat())


def format_table(values: Dict[str, float]) -> str:
    width = max(len(k) for k in values)
    return "\n".join(f"{k:<{width}}  {v:.6f}" for k, v in values.items())


@dataclass
class Predictions:
    """Pooled per-token, per-word and per-utterance predictions and targets."""

    phone_pred: np.ndarray
    phone_true: np.ndarray
    word_pred: np.ndarray    # (n_words, 3)
    word_true: np.ndarray
    utt_pred: np.ndarray     # (n_utts, 5)
    utt_true: np.ndarray


def predict(params: ModelParams, samples: Sequence[UtteranceSample], batch_size: int = 50,
            clip: bool = False) -> Predictions:
    """Word predictions are means of the member phones' word-head outputs."""
    if not samples:
        raise MetricError("empty dataset")
    pp, pt, wp, wt, up, ut = [], [], [], [], [], []
    for batch in make_batches(samples, batch_size, params.config.max_len):
        out = forward(params, batch)
        phone = out.phone_pred.value
        word = out.word_pred.value
        utt = out.utt_pred.value
        for r, uid in enumerate(batch.utt_ids):
            m = batch.mask[r]
            pp.append(phone[r][m])
            pt.append(batch.phone_targets[r][m])
            widx = batch.word_index[r][m]
            n_words = widx.max() + 1
            counts = np.bincount(widx, minlength=n_words)[:, None]
            sums = np.zeros((n_words, word.shape[-1]))
            np.add.at(sums, widx, word[r][m])
            wp.append(sums / counts)
            wsum = np.zeros((n_words, word.shape[-1]))
            np.add.at(wsum, widx, batch.word_targets[r][m])
            wt.append(wsum / counts)
        up.append(utt)
        ut.append(batch.utt_targets)
    preds = Predictions(np.concatenate(pp), np.concatenate(pt), np.concatenate(wp),
                        np.concatenate(wt), np.concatenate(up), np.concatenate(ut))
    if clip:
        for name in ("phone_pred", "word_pred", "utt_pred"):
            setattr(preds, name, np.clip(getattr(preds, name), 0.0, 2.0))
    return preds


def report_from_predictions(p: Predictions) -> EvalReport:
    return EvalReport(
        phone_mse=float(np.mean((p.phone_pred - p.phone_true) ** 2)),
        phone_pcc=pearson(p.phone_pred, p.phone_true),
        word_pcc={a: pearson(p.word_pred[:, k], p.word_true[:, k]) for k, a in enumerate(WORD_ASPECTS)},
        utt_pcc={a: pearson(p.utt_pred[:, k], p.utt_true[:, k]) for k, a in enumerate(UTT_ASPECTS)},
    )


def evaluate(params: ModelParams, samples: Sequence[UtteranceSample], batch_size: int = 50,
             clip: bool = False) -> EvalReport:
    """Phone MSE/PCC pooled over all tokens, word and utterance PCC pooled over the whole set."""
    return report_from_predictions(predict(params, samples, batch_size, clip))


def phone_embeddings(params: ModelParams, samples: Sequence[UtteranceSample], batch_size: int = 50):
    recs = []
    for batch in make_batches(samples, batch_size, params.config.max_len):
        recs.extend(extract_phone_embeddings(params, batch))
    return recs


def centers_of(embeddings: np.ndarray, phoneme_ids: np.ndarray, normalize: bool = True):
    """(category ids, centers, per-token center row, normalized tokens), in numpy."""
    h = np.asarray(embeddings, dtype=np.float64)
    if normalize:
        h = h / np.sqrt((h * h).sum(axis=1, keepdims=True) + 1e-24)
    cats, slot = np.unique(phoneme_ids, return_inverse=True)
    centers = np.zeros((len(cats), h.shape[1]))
    np.add.at(centers, slot, h)
    centers /= np.bincount(slot)[:, None]
    return cats, centers, slot, h


def geometry_from_embeddings(embeddings, phoneme_ids, scores, normalize: bool = True) -> GeometryReport:
    emb = np.asarray(embeddings, dtype=np.float64)
    ids = np.asarray(phoneme_ids)
    scores = np.asarray(scores, dtype=np.float64)
    if emb.ndim != 2 or len(emb) == 0:
        raise MetricError("geometry needs a non-empty (N, d) embedding matrix")
    cats, centers, slot, h = centers_of(emb, ids, normalize)
    m = len(cats)
    if m >= 2:
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        inter = float(dist[~np.eye(m, dtype=bool)].mean())
    else:
        inter = 0.0
    tok_dist = np.sqrt(((h - centers[slot]) ** 2).sum(axis=1))
    bucket = np.rint(scores).astype(int)
    by_score = {int(k): float(tok_dist[bucket == k].mean()) for k in np.unique(bucket)}
    per_cat = {}
    for c_i, p in enumerate(cats):
        sel = slot == c_i
        per_cat[int(p)] = {int(k): float(tok_dist[sel & (bucket == k)].mean())
                           for k in np.unique(bucket[sel])}
    return GeometryReport(
        mean_inter_center_distance=inter,
        score_weighted_scatter=float(np.mean(tok_dist * scores)),
        scatter_by_score=by_score,
        category_scatter=per_cat,
        n_centers=m,
        n_tokens=len(emb),
    )


def geometry(params: ModelParams, samples: Sequence[UtteranceSample], batch_size: int = 50,
             normalize: bool = True) -> GeometryReport:
    """Center separation and score-weighted scatter of normalized phone embeddings over the whole set."""
    recs = phone_embeddings(params, samples, batch_size)
    if not recs:
        raise MetricError("empty dataset")
    return geometry_from_embeddings(np.stack([r.embedding for r in recs]),
                                    np.array([r.phoneme_id for r in recs]),
                                    np.array([r.phone_score for r in recs]), normalize)
