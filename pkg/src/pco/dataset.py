"""Utterance data model, JSON Lines I/O, synthetic generation and batching."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

GOP_DIM = 84
MAX_LEN = 50
PAD = -1.0
WORD_ASPECTS = ("accuracy", "stress", "total")
UTT_ASPECTS = ("accuracy", "completeness", "fluency", "prosody", "total")
RAW_SCALE = 5.0  # 0-10 utterance/word scores -> 0-2


class DatasetError(ValueError):
    pass


@dataclass
class UtteranceSample:
    """One utterance.

    Per-phone fields are parallel arrays of length L; ``word_scores`` has one
    row per word in ``WORD_ASPECTS`` order and ``utterance_scores`` follows
    ``UTT_ASPECTS``.
    """

    utt_id: str
    phoneme_ids: np.ndarray     # (L,) int
    gop: np.ndarray             # (L, 84)
    phone_scores: np.ndarray    # (L,)
    word_index: np.ndarray      # (L,) int
    word_scores: np.ndarray     # (W, 3)
    utterance_scores: np.ndarray  # (5,)

    def __post_init__(self):
        self.phoneme_ids = np.asarray(self.phoneme_ids, dtype=np.int64)
        self.gop = np.asarray(self.gop, dtype=np.float64).reshape(-1, GOP_DIM) \
            if np.size(self.gop) else np.zeros((0, GOP_DIM))
        self.phone_scores = np.asarray(self.phone_scores, dtype=np.float64)
        self.word_index = np.asarray(self.word_index, dtype=np.int64)
        self.word_scores = np.asarray(self.word_scores, dtype=np.float64).reshape(-1, len(WORD_ASPECTS))
        self.utterance_scores = np.asarray(self.utterance_scores, dtype=np.float64)

    def __len__(self):
        return len(self.phoneme_ids)

    @property
    def n_words(self) -> int:
        return len(self.word_scores)

    def validate(self, score_max: float = 2.0):
        n = len(self.phoneme_ids)
        if n == 0:
            raise DatasetError(f"{self.utt_id}: utterance has no phones")
        if self.gop.shape != (n, GOP_DIM):
            raise DatasetError(f"{self.utt_id}: gop features must be {GOP_DIM}-dimensional")
        if self.phone_scores.shape != (n,) or self.word_index.shape != (n,):
            raise DatasetError(f"{self.utt_id}: per-phone fields have mismatched lengths")
        if (self.phoneme_ids < 0).any():
            raise DatasetError(f"{self.utt_id}: negative phoneme id")
        wi = self.word_index
        if wi[0] != 0 or (np.diff(wi) < 0).any() or (np.diff(wi) > 1).any():
            raise DatasetError(f"{self.utt_id}: word_index must be contiguous and non-decreasing from 0")
        if wi[-1] + 1 != self.n_words:
            raise DatasetError(f"{self.utt_id}: {self.n_words} word records for {wi[-1] + 1} words")
        if self.utterance_scores.shape != (len(UTT_ASPECTS),):
            raise DatasetError(f"{self.utt_id}: expected {len(UTT_ASPECTS)} utterance scores")
        _check_range(self.utt_id, "phone score", self.phone_scores, 2.0)
        _check_range(self.utt_id, "word score", self.word_scores, score_max)
        _check_range(self.utt_id, "utterance score", self.utterance_scores, score_max)
        for name, arr in (("gop", self.gop),):
            if not np.isfinite(arr).all():
                raise DatasetError(f"{self.utt_id}: non-finite {name} value")


def _check_range(utt_id, what, arr, hi):
    if not np.isfinite(arr).all() or (arr < 0).any() or (arr > hi).any():
        raise DatasetError(f"{utt_id}: {what} outside [0, {hi:g}]")


# ---------------------------------------------------------------- file format


def _sample_from_record(rec: dict) -> UtteranceSample:
    phones = rec["phones"]
    return UtteranceSample(
        utt_id=str(rec["utt_id"]),
        phoneme_ids=[int(p["phoneme_id"]) for p in phones],
        gop=[p["gop"] for p in phones] if phones else [],
        phone_scores=[float(p["score"]) for p in phones],
        word_index=[int(p["word_index"]) for p in phones],
        word_scores=[[float(w[a]) for a in WORD_ASPECTS] for w in rec["words"]],
        utterance_scores=[float(rec["utterance"][a]) for a in UTT_ASPECTS],
    )


def _record_from_sample(s: UtteranceSample, factor: float = 1.0) -> dict:
    return {
        "utt_id": s.utt_id,
        "phones": [
            {"phoneme_id": int(p), "gop": [float(v) for v in g], "score": float(sc), "word_index": int(w)}
            for p, g, sc, w in zip(s.phoneme_ids, s.gop, s.phone_scores, s.word_index)
        ],
        "words": [{a: float(v) * factor for a, v in zip(WORD_ASPECTS, row)} for row in s.word_scores],
        "utterance": {a: float(v) * factor for a, v in zip(UTT_ASPECTS, s.utterance_scores)},
    }


def load_dataset(path, normalize: bool = True) -> List[UtteranceSample]:
    """Read a JSON Lines dataset.

    A first line ``{"score_scale": "0-10"}`` marks utterance/word scores as
    raw 0-10 values; with ``normalize`` they are divided by 5. Files without
    the header already hold 0-2 scores.
    """
    samples = []
    raw = False
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if lineno == 1 and isinstance(rec, dict) and "score_scale" in rec:
                if rec["score_scale"] != "0-10":
                    raise DatasetError(f"{path}:1: unsupported score_scale {rec['score_scale']!r}")
                raw = True
                continue
            try:
                s = _sample_from_record(rec)
            except (KeyError, TypeError, ValueError) as e:
                raise DatasetError(f"{path}:{lineno}: malformed utterance record ({e})") from None
            try:
                s.validate(score_max=10.0 if raw else 2.0)
            except DatasetError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
            if raw and normalize:
                s.word_scores = s.word_scores / RAW_SCALE
                s.utterance_scores = s.utterance_scores / RAW_SCALE
            samples.append(s)
    return samples


def save_dataset(samples: Sequence[UtteranceSample], path, raw: bool = False):
    """Write samples (holding 0-2 scores) as JSON Lines; ``raw`` rescales to 0-10 with a header."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if raw:
            fh.write(json.dumps({"score_scale": "0-10"}) + "\n")
        for s in samples:
            fh.write(json.dumps(_record_from_sample(s, RAW_SCALE if raw else 1.0)) + "\n")


def n_phonemes(samples: Sequence[UtteranceSample]) -> int:
    return int(max(s.phoneme_ids.max() for s in samples)) + 1


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_phonemes: int = 10
    center_scale: float = 3.0
    noise_scale: float = 0.3
    utterances: int = 500
    min_phones: int = 5
    max_phones: int = 20
    max_word_len: int = 4
    seed: int = 0
    # defaults to ``seed``; share it to draw train and eval sets from the same prototypes
    prototype_seed: Optional[int] = None

    def __post_init__(self):
        if self.n_phonemes < 2:
            raise ValueError("need at least 2 phoneme categories")
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be positive")
        if self.utterances < 0:
            raise ValueError("utterances must be non-negative")
        if not 1 <= self.min_phones <= self.max_phones:
            raise ValueError("need 1 <= min_phones <= max_phones")
        if self.max_word_len < 1:
            raise ValueError("max_word_len must be positive")


def quantize_quality(q):
    """Map latent quality in [0, 2] to {0, 1, 2} by thirds."""
    return np.minimum(np.floor(np.asarray(q) * 1.5), 2.0)


def prototypes(spec: SyntheticSpec) -> np.ndarray:
    """Unit-norm prototype direction per phoneme category, shape (P, 84)."""
    seed = spec.seed if spec.prototype_seed is None else spec.prototype_seed
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    mu = rng.standard_normal((spec.n_phonemes, GOP_DIM))
    return mu / np.linalg.norm(mu, axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec) -> List[UtteranceSample]:
    """Draw utterances whose GOP features encode phone quality along per-phoneme directions.

    Feature of a token with phoneme p and latent quality q:
    ``center_scale * mu_p * q / 2 + noise_scale * N(0, I)``. Phone accuracy is
    q quantized by thirds; every word aspect is the mean of its phones'
    accuracies and every utterance aspect the mean of its word accuracies.
    """
    mu = prototypes(spec)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1,)))
    samples = []
    for u in range(spec.utterances):
        n = int(rng.integers(spec.min_phones, spec.max_phones + 1))
        ids = rng.integers(0, spec.n_phonemes, size=n)
        q = rng.uniform(0.0, 2.0, size=n)
        noise = rng.standard_normal((n, GOP_DIM))
        gop = spec.center_scale * mu[ids] * (q / 2.0)[:, None] + spec.noise_scale * noise
        acc = quantize_quality(q)

        word_index = np.empty(n, dtype=np.int64)
        pos, w = 0, 0
        while pos < n:
            size = int(rng.integers(1, spec.max_word_len + 1))
            word_index[pos:pos + size] = w
            pos += size
            w += 1
        word_acc = np.array([acc[word_index == k].mean() for k in range(w)])
        samples.append(UtteranceSample(
            utt_id=f"syn{spec.seed}_{u:06d}",
            phoneme_ids=ids,
            gop=gop,
            phone_scores=acc,
            word_index=word_index,
            word_scores=np.repeat(word_acc[:, None], len(WORD_ASPECTS), axis=1),
            utterance_scores=np.full(len(UTT_ASPECTS), word_acc.mean()),
        ))
    return samples


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    features: np.ndarray       # (B, L, 84)
    phoneme_ids: np.ndarray    # (B, L) int, 0 at padding
    mask: np.ndarray           # (B, L) bool
    phone_targets: np.ndarray  # (B, L), PAD at padding
    word_targets: np.ndarray   # (B, L, 3), word scores broadcast to member phones
    utt_targets: np.ndarray    # (B, 5)
    word_index: np.ndarray     # (B, L) int, -1 at padding
    utt_ids: List[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def max_len(self) -> int:
        return self.features.shape[1]


def collate(samples: Sequence[UtteranceSample], max_len: int = MAX_LEN) -> Batch:
    b = len(samples)
    feats = np.zeros((b, max_len, GOP_DIM))
    ids = np.zeros((b, max_len), dtype=np.int64)
    mask = np.zeros((b, max_len), dtype=bool)
    phone_t = np.full((b, max_len), PAD)
    word_t = np.full((b, max_len, len(WORD_ASPECTS)), PAD)
    utt_t = np.zeros((b, len(UTT_ASPECTS)))
    widx = np.full((b, max_len), -1, dtype=np.int64)
    for i, s in enumerate(samples):
        n = len(s)
        if n > max_len:
            raise DatasetError(f"utterance {s.utt_id} has {n} phones, more than max_len={max_len}")
        feats[i, :n] = s.gop
        ids[i, :n] = s.phoneme_ids
        mask[i, :n] = True
        phone_t[i, :n] = s.phone_scores
        word_t[i, :n] = s.word_scores[s.word_index]
        utt_t[i] = s.utterance_scores
        widx[i, :n] = s.word_index
    return Batch(feats, ids, mask, phone_t, word_t, utt_t, widx, [s.utt_id for s in samples])


def make_batches(samples: Sequence[UtteranceSample], batch_size: int, max_len: int = MAX_LEN,
                 shuffle_seed: Optional[int | np.random.SeedSequence] = None) -> List[Batch]:
    """Pad and stack samples; a non-None ``shuffle_seed`` permutes them first. The last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    for s in samples:
        if len(s) > max_len:
            raise DatasetError(f"utterance {s.utt_id} has {len(s)} phones, more than max_len={max_len}")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    return [collate([samples[j] for j in order[i:i + batch_size]], max_len)
            for i in range(0, len(samples), batch_size)]
