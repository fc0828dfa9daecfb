"""Bring your own GOP features.

    python3 demos/04_real_features.py --out my_data.jsonl

The pipeline never computes GOP features itself; it reads them. This script
shows the conversion from plain arrays (what a Kaldi GOP recipe dumps, per
utterance: an (N, 84) feature matrix, phone ids, phone scores 0-2, word
boundaries, word and utterance scores 0-10) into the JSON Lines file the
loader reads, then runs a short training on it.

Without real data at hand, random arrays stand in for the recipe output.
"""
import argparse
import json
import subprocess
import sys

import numpy as np

from pco.dataset import load_dataset

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="gop_demo.jsonl")
ap.add_argument("--utterances", type=int, default=40)
ap.add_argument("--train", action="store_true", help="also run a 3-epoch training on the file")
args = ap.parse_args()

rng = np.random.default_rng(0)


def fake_recipe_output(i):
    """What you'd have per utterance after GOP extraction and labeling."""
    n = int(rng.integers(4, 12))
    word_of_phone = np.sort(rng.integers(0, max(1, n // 3), size=n))
    word_of_phone = np.unique(word_of_phone, return_inverse=True)[1]   # contiguous 0..W-1
    n_words = word_of_phone.max() + 1
    return {
        "utt_id": f"spk{i // 10:02d}_{i:04d}",
        "gop": rng.normal(size=(n, 84)),
        "phone_ids": rng.integers(0, 39, size=n),
        "phone_scores": rng.integers(0, 3, size=n).astype(float),      # already 0-2
        "word_of_phone": word_of_phone,
        "word_scores": rng.integers(0, 11, size=(n_words, 3)).astype(float),   # accuracy, stress, total
        "utt_scores": dict(zip(("accuracy", "completeness", "fluency", "prosody", "total"),
                               rng.integers(0, 11, size=5).astype(float))),
    }


def to_record(u):
    return {
        "utt_id": u["utt_id"],
        "phones": [{"phoneme_id": int(p), "gop": g.tolist(), "score": float(s), "word_index": int(w)}
                   for p, g, s, w in zip(u["phone_ids"], u["gop"], u["phone_scores"], u["word_of_phone"])],
        "words": [{"accuracy": a, "stress": st, "total": t} for a, st, t in u["word_scores"].tolist()],
        "utterance": {k: float(v) for k, v in u["utt_scores"].items()},
    }


with open(args.out, "w", encoding="utf-8") as fh:
    # word and utterance scores are on 0-10 here; the header makes the loader divide by 5
    fh.write(json.dumps({"score_scale": "0-10"}) + "\n")
    for i in range(args.utterances):
        fh.write(json.dumps(to_record(fake_recipe_output(i))) + "\n")

samples = load_dataset(args.out)
print(f"wrote {len(samples)} utterances to {args.out}; first has {len(samples[0])} phones,"
      f" utterance scores {samples[0].utterance_scores}")

if args.train:
    cmd = [sys.executable, "-m", "pco", "train", "--data", args.out, "--seeds", "1", "--epochs", "3",
           "--out-dir", args.out + ".run"]
    print("running:", " ".join(cmd[1:]))
    sys.exit(subprocess.call(cmd))
