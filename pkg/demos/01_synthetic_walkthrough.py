"""Synthetic walkthrough: generate data, train one model, read the reports.

    python3 demos/01_synthetic_walkthrough.py --epochs 20

The generator plants one prototype direction per phoneme; a token's feature
sits at center_scale * mu_p * q/2 plus noise, and its phone accuracy is q
quantized to {0, 1, 2}. So a model has something real to learn, and the
geometry numbers mean something.
"""
import argparse
from dataclasses import replace

from pco.dataset import SyntheticSpec, generate_synthetic
from pco.loss import LossConfig
from pco.model import ModelConfig
from pco.trainer import TrainConfig, train

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=20)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

# 300 training utterances; the eval set reuses the same prototypes (prototype_seed)
# but draws fresh tokens, so it is a held-out sample of the same "language".
spec = SyntheticSpec(n_phonemes=10, utterances=300, seed=100)
train_set = generate_synthetic(spec)
eval_set = generate_synthetic(replace(spec, utterances=100, seed=101, prototype_seed=100))

s = train_set[0]
print(f"{s.utt_id}: {len(s)} phones in {s.n_words} words, gop {s.gop.shape}")
print("phone accuracies  ", s.phone_scores)
print("word scores (acc) ", s.word_scores[:, 0])
print("utterance scores  ", s.utterance_scores)

# default model: 3 blocks, 24 hidden units, one head
cfg = TrainConfig(epochs=args.epochs, seeds=(args.seed,), loss=LossConfig(lambda_d=5.0, lambda_o=0.1))
(res,) = train(train_set, eval_set, ModelConfig(), cfg)

means = res.epoch_means("l_mse")
print(f"\ntraining mse: epoch 1 {means[0]:.4f} -> epoch {len(means)} {means[-1]:.4f}")
print("\nheld-out scores")
print(res.report.table())
print("\nembedding geometry (unit-normalized phone embeddings)")
print(res.geometry.table())
