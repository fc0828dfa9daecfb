"""Seeded multi-trial training with Adam, step logging and lambda sweeps.

Randomness: for training seed ``s`` parameter init draws from
``SeedSequence(s, spawn_key=(0,))`` and the batch order of epoch ``e`` from
``SeedSequence(s, spawn_key=(1, e))``; nothing else is random.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import NonFiniteError, Tape
from .dataset import UtteranceSample, make_batches
from .loss import LossConfig, batch_loss
from .metrics import EvalReport, GeometryReport, MetricError, evaluate, geometry
from .model import ModelConfig, ModelParams, forward, init_params

log = logging.getLogger(__name__)

LOG_FIELDS = ("seed", "epoch", "step", "l_mse", "l_pd", "l_ot", "l_pco", "wall_ms")


class TrainingAborted(RuntimeError):
    def __init__(self, seed: int, step: int, term: str):
        self.seed, self.step, self.term = seed, step, term
        super().__init__(f"seed {seed}: non-finite {term} at step {step}")


@dataclass(frozen=True)
class StepDecay:
    step_epochs: int
    gamma: float = 0.5

    def __call__(self, lr: float, epoch: int) -> float:
        return lr * self.gamma ** ((epoch - 1) // self.step_epochs)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 25
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    loss: LossConfig = LossConfig()
    lr_schedule: Optional[StepDecay] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: Optional[float] = None):
        """In-place update of ``params``; missing gradients count as zero."""
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class SeedResult:
    seed: int
    params: Optional[ModelParams]
    report: Optional[EvalReport]
    geometry: Optional[GeometryReport]
    log: List[dict] = field(default_factory=list)
    error: Optional[str] = None

    def epoch_means(self, key: str = "l_mse") -> np.ndarray:
        epochs = sorted({r["epoch"] for r in self.log})
        return np.array([np.mean([r[key] for r in self.log if r["epoch"] == e]) for e in epochs])


def train_step(params: ModelParams, batch, loss_config: LossConfig):
    """Forward, loss and backward on a fresh tape; returns (LossBreakdown, grads by name)."""
    tape = Tape()
    leaves = params.attach(tape)
    out = forward(params, batch, leaves)
    lb = batch_loss(out, batch, loss_config)
    tape.backward(lb.total)
    return lb, {k: tape.grad(t) for k, t in leaves.items()}


def train_seed(seed: int, train_set: Sequence[UtteranceSample], eval_set: Sequence[UtteranceSample],
               model_config: ModelConfig, train_config: TrainConfig, log_writer=None) -> SeedResult:
    params = init_params(model_config, np.random.SeedSequence(seed, spawn_key=(0,)))
    tc = train_config
    opt = Adam(params.tensors, tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps)
    rows = []
    step = 0
    for epoch in range(1, tc.epochs + 1):
        lr = tc.lr_schedule(tc.learning_rate, epoch) if tc.lr_schedule else tc.learning_rate
        order = np.random.SeedSequence(seed, spawn_key=(1, epoch))
        for batch in make_batches(train_set, tc.batch_size, model_config.max_len, order):
            step += 1
            t0 = time.perf_counter()
            try:
                lb, grads = train_step(params, batch, tc.loss)
            except NonFiniteError as e:
                raise TrainingAborted(seed, step, e.op) from e
            for term in ("l_mse", "l_pd", "l_ot", "l_pco"):
                if not np.isfinite(getattr(lb, term)):
                    raise TrainingAborted(seed, step, term)
            for k, g in grads.items():
                if not np.isfinite(g).all():
                    raise TrainingAborted(seed, step, f"gradient of {k}")
            opt.step(params.tensors, grads, lr)
            row = {"seed": seed, "epoch": epoch, "step": step, **lb.row(),
                   "wall_ms": (time.perf_counter() - t0) * 1e3}
            rows.append(row)
            if log_writer is not None:
                log_writer(row)
        log.debug("seed %d epoch %d l_pco %.5f", seed, epoch, rows[-1]["l_pco"])
    report = geo = None
    if eval_set:
        try:
            report = evaluate(params, eval_set)
        except MetricError as e:
            log.warning("seed %d: evaluation failed: %s", seed, e)
        geo = geometry(params, eval_set)
    return SeedResult(seed, params, report, geo, rows)


def _run_seed(args):
    seed, train_set, eval_set, model_config, train_config = args
    try:
        return train_seed(seed, train_set, eval_set, model_config, train_config)
    except TrainingAborted as e:
        return SeedResult(seed, None, None, None, error=str(e))


def train(train_set: Sequence[UtteranceSample], eval_set: Sequence[UtteranceSample],
          model_config: ModelConfig = ModelConfig(), train_config: TrainConfig = TrainConfig(),
          log_path=None, parallel: int = 1) -> List[SeedResult]:
    """Train one model per seed. Seeds that hit a non-finite value come back with ``error`` set."""
    if not train_set:
        raise ValueError("empty training set")
    jobs = [(s, train_set, eval_set, model_config, train_config) for s in train_config.seeds]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            results = list(ex.map(_run_seed, jobs))
    else:
        results = [_run_seed(j) for j in jobs]
    if log_path is not None:
        write_log(log_path, [r for res in results for r in res.log])
    return results


def write_log(path, rows, append: bool = False):
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        if not append or fh.tell() == 0:
            w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_FIELDS})


def read_log(path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [{k: (int(v) if k in ("seed", "epoch", "step") else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


SWEEP_FIXED = {"lambda_d": ("lambda_o", 0.0), "lambda_o": ("lambda_d", 5.0)}


@dataclass
class SweepRow:
    value: float
    results: List[SeedResult]


def sweep(parameter: str, values: Sequence[float], train_set, eval_set,
          model_config: ModelConfig = ModelConfig(), train_config: TrainConfig = TrainConfig(),
          parallel: int = 1) -> List[SweepRow]:
    """Train once per value of ``parameter``; the other weight is pinned (lambda_o=0 or lambda_d=5)."""
    if parameter not in SWEEP_FIXED:
        raise ValueError(f"unknown sweep parameter {parameter!r}")
    if not values:
        raise ValueError("no sweep values")
    other, pinned = SWEEP_FIXED[parameter]
    rows = []
    for v in values:
        loss = replace(train_config.loss, **{parameter: float(v), other: pinned})
        rows.append(SweepRow(float(v), train(train_set, eval_set, model_config,
                                             replace(train_config, loss=loss), parallel=parallel)))
    return rows


SWEEP_FIELDS = ("value", "seed", "phone_pcc", "word_acc_pcc", "utt_acc_pcc",
                "inter_center_dist", "score_weighted_scatter")


def sweep_table(rows: Sequence[SweepRow]) -> List[dict]:
    out = []
    nan = float("nan")
    for row in rows:
        for res in row.results:
            rep, geo = res.report, res.geometry
            out.append({
                "value": row.value, "seed": res.seed,
                "phone_pcc": rep.phone_pcc if rep else nan,
                "word_acc_pcc": rep.word_pcc["accuracy"] if rep else nan,
                "utt_acc_pcc": rep.utt_pcc["accuracy"] if rep else nan,
                "inter_center_dist": geo.mean_inter_center_distance if geo else nan,
                "score_weighted_scatter": geo.score_weighted_scatter if geo else nan,
            })
    return out
