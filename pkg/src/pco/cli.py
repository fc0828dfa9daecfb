"""Command line: python -m pco {gen,train,sweep,evaluate,export-embeddings}.

Exit codes: 0 success, 2 usage or data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

from . import __version__
from .dataset import DatasetError, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .loss import LossConfig
from .metrics import MetricError, evaluate, format_table, phone_embeddings
from .model import ModelConfig, ModelError, load_checkpoint, save_checkpoint
from .trainer import StepDecay, TrainConfig, sweep, sweep_table, train, write_log, SWEEP_FIELDS

EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- manifests


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Run manifest, written before compute with status ``incomplete``."""

    def __init__(self, path: Path, command: str, config: dict, seeds=(), data_digest=None):
        self.path = Path(path)
        self.body = {"command": command, "tool_version": __version__, "config": config,
                     "seeds": list(seeds), "data_digest": data_digest, "artifacts": [],
                     "status": "incomplete"}
        self.write()

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.body, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def add(self, *paths):
        self.body["artifacts"].extend(str(p) for p in paths)

    def finish(self, status="complete", error: Optional[str] = None):
        self.body["status"] = status
        if error:
            self.body["error"] = error
        self.write()


def run_root() -> Path:
    return Path(os.environ.get("PCO_RUN_DIR", "runs"))


def _run_dir(args, command: str, config: dict) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    key = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:10]
    return run_root() / f"{command}-{key}"


# ---------------------------------------------------------------- config files


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Keys are flag names with or without dashes."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.lstrip("-").replace("-", "_")] = v
    return out


# ---------------------------------------------------------------- argument parsing


def _csv_floats(text: str) -> List[float]:
    vals = [v for v in (s.strip() for s in text.split(",")) if v]
    if not vals:
        raise argparse.ArgumentTypeError("expected a comma-separated list of numbers")
    try:
        return [float(v) for v in vals]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number list: {text!r}") from None


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--d-model", type=int, default=24)
    g.add_argument("--n-blocks", type=int, default=3)
    g.add_argument("--n-heads", type=int, default=1)
    g.add_argument("--ff-dim", type=int, default=96)
    g.add_argument("--max-len", type=int, default=50)


def _add_train_flags(p):
    p.add_argument("--data", required=True, help="training set (JSON Lines)")
    p.add_argument("--eval-data", help="held-out set; default: last --eval-fraction of --data")
    p.add_argument("--eval-fraction", type=float, default=0.2)
    _add_model_flags(p)
    g = p.add_argument_group("loss")
    g.add_argument("--lambda-d", type=float, default=5.0)
    g.add_argument("--lambda-o", type=float, default=0.1)
    g.add_argument("--margin", type=float, default=1.0)
    g.add_argument("--no-normalize", action="store_true", help="skip unit-normalizing phone embeddings")
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=100)
    g.add_argument("--batch-size", type=int, default=25)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--seeds", type=int, default=5, help="number of seeds (0..N-1)")
    g.add_argument("--seed-offset", type=int, default=0)
    g.add_argument("--lr-step-epochs", type=int, default=0, help="step-decay period; 0 = constant lr")
    g.add_argument("--lr-gamma", type=float, default=0.5)
    g.add_argument("--parallel-seeds", type=int, default=1)
    p.add_argument("--out-dir", help="artifact directory (default under $PCO_RUN_DIR or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m pco", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file supplying defaults for any flag")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--phonemes", type=int, default=10)
    p.add_argument("--utterances", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prototype-seed", type=int, help="seed for the phoneme prototypes (default: --seed)")
    p.add_argument("--center-scale", type=float, default=3.0)
    p.add_argument("--noise-scale", type=float, default=0.3)
    p.add_argument("--min-phones", type=int, default=5)
    p.add_argument("--max-phones", type=int, default=20)
    p.add_argument("--raw", action="store_true", help="write 0-10 utterance/word scores with a header line")
    p.add_argument("-o", "--out", required=True)

    p = sub.add_parser("train", help="train one model per seed")
    _add_train_flags(p)

    p = sub.add_parser("sweep", help="train across values of lambda_d or lambda_o")
    p.add_argument("--param", required=True, choices=("lambda_d", "lambda_o"))
    p.add_argument("--values", required=True, type=_csv_floats)
    _add_train_flags(p)
    p.add_argument("-o", "--out", help="sweep CSV path (default: <run dir>/sweep.csv)")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clip", action="store_true", help="clip predictions to [0, 2]")

    p = sub.add_parser("export-embeddings", help="write phone embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--d-model", type=int, help="expected embedding width")
    p.add_argument("--max-len", type=int, help="expected max_len")
    p.add_argument("-o", "--out", required=True)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("command", nargs="?")
    known, _ = pre.parse_known_args(argv)
    commands = parser._subparsers._group_actions[0].choices
    if known.config and known.command in commands:
        try:
            defaults = read_config_file(known.config)
        except (OSError, UsageError) as e:
            parser.error(str(e))
        # file values become defaults, so explicit flags still win
        subparser = commands[known.command]
        actions = {a.dest: a for a in subparser._actions}
        converted = {}
        for k, v in defaults.items():
            if k not in actions:
                parser.error(f"{known.config}: unknown key {k!r} for {known.command}")
            action = actions[k]
            try:
                if action.const is True and action.nargs == 0:
                    converted[k] = v.lower() in ("1", "true", "yes", "on")
                else:
                    converted[k] = action.type(v) if action.type else v
            except (ValueError, argparse.ArgumentTypeError) as e:
                parser.error(f"{known.config}: bad value for {k}: {e}")
            action.required = False
        subparser.set_defaults(**converted)
    return parser.parse_args(argv)


# ---------------------------------------------------------------- commands


def _model_config(args) -> ModelConfig:
    return ModelConfig(d_model=args.d_model, n_blocks=args.n_blocks, n_heads=args.n_heads,
                       ff_dim=args.ff_dim, max_len=args.max_len)


def _train_config(args) -> TrainConfig:
    loss = LossConfig(args.lambda_d, args.lambda_o, args.margin, not args.no_normalize)
    sched = StepDecay(args.lr_step_epochs, args.lr_gamma) if args.lr_step_epochs > 0 else None
    if args.seeds < 1:
        raise ValueError("--seeds must be >= 1")
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                       seeds=tuple(range(args.seed_offset, args.seed_offset + args.seeds)),
                       loss=loss, lr_schedule=sched)


def _load_sets(args):
    samples = load_dataset(args.data)
    if args.eval_data:
        return samples, load_dataset(args.eval_data)
    if not 0 < args.eval_fraction < 1:
        raise UsageError("--eval-fraction must lie in (0, 1)")
    n_eval = max(2, int(round(len(samples) * args.eval_fraction)))
    if n_eval >= len(samples):
        raise UsageError("dataset too small to hold out an evaluation split")
    return samples[:-n_eval], samples[-n_eval:]


def _digest(args) -> str:
    d = file_digest(args.data)
    if getattr(args, "eval_data", None):
        d += ":" + file_digest(args.eval_data)
    return d


def _resolved(args, skip=("config", "verbose", "command")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def cmd_gen(args) -> int:
    try:
        spec = SyntheticSpec(n_phonemes=args.phonemes, center_scale=args.center_scale,
                             noise_scale=args.noise_scale, utterances=args.utterances,
                             min_phones=args.min_phones, max_phones=args.max_phones, seed=args.seed,
                             prototype_seed=args.prototype_seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    manifest = Manifest(out.with_name(out.name + ".manifest.json"), "gen",
                        {**asdict(spec), "raw": args.raw}, seeds=[args.seed])
    save_dataset(generate_synthetic(spec), out, raw=args.raw)
    manifest.body["data_digest"] = file_digest(out)
    manifest.add(out)
    manifest.finish()
    print(f"wrote {spec.utterances} utterances to {out}")
    return 0


def _write_seed_artifacts(run_dir: Path, results, manifest: Manifest):
    rows = []
    for res in results:
        sdir = run_dir / f"seed{res.seed}"
        sdir.mkdir(parents=True, exist_ok=True)
        if res.error:
            (sdir / "error.txt").write_text(res.error + "\n", encoding="utf-8")
            manifest.add(sdir / "error.txt")
            continue
        ckpt = sdir / "checkpoint.bin"
        save_checkpoint(res.params, ckpt, extra={"seed": res.seed})
        manifest.add(ckpt)
        if res.report:
            (sdir / "eval.txt").write_text(res.report.table() + "\n", encoding="utf-8")
            manifest.add(sdir / "eval.txt")
            rows += [(res.seed, "eval", k, v) for k, v in res.report.flat().items()]
        if res.geometry:
            (sdir / "geometry.txt").write_text(res.geometry.table() + "\n", encoding="utf-8")
            manifest.add(sdir / "geometry.txt")
            rows += [(res.seed, "geometry", k, v) for k, v in res.geometry.flat().items()]
    with open(run_dir / "reports.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed", "report", "key", "value"))
        w.writerows((s, r, k, repr(v)) for s, r, k, v in rows)
    manifest.add(run_dir / "reports.csv")


def _finish(manifest: Manifest, results) -> int:
    errors = [r.error for r in results if r.error]
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        manifest.finish("failed", "; ".join(errors))
        return EXIT_NUMERIC
    manifest.finish()
    return 0


def cmd_train(args) -> int:
    train_set, eval_set = _load_sets(args)
    mc, tc = _model_config(args), _train_config(args)
    config = _resolved(args)
    run_dir = _run_dir(args, "train", config)
    manifest = Manifest(run_dir / "manifest.json", "train", config, tc.seeds, _digest(args))
    results = train(train_set, eval_set, mc, tc, log_path=run_dir / "metrics.csv",
                    parallel=args.parallel_seeds)
    manifest.add(run_dir / "metrics.csv")
    _write_seed_artifacts(run_dir, results, manifest)
    for res in results:
        if res.report:
            print(f"# seed {res.seed}")
            print(res.report.table())
    return _finish(manifest, results)


def cmd_sweep(args) -> int:
    train_set, eval_set = _load_sets(args)
    mc, tc = _model_config(args), _train_config(args)
    config = _resolved(args)
    run_dir = _run_dir(args, "sweep", config)
    manifest = Manifest(run_dir / "manifest.json", "sweep", config, tc.seeds, _digest(args))
    rows = sweep(args.param, args.values, train_set, eval_set, mc, tc, parallel=args.parallel_seeds)
    out = Path(args.out) if args.out else run_dir / "sweep.csv"
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in sweep_table(rows):
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    write_log(run_dir / "metrics.csv", [lr for row in rows for res in row.results for lr in res.log])
    manifest.add(out, run_dir / "metrics.csv")
    print(out.read_text(encoding="utf-8"), end="")
    return _finish(manifest, [res for row in rows for res in row.results])


def _checked_checkpoint(args):
    params = load_checkpoint(args.checkpoint)
    cfg = params.config
    for flag in ("d_model", "max_len"):
        want = getattr(args, flag, None)
        if want is not None and want != getattr(cfg, flag):
            raise UsageError(f"--{flag.replace('_', '-')} {want} does not match checkpoint {getattr(cfg, flag)}")
    return params


def cmd_evaluate(args) -> int:
    params = _checked_checkpoint(args)
    samples = load_dataset(args.data)
    print(evaluate(params, samples, clip=args.clip).table())
    return 0


def cmd_export_embeddings(args) -> int:
    params = _checked_checkpoint(args)
    samples = load_dataset(args.data)
    out = Path(args.out)
    manifest = Manifest(out.with_name(out.name + ".manifest.json"), "export-embeddings",
                        _resolved(args), data_digest=file_digest(args.data))
    recs = phone_embeddings(params, samples)
    d = params.config.d_model
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utt_id", "position", "phoneme_id", "phone_score"] + [f"e{i}" for i in range(d)])
        for r in recs:
            w.writerow([r.utt_id, r.position, r.phoneme_id, repr(r.phone_score)] + [repr(float(v)) for v in r.embedding])
    manifest.add(out)
    manifest.finish()
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "sweep": cmd_sweep, "evaluate": cmd_evaluate,
            "export-embeddings": cmd_export_embeddings}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, DatasetError, ModelError, MetricError, ValueError, OSError) as e:
        print(f"pco {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"pco {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
