"""Operator entry point: corpus synthesis, training, evaluation, ablation
grids, gradient checks. Batch-oriented; every command writes JSON/CSV
artifacts carrying the resolved config and build version.

Exit codes: 0 success, 2 config error, 3 I/O or format error, 4 non-finite
loss, 5 checkpoint/config mismatch, 6 failed gradient check.

Seed precedence: --seed flag, then config file, then the DRV_SEED
environment variable, then the built-in default.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .artifacts import build_version, write_atomic
from .config import (TrainConfig, dataclass_from_dict, desk_train_config,
                     load_config_file, full_train_config)
from .errors import (CheckpointMismatchError, ConfigError, DataError,
                     DrvecError, FormatError, TrainingError)

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRAINING = 4
EXIT_CHECKPOINT = 5
EXIT_GRADCHECK = 6

_TOP_LEVEL_KEYS = {"corpus", "out", "trials", "train"}


def _merge(base: dict, override: dict) -> dict:
    """Recursive dict merge: nested sections override key by key."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _resolve_seed(flag_seed, file_train: dict) -> int | None:
    if flag_seed is not None:
        return flag_seed
    if "seed" in file_train:
        return file_train["seed"]
    env = os.environ.get("DRV_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"DRV_SEED must be an integer, got {env!r}") from exc
    return None


def _load_file_sections(args) -> dict:
    doc = {}
    if getattr(args, "config", None):
        doc = load_config_file(args.config)
        unknown = sorted(set(doc) - _TOP_LEVEL_KEYS)
        if unknown:
            raise ConfigError(f"unknown top-level config key(s) {unknown}; "
                              f"expected a subset of {sorted(_TOP_LEVEL_KEYS)}")
    return doc


def _build_train_config(args) -> tuple:
    """Resolve (TrainConfig, corpus path, out path, trials spec) from
    preset defaults, config file, then command-line flags."""
    doc = _load_file_sections(args)
    file_train = dict(doc.get("train", {}))

    preset = getattr(args, "preset", None) or "desk"
    base = full_train_config() if preset == "full" else desk_train_config()
    merged = _merge(base.to_dict(), file_train)

    def override(key, value):
        if value is not None:
            merged[key] = value

    override("loss", getattr(args, "loss", None))
    override("steps", getattr(args, "steps", None))
    override("learning_rate", getattr(args, "lr", None))
    override("clip_norm", getattr(args, "clip_norm", None))
    override("eval_every", getattr(args, "eval_every", None))
    override("dnn_width", getattr(args, "dnn_width", None))
    seed = _resolve_seed(getattr(args, "seed", None), file_train)
    if seed is not None:
        merged["seed"] = seed
    switches = dict(merged.get("switches", {}))
    for name in ("A", "B", "C"):
        flag = getattr(args, f"switch_{name.lower()}", None)
        if flag is not None:
            switches[name] = flag == "on"
    if getattr(args, "d", None) is not None:
        switches["d"] = args.d
    if switches:
        merged["switches"] = switches

    config = TrainConfig.from_dict(merged)
    corpus_dir = getattr(args, "corpus", None) or doc.get("corpus")
    out_dir = getattr(args, "out", None) or doc.get("out")
    trials_spec = doc.get("trials")
    return config, corpus_dir, out_dir, trials_spec


def _load_corpus(corpus_dir):
    from .synth import load_corpus

    if not corpus_dir:
        raise ConfigError("no corpus directory given (flag --corpus or config key 'corpus')")
    if not Path(corpus_dir).exists():
        raise FileNotFoundError(f"corpus directory {corpus_dir} does not exist")
    return load_corpus(corpus_dir)


def _load_trials(trials_spec, corpus, corpus_dir):
    """Trial lists: explicit {condition: path} mapping, or the
    trials_<condition>.txt files next to the corpus manifest."""
    from .trials import TrialSet, parse_trial_lines

    trials = []
    if trials_spec:
        items = sorted(trials_spec.items())
    else:
        items = [(cond, Path(corpus_dir) / f"trials_{cond}.txt") for cond in corpus.conditions()]
        items = [(cond, path) for cond, path in items if Path(path).exists()]
        if not items:
            raise FileNotFoundError(f"no trials_<condition>.txt files found under {corpus_dir}")
    for cond, path in items:
        text = Path(path).read_text()
        trials.extend(parse_trial_lines(text, cond))
    trial_set = TrialSet(trials)
    trial_set.validate()
    return trial_set


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    from .synth import CorpusConfig, build_trials, gen_corpus, save_corpus, stream
    from .trials import format_trial_lines

    seed = _resolve_seed(args.seed, {})
    config = CorpusConfig(
        mode=args.mode,
        train_speakers=args.speakers,
        eval_speakers=args.eval_speakers,
        train_utts=args.utts,
        eval_utts=args.eval_utts,
        min_frames=args.min_frames,
        max_frames=args.max_frames,
        noise_snr_db=args.snr_db,
        centroid_sd=args.centroid_sd,
        seed=seed if seed is not None else 7,
    )
    corpus = gen_corpus(config)
    save_corpus(corpus, args.out, version=build_version())
    trial_set = build_trials(corpus, args.trial_enroll, args.trial_targets,
                             args.trial_nontargets, stream(config.seed, "eval-trials"))
    for cond in trial_set.conditions():
        write_atomic(Path(args.out) / f"trials_{cond}.txt",
                     format_trial_lines(trial_set.for_condition(cond)))
    n_train = len(corpus.speaker_ids("train"))
    n_eval = len(corpus.speaker_ids("eval"))
    print(f"corpus written to {args.out}")
    print(f"  mode={config.mode} seed={config.seed}")
    print(f"  speakers: {n_train} train + {n_eval} eval")
    print(f"  utterances: {len(corpus.utterances)} across conditions {corpus.conditions()}")
    print(f"  trials per condition: {args.trial_targets} target / {args.trial_nontargets} nontarget")
    return 0


def cmd_train(args) -> int:
    from .train import run_training

    config, corpus_dir, out_dir, trials_spec = _build_train_config(args)
    if not out_dir:
        raise ConfigError("no output directory given (flag --out or config key 'out')")
    corpus = _load_corpus(corpus_dir)
    trials = _load_trials(trials_spec, corpus, corpus_dir) if trials_spec else None
    result = run_training(config, corpus, out_dir=out_dir, trials=trials)
    print(f"trained {config.steps} steps (loss {result.trace[0].loss:.4f} -> {result.trace[-1].loss:.4f})")
    print(f"final average EER: {result.report.average_eer:.4f}"
          + "".join(f"  {c.condition}={c.eer:.4f}" for c in result.report.conditions))
    print(f"best average EER: {result.best_eer:.4f} at step {result.best.step}")
    print(f"artifacts in {out_dir}: checkpoint.drv best.drv trace.csv final_eval.json")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import det_csv, evaluate_model
    from .train import load_checkpoint, restore_model

    doc = _load_file_sections(args)
    checkpoint_path = args.checkpoint or doc.get("train", {}).get("checkpoint")
    if not checkpoint_path:
        raise ConfigError("no checkpoint given (--checkpoint)")
    ckpt = load_checkpoint(checkpoint_path)
    model = restore_model(ckpt)
    corpus_dir = args.corpus or doc.get("corpus")
    corpus = _load_corpus(corpus_dir)
    if args.trials:
        bad = [kv for kv in args.trials if "=" not in kv]
        if bad:
            raise ConfigError(f"--trials entries must look like COND=PATH, got {bad}")
        trials_spec = dict(kv.split("=", 1) for kv in args.trials)
    else:
        trials_spec = doc.get("trials")
    trials = _load_trials(trials_spec, corpus, corpus_dir)

    echo = model.config_echo()
    echo["checkpoint_step"] = ckpt.step
    echo["train_config"] = ckpt.config.to_dict()
    report = evaluate_model(model, trials, corpus, config_echo=echo)
    out = Path(args.out)
    payload = report.to_dict()
    payload["version"] = build_version()
    write_atomic(out / "report.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    for cond in report.conditions:
        write_atomic(out / f"det_{cond.condition}.csv", det_csv(cond.det))
    print(f"average EER: {report.average_eer:.4f}"
          + "".join(f"  {c.condition}={c.eer:.4f}" for c in report.conditions))
    print(f"artifacts in {out}: report.json " +
          " ".join(f"det_{c.condition}.csv" for c in report.conditions))
    return 0


def cmd_ablate(args) -> int:
    from .train import ablation_grid, grid_csv

    config, corpus_dir, out_dir, trials_spec = _build_train_config(args)
    if not out_dir:
        raise ConfigError("no output directory given (flag --out or config key 'out')")
    corpus = _load_corpus(corpus_dir)
    trials = _load_trials(trials_spec, corpus, corpus_dir) if trials_spec else None
    cells = ablation_grid(config, args.axis, corpus, trials=trials)
    out = Path(out_dir)
    write_atomic(out / f"grid_{args.axis}.csv", grid_csv(cells, args.axis, config))
    for cell in cells:
        if cell.report is not None:
            payload = cell.report.to_dict()
            payload["version"] = build_version()
            payload["cell"] = cell.label
            payload["train_config"] = cell.config.to_dict()
            safe = cell.label.replace("=", "").replace(",", "_")
            write_atomic(out / f"cell_{safe}.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    succeeded = sum(1 for c in cells if c.report is not None)
    for cell in cells:
        if cell.error:
            print(f"cell {cell.label}: FAILED ({cell.error})")
        else:
            print(f"cell {cell.label}: avg EER {cell.report.average_eer:.4f}")
    print(f"grid written to {out / f'grid_{args.axis}.csv'} ({succeeded}/{len(cells)} cells)")
    return 0 if succeeded >= 1 else 1


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    checks = run_suite(desk_dims=not args.tiny)
    rows = []
    failed = []
    for check in checks:
        status = "ok" if check.passed else "FAIL"
        rows.append({"op": check.name, "max_rel_err": check.max_rel_err,
                     "tolerance": check.tolerance, "passed": check.passed})
        print(f"{check.name:28s} max rel err {check.max_rel_err:.3e}  tol {check.tolerance:.0e}  {status}")
        if not check.passed:
            failed.append(check.name)
    if args.out:
        payload = {"version": build_version(), "checks": rows,
                   "config": {"desk_dims": not args.tiny}}
        write_atomic(Path(args.out), json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if failed:
        print(f"FAILED gradient checks: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"all {len(checks)} gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drvec",
        description="decision-residual speaker verification: synthesize corpora, "
                    "train, evaluate, run ablation grids and gradient checks")
    parser.add_argument("--version", action="version", version=build_version())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus with trial lists")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=("feature", "waveform"), default="feature")
    p.add_argument("--speakers", type=int, default=64, help="train speakers")
    p.add_argument("--eval-speakers", type=int, default=32)
    p.add_argument("--utts", type=int, default=10, help="utterances per train speaker")
    p.add_argument("--eval-utts", type=int, default=8)
    p.add_argument("--min-frames", type=int, default=20)
    p.add_argument("--max-frames", type=int, default=60)
    p.add_argument("--snr-db", type=float, default=8.0, help="noisy-condition SNR")
    p.add_argument("--centroid-sd", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trial-enroll", type=int, default=4)
    p.add_argument("--trial-targets", type=int, default=200)
    p.add_argument("--trial-nontargets", type=int, default=200)
    p.set_defaults(func=cmd_synth)

    def add_train_flags(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--corpus", help="corpus directory")
        p.add_argument("--out", help="output directory")
        p.add_argument("--preset", choices=("desk", "full"), default=None)
        p.add_argument("--loss", choices=("ge2e_softmax", "ge2e_xs", "ecw_bce"), default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--clip-norm", type=float, default=None)
        p.add_argument("--eval-every", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--dnn-width", type=int, default=None)
        for name in ("a", "b", "c"):
            p.add_argument(f"--switch-{name}", choices=("on", "off"), default=None)
        p.add_argument("--d", type=int, default=None, help="cosine dims")

    p = sub.add_parser("train", help="train a model and write checkpoint/trace/eval artifacts")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on trial lists")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--checkpoint", help="checkpoint file (.drv)")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--trials", nargs="*", metavar="COND=PATH",
                   help="per-condition trial lists (default: trials_<cond>.txt beside the corpus)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate one ablation axis")
    add_train_flags(p)
    p.add_argument("--axis", choices=("loss", "switches", "dterms"), required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--out", help="write a JSON report here")
    p.add_argument("--tiny", action="store_true",
                   help="exhaustive checks at tiny dimensions instead of desk preset")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except CheckpointMismatchError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (FormatError, FileNotFoundError, IsADirectoryError, PermissionError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
