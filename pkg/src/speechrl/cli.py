"""Command-line entry point: extract features, pre-train, train with REINFORCE, report.

Every run is reproducible from one integer: ``--seed`` derives the split,
initialisation, episode-shuffle, dropout, sampling and pre-training seeds
(see :func:`derive_seed`). ``train`` writes a ``run_config.txt`` that can be
passed back with ``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .audio_ingest import SUBSETS, AudioError, DatasetError, SplitSpec, load_index, scan_dataset, split_dataset
from .features import CacheError, FeatureConfig, FeatureError, cache_read, cache_write, compute_mfcc
from .metrics import (MetricsLog, MismatchedRuns, accuracy, compare_runs, final_mean, improvement,
                      read_scores, write_report)
from .policy import ArchitectureSpec, PretrainConfig, init_policy, pretrain
from .rl import GREEDY, SAMPLE, EnvError, TrainRunConfig, run_experiment

log = logging.getLogger("speechrl")

# Order is part of the seed derivation; append only.
SUB_SEEDS = ("split", "init", "shuffle", "dropout", "sampling", "pretrain")
PARTITIONS = ("pretrain", "rl", "eval")
MANIFEST = "manifest.json"
RUN_CONFIG = "run_config.txt"


def derive_seed(global_seed: int, name: str) -> int:
    """Sub-seed ``name`` of ``global_seed``: first word of ``SeedSequence([global_seed, k])``.

    ``k`` is the position of ``name`` in :data:`SUB_SEEDS`.
    """
    k = SUB_SEEDS.index(name)
    return int(np.random.SeedSequence([global_seed, k]).generate_state(1)[0])


# ---------------------------------------------------------------- arguments

def parse_frames(text: str):
    if text == "auto":
        return "auto"
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("target frames must be 'auto' or a positive integer")
    return n


def parse_split(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("split needs three comma-separated fractions: pretrain,rl,eval")
    return parts


def parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment; keys may use - or _."""
    values = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _data_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; command-line flags override its values")
    p.add_argument("--root", help="dataset root holding one directory of .wav files per command")
    p.add_argument("--subset", choices=sorted(SUBSETS), default="binary")
    p.add_argument("--seed", type=int, default=0, help="global seed; all other seeds derive from it")
    p.add_argument("--cache", help="feature cache directory")
    p.add_argument("--target-frames", type=parse_frames, default="auto",
                   help="frames per MFCC matrix: 'auto' (from clip length) or N")
    p.add_argument("--max-per-class", type=int, default=None,
                   help="keep only the first N files of each command")
    p.add_argument("--split", type=parse_split, default=(0.4, 0.4, 0.2),
                   help="pretrain,rl,eval fractions (default 0.4,0.4,0.2)")
    p.add_argument("--split-mode", choices=("hash", "official-lists"), default="hash",
                   help="'official-lists' is reserved and not implemented")
    p.add_argument("-v", "--verbose", action="store_true")


def _training_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--pretrain", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--pretrain-epochs", type=int, default=10)
    p.add_argument("--pretrain-lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speechrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="compute MFCC caches for each split partition")
    _data_options(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("pretrain", help="supervised pre-training only; writes policy.poln")
    _data_options(p)
    _training_options(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="optional pre-training followed by REINFORCE episodes")
    _data_options(p)
    _training_options(p)
    p.add_argument("--episodes", type=int, default=10000)
    p.add_argument("--eta", type=int, default=50, help="steps per episode")
    p.add_argument("--lr", type=float, default=1e-4, help="REINFORCE learning rate")
    p.add_argument("--mode", choices=(GREEDY, SAMPLE), default=GREEDY)
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="rewrite a run's reports, or compare two runs")
    p.add_argument("run", help="run directory (the pre-trained one when comparing)")
    p.add_argument("--compare", metavar="RUN", help="paired run without pre-training")
    p.add_argument("--out", help="output directory (default: the run directory, or RUN/comparison)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write a synthetic corpus laid out like Speech Commands")
    p.add_argument("--out", required=True)
    p.add_argument("--subset", choices=sorted(SUBSETS), default="binary")
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr-db", type=float, nargs=2, default=(15.0, 30.0), metavar=("LO", "HI"))
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, path: str) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, text in read_config(path).items():
        action = actions.get(key)
        if action is None:
            parser.error(f"{path}: unknown key {key!r}")
        try:
            if isinstance(action, argparse.BooleanOptionalAction) or isinstance(action.default, bool):
                value = parse_bool(text)
            elif action.nargs:
                value = [action.type(t) if action.type else t for t in text.split()]
            else:
                value = action.type(text) if action.type else text
        except (ValueError, argparse.ArgumentTypeError) as exc:
            parser.error(f"{path}: bad value for {key}: {exc}")
        if action.choices is not None and value not in action.choices:
            parser.error(f"{path}: {key} must be one of {sorted(action.choices)}")
        defaults[key] = value
        action.required = False
    sub.set_defaults(**defaults)


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command:
        subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        sub = subparsers.choices.get(known.command)
        if sub is not None:
            if not Path(known.config).is_file():
                parser.error(f"config file not found: {known.config}")
            _apply_config(parser, sub, known.config)
    return parser.parse_args(argv)


# ---------------------------------------------------------------- features

def feature_config(args) -> FeatureConfig:
    return FeatureConfig(target_frames=args.target_frames)


def split_spec(args) -> SplitSpec:
    return SplitSpec(*args.split, seed=derive_seed(args.seed, "split"))


def dataset_digest(index, spec: SplitSpec, fcfg: FeatureConfig, max_per_class) -> str:
    """SHA-256 over the extraction settings and the bytes of every indexed file."""
    h = hashlib.sha256()
    settings = {"subset": index.subset_kind, "split": list(spec.fractions), "split_seed": spec.seed,
                "features": repr(fcfg), "max_per_class": max_per_class}
    h.update(json.dumps(settings, sort_keys=True).encode())
    for (rel, label), path in zip(index.entries, index.paths()):
        h.update(f"{rel}\0{label}\0".encode())
        h.update(hashlib.sha256(path.read_bytes()).digest())
    return h.hexdigest()


def ensure_features(args, cache_dir: Path) -> dict:
    """Extract caches into ``cache_dir`` unless an up-to-date manifest is already there."""
    if args.split_mode != "hash":
        raise NotImplementedError("--split-mode official-lists is reserved but not implemented")
    if args.root is None:
        manifest_path = cache_dir / MANIFEST
        if not manifest_path.is_file():
            raise FileNotFoundError(f"no --root given and no feature cache at {cache_dir}")
        return json.loads(manifest_path.read_text())
    spec, fcfg = split_spec(args), feature_config(args)
    index = scan_dataset(args.root, args.subset, args.max_per_class)
    digest = dataset_digest(index, spec, fcfg, args.max_per_class)
    manifest_path = cache_dir / MANIFEST
    if manifest_path.is_file():
        old = json.loads(manifest_path.read_text())
        if old.get("digest") == digest and all((cache_dir / f"{p}.mfcc").is_file() for p in PARTITIONS):
            log.info("feature cache %s is up to date", cache_dir)
            old["rewritten"] = False
            return old
    cache_dir.mkdir(parents=True, exist_ok=True)
    counts, skipped = {}, []
    for name, part in zip(PARTITIONS, split_dataset(index, spec)):
        loaded = load_index(part)
        skipped += loaded.skipped
        mats = [compute_mfcc(c, fcfg) for c in loaded.clips]
        cache_write(mats, cache_dir / f"{name}.mfcc")
        counts[name] = len(mats)
    manifest = {"digest": digest, "subset": args.subset, "label_map": index.label_map,
                "root": str(Path(args.root).resolve()), "files": len(index), "counts": counts,
                "skipped": sorted(skipped), "split": list(spec.fractions), "split_seed": spec.seed}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    manifest["rewritten"] = True
    return manifest


def load_partitions(cache_dir: Path) -> dict[str, list]:
    return {p: cache_read(cache_dir / f"{p}.mfcc") for p in PARTITIONS}


def _cache_dir(args) -> Path:
    if args.cache:
        return Path(args.cache)
    if getattr(args, "out", None):
        return Path(args.out) / "features"
    raise ValueError("extract needs --cache")


def cmd_extract(args) -> int:
    if args.root is None:
        raise ValueError("extract needs --root")
    cache_dir = _cache_dir(args)
    m = ensure_features(args, cache_dir)
    state = "wrote" if m["rewritten"] else "up to date:"
    counts = ", ".join(f"{k} {m['counts'][k]}" for k in PARTITIONS)
    print(f"{state} {cache_dir} ({counts}; "
          f"{len(m['skipped'])} of {m['files']} files skipped)")
    for rel in m["skipped"]:
        print(f"  skipped {rel}")
    return 0


# ---------------------------------------------------------------- training

def _prepare(args):
    cache_dir = _cache_dir(args)
    manifest = ensure_features(args, cache_dir)
    if manifest["subset"] != args.subset:
        raise ValueError(f"cache {cache_dir} holds subset {manifest['subset']!r}, not {args.subset!r}")
    data = load_partitions(cache_dir)
    sample = next((m for part in data.values() for m in part), None)
    if sample is None:
        raise ValueError(f"feature cache {cache_dir} is empty")
    n_mfcc, n_frames = sample.shape
    arch = ArchitectureSpec(n_classes=len(manifest["label_map"]), n_mfcc=n_mfcc, n_frames=n_frames)
    return manifest, data, arch


def _pretrain_config(args) -> PretrainConfig:
    return PretrainConfig(epochs=args.pretrain_epochs, batch_size=args.batch_size, lr=args.pretrain_lr,
                          seed=derive_seed(args.seed, "pretrain"))


FROZEN_SKIP = {"command", "func", "config", "out", "verbose"}


def write_run_config(args, path: Path) -> None:
    lines = []
    for key in sorted(vars(args)):
        value = getattr(args, key)
        if key in FROZEN_SKIP or value is None:
            continue
        if key in ("root", "cache"):
            value = Path(value).resolve()
        if isinstance(value, bool):
            text = str(value).lower()
        elif isinstance(value, float):
            text = repr(value)
        elif isinstance(value, (tuple, list)):
            text = ",".join(repr(float(v)) for v in value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    path.write_text("\n".join(lines) + "\n")


def cmd_pretrain(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest, data, arch = _prepare(args)
    policy = init_policy(arch, derive_seed(args.seed, "init"))
    trained, report = pretrain(policy, data["pretrain"], _pretrain_config(args), data["eval"])
    report.write_csv(out / "pretrain.csv")
    trained.save(out / "policy.poln")
    acc = "n/a" if report.eval_accuracy is None else f"{100 * report.eval_accuracy:.1f}%"
    print(f"pre-trained {report.epochs_run} epochs; held-out accuracy {acc}")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest, data, arch = _prepare(args)
    write_run_config(args, out / RUN_CONFIG)
    policy = init_policy(arch, derive_seed(args.seed, "init"))
    if args.episodes == 0:
        if args.pretrain:
            _, report = pretrain(policy, data["pretrain"], _pretrain_config(args), data["eval"])
            report.write_csv(out / "pretrain.csv")
            print(f"pre-trained {report.epochs_run} epochs; no episodes requested")
        return 0
    config = TrainRunConfig(n_episodes=args.episodes, eta=args.eta, mode=args.mode, pretrain=args.pretrain,
                            pretrain_config=_pretrain_config(args), learning_rate=args.lr,
                            shuffle_seed=derive_seed(args.seed, "shuffle"),
                            dropout_seed=derive_seed(args.seed, "dropout"),
                            sampling_seed=derive_seed(args.seed, "sampling"),
                            checkpoint_every=args.checkpoint_every)
    meta = {"subset": args.subset, "seed": args.seed}

    def progress(j, ep):
        if (j + 1) % 100 == 0:
            log.info("episode %d: score %d", j + 1, ep.score)

    try:
        result = run_experiment(config, policy, data["rl"], data["pretrain"], data["eval"], meta,
                                out / "checkpoints", progress)
    except Exception as exc:
        partial = getattr(exc, "partial_result", None)
        if partial is not None:
            write_report(partial.log, out)
            log.error("run aborted after %d episodes; partial report written", len(partial.log.scores))
        raise
    if result.pretrain_report is not None:
        result.pretrain_report.write_csv(out / "pretrain.csv")
    write_report(result.log, out)
    result.policy.save(out / "policy_final.poln")
    fm = final_mean(result.log.scores)
    print(f"final-5 mean score {fm:.1f}  accuracy {accuracy(fm, args.eta):.1f}%")
    return 0


# ---------------------------------------------------------------- reporting

def load_run(run_dir: str | Path) -> MetricsLog:
    """Rebuild a run's MetricsLog from its ``run_config.txt`` and ``episodes.csv``."""
    run_dir = Path(run_dir)
    cfg = read_config(run_dir / RUN_CONFIG)
    eta = int(cfg["eta"])
    meta = {"subset": cfg.get("subset", ""), "eta": eta, "n_episodes": int(cfg.get("episodes", 0)),
            "mode": cfg.get("mode", GREEDY), "pretrain": parse_bool(cfg.get("pretrain", "false")),
            "r_min": -1, "r_max": 1}
    mlog = MetricsLog(eta=eta, metadata=meta)
    for v in read_scores(run_dir / "episodes.csv"):
        mlog.append(v)
    return mlog


def cmd_report(args) -> int:
    with_log = load_run(args.run)
    if args.compare is None:
        out = Path(args.out or args.run)
        write_report(with_log, out)
        print(f"wrote reports for {len(with_log.scores)} episodes to {out}")
        return 0
    without_log = load_run(args.compare)
    out = Path(args.out) if args.out else Path(args.run) / "comparison"
    compare_runs(with_log, without_log, out)
    fw, fo = final_mean(with_log.scores), final_mean(without_log.scores)
    print(f"final-5 mean with {fw:.1f}, without {fo:.1f}; improvement "
          f"{improvement(fw, fo, with_log.eta):.1f}%")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import make_corpus
    root = make_corpus(args.out, args.subset, args.per_class, args.seed, tuple(args.snr_db))
    print(f"wrote {args.per_class} clips for each of {len(SUBSETS[args.subset])} commands under {root}")
    return 0


EXPECTED_ERRORS = (AudioError, DatasetError, FeatureError, CacheError, MismatchedRuns, EnvError,
                   FileNotFoundError, NotImplementedError, ValueError)


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
