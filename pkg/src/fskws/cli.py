"""Command-line entry point: ``fskws <verb> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .audio import WavFormatError
from .data import AUXILIARY, IN_DOMAIN, EpisodeError, ManifestError, load_split
from .forge import ForgeConfig, run_forge
from .kvconfig import ConfigError, read_kv
from .models import NAMED_CONFIGS, CheckpointError, load_checkpoint
from .objectives import reports_to_csv, reports_to_table

VERBS = ("synth", "forge", "train", "eval", "compare", "params", "gradcheck")
DATA_ERRORS = (ConfigError, ManifestError, EpisodeError, CheckpointError, WavFormatError, FileNotFoundError,
               KeyError, ValueError, FloatingPointError, RuntimeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fskws", description="Few-shot open-set keyword spotting toolkit.")
    sub = parser.add_subparsers(dest="verb", metavar="verb", parser_class=_Parser)
    helps = {"synth": "build the synthetic keyword corpus", "forge": "build a word-clip dataset from a manifest",
             "train": "train one strategy", "eval": "evaluate a checkpoint on the test split",
             "compare": "train and evaluate several strategies", "params": "report encoder parameter counts",
             "gradcheck": "finite-difference check of the training losses"}
    subs = {}
    for verb in VERBS:
        p = sub.add_parser(verb, help=helps[verb])
        p.add_argument("--config", type=Path, help="key = value file ('#' comments)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        subs[verb] = p
    subs["forge"].add_argument("--manifest", type=Path, help="alignment manifest CSV")
    subs["forge"].add_argument("--audio-root", type=Path, help="directory audio paths are relative to")
    subs["forge"].add_argument("--metadata-only", action="store_true", help="skip cutting WAV files")
    for verb in ("train", "eval", "compare"):
        subs[verb].add_argument("--data", type=Path, help="corpus root holding index.json")
        subs[verb].add_argument("--aux", type=Path, help="auxiliary dataset root (forge output)")
    subs["eval"].add_argument("--checkpoint", type=Path, help="checkpoint file")
    subs["gradcheck"].add_argument("--episodes", type=int, default=100)
    return parser


def _kv(args) -> dict[str, str]:
    return read_kv(args.config) if args.config else {}


def _path(args, kv, name, required=True):
    value = getattr(args, name.replace("-", "_"), None) or kv.get(name)
    if value is None and required:
        raise ConfigError(f"no {name} given (flag --{name} or config key {name})")
    return Path(value) if value is not None else None


def _stamp() -> str:
    return f"# {time.strftime('%Y-%m-%dT%H:%M:%S')}"


# verbs -------------------------------------------------------------------------

def cmd_synth(args, out) -> int:
    from .synth import SynthSpec, synth_build
    kv = _kv(args)
    fields = SynthSpec.__dataclass_fields__
    spec: dict = {}
    for key, value in kv.items():
        if key not in fields:
            raise ConfigError(f"unknown synth option {key!r}")
        default = fields[key].default
        if isinstance(default, tuple):
            parts = [p.strip() for p in value.split(",") if p.strip()]
            spec[key] = tuple(type(default[0])(p) for p in parts) if default else tuple(parts)
        else:
            spec[key] = type(default)(value)
    if args.seed is not None:
        spec["seed"] = args.seed
    corpus = synth_build(SynthSpec(**spec), args.out)
    out(f"wrote corpus to {args.out}: " + ", ".join(f"{k}={len(v)}" for k, v in corpus.vocab.items())
        + f", manifest rows={len(corpus.manifest)}")
    return 0


def cmd_forge(args, out) -> int:
    kv = _kv(args)
    manifest = _path(args, kv, "manifest")
    audio_root = _path(args, kv, "audio-root", required=False)
    kv = {k: v for k, v in kv.items() if k not in ("manifest", "audio-root")}
    cfg = ForgeConfig.from_mapping(kv)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    report = run_forge(manifest, cfg, args.out, audio_root, args.metadata_only)
    out(report.to_csv().rstrip())
    out(f"keywords={len(report.keywords)} clips={sum(report.counts.values())}")
    return 0


def _splits(root: Path, need_val: bool = True):
    splits = {"train": load_split(root, IN_DOMAIN, "train"), "test": load_split(root, IN_DOMAIN, "test")}
    if need_val:
        splits["val"] = load_split(root, IN_DOMAIN, "val")
    return splits


def _noises(root: Path):
    from .synth import load_noises
    return load_noises(root)


def cmd_train(args, out) -> int:
    from .trainer import TrainConfig, train
    kv = _kv(args)
    cfg = TrainConfig.from_mapping(kv)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    root = _path(args, kv, "data")
    aux_root = _path(args, kv, "aux", required=cfg.needs_aux)
    aux = load_split(aux_root, AUXILIARY, "train") if aux_root else None
    splits = _splits(root)
    out(_stamp())
    res = train(cfg, splits["train"], splits["val"], aux, _noises(root), seed=seed, out_dir=args.out, log_fn=out)
    out(f"# best epoch {res.best_epoch}; checkpoint {args.out / 'best.ckpt'}")
    return 0


def cmd_eval(args, out) -> int:
    from .trainer import EvalConfig, evaluate
    kv = _kv(args)
    cfg = EvalConfig.from_mapping(kv)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    ckpt = load_checkpoint(_path(args, kv, "checkpoint"))
    test = load_split(_path(args, kv, "data"), IN_DOMAIN, "test")
    reports = evaluate(ckpt, test, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "eval.csv").write_text(reports_to_csv(reports))
    out(reports_to_table(reports))
    if cfg.threshold is not None:
        out(f"verification threshold {cfg.threshold} (open iff p(open) > threshold)")
    return 0


def cmd_compare(args, out) -> int:
    from .trainer import EvalConfig, TrainConfig, compare_strategies
    kv = _kv(args)
    names = [s.strip() for s in kv.pop("strategies", "baseline,auxsl").split(",") if s.strip()]
    eval_keys = {"n_episodes", "shots", "threshold"}
    eval_kv = {k: kv.pop(k) for k in list(kv) if k in eval_keys}
    for k in ("seeds", "n_closed", "n_open", "m_query"):  # shared with training
        if k in kv:
            eval_kv[k] = kv[k]
    if args.seed is not None:
        eval_kv["seeds"] = str(args.seed)
    eval_cfg = EvalConfig.from_mapping(eval_kv)
    root = _path(args, kv, "data")
    base = dict(kv)
    configs = []
    aux = None
    for name in names:
        cfg = TrainConfig.from_mapping(dict(base, strategy=name))
        if cfg.needs_aux and aux is None:
            aux = load_split(_path(args, kv, "aux"), AUXILIARY, "train")
        configs.append((name, cfg, aux if cfg.needs_aux else None))
    out(_stamp())
    comp = compare_strategies(configs, _splits(root), eval_cfg, _noises(root), log_fn=out)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "compare.csv").write_text(comp.csv)
    (args.out / "compare.txt").write_text(comp.table, encoding="utf-8")
    out(comp.table.rstrip())
    return 0


def cmd_params(args, out) -> int:
    kv = _kv(args)
    rows = {"name": [], "params": []}
    for name, cfg in NAMED_CONFIGS.items():
        rows["name"].append(name)
        rows["params"].append(cfg.param_count())
        out(f"{name:<8}width={cfg.width:<4}blocks={cfg.blocks:<3}embed={cfg.embed_dim:<4}"
            f"params={cfg.param_count():<8}budget={cfg.param_budget_label:<12}"
            f"{'ok' if cfg.within_budget() else 'OUT OF BUDGET'}")
    if "width" in kv or "blocks" in kv or "embed_dim" in kv:
        from .trainer import TrainConfig
        cfg = TrainConfig.from_mapping({k: v for k, v in kv.items()
                                        if k in ("width", "blocks", "embed_dim", "encoder")}).encoder
        out(f"custom  width={cfg.width:<4}blocks={cfg.blocks:<3}embed={cfg.embed_dim:<4}params={cfg.param_count()}")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "params.json").write_text(json.dumps(dict(zip(rows["name"], rows["params"])), indent=1) + "\n")
    return 0


def cmd_gradcheck(args, out) -> int:
    from .gradcheck import run_gradcheck
    seed = args.seed if args.seed is not None else 0
    worst = run_gradcheck(n_episodes=args.episodes, seed=seed)
    for name, err in worst.items():
        out(f"{name:<12}max_rel_error={err:.3e} {'pass' if err < 1e-4 else 'FAIL'}")
    return 0 if all(err < 1e-4 for err in worst.values()) else 2


COMMANDS = {"synth": cmd_synth, "forge": cmd_forge, "train": cmd_train, "eval": cmd_eval,
            "compare": cmd_compare, "params": cmd_params, "gradcheck": cmd_gradcheck}


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    out = lambda line: print(line, file=stdout, flush=True)  # noqa: E731
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=stderr)
        return 1
    if args.verb is None:
        print(parser.format_usage().rstrip(), file=stderr)
        return 1
    logging.basicConfig(level=logging.WARNING, stream=stderr)
    np.seterr(all="ignore")
    try:
        return COMMANDS[args.verb](args, out)
    except DATA_ERRORS as exc:
        print(f"fskws {args.verb}: error: {exc}", file=stderr)
        return 2


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
