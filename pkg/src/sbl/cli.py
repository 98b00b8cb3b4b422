"""``sbl`` command line: gen-data, train, eval, decode, compare, grad-check, inspect."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, NumericError, SblError, UsageError

log = logging.getLogger("sbl")

VERBS = ("gen-data", "train", "eval", "decode", "compare", "grad-check", "inspect")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_help: str, checkpoint: bool = False) -> None:
    p.add_argument("--config", help="key = value config file (dotted keys, e.g. train.variant)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable; wins over the file")
    p.add_argument("--out", help=out_help)
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sbl", description="Bidirectional multilingual lip-reading toolkit on synthetic data.")
    parser.add_argument("--version", action="version", version=f"sbl {__version__}")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate the synthetic language pair, features and manifests")
    _common(p, "dataset directory (default: data.dir)")

    p = sub.add_parser("train", help="train one ablation variant")
    _common(p, "run directory for checkpoint, metrics.csv and run.json (default: runs/<variant>)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split (eval.split, eval.mode)")
    _common(p, "directory for metrics.csv", checkpoint=True)

    p = sub.add_parser("decode", help="decode samples and print both branches, entropies and the combination")
    _common(p, "directory for hypotheses.tsv", checkpoint=True)
    p.add_argument("--limit", type=int, default=5, help="samples to print when eval.sample is unset")

    p = sub.add_parser("compare", help="train and evaluate the ablation variants into one report")
    _common(p, "report directory (default: compare)")
    p.add_argument("--variants", help="comma-separated subset of variants (default: all eight)")
    p.add_argument("--seeds", help="comma-separated seeds (default: train.seed)")

    p = sub.add_parser("grad-check", help="finite-difference check of every op and the end-to-end model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true", help="skip the end-to-end model checks")
    p.add_argument("--out", help="directory for the report")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("inspect", help="summarise a dataset inventory or a checkpoint")
    _common(p, "directory to dump the inventory into")
    p.add_argument("--checkpoint", help="checkpoint to summarise")
    return parser


@contextlib.contextmanager
def output_dir(path: Path | None):
    """Create ``path`` and hold a lock file in it for the duration of the command."""
    if path is None:
        yield None
        return
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{path} is in use by another invocation (remove {lock} if stale)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(f"{os.getpid()}\n")
    try:
        yield path
    finally:
        lock.unlink(missing_ok=True)


def _echo(out: Path | None, cfg: RunConfig) -> None:
    if out is not None:
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")


def _write_run_json(out: Path | None, summary: dict) -> None:
    if out is not None:
        (out / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_data(args, cfg: RunConfig, out: Path | None, summary: dict) -> int:
    from .synth import dataset_from_config, inventory_for

    data_dir = out or Path(cfg.data.dir)
    cfg.data.dir = str(data_dir)
    specs, (train, test) = dataset_from_config(cfg.data, data_dir)
    stats = inventory_for(specs).stats()
    print(f"wrote {data_dir}")
    for manifest in (train, test):
        per_lang = {lang: sum(r.language == lang for r in manifest.samples) for lang in manifest.languages()}
        print(f"  {manifest.split}: {len(manifest)} samples " + " ".join(f"{k}={v}" for k, v in per_lang.items()))
    print("  inventory: " + " ".join(f"{k}={v}" for k, v in stats.items()))
    print(f"  union inventory size: {stats['union']}")
    summary["outputs"] = {"train": len(train), "test": len(test), **stats}
    return 0


def cmd_train(args, cfg: RunConfig, out: Path | None, summary: dict) -> int:
    from .training import train

    result = train(cfg, out)
    print(f"trained {cfg.train.variant} for {len(result.losses)} steps in {result.seconds:.1f}s")
    if result.losses:
        print(f"  loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    _print_metrics([r for r in result.metrics if r.step == len(result.losses)])
    summary["outputs"] = {"checkpoint": str(result.checkpoint), "steps": len(result.losses),
                          "final_loss": result.losses[-1] if result.losses else None}
    return 0


def _print_metrics(rows) -> None:
    if not rows:
        return
    print(f"  {'language':<9}{'mode':<6}{'PER':>8}{'Acc':>8}{'flag':>8}")
    for r in rows:
        flag = "" if r.flag_acc is None else f"{r.flag_acc:.3f}"
        print(f"  {r.language:<9}{r.mode:<6}{r.per:>8.4f}{r.acc:>8.4f}{flag:>8}")


def _restore(args, overrides):
    from .training import load_checkpoint, load_inventory, restore_model

    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    cfg.apply(overrides)
    inventory = load_inventory(cfg.data.dir)
    return cfg, restore_model(ckpt, inventory), inventory


def _modes(mode: str):
    from .training import MODES

    if mode == "all":
        return MODES
    if mode not in MODES:
        raise ConfigError(f"eval.mode must be one of all, {', '.join(MODES)}; got {mode!r}")
    return (mode,)


def cmd_eval(args, cfg: RunConfig, out: Path | None, summary: dict) -> int:
    from .training import evaluate, get_variant, load_split, training_languages, write_metrics_csv

    cfg, model, inventory = _restore(args, args.overrides)
    variant = get_variant(cfg.train.variant)
    langs = training_languages(cfg, inventory, variant)
    data = load_split(cfg.data.dir, cfg.eval.split, inventory, langs, variant.flag, cfg.model.max_len)
    rows = evaluate(model, data, _modes(cfg.eval.mode), variant=variant.name)
    print(f"{variant.name} on {cfg.eval.split} ({len(data)} samples)")
    _print_metrics(rows)
    if out is not None:
        write_metrics_csv(out / "metrics.csv", rows)
    _echo(out, cfg)
    summary["outputs"] = {f"{r.language}/{r.mode}/acc": r.acc for r in rows}
    return 0


def cmd_decode(args, cfg: RunConfig, out: Path | None, summary: dict) -> int:
    from .decoder import write_hypotheses
    from .training import Dataset, decode_dataset, get_variant, load_split, training_languages

    cfg, model, inventory = _restore(args, args.overrides)
    variant = get_variant(cfg.train.variant)
    langs = training_languages(cfg, inventory, variant)
    data = load_split(cfg.data.dir, cfg.eval.split, inventory, langs, variant.flag, cfg.model.max_len)
    if cfg.eval.sample:
        chosen = [e for e in data.examples if e.sample_id == cfg.eval.sample]
        if not chosen:
            raise DataError(f"sample {cfg.eval.sample!r} not in split {cfg.eval.split!r}")
    else:
        chosen = data.examples[: max(args.limit, 1)]
    subset = Dataset(chosen)
    preds = decode_dataset(model, subset)
    sym = lambda toks: " ".join(inventory.symbol(t) for t in toks) or "(empty)"  # noqa: E731
    for ex, pred in zip(chosen, preds):
        print(f"{ex.sample_id}  [{ex.language}]  ref: {sym(ex.target.raw)}")
        branches = [("L2R", pred.tokens_l2r, pred.entropy_l2r, pred.flag_l2r)]
        if pred.dist_r2l is not None:
            branches.append(("R2L", pred.tokens_r2l, pred.entropy_r2l, pred.flag_r2l))
        for name, toks, ents, flag in branches:
            flag_txt = f"  flag {inventory.symbol(int(np.argmax(flag)))}" if flag is not None else ""
            ent_txt = " ".join(f"{h:.3f}" for h in ents)
            print(f"  {name:<5} {sym(toks):<32} H=[{ent_txt}]{flag_txt}")
        print(f"  C-Bi  {sym(pred.combined)}")
    if out is not None:
        write_hypotheses(out / "hypotheses.tsv", [e.sample_id for e in chosen], preds, inventory)
    _echo(out, cfg)
    summary["outputs"] = {"decoded": len(chosen)}
    return 0


def cmd_compare(args, cfg: RunConfig, out: Path | None, summary: dict) -> int:
    from .training import VARIANTS, run_ablation_matrix

    variants = [v.strip() for v in args.variants.split(",")] if args.variants else list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants: {', '.join(unknown)}")
    try:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    report = run_ablation_matrix(cfg, out, variants, seeds)
    print(report.markdown())
    summary["outputs"] = {"variants": variants, "failed": sorted(report.failures)}
    if report.failures:
        return max(report.failure_codes.values())
    return 0


def cmd_grad_check(args, cfg, out: Path | None, summary: dict) -> int:
    from .gradcheck import run_suite

    report = run_suite(seed=args.seed, include_model=not args.ops_only)
    text = report.format()
    print(text)
    if out is not None:
        (out / "gradcheck.txt").write_text(text + "\n")
    summary["outputs"] = {"passed": report.passed, "failures": report.failures}
    if not report.passed:
        print("failing: " + ", ".join(report.failures), file=sys.stderr)
        return NumericError.exit_code
    return 0


def cmd_inspect(args, cfg: RunConfig, out: Path | None, summary: dict) -> int:
    from .training import load_checkpoint, load_inventory

    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        n_params = sum(a.size for a in ckpt.params.values())
        print(f"checkpoint {args.checkpoint}")
        print(f"  variant {ckpt.config.train.variant}, step {ckpt.step}, {len(ckpt.params)} tensors, {n_params} values")
        for k, v in ckpt.meta.items():
            print(f"  {k}: {v}")
        summary["outputs"] = {"step": ckpt.step, "parameters": n_params}
        return 0
    inventory = load_inventory(cfg.data.dir)
    stats = inventory.stats()
    print(f"inventory {cfg.data.dir}: " + " ".join(f"{k}={v}" for k, v in stats.items()))
    print(f"  vocabulary {inventory.vocab_size} (specials, phonemes, flags); sha256 {inventory.fingerprint()[:16]}")
    print("  shared: " + " ".join(sorted(inventory.shared)))
    if out is not None:
        inventory.write(out / "inventory.tsv")
    summary["outputs"] = stats
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "compare": cmd_compare,
    "grad-check": cmd_grad_check,
    "inspect": cmd_inspect,
}


def _default_out(verb: str, cfg: RunConfig) -> str | None:
    if verb == "gen-data":
        return cfg.data.dir
    if verb == "train":
        return f"runs/{cfg.train.variant}"
    if verb == "compare":
        return "compare"
    return None


def run(argv=None) -> int:
    start = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    summary = {"verb": args.verb, "argv": list(sys.argv[1:] if argv is None else argv), "version": __version__,
               "python": platform.python_version(), "numpy": np.__version__}
    out = None
    try:
        cfg = RunConfig() if args.verb == "grad-check" else load_config(args.config, args.overrides)
        out_arg = args.out or _default_out(args.verb, cfg)
        out = Path(out_arg) if out_arg else None
        with output_dir(out):
            if args.verb not in ("eval", "decode"):
                _echo(out, cfg)
            code = COMMANDS[args.verb](args, cfg, out, summary)
            summary.update(exit_code=code, seconds=round(time.perf_counter() - start, 3))
            _write_run_json(out, summary)
        return code
    except SblError as exc:
        code = exc.exit_code
        print(f"error: {exc}", file=sys.stderr)
    except OSError as exc:
        code = DataError.exit_code
        print(f"error: {exc}", file=sys.stderr)
    if out is not None and out.is_dir() and not (out / ".lock").exists():
        summary.update(exit_code=code, seconds=round(time.perf_counter() - start, 3))
        _write_run_json(out, summary)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
