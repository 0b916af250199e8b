"""Command-line entry point wiring all stages into reproducible runs.

Subcommands: synth, cluster, pretrain, finetune, lmt, eval, report.
Exit codes: 0 success, 1 runtime failure, 2 usage error.  A --config
file supplies defaults (flat key=value, keys = flag dests with
underscores); explicit command-line flags override it.
"""

import argparse
import sys
from collections import Counter
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import load_config, save_config
from .corpus import (
    EVAL,
    generate_corpus,
    read_manifest,
    read_trials,
    write_trials,
    write_trials_file,
)
from .encoder import EncoderConfig
from .evaluation import (
    Embedder,
    evaluate,
    read_report_csv,
    score_trials,
    write_report_csv,
    write_scores_csv,
)
from .kmeans import save_codebook
from .targets import build_targets_iter1, build_targets_iter2, save_labels
from .training import (
    FinetuneConfig,
    LMTConfig,
    PretrainConfig,
    large_margin_tune,
    run_finetune,
    run_pretrain_iteration,
)


class UsageError(Exception):
    """Bad flag combination or value; maps to exit code 2."""


def _common_flags(sub, out_required=True):
    sub.add_argument("--seed", type=int, default=0, help="master random seed")
    sub.add_argument("--config", default=None,
                     help="key=value defaults file; explicit flags override it")
    sub.add_argument("--out", required=out_required, default=None,
                     help="output directory" if out_required else "output CSV path (default stdout)")


def _read_data_manifest(data_dir) -> object:
    path = Path(data_dir) / "manifest.tsv"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.tsv under {data_dir}")
    return read_manifest(path)


def _encoder_cfg(args) -> EncoderConfig:
    return EncoderConfig(variant=args.variant, n_layers=args.layers,
                         dim=args.dim, heads=args.heads)


def _write_run_cfg(out_dir, args, skip=("config", "out", "func")):
    values = {k: v for k, v in sorted(vars(args).items())
              if k not in skip and v is not None and not callable(v)}
    save_config(Path(out_dir) / "run.cfg", values)


def _trial_pools(manifest):
    speakers = [spk for _, spk, split in manifest.entries if split == EVAL]
    per_spk = Counter(speakers)
    n = len(speakers)
    targets = sum(v * (v - 1) // 2 for v in per_spk.values())
    return targets, n * (n - 1) // 2 - targets


def cmd_synth(args) -> int:
    if args.speakers < 2:
        raise UsageError(f"--speakers must be >= 2, got {args.speakers}")
    if args.utts < 1:
        raise UsageError(f"--utts must be >= 1, got {args.utts}")
    if args.seconds <= 0:
        raise UsageError(f"--seconds must be positive, got {args.seconds}")
    out = Path(args.out)
    manifest = generate_corpus(
        args.speakers, args.utts, args.seconds, args.seed, out,
        eval_speakers=args.eval_speakers, eval_utts=args.eval_utts,
    )
    n_target, n_nontarget = args.targets, args.nontargets
    if n_target is None or n_nontarget is None:
        pool_t, pool_n = _trial_pools(manifest)
        n_target = min(200, pool_t) if n_target is None else n_target
        n_nontarget = min(200, pool_n) if n_nontarget is None else n_nontarget
    trials = write_trials(manifest, n_target, n_nontarget, args.seed)
    write_trials_file(trials, out / "trials.txt")
    _write_run_cfg(out, args)
    print(f"wrote {len(manifest.entries)} utterances and {len(trials.trials)} trials to {out}")
    return 0


def _build_targets(args, manifest, enc_cfg):
    """Shared by cluster and pretrain: labels for the requested iteration."""
    if args.iteration == 2:
        if not args.ckpt_in:
            raise UsageError("--iteration 2 requires --ckpt-in (previous pretraining checkpoint)")
        ckpt = load_checkpoint(args.ckpt_in)
        k = args.k if args.k is not None else 64
        codebook, labels = build_targets_iter2(
            manifest, ckpt, layer_index=args.layer, k=k, seed=args.seed
        )
        return ckpt, codebook, labels
    if args.ckpt_in:
        raise UsageError("--ckpt-in is only used with --iteration 2")
    if args.layer is not None:
        raise UsageError("--layer is only used with --iteration 2")
    k = args.k if args.k is not None else 32
    codebook, labels = build_targets_iter1(manifest, k=k, seed=args.seed, encoder_cfg=enc_cfg)
    return None, codebook, labels


def cmd_cluster(args) -> int:
    manifest = _read_data_manifest(args.data)
    enc_cfg = _encoder_cfg(args)
    _, codebook, labels = _build_targets(args, manifest, enc_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_codebook(out / "codebook.svt", codebook)
    save_labels(out / "labels.svl", labels)
    _write_run_cfg(out, args)
    frames = sum(len(v) for v in labels.labels.values())
    print(f"clustered {frames} frames into {labels.k} ids ({labels.feature_kind}) at {out}")
    return 0


def cmd_pretrain(args) -> int:
    if args.steps < 1:
        raise UsageError(f"--steps must be >= 1, got {args.steps}")
    manifest = _read_data_manifest(args.data)
    enc_cfg = _encoder_cfg(args)
    ckpt_in, codebook, labels = _build_targets(args, manifest, enc_cfg)
    if ckpt_in is not None:
        enc_cfg = ckpt_in.encoder_cfg  # architecture follows the previous stage
    cfg = PretrainConfig(
        steps=args.steps, batch_size=args.batch_size, crop_seconds=args.crop_seconds,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_codebook(out / f"codebook_iter{args.iteration}.svt", codebook)
    save_labels(out / f"labels_iter{args.iteration}.svl", labels)
    init = ckpt_in.arrays if (ckpt_in is not None and args.warm_start) else None
    ckpt_path, csv_path, losses, skipped = run_pretrain_iteration(
        manifest, labels, enc_cfg, cfg, args.iteration, out, init_arrays=init
    )
    _write_run_cfg(out, args)
    tail = f", {skipped} skipped batches" if skipped else ""
    print(f"iteration {args.iteration}: final loss {losses[-1]:.4f} after {args.steps} steps{tail}")
    print(f"checkpoint {ckpt_path}, losses {csv_path}")
    return 0


def cmd_finetune(args) -> int:
    mode = args.mode.replace("-", "_")
    if mode == "random_init" and args.pretrained:
        raise UsageError("--mode random-init must not be combined with --pretrained")
    if mode in ("frozen", "learnable") and not args.pretrained:
        raise UsageError(f"--mode {args.mode} requires --pretrained")
    manifest = _read_data_manifest(args.data)
    cfg = FinetuneConfig(
        mode=mode, backend=args.backend, epochs=args.epochs, margin=args.margin,
        scale=args.scale, lr=args.lr, crop_seconds=args.crop_seconds,
        batch_size=args.batch_size, seed=args.seed,
    )
    enc_cfg = _encoder_cfg(args) if not args.pretrained else None
    result = run_finetune(manifest, cfg, args.out, pretrained=args.pretrained, enc_cfg=enc_cfg)
    _write_run_cfg(args.out, args)
    print(f"train accuracy (%) {result['train_accuracy'] * 100:.2f}")
    print(f"checkpoint {result['ckpt']}")
    return 0


def cmd_lmt(args) -> int:
    manifest = _read_data_manifest(args.data)
    cfg = LMTConfig(margin=args.margin, crop_seconds=args.crop_seconds,
                    epochs=args.epochs, seed=args.seed)
    result = large_margin_tune(args.ckpt, manifest, cfg, args.out)
    _write_run_cfg(args.out, args)
    print(f"train accuracy (%) {result['train_accuracy'] * 100:.2f}")
    print(f"checkpoint {result['ckpt']}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    trials = read_trials(args.trials)
    scores = score_trials(Embedder(ckpt), trials, root=args.data)
    report = evaluate(scores)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scores_csv(out / "scores.csv", scores)
    write_report_csv(out / "report.csv", report)
    _write_run_cfg(out, args)
    print("EER(%) DCF1 DCF5")
    print(f"{report.eer * 100:.2f} {report.dcf1:.4f} {report.dcf5:.4f}")
    return 0


def cmd_report(args) -> int:
    runs_dir = Path(args.runs)
    if not runs_dir.is_dir():
        raise UsageError(f"--runs {runs_dir} is not a directory")
    run_dirs = sorted(d for d in runs_dir.iterdir() if (d / "report.csv").is_file())
    if not run_dirs:
        raise UsageError(f"no run directories with report.csv under {runs_dir}")
    names = [d.name for d in run_dirs]
    if args.baseline not in names:
        raise UsageError(f"baseline run {args.baseline!r} not found among {names}")
    metrics = {d.name: read_report_csv(d / "report.csv") for d in run_dirs}
    base_eer = metrics[args.baseline]["EER"]
    ordered = [args.baseline] + [n for n in names if n != args.baseline]
    lines = ["run,eer,dcf1,dcf5,eer_improvement"]
    for name in ordered:
        m = metrics[name]
        improvement = (base_eer - m["EER"]) / base_eer if base_eer > 0 else 0.0
        lines.append(
            f"{name},{m['EER']!r},{m['DCF1']!r},{m['DCF5']!r},{improvement!r}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote comparison for {len(ordered)} runs to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="selfsv",
        description="Self-pretraining speaker verification on a synthetic corpus.",
    )
    subs = parser.add_subparsers(dest="command")
    registry = {}

    def sub(name, func, help_, out_required=True):
        s = subs.add_parser(name, help=help_)
        s.set_defaults(func=func)
        _common_flags(s, out_required=out_required)
        registry[name] = s
        return s

    s = sub("synth", cmd_synth, "generate the synthetic corpus and trial list")
    s.add_argument("--speakers", type=int, default=30, help="total speakers (train + eval)")
    s.add_argument("--utts", type=int, default=20, help="utterances per train speaker")
    s.add_argument("--seconds", type=float, default=4.0)
    s.add_argument("--eval-speakers", type=int, default=None,
                   help="speakers held out for trials (default: n/3, at least 2)")
    s.add_argument("--eval-utts", type=int, default=None)
    s.add_argument("--targets", type=int, default=None, help="target trials (default: up to 200)")
    s.add_argument("--nontargets", type=int, default=None)

    def clustering_flags(s):
        s.add_argument("--data", required=True, help="corpus directory (with manifest.tsv)")
        s.add_argument("--iteration", type=int, choices=(1, 2), default=1)
        s.add_argument("--ckpt-in", default=None, help="previous pretraining checkpoint (iteration 2)")
        s.add_argument("--k", type=int, default=None, help="clusters (default 32 / 64 by iteration)")
        s.add_argument("--layer", type=int, default=None,
                       help="latent layer to re-cluster (iteration 2, default middle)")

    def encoder_flags(s):
        s.add_argument("--variant", choices=("transformer", "conformer"), default="transformer")
        s.add_argument("--layers", type=int, default=4)
        s.add_argument("--dim", type=int, default=64)
        s.add_argument("--heads", type=int, default=4)

    s = sub("cluster", cmd_cluster, "build pseudo-labels without training")
    clustering_flags(s)
    encoder_flags(s)

    s = sub("pretrain", cmd_pretrain, "masked-prediction pretraining (one iteration)")
    clustering_flags(s)
    encoder_flags(s)
    s.add_argument("--steps", type=int, default=3000)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--crop-seconds", type=float, default=1.25)
    s.add_argument("--warm-start", action="store_true",
                   help="initialize iteration 2 from the previous encoder instead of scratch")

    s = sub("finetune", cmd_finetune, "speaker fine-tuning with a pooling back-end")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("random-init", "frozen", "learnable"), required=True)
    s.add_argument("--backend", choices=("mhfa", "tdnn"), default="mhfa")
    s.add_argument("--pretrained", default=None, help="pretraining checkpoint to start from")
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--margin", type=float, default=0.2)
    s.add_argument("--scale", type=float, default=30.0)
    s.add_argument("--lr", type=float, default=5e-4)
    s.add_argument("--crop-seconds", type=float, default=2.0)
    s.add_argument("--batch-size", type=int, default=16)
    encoder_flags(s)

    s = sub("lmt", cmd_lmt, "large-margin tuning of a fine-tuned model")
    s.add_argument("--ckpt", required=True, help="finetuned-stage checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--margin", type=float, default=0.5)
    s.add_argument("--crop-seconds", type=float, default=5.0)
    s.add_argument("--epochs", type=int, default=3)

    s = sub("eval", cmd_eval, "score trials and report EER / minDCF")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--data", required=True, help="root directory trial paths are relative to")

    s = sub("report", cmd_report, "aggregate run reports against a baseline", out_required=False)
    s.add_argument("--runs", required=True, help="directory of run directories")
    s.add_argument("--baseline", default="baseline", help="run name to compare against")

    return parser, registry


def _apply_config_defaults(argv, sub):
    """Load --config (if present) and install its values as parser defaults."""
    path = None
    for i, tok in enumerate(argv):
        if tok == "--config":
            if i + 1 >= len(argv):
                raise UsageError("--config needs a file path")
            path = argv[i + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
    if path is None:
        return
    values = load_config(path)
    actions = {a.dest: a for a in sub._actions}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(
            f"unknown config keys {unknown} (valid: {sorted(set(actions) - {'help'})})"
        )
    for dest, value in list(values.items()):
        # flag-style options need a real boolean, not a truthy string
        if isinstance(actions[dest].const, bool):
            values[dest] = value.lower() in ("1", "true", "yes", "on")
    sub.set_defaults(**values)


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, registry = build_parser()
    try:
        if argv and argv[0] in registry:
            _apply_config_defaults(argv, registry[argv[0]])
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            parser.print_usage(sys.stderr)
            return 2
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except SystemExit as err:  # argparse --help (0) and usage errors (2)
        return 0 if err.code is None else int(err.code)
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
