"""Command-line entry point: ``msrn {synth,train,eval,gradcheck,ablate}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command that writes a directory also writes ``run_config.json``;
passing that file back through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import SynthConfig, generate_synthetic, load_dataset, save_dataset
from .experiments import ablate, build_graph, format_table
from .gradsuite import components, run_suite
from .metrics import evaluate
from .model import MSRN, VARIANTS, ModelConfig
from .sga import compatibility, normalize_attention
from .tensor import no_grad
from .tensorio import write_tensor
from .trainer import TrainConfig, fit

log = logging.getLogger("msrn")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# argument groups
# --------------------------------------------------------------------------

def _widths(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(w) for w in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--groups", type=int, default=4, help="label groups m (default 4)")
    g.add_argument("--lambda", dest="lam", type=float, default=0.001, help="group loss weight (default 0.001)")
    g.add_argument("--branches", type=int, default=3, help="backbone taps B (default 3)")
    g.add_argument("--variant", choices=VARIANTS, default="full")
    g.add_argument("--embed-dim", type=int, default=16)
    g.add_argument("--gat-hidden", type=int, default=32)
    g.add_argument("--head-hidden", type=int, default=64)
    g.add_argument("--head-mode", choices=("flat", "row"), default="flat")
    g.add_argument("--block-widths", type=_widths, default=(8, 16, 16, 16))
    g.add_argument("--feat-dim", type=int, default=300, help="label feature width v (default 300)")
    g.add_argument("--label-features", type=Path, help="MSRNT1 file with an n x v label feature matrix")
    g.add_argument("--threshold", type=float, default=0.0, help="adjacency threshold tau (default 0)")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=0.01)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--weight-decay", type=float, default=1e-4)
    g.add_argument("--epochs", type=int, default=90)
    g.add_argument("--decay-every", type=int, default=30)
    g.add_argument("--decay-factor", type=float, default=0.1)
    g.add_argument("--batch", type=int, default=8)
    g.add_argument("--eval-every", type=int, default=1, help="epochs between evaluations, 0 = final only")


def _add_synth_flags(p, images: int):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--labels", type=int, default=8)
    g.add_argument("--synth-groups", type=int, default=2, help="groups used to draw co-occurrences")
    g.add_argument("--images", type=int, default=images)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--glyph-size", type=int, default=8)
    g.add_argument("--max-glyphs", type=int, default=3)
    g.add_argument("--beta", type=float, default=4.0)
    g.add_argument("--noise", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msrn", description="Multi-scale semantic attention for multi-label images.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="{synth,train,eval,gradcheck,ablate}")
    parser.subcommands = sub.choices

    p = sub.add_parser("synth", help="generate a synthetic glyph dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, help="run_config.json to take defaults from")
    _add_synth_flags(p, images=1000)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--eval-data", type=Path, help="dataset scored each epoch (default: the training set)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, help="run_config.json to take defaults from")
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, help="also write the metrics JSON here")
    p.add_argument("--prob-threshold", type=float, default=0.5)
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--dump-attention", type=Path, metavar="DIR",
                   help="write channel-averaged label attention maps (MSRNT1) for the first images")
    p.add_argument("--dump-count", type=int, default=4)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--components", nargs="+", choices=components(), metavar="NAME")
    p.add_argument("--roundoff", action="store_true",
                   help="also score composites against the central-difference rounding floor")

    p = sub.add_parser("ablate", help="LGE-variant (table 5) or branch-count (table 6) comparison")
    p.add_argument("--table", type=int, choices=(5, 6), required=True)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, 0..N-1")
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--out", type=Path, help="directory for ablation.json and run_config.json")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--config", type=Path, help="run_config.json to take defaults from")
    _add_model_flags(p)
    _add_train_flags(p)
    _add_synth_flags(p, images=4000)
    return parser


# --------------------------------------------------------------------------
# config assembly
# --------------------------------------------------------------------------

def _checked(build):
    """Run a config constructor; a rejected value is a usage error."""
    try:
        return build()
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def model_config(a, n_labels: int, image_size: int, feature_channels=None) -> ModelConfig:
    return ModelConfig(
        n_labels=n_labels, groups=a.groups, embed_dim=a.embed_dim, branches=a.branches,
        block_widths=a.block_widths, image_size=image_size, label_feat_dim=a.feat_dim,
        gat_hidden=a.gat_hidden, head_hidden=a.head_hidden, lam=a.lam, variant=a.variant,
        head_mode=a.head_mode, feature_channels=feature_channels, seed=a.seed,
    )


def train_config(a) -> TrainConfig:
    cfg = TrainConfig(epochs=a.epochs, batch_size=a.batch, lr=a.lr, momentum=a.momentum,
                      weight_decay=a.weight_decay, decay_factor=a.decay_factor,
                      decay_every=a.decay_every, seed=a.seed, eval_every=a.eval_every)
    cfg.validate()
    return cfg


def synth_config(a) -> SynthConfig:
    cfg = SynthConfig(n_labels=a.labels, n_groups=a.synth_groups, n_images=a.images,
                      image_size=a.image_size, glyph_size=a.glyph_size, max_glyphs=a.max_glyphs,
                      beta=a.beta, noise=a.noise, seed=a.seed)
    cfg.validate()
    return cfg


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return list(value)
    return value


def write_run_config(directory: Path, args, **sections) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    flags = {k: _jsonable(v) for k, v in vars(args).items() if k not in ("config", "verbose")}
    record = {"version": __version__, "command": args.command, "args": flags}
    record.update({k: v for k, v in sections.items() if v is not None})
    (directory / "run_config.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _apply_config_file(parser, argv):
    """Parse with defaults taken from ``--config`` so explicit flags still win."""
    command = next((tok for tok in argv if tok in parser.subcommands), None)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    path = pre.parse_known_args(argv)[0].config if command else None
    if path is None:
        return parser.parse_args(argv)
    try:
        record = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"--config {path}: {exc}")
    if record.get("command") != command:
        raise UsageError(f"--config {path} records command {record.get('command')!r}, not {command!r}")
    sub = parser.subcommands[command]
    saved = dict(record["args"])
    saved.pop("command", None)
    for action in sub._actions:
        if action.dest in saved and action.type is Path and saved[action.dest] is not None:
            saved[action.dest] = Path(saved[action.dest])
        if action.dest == "block_widths" and saved.get("block_widths") is not None:
            saved["block_widths"] = tuple(saved["block_widths"])
    sub.set_defaults(**saved)
    # required flags recorded in the file may be omitted on the command line
    for action in sub._actions:
        if action.dest in saved:
            action.required = False
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(a) -> int:
    cfg = _checked(lambda: synth_config(a))
    data = generate_synthetic(cfg)
    save_dataset(data, a.out)
    write_run_config(a.out, a, synth=asdict(cfg))
    print(json.dumps({"images": len(data), "labels": data.names, "positives": data.Y.sum(axis=0).tolist()}))
    return 0


def _model_for(a, train) -> MSRN:
    if train.images is not None:
        cfg = _checked(lambda: model_config(a, train.Y.shape[1], train.images.shape[1]))
    else:
        # precomputed pyramids bypass the backbone, so the image size is unused
        cfg = _checked(lambda: model_config(a, train.Y.shape[1], ModelConfig.image_size,
                                            tuple(f.shape[-1] for f in train.features)))
    graph = build_graph(train, cfg.label_feat_dim, a.seed, a.threshold, a.label_features) if cfg.uses_lge else None
    return MSRN(cfg, graph)


def cmd_train(a) -> int:
    tcfg = _checked(lambda: train_config(a))
    train = load_dataset(a.data)
    eval_set = load_dataset(a.eval_data) if a.eval_data else None
    model = _model_for(a, train)
    write_run_config(a.out, a, model=model.config.to_dict(), train=asdict(tcfg))
    history = fit(model, train, tcfg, eval_set, a.out)
    last = history[-1]
    summary = {"epochs": len(history), "final_loss": last["loss"]}
    if "metrics" in last:
        summary["final_mAP"] = last["metrics"]["mAP"]
    print(json.dumps(summary))
    return 0


def attention_maps(model: MSRN, inputs) -> list[np.ndarray]:
    """Per branch, ``(N, n, H_b, W_b)`` label attention averaged over channels."""
    with no_grad():
        emb = model.embeddings()
        E = model.params["embed.label"] if emb is None else emb.label
        maps = []
        for f in model.pyramid(inputs):
            a = normalize_attention(compatibility(f, E)).data  # N, H, W, n, d
            maps.append(a.mean(axis=-1).transpose(0, 3, 1, 2))
    return maps


def cmd_eval(a) -> int:
    model = MSRN.load(a.checkpoint)
    data = load_dataset(a.data)
    if data.Y.shape[1] != model.config.n_labels:
        raise UsageError(f"dataset has {data.Y.shape[1]} labels, checkpoint expects {model.config.n_labels}")
    report = evaluate(model.predict_proba(data.inputs), data.Y, a.prob_threshold, a.top_k)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if a.out:
        a.out.parent.mkdir(parents=True, exist_ok=True)
        a.out.write_text(text + "\n")
    if a.dump_attention:
        a.dump_attention.mkdir(parents=True, exist_ok=True)
        count = min(a.dump_count, len(data))
        subset = data.subset(np.arange(count)).inputs
        for b, maps in enumerate(attention_maps(model, subset)):
            for i in range(count):
                write_tensor(a.dump_attention / f"{i:06d}.b{b}.msrnt", maps[i])
    return 0


def cmd_gradcheck(a) -> int:
    report = run_suite(a.components, trials=a.trials, seed=a.seed, eps=a.eps, roundoff=a.roundoff)
    worst = 0.0
    for name, r in report.items():
        worst = max(worst, r["max_rel_error"])
        flag = "ok" if r["max_rel_error"] < a.tolerance else "FAIL"
        extra = f"  roundoff {r['roundoff_error']:.2e}" if "roundoff_error" in r else ""
        print(f"{name:16s} {r['max_rel_error']:.2e}  {flag}{extra}  ({r['seconds']:.1f}s)")
    print(f"max relative error {worst:.2e} (tolerance {a.tolerance:g})")
    return 0 if worst < a.tolerance else 1


def cmd_ablate(a) -> int:
    if a.seeds < 1:
        raise UsageError("--seeds must be positive")
    scfg = _checked(lambda: synth_config(a))
    tcfg = _checked(lambda: train_config(a))
    mcfg = _checked(lambda: model_config(a, scfg.n_labels, scfg.image_size))
    seeds = list(range(a.seed, a.seed + a.seeds))
    result = ablate(a.table, seeds, mcfg, tcfg, scfg, a.train_fraction)
    if a.out:
        write_run_config(a.out, a, model=mcfg.to_dict(), train=asdict(tcfg), synth=asdict(scfg))
        (a.out / "ablation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(format_table(result), file=sys.stderr)
    print(json.dumps({k: v["median_mAP"] for k, v in result["summary"].items()}, sort_keys=True))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = _apply_config_file(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"msrn: error: {exc}", file=sys.stderr)
        return 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"msrn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        log.debug("failure", exc_info=True)
        print(f"msrn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
