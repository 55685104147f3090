"""``apanet`` command line: synth, train, extract, whiten-fit, whiten-apply, eval, report, gradcheck.

Every subcommand also takes ``--config file.json`` whose keys are flag names
(dashes or underscores); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path


from . import gradcheck, plots
from .attention import MODES, HeadParams, init_head_params, write_score_csv
from .core import (
    FormatError,
    load_descriptor_table,
    make_rng,
    read_featuremap,
    read_manifest,
    resolve_featuremap,
    save_descriptor_table,
)
from .evaluate import DEFAULT_NS, DEFAULT_RADIUS, read_recall_csv, recall_at_n, write_detail_json, write_recall_csv
from .pipeline import AGGREGATORS, extract, pool_records
from .pyramid import DEFAULT_SCALES, parse_scales
from .synth import WorldConfig, generate_world
from .train import TrainConfig, TrainingError, config_dict, load_head, save_head, train_epochs
from .whitening import (
    DEFAULT_ALPHA,
    fit_pca,
    load_whitening,
    sample_rows,
    save_whitening,
    variance_report,
    write_variance_csv,
)

log = logging.getLogger("apanet")

EXIT_GRADCHECK = 1
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_INVALID = 5
EXIT_DIVERGED = 6


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _scales(text: str) -> tuple[int, ...]:
    try:
        return parse_scales(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _fmt(values) -> str:
    return ",".join(f"{v:g}" for v in values)


# --- subcommands ----------------------------------------------------------


def cmd_synth(args) -> None:
    cfg = WorldConfig(**{f.name: getattr(args, f.name) for f in fields(WorldConfig)})
    manifest = generate_world(cfg, args.out)
    print(f"wrote {manifest}")


def _train_config(args) -> TrainConfig:
    kw = {f.name: getattr(args, f.name) for f in fields(TrainConfig) if f.name != "normalize_context"}
    return TrainConfig(**kw, normalize_context=not args.raw_context)


def cmd_train(args) -> None:
    cfg = _train_config(args)
    records = read_manifest(args.manifest)
    features = pool_records(args.manifest, records, cfg.scales, args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def checkpoint(epoch, params, loss):
        save_head(out / f"epoch_{epoch:03d}.json", params, cfg.scales, epoch=epoch, mean_loss=loss)

    try:
        params, history = train_epochs(records, features, cfg, on_epoch=checkpoint)
    except TrainingError as e:
        (out / "diverged_state.json").write_text(json.dumps(e.state, indent=1) + "\n")
        raise
    save_head(out / "head.json", params, cfg.scales, epoch=cfg.epochs, config=config_dict(cfg))
    with open(out / "loss_history.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss"])
        for i, loss in enumerate(history, 1):
            writer.writerow([i, repr(loss)])
    for i, loss in enumerate(history, 1):
        print(f"epoch {i}: mean loss {loss:.6f}")


def cmd_extract(args) -> None:
    records = read_manifest(args.manifest)
    scales = args.scales
    if args.head:
        params, scales, _ = load_head(args.head)
    elif args.mode == "none":
        params = HeadParams("none")
    else:
        depth = read_featuremap(resolve_featuremap(args.manifest, records[0])).depth
        params = init_head_params(depth, args.mode, make_rng(args.seed), not args.raw_context)
    matrix, scores = extract(args.manifest, records, params, scales, normalize=not args.skip_final_norm,
                             aggregator=args.aggregator, threads=args.threads,
                             want_scores=bool(args.dump_scores))
    save_descriptor_table(args.out, [r.id for r in records], matrix)
    if args.dump_scores:
        write_score_csv(args.dump_scores, scores)
    print(f"wrote {matrix.shape[0]} x {matrix.shape[1]} descriptors to {args.out}")


def cmd_whiten_fit(args) -> None:
    _, matrix = load_descriptor_table(args.descriptors)
    samples = sample_rows(matrix, args.max_samples, make_rng(args.seed))
    model = fit_pca(samples).with_params(alpha=args.alpha, out_dim=args.out_dim)
    save_whitening(args.out, model)
    if args.variance_report:
        write_variance_csv(args.variance_report, variance_report(samples, model, args.alphas))
    print(f"fitted whitening on {samples.shape[0]} x {samples.shape[1]} samples -> {args.out}")


def cmd_whiten_apply(args) -> None:
    model = load_whitening(args.model).with_params(alpha=args.alpha, out_dim=args.out_dim)
    ids, matrix = load_descriptor_table(args.descriptors)
    save_descriptor_table(args.out, ids, model.transform(matrix, normalize=True))
    print(f"whitened {len(ids)} descriptors (alpha={model.alpha:g}, dim={model.out_dim}) -> {args.out}")


def cmd_eval(args) -> None:
    records = read_manifest(args.manifest)
    ids, matrix = load_descriptor_table(args.descriptors)
    table = recall_at_n(
        [r for r in records if r.role == "query"],
        [r for r in records if r.role == "database"],
        dict(zip(ids, matrix)),
        radius=args.radius,
        ns=args.ns,
        threads=args.threads,
    )
    write_recall_csv(args.out_csv, table)
    if args.out_json:
        write_detail_json(args.out_json, table)
    for n, r in zip(table.ns, table.recalls):
        print(f"Recall@{n}: {100 * r:.2f}")
    if table.num_excluded:
        print(f"{table.num_excluded} queries without a database image within {args.radius:g} m were excluded")


def cmd_report(args) -> None:
    tables = {}
    for item in args.input:
        label, sep, path = item.rpartition("=")
        if not sep:
            raise ValueError(f"--input expects LABEL=PATH, got {item!r}")
        tables[label] = read_recall_csv(path)
    ns = sorted({n for t in tables.values() for n in t})
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["run"] + [f"R@{n}" for n in ns])
        for label, t in tables.items():
            writer.writerow([label] + [f"{100 * t[n]:.2f}" if n in t else "" for n in ns])
    print(Path(args.out).read_text(), end="")
    if args.figure:
        plots.plot_recall_curves(tables, args.figure)
    if args.variance:
        with open(args.variance, newline="") as f:
            rows = list(csv.DictReader(f))
        plots.plot_variance(rows, args.variance_figure or Path(args.variance).with_suffix(".png"))


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed, args.trials)
    worst = max(results.values())
    for name, err in results.items():
        status = "ok" if err < gradcheck.TOLERANCE else "FAIL"
        print(f"{name:34s} max rel err {err:.3e}  {status}")
    return 0 if worst < gradcheck.TOLERANCE else EXIT_GRADCHECK


# --- parser ---------------------------------------------------------------


TRAIN_HELP = {
    "margin": "triplet hinge margin m",
    "batch_tuples": "training tuples per SGD step",
    "lr0": "base learning rate of epoch 1, decayed by exp(-0.1) per epoch",
    "momentum": "SGD momentum",
    "weight_decay": "L2 weight decay",
    "attention_lr_multiplier": "learning-rate multiplier for the attention parameters",
    "epochs": "training epochs",
    "seed": "seed for initialisation, tuple mining and batch order",
    "r_pos": "potential-positive radius in metres",
    "r_neg": "negatives lie farther than this many metres",
    "neg_pool": "negatives sampled per query before hard mining",
    "hardest_k": "hardest negatives kept per tuple",
}

WORLD_HELP = {
    "num_places": "distinct geo-located places",
    "database_views_per_place": "database images per place",
    "query_views_per_place": "query images per place",
    "width": "feature map width W",
    "height": "feature map height H",
    "depth": "feature map channels D",
    "num_signal_channels": "channels carrying place-specific structures",
    "num_clutter_channels": "channels reserved for transient clutter",
    "clutter_rate": "probability that a clutter slot is filled in a view",
    "burst_repeat_rate": "probability that a structure is repeated across the map",
    "shift_cells": "maximum viewpoint shift in cells",
    "gain_jitter": "relative per-view gain jitter",
    "noise_level": "additive Gaussian noise standard deviation",
    "extent_m": "side of the square world in metres",
    "view_jitter_m": "camera position jitter around a place in metres",
    "pos_radius_m": "views of one place stay within this radius",
    "neg_radius_m": "places are spaced farther apart than this",
    "buildings_per_place": "building structures per place",
    "building_channels": "active signal channels per building",
    "clutter_slots": "candidate clutter positions per view",
    "clutter_types": "size of the world-wide clutter vocabulary",
    "clutter_gain": "clutter activation strength relative to buildings",
    "feature_scale": "global multiplier on all activations",
    "seed": "world generation seed",
}


def _add_scales(p) -> None:
    p.add_argument("--scales", type=_scales, default=_fmt(DEFAULT_SCALES),
                   help="comma-separated pyramid grid scales, e.g. 2,4,6,8")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults for optional flags only."""

    def _get_help_string(self, action):
        if action.required or action.default is None or action.default is argparse.SUPPRESS:
            return action.help
        return super()._get_help_string(action)


def _add_threads(p) -> None:
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="apanet", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help, formatter_class=fmt)
        p.add_argument("--config", help="JSON file of flag values; command-line flags win")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic geo-tagged world")
    p.add_argument("--out", required=True, help="output directory")
    for f in fields(WorldConfig):
        p.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default,
                       help=WORLD_HELP[f.name])

    p = add("train", cmd_train, "train the attention head with the triplet ranking loss")
    p.add_argument("--manifest", required=True, help="manifest JSON of the training world")
    p.add_argument("--out", required=True, help="checkpoint directory")
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        if f.name in ("scales", "normalize_context", "mode"):
            continue
        p.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=getattr(defaults, f.name),
                       help=TRAIN_HELP[f.name])
    p.add_argument("--mode", choices=MODES, default=defaults.mode, help="attention head to train")
    _add_scales(p)
    p.add_argument("--raw-context", action="store_true",
                   help="feed the unnormalized first-stage descriptor to the cascaded FC layer")
    _add_threads(p)

    p = add("extract", cmd_extract, "compute global descriptors for every record of a manifest")
    p.add_argument("--manifest", required=True, help="manifest JSON listing the feature maps")
    p.add_argument("--out", required=True, help="APAD output (an .ids sidecar is written next to it)")
    p.add_argument("--head", help="trained head checkpoint (JSON); overrides --mode/--scales")
    p.add_argument("--mode", choices=MODES, default="none", help="head used when --head is absent")
    _add_scales(p)
    p.add_argument("--seed", type=int, default=0, help="initialisation seed of an untrained head")
    p.add_argument("--raw-context", action="store_true", help="untrained cascaded head uses the raw context")
    p.add_argument("--aggregator", choices=AGGREGATORS, default="apanet",
                   help="apanet head, or the global mac / sum pooling baselines")
    p.add_argument("--skip-final-norm", action="store_true",
                   help="leave descriptors unnormalized (a whitening step normalizes afterwards)")
    p.add_argument("--dump-scores", help="write attention scores to this CSV")
    _add_threads(p)

    p = add("whiten-fit", cmd_whiten_fit, "fit PCA (power) whitening on descriptors")
    p.add_argument("--descriptors", required=True, help="APAD descriptors to fit on")
    p.add_argument("--out", required=True, help="APAW output")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="power exponent stored with the model")
    p.add_argument("--out-dim", type=int, default=None, help="kept dimensions; None keeps all")
    p.add_argument("--max-samples", type=int, default=10000, help="fitting rows sampled without replacement")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--variance-report", help="write per-dimension variances to this CSV")
    p.add_argument("--alphas", type=_float_list, default="0,0.25,0.5,1",
                   help="alphas covered by --variance-report")

    p = add("whiten-apply", cmd_whiten_apply, "apply a fitted whitening model")
    p.add_argument("--model", required=True, help="APAW whitening model")
    p.add_argument("--descriptors", required=True, help="APAD descriptors to transform")
    p.add_argument("--out", required=True, help="APAD output")
    p.add_argument("--alpha", type=float, default=None, help="override the model's alpha; None keeps it")
    p.add_argument("--out-dim", type=int, default=None, help="override the model's output dimension; None keeps it")

    p = add("eval", cmd_eval, "Recall@N of query descriptors against the database")
    p.add_argument("--manifest", required=True, help="manifest JSON with query and database records")
    p.add_argument("--descriptors", required=True, help="APAD descriptors covering every record")
    p.add_argument("--radius", type=float, default=DEFAULT_RADIUS, help="correctness radius in metres")
    p.add_argument("--ns", type=_int_list, default=_fmt(DEFAULT_NS), help="comma-separated N values")
    p.add_argument("--out-csv", required=True, help="recall table CSV (columns N, recall)")
    p.add_argument("--out-json", help="per-query ranking detail JSON")
    _add_threads(p)

    p = add("report", cmd_report, "merge recall CSVs into one table and render figures")
    p.add_argument("--input", action="append", required=True, metavar="LABEL=CSV",
                   help="labelled recall CSV from eval; repeat for each run")
    p.add_argument("--out", required=True, help="merged CSV table")
    p.add_argument("--figure", help="recall-vs-N PNG")
    p.add_argument("--variance", help="variance report CSV to plot")
    p.add_argument("--variance-figure", help="PNG for the variance plot")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=7, help="seed of the random test instances")
    p.add_argument("--trials", type=int, default=20, help="random instances per block")
    return parser


def _config_path(argv) -> str | None:
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def _apply_config(parser, argv) -> argparse.Namespace:
    """Parse ``argv`` after loading ``--config`` values as subcommand defaults."""
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subparsers), None)
    if path and command:
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict):
            raise ValueError(f"config file {path} must hold a JSON object")
        sub = subparsers[command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in doc.items():
            dest = key.replace("-", "_")
            if dest not in actions or dest in ("help", "config"):
                parser.error(f"unknown key {key!r} in config file {path}")
            if isinstance(value, list) and not isinstance(actions[dest], argparse._AppendAction):
                value = ",".join(str(v) for v in value)
            defaults[dest] = value
            actions[dest].required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except FileNotFoundError as e:
        print(f"error: missing file: {e.filename}", file=sys.stderr)
        return EXIT_MISSING
    except (json.JSONDecodeError, ValueError) as e:
        print(f"error: invalid config file: {e}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except FileNotFoundError as e:
        print(f"error: missing file: {e.filename}", file=sys.stderr)
        return EXIT_MISSING
    except FormatError as e:
        print(f"error: bad file format: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, KeyError) as e:
        print(f"error: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
