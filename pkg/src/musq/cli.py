"""Command-line front end.

Verbs: synth, track, train, eval, visualize, report. Every flag has a
config-file equivalent (plain key=value lines, '#' comments, dashes may be
written as underscores); explicit flags override config values.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import nn, pipeline
from .errors import MusqError
from .numerics import SeededRng
from .synth import read_dataset
from .tracking import kmeans_fit, select_good_features


def load_config(path):
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        cfg[k.strip().replace("-", "_")] = v.strip()
    return cfg


def merge(args, config, key, cast, default):
    """Flag value if given, else config value, else default."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    if key in config:
        return cast(config[key])
    return default


def cmd_synth(args, config):
    cfg = pipeline.CorpusConfig(
        participants=merge(args, config, "participants", int, 6),
        seconds=merge(args, config, "seconds", float, 60.0),
        fps=merge(args, config, "fps", float, 25.0),
        region_h=merge(args, config, "region_h", int, 32),
        region_w=merge(args, config, "region_w", int, 96),
        seed=merge(args, config, "seed", int, 0),
    )
    out = merge(args, config, "out", str, None)
    if out is None:
        raise UsageError("--out is required")
    pipeline.generate_corpus(cfg, out)
    print(f"wrote {cfg.participants}-participant corpus to {out}")
    return 0


def cmd_track(args, config):
    data = merge(args, config, "data", str, None)
    out = merge(args, config, "out", str, None)
    if data is None or out is None:
        raise UsageError("--data and --out are required")
    seed = merge(args, config, "seed", int, 0)
    tcfg = pipeline.TrackerConfig(
        window=merge(args, config, "window", int, 11),
        pyramid_levels=merge(args, config, "pyramid_levels", int, 3),
        k_clusters=merge(args, config, "clusters", int, 32),
        max_features=merge(args, config, "features", int, 200),
    )
    seq, _labels = read_dataset(data)
    frames = seq.frames
    pts = []
    step = max(1, len(frames) // min(len(frames), tcfg.kmeans_images))
    for f in frames[::step]:
        pts += [(ft.x, ft.y) for ft in select_good_features(
            f, tcfg.max_features, tcfg.min_distance,
            window=tcfg.score_window)]
    clusters = kmeans_fit(np.array(pts), tcfg.k_clusters, rng=SeededRng(seed))
    vecs, _ = pipeline.track_sequence(frames, clusters, tcfg)
    with open(out, "w") as f:
        f.write("frame," + ",".join(
            f"dx_{c},dy_{c}" for c in range(tcfg.k_clusters)) + "\n")
        for i, v in enumerate(vecs):
            f.write(str(i + 1) + "," + ",".join("%.9g" % x for x in v)
                    + "\n")
    print(f"wrote {len(vecs)} cluster motion vectors to {out}")
    return 0


def _train_config(args, config, method):
    base = pipeline.ExperimentConfig(data_root="", method=method)
    default = base.resolved_train()
    return nn.TrainConfig(
        learning_rate=merge(args, config, "lr", float,
                            default.learning_rate),
        momentum=merge(args, config, "momentum", float, default.momentum),
        dropout_p=merge(args, config, "dropout_p", float,
                        default.dropout_p),
        dropout_layers=merge(args, config, "dropout_layers", int,
                             default.dropout_layers),
        eval_interval=merge(args, config, "eval_interval", int,
                            default.eval_interval),
        eval_samples=merge(args, config, "eval_samples", int,
                           default.eval_samples),
        patience=merge(args, config, "patience", int, default.patience),
        max_updates=merge(args, config, "max_updates", int,
                          default.max_updates),
    )


def cmd_train(args, config):
    data = merge(args, config, "data", str, None)
    out = merge(args, config, "out", str, None)
    if data is None or out is None:
        raise UsageError("--data and --out are required")
    kernel = merge(args, config, "input_kernel", int, 5)
    method = merge(args, config, "method", str, "cnn")
    cfg = pipeline.ExperimentConfig(
        data_root=data,
        method=method,
        arch=merge(args, config, "arch", str, None),
        input_kernel=(kernel, kernel),
        train=_train_config(args, config, method),
        seed=merge(args, config, "seed", int, 0),
        split_seed=merge(args, config, "split_seed", int, 0),
    )
    result = pipeline.run_experiment(cfg)
    out_dir = Path(out)
    pipeline.emit_report(result.report, result.traces, out_dir)
    nn.save_checkpoint(result.model, out_dir / "model.musn")
    print(f"trained {cfg.method}; report and checkpoint in {out_dir}")
    return 0


def cmd_eval(args, config):
    model_path = merge(args, config, "model", str, None)
    data = merge(args, config, "data", str, None)
    out = merge(args, config, "out", str, None)
    if model_path is None or data is None or out is None:
        raise UsageError("--model, --data and --out are required")
    model = nn.load_checkpoint(model_path)
    seq, labels = read_dataset(data)
    norm = model.norm
    h, w, c = model.spec.input_shape

    targets = labels.targets()[1:]
    if (w, c) == (1, 1):
        # motion-vector model: rebuild cluster geometry deterministically
        tcfg = pipeline.TrackerConfig(k_clusters=h // 2)
        clusters = pipeline.fit_clusters_on_corpus(
            [seq.frames], tcfg, SeededRng(merge(args, config, "seed",
                                                int, 0)).child(1))
        vecs, _ = pipeline.track_sequence(seq.frames, clusters, tcfg)
        ds = pipeline.VectorDataset([vecs], [targets], norm)
    else:
        ds = pipeline.PairDataset([seq.frames], [labels.targets()], norm)

    preds = np.empty((len(ds), 3))
    truths = np.empty((len(ds), 3))
    for i in range(len(ds)):
        x, t = ds[i]
        y, _ = nn.forward(model, x, mode="infer")
        preds[i] = y
        truths[i] = t
    rows = {}
    traces = {seq.condition: {}}
    for j, target in enumerate(pipeline.TARGETS):
        pt = truths[:, j] * norm.target_std[j] + norm.target_mean[j]
        pp = preds[:, j] * norm.target_std[j] + norm.target_mean[j]
        rows[(target, seq.condition)] = pipeline.regression_metrics(
            pp, pt, norm.target_std[j])
        traces[seq.condition][target] = (pt, pp)
    report = pipeline.MetricsReport(rows=rows, seed=0, config_digest="eval")
    pipeline.emit_report(report, traces, out)
    print(f"evaluation written to {out}")
    return 0


def cmd_visualize(args, config):
    model_path = merge(args, config, "model", str, None)
    out = merge(args, config, "out", str, None)
    if model_path is None or out is None:
        raise UsageError("--model and --out are required")
    model = nn.load_checkpoint(model_path)
    layer = merge(args, config, "layer", int, len(model.layers) - 1)
    unit_text = merge(args, config, "unit", str, "0")
    parts = unit_text.split(",")
    unit = int(parts[0]) if len(parts) == 1 else tuple(
        p if p == "map" else int(p) for p in parts)
    seed = merge(args, config, "seed", int, 0)
    x, history = nn.maximize_activation(model, layer, unit, SeededRng(seed))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "optimized_input.npy", x)
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    c = x.shape[2]
    fig, axes = plt.subplots(1, c, figsize=(5 * c, 3))
    for ch, ax in zip(range(c), np.atleast_1d(axes)):
        ax.imshow(x[:, :, ch], cmap="gray")
        ax.set_title(f"channel {ch}")
        ax.axis("off")
    fig.savefig(out_dir / "optimized_input.png", dpi=100)
    plt.close(fig)
    print(f"activation {history[0]:.4f} -> {history[-1]:.4f}; "
          f"output in {out_dir}")
    return 0


def cmd_report(args, config):
    run = merge(args, config, "run", str, None)
    out = merge(args, config, "out", str, None)
    if run is None or out is None:
        raise UsageError("--run and --out are required")
    run_dir = Path(run)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise MusqError(f"no metrics.csv under {run_dir}")
    (out_dir / "metrics.csv").write_text(metrics.read_text())
    traces = {}
    for path in sorted(run_dir.glob("traces_*.csv")):
        condition = path.stem[len("traces_"):]
        lines = path.read_text().splitlines()
        cols = lines[0].split(",")
        data = np.array([[float(v) for v in line.split(",")]
                         for line in lines[1:]])
        per_target = {}
        for t in pipeline.TARGETS:
            ti = cols.index(f"{t}_true")
            pi = cols.index(f"{t}_pred")
            per_target[t] = (data[:, ti], data[:, pi])
        traces[condition] = per_target
    pipeline._plot_traces(traces, out_dir)
    print(f"report rendered to {out_dir}")
    return 0


class UsageError(Exception):
    pass


def build_parser():
    parser = argparse.ArgumentParser(
        prog="musq",
        description="Synthetic muscle-ultrasound state regression toolkit")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(name, func, flags):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        for flag, kwargs in flags:
            p.add_argument(flag, **kwargs)
        p.set_defaults(func=func)

    add("synth", cmd_synth, [
        ("--participants", dict(type=int)), ("--seconds", dict(type=float)),
        ("--fps", dict(type=float)), ("--seed", dict(type=int)),
        ("--region-h", dict(type=int, dest="region_h")),
        ("--region-w", dict(type=int, dest="region_w")),
        ("--out", dict())])
    add("track", cmd_track, [
        ("--data", dict()), ("--out", dict()), ("--seed", dict(type=int)),
        ("--window", dict(type=int)),
        ("--pyramid-levels", dict(type=int, dest="pyramid_levels")),
        ("--clusters", dict(type=int)), ("--features", dict(type=int))])
    add("train", cmd_train, [
        ("--method", dict(choices=["cnn", "klt-ann"])), ("--arch", dict()),
        ("--data", dict()), ("--out", dict()), ("--seed", dict(type=int)),
        ("--split-seed", dict(type=int, dest="split_seed")),
        ("--lr", dict(type=float)), ("--momentum", dict(type=float)),
        ("--dropout-layers", dict(type=int, dest="dropout_layers")),
        ("--eval-interval", dict(type=int, dest="eval_interval")),
        ("--max-updates", dict(type=int, dest="max_updates")),
        ("--input-kernel", dict(type=int, dest="input_kernel"))])
    add("eval", cmd_eval, [
        ("--model", dict()), ("--data", dict()), ("--out", dict()),
        ("--seed", dict(type=int))])
    add("visualize", cmd_visualize, [
        ("--model", dict()), ("--layer", dict(type=int)),
        ("--unit", dict()), ("--seed", dict(type=int)), ("--out", dict())])
    add("report", cmd_report, [("--run", dict()), ("--out", dict())])
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    config = {}
    try:
        if args.config:
            config = load_config(args.config)
        return args.func(args, config)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except MusqError as e:
        print(f"data error [{e.code}]: {e}", file=sys.stderr)
        return 2
    except (FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
