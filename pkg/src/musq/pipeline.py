"""Experiment orchestration: corpus synthesis, LOSO splits, training runs,
metrics, and report emission.

Both methods share the split/metrics/report machinery and differ only in
their feature front end: the CNN consumes raw consecutive-frame pairs, the
KLT+ANN route consumes cluster-averaged tracked motion vectors.
"""

import hashlib
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .errors import EmptyDataError, IoError, TooFewParticipantsError
from .numerics import SeededRng
from .signals import CONDITIONS, PlantConfig, make_condition_label_track
from .synth import (MotionGains, gen_speckle_texture, read_dataset,
                    render_sequence, write_dataset)
from .tracking import (integrate_cluster_motion, klt_track, kmeans_fit,
                       select_good_features)

TARGETS = ("d_emg", "d_torque", "d_angle")
TARGET_UNITS = {"d_emg": "V", "d_torque": "Nm", "d_angle": "deg"}


# ---------------------------------------------------------------------------
# synthetic corpus

@dataclass(frozen=True)
class CorpusConfig:
    participants: int = 6
    seconds: float = 60.0
    fps: float = 25.0
    region_h: int = 32
    region_w: int = 96
    margin: int = 16
    grain: float = 2.0
    seed: int = 0
    plant: PlantConfig = field(default_factory=PlantConfig)
    gains: MotionGains = field(default_factory=MotionGains)
    gain_jitter: float = 0.10


def participant_ids(n):
    return [f"P{i + 1:02d}" for i in range(n)]


def generate_corpus(cfg, out_root):
    """Write participants x conditions datasets under out_root.

    Each participant gets a distinct speckle canvas and a plant with mixing
    gains jittered by +-gain_jitter, so held-out participants differ in both
    texture and dynamics.
    """
    root = Path(out_root)
    rng = SeededRng(cfg.seed)
    for p_idx, pid in enumerate(participant_ids(cfg.participants)):
        p_rng = rng.child(p_idx)
        tex = gen_speckle_texture(cfg.region_h + 2 * cfg.margin,
                                  cfg.region_w + 2 * cfg.margin,
                                  cfg.grain, p_rng.child(0))
        jitter = p_rng.child(1)
        j = 1.0 + cfg.gain_jitter * jitter.uniform(-1.0, 1.0)
        k = 1.0 + cfg.gain_jitter * jitter.uniform(-1.0, 1.0)
        plant = replace(cfg.plant, k_active=cfg.plant.k_active * j,
                        k_passive=cfg.plant.k_passive * k)
        for c_idx, condition in enumerate(CONDITIONS):
            labels = make_condition_label_track(
                condition, cfg.seconds, plant, cfg.fps,
                p_rng.child(2 + c_idx))
            seq = render_sequence(tex, labels, plant, cfg.gains,
                                  cfg.region_h, cfg.region_w,
                                  participant=pid, condition=condition)
            write_dataset(seq, labels, root / pid / condition)
    return root


def load_corpus(root):
    """{participant: {condition: (sequence, labels)}} from a corpus dir."""
    root = Path(root)
    corpus = {}
    for pdir in sorted(d for d in root.iterdir() if d.is_dir()):
        conditions = {}
        for cdir in sorted(d for d in pdir.iterdir() if d.is_dir()):
            conditions[cdir.name] = read_dataset(cdir)
        if conditions:
            corpus[pdir.name] = conditions
    if not corpus:
        raise EmptyDataError(f"no datasets under {root}")
    return corpus


# ---------------------------------------------------------------------------
# splits and metrics

def loso_split(participants, seed):
    """Deterministic (train_ids, val_id, test_id) with val != test."""
    ids = list(participants)
    if len(ids) < 3:
        raise TooFewParticipantsError(f"{len(ids)} participants, need >= 3")
    perm = SeededRng(seed).permutation(len(ids))
    test = ids[int(perm[0])]
    val = ids[int(perm[1])]
    train = [ids[int(i)] for i in perm[2:]]
    return sorted(train), val, test


@dataclass(frozen=True)
class MetricsRow:
    mse: float           # on the normalized training scale
    rmse: float          # physical units
    nrmse: float = None  # rmse / ground-truth range; None if degenerate
    r2: float = None     # None if ground truth is constant


def regression_metrics(pred, truth, norm_std):
    """Metrics for one target: MSE normalized, RMSE physical, NRMSE, R^2."""
    pred = np.asarray(pred, float)
    truth = np.asarray(truth, float)
    if pred.shape != truth.shape or pred.size < 2:
        raise ValueError("need equal-length series of length >= 2")
    sq = float(((pred - truth) ** 2).mean())
    rmse = sq ** 0.5
    mse = sq / float(norm_std) ** 2
    span = float(truth.max() - truth.min())
    ss_tot = float(((truth - truth.mean()) ** 2).sum())
    if span <= 0.0 or ss_tot <= 0.0:
        return MetricsRow(mse=mse, rmse=rmse)
    ss_res = float(((pred - truth) ** 2).sum())
    return MetricsRow(mse=mse, rmse=rmse, nrmse=rmse / span,
                      r2=1.0 - ss_res / ss_tot)


@dataclass
class MetricsReport:
    rows: dict                 # (target, condition) -> MetricsRow
    seed: int
    config_digest: str
    wall_time: float = 0.0     # kept out of the canonical metrics file


# ---------------------------------------------------------------------------
# sample assembly

class PairDataset:
    """Consecutive-frame-pair samples for the CNN route.

    Frames are held in 32-bit storage precision; each fetch builds the
    normalized (h, w, 2) input and normalized 3-target vector in 64-bit.
    """

    def __init__(self, sequences, targets, norm):
        self.frames = [np.asarray(s, np.float32) for s in sequences]
        self.targets = [np.asarray(t, float) for t in targets]
        self.norm = norm
        self.index = [(si, k) for si, s in enumerate(self.frames)
                      for k in range(1, len(s))]

    def __len__(self):
        return len(self.index)

    def __getitem__(self, i):
        si, k = self.index[i]
        x = np.stack([self.frames[si][k - 1], self.frames[si][k]],
                     axis=-1).astype(float)
        x = (x - self.norm.input_mean) / self.norm.input_std
        t = (self.targets[si][k] - self.norm.target_mean) \
            / self.norm.target_std
        return x, t


class VectorDataset:
    """Precomputed motion-vector samples for the KLT+ANN route."""

    def __init__(self, vectors, targets, norm):
        self.x = np.concatenate(vectors, axis=0)
        self.t = np.concatenate(targets, axis=0)
        self.norm = norm
        self.xn = (self.x - norm.input_mean) / norm.input_std
        self.tn = (self.t - norm.target_mean) / norm.target_std

    def __len__(self):
        return len(self.x)

    def __getitem__(self, i):
        return self.xn[i].reshape(-1, 1, 1), self.tn[i]


@dataclass(frozen=True)
class TrackerConfig:
    max_features: int = 200
    min_distance: float = 4.0
    score_window: int = 5
    window: int = 11
    pyramid_levels: int = 3
    max_iters: int = 30
    eps: float = 0.01
    k_clusters: int = 32
    kmeans_images: int = 500


def sequence_features(frames, tcfg):
    """Fresh corner selection per frame; list of feature lists."""
    return [select_good_features(f, tcfg.max_features, tcfg.min_distance,
                                 window=tcfg.score_window) for f in frames]


def fit_clusters_on_corpus(train_frames, tcfg, rng):
    """K-means on features pooled from equidistant training images."""
    flat = [f for seq in train_frames for f in seq]
    n = min(tcfg.kmeans_images, len(flat))
    idx = np.linspace(0, len(flat) - 1, n).round().astype(int)
    pts = []
    for i in idx:
        for feat in select_good_features(flat[i], tcfg.max_features,
                                         tcfg.min_distance,
                                         window=tcfg.score_window):
            pts.append((feat.x, feat.y))
    return kmeans_fit(np.array(pts), tcfg.k_clusters, rng=rng)


def track_sequence(frames, clusters, tcfg):
    """Per-pair cluster motion vectors; rows align with frames[1:].

    Features are selected fresh per frame; pyramids and gradients are cached
    so each frame's are built once even though it appears in two pairs.
    """
    from .tracking import _gradients, build_pyramid
    out = np.zeros((len(frames) - 1, 2 * clusters.k))
    empties = 0
    prev_pyr = build_pyramid(frames[0], tcfg.pyramid_levels)
    prev_grads = [_gradients(im) for im in prev_pyr]
    for k in range(1, len(frames)):
        prev, nxt = frames[k - 1], frames[k]
        next_pyr = build_pyramid(nxt, tcfg.pyramid_levels)
        feats = select_good_features(prev, tcfg.max_features,
                                     tcfg.min_distance,
                                     window=tcfg.score_window)
        tracks = klt_track(prev, nxt, feats, window=tcfg.window,
                           pyramid_levels=tcfg.pyramid_levels,
                           max_iters=tcfg.max_iters, eps=tcfg.eps,
                           prev_pyramid=prev_pyr, next_pyramid=next_pyr,
                           prev_gradients=prev_grads)
        vec = integrate_cluster_motion(feats, tracks, clusters)
        out[k - 1] = vec.values
        empties += vec.empty_clusters
        prev_pyr = next_pyr
        prev_grads = [_gradients(im) for im in next_pyr]
    return out, empties


# ---------------------------------------------------------------------------
# experiments

@dataclass(frozen=True)
class ExperimentConfig:
    data_root: str
    method: str = "cnn"                  # "cnn" | "klt-ann"
    arch: str = None                     # None -> per-method default
    input_kernel: tuple = (5, 5)
    hidden_kernel: tuple = (3, 3)
    depth_multiplier: bool = False
    train: nn.TrainConfig = None         # None -> per-method default
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    seed: int = 0
    split_seed: int = 0
    val_id: str = None                   # explicit split overrides
    test_id: str = None

    def resolved_arch(self):
        if self.arch:
            return self.arch
        if self.method == "cnn":
            return "c-8 p-2x2 c-16 p-2x2 fc-64 fc-3"
        return "fc-256 fc-256 fc-3"

    def resolved_train(self):
        if self.train is not None:
            return self.train
        if self.method == "cnn":
            # dropout on the top fc layer stabilizes validation loss; the
            # update cap keeps a full run inside a desk-scale time budget
            return nn.TrainConfig(dropout_layers=1, eval_interval=10_000,
                                  eval_samples=2000, max_updates=175_000)
        return nn.TrainConfig(eval_interval=10_000, eval_samples=2000,
                              max_updates=400_000)

    def digest(self):
        text = repr(sorted(self.__dict__.items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


DEFAULT_CNN_ARCH_PAPER = {
    "A": "c-16 p-2x2 c-36 p-2x2 c-64 p-2x2 c-121 p-2x2 c-169 p-2x2 "
         "c-225 p-2x2 c-289 p-2x2 fc-1024 fc-3",
    "B": "c-36 p-2x2 c-64 p-2x2 c-121 p-2x2 c-169 p-2x2 c-225 p-2x2 "
         "c-289 p-2x2 c-361 p-2x2 fc-1024 fc-3",
    "C": "c-49 p-2x2 c-81 p-2x2 c-144 p-2x2 c-324 p-2x2 c-484 p-2x2 "
         "fc-1024 fc-1024 fc-3",
    "D": "c-64 p-2x2 c-121 p-2x2 c-169 p-2x2 c-225 p-2x2 c-289 p-2x2 "
         "c-361 p-2x2 c-441 p-2x2 fc-1024 fc-3",
}


def _target_matrix(labels):
    return labels.targets()


def _vector_norm_constants(x, t):
    xm = x.mean(axis=0)
    xs = x.std(axis=0)
    xs = np.where(xs < 1e-12, 1.0, xs)
    tm = t.mean(axis=0)
    ts = t.std(axis=0)
    ts = np.where(ts < 1e-12, 1.0, ts)
    return xm, xs, tm, ts


@dataclass
class ExperimentResult:
    report: MetricsReport
    model: nn.NetworkModel
    traces: dict            # condition -> {target: (truth, pred)}
    history: list
    empty_cluster_rate: float = None


def run_experiment(cfg):
    """Train the selected method end to end and evaluate on the held-out
    test participant; never trains on validation or test data."""
    t_start = time.time()
    if cfg.method not in ("cnn", "klt-ann"):
        raise ValueError(f"unknown method {cfg.method!r}")
    corpus = load_corpus(cfg.data_root)
    train_ids, val_id, test_id = loso_split(sorted(corpus), cfg.split_seed)
    if cfg.val_id is not None or cfg.test_id is not None:
        val_id = cfg.val_id if cfg.val_id is not None else val_id
        test_id = cfg.test_id if cfg.test_id is not None else test_id
        if val_id == test_id:
            raise ValueError("validation and test participants must differ")
        for pid in (val_id, test_id):
            if pid not in corpus:
                raise ValueError(f"unknown participant {pid!r}")
        train_ids = sorted(set(corpus) - {val_id, test_id})
    rng = SeededRng(cfg.seed)

    def seqs(pids):
        out = []
        for pid in pids:
            for condition in sorted(corpus[pid]):
                seq, labels = corpus[pid][condition]
                out.append((pid, condition, seq.frames,
                            _target_matrix(labels)))
        return out

    train_items = seqs(train_ids)
    val_items = seqs([val_id])
    test_items = seqs([test_id])

    empty_rate = None
    if cfg.method == "cnn":
        h, w = train_items[0][2].shape[1:]
        train_frames = [it[2] for it in train_items]
        mean = float(np.mean([f.mean() for f in train_frames]))
        var = float(np.mean([((f - mean) ** 2).mean()
                             for f in train_frames]))
        tmat = np.concatenate([it[3][1:] for it in train_items], axis=0)
        tm, ts = tmat.mean(axis=0), tmat.std(axis=0)
        ts = np.where(ts < 1e-12, 1.0, ts)
        norm = nn.NormConstants(np.array([mean]),
                                np.array([max(var ** 0.5, 1e-12)]),
                                tm, ts)
        spec = nn.parse_architecture(cfg.resolved_arch(), (h, w, 2),
                                     input_kernel=cfg.input_kernel,
                                     hidden_kernel=cfg.hidden_kernel,
                                     depth_multiplier=cfg.depth_multiplier)
        make_ds = lambda items: PairDataset([it[2] for it in items],
                                            [it[3] for it in items], norm)
        train_ds = make_ds(train_items)
        val_ds = make_ds(val_items)
        test_sets = {it[1]: make_ds([it]) for it in test_items}
    else:
        clusters = fit_clusters_on_corpus([it[2] for it in train_items],
                                          cfg.tracker, rng.child(1))
        tracked = {}
        empties = 0
        pairs = 0
        for items in (train_items, val_items, test_items):
            for pid, condition, frames, tmat in items:
                vecs, emp = track_sequence(frames, clusters, cfg.tracker)
                tracked[(pid, condition)] = (vecs, tmat[1:])
                if (pid, condition) in [(i[0], i[1]) for i in test_items] \
                        or (pid, condition) in [(i[0], i[1])
                                                for i in val_items]:
                    empties += emp
                    pairs += len(vecs)
        empty_rate = empties / (pairs * cfg.tracker.k_clusters) \
            if pairs else 0.0

        xtr = np.concatenate([tracked[(it[0], it[1])][0]
                              for it in train_items], axis=0)
        ttr = np.concatenate([tracked[(it[0], it[1])][1]
                              for it in train_items], axis=0)
        xm, xs, tm, ts = _vector_norm_constants(xtr, ttr)
        norm = nn.NormConstants(xm, xs, tm, ts)
        dim = xtr.shape[1]
        spec = nn.parse_architecture(cfg.resolved_arch(), (dim, 1, 1))

        def make_ds(items):
            return VectorDataset(
                [tracked[(it[0], it[1])][0] for it in items],
                [tracked[(it[0], it[1])][1] for it in items], norm)
        train_ds = make_ds(train_items)
        val_ds = make_ds(val_items)
        test_sets = {it[1]: make_ds([it]) for it in test_items}

    model = nn.initialize_network(spec, rng.child(0))
    model.norm = norm
    model, history = nn.train_early_stopping(model, train_ds, val_ds,
                                             cfg.resolved_train(),
                                             rng.child(2))

    rows = {}
    traces = {}
    for condition, ds in sorted(test_sets.items()):
        preds = np.empty((len(ds), 3))
        truths = np.empty((len(ds), 3))
        for i in range(len(ds)):
            x, t = ds[i]
            y, _ = nn.forward(model, x, mode="infer")
            preds[i] = y
            truths[i] = t
        traces[condition] = {}
        for j, target in enumerate(TARGETS):
            phys_t = truths[:, j] * norm.target_std[j] + norm.target_mean[j]
            phys_p = preds[:, j] * norm.target_std[j] + norm.target_mean[j]
            rows[(target, condition)] = regression_metrics(
                phys_p, phys_t, norm.target_std[j])
            traces[condition][target] = (phys_t, phys_p)

    report = MetricsReport(rows=rows, seed=cfg.seed,
                           config_digest=cfg.digest(),
                           wall_time=time.time() - t_start)
    return ExperimentResult(report=report, model=model, traces=traces,
                            history=history, empty_cluster_rate=empty_rate)


# ---------------------------------------------------------------------------
# report emission

METRICS_PREAMBLE = (
    "# MSE is on the normalized (unit-variance) training scale.\n"
    "# RMSE is in physical units; NRMSE = RMSE / (max(truth) - min(truth)).\n"
    "# R2 = 1 - SS_res/SS_tot; degenerate (constant-truth) cells print '-'.\n"
)


def _fmt(v):
    return "-" if v is None else "%.6g" % v


def format_metrics(report):
    lines = [METRICS_PREAMBLE
             + f"# seed={report.seed} config={report.config_digest}",
             "target,condition,mse,nrmse,rmse,r2"]
    for (target, condition), row in sorted(report.rows.items()):
        lines.append(",".join([target, condition, _fmt(row.mse),
                               _fmt(row.nrmse), _fmt(row.rmse),
                               _fmt(row.r2)]))
    return "\n".join(lines) + "\n"


def emit_report(report, traces, out_dir, plots=True):
    """Write metrics.csv, per-condition trace files, plots, and a run log."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(format_metrics(report))
        for condition, per_target in sorted(traces.items()):
            lines = ["frame," + ",".join(
                f"{t}_true,{t}_pred,{t}_true_cum,{t}_pred_cum"
                for t in TARGETS)]
            n = len(next(iter(per_target.values()))[0])
            cums = {t: (np.cumsum(v[0]), np.cumsum(v[1]))
                    for t, v in per_target.items()}
            for i in range(n):
                cells = [str(i + 1)]
                for t in TARGETS:
                    truth, pred = per_target[t]
                    ct, cp = cums[t]
                    cells += ["%.9g" % truth[i], "%.9g" % pred[i],
                              "%.9g" % ct[i], "%.9g" % cp[i]]
                lines.append(",".join(cells))
            (out / f"traces_{condition}.csv").write_text(
                "\n".join(lines) + "\n")
        (out / "run.log").write_text(
            f"wall_time_seconds={report.wall_time:.3f}\n")
    except OSError as e:
        raise IoError(f"cannot write report: {e}") from None
    if plots:
        _plot_traces(traces, out)


def _plot_traces(traces, out):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    for condition, per_target in sorted(traces.items()):
        fig, axes = plt.subplots(len(TARGETS), 1, figsize=(10, 8),
                                 sharex=True)
        for ax, target in zip(np.atleast_1d(axes), TARGETS):
            truth, pred = per_target[target]
            ax.plot(truth, lw=0.8, label="truth")
            ax.plot(pred, lw=0.8, label="prediction")
            ax.set_ylabel(f"{target} [{TARGET_UNITS[target]}]")
            ax.legend(loc="upper right", fontsize=8)
        axes[-1].set_xlabel("frame")
        fig.suptitle(f"per-frame deltas, {condition} condition")
        fig.tight_layout()
        fig.savefig(out / f"plot_{condition}.png", dpi=100)
        plt.close(fig)
