"""Corpus-level studies: patch-size sweep, per-IMF attribution, cross-region
transfer and attribution-map rendering.

Every run is a pure function of its :class:`ExperimentConfig` and seeds.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import convnet
from .convnet import NetConfig, Phase, TrainSchedule
from .density import fit_kde, mle_attribute_batch
from .emd import SiftParams, decompose
from .metrics import ScoreReport, aggregate, confusion, scores
from .patching import (PatchSpec, RegionClass, SplitSource, choose_test_paintings,
                       classify_fraction, foreground_fraction, patch_blocks, resize_batch,
                       split_dataset)
from .surface_io import (DetrendParams, NormalizeParams, detrend, load_heightmap, normalize)

log = logging.getLogger(__name__)

# artist 1..4 -> red, orange, green, blue
ARTIST_COLORS = ((214, 39, 40), (255, 127, 14), (44, 160, 44), (31, 119, 180))

REFERENCE_LADDER = (10, 20, 40, 80, 100, 120, 140, 160, 180, 200, 224, 250, 300, 350, 400,
                    500, 600, 700, 800, 900, 1000, 1100, 1200)
REFERENCE_MAP_SHAPE = (3000, 2400)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    patch_sizes: tuple = (100,)
    trials: int | None = None
    ensemble_size: int | None = None
    seed: int = 0
    classifier: str = "cnn"
    channel: str = "height"
    net: NetConfig = NetConfig()
    schedule: TrainSchedule = TrainSchedule()
    jobs: int = 1
    sift: SiftParams = SiftParams()
    detrend_radius_px: int = 100
    normalize: NormalizeParams = NormalizeParams()
    manifest: str | None = None

    def __post_init__(self):
        if len(self.patch_sizes) < 1:
            raise ValueError("patch_sizes must not be empty")
        if self.trials is not None and self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.classifier not in ("cnn", "mle", "both"):
            raise ValueError(f"classifier must be cnn, mle or both (got {self.classifier!r})")
        parse_channel(self.channel)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Inverse of :meth:`ExperimentConfig.to_dict`."""
    doc = dict(doc)
    if "net" in doc:
        doc["net"] = NetConfig(**doc["net"])
    if "schedule" in doc:
        doc["schedule"] = TrainSchedule(tuple(Phase(**p) for p in doc["schedule"]["phases"]))
    if "sift" in doc:
        doc["sift"] = SiftParams(**doc["sift"])
    if "normalize" in doc:
        doc["normalize"] = NormalizeParams(**doc["normalize"])
    if "patch_sizes" in doc:
        doc["patch_sizes"] = tuple(int(s) for s in doc["patch_sizes"])
    return ExperimentConfig(**doc)


def parse_channel(channel: str):
    if channel in ("height", "pseudo-color"):
        return channel, None
    if channel.startswith("imf:"):
        k = int(channel.split(":", 1)[1])
        if k < 1:
            raise ValueError("IMF index must be >= 1")
        return "imf", k
    raise ValueError(f"unknown channel {channel!r}")


def derive_seed(seed: int, *parts) -> int:
    """Stable 32-bit seed from a base seed and component names / indices."""
    h = hashlib.sha256(repr((int(seed),) + tuple(parts)).encode()).digest()
    return int.from_bytes(h[:4], "little")


def ensemble_plan(side_px: int) -> tuple[int, int]:
    """(members per ensemble, repeated ensembles) for a patch size."""
    if side_px <= 10:
        return 10, 1
    if side_px <= 20:
        return 20, 1
    if side_px <= 40:
        return 20, 2
    if side_px <= 80:
        return 20, 4
    return 20, 5


def default_ladder(shape) -> tuple:
    """The 10..1200 px reference ladder (for 3000 x 2400 maps) rescaled to ``shape``.

    Sizes scale with the map, are floored at 10 px, and the largest patch
    covers at most a fifth of the map area.
    """
    h, w = shape
    scale = min(h / REFERENCE_MAP_SHAPE[0], w / REFERENCE_MAP_SHAPE[1])
    cap = int(np.sqrt(h * w / 5.0))
    sizes = sorted({min(cap, max(10, int(round(s * scale)))) for s in REFERENCE_LADDER})
    return tuple(sizes)


# ---------------------------------------------------------------------------
# corpus preparation


@dataclass
class PaintingData:
    painting_id: str
    artist_id: int
    pitch_um: float
    rel_um: np.ndarray
    normalized: np.ndarray
    mask: np.ndarray | None = None
    color: np.ndarray | None = None
    _imfs: dict = field(default_factory=dict, repr=False)

    def imf(self, k: int, sift: SiftParams) -> np.ndarray:
        key = (sift, k)
        if key not in self._imfs:
            stack = decompose(self.rel_um, sift)
            for i, m in enumerate(stack.imfs, start=1):
                self._imfs[(sift, i)] = m
            if key not in self._imfs:
                raise ValueError(f"{self.painting_id}: only {len(stack.imfs)} IMFs available")
        return self._imfs[key]


def prepare_paintings(source, detrend_radius_px: int = 100,
                      norm: NormalizeParams = NormalizeParams()) -> list:
    """Detrend and normalize every painting of a Corpus or manifest record list."""
    out = []
    paintings = getattr(source, "paintings", source)
    for p in paintings:
        if hasattr(p, "heightmap_path"):
            hmap = load_heightmap(p.heightmap_path)
            mask = (np.asarray(Image.open(p.mask_path)) > 0).astype(np.uint8) \
                if p.mask_path else None
            color = np.asarray(Image.open(p.pseudocolor_path).convert("RGB")) \
                if p.pseudocolor_path else None
        else:
            hmap, mask, color = p.heightmap, p.mask, p.color
        rel = detrend(hmap, DetrendParams(detrend_radius_px))
        out.append(PaintingData(
            p.painting_id, int(p.artist_id), hmap.pitch_um,
            rel.heights.astype(np.float64), normalize(rel, norm).values,
            None if mask is None else np.asarray(mask),
            None if color is None else np.asarray(color, dtype=np.float64) / 255.0))
    return sorted(out, key=lambda d: (d.artist_id, d.painting_id))


def channel_values(p: PaintingData, channel: str, config: ExperimentConfig) -> np.ndarray:
    kind, k = parse_channel(channel)
    if kind == "height":
        return p.normalized
    if kind == "pseudo-color":
        if p.color is None:
            raise ValueError(f"{p.painting_id} has no pseudo-colour map")
        return p.color
    span = config.normalize.hi_um - config.normalize.lo_um
    return p.imf(k, config.sift) / span


# ---------------------------------------------------------------------------
# single evaluation point


@dataclass
class PointResult:
    report: ScoreReport
    pairs: list
    test_paintings: dict
    n_train: int = 0
    n_test: int = 0


def _score_pairs(true, pred, shuffle_seed=None) -> tuple:
    true = np.asarray(true)
    if shuffle_seed is not None:
        true = np.random.default_rng(shuffle_seed).permutation(true)
    pairs = list(zip(true.tolist(), np.asarray(pred).tolist()))
    return scores(confusion(pairs)), pairs


def _fit_net_config(template: NetConfig, x_train: np.ndarray) -> NetConfig:
    std = float(x_train.std())
    return dataclasses.replace(template, in_channels=x_train.shape[-1],
                               input_offset=float(x_train.mean()),
                               input_scale=1.0 / std if std > 0 else 1.0)


def fit_cnn(config: ExperimentConfig, x_train, y_train, x_val, y_val, size: int, seed: int):
    if x_train.ndim == 3:
        x_train, x_val = x_train[..., None], x_val[..., None]
    net_cfg = _fit_net_config(config.net, x_train)
    return convnet.train_ensemble(net_cfg, x_train, y_train, x_val, y_val, size,
                                  config.schedule, seed, config.jobs)


def fit_mle(paintings, test_paintings: dict) -> list:
    pooled = {}
    for p in paintings:
        if p.painting_id != test_paintings[p.artist_id]:
            pooled.setdefault(p.artist_id, []).append(p.rel_um.ravel())
    return [fit_kde(np.concatenate(v), a) for a, v in sorted(pooled.items())]


def run_point(config: ExperimentConfig, paintings, patch_px: int, trial_seed: int,
              classifier: str | None = None, channel: str | None = None,
              ensemble_size: int | None = None, shuffle_labels: bool = False) -> PointResult:
    """Build a split, fit the classifier, predict the held-out paintings and score."""
    classifier = classifier or ("cnn" if config.classifier == "both" else config.classifier)
    channel = channel or config.channel
    by_artist = {}
    for p in paintings:
        by_artist.setdefault(p.artist_id, []).append(p)
    if any(len(v) < 3 for v in by_artist.values()):
        raise ValueError("every artist needs at least 3 paintings")
    if any(min(p.rel_um.shape) < patch_px for p in paintings):
        raise ValueError(f"patch size {patch_px} exceeds a painting dimension")
    test_paintings = choose_test_paintings(paintings, trial_seed)
    shuffle = derive_seed(trial_seed, "shuffle") if shuffle_labels else None

    if classifier == "mle":
        models = fit_mle(paintings, test_paintings)
        true, pred = [], []
        for p in paintings:
            if p.painting_id == test_paintings[p.artist_id]:
                blocks, _ = patch_blocks(p.rel_um, patch_px)
                w, _ = mle_attribute_batch(blocks, models)
                true += [p.artist_id] * len(w)
                pred += w.tolist()
        rep, pairs = _score_pairs(true, pred, shuffle)
        return PointResult(rep, pairs, test_paintings, 0, len(pairs))

    spec = PatchSpec(patch_px, config.net.input_side_px)
    sources = [SplitSource(p.painting_id, p.artist_id, channel_values(p, channel, config),
                           p.pitch_um, channel) for p in paintings]
    split = split_dataset(sources, spec, test_paintings, seed=trial_seed)
    xt, yt = convnet.stack_patches(split.train)
    xv, yv = convnet.stack_patches(split.validation)
    xs, ys = convnet.stack_patches(split.test)
    size = ensemble_size or config.ensemble_size or ensemble_plan(patch_px)[0]
    ens = fit_cnn(config, xt, yt, xv, yv, size, derive_seed(trial_seed, "ensemble"))
    probs = convnet.ensemble_predict(ens, xs)
    rep, pairs = _score_pairs(ys, np.argmax(probs, axis=1) + 1, shuffle)
    return PointResult(rep, pairs, test_paintings, len(xt), len(xs))


# ---------------------------------------------------------------------------
# sweeps


def _trials_for(config: ExperimentConfig, patch_px: int) -> int:
    return config.trials or ensemble_plan(patch_px)[1]


def _row(kind: str, channel: str, patch_px: int, rep: ScoreReport, **extra) -> dict:
    row = {"classifier": kind, "channel": channel, "patch_px": int(patch_px),
           "accuracy": rep.accuracy, "acc_std": rep.acc_std, "trials": rep.trials,
           "accuracies": list(rep.accuracies), "report": rep}
    row.update(extra)
    return row


def patch_size_sweep(config: ExperimentConfig, paintings, out_dir=None) -> list:
    """Mean/std accuracy and per-artist F1 for every patch size (and classifier)."""
    if len(config.patch_sizes) < 2:
        raise ValueError("a sweep needs at least two patch sizes")
    kinds = ("cnn", "mle") if config.classifier == "both" else (config.classifier,)
    rows = []
    for side in config.patch_sizes:
        for kind in kinds:
            reps = []
            for t in range(_trials_for(config, side)):
                seed = derive_seed(config.seed, "trial", int(side), t)
                reps.append(run_point(config, paintings, side, seed, kind).report)
                log.info("sweep %s %d px trial %d: %.3f", kind, side, t, reps[-1].accuracy)
            rows.append(_row(kind, config.channel, side, aggregate(reps)))
    if out_dir is not None:
        write_rows_csv(rows, Path(out_dir) / "sweep_patch.csv")
        plot_sweep(rows, Path(out_dir) / "sweep_patch.png")
    return rows


def imf_sweep(config: ExperimentConfig, paintings, imf_indices=(1, 2, 3, 4, 5),
              patch_sizes=None, include_height: bool = True, out_dir=None) -> list:
    """CNN accuracy with every patch replaced by a single IMF's values.

    IMFs come from whole-painting decompositions, so each mode sees context
    beyond its patch.  Points whose IMF is missing for some painting are
    skipped and reported with ``skipped=True``.
    """
    patch_sizes = tuple(patch_sizes or config.patch_sizes)
    channels = (["height"] if include_height else []) + [f"imf:{k}" for k in imf_indices]
    rows = []
    for side in patch_sizes:
        for ch in channels:
            reps = []
            try:
                for t in range(_trials_for(config, side)):
                    seed = derive_seed(config.seed, "trial", int(side), t)
                    reps.append(run_point(config, paintings, side, seed, "cnn", ch).report)
                    log.info("imf sweep %s %d px trial %d: %.3f", ch, side, t,
                             reps[-1].accuracy)
            except ValueError as exc:
                log.warning("skipping %s at %d px: %s", ch, side, exc)
                rows.append({"classifier": "cnn", "channel": ch, "patch_px": int(side),
                             "skipped": True, "reason": str(exc)})
                continue
            rows.append(_row("cnn", ch, side, aggregate(reps)))
    if out_dir is not None:
        write_rows_csv(rows, Path(out_dir) / "sweep_imf.csv")
        plot_imf(rows, Path(out_dir) / "sweep_imf.png")
    return rows


# ---------------------------------------------------------------------------
# cross-region transfer


def region_patches(p: PaintingData, values: np.ndarray, patch_px: int,
                   t_bg: float = 0.05, t_fg: float = 0.95):
    """Raw channel blocks of a painting grouped by region class."""
    if p.mask is None:
        raise ValueError(f"{p.painting_id} has no foreground mask")
    blocks, coords = patch_blocks(values, patch_px)
    mblocks, _ = patch_blocks(p.mask, patch_px)
    out = {r: [] for r in RegionClass}
    for b, m in zip(blocks, mblocks):
        out[classify_fraction(foreground_fraction(m), t_bg, t_fg)].append(b)
    return out


def cross_region_point(config: ExperimentConfig, paintings, patch_px: int, train_region,
                       test_region, channel: str, trial_seed: int,
                       ensemble_size: int | None = None) -> PointResult:
    """Train on one region of the training paintings; test on another region of the
    held-out painting.  Border patches are never used."""
    test_paintings = choose_test_paintings(paintings, trial_seed)
    rng = np.random.default_rng(derive_seed(trial_seed, "region-split"))
    target = config.net.input_side_px
    xtr, ytr, xva, yva, xte, yte = [], [], [], [], [], []
    for a in sorted({p.artist_id for p in paintings}):
        pool = []
        for p in (q for q in paintings if q.artist_id == a):
            groups = region_patches(p, channel_values(p, channel, config), patch_px)
            if p.painting_id == test_paintings[a]:
                xte += groups[test_region]
                yte += [a] * len(groups[test_region])
            else:
                pool += groups[train_region]
        if not pool:
            raise ValueError(f"artist {a} has no {train_region.value} training patches")
        order = rng.permutation(len(pool))
        n_val = max(1, int(round(0.1 * len(pool))))
        xva += [pool[i] for i in order[:n_val]]
        yva += [a] * n_val
        xtr += [pool[i] for i in order[n_val:]]
        ytr += [a] * (len(pool) - n_val)
    if not xte or not xtr:
        raise ValueError(f"empty region class for {train_region.value}->{test_region.value}")

    def prep(blocks):
        x = resize_batch(np.stack(blocks), target)
        return x[..., None] if x.ndim == 3 else x

    xt, xv, xs = prep(xtr), prep(xva), prep(xte)
    size = ensemble_size or config.ensemble_size or ensemble_plan(patch_px)[0]
    ens = fit_cnn(config, xt, np.array(ytr), xv, np.array(yva), size,
                  derive_seed(trial_seed, "ensemble"))
    probs = convnet.ensemble_predict(ens, xs)
    rep, pairs = _score_pairs(yte, np.argmax(probs, axis=1) + 1)
    return PointResult(rep, pairs, test_paintings, len(xt), len(xs))


def cross_region_experiment(config: ExperimentConfig, paintings, patch_px: int = 100,
                            channels=("height", "pseudo-color"), out_dir=None) -> list:
    """background->foreground and foreground->background transfer for each channel."""
    directions = ((RegionClass.BACKGROUND, RegionClass.FOREGROUND),
                  (RegionClass.FOREGROUND, RegionClass.BACKGROUND))
    rows = []
    for tr, te in directions:
        for ch in channels:
            reps, n_train, n_test = [], [], []
            for t in range(config.trials or 1):
                seed = derive_seed(config.seed, "cross-region", int(patch_px), t)
                res = cross_region_point(config, paintings, patch_px, tr, te, ch, seed)
                reps.append(res.report)
                n_train.append(res.n_train)
                n_test.append(res.n_test)
                log.info("cross-region %s->%s %s trial %d: %.3f", tr.value, te.value, ch, t,
                         res.report.accuracy)
            rows.append(_row("cnn", ch, patch_px, aggregate(reps), train_region=tr.value,
                             test_region=te.value, n_train=int(np.mean(n_train)),
                             n_test=int(np.mean(n_test))))
    if out_dir is not None:
        write_rows_csv(rows, Path(out_dir) / "cross_region.csv")
        plot_cross_region(rows, Path(out_dir) / "cross_region.png")
    return rows


# ---------------------------------------------------------------------------
# attribution maps


def confidence_alpha(conf):
    """Map max-probability confidence from the 4-class chance floor 0.25 to opacity."""
    return np.clip((np.asarray(conf, dtype=np.float64) - 0.25) / 0.75, 0.0, 1.0)


def render_attribution_map(base: np.ndarray, probs, coords, patch_px: int,
                           path=None) -> np.ndarray:
    """Tint each patch of a grayscale base with its winner's colour.

    ``base`` is the normalized height map in [0, 1]; ``probs`` holds one
    probability vector per patch at grid ``coords``.  Returns an RGBA uint8
    image the size of ``base`` and writes it to ``path`` when given.
    """
    base = np.asarray(base, dtype=np.float64)
    rgb = np.repeat(base[..., None] * 255.0, 3, axis=2)
    probs = np.asarray(probs, dtype=np.float64)
    palette = np.asarray(ARTIST_COLORS, dtype=np.float64)
    winners = np.argmax(probs, axis=1)
    alphas = confidence_alpha(probs.max(axis=1))
    for (r, c), k, a in zip(coords, winners, alphas):
        sl = (slice(r * patch_px, (r + 1) * patch_px), slice(c * patch_px, (c + 1) * patch_px))
        rgb[sl] = (1.0 - a) * rgb[sl] + a * palette[k]
    out = np.empty(base.shape + (4,), dtype=np.uint8)
    out[..., :3] = np.clip(np.rint(rgb), 0, 255)
    out[..., 3] = 255
    if path is not None:
        Image.fromarray(out, "RGBA").save(path)
    return out


def mle_probabilities(loglik: np.ndarray) -> np.ndarray:
    """Posterior over artists under a uniform prior from per-artist log-likelihoods."""
    z = loglik - loglik.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def painting_probabilities(p: PaintingData, model, patch_px: int, config: ExperimentConfig,
                           channel: str = "height"):
    """Per-patch probability vectors for a whole painting from an ensemble or MLE models."""
    if isinstance(model, convnet.EnsembleModel):
        blocks, coords = patch_blocks(channel_values(p, channel, config), patch_px)
        x = resize_batch(blocks, model.config.input_side_px)
        return convnet.ensemble_predict(model, x), coords
    blocks, coords = patch_blocks(p.rel_um, patch_px)
    _, ll = mle_attribute_batch(blocks, model)
    return mle_probabilities(ll), coords


# ---------------------------------------------------------------------------
# output


def write_rows_csv(rows, path) -> None:
    """Write result rows with fixed formatting (byte-stable for identical inputs)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ScoreReport.CSV_HEADER + ["classifier", "channel", "train_region", "test_region"]
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            if r.get("skipped"):
                continue
            cid = f"{r['classifier']}:{r['channel']}"
            w.writerow(r["report"].csv_row(cid, r["patch_px"])
                       + [r["classifier"], r["channel"], r.get("train_region", ""),
                          r.get("test_region", "")])
    tmp.replace(path)


def rows_summary(rows) -> list:
    out = []
    for r in rows:
        d = {k: v for k, v in r.items() if k != "report"}
        if "report" in r:
            d["f1"] = [round(float(v), 6) for v in r["report"].f1]
        out.append(d)
    return out


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_sweep(rows, path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind, style in (("cnn", "-"), ("mle", "--")):
        sel = [r for r in rows if r["classifier"] == kind and not r.get("skipped")]
        if not sel:
            continue
        xs = [r["patch_px"] for r in sel]
        ax.errorbar(xs, [r["accuracy"] for r in sel], yerr=[r["acc_std"] for r in sel],
                    color="k", ls=style, lw=2, capsize=3, label=f"{kind} accuracy")
        if kind == "cnn":
            for i, col in enumerate(ARTIST_COLORS):
                ax.plot(xs, [r["report"].f1[i] for r in sel], color=np.array(col) / 255,
                        lw=1, label=f"F1 artist {i + 1}")
    ax.axhline(0.25, color="grey", lw=0.5)
    ax.set_xscale("log")
    ax.set_xlabel("patch side (px)")
    ax.set_ylabel("accuracy / F1")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_imf(rows, path) -> None:
    plt = _plt()
    sel = [r for r in rows if not r.get("skipped")]
    sizes = sorted({r["patch_px"] for r in sel})
    chans = list(dict.fromkeys(r["channel"] for r in sel))
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(len(sizes), 1)
    for j, s in enumerate(sizes):
        vals = [next((r["accuracy"] for r in sel if r["channel"] == c and r["patch_px"] == s),
                     np.nan) for c in chans]
        errs = [next((r["acc_std"] for r in sel if r["channel"] == c and r["patch_px"] == s),
                     0.0) for c in chans]
        ax.bar(np.arange(len(chans)) + j * width, vals, width, yerr=errs, label=f"{s} px")
    ax.set_xticks(np.arange(len(chans)) + 0.4 - width / 2)
    ax.set_xticklabels(chans)
    ax.axhline(0.25, color="grey", lw=0.5)
    ax.set_ylabel("mean accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_cross_region(rows, path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 4))
    labels = []
    for i, r in enumerate(rows):
        col = "tab:blue" if r["channel"] == "height" else "tab:red"
        ax.bar(i, r["accuracy"], yerr=r["acc_std"], color=col)
        labels.append(f"{r['train_region'][:2]}->{r['test_region'][:2]}\n{r['channel']}")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.axhline(0.25, color="grey", lw=0.5)
    ax.set_ylabel("accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
