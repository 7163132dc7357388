"""Command-line entry point: ``brushforge <subcommand> [flags]``.

Every run writes ``run_manifest.json`` next to its outputs, listing the
resolved config, seeds, input digests and produced files.  A JSON config
file (``--config``) supplies defaults; explicit flags override it.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, convnet, experiments, synth
from .convnet import NetConfig
from .emd import decompose, length_scale
from .experiments import ExperimentConfig, config_from_dict, derive_seed
from .patching import (PatchSpec, SplitSource, choose_test_paintings, load_manifest,
                       split_dataset)
from .surface_io import HeightMap, save_heightmap

log = logging.getLogger("brushforge")

SUBCOMMANDS = ("synth", "ingest", "patchify", "emd", "fit-mle", "train", "eval",
               "sweep-patch", "sweep-imf", "cross-region", "render-map")

# config keys accepted besides the ExperimentConfig fields
EXTRA_KEYS = {"preset", "paintings_per_artist", "canvas", "imf_indices", "painting", "model"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="brushforge",
                                description="Surface-topography artist attribution toolkit.")
    p.add_argument("--version", action="version", version=f"brushforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, help_, *extra):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="global seed")
        sp.add_argument("--jobs", type=int, help="worker processes")
        sp.add_argument("--config", help="JSON config file (flags override it)")
        for flag in extra:
            FLAGS[flag](sp)
        return sp

    add("synth", "synthesize a corpus", "preset")
    add("ingest", "detrend and normalize a corpus", "manifest")
    add("patchify", "build a train/validation/test split", "manifest", "patch", "channel")
    add("emd", "decompose every painting into IMFs", "manifest")
    add("fit-mle", "fit per-artist height densities", "manifest")
    add("train", "train a CNN ensemble", "manifest", "patch", "ensemble", "channel")
    add("eval", "score held-out paintings", "manifest", "patch", "classifier", "channel",
        "model")
    add("sweep-patch", "accuracy versus patch size", "manifest", "patch", "ensemble",
        "trials", "classifier", "channel")
    add("sweep-imf", "accuracy per IMF", "manifest", "patch", "ensemble", "trials")
    add("cross-region", "background/foreground transfer", "manifest", "patch", "ensemble",
        "trials")
    add("render-map", "render an attribution map", "manifest", "patch", "classifier",
        "channel", "model", "painting")
    return p


FLAGS = {
    "preset": lambda sp: sp.add_argument("--preset", choices=synth.PRESETS),
    "manifest": lambda sp: sp.add_argument("--manifest", help="corpus manifest.json"),
    "patch": lambda sp: sp.add_argument("--patch-px", type=int, nargs="+", dest="patch_px",
                                        help="patch side(s) in pixels"),
    "ensemble": lambda sp: sp.add_argument("--ensemble", type=int, help="networks per ensemble"),
    "trials": lambda sp: sp.add_argument("--trials", type=int, help="repeat trials per point"),
    "classifier": lambda sp: sp.add_argument("--classifier", choices=("cnn", "mle", "both")),
    "channel": lambda sp: sp.add_argument("--channel", help="height | pseudo-color | imf:k"),
    "model": lambda sp: sp.add_argument("--model", help="directory written by `train`"),
    "painting": lambda sp: sp.add_argument("--painting", help="painting id to render"),
}


def resolve_config(args) -> tuple[ExperimentConfig, dict]:
    """Merge config file and flags into an ExperimentConfig plus extra settings."""
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ConfigError("config: top level must be a JSON object")
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in doc:
        if key not in fields and key not in EXTRA_KEYS:
            raise ConfigError(f"config: unknown field {key!r}")
    extra = {k: doc.pop(k) for k in list(doc) if k in EXTRA_KEYS}
    overrides = {"seed": args.seed, "jobs": getattr(args, "jobs", None),
                 "manifest": getattr(args, "manifest", None),
                 "ensemble_size": getattr(args, "ensemble", None),
                 "trials": getattr(args, "trials", None),
                 "classifier": getattr(args, "classifier", None),
                 "channel": getattr(args, "channel", None)}
    if getattr(args, "patch_px", None):
        overrides["patch_sizes"] = list(args.patch_px)
    doc.update({k: v for k, v in overrides.items() if v is not None})
    for k in ("preset", "model", "painting"):
        if getattr(args, k, None) is not None:
            extra[k] = getattr(args, k)
    try:
        cfg = config_from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from exc
    if cfg.jobs < 1:
        raise ConfigError("config: field 'jobs' must be >= 1")
    return cfg, extra


# ---------------------------------------------------------------------------
# helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects outputs and inputs of one invocation for the run manifest."""

    def __init__(self, out: Path):
        self.out = out
        self.outputs: list = []
        self.inputs: dict = {}

    def add_output(self, path) -> Path:
        path = Path(path)
        self.outputs.append(str(path.relative_to(self.out)))
        return path

    def add_input(self, path) -> None:
        self.inputs[str(path)] = _sha256(path)


def _need_manifest(cfg: ExperimentConfig, run: Run):
    if not cfg.manifest:
        raise ConfigError("config: field 'manifest' is required for this subcommand")
    records = load_manifest(cfg.manifest)
    run.add_input(cfg.manifest)
    for r in records:
        for p in (r.heightmap_path, r.mask_path, r.pseudocolor_path):
            if p:
                run.add_input(p)
    return records


def _paintings(cfg: ExperimentConfig, run: Run):
    return experiments.prepare_paintings(_need_manifest(cfg, run), cfg.detrend_radius_px,
                                         cfg.normalize)


def _write_json(run: Run, name: str, doc) -> Path:
    path = run.out / name
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    tmp.replace(path)
    return run.add_output(path)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"not serializable: {type(o).__name__}")


def _single_patch(cfg: ExperimentConfig) -> int:
    return int(cfg.patch_sizes[0])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg, extra, run):
    preset = extra.get("preset", "separable")
    canvas = synth.CanvasSpec(**extra.get("canvas", {}))
    corpus = synth.make_corpus(synth.preset_profiles(preset), canvas,
                               int(extra.get("paintings_per_artist", 3)), cfg.seed, cfg.jobs)
    manifest = synth.write_corpus(corpus, run.out)
    for p in sorted(run.out.rglob("*")):
        if p.is_file() and p != manifest:
            run.add_output(p)
    run.add_output(manifest)
    return {"preset": preset}


def cmd_ingest(cfg, extra, run):
    rows = []
    d = run.out / "ingested"
    d.mkdir(exist_ok=True)
    for p in _paintings(cfg, run):
        rel = HeightMap(p.rel_um.astype(np.float32), p.pitch_um,
                        {"detrend_radius_px": str(cfg.detrend_radius_px)})
        topo = run.add_output(d / f"{p.painting_id}_rel.topo")
        save_heightmap(rel, topo)
        norm = HeightMap(p.normalized.astype(np.float32), p.pitch_um)
        png = run.add_output(d / f"{p.painting_id}_norm.png")
        save_heightmap(norm, png, format="png16", z_range=(0.0, 1.0))
        run.add_output(png.with_suffix(".topo.json"))
        rows.append({"painting_id": p.painting_id, "artist_id": p.artist_id,
                     "relative_path": topo.name, "normalized_path": png.name})
    _write_json(run, "ingested/ingest.json", {"paintings": rows})
    return {}


def cmd_patchify(cfg, extra, run):
    paintings = _paintings(cfg, run)
    side = _single_patch(cfg)
    spec = PatchSpec(side, cfg.net.input_side_px)
    sources = [SplitSource(p.painting_id, p.artist_id,
                           experiments.channel_values(p, cfg.channel, cfg), p.pitch_um,
                           cfg.channel) for p in paintings]
    split = split_dataset(sources, spec, choose_test_paintings(paintings, cfg.seed),
                          seed=cfg.seed)
    path = run.add_output(run.out / "split.json")
    path.write_text(split.to_json())
    arrays = {}
    for name in ("train", "validation", "test"):
        x, y = convnet.stack_patches(getattr(split, name))
        arrays[f"x_{name}"], arrays[f"y_{name}"] = x, y
    npz = run.add_output(run.out / "patches.npz")
    with open(npz, "wb") as fh:
        np.savez(fh, **arrays)
    return {"counts": {k: int(len(v)) for k, v in arrays.items() if k.startswith("y_")}}


def cmd_emd(cfg, extra, run):
    d = run.out / "imfs"
    d.mkdir(exist_ok=True)
    lines = ["painting_id,imf_index,length_mm"]
    for p in _paintings(cfg, run):
        stack = decompose(p.rel_um, cfg.sift)
        for k, imf in enumerate(stack.imfs, start=1):
            hm = HeightMap(imf.astype(np.float32), p.pitch_um, {"imf_index": str(k)})
            save_heightmap(hm, run.add_output(d / f"{p.painting_id}_imf{k}.topo"))
            lo, hi = float(imf.min()), float(imf.max())
            png = run.add_output(d / f"{p.painting_id}_imf{k}.png")
            save_heightmap(hm, png, format="png16", z_range=(lo, hi if hi > lo else lo + 1))
            run.add_output(png.with_suffix(".topo.json"))
            est = length_scale(imf, p.pitch_um, k)
            lines.append(f"{p.painting_id},{k},{est.length_mm:.6f}")
    path = run.add_output(run.out / "length_scales.csv")
    path.write_text("\n".join(lines) + "\n")
    return {}


def cmd_fit_mle(cfg, extra, run):
    paintings = _paintings(cfg, run)
    test = choose_test_paintings(paintings, cfg.seed)
    models = experiments.fit_mle(paintings, test)
    for m in models:
        m.to_csv(run.add_output(run.out / f"density_artist{m.artist_id}.csv"))
    _write_json(run, "mle_models.json", {
        "test_paintings": {str(k): v for k, v in sorted(test.items())},
        "models": [{"artist_id": m.artist_id, "sample_count": m.sample_count,
                    "bandwidth_um": m.bandwidth_um} for m in models]})
    return {"test_paintings": test}


def _train_arrays(cfg, paintings, side, seed):
    spec = PatchSpec(side, cfg.net.input_side_px)
    sources = [SplitSource(p.painting_id, p.artist_id,
                           experiments.channel_values(p, cfg.channel, cfg), p.pitch_um,
                           cfg.channel) for p in paintings]
    test = choose_test_paintings(paintings, seed)
    split = split_dataset(sources, spec, test, seed=seed)
    return split, test


def cmd_train(cfg, extra, run):
    paintings = _paintings(cfg, run)
    side = _single_patch(cfg)
    split, test = _train_arrays(cfg, paintings, side, cfg.seed)
    xt, yt = convnet.stack_patches(split.train)
    xv, yv = convnet.stack_patches(split.validation)
    size = cfg.ensemble_size or experiments.ensemble_plan(side)[0]
    ens = experiments.fit_cnn(cfg, xt, yt, xv, yv, size, derive_seed(cfg.seed, "ensemble"))
    for i, (net, lg) in enumerate(zip(ens.members, ens.logs)):
        convnet.save_checkpoint(net, run.add_output(run.out / f"member{i:02d}.cnnw"))
        convnet.write_epoch_log(lg, run.add_output(run.out / f"member{i:02d}_log.csv"))
    (run.out / "net_config.json").write_text(ens.config.to_json() + "\n")
    run.add_output(run.out / "net_config.json")
    _write_json(run, "model.json", {
        "patch_px": side, "channel": cfg.channel, "members": len(ens.members),
        "seeds": list(ens.seeds), "test_paintings": {str(k): v for k, v in test.items()}})
    return {"ensemble_seeds": list(ens.seeds)}


def load_model_dir(path):
    path = Path(path)
    info = json.loads((path / "model.json").read_text())
    net_cfg = NetConfig(**json.loads((path / "net_config.json").read_text()))
    members = [convnet.load_checkpoint(path / f"member{i:02d}.cnnw", net_cfg)
               for i in range(info["members"])]
    ens = convnet.EnsembleModel(members, net_cfg, list(info["seeds"]), [])
    info["test_paintings"] = {int(k): v for k, v in info["test_paintings"].items()}
    return ens, info


def cmd_eval(cfg, extra, run):
    paintings = _paintings(cfg, run)
    kind = "mle" if cfg.classifier == "mle" else "cnn"
    side = _single_patch(cfg)
    if kind == "mle":
        res = experiments.run_point(cfg, paintings, side, cfg.seed, "mle")
        rep = res.report
    else:
        if "model" not in extra:
            raise ConfigError("config: field 'model' is required to evaluate a cnn")
        ens, info = load_model_dir(extra["model"])
        side, channel = int(info["patch_px"]), info["channel"]
        true, pred = [], []
        for p in paintings:
            if p.painting_id == info["test_paintings"][p.artist_id]:
                probs, _ = experiments.painting_probabilities(p, ens, side, cfg, channel)
                true += [p.artist_id] * len(probs)
                pred += (np.argmax(probs, axis=1) + 1).tolist()
        rep, _ = experiments._score_pairs(true, pred)
    rows = [experiments._row(kind, cfg.channel, side, rep)]
    experiments.write_rows_csv(rows, run.add_output(run.out / "metrics.csv"))
    return {"accuracy": rep.accuracy}


def cmd_sweep_patch(cfg, extra, run):
    paintings = _paintings(cfg, run)
    if len(cfg.patch_sizes) < 2:
        # a single size cannot be swept: fall back to the scaled ladder
        cfg = dataclasses.replace(cfg, patch_sizes=experiments.default_ladder(
            paintings[0].rel_um.shape))
    rows = experiments.patch_size_sweep(cfg, paintings, run.out)
    run.add_output(run.out / "sweep_patch.csv")
    run.add_output(run.out / "sweep_patch.png")
    _write_json(run, "sweep_patch.json", experiments.rows_summary(rows))
    return {"patch_sizes": list(cfg.patch_sizes)}


def cmd_sweep_imf(cfg, extra, run):
    paintings = _paintings(cfg, run)
    rows = experiments.imf_sweep(cfg, paintings, tuple(extra.get("imf_indices", (1, 2, 3, 4, 5))),
                                 out_dir=run.out)
    run.add_output(run.out / "sweep_imf.csv")
    run.add_output(run.out / "sweep_imf.png")
    _write_json(run, "sweep_imf.json", experiments.rows_summary(rows))
    return {}


def cmd_cross_region(cfg, extra, run):
    paintings = _paintings(cfg, run)
    rows = experiments.cross_region_experiment(cfg, paintings, _single_patch(cfg),
                                               out_dir=run.out)
    run.add_output(run.out / "cross_region.csv")
    run.add_output(run.out / "cross_region.png")
    _write_json(run, "cross_region.json", experiments.rows_summary(rows))
    return {}


def cmd_render_map(cfg, extra, run):
    paintings = _paintings(cfg, run)
    channel, side = cfg.channel, _single_patch(cfg)
    if cfg.classifier == "mle":
        test = choose_test_paintings(paintings, cfg.seed)
        model = experiments.fit_mle(paintings, test)
    else:
        if "model" not in extra:
            raise ConfigError("config: field 'model' is required to render a cnn map")
        model, info = load_model_dir(extra["model"])
        side, channel, test = int(info["patch_px"]), info["channel"], info["test_paintings"]
    wanted = extra.get("painting")
    targets = [p for p in paintings
               if (p.painting_id == wanted if wanted else p.painting_id == test[p.artist_id])]
    if not targets:
        raise ConfigError(f"config: painting {wanted!r} not in manifest")
    for p in targets:
        probs, coords = experiments.painting_probabilities(p, model, side, cfg, channel)
        experiments.render_attribution_map(p.normalized, probs, coords, side,
                                           run.add_output(run.out / f"{p.painting_id}_map.png"))
    return {}


def precheck(command: str, cfg: ExperimentConfig, extra: dict) -> None:
    """Reject incomplete configurations before anything is written."""
    if command != "synth":
        if not cfg.manifest:
            raise ConfigError("config: field 'manifest' is required for this subcommand")
        if not Path(cfg.manifest).is_file():
            raise ConfigError(f"config: field 'manifest': no such file {cfg.manifest}")
    if command in ("eval", "render-map") and cfg.classifier != "mle" and "model" not in extra:
        raise ConfigError(f"config: field 'model' is required to {command} a cnn")
    if command == "synth" and extra.get("preset", "separable") not in synth.PRESETS:
        raise ConfigError(f"config: field 'preset': unknown preset {extra['preset']!r}")


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "patchify": cmd_patchify,
            "emd": cmd_emd, "fit-mle": cmd_fit_mle, "train": cmd_train, "eval": cmd_eval,
            "sweep-patch": cmd_sweep_patch, "sweep-imf": cmd_sweep_imf,
            "cross-region": cmd_cross_region, "render-map": cmd_render_map}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("BRUSHFORGE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        cfg, extra = resolve_config(args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"brushforge: {exc}", file=sys.stderr)
        return 2
    try:
        precheck(args.command, cfg, extra)
    except ConfigError as exc:
        print(f"brushforge: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(out)
    t0 = time.perf_counter()
    try:
        info = COMMANDS[args.command](cfg, extra, run)
    except ConfigError as exc:
        print(f"brushforge: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"brushforge {args.command}: {exc}", file=sys.stderr)
        return 1
    missing = [o for o in run.outputs if not (out / o).is_file()]
    if missing:
        print(f"brushforge {args.command}: missing outputs {missing}", file=sys.stderr)
        return 1
    manifest = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
                "config": cfg.to_dict(), "extra": extra, "seeds": {"global": cfg.seed, **info},
                "version": __version__, "inputs": run.inputs,
                "outputs": {o: _sha256(out / o) for o in run.outputs},
                "wall_clock_s": round(time.perf_counter() - t0, 3)}
    (out / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
