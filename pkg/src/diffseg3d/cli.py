"""Command-line pipeline.

Every command works inside one run directory (``--out``)::

    dataset/    generate          volumes, labels, manifest.tsv
    diffusion/  train-diffusion   model.hdt, loss.tsv, epoch_loss.tsv
    features/   extract-features  one multi-channel volume per dataset volume
    seg/        train-seg         model.hdt, log.tsv, run_manifest.json
    eval/       evaluate          report.tsv, report.json
    baseline/   baseline          predictions + report.tsv, report.json

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from pydantic import ValidationError

from . import autodiff as ad
from .baselines import kmeans_segment
from .config import RunConfig, load_config, stream_seed
from .diffusion import DiffusionModel, DiffusionTrainConfig, extract_features, new_diffusion_model, train_diffusion
from .metrics import evaluate_hard, evaluate_level, EvalReport
from .segment import LossWeights, SegModel, SegTrainConfig, train_segmentation
from .synth import LEVEL_K, PlacementError, generate_dataset
from .unet import UNet3DConfig
from .volio import ManifestRecord, export_slices, read_manifest, read_volume, write_manifest, write_volume

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("diffseg3d")


class MissingPrerequisite(Exception):
    pass


class ConfigError(Exception):
    pass


def _stage_dir(out: Path, name: str) -> Path:
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _echo_config(cfg: RunConfig, stage: Path) -> None:
    (stage / "config.resolved.yaml").write_text(cfg.resolved_yaml())


def _attach_file_log(stage: Path) -> logging.Handler:
    handler = logging.FileHandler(stage / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"missing {what}: {path}")
    return path


# -- dataset -----------------------------------------------------------------

def _load_dataset(out: Path) -> tuple[Path, list[ManifestRecord]]:
    ds = out / "dataset"
    return ds, read_manifest(_require(ds / "manifest.tsv", "dataset manifest (run `generate` first)"))


def _split(records, split):
    return [r for r in records if r.split == split]


def cmd_generate(cfg: RunConfig, out: Path) -> None:
    stage = _stage_dir(out, "dataset")
    seed = stream_seed(cfg.seed, "dataset")
    records = []
    for split, scene, vol in generate_dataset(cfg.dataset.scene(), cfg.dataset.count, seed):
        i = len(records)
        names = {"image": f"vol_{i:03d}_image.hdv", **{f"level{l}": f"vol_{i:03d}_level{l}.hdv" for l in (1, 2, 3)}}
        write_volume(stage / names["image"], vol.image)
        for level in (1, 2, 3):
            write_volume(stage / names[f"level{level}"], vol.labels[level])
        records.append(ManifestRecord(index=i, split=split, seed=scene.seed, variant=scene.variant, **names))
    write_manifest(stage / "manifest.tsv", records)
    _echo_config(cfg, stage)
    log.info("generated %d volumes", len(records))


# -- diffusion ---------------------------------------------------------------

def _unet_config(cfg: RunConfig) -> UNet3DConfig:
    return UNet3DConfig(base_channels=cfg.diffusion.base_channels, channel_mults=cfg.diffusion.channel_mults)


def _load_diffusion(cfg: RunConfig, out: Path) -> DiffusionModel:
    path = _require(out / "diffusion" / "model.hdt", "diffusion checkpoint (run `train-diffusion` first)")
    model = new_diffusion_model(_unet_config(cfg), cfg.diffusion.T, seed=0)
    model.net.load_state_dict(ad.load_checkpoint(path))
    model.net.eval()
    return model


def cmd_train_diffusion(cfg: RunConfig, out: Path) -> None:
    ds, records = _load_dataset(out)
    train = _split(records, "train")
    stage = _stage_dir(out, "diffusion")
    model = new_diffusion_model(_unet_config(cfg), cfg.diffusion.T, seed=stream_seed(cfg.seed, "diffusion-init"))

    def checkpoint(m: DiffusionModel, epoch: int) -> None:
        ad.save_checkpoint(stage / f"model_epoch{epoch:06d}.hdt", dict(m.net.state_dict()))

    train_diffusion(
        [read_volume(ds / r.image) for r in train],
        model,
        DiffusionTrainConfig(
            epochs=cfg.diffusion.epochs,
            batch_size=cfg.diffusion.batch_size,
            lr=cfg.diffusion.lr,
            seed=stream_seed(cfg.seed, "diffusion-train"),
            checkpoint_every=cfg.diffusion.checkpoint_every,
        ),
        checkpoint,
    )
    ad.save_checkpoint(stage / "model.hdt", dict(model.net.state_dict()))
    with open(stage / "loss.tsv", "w") as fh:
        fh.write("step\tloss\n")
        fh.writelines(f"{i + 1}\t{v!r}\n" for i, v in enumerate(model.loss_history))
    with open(stage / "epoch_loss.tsv", "w") as fh:
        fh.write("epoch\tloss\n")
        fh.writelines(f"{i + 1}\t{v!r}\n" for i, v in enumerate(model.epoch_losses))
    _echo_config(cfg, stage)


# -- features ----------------------------------------------------------------

def _feature_file(out: Path, rec: ManifestRecord) -> Path:
    return out / "features" / f"vol_{rec.index:03d}_features.hdv"


def _features_for(cfg: RunConfig, out: Path, ds: Path, recs, model_cache: dict) -> list[np.ndarray]:
    feats = []
    for r in recs:
        f = _feature_file(out, r)
        if f.exists():
            feats.append(read_volume(f, squeeze=False))
            continue
        if "model" not in model_cache:
            model_cache["model"] = _load_diffusion(cfg, out)
        feats.append(_extract(cfg, model_cache["model"], read_volume(ds / r.image)))
    return feats


def _extract(cfg: RunConfig, model: DiffusionModel, image: np.ndarray) -> np.ndarray:
    return extract_features(model, image, cfg.segmentation.t, cfg.segmentation.stages,
                            seed=stream_seed(cfg.seed, "feature-noise"))


def cmd_extract_features(cfg: RunConfig, out: Path) -> None:
    ds, records = _load_dataset(out)
    model = _load_diffusion(cfg, out)
    stage = _stage_dir(out, "features")
    for r in records:
        write_volume(_feature_file(out, r), _extract(cfg, model, read_volume(ds / r.image)))
    _echo_config(cfg, stage)


# -- segmentation ------------------------------------------------------------

def _seg_train_config(cfg: RunConfig) -> SegTrainConfig:
    s = cfg.segmentation
    return SegTrainConfig(
        k=s.k,
        weights=LossWeights(s.weights.visual, s.weights.feature, s.weights.invariance),
        gamma_range=s.gamma_range,
        epochs=s.epochs,
        lr=s.lr,
        base_channels=s.base_channels,
        standardize_features=s.standardize_features,
        seed=stream_seed(cfg.seed, "seg-train"),
    )


def cmd_train_seg(cfg: RunConfig, out: Path) -> None:
    ds, records = _load_dataset(out)
    train = _split(records, "train")
    if not all(_feature_file(out, r).exists() for r in train):
        _require(out / "diffusion" / "model.hdt", "features or diffusion checkpoint (run `extract-features`)")
    images = [read_volume(ds / r.image) for r in train]
    feats = _features_for(cfg, out, ds, train, {})
    stage = _stage_dir(out, "seg")
    result = train_segmentation(images, feats, _seg_train_config(cfg))
    ad.save_checkpoint(stage / "model.hdt", dict(result.model.state_dict()))
    cols = ["epoch", "L_v", "L_f", "L_inv", "total", "selection"]
    with open(stage / "log.tsv", "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in result.log:
            fh.write("\t".join(repr(row[c]) for c in cols) + "\n")
    manifest = {
        "config": yaml.safe_load(cfg.resolved_yaml()),
        "seeds": {name: stream_seed(cfg.seed, name) for name in ("seg-train", "feature-noise", "diffusion-train")},
        "feature_standardization": cfg.segmentation.standardize_features,
        "feature_channels": int(feats[0].shape[0]),
        "best_epoch": result.best_epoch,
        "best_selection_score": result.best_score,
    }
    (stage / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _echo_config(cfg, stage)


def _load_seg(cfg: RunConfig, out: Path) -> SegModel:
    path = _require(out / "seg" / "model.hdt", "segmentation checkpoint (run `train-seg` first)")
    model = SegModel(cfg.segmentation.k, cfg.segmentation.base_channels)
    model.load_state_dict(ad.load_checkpoint(path))
    model.eval()
    return model


# -- evaluation --------------------------------------------------------------

def _write_report(report: EvalReport, cfg: RunConfig, stage: Path) -> None:
    (stage / "report.tsv").write_text(report.to_table())
    payload = {"config": yaml.safe_load(cfg.resolved_yaml()), "report": report.to_dict()}
    (stage / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    _echo_config(cfg, stage)
    log.info("level %d K=%d mean dice %.4f mean hd95 %.3f", report.level, report.k,
             report.mean_dice, report.mean_hd95)


def cmd_evaluate(cfg: RunConfig, out: Path, predictions: Path | None = None) -> None:
    ds, records = _load_dataset(out)
    recs = _split(records, cfg.eval.split)
    level = cfg.eval.level
    if predictions is not None:
        pairs = []
        for r in recs:
            pred = read_volume(_require(predictions / f"vol_{r.index:03d}.hdv", "prediction volume"))
            pairs.append((r.image, pred, read_volume(ds / r.label_file(level))))
        k = max(cfg.segmentation.k, int(max(int(p.max()) for _, p, _ in pairs)) + 1)
        report = evaluate_hard(pairs, level, k, cfg.eval.spacing)
    else:
        model = _load_seg(cfg, out)
        vols = [(r.image, read_volume(ds / r.image), {level: read_volume(ds / r.label_file(level))}) for r in recs]
        report = evaluate_level(model.predict, vols, level, cfg.segmentation.k, cfg.eval.spacing)
    _write_report(report, cfg, _stage_dir(out, "eval"))


def cmd_baseline(cfg: RunConfig, out: Path) -> None:
    ds, records = _load_dataset(out)
    recs = _split(records, cfg.eval.split)
    level = cfg.eval.level
    k = LEVEL_K[level]
    stage = _stage_dir(out, "baseline")
    pred_dir = _stage_dir(stage, "predictions")
    b = cfg.baseline
    if b.source == "features":
        if not all(_feature_file(out, r).exists() for r in recs):
            _require(out / "diffusion" / "model.hdt", "features or diffusion checkpoint (run `extract-features`)")
        inputs = _features_for(cfg, out, ds, recs, {})
    else:
        inputs = [read_volume(ds / r.image) for r in recs]
    pairs = []
    seed = stream_seed(cfg.seed, "baseline")
    for r, x in zip(recs, inputs):
        labels = kmeans_segment(x, k, seed=seed, restarts=b.restarts, max_iter=b.max_iter, tol=b.tol)
        write_volume(pred_dir / f"vol_{r.index:03d}.hdv", labels.astype(np.uint8))
        pairs.append((r.image, labels, read_volume(ds / r.label_file(level))))
    _write_report(evaluate_hard(pairs, level, k, cfg.eval.spacing), cfg, stage)


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffseg3d", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML run configuration")
        sp.add_argument("--out", type=Path, required=True, help="run directory")
        sp.add_argument("--seed", type=int, help="override the global seed")
        sp.add_argument("-v", "--verbose", action="store_true")

    for name in ("generate", "train-diffusion", "extract-features", "train-seg", "baseline"):
        common(sub.add_parser(name))
    ev = sub.add_parser("evaluate")
    common(ev)
    ev.add_argument("--predictions", type=Path, help="directory of precomputed hard masks vol_NNN.hdv")
    ex = sub.add_parser("export-slices")
    ex.add_argument("volume", type=Path)
    ex.add_argument("--axis", type=int, default=0)
    ex.add_argument("--indices", type=int, nargs="+", required=True)
    ex.add_argument("--out", type=Path, required=True)
    ex.add_argument("-v", "--verbose", action="store_true")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "train-diffusion": cmd_train_diffusion,
    "extract-features": cmd_extract_features,
    "train-seg": cmd_train_seg,
    "baseline": cmd_baseline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stdout, force=True)
    logging.getLogger().setLevel(logging.INFO)
    if args.command == "export-slices":
        try:
            if not args.volume.exists():
                raise MissingPrerequisite(f"missing volume file: {args.volume}")
            for path in export_slices(args.volume, args.axis, args.indices, args.out):
                print(path)
        except MissingPrerequisite as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_MISSING
        except (ValueError, IndexError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK

    try:
        cfg = load_config(args.config, args.seed)
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationError as e:
        print("config error:", file=sys.stderr)
        for err in e.errors():
            loc = ".".join(str(x) for x in err["loc"]) or "<root>"
            print(f"  {loc}: {err['msg']}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, yaml.YAMLError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"error: cannot create output directory {args.out}: {e}", file=sys.stderr)
        return EXIT_CONFIG

    stage_name = {"generate": "dataset", "train-diffusion": "diffusion", "extract-features": "features",
                  "train-seg": "seg", "evaluate": "eval", "baseline": "baseline"}[args.command]
    handler = None
    try:
        torch.manual_seed(stream_seed(cfg.seed, "diffusion-init"))
        if args.command == "evaluate":
            _require(Path(args.out) / "dataset" / "manifest.tsv", "dataset manifest (run `generate` first)")
            handler = _attach_file_log(_stage_dir(args.out, stage_name))
            cmd_evaluate(cfg, args.out, args.predictions)
        else:
            if args.command != "generate":
                _require(Path(args.out) / "dataset" / "manifest.tsv", "dataset manifest (run `generate` first)")
            handler = _attach_file_log(_stage_dir(args.out, stage_name))
            COMMANDS[args.command](cfg, args.out)
    except MissingPrerequisite as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except PlacementError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ad.DivergenceError, RuntimeError, ValueError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
