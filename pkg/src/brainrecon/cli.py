"""Operator surface: one executable with subcommands wiring the pipeline
(data generation, decoder/encoder training, reconstruction search,
evaluation, finite-library comparison, gradient verification).

Exit codes: 0 success, 2 bad config/flags, 3 missing or corrupt input
files, 4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import data as datamod
from . import decoder as decodermod
from . import encoder as encodermod
from . import metrics as metricsmod
from . import reconstructor as reconmod
from . import report as reportmod
from .data import DataError
from .generator import FiniteLibrary, GeneratorConfig, SyntheticGenerator

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_GRADCHECK = 4


class ConfigError(Exception):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "paths": {
        "dataset_dir": "dataset",
        "decoder_file": "decoder.json",
        "encoder_file": "encoder.json",
        "library_dir": None,
        "category_map": None,
        "output_dir": "out",
    },
    "generator": {
        "seed": 0,
        "n_fine_categories": 1000,
        "resolution": 64,
        "truncation": None,
    },
    "world": {
        "n_train": 400,
        "n_test": 20,
        "voxels_per_roi": 120,
        "noise_std": 1.0,
        "mask_radius": 1.0,
        "category_strength": 2.0,
    },
    "decoder": {
        "voxels_per_node": 100,
        "hidden_per_direction": 16,
        "dropout_rate": 0.5,
        "epochs": 30,
        "lr": 1e-2,
        "batch_size": 32,
        "validation_fraction": 0.0,
    },
    "encoder": {
        "channels": 8,
        "stages": 2,
        "epochs": 50,
        "lr": 2e-3,
        "batch_size": 32,
        "input_noise_std": 0.02,
        "weight_floor": 1e-3,
    },
    "search": {
        "batch": 64,
        "iterations": 25,
        "topk": 10,
        "mode": "predicted",
        "fixed_label": None,
        "truncation": None,
        "threshold": 0.27,
    },
    "library": {
        "size": 1000,
        "seed": 3,
    },
}

PAPER_SCALE_OVERRIDES = {
    "generator": {"resolution": 128},
    "world": {"n_train": 1750, "n_test": 120},
    "search": {"batch": 256, "iterations": 400, "topk": 10, "threshold": 0.27},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = "%s.%s" % (path, key) if path else key
        if key not in base:
            raise ConfigError("unknown config key: %s" % here)
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def resolve_config(config_path: str | None = None, seed: int | None = None,
                   paper_scale: bool = False,
                   overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path is not None:
        try:
            with open(config_path) as f:
                user = json.load(f)
        except OSError as e:
            raise FileNotFoundError("cannot read config file %s: %s"
                                    % (config_path, e))
        except json.JSONDecodeError as e:
            raise ConfigError("invalid JSON in config %s: %s" % (config_path, e))
        cfg = _merge(cfg, user)
    if paper_scale:
        cfg = _merge(cfg, PAPER_SCALE_OVERRIDES)
        cfg["category_map_sizes"] = [len(s) for s in
                                     datamod.CategoryMap.default().sets]
    if overrides:
        cfg = _merge(cfg, overrides)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _category_map_sizes_field(cfg):
    # echoed so reports are traceable to the exact coarse->fine map
    return [len(s) for s in _load_category_map(cfg).sets]


def _load_category_map(cfg) -> datamod.CategoryMap:
    path = cfg["paths"]["category_map"]
    if path:
        return datamod.CategoryMap.load(path)
    return datamod.CategoryMap.default()


def _build_generator(cfg) -> SyntheticGenerator:
    g = cfg["generator"]
    return SyntheticGenerator(GeneratorConfig(
        n_fine_categories=g["n_fine_categories"], resolution=g["resolution"],
        truncation=g["truncation"], seed=g["seed"]))


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_datagen(cfg, args) -> int:
    gen = _build_generator(cfg)
    w = cfg["world"]
    world_cfg = datamod.WorldConfig(
        n_train=w["n_train"], n_test=w["n_test"],
        voxels_per_roi=w["voxels_per_roi"], noise_std=w["noise_std"],
        resolution=cfg["generator"]["resolution"],
        mask_radius=w["mask_radius"],
        category_strength=w["category_strength"])
    ds, truth = datamod.make_world(cfg["seed"], world_cfg, gen,
                                   _load_category_map(cfg))
    ds.meta["config_echo"] = cfg
    out = cfg["paths"]["dataset_dir"]
    datamod.save_dataset(ds, out)
    datamod.save_truth(truth, out)
    print("wrote dataset (%d train / %d test) to %s"
          % (len(ds.train), len(ds.test), out))
    return EXIT_OK


def cmd_train_decoder(cfg, args) -> int:
    ds = datamod.zscore_dataset(datamod.load_dataset(cfg["paths"]["dataset_dir"]))
    d = cfg["decoder"]
    model = decodermod.decoder_train(decodermod.DecoderConfig(
        voxels_per_node=d["voxels_per_node"],
        hidden_per_direction=d["hidden_per_direction"],
        dropout_rate=d["dropout_rate"], epochs=d["epochs"], lr=d["lr"],
        batch_size=d["batch_size"],
        validation_fraction=d["validation_fraction"], seed=cfg["seed"]), ds)
    decodermod.save_decoder(model, cfg["paths"]["decoder_file"])
    print("decoder trained: final %s -> %s"
          % (model.history[-1], cfg["paths"]["decoder_file"]))
    return EXIT_OK


def cmd_train_encoder(cfg, args) -> int:
    ds = datamod.zscore_dataset(datamod.load_dataset(cfg["paths"]["dataset_dir"]))
    e = cfg["encoder"]
    model = encodermod.encoder_train(encodermod.EncoderConfig(
        channels=e["channels"], stages=e["stages"], epochs=e["epochs"],
        lr=e["lr"], batch_size=e["batch_size"],
        input_noise_std=e["input_noise_std"],
        weight_floor=e["weight_floor"], seed=cfg["seed"]), ds)
    encodermod.save_encoder(model, cfg["paths"]["encoder_file"])
    print("encoder trained: final mean PC %.4f -> %s"
          % (model.history[-1]["mean_pc"], cfg["paths"]["encoder_file"]))
    return EXIT_OK


def _load_models(cfg, need_decoder=True):
    for key in ("encoder_file",) + (("decoder_file",) if need_decoder else ()):
        path = cfg["paths"][key]
        if not os.path.exists(path):
            raise DataError("missing model file: %s" % path)
    enc = encodermod.load_encoder(cfg["paths"]["encoder_file"])
    dec = (decodermod.load_decoder(cfg["paths"]["decoder_file"])
           if need_decoder else None)
    return enc, dec


def _calibration_and_mask(cfg, ds, enc):
    images = np.stack([s.image for s in ds.train])
    preds = encodermod.encode_batch(enc, images)
    pred_mat = np.concatenate([preds[roi] for roi in datamod.ENCODED_ROIS], axis=1)
    true_mat = np.stack([s.voxels.concat(datamod.ENCODED_ROIS)
                         for s in ds.train])
    calib = reconmod.fit_calibration(pred_mat, true_mat)
    corr = encodermod.voxelwise_training_corr(enc, ds)
    mask = reconmod.EffectiveMask.from_correlations(
        corr, cfg["search"]["threshold"])
    return calib, mask


def _search_config(cfg, mode=None) -> reconmod.SearchConfig:
    s = cfg["search"]
    return reconmod.SearchConfig(
        batch=s["batch"], iterations=s["iterations"], topk=s["topk"],
        mode=mode or s["mode"], fixed_label=s["fixed_label"],
        truncation=s["truncation"],
        mask_radius=cfg["world"]["mask_radius"], seed=cfg["seed"])


def cmd_reconstruct(cfg, args) -> int:
    ds = datamod.zscore_dataset(datamod.load_dataset(cfg["paths"]["dataset_dir"]))
    scfg = _search_config(cfg)
    enc, dec = _load_models(cfg, need_decoder=scfg.mode in ("predicted", "library"))
    gen = _build_generator(cfg)
    cmap = _load_category_map(cfg)
    calib, mask = _calibration_and_mask(cfg, ds, enc)
    library = None
    if scfg.mode == "library":
        lib_dir = cfg["paths"]["library_dir"]
        if lib_dir:
            library = FiniteLibrary.load(lib_dir)
        else:
            library = FiniteLibrary.build(gen, cfg["library"]["size"],
                                          cfg["library"]["seed"],
                                          cfg["world"]["mask_radius"])
    targets = ds.test
    if args.targets:
        wanted = set(args.targets.split(","))
        targets = [s for s in targets if s.id in wanted]
        if not targets:
            raise DataError("no test samples match --targets %s" % args.targets)
    out_dir = cfg["paths"]["output_dir"]
    for s in targets:
        result = reconmod.reconstruct(
            s.id, s.voxels, gen, enc, calib, mask, scfg, cmap,
            decoder_model=dec, library=library, workers=args.workers)
        reconmod.save_result(result, os.path.join(out_dir, s.id),
                             extra_config=cfg)
        print("%s: rank-1 score %.6g (mode %s)"
              % (s.id, result.candidates[0].score, result.mode))
    return EXIT_OK


def _load_results(out_dir, ds):
    recon_sets, stimuli, ids = [], [], []
    for s in ds.test:
        rdir = os.path.join(out_dir, s.id)
        report_path = os.path.join(rdir, "report.json")
        if not os.path.exists(report_path):
            continue
        with open(report_path) as f:
            rep = json.load(f)
        recons = [datamod.load_pgm(os.path.join(rdir, c["image"]))
                  for c in rep["candidates"]]
        recon_sets.append(recons)
        stimuli.append(s.image)
        ids.append(s.id)
    if not recon_sets:
        raise DataError("no reconstruction results under %s" % out_dir)
    return ids, stimuli, recon_sets


def cmd_evaluate(cfg, args) -> int:
    ds = datamod.load_dataset(cfg["paths"]["dataset_dir"])
    enc, _ = _load_models(cfg, need_decoder=False)
    out_dir = cfg["paths"]["output_dir"]
    ids, stimuli, recon_sets = _load_results(out_dir, ds)
    rep = metricsmod.metric_report(recon_sets, stimuli, encoder_model=enc)
    rep["config_echo"] = cfg
    rep["target_ids"] = ids
    with open(os.path.join(out_dir, "metrics.json"), "w") as f:
        json.dump(rep, f, sort_keys=True, indent=1)
    reportmod.write_metrics_csv(rep, os.path.join(out_dir, "metrics.csv"), ids)
    reportmod.montage_figure(stimuli, recon_sets,
                             os.path.join(out_dir, "montage.png"))
    reportmod.metrics_figure(rep, os.path.join(out_dir, "metrics.png"))
    print("evaluated %d targets: mean Top-1 SSIM %.4f, MSE %.4f"
          % (len(ids), rep["aggregate"]["ssim_top1"],
             rep["aggregate"]["mse_top1"]))
    return EXIT_OK


def cmd_compare_library(cfg, args) -> int:
    ds = datamod.zscore_dataset(datamod.load_dataset(cfg["paths"]["dataset_dir"]))
    enc, dec = _load_models(cfg)
    gen = _build_generator(cfg)
    cmap = _load_category_map(cfg)
    calib, mask = _calibration_and_mask(cfg, ds, enc)
    library = FiniteLibrary.build(gen, cfg["library"]["size"],
                                  cfg["library"]["seed"],
                                  cfg["world"]["mask_radius"])
    rows = []
    for s in ds.test:
        res_g = reconmod.reconstruct(s.id, s.voxels, gen, enc, calib, mask,
                                     _search_config(cfg, mode="predicted"),
                                     cmap, decoder_model=dec,
                                     workers=args.workers)
        res_l = reconmod.reconstruct(s.id, s.voxels, gen, enc, calib, mask,
                                     _search_config(cfg, mode="library"),
                                     cmap, decoder_model=dec, library=library,
                                     workers=args.workers)
        rows.append({
            "target_id": s.id,
            "generator_score": res_g.candidates[0].score,
            "library_score": res_l.candidates[0].score,
            "generator_better": res_g.candidates[0].score <
                                res_l.candidates[0].score,
        })
    out_dir = cfg["paths"]["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    wins = sum(r["generator_better"] for r in rows)
    summary = {"rows": rows, "generator_wins": wins, "n_targets": len(rows),
               "config_echo": cfg}
    with open(os.path.join(out_dir, "comparison.json"), "w") as f:
        json.dump(summary, f, sort_keys=True, indent=1)
    reportmod.comparison_csv(rows, os.path.join(out_dir, "comparison.csv"))
    reportmod.comparison_figure(rows, os.path.join(out_dir, "comparison.png"))
    print("generator better on %d/%d targets" % (wins, len(rows)))
    return EXIT_OK


def cmd_gradcheck(cfg, args) -> int:
    from .gradsuite import run_gradient_suite
    results = run_gradient_suite(seed=cfg["seed"])
    width = max(len(r[0]) for r in results)
    ok_all = True
    for name, err, tol in results:
        ok = err < tol
        ok_all &= ok
        print("%-*s  max rel err %.3e  (tol %.0e)  %s"
              % (width, name, err, tol, "PASS" if ok else "FAIL"))
    return EXIT_OK if ok_all else EXIT_GRADCHECK


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="brainrecon",
                description="Voxel-guided image reconstruction pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    commands = {
        "datagen": cmd_datagen,
        "train-decoder": cmd_train_decoder,
        "train-encoder": cmd_train_encoder,
        "reconstruct": cmd_reconstruct,
        "evaluate": cmd_evaluate,
        "compare-library": cmd_compare_library,
        "gradcheck": cmd_gradcheck,
    }
    for name, fn in commands.items():
        sp = sub.add_parser(name)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--mode", default=None,
                        help="predicted|random|fixed:<label>|library")
        sp.add_argument("--topk", type=int, default=None)
        sp.add_argument("--paper-scale", action="store_true")
        sp.add_argument("--print-config", action="store_true",
                        help="print the resolved config and exit")
        if name == "reconstruct":
            sp.add_argument("--targets", default=None,
                            help="comma-separated test sample ids")
    return p


def _mode_overrides(mode_flag: str | None, topk: int | None) -> dict:
    overrides: dict = {}
    if mode_flag is not None:
        search: dict = {}
        if mode_flag.startswith("fixed:"):
            search["mode"] = "fixed"
            search["fixed_label"] = int(mode_flag.split(":", 1)[1])
        elif mode_flag in ("predicted", "random", "library"):
            search["mode"] = mode_flag
        else:
            raise ConfigError("unknown --mode value %r" % mode_flag)
        overrides["search"] = search
    if topk is not None:
        overrides.setdefault("search", {})["topk"] = topk
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args.config, args.seed, args.paper_scale,
                             _mode_overrides(args.mode, args.topk))
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print("input error: %s" % e, file=sys.stderr)
        return EXIT_INPUT
    if args.print_config:
        print(json.dumps(cfg, sort_keys=True, indent=1))
        return EXIT_OK
    try:
        return args.fn(cfg, args)
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print("input error: %s" % e, file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, reconmod.SearchError) as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
