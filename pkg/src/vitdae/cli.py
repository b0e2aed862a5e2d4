"""Command-line entry point.

Every subcommand builds one flat effective config from, in increasing
precedence: built-in defaults, ``--config`` (a flat JSON file or a run's
manifest.json), explicit flags, and ``--set key=value`` overrides. The
effective config is recorded in the output directory's manifest so any stage
can be re-run with ``--config <out>/manifest.json``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline as P
from .classifier import extract_features, fit_classifier, load_classifier, predict, save_classifier
from .data import Dataset, ToySpec, generate_toy, ingest, save_png, write_dataset
from .metrics import (FeatureStats, ManifoldEstimate, downstream_eval, frechet_distance, improved_pr,
                      manifold_plot, save_features)

log = logging.getLogger("vitdae")

OUTPUT_ROOT_ENV = "VITDAE_OUTPUT_ROOT"

PATH_KEYS = {"out", "data", "run", "real", "gen", "classifier", "train", "test", "synthetic", "manifest"}

_EVAL_OPTIONS = {
    "real": None, "gen": None, "out": None, "resolution": 16, "extractor": "classifier", "classifier": None,
    "run": None, "seed": 0, "classifier_epochs": 5,
}

COMMANDS: dict[str, dict] = {
    "toygen": {"out": None, "seed": 0, "count": 400, "resolution": 16, "class_count": 4, "self_check": False,
               "manifest": None},
    "train-stage1": {"out": None, **{k: v for k, v in P.TrainConfig().to_dict().items()}},
    "train-stage2": {"run": None, "out": None, **{k: v for k, v in P.TrainConfig(stage=2).to_dict().items()}},
    "sample": {"run": None, "out": None, "n": 16, "seed": 0, "steps": 20, "latent_steps": 50, "classes": None},
    "reconstruct": {"run": None, "data": None, "out": None, "steps": 50, "limit": 32},
    "encode": {"run": None, "data": None, "out": None},
    "eval-fid": dict(_EVAL_OPTIONS),
    "eval-pr": {**_EVAL_OPTIONS, "k": 3},
    "manifold-plot": {**_EVAL_OPTIONS, "k": 3},
    "downstream": {"train": None, "test": None, "synthetic": None, "out": None, "resolution": 16, "mode": "all",
                   "seed": 0, "epochs": 10},
}

REQUIRED = {
    "toygen": ("out",), "train-stage1": ("out", "data"), "train-stage2": ("run", "data"), "sample": ("run",),
    "reconstruct": ("run", "data"), "encode": ("run", "data"), "eval-fid": ("real", "gen", "out"),
    "eval-pr": ("real", "gen", "out"), "manifold-plot": ("real", "gen", "out"),
    "downstream": ("train", "test", "out"),
}

FLAG_HELP = {
    "out": "output directory (relative paths resolve under $VITDAE_OUTPUT_ROOT when set)",
    "run": "run directory holding checkpoints/",
    "data": "PNG dataset root with one subfolder per class",
    "self_check": "train a small classifier on the generated classes and fail unless held-out accuracy > 90%",
}


class CliError(Exception):
    """Bad input detected by the CLI itself."""


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitdae", description="Two-stage diffusion autoencoder on small images.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, options in COMMANDS.items():
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="flat JSON config or a manifest.json from an earlier run")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (value parsed as JSON when possible)")
        for key, default in options.items():
            kw = {"dest": key, "default": argparse.SUPPRESS, "help": FLAG_HELP.get(key)}
            if isinstance(default, bool):
                p.add_argument(_flag(key), action="store_const", const=True, **kw)
            elif isinstance(default, (list, tuple)) or key == "classes":
                p.add_argument(_flag(key), nargs="+", type=type(default[0]) if default else str, **kw)
            else:
                p.add_argument(_flag(key), type=type(default) if default is not None else str, **kw)
    return parser


def _load_config_file(path: str, command: str) -> dict:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and "entries" in data:
        return dict(P.RunManifest(path, data["entries"]).latest(command)["config"])
    if not isinstance(data, dict):
        raise CliError(f"{path}: config must be a JSON object")
    return data


def _resolve_path(key: str, value):
    if value is None:
        return None
    p = Path(value)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if key == "out" and root and not p.is_absolute():
        p = Path(root) / p
    return str(p.resolve())


def effective_config(command: str, args: argparse.Namespace) -> dict:
    options = COMMANDS[command]
    cfg = {k: (list(v) if isinstance(v, (list, tuple)) else v) for k, v in options.items()}
    if args.config:
        for k, v in _load_config_file(args.config, command).items():
            if k in cfg:
                cfg[k] = v
            else:
                log.debug("ignoring config key %r not used by %s", k, command)
    for k in options:
        if hasattr(args, k):
            cfg[k] = getattr(args, k)
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        if key not in cfg:
            raise CliError(f"unknown config key {key!r} for {command}")
        cfg[key] = _parse_value(raw)
    if command == "train-stage2":
        cfg["stage"] = 2
        if cfg["out"] is None:
            cfg["out"] = cfg["run"]
    elif command == "train-stage1":
        cfg["stage"] = 1
    elif cfg.get("out") is None and "run" in cfg:
        cfg["out"] = cfg["run"]
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise CliError(f"{command} needs {', '.join(_flag(k) for k in missing)}")
    for k in PATH_KEYS & set(cfg):
        cfg[k] = _resolve_path(k, cfg[k])
    return cfg


def _outputs(out: Path, paths) -> dict[str, str]:
    return {str(Path(p).relative_to(out)): P.file_hash(p) for p in paths}


def _record(out: Path, command: str, cfg: dict, t0: float, **kw) -> dict:
    return P.RunManifest.open(out / "manifest.json").append(command, cfg, wall_clock=time.perf_counter() - t0,
                                                             **kw)


def _train_config(cfg: dict) -> P.TrainConfig:
    return P.TrainConfig.from_dict({k: v for k, v in cfg.items() if k in P.TrainConfig.__dataclass_fields__})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_toygen(cfg: dict) -> dict:
    t0 = time.perf_counter()
    spec = ToySpec(class_count=cfg["class_count"], resolution=cfg["resolution"], count=cfg["count"],
                   seed=cfg["seed"])
    ds = generate_toy(spec)
    out = Path(cfg["out"])
    if cfg["self_check"]:
        acc = toy_self_check(spec)
        if acc <= 0.9:
            raise RuntimeError(f"toy self-check failed: held-out accuracy {acc:.3f} <= 0.9")
        log.info("toy self-check accuracy %.3f", acc)
    paths = write_dataset(ds, out)
    spec_path = out / "toyspec.json"
    spec_path.write_text(json.dumps({k: v for k, v in cfg.items() if k not in ("out", "manifest")},
                                    indent=1, sort_keys=True) + "\n")
    result = {"images": len(paths), "classes": ds.class_names}
    if cfg["manifest"]:
        # kept outside the image tree so repeated generation leaves byte-identical directories
        P.RunManifest.open(cfg["manifest"]).append(
            "toygen", cfg, seeds={"toy": spec.seed}, wall_clock=time.perf_counter() - t0,
            outputs=_outputs(out, paths + [spec_path]))
    return result


def toy_self_check(spec: ToySpec) -> float:
    """Held-out accuracy of a classifier trained on the same toy settings with fresh seeds."""
    train = generate_toy(ToySpec(spec.class_count, spec.resolution, 100, spec.seed + 1, spec.recipes))
    test = generate_toy(ToySpec(spec.class_count, spec.resolution, 50, spec.seed + 2, spec.recipes))
    model = fit_classifier(train.images, train.labels, spec.class_count, epochs=5, seed=spec.seed)
    return float((predict(model, test.images) == test.labels).mean())


def _ingest(path: str, resolution: int, classes=None) -> Dataset:
    return ingest(path, resolution, classes)


def cmd_train_stage1(cfg: dict) -> dict:
    t0 = time.perf_counter()
    tc = _train_config(cfg)
    out = Path(cfg["out"])
    ds = P.filter_classes(_ingest(tc.data, tc.resolution), tc.classes)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    ckpts = []

    def on_epoch(epoch, model):
        if tc.checkpoint_every and epoch % tc.checkpoint_every == 0 and epoch < tc.epochs:
            ckpts.append(P.save_stage1(model, out / "checkpoints" / f"stage1_epoch{epoch:04d}"))

    model = P.train_stage1(tc, ds, on_epoch=on_epoch)
    ckpts.append(P.save_stage1(model, out / "checkpoints" / "stage1", n_images=len(ds)))
    P.append_losses(out / "losses.csv", [(1, "stage1", i + 1, v) for i, v in enumerate(model.history)])
    _record(out, "train-stage1", cfg, t0, seeds={"train": tc.seed}, losses={"stage1": model.history},
            checkpoints=[str(p) for p in ckpts], outputs=_outputs(out, ckpts))
    return {"epochs": tc.epochs, "final_loss": model.history[-1], "images": len(ds),
            "checkpoint": str(ckpts[-1])}


def _stage1_path(run: str) -> Path:
    path = Path(run) / "checkpoints" / "stage1.bin"
    if not path.exists():
        raise CliError(f"no stage-1 checkpoint at {path}")
    return path


def cmd_train_stage2(cfg: dict) -> dict:
    t0 = time.perf_counter()
    tc = _train_config(cfg)
    out = Path(cfg["out"])
    stage1 = P.load_stage1(_stage1_path(cfg["run"]))
    ds = P.filter_classes(_ingest(tc.data, stage1.config.resolution), tc.classes)
    models = P.train_stage2(tc, stage1, ds)
    digest = P.stage1_digest(stage1)
    ckpts, rows, losses = [], [], {}
    for lm in models:
        name = f"latent_{lm.class_name}" if lm.class_name is not None else "latent_all"
        ckpts.append(P.save_latent(lm, out / "checkpoints" / name, digest, tc))
        losses[name] = lm.history
        rows += [(2, name, i + 1, v) for i, v in enumerate(lm.history)]
    P.append_losses(out / "losses.csv", rows)
    _record(out, "train-stage2", cfg, t0, seeds={"train": tc.seed}, losses=losses,
            checkpoints=[str(p) for p in ckpts], outputs=_outputs(out, ckpts))
    return {"models": [m.class_name or "all" for m in models],
            "loss_drop": {k: 1 - v[-1] / v[0] for k, v in losses.items()}}


def _latents(run: str, stage1: P.Stage1Model) -> list[P.LatentModel]:
    paths = sorted((Path(run) / "checkpoints").glob("latent_*.bin"))
    if not paths:
        raise CliError(f"no latent checkpoints under {run}/checkpoints")
    digest = P.stage1_digest(stage1)
    out = []
    for p in paths:
        lm, header = P.load_latent(p)
        if header.get("stage1_digest") != digest:
            raise ValueError(f"{p} was trained against a different stage-1 checkpoint")
        out.append(lm)
    return out


def cmd_sample(cfg: dict) -> dict:
    t0 = time.perf_counter()
    out = Path(cfg["out"])
    stage1 = P.load_stage1(_stage1_path(cfg["run"]))
    latents = _latents(cfg["run"], stage1)
    if cfg["classes"]:
        unknown = set(cfg["classes"]) - {lm.class_name for lm in latents}
        if unknown:
            raise CliError(f"no latent model for classes {sorted(unknown)}")
        latents = [lm for lm in latents if lm.class_name in cfg["classes"]]
    paths = []
    for i, lm in enumerate(latents):
        name = lm.class_name or "all"
        seed = cfg["seed"] * 1000 + (lm.label if lm.label is not None else i)
        images = P.generate(stage1, lm, cfg["n"], seed, steps=cfg["steps"], latent_steps=cfg["latent_steps"])
        folder = out / "samples" / name
        folder.mkdir(parents=True, exist_ok=True)
        for j, img in enumerate(images):
            path = folder / f"{name}_{j:05d}.png"
            save_png(img, path)
            paths.append(path)
    _record(out, "sample", cfg, t0, seeds={"sample": cfg["seed"]}, outputs=_outputs(out, paths))
    return {"images": len(paths), "dir": str(out / "samples")}


def cmd_reconstruct(cfg: dict) -> dict:
    t0 = time.perf_counter()
    out = Path(cfg["out"])
    stage1 = P.load_stage1(_stage1_path(cfg["run"]))
    ds = _ingest(cfg["data"], stage1.config.resolution)
    if cfg["limit"]:
        ds = ds.subset(np.arange(min(cfg["limit"], len(ds))))
    recon, mse = P.reconstruct(stage1, ds.images, cfg["steps"])
    paths = []
    for img, ident in zip(recon, ds.ids):
        path = out / "reconstructions" / f"{ident}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_png(img, path)
        paths.append(path)
    result = {"steps": cfg["steps"], "n": len(ds), "mse": mse}
    res_path = out / "reconstruction.json"
    res_path.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    _record(out, "reconstruct", cfg, t0, outputs=_outputs(out, paths + [res_path]))
    return result


def cmd_encode(cfg: dict) -> dict:
    t0 = time.perf_counter()
    out = Path(cfg["out"])
    stage1 = P.load_stage1(_stage1_path(cfg["run"]))
    ds = _ingest(cfg["data"], stage1.config.resolution)
    codes = stage1.codes(ds.images)
    out.mkdir(parents=True, exist_ok=True)
    save_features(out / "codes", codes, f"semantic-encoder:{P.stage1_digest(stage1)[:12]}")
    (out / "codes_index.json").write_text(json.dumps({"ids": ds.ids, "labels": ds.labels.tolist(),
                                                      "class_names": ds.class_names}, indent=1) + "\n")
    paths = [out / "codes.bin", out / "codes.json", out / "codes_index.json"]
    _record(out, "encode", cfg, t0, outputs=_outputs(out, paths))
    return {"n": len(ds), "dim": int(codes.shape[1])}


def _extract(cfg: dict, out: Path) -> tuple[np.ndarray, np.ndarray, list[Path]]:
    real = _ingest(cfg["real"], cfg["resolution"])
    gen = _ingest(cfg["gen"], cfg["resolution"])
    written = []
    if cfg["extractor"] == "encoder":
        if not cfg["run"]:
            raise CliError("the encoder extractor needs --run")
        stage1 = P.load_stage1(_stage1_path(cfg["run"]))
        ident = f"semantic-encoder:{P.stage1_digest(stage1)[:12]}"
        fn = stage1.codes
    elif cfg["extractor"] == "classifier":
        if cfg["classifier"]:
            model = load_classifier(cfg["classifier"])
        else:
            model = fit_classifier(real.images, real.labels, len(real.class_names),
                                   epochs=cfg["classifier_epochs"], seed=cfg["seed"])
            written.append(save_classifier(model, out / "classifier"))
        ident = "toy-classifier"
        fn = lambda x: extract_features(model, x)
    else:
        raise CliError(f"unknown extractor {cfg['extractor']!r} (use classifier or encoder)")
    fr, fg = fn(real.images), fn(gen.images)
    out.mkdir(parents=True, exist_ok=True)
    for name, f in (("features_real", fr), ("features_gen", fg)):
        save_features(out / name, f, ident)
        written += [out / f"{name}.bin", out / f"{name}.json"]
    return fr.astype(np.float64), fg.astype(np.float64), written


def _write_result(out: Path, name: str, result: dict) -> Path:
    path = out / name
    path.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    return path


def cmd_eval_fid(cfg: dict) -> dict:
    t0 = time.perf_counter()
    out = Path(cfg["out"])
    fr, fg, written = _extract(cfg, out)
    result = {"fid": frechet_distance(FeatureStats.from_features(fr), FeatureStats.from_features(fg)),
              "n_real": len(fr), "n_gen": len(fg), "extractor": cfg["extractor"]}
    written.append(_write_result(out, "fid.json", result))
    _record(out, "eval-fid", cfg, t0, seeds={"classifier": cfg["seed"]}, outputs=_outputs(out, written))
    return result


def cmd_eval_pr(cfg: dict) -> dict:
    t0 = time.perf_counter()
    out = Path(cfg["out"])
    fr, fg, written = _extract(cfg, out)
    p, r = improved_pr(ManifoldEstimate(fr, cfg["k"]), ManifoldEstimate(fg, cfg["k"]))
    result = {"precision": p, "recall": r, "k": cfg["k"], "extractor": cfg["extractor"]}
    written.append(_write_result(out, "pr.json", result))
    _record(out, "eval-pr", cfg, t0, seeds={"classifier": cfg["seed"]}, outputs=_outputs(out, written))
    return result


def cmd_manifold_plot(cfg: dict) -> dict:
    t0 = time.perf_counter()
    out = Path(cfg["out"])
    fr, fg, written = _extract(cfg, out)
    manifold_plot(fr, fg, cfg["k"], out / "manifold.svg", out / "manifold.csv")
    written += [out / "manifold.svg", out / "manifold.csv"]
    _record(out, "manifold-plot", cfg, t0, seeds={"classifier": cfg["seed"]}, outputs=_outputs(out, written))
    return {"svg": str(out / "manifold.svg"), "csv": str(out / "manifold.csv")}


def cmd_downstream(cfg: dict) -> dict:
    t0 = time.perf_counter()
    out = Path(cfg["out"])
    res = cfg["resolution"]
    train, test = _ingest(cfg["train"], res), _ingest(cfg["test"], res)
    synthetic = _ingest(cfg["synthetic"], res) if cfg["synthetic"] else None
    for other in (train, synthetic):
        if other is not None and other.class_names != test.class_names:
            raise ValueError(f"class names differ between datasets: {other.class_names} vs {test.class_names}")
    modes = ("real", "synthetic", "hybrid") if cfg["mode"] == "all" else (cfg["mode"],)
    results = [downstream_eval(train, test, m, synthetic, epochs=cfg["epochs"], seed=cfg["seed"]) for m in modes]
    out.mkdir(parents=True, exist_ok=True)
    json_path = _write_result(out, "downstream.json", {"results": results})
    csv_path = out / "downstream.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "accuracy"] + [f"f1_{c}" for c in test.class_names])
        for r in results:
            w.writerow([r["mode"], repr(r["accuracy"])] + [repr(v) for v in r["f1"]])
    _record(out, "downstream", cfg, t0, seeds={"classifier": cfg["seed"]}, outputs=_outputs(out, [json_path, csv_path]))
    return {r["mode"]: r["accuracy"] for r in results}


HANDLERS = {
    "toygen": cmd_toygen, "train-stage1": cmd_train_stage1, "train-stage2": cmd_train_stage2,
    "sample": cmd_sample, "reconstruct": cmd_reconstruct, "encode": cmd_encode, "eval-fid": cmd_eval_fid,
    "eval-pr": cmd_eval_pr, "manifold-plot": cmd_manifold_plot, "downstream": cmd_downstream,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = effective_config(args.command, args)
        result = HANDLERS[args.command](cfg)
    except Exception as exc:  # every failure becomes one machine-readable line
        print(json.dumps({"error": str(exc), "type": type(exc).__name__, "command": args.command}),
              file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return 1
    print(json.dumps({"command": args.command, "result": result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
