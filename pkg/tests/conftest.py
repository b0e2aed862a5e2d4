"""Shared fixtures: one trained 16x16 toy run and one small CLI chain, each built once per session."""
import json
import time
from types import SimpleNamespace

import numpy as np
import pytest

from vitdae.classifier import fit_classifier
from vitdae.cli import main
from vitdae.data import ToySpec, generate_toy
from vitdae.pipeline import TrainConfig, train_stage1, train_stage2

# desk-scale acceptance run; lr and length were chosen for a single CPU core
TOY_RUN_CONFIG = dict(seed=0, epochs=12, batch_size=32, lr=1e-3, latent_steps=2000, latent_batch=128,
                      latent_lr=1e-3)

# 8x8 smoke configuration for CLI runs
TINY_CLI_CONFIG = {
    "resolution": 8, "epochs": 2, "batch_size": 16, "lr": 1e-3, "code_dim": 8, "vit_dim": 16, "vit_depth": 1,
    "vit_heads": 2, "unet_channels": 8, "unet_mults": [1, 2], "unet_groups": 4, "latent_layers": 3,
    "latent_width": 32, "latent_steps": 60, "latent_batch": 32,
}

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])


@pytest.fixture
def report():
    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} ({detail})"
        ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


@pytest.fixture(scope="session")
def toy_run():
    ds = generate_toy(ToySpec(count=400, resolution=16, seed=0))
    cfg = TrainConfig(**TOY_RUN_CONFIG)
    t0 = time.perf_counter()
    stage1 = train_stage1(cfg, ds)
    t1 = time.perf_counter()
    latents = train_stage2(TrainConfig(stage=2, **TOY_RUN_CONFIG), stage1, ds)
    t2 = time.perf_counter()
    classifier = fit_classifier(ds.images, ds.labels, len(ds.class_names), epochs=5, seed=0)
    return SimpleNamespace(ds=ds, cfg=cfg, stage1=stage1, latents=latents, classifier=classifier,
                           stage1_seconds=t1 - t0, stage2_seconds=t2 - t1)


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="session")
def cli_chain(tmp_path_factory):
    """toygen -> stage 1 -> stage 2 -> sample -> reconstruct -> encode -> evaluation, at 8x8."""
    root = tmp_path_factory.mktemp("chain")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(TINY_CLI_CONFIG))
    data, test, run, evals = root / "data", root / "test", root / "run", root / "eval"
    steps = [
        ("toygen", "--out", data, "--seed", 7, "--count", 20, "--resolution", 8, "--manifest", root / "toy.json"),
        ("toygen", "--out", test, "--seed", 8, "--count", 10, "--resolution", 8),
        ("train-stage1", "--config", cfg_path, "--data", data, "--out", run),
        ("train-stage2", "--config", cfg_path, "--data", data, "--run", run),
        ("sample", "--run", run, "--n", 10, "--steps", 5, "--latent-steps", 10, "--seed", 3),
        ("reconstruct", "--run", run, "--data", test, "--steps", 5, "--limit", 8),
        ("encode", "--run", run, "--data", test),
        ("eval-fid", "--real", data, "--gen", run / "samples", "--resolution", 8, "--out", evals),
        ("eval-pr", "--real", data, "--gen", run / "samples", "--resolution", 8, "--out", evals),
        ("manifold-plot", "--real", data, "--gen", run / "samples", "--resolution", 8, "--out", evals),
        ("downstream", "--train", data, "--test", test, "--synthetic", run / "samples", "--resolution", 8,
         "--epochs", 3, "--out", evals),
    ]
    t0 = time.perf_counter()
    codes = [run_cli(*s) for s in steps]
    return SimpleNamespace(root=root, data=data, test=test, run=run, evals=evals, codes=codes, steps=steps,
                           seconds=time.perf_counter() - t0, config=cfg_path)
