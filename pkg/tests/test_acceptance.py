"""Acceptance suite: one test per release criterion, each printing a
single pass/fail line.

The experiment criteria (4, 5, 6, 9) train real models on a reduced
synthetic corpus and take tens of minutes on one CPU core. Run with
``pytest tests/test_acceptance.py -s`` to watch the lines appear.
"""

import time

import numpy as np
import pytest

from stnadapt import gradcheck, harness, synthdata
from stnadapt.autodiff import Tensor
from stnadapt.config import DEFAULTS
from stnadapt.containers import split_counts
from stnadapt.harness import (
    STRATEGIES,
    average_reduction,
    relative_reduction,
    round_percent,
)
from stnadapt.models import Model, ModelSpec, build_model, count_parameters, forward
from stnadapt.stn import IDENTITY_THETA, warp_image

# Reduced-corpus protocol used by the experiment criteria. Dropout is
# disabled because the half-scale network cannot fit the task through
# dropout 0.2; the published full-scale configuration keeps 0.2.
PROTOCOL = dict(
    DEFAULTS,
    speakers=2,
    extra_sessions=1,
    base_frames=1200,
    extra_frames=500,
    dropout=0.0,
    learning_rate=1e-3,
    max_epochs=30,
    adapt_max_epochs=30,
    seeds=(1, 2, 3),
)
CROSS_SESSION = "spk1_ses2"
CROSS_SPEAKER = "spk2_ses1"


def report(num: int, desc: str, ok: bool):
    print(f"criterion {num} ({desc}): {'PASS' if ok else 'FAIL'}")
    assert ok, f"criterion {num} ({desc}) failed"


def majority(flags) -> bool:
    flags = list(flags)
    return sum(bool(f) for f in flags) * 2 > len(flags)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "corpus"
    synthdata.generate_corpus(PROTOCOL, 0, out)
    return out


@pytest.fixture(scope="module")
def protocol_runs(corpus):
    """Train the base model and every adaptation cell on the cross-session
    target, once per seed. Shared by criteria 4, 5 and 6."""
    runs = []
    base_raw = synthdata.load_session(corpus / f"{harness.BASE_SESSION}.utis")
    target_raw = synthdata.load_session(corpus / f"{CROSS_SESSION}.utis")
    for seed in PROTOCOL["seeds"]:
        model, hist = harness.train_base(PROTOCOL, base_raw, seed)
        ds = harness.prepare_dataset(target_raw, model.spec, PROTOCOL,
                                     (model.target_mean, model.target_std))
        cells, seconds, adapted_models = {}, {}, {}
        stn_model = None
        for strategy in STRATEGIES:
            src = stn_model if strategy == "mean-theta" else model
            t0 = time.time()
            adapted, _ = harness.adapt(src, ds, strategy, PROTOCOL, seed)
            seconds[strategy] = time.time() - t0
            cells[strategy] = harness.evaluate_split(adapted, ds, "test")
            adapted_models[strategy] = adapted
            if strategy == "stn":
                stn_model = adapted
        runs.append({
            "seed": seed,
            "base": model,
            "base_dev": hist["dev_mse"],
            "cells": cells,
            "seconds": seconds,
            "models": adapted_models,
        })
    return runs


def test_criterion_1_gradient_suite():
    t0 = time.time()
    worst = {name: max(gradcheck.run_primitive(name, trials=20))
             for name in gradcheck.PRIMITIVES}
    elapsed = time.time() - t0
    ok = all(err < 1e-4 for err in worst.values()) and elapsed < 60.0
    report(1, "gradient suite", ok)


def test_criterion_2_stn_identity():
    rng = np.random.default_rng(0)
    img = rng.standard_normal((4, 32, 64)).astype(np.float32)
    bitwise = np.array_equal(warp_image(img, IDENTITY_THETA), img)

    spec = ModelSpec(in_height=16, in_width=24, conv_filters=(4, 6, 8, 10),
                     fc_width=20, loc_filters=(2, 3, 4, 5), loc_fc_width=8,
                     out_dim=7, dropout=0.0)
    with_stn = build_model(spec, seed=5)
    trunk_only = Model(
        ModelSpec(**{**spec.__dict__, "with_stn": False}),
        {k: v for k, v in with_stn.params.items()
         if not k.startswith("stn.")},
    )
    x = rng.standard_normal((3,) + spec.input_shape).astype(np.float32)
    same = np.array_equal(forward(with_stn, Tensor(x)).data,
                          forward(trunk_only, Tensor(x)).data)
    report(2, "STN identity", bitwise and same)


# Published relative-reduction fixtures: (none, stn, pct, stn_out, pct,
# full[, mean_theta, pct]). Five cross-session percentages are corrected
# by one point to agree with their own MSE columns; the published average
# rows agree with the corrected values.
TABLES = {
    "speaker2d": {
        "rows": [
            (1.049, 0.588, -71, 0.517, -82, 0.400, 0.887, -25),
            (1.401, 0.609, -78, 0.449, -94, 0.389, 1.015, -38),
            (1.322, 0.552, -79, 0.469, -88, 0.350, 0.909, -42),
        ],
        "avg": {"stn": -76, "stn_out": -88, "mt": -35},
    },
    "session2d": {
        "rows": [
            (1.131, 0.646, -77, 0.547, -93, 0.503, 0.913, -35),
            (0.998, 0.619, -69, 0.485, -94, 0.451, 0.934, -12),
            (1.054, 0.641, -70, 0.522, -91, 0.468, 0.908, -25),
            (1.174, 0.604, -85, 0.566, -91, 0.506, 0.955, -33),
        ],
        "avg": {"stn": -75, "stn_out": -92, "mt": -26},
    },
    "speaker3d": {
        "rows": [
            (1.105, 0.553, -73, 0.497, -80, 0.348),
            (1.451, 0.502, -84, 0.416, -91, 0.315),
            (1.541, 0.501, -83, 0.418, -90, 0.294),
        ],
        "avg": {"stn": -80, "stn_out": -87},
    },
}


def test_criterion_3_reduction_fixtures():
    ok = True
    for table in TABLES.values():
        cols = {"stn": 1, "stn_out": 3, "mt": 6}
        collected = {k: [] for k in table["avg"]}
        for row in table["rows"]:
            none, full = row[0], row[5]
            for name in table["avg"]:
                idx = cols[name]
                r = relative_reduction(none, row[idx], full)
                ok &= -round_percent(r) == row[idx + 1]
                collected[name].append(r)
        for name, expected in table["avg"].items():
            ok &= -average_reduction(collected[name]) == expected
    report(3, "relative-reduction fixtures", ok)


def test_criterion_4_misalignment_recovery(protocol_runs):
    gap_ok, stn_ok, out_ok, time_ok = [], [], [], []
    for run in protocol_runs:
        c = run["cells"]
        gap_ok.append(c["none"] >= 2.0 * run["base_dev"])
        stn = relative_reduction(c["none"], c["stn"], c["full"])
        out = relative_reduction(c["none"], c["stn-out"], c["full"])
        stn_ok.append(stn >= 50.0)
        out_ok.append(out >= 70.0)
        time_ok.append(max(run["seconds"].values()) < 600.0)
    ok = (majority(gap_ok) and majority(stn_ok) and majority(out_ok)
          and all(time_ok))
    report(4, "misalignment recovery", ok)


def test_criterion_5_strategy_ordering(protocol_runs):
    ordered = []
    for run in protocol_runs:
        c = run["cells"]
        ordered.append(
            c["none"] > c["mean-theta"] > c["stn"]
            and c["stn"] >= c["stn-out"] >= c["full"]
        )
    report(5, "strategy ordering", majority(ordered))


def test_criterion_6_freezing_contract(protocol_runs):
    run = protocol_runs[0]
    base = run["base"]
    ok = True
    for name, p in run["models"]["stn"].params.items():
        if not name.startswith("stn."):
            ok &= np.array_equal(p.data, base.params[name].data)
    for name, p in run["models"]["stn-out"].params.items():
        if name.startswith("trunk."):
            ok &= np.array_equal(p.data, base.params[name].data)
    report(6, "freezing contract", ok)


def test_criterion_7_parameter_budget():
    fr = count_parameters(build_model(ModelSpec(), seed=0))["fractions"]
    ok = 0.05 <= fr["stn"] <= 0.15 and 0.001 <= fr["output"] <= 0.02
    report(7, "parameter budget", ok)


def test_criterion_8_data_pipeline(corpus, tmp_path):
    ok = True
    # split within one sample of 85-10-5 on every generated session
    for sid, _, _, n in synthdata.session_list(PROTOCOL):
        ds = synthdata.load_session(corpus / f"{sid}.utis")
        for key, frac in (("train", 0.85), ("val", 0.10), ("test", 0.05)):
            ok &= abs(len(ds.splits[key]) - frac * n) <= 1.0
        flat = ds.images.reshape(ds.images.shape[0], -1)
        ok &= np.allclose(flat.min(axis=1), -1.0) and np.allclose(
            flat.max(axis=1), 1.0)
        ok &= flat.min() >= -1.0 and flat.max() <= 1.0
    # default corpus plan: 4 base speakers plus 4 extra sessions
    plan = synthdata.session_list(dict(DEFAULTS))
    ok &= len(plan) == 8 and sum(n for *_, n in plan) == 4 * 8000 + 4 * 1900

    ds = synthdata.load_session(corpus / f"{harness.BASE_SESSION}.utis")
    std = synthdata.standardize_targets(ds)
    train = std.spectra[std.splits["train"]].astype(np.float64)
    ok &= np.abs(train.mean(axis=0)).max() < 1e-6
    ok &= np.abs(train.std(axis=0) - 1.0).max() < 1e-6

    # bitwise regeneration
    synthdata.generate_corpus(PROTOCOL, 0, tmp_path / "again")
    for sid, *_ in synthdata.session_list(PROTOCOL):
        a = (corpus / f"{sid}.utis").read_bytes()
        b = (tmp_path / "again" / f"{sid}.utis").read_bytes()
        ok &= a == b
    report(8, "data pipeline", ok)


def test_criterion_9_3d_broadcast(corpus):
    cfg = dict(PROTOCOL, variant="3d", scale=0.25, learning_rate=2e-3,
               max_epochs=80, patience=8)
    spec3 = harness.spec_from_config(cfg)
    model = build_model(spec3, seed=4)
    model.params["stn.head.w"].data += 0.01
    x = np.random.default_rng(0).standard_normal(
        (2,) + spec3.input_shape).astype(np.float32)
    cap = {}
    forward(model, Tensor(x), capture=cap)
    grids = cap["frame_grids"]
    broadcast_ok = grids.shape[1] == spec3.block_frames and all(
        np.array_equal(grids[:, t], grids[:, 0])
        for t in range(spec3.block_frames)
    )

    base_raw = synthdata.load_session(corpus / f"{harness.BASE_SESSION}.utis")
    target_raw = synthdata.load_session(corpus / f"{CROSS_SPEAKER}.utis")
    model, _ = harness.train_base(cfg, base_raw, seed=1)
    ds = harness.prepare_dataset(target_raw, model.spec, cfg,
                                 (model.target_mean, model.target_std))
    cells = {}
    for strategy in ("none", "stn", "stn-out", "full"):
        adapted, _ = harness.adapt(model, ds, strategy, cfg, seed=1)
        cells[strategy] = harness.evaluate_split(adapted, ds, "test")
    order_ok = (cells["none"] > cells["stn"] >= cells["stn-out"]
                >= cells["full"])
    report(9, "3D broadcast", broadcast_ok and order_ok)
