"""Acceptance checklist; each test prints one pass/fail line.

The lines are echoed in a terminal section at the end of the run (see
conftest) so the checklist survives output capture.
"""

import dataclasses
import math
import os
import time

import numpy as np
import pytest

import oracles
from helpers import full_model_fd_check
from mmfusion.cli import operator_fd_errors
from mmfusion.data import load_batch, read_manifest, split, write_manifest
from mmfusion.engine import (
    AdamState,
    BatchNormState,
    PlateauSchedule,
    RngStream,
    Tensor,
    adam_step,
    batch_norm,
    bce_loss,
    conv1d,
    conv2d,
    conv_lstm1d,
    depthwise_conv2d,
    plateau_step,
    relu,
    sigmoid,
    tanh,
    upsample_nearest,
)
from mmfusion.evaluate import decide, evaluate_dataset, report
from mmfusion.model import ModelConfig, forward, init_params
from mmfusion.preprocess import preprocess_depth, preprocess_radar
from mmfusion.simulate import (
    ChirpConfig,
    DatasetSpec,
    SceneSpec,
    Subject,
    fmcw_beat,
    make_dataset,
    render_depth,
)
from mmfusion.train import TrainConfig, train, train_step

RESULT_LINES = []


def note(criterion, ok, detail):
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULT_LINES.append(line)
    print(line)
    assert ok, line


def skip_note(criterion, detail):
    RESULT_LINES.append(f"criterion {criterion:2d}: SKIP - {detail}")
    print(RESULT_LINES[-1])
    pytest.skip(detail)


def synth_dataset(tmp_path_factory, name, count, fractions, seed, **spec_kw):
    root = str(tmp_path_factory.mktemp(name))
    spec_kw.setdefault("resolution", (8, 16))
    spec_kw.setdefault("range_m", (2.5, 4.0))
    manifest = make_dataset(DatasetSpec(count=count, **spec_kw), seed=seed,
                            out_dir=root)
    manifest = split(manifest, fractions, seed=seed)
    write_manifest(manifest, os.path.join(root, "manifest.json"))
    return root, manifest


def test_criterion_01_operator_oracles():
    """Each operator against direct-summation/recurrence oracles, float64."""
    t0 = time.monotonic()
    rng = np.random.default_rng(11)
    worst = 0.0

    def track(got, want):
        nonlocal worst
        worst = max(worst, float(np.abs(np.asarray(got) - want).max()))

    for trial in range(5):
        x = rng.standard_normal((2, 5, 6, 3))
        k = rng.standard_normal((3, 3, 3, 4))
        track(conv2d(Tensor(x), Tensor(k), stride=(2, 1)).data,
              oracles.conv2d_loops(x, k, stride=(2, 1)))
        track(conv2d(Tensor(x), Tensor(k), padding="valid", dilation=(2, 2)).data,
              oracles.conv2d_loops(x, k, padding="valid", dilation=(2, 2)))

        dk = rng.standard_normal((3, 3, 3))
        track(depthwise_conv2d(Tensor(x), Tensor(dk), stride=(1, 2)).data,
              oracles.depthwise_conv2d_loops(x, dk, stride=(1, 2)))

        x1 = rng.standard_normal((2, 9, 3))
        k1 = rng.standard_normal((5, 3, 2))
        track(conv1d(Tensor(x1), Tensor(k1), stride=2, dilation=2).data,
              oracles.conv1d_loops(x1, k1, stride=2, dilation=2))

        xs = rng.standard_normal((2, 3, 8, 2))
        kx = rng.standard_normal((5, 2, 12))
        kh = rng.standard_normal((5, 3, 12))
        b = rng.standard_normal(12) * 0.1
        track(conv_lstm1d(Tensor(xs), Tensor(kx), Tensor(kh), Tensor(b),
                          stride=2, return_sequences=True).data,
              oracles.conv_lstm1d_loops(xs, kx, kh, b, stride=2))

        p = rng.uniform(0.001, 0.999, (3, 4, 4, 1))
        y = (rng.uniform(size=p.shape) > 0.5).astype(np.float64)
        track(bce_loss(Tensor(p), Tensor(y)).data, oracles.bce_loops(p, y))

        g = rng.standard_normal(3)
        bshape = (1, 1, 1, 3)
        state = BatchNormState(3, dtype=np.float64)
        got = batch_norm(Tensor(x), Tensor(g), Tensor(np.zeros(3)), state,
                         mode="train", update_stats=False).data
        mu = x.mean(axis=(0, 1, 2), keepdims=True)
        var = ((x - mu) ** 2).mean(axis=(0, 1, 2), keepdims=True)
        track(got, (x - mu) / np.sqrt(var + 1e-5) * g.reshape(bshape))

        track(relu(Tensor(x)).data, np.maximum(x, 0.0))
        track(sigmoid(Tensor(x)).data, 1.0 / (1.0 + np.exp(-x)))
        track(tanh(Tensor(x)).data, np.tanh(x))
        track(upsample_nearest(Tensor(x), (2, 3)).data,
              np.repeat(np.repeat(x, 2, axis=1), 3, axis=2))

    elapsed = time.monotonic() - t0
    note(1, worst < 1e-6 and elapsed < 60.0,
         f"operator oracles max abs err {worst:.2e} (< 1e-6), {elapsed:.1f}s (< 60s)")


def test_criterion_02_gradient_integrity():
    """Central finite differences for every operator and the reduced model."""
    t0 = time.monotonic()
    per_op = operator_fd_errors(seed=0)
    worst_op = max(err for _, err in per_op)
    model_worst, n_probes, _ = full_model_fd_check(coords_per_tensor=3)
    elapsed = time.monotonic() - t0
    note(2, worst_op < 1e-4 and model_worst < 1e-4 and elapsed < 300.0,
         f"fd rel err {worst_op:.2e} over {len(per_op)} operators, "
         f"{model_worst:.2e} over {n_probes} model probes (< 1e-4), "
         f"{elapsed:.0f}s (< 300s)")


def test_criterion_03_shape_contract():
    checks = []
    for config in (ModelConfig.spad(), ModelConfig.wide()):
        h, w = config.depth_resolution
        rng = RngStream(3)
        model = init_params(config, rng)
        radar = rng.split("r").normal((2, 1, 256, 4), dtype=np.float32)
        depth = rng.split("d").uniform((2, h, w, 1), 0.1, 1.0, dtype=np.float32)
        record = {}
        out = forward(model, radar, depth, mode="infer", record=record)
        checks.append(record["radar.latent"] == (2, 4, 4, 128))
        checks.append(record["tof.latent"] == (2, 4, 4, 128))
        checks.append(record["fused"] == (2, 4, 4, 256))
        checks.append(out.shape == (2, h, w, 1))
    note(3, all(checks),
         "branch latents 4x4x128, fused 4x4x256, output mask matches input "
         "resolution on 32x64 and 48x64 (exact)")


def test_criterion_04_overfit_capacity(tmp_path_factory):
    t0 = time.monotonic()
    root, manifest = synth_dataset(tmp_path_factory, "overfit", 16,
                                   (1.0, 0.0, 0.0), seed=44)
    config = dataclasses.replace(ModelConfig.tiny(), dropout_rate=0.0)
    model = init_params(config, RngStream(44))
    adam = AdamState(lr=3e-3)
    batch = load_batch(manifest, root, manifest.by_split("train"))
    drop_rng = RngStream(44)
    loss = float("inf")
    steps = 0
    for steps in range(1, 2001):
        loss = train_step(model, adam, batch, drop_rng)
        if loss < 0.05:
            break
    elapsed = time.monotonic() - t0
    note(4, loss < 0.05 and elapsed < 600.0,
         f"16-sample train BCE {loss:.4f} (< 0.05) after {steps} Adam steps "
         f"(<= 2000), {elapsed:.0f}s (< 600s)")


def test_criterion_06_metric_oracle():
    grid = 16
    radius = 5.0
    rng = np.random.default_rng(66)
    decisions = []
    recount = {"TP": 0, "FP": 0, "TN": 0, "FN": 0}
    for i in range(1000):
        pred = np.zeros((grid, grid), np.uint8)
        gt = np.zeros_like(pred)
        for _ in range(int(rng.integers(0, 3))):
            pred[rng.integers(0, grid), rng.integers(0, grid)] = 1
        if rng.random() < 0.5:
            gt[rng.integers(0, grid), rng.integers(0, grid)] = 1
            if rng.random() < 0.3:
                gt[rng.integers(0, grid), rng.integers(0, grid)] = 1
        decoys = [tuple(rng.uniform(0, grid - 1, 2))
                  for _ in range(int(rng.integers(0, 3)))]
        d = decide(pred, gt, radius=radius, frame_id=f"f{i}", decoys=decoys)
        decisions.append(d)

        # independent recount straight from the stated rule
        if not gt.any():
            want = "FP" if pred.any() else "TN"
        elif not pred.any():
            want = "FN"
        else:
            pr = np.argwhere(pred).mean(axis=0)
            gr = np.argwhere(gt).mean(axis=0)
            dist = float(np.hypot(*(pr - gr)))
            if dist > radius:
                want = "FN"
            elif any(np.hypot(pr[0] - dr, pr[1] - dc) <= dist for dr, dc in decoys):
                want = "FN"  # tied or nearer decoy steals the attribution
            else:
                want = "TP"
        assert d.outcome == want, f"frame f{i}: {d.outcome} != {want}"
        recount[want] += 1
    rep = report(decisions)
    counts_ok = (rep.tp, rep.fp, rep.tn, rep.fn) == tuple(
        recount[k] for k in ("TP", "FP", "TN", "FN"))
    total = sum(recount.values())
    ratios_ok = (
        rep.accuracy == 100.0 * (recount["TP"] + recount["TN"]) / total
        and rep.sensitivity == 100.0 * recount["TP"] / (recount["TP"] + recount["FN"])
        and rep.specificity == 100.0 * recount["TN"] / (recount["TN"] + recount["FP"])
        and rep.precision == 100.0 * recount["TP"] / (recount["TP"] + recount["FP"])
    )

    # exhaustive decision table; single-pixel masks give exact distances
    def one_at(r, c):
        m = np.zeros((40, 40), np.uint8)
        m[r, c] = 1
        return m

    empty = np.zeros((40, 40), np.uint8)
    pred5 = one_at(0, 0)   # centroid distance to gt5 is exactly 5
    gt5 = one_at(3, 4)
    near, tie, far = (0.0, 1.0), (3.0, -4.0), (30.0, 30.0)
    table = [
        (empty, empty, 5.0, (), "TN"),
        (empty, empty, 5.0, (near,), "TN"),
        (pred5, empty, 5.0, (), "FP"),
        (pred5, empty, 5.0, (near,), "FP"),
        (empty, gt5, 5.0, (), "FN"),
        (empty, gt5, 5.0, (near,), "FN"),
        # boundary sweep around the stated 5 px radius
        (pred5, gt5, 4.99, (), "FN"),
        (pred5, gt5, 5.0, (), "TP"),
        (pred5, gt5, 5.01, (), "TP"),
        # distances straddling a fixed radius: 3, 5, 7 px pairs
        (one_at(0, 0), one_at(0, 3), 5.0, (), "TP"),
        (one_at(0, 0), one_at(0, 7), 5.0, (), "FN"),
        # decoy attribution: nearer steals, exact tie is a miss, farther is not
        (pred5, gt5, 5.0, (near,), "FN"),
        (pred5, gt5, 5.0, (tie,), "FN"),
        (pred5, gt5, 5.0, (far,), "TP"),
        (pred5, gt5, 5.0, (far, near), "FN"),
    ]
    table_ok = all(
        decide(p, g, radius=r, decoys=dec).outcome == want
        for p, g, r, dec, want in table
    )
    note(6, counts_ok and ratios_ok and table_ok,
         f"1000-decision recount exact ({rep.tp}/{rep.fp}/{rep.tn}/{rep.fn}), "
         f"decision table exhaustive incl. radius {{4.99, 5.0, 5.01}}")


def test_criterion_07_scheduler_trace():
    sched = PlateauSchedule(lr=1e-3, factor=0.5, patience=5, min_lr=1e-6)
    got = []
    for _ in range(80):
        plateau_step(sched, 1.0)  # perfectly flat validation metric
        got.append(sched.lr)
    expected = []
    lr, wait, baseline_set = 1e-3, 0, False
    for _ in range(80):
        if not baseline_set:
            baseline_set = True
        else:
            wait += 1
            if wait >= 5:
                lr = max(lr * 0.5, 1e-6)
                wait = 0
        expected.append(lr)
    note(7, got == expected and got[-1] == 1e-6,
         f"flat-metric lr trace equals hand-derived sequence over 80 epochs, "
         f"clamped at {got[-1]:.0e} (exact)")


def test_criterion_08_determinism_and_resume(tmp_path_factory):
    root, manifest = synth_dataset(tmp_path_factory, "determinism", 24,
                                   (1.0, 0.0, 0.0), seed=88)
    config = ModelConfig.tiny()

    def fresh(ckpt_dir, max_epochs, resume=None):
        cfg = TrainConfig(max_epochs=max_epochs, batch_size=8, initial_lr=1e-3,
                          seed=88, checkpoint_every=2, checkpoint_dir=ckpt_dir,
                          val_fraction=0.0)
        model = init_params(config, RngStream(88))
        return train(model, manifest, root, cfg, resume=resume)

    dir_a = str(tmp_path_factory.mktemp("ck_a"))
    dir_b = str(tmp_path_factory.mktemp("ck_b"))
    dir_c = str(tmp_path_factory.mktemp("ck_c"))
    model_a, log_a = fresh(dir_a, 4)
    model_b, log_b = fresh(dir_b, 4)
    same_trace = log_a.step_losses == log_b.step_losses
    same_params = all(
        model_a.params[k].data.tobytes() == model_b.params[k].data.tobytes()
        for k in model_a.params)

    _, log_c = fresh(dir_c, 2)
    model_r, log_r = fresh(dir_c, 4, resume=os.path.join(dir_c, "epoch-0002.mmaf"))
    stitched = log_c.step_losses + log_r.step_losses
    resume_trace = stitched == log_a.step_losses
    resume_params = all(
        model_r.params[k].data.tobytes() == model_a.params[k].data.tobytes()
        for k in model_a.params)

    n_steps = len(log_a.step_losses)
    note(8, same_trace and same_params and resume_trace and resume_params
         and n_steps >= 10,
         f"same-seed {n_steps}-step traces bitwise equal; interrupt at epoch 2 "
         f"+ resume reproduces the uninterrupted run bitwise")


def test_criterion_09_simulator_physics():
    chirp = ChirpConfig()
    rng = np.random.default_rng(99)
    worst = 0
    for i in range(50):
        r = float(rng.uniform(2.5, 6.5))
        az = float(rng.uniform(-12.0, 12.0))
        scene = SceneSpec(subjects=(Subject(range_m=r, azimuth_deg=az),),
                          seed=int(rng.integers(2**31)))
        trace = fmcw_beat(scene, chirp, noise_sigma=0.01, frame=i).samples[0]
        spectrum = np.abs(np.fft.fft(trace[:, 0].astype(np.float64)
                                     + 1j * trace[:, 1]))
        peak = int(np.argmax(spectrum[: chirp.n_samples // 2]))
        expected = chirp.beat_bin(r)
        worst = max(worst, abs(peak - expected))
    note(9, worst <= 1.0,
         f"FFT peak within one bin of analytic beat frequency over 50 scenes "
         f"(worst {worst:.2f} bins)")


def test_criterion_10_throughput():
    config = ModelConfig.spad()
    model = init_params(config, RngStream(10))
    scene = SceneSpec(subjects=(Subject(range_m=4.0, azimuth_deg=2.0,
                                        carrying=True),))
    trace = fmcw_beat(scene, frame=0)
    frame = render_depth(scene, (32, 64), frame=0)

    def one_frame():
        radar = preprocess_radar(trace).samples[None]
        depth = preprocess_depth(frame).values[None, :, :, None]
        return forward(model, radar, depth, mode="infer")

    for _ in range(3):
        one_frame()
    n = 25
    t0 = time.perf_counter()
    for _ in range(n):
        one_frame()
    fps = n / (time.perf_counter() - t0)
    note(10, fps >= 20.0,
         f"single-frame inference {fps:.1f} fps (>= 20 fps, full width, 32x64)")


def test_criterion_11_dataset_reproduction():
    skip_note(11, "public capture dataset not obtainable in this environment; "
                  "headline-number reproduction deferred (non-gating)")
