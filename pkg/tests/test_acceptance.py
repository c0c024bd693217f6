"""Acceptance criteria 1-8, one printed PASS/FAIL line each.

The end-to-end criteria (4-6) train on the full synthetic corpus and take
tens of minutes on one CPU core. Tolerances are fixed here and mirrored in
the README.
"""
from __future__ import annotations

import json
import time
from collections import OrderedDict
from dataclasses import replace

import numpy as np
import pytest

from conftest import VERDICTS
from rppg_forgery import ndcore as nd
from rppg_forgery.augment import GroupPool, blend_arrays
from rppg_forgery.errors import FormatError
from rppg_forgery.evaluation import (VideoPrediction, build_report, clip_level_accuracy, confusion_and_metrics,
                                     predict_videos)
from rppg_forgery.model import (ModelConfig, ModelParams, adjacency_loss, clip_ce_loss, load_checkpoint,
                                save_checkpoint)
from rppg_forgery.ndcore import Tensor
from rppg_forgery.stmap import (ClipSpec, RoiTrace, SpatioTemporalMap, build_map, extract_video, read_map,
                                segment_clips, write_map)
from rppg_forgery.synth import SynthSpec, default_signatures, generate_dataset, generate_trace
from rppg_forgery.train import (TrainConfig, all_groups, batch_loss, loss_and_grads, make_batch, split_videos,
                                train, write_history)

# ----------------------------------------------------------- pinned values

GRAD_H = 1e-6
GRAD_REL_TOL = 1e-5
GRAD_MIN_COORDS = 100
GRAD_RESOLVABLE = 1e-4  # |g| below this is under ~1e6 x the float64 FD noise at h=1e-6
GRAD_ABS_TOL = 1e-8
MAP_TOL = 1e-12
ADJ_TOL = 1e-6
C4_MIN_ACC = 0.90
C4_MAX_EPOCHS = 6  # well inside the 30-epoch allowance
C4_CONTROL_MAX_ACC = 0.30
C4_CONTROL_EPOCHS = 3
C4_MAX_SECONDS = 20 * 60
C5_NOISE_SCALE = 2.0
C5_SEEDS = (7, 8, 9)
C5_EPOCHS = 3
SPLIT = 0.7

ACCEPT_CONFIG = TrainConfig(lr0=0.1, beta=0.1, k=4, blend_mode="inter", batch_size=32, momentum=0.5, seed=7,
                            max_epochs=C4_MAX_EPOCHS, early_stop_patience=2, stf_width=8, feat_width=8,
                            feat_dim=32, hidden=16)


def verdict(n, ok, detail):
    line = f"ACCEPTANCE criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    print("\n" + line, flush=True)
    VERDICTS.append(line)
    return ok


# ------------------------------------------------------------- criterion 1


def _primitive_cases():
    lstm_w = [(8, 3), (8, 2), (8,)]
    return [
        ("add", lambda a, b: nd.sum_(nd.add(a, b) * a), [(3, 4), (4,)]),
        ("sub", lambda a, b: nd.sum_(nd.sub(a, b) ** 2), [(2, 3), (2, 1)]),
        ("mul", lambda a, b: nd.sum_(nd.mul(a, b)), [(3, 1), (1, 5)]),
        ("div", lambda a, b: nd.sum_(nd.div(a, b * b + 1.0)), [(4,), (4,)]),
        ("neg", lambda a: nd.sum_(nd.neg(a) * a), [(5,)]),
        ("power", lambda a: nd.sum_(nd.power(a * a + 1.0, 1.5)), [(3, 2)]),
        ("exp", lambda a: nd.sum_(nd.exp(a)), [(5,)]),
        ("log", lambda a: nd.sum_(nd.log(a * a + 0.5)), [(5,)]),
        ("sqrt", lambda a: nd.sum_(nd.sqrt(a * a + 0.5)), [(5,)]),
        ("tanh", lambda a: nd.sum_(nd.tanh(a) * a), [(6,)]),
        ("sigmoid", lambda a: nd.sum_(nd.sigmoid(a) ** 2), [(6,)]),
        ("sum", lambda a: nd.sum_(nd.sum_(a, axis=1) ** 2), [(3, 4)]),
        ("mean", lambda a: nd.sum_(nd.mean(a, axis=(0, 2)) ** 2), [(2, 3, 4)]),
        ("reshape", lambda a: nd.sum_(nd.reshape(a, (3, 4)) ** 3), [(2, 6)]),
        ("transpose", lambda a: nd.sum_(nd.transpose(a, (1, 0)) * np.arange(6.0).reshape(3, 2)), [(2, 3)]),
        ("getitem", lambda a: nd.sum_(a[1:, ::2] ** 2), [(3, 5)]),
        ("concat", lambda a, b: nd.sum_(nd.concat([a, b], axis=1) ** 3), [(2, 3), (2, 2)]),
        ("stack", lambda a, b: nd.sum_(nd.stack([a, b], axis=0) ** 3), [(2, 3), (2, 3)]),
        ("matmul", lambda a, b: nd.sum_(nd.tanh(nd.matmul(a, b))), [(3, 4), (4, 2)]),
        ("conv2d", lambda x, k, b: nd.sum_(nd.tanh(nd.conv2d(x, k, b))), [(2, 2, 5, 4), (3, 2, 3, 3), (3,)]),
        ("avg_pool2d", lambda x: nd.sum_(nd.avg_pool2d(x, 2) ** 2), [(2, 1, 5, 4)]),
        ("log_softmax", lambda x: nd.sum_(nd.log_softmax(x) * np.arange(12.0).reshape(3, 4)), [(3, 4)]),
        ("lstm_cell", lambda x, h, c, wi, wh, b: nd.sum_(nd.concat(list(
            nd.lstm_cell(x, h, c, nd.LSTMWeights(wi, wh, b))), axis=1) ** 2), [(2, 3), (2, 2), (2, 2)] + lstm_w),
        ("pearson", lambda x, y: nd.sum_(nd.pearson(x, y, axis=0)), [(7, 3), (7, 3)]),
    ]


def _c1_instance():
    sigs = default_signatures(2)
    spec = ClipSpec(16, 4, k=2)
    videos = [extract_video(generate_trace(sigs[s], s, 24, 30.0, 2, 3, seed=s), spec) for s in (0, 1)]
    groups = all_groups(videos, 2)
    batch = make_batch(groups, GroupPool(groups), "inter", np.random.default_rng(0))
    cfg = ModelConfig(channels=3, num_classes=2, stf_width=2, feat_width=2, feat_dim=3, hidden=2)
    return cfg, ModelParams.init(cfg, np.random.default_rng(0)), batch


def test_criterion_1_gradient_correctness():
    start = time.time()
    rng = np.random.default_rng(2024)
    worst_prim, checked_prim = 0.0, 0
    for name, fn, shapes in _primitive_cases():
        arrays = [rng.normal(size=s) for s in shapes]
        res = nd.check_gradients(lambda ts, fn=fn: fn(*ts), arrays, h=GRAD_H)
        worst_prim = max(worst_prim, res["max_rel_error"])
        checked_prim += res["checked"]

    cfg, params, batch = _c1_instance()
    names = list(params.tensors)
    arrays = [t.data for t in params.tensors.values()]
    _, _, _, grads = loss_and_grads(params, batch, 4, 0.1)

    def scalar(arrs):
        return batch_loss(ModelParams(cfg, OrderedDict(zip(names, map(Tensor, arrs)))), batch, 4, 0.1)[0].item()

    rel_worst = abs_worst = 0.0
    resolvable = 0
    for w, name in enumerate(names):
        for i in range(arrays[w].size):
            analytic = float(grads[name].reshape(-1)[i])
            numeric = nd.numeric_grad(scalar, arrays, w, i, GRAD_H)
            abs_worst = max(abs_worst, abs(analytic - numeric))
            if analytic == 0.0 or abs(analytic) >= GRAD_RESOLVABLE:
                resolvable += 1
                rel_worst = max(rel_worst, nd.relative_error(analytic, numeric))
    total = sum(a.size for a in arrays)
    elapsed = time.time() - start
    ok = (worst_prim < GRAD_REL_TOL and rel_worst < GRAD_REL_TOL and resolvable >= GRAD_MIN_COORDS
          and abs_worst < GRAD_ABS_TOL and elapsed < 60)
    verdict(1, ok, f"primitives: {len(_primitive_cases())} ops, {checked_prim} coords, max rel {worst_prim:.2e}; "
                   f"full loss (T=16,n=2,k=2,K=2): {resolvable}/{total} resolvable coords max rel {rel_worst:.2e}, "
                   f"all coords max abs {abs_worst:.2e}; tol rel {GRAD_REL_TOL:g} abs {GRAD_ABS_TOL:g}; "
                   f"{elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------- criterion 2


def test_criterion_2_map_builder_oracle():
    start = time.time()
    rng = np.random.default_rng(99)
    worst, overlaps_ok, rows = 0.0, True, 0
    for case in range(50):
        n = int(rng.integers(1, 7))
        t = int(rng.integers(2, 65))
        stride = int(rng.integers(1, t))
        frames = t + stride * int(rng.integers(1, 4))
        c = int(rng.integers(1, 4))
        trace = RoiTrace(case, 0, 30.0, rng.normal(100.0, 10.0, size=(frames, n, c)))
        spec = ClipSpec(t, stride)
        video = extract_video(trace, spec)
        for i, start_frame in enumerate(segment_clips(trace, spec)):
            window = trace.frames[start_frame:start_frame + t]
            for mask in range(1, 2 ** n):
                members = [r for r in range(n) if mask >> r & 1]
                oracle = window[:, members, :].mean(axis=1)
                worst = max(worst, float(np.abs(video.clips[i][:, mask - 1] - oracle).max()))
                rows += 1
            assert np.array_equal(video.clips[i], build_map(trace, start_frame, spec).data)
        for i in range(video.num_clips - 1):
            overlaps_ok &= video.clips[i][stride:].tobytes() == video.clips[i + 1][:t - stride].tobytes()
    elapsed = time.time() - start
    ok = worst <= MAP_TOL and overlaps_ok and elapsed < 10
    verdict(2, ok, f"50 traces, {rows} subset rows, max err {worst:.2e} (tol {MAP_TOL:g}); "
                   f"overlaps bit-identical: {overlaps_ok}; {elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------- criterion 3


def test_criterion_3_unit_properties():
    start = time.time()
    rng = np.random.default_rng(3)
    checks = {}
    m1, m2 = rng.normal(size=(4, 16, 7, 3)), rng.normal(size=(4, 16, 7, 3))
    checks["endpoints"] = (blend_arrays(m1, m2, 1.0).tobytes() == m1.tobytes()
                           and blend_arrays(m1, m2, 0.0).tobytes() == m2.tobytes())
    alphas = rng.uniform(size=20)
    checks["symmetry"] = all(blend_arrays(m1, m2, a).tobytes() == blend_arrays(m2, m1, 1.0 - a).tobytes()
                             for a in alphas)
    checks["convexity"] = all(np.all((blend_arrays(m1, m2, a) >= np.minimum(m1, m2))
                                     & (blend_arrays(m1, m2, a) <= np.maximum(m1, m2))) for a in alphas)

    values = [adjacency_loss(rng.normal(size=(4, 16, 3, 2)), 4).item() for _ in range(50)]
    checks["range"] = all(0.0 <= v <= 2.0 for v in values)
    base = rng.normal(size=(3, 16, 3, 2))

    def with_overlap(fn):
        g = base.copy()
        for i in range(2):
            g[i + 1, :12] = fn(g[i, 4:])
        return g
    identical = adjacency_loss(with_overlap(lambda x: x), 4).item()
    pair = base[:2].copy()
    pair[1, :12] = -pair[0, 4:]
    negated = adjacency_loss(pair, 4).item()
    affine = adjacency_loss(with_overlap(lambda x: 2.0 * x + 5.0), 4).item()
    checks["identical"] = abs(identical) < ADJ_TOL
    checks["negated"] = abs(negated - 2.0) < ADJ_TOL
    checks["affine"] = abs(affine) < ADJ_TOL
    ce = {k: clip_ce_loss(np.zeros((4, k)), 0).item() for k in (2, 6, 10)}
    checks["uniform_ce"] = all(abs(v - np.log(k)) < 1e-12 for k, v in ce.items())
    elapsed = time.time() - start
    ok = all(checks.values()) and elapsed < 5
    failed = [k for k, v in checks.items() if not v]
    verdict(3, ok, f"blend endpoint/symmetry/convexity, L_rho range {min(values):.3f}..{max(values):.3f}, "
                   f"identical {identical:.1e}, negated {negated:.7f}, affine {affine:.1e} (tol {ADJ_TOL:g}), "
                   f"uniform CE = ln K; failed: {failed or 'none'}; {elapsed:.2f}s")
    assert ok


# ------------------------------------------------------- criteria 4 and 6


def _corpus(noise_scale=1.0):
    traces = generate_dataset(SynthSpec(num_sources=6, videos_per_source=60, frames_per_video=640, fps=30.0,
                                        n_rois=6, channels=3, seed=42, noise_scale=noise_scale))
    return [extract_video(t, ClipSpec(64, 16)) for t in traces]


def _heldout_accuracy(result, videos):
    preds, _ = predict_videos(result.params, videos, result.config.k)
    return confusion_and_metrics(preds, result.num_classes).average_accuracy, clip_level_accuracy(preds)


@pytest.fixture(scope="module")
def c4_runs():
    start = time.time()
    videos = _corpus()
    tr, va = split_videos(videos, SPLIT, ACCEPT_CONFIG.seed)
    main = train(ACCEPT_CONFIG, tr, va, num_classes=6)
    main_acc = _heldout_accuracy(main, va)
    # label-shuffled control: the held-out videos keep their true labels
    perm = np.random.default_rng(11).permutation([v.source_id for v in tr])
    shuffled = [replace(v, source_id=int(s)) for v, s in zip(tr, perm)]
    control = train(replace(ACCEPT_CONFIG, max_epochs=C4_CONTROL_EPOCHS), shuffled, va, num_classes=6)
    control_acc = _heldout_accuracy(control, va)
    return {"main": main, "main_acc": main_acc, "control": control, "control_acc": control_acc,
            "elapsed": time.time() - start, "split": (len(tr), len(va))}


def test_criterion_4_end_to_end_categorization(c4_runs):
    main, control = c4_runs["main"], c4_runs["control"]
    (acc, clip_acc), (ctl_acc, _) = c4_runs["main_acc"], c4_runs["control_acc"]
    epochs = len(main.history)
    ok = (acc >= C4_MIN_ACC and epochs <= 30 and ctl_acc <= C4_CONTROL_MAX_ACC
          and c4_runs["elapsed"] < C4_MAX_SECONDS)
    verdict(4, ok, f"held-out video-level average accuracy {acc:.4f} (>= {C4_MIN_ACC}), clip-level {clip_acc:.4f}, "
                   f"best epoch {main.best_epoch} of {epochs} run; shuffled-label control {ctl_acc:.4f} "
                   f"(<= {C4_CONTROL_MAX_ACC}, {len(control.history)} epochs); split {c4_runs['split']}; "
                   f"{c4_runs['elapsed']:.0f}s (< {C4_MAX_SECONDS}s)")
    assert ok


# ------------------------------------------------------------- criterion 5


@pytest.fixture(scope="module")
def c5_runs():
    videos = _corpus(noise_scale=C5_NOISE_SCALE)
    runs = {}
    for seed in C5_SEEDS:
        tr, va = split_videos(videos, SPLIT, seed)
        for mode in ("inter", "none"):
            cfg = replace(ACCEPT_CONFIG, seed=seed, blend_mode=mode, max_epochs=C5_EPOCHS)
            result = train(cfg, tr, va, num_classes=6)
            runs[seed, mode] = (result, _heldout_accuracy(result, va)[0])
    return runs


def test_criterion_5_blending_ablation_direction(c5_runs):
    inter = [c5_runs[s, "inter"][1] for s in C5_SEEDS]
    none = [c5_runs[s, "none"][1] for s in C5_SEEDS]
    deltas = [round(a - b, 4) for a, b in zip(inter, none)]
    ok = float(np.mean(inter)) >= float(np.mean(none))
    verdict(5, ok, f"noise x{C5_NOISE_SCALE}, {C5_EPOCHS} epochs, seeds {C5_SEEDS}: inter {np.round(inter, 4)} "
                   f"mean {np.mean(inter):.4f} vs none {np.round(none, 4)} mean {np.mean(none):.4f}; "
                   f"per-seed deltas {deltas}")
    assert ok


# ------------------------------------------------------------- criterion 6


def test_criterion_6_adjacency_constraint_effect(c4_runs, c5_runs):
    runs = [("c4 seed 7 inter", c4_runs["main"])]
    runs += [(f"c5 seed {s} {m}", c5_runs[s, m][0]) for s in C5_SEEDS for m in ("inter", "none")]
    rows, ok = [], True
    for label, result in runs:
        first, last = result.history[0]["loss_rho"], result.history[-1]["loss_rho"]
        ok &= last < first
        rows.append(f"{label}: {first:.5f} -> {last:.5f}")
    verdict(6, ok, "training L_rho epoch 0 -> final epoch (beta=0.1): " + "; ".join(rows))
    assert ok


# ------------------------------------------------------------- criterion 7


def test_criterion_7_determinism_and_formats(tmp_path):
    sigs = default_signatures(3)
    videos = [extract_video(generate_trace(sigs[v % 3], v, 160, 30.0, 2, 2, seed=v), ClipSpec(64, 16))
              for v in range(9)]
    cfg = replace(ACCEPT_CONFIG, max_epochs=2, stf_width=2, feat_width=2, feat_dim=4, hidden=3, batch_size=4)
    blobs = []
    for name in ("h1.json", "h2.json"):
        result = train(cfg, videos[:6], videos[6:])
        write_history(tmp_path / name, result.history)
        blobs.append((tmp_path / name).read_bytes())
    history_same = blobs[0] == blobs[1]

    m = SpatioTemporalMap(videos[0].clips[0].copy(), 0, 0, 0)
    write_map(tmp_path / "m.stmp", m)
    map_same = read_map(tmp_path / "m.stmp").data.tobytes() == m.data.tobytes()
    save_checkpoint(tmp_path / "a.ckpt", result.params, result.checkpoint_extra())
    params, doc = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", params, doc)
    ckpt_same = ((tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
                 and all(params[n].data.tobytes() == result.params[n].data.tobytes() for n in params.tensors))

    rejected = []
    for path, reader in ((tmp_path / "m.stmp", read_map), (tmp_path / "a.ckpt", load_checkpoint)):
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        bad = tmp_path / ("bad" + path.suffix)
        bad.write_bytes(bytes(raw))
        try:
            reader(bad)
            rejected.append(False)
        except FormatError:
            rejected.append(True)
    ok = history_same and map_same and ckpt_same and all(rejected)
    verdict(7, ok, f"history.json bit-identical: {history_same}; STMP round trip: {map_same}; "
                   f"RPPG round trip: {ckpt_same}; corrupt magic rejected (map, checkpoint): {rejected}")
    assert ok


# ------------------------------------------------------------- criterion 8


def test_criterion_8_aggregation_contract():
    checks = {}
    p = VideoPrediction.from_group_probs(0, 0, [[0.6, 0.4], [0.7, 0.3]])
    checks["sum"] = p.aggregate.tolist() == [0.6 + 0.7, 0.4 + 0.3] and p.predicted == 0
    single = VideoPrediction.from_group_probs(1, 1, [[0.2, 0.5, 0.3]])
    checks["single"] = single.aggregate.tolist() == [0.2, 0.5, 0.3] and single.predicted == 1
    rng = np.random.default_rng(8)
    checks["sum_vs_mean"] = all(
        VideoPrediction.from_group_probs(0, 0, probs).predicted == int(np.argmax(probs.mean(axis=0)))
        for probs in (rng.dirichlet(np.ones(4), size=int(rng.integers(1, 9))) for _ in range(200)))
    checks["ties_lowest"] = VideoPrediction.from_group_probs(0, 0, [[0.5, 0.5]]).predicted == 0
    # video right by aggregation while a third of its groups are wrong
    mixed = VideoPrediction.from_group_probs(0, 0, [[0.9, 0.1], [0.6, 0.4], [0.45, 0.55]])
    report = build_report([mixed], 2)
    checks["both_levels"] = (report["video_level_accuracy"] == 1.0
                             and abs(report["clip_level_accuracy"] - 2 / 3) < 1e-15
                             and "average_accuracy" in report)
    json.dumps(report)
    ok = all(checks.values())
    verdict(8, ok, f"[0.6,0.4]+[0.7,0.3] -> {p.aggregate.tolist()} class {p.predicted}; single group, "
                   f"argmax(sum)=argmax(mean) x200, tie -> lowest; video-level {report['video_level_accuracy']} vs "
                   f"clip-level {report['clip_level_accuracy']:.4f}; failed: "
                   f"{[k for k, v in checks.items() if not v] or 'none'}")
    assert ok
