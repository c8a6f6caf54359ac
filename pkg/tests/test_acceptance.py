"""Acceptance suite: one test per release criterion, at the stated tolerances.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
PASS lines and the phantom experiment summary. The phantom experiment
(criteria 5 and 8) trains a classifier from scratch and takes a few minutes.
"""

import json
import math
import time

import numpy as np
import pytest

from nodulepipe import cli, froc_eval, hs2, lhi, phantom, volume_io
from nodulepipe import candidate_pipeline as cp
from nodulepipe import detection_geometry as dg
from nodulepipe.candidate_pipeline import GroundTruthNodule, NoduleCandidate


def _report(num, name, elapsed, detail=""):
    suffix = f" [{detail}]" if detail else ""
    print(f"\ncriterion {num} ({name}): PASS in {elapsed:.1f}s{suffix}")


# -- criterion 1: CPM arithmetic ------------------------------------------------

ROW_BASELINE = (0.659, 0.745, 0.819, 0.865, 0.906, 0.933, 0.946)
ROW_DETECTOR = (0.848, 0.876, 0.905, 0.933, 0.943, 0.957, 0.970)
ROW_FILTERED = (0.904, 0.914, 0.933, 0.957, 0.971, 0.971, 0.971)


def test_criterion_1_cpm_arithmetic():
    t0 = time.monotonic()
    assert froc_eval.cpm(ROW_BASELINE) == pytest.approx(0.839, abs=0.0005)
    assert froc_eval.cpm(ROW_DETECTOR) == pytest.approx(0.919, abs=0.0005)
    computed, matches = froc_eval.cpm_consistency(ROW_FILTERED, 0.952)
    assert computed == pytest.approx(0.946, abs=0.0005)
    assert not matches, "published 0.952 must be flagged as inconsistent"
    elapsed = time.monotonic() - t0
    assert elapsed < 1.0
    _report(1, "CPM arithmetic", elapsed)


# -- criterion 2: LHI oracle equivalence ----------------------------------------

def lhi_pixel_oracle(stack, tau, delta_threshold):
    slices = stack.tolist()
    n, h, w = len(slices), len(slices[0]), len(slices[0][0])
    out = [[0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            f = 0
            for s in range(1, n):
                if abs(slices[s][y][x] - slices[s - 1][y][x]) > delta_threshold:
                    f = tau
                elif f > 0:
                    f -= 1
            out[y][x] = f
    return np.array(out, dtype=np.int32)


def test_criterion_2_lhi_oracle_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(202)
    params = lhi.LhiParams(tau=10, delta_threshold=30.0, window_slices=11)
    for _ in range(1000):
        stack = rng.integers(-1000, 400, size=(11, 32, 32), dtype=np.int16)
        expected = lhi_pixel_oracle(stack, params.tau, params.delta_threshold)
        assert np.array_equal(lhi.compute_lhi(stack, params), expected)
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    _report(2, "LHI oracle equivalence", elapsed, "1000 stacks, integer-exact")


# -- criterion 3: gradient correctness ------------------------------------------

class SuffixLoss:
    """Loss evaluator for finite differences that reuses activations upstream
    of the perturbed layer. A perturbation cannot change activations computed
    before its layer, so the suffix recomputation yields bit-identical losses
    to a full forward pass (asserted in `guard`)."""

    def __init__(self, model, images, labels):
        self.model = model
        self.images = images
        self.y = np.asarray(labels)
        x = hs2._check_batch(model, images)
        self.n = x.shape[0]
        _, self.cache = hs2._forward_batch(model, x, keep_cache=True)

    def _finish(self, logits):
        probs = hs2._softmax(logits)
        return float(-np.log(probs[np.arange(self.n), self.y]).mean())

    def loss(self, stage):
        if stage == "conv1":
            return hs2.batch_loss(self.model, self.images, self.y)
        p = hs2._float64_params(self.model)
        c = self.cache
        if stage == "conv2":
            a2, _ = hs2._conv_forward(c["p1"], p["conv2_w"], p["conv2_b"])
            p2, _ = hs2._pool_forward(np.maximum(a2, 0.0))
            flat = p2.reshape(self.n, -1)
        else:
            flat = c["flat"]
        if stage in ("conv2", "fc1"):
            z1 = np.maximum(flat @ p["fc1_w"].T + p["fc1_b"], 0.0)
        else:
            z1 = c["z1"]
        if stage in ("conv2", "fc1", "fc2"):
            z2 = np.maximum(z1 @ p["fc2_w"].T + p["fc2_b"], 0.0)
        else:
            z2 = c["z2"]
        if stage in ("conv2", "fc1", "fc2", "fc3"):
            z3 = np.maximum(z2 @ p["fc3_w"].T + p["fc3_b"], 0.0)
        else:
            z3 = c["z3"]
        return self._finish(z3 @ p["out_w"].T + p["out_b"])

    def guard(self):
        reference = hs2.batch_loss(self.model, self.images, self.y)
        for stage in ("conv1", "conv2", "fc1", "fc2", "fc3", "out"):
            assert self.loss(stage) == reference, f"suffix path diverged at {stage}"


PARAM_STAGE = {
    "conv1_w": "conv1", "conv1_b": "conv1",
    "conv2_w": "conv2", "conv2_b": "conv2",
    "fc1_w": "fc1", "fc1_b": "fc1",
    "fc2_w": "fc2", "fc2_b": "fc2",
    "fc3_w": "fc3", "fc3_b": "fc3",
    "out_w": "out", "out_b": "out",
}


def test_criterion_3_gradient_correctness():
    # Central differences are only meaningful where the loss is smooth: a ReLU
    # or pool-argmax kink inside the +-eps window makes FD measure an average
    # of one-sided slopes. This seed was verified to keep every activation
    # margin clear of the perturbation's influence (worst rel err ~1e-6).
    t0 = time.monotonic()
    rng = np.random.default_rng(4)
    model = hs2.initialize(4, in_size=48, conv_channels=(4, 6), fc_sizes=(64, 32, 16))
    images = rng.random((4, 48, 48))
    labels = np.array([0, 1, 1, 0])

    grads = hs2.backward(model, images, labels)
    evaluator = SuffixLoss(model, images, labels)
    evaluator.guard()

    eps = 1e-4
    checked = 0
    worst = 0.0
    for name, arr in model.params.items():
        stage = PARAM_STAGE[name]
        grad = grads[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = np.float32(orig + eps)
            hi_w = float(arr[idx])
            hi = evaluator.loss(stage)
            arr[idx] = np.float32(orig - eps)
            lo_w = float(arr[idx])
            lo = evaluator.loss(stage)
            arr[idx] = orig
            fd = (hi - lo) / (hi_w - lo_w)  # actual float32 step, not nominal 2*eps
            g = float(grad[idx])
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-8)
            worst = max(worst, rel)
            assert rel < 1e-3, (name, idx, fd, g)
            checked += 1
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    _report(3, "gradient correctness", elapsed,
            f"{checked} parameters, worst rel err {worst:.2e}")


# -- criterion 4: FROC oracle equivalence ---------------------------------------

def froc_brute_force(candidates, ground_truth, scan_count):
    def match(cands):
        order = sorted(
            range(len(cands)),
            key=lambda i: (-cands[i].score, cands[i].center_mm, cands[i].scan_id),
        )
        detected = [False] * len(ground_truth)
        tp = fp = 0
        for i in order:
            c = cands[i]
            hits = [
                j
                for j, g in enumerate(ground_truth)
                if g.scan_id == c.scan_id
                and math.dist(c.center_mm, g.center_mm) <= g.diameter_mm / 2
            ]
            if not hits:
                fp += 1
                continue
            fresh = [j for j in hits if not detected[j]]
            if fresh:
                detected[fresh[0]] = True
                tp += 1
        return tp, fp

    points = []
    for t in sorted({c.score for c in candidates}, reverse=True):
        tp, fp = match([c for c in candidates if c.score >= t])
        points.append((t, fp / scan_count, tp / len(ground_truth)))
    levels = []
    for level in froc_eval.FP_LEVELS:
        ok = [s for _, f, s in points if f <= level]
        levels.append(max(ok) if ok else 0.0)
    return tuple(points), tuple(levels), sum(levels) / len(levels)


def test_criterion_4_froc_oracle_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(404)
    for _ in range(200):
        n_scans = int(rng.integers(1, 11))
        scans = [f"s{i}" for i in range(n_scans)]
        gts = [
            GroundTruthNodule(
                str(rng.choice(scans)),
                tuple(float(v) for v in rng.uniform(0, 80, 3)),
                float(rng.uniform(4, 12)),
            )
            for _ in range(int(rng.integers(1, 21)))
        ]
        cands = [
            NoduleCandidate(
                str(rng.choice(scans)),
                tuple(float(v) for v in rng.uniform(0, 80, 3)),
                5.0,
                round(float(rng.uniform(0, 1)), 2),
            )
            for _ in range(int(rng.integers(0, 81)))
        ]
        report = froc_eval.froc(cands, gts, n_scans)
        points, levels, cpm_val = froc_brute_force(cands, gts, n_scans)
        assert report.operating_points == points
        assert report.level_sensitivities == levels
        assert report.cpm == cpm_val
    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    _report(4, "FROC oracle equivalence", elapsed, "200 randomized instances, exact")


# -- criteria 5 and 8: phantom experiment through the CLI -----------------------

TRAIN_SCANS = 40
EVAL_SCANS = 60
LHI_PARAMS = lhi.LhiParams()  # tau 10, delta 30
BLOB_HU = -400.0
EXPERIMENT_NOISE = 5.0


def _detection_patches(volume, nodules, scan_id):
    """Candidates through the inference path, labeled by the hit rule."""
    cands = cp.detect_blobs(volume, BLOB_HU, 3.0, 30.0, scan_id)
    cands = cp.threshold_candidates(cands, 0.1)
    cands = cp.dedup_candidates(cands, {scan_id: volume}, 0.1)
    images, labels = [], []
    for cand in cands:
        hit = any(
            math.dist(cand.center_mm, g.center_mm) <= g.diameter_mm / 2 for g in nodules
        )
        images.append(lhi.lhi_for_candidate(volume, cand, LHI_PARAMS).normalized())
        labels.append(1 if hit else 0)
    return images, labels


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    t0 = time.monotonic()
    root = tmp_path_factory.mktemp("experiment")

    # training set: disjoint scans, patches via the detection path
    images, labels = [], []
    for i in range(TRAIN_SCANS):
        spec = phantom.sample_spec(
            seed=11_000 + i, n_spheres=3, n_tubes=3,
            noise_sigma_hu=EXPERIMENT_NOISE, scan_id=f"train{i:03d}",
        )
        volume, nodules, _ = phantom.generate(spec)
        imgs, lbls = _detection_patches(volume, nodules, spec.scan_id)
        images += imgs
        labels += lbls
    images = np.stack(images)
    labels = np.asarray(labels, dtype=np.int64)

    rng = np.random.default_rng(500)
    order = rng.permutation(len(labels))
    n_held_out = len(labels) // 3
    held_idx, train_idx = order[:n_held_out], order[n_held_out:]

    model = hs2.initialize(505)
    config = hs2.TrainConfig(learning_rate=0.01, epochs=30, batch_size=16, seed=505)
    model, history = hs2.train(model, images[train_idx], labels[train_idx], config)
    held_probs = hs2.predict_proba(model, images[held_idx])
    accuracy = float(((held_probs >= 0.5).astype(int) == labels[held_idx]).mean())

    model_path = root / "model.bin"
    model_path.write_bytes(hs2.save_model(model))

    # evaluation set: ~150 spheres and ~300 tubes over 60 scans
    eval_dir = root / "eval"
    eval_dir.mkdir()
    all_nodules = []
    planted_spheres = planted_tubes = 0
    for i in range(EVAL_SCANS):
        spec = phantom.sample_spec(
            seed=21_000 + i, n_spheres=2 + i % 2, n_tubes=5,
            noise_sigma_hu=EXPERIMENT_NOISE, scan_id=f"eval{i:03d}",
        )
        volume, nodules, tissues = phantom.generate(spec)
        volume_io.save_mhd(volume, eval_dir / f"{spec.scan_id}.mhd")
        all_nodules += nodules
        planted_spheres += len(nodules)
        planted_tubes += len(tissues)
    annotations_path = root / "annotations.csv"
    annotations_path.write_text(cp.write_annotations_csv(all_nodules))

    run_dirs = [root / "run_a", root / "run_b"]
    for out_dir in run_dirs:
        code = cli.main([
            "pipeline", "run",
            "--volumes", str(eval_dir),
            "--model", str(model_path),
            "--annotations", str(annotations_path),
            "--out-dir", str(out_dir),
            "--seed", "7",
        ])
        assert code == 0

    fp_report = json.loads((run_dirs[0] / "fp_report.json").read_text())
    return {
        "accuracy": accuracy,
        "history": history,
        "train_size": len(train_idx),
        "held_out_size": n_held_out,
        "planted_spheres": planted_spheres,
        "planted_tubes": planted_tubes,
        "fp_report": fp_report,
        "run_dirs": run_dirs,
        "elapsed": time.monotonic() - t0,
    }


def test_criterion_5_phantom_fp_reduction(experiment):
    report = experiment["fp_report"]
    accuracy = experiment["accuracy"]
    drop = report["sensitivity_before"] - report["sensitivity_after"]
    detail = (
        f"acc {accuracy:.3f} on {experiment['held_out_size']} held out; "
        f"{experiment['planted_spheres']} spheres / {experiment['planted_tubes']} tubes; "
        f"FP {report['fp_before']} -> {report['fp_after']} "
        f"({report['percent_reduction']}%); "
        f"sens {report['sensitivity_before']:.3f} -> {report['sensitivity_after']:.3f}"
    )
    assert accuracy >= 0.90, detail
    assert report["percent_reduction"] >= 50.0, detail
    assert drop <= 0.02 + 1e-9, detail
    assert experiment["elapsed"] < 900.0
    _report(5, "phantom FP reduction", experiment["elapsed"], detail)


def test_criterion_8_deterministic_reproducibility(experiment):
    t0 = time.monotonic()
    run_a, run_b = experiment["run_dirs"]
    compared = []
    for path in sorted(run_a.iterdir()):
        if path.name == "manifest.json":  # timestamps live only here
            continue
        twin = run_b / path.name
        assert twin.exists(), path.name
        assert path.read_bytes() == twin.read_bytes(), path.name
        compared.append(path.name)
    assert "candidates_before.csv" in compared
    assert "candidates_after.csv" in compared
    assert "froc_after.json" in compared
    _report(8, "deterministic reproducibility", time.monotonic() - t0,
            f"{len(compared)} files byte-identical across runs")


# -- criterion 6: geometry oracles ----------------------------------------------

def test_criterion_6_geometry_oracles():
    t0 = time.monotonic()
    rng = np.random.default_rng(606)

    # IoU vs Monte-Carlo voxel sampling, 500 random cube pairs
    for _ in range(500):
        a = dg.Box3(tuple(rng.uniform(0, 20, 3)), float(rng.uniform(1, 12)))
        b = dg.Box3(tuple(rng.uniform(0, 20, 3)), float(rng.uniform(1, 12)))
        lo = np.array([min(a.bounds(ax)[0], b.bounds(ax)[0]) for ax in range(3)])
        hi = np.array([max(a.bounds(ax)[1], b.bounds(ax)[1]) for ax in range(3)])
        pts = rng.uniform(lo, hi, size=(60_000, 3))
        in_a = (np.abs(pts - np.array(a.center)) <= a.side / 2).all(axis=1)
        in_b = (np.abs(pts - np.array(b.center)) <= b.side / 2).all(axis=1)
        union = np.count_nonzero(in_a | in_b)
        estimate = np.count_nonzero(in_a & in_b) / union if union else 0.0
        assert dg.iou3(a, b) == pytest.approx(estimate, abs=0.01)

    # NMS vs brute-force greedy, 200 random sets
    def brute(cands, threshold):
        def key(sb):
            cx, cy, cz = sb.box.center
            return (-sb.score, cz, cy, cx)

        remaining = sorted(cands, key=key)
        kept = []
        while remaining:
            best = remaining.pop(0)
            kept.append(best)
            remaining = [s for s in remaining if dg.iou3(best.box, s.box) <= threshold]
        return kept

    for _ in range(200):
        cands = [
            dg.ScoredBox(
                dg.Box3(tuple(rng.uniform(0, 12, 3)), float(rng.uniform(1, 8))),
                float(rng.uniform(0, 1)),
            )
            for _ in range(int(rng.integers(1, 25)))
        ]
        threshold = float(rng.uniform(0, 0.6))
        assert dg.nms(cands, threshold) == brute(cands, threshold)

    # tiling coverage, 100 random dims
    for _ in range(100):
        dims = tuple(int(v) for v in rng.integers(6, 48, 3))
        window = int(rng.integers(3, 7))
        overlap = int(rng.integers(0, window))
        covered = np.zeros(dims[::-1], dtype=bool)
        for x, y, z in dg.tile_volume(dims, window, overlap):
            assert x + window <= dims[0] and y + window <= dims[1] and z + window <= dims[2]
            covered[z : z + window, y : y + window, x : x + window] = True
        assert covered.all()

    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    _report(6, "geometry oracles", elapsed, "IoU MC, NMS brute force, tiling coverage")


# -- criterion 7: format round trips --------------------------------------------

def test_criterion_7_format_round_trips():
    t0 = time.monotonic()
    rng = np.random.default_rng(707)

    # MHD parse/write, bit-exact voxels and geometry
    for _ in range(20):
        dims = tuple(int(v) for v in rng.integers(1, 12, 3))
        volume = volume_io.CtVolume(
            voxels=rng.integers(-1024, 3000, size=dims[::-1], dtype=np.int16),
            spacing=tuple(float(round(v, 4)) for v in rng.uniform(0.3, 3.0, 3)),
            origin=tuple(float(round(v, 4)) for v in rng.uniform(-300, 300, 3)),
        )
        header, raw = volume_io.write_mhd(volume)
        again = volume_io.parse_mhd(header, raw)
        assert np.array_equal(again.voxels, volume.voxels)
        assert again.spacing == volume.spacing
        assert again.origin == volume.origin

    # model save/load, bit-exact payload and identical forward outputs
    for seed in range(5):
        model = hs2.initialize(seed, in_size=8, conv_channels=(2, 3), fc_sizes=(8, 6, 4))
        payload = hs2.save_model(model)
        clone = hs2.load_model(payload)
        assert hs2.save_model(clone) == payload
        grid = rng.random((8, 8))
        assert hs2.forward(model, grid) == hs2.forward(clone, grid)

    # candidate CSV, lossless at (better than) 6 significant digits
    cands = [
        NoduleCandidate(
            f"scan{i}",
            tuple(float(v) for v in rng.uniform(-400, 400, 3)),
            float(rng.uniform(3, 30)),
            float(rng.uniform(0, 1)),
        )
        for i in range(200)
    ]
    again = cp.load_candidates_csv(cp.write_candidates_csv(cands))
    assert again == cands

    elapsed = time.monotonic() - t0
    assert elapsed < 5.0
    _report(7, "format round trips", elapsed, "MHD, model, candidate CSV")
