"""Acceptance suite: every exit criterion at its stated tolerance.

Each test prints one ``[ACCEPTANCE] criterion N: PASS`` line (visible with
``pytest -s``). The ablation-based criteria (7, 8, and the clean-data control)
train nine-plus models and dominate the runtime; set
``BAANET_ACCEPT_SKIP_SLOW=1`` to skip only those during development. The full
suite must pass without the skip before release.
"""

import math
import os
import time

import numpy as np
import pytest

from baanet import evaluator as EV
from baanet import gate as G
from baanet import illumination as IL
from baanet import losses as L
from baanet import tensor as T
from baanet.cli import main, run_gradient_suite
from baanet.detector import BoundingBox, Detection, GroundTruth

from test_evaluator import brute_force_curve, random_images

SKIP_SLOW = pytest.mark.skipif(
    os.environ.get("BAANET_ACCEPT_SKIP_SLOW") == "1",
    reason="slow training-based acceptance criteria skipped by BAANET_ACCEPT_SKIP_SLOW=1",
)

# training recipe for the ablation criteria: the desk-scale step count needs a
# larger learning rate and more passes than the full-scale defaults
ABLATION_SEEDS = (0, 1, 2)
ABLATION_EPOCHS = 24
ABLATION_LR = 4e-3


def _pass(criterion, detail):
    print(f"[ACCEPTANCE] criterion {criterion}: PASS - {detail}")


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    reports = run_gradient_suite("all", tolerance=1e-4, quiet=True)
    elapsed = time.perf_counter() - start
    failures = [name for name, rep in reports if not rep.passed]
    assert not failures, f"gradient checks failed: {failures}"
    assert elapsed < 300.0, f"gradient suite took {elapsed:.0f}s (budget 300s)"
    worst = max(rep.max_rel_error for _, rep in reports)
    _pass(1, f"{len(reports)} checks, worst rel error {worst:.2e}, {elapsed:.0f}s")


def test_criterion_2_weighting_curve_endpoints():
    cfg = IL.IllumConfig(k1=0.5, k2=3.0)
    assert IL.modified_sigmoid(0.5, 0.5, cfg) == (0.5, 0.5)
    w_r_day, _ = IL.modified_sigmoid(1.0, 0.0, cfg)
    assert abs(w_r_day - 0.622459) <= 1e-6
    w_r_night, _ = IL.modified_sigmoid(0.0, 1.0, cfg)
    assert abs(w_r_night - 0.047426) <= 1e-6
    for w_d in np.linspace(0.0, 1.0, 1000):
        w_r, w_t = IL.modified_sigmoid(w_d, 1.0 - w_d, cfg)
        assert w_r + w_t == 1.0
    _pass(2, f"endpoints 0.5/{w_r_day:.6f}/{w_r_night:.6f}, sum exact over 1000-point sweep")


def test_criterion_3_gate_degenerations():
    store = T.ParameterStore()
    params = G.GateParams.create(store, "g", 3, 4, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    r = T.Tensor(rng.uniform(-2, 2, (2, 3, 5, 5)))
    t = T.Tensor(rng.uniform(-2, 2, (2, 3, 5, 5)))
    out = G.gate_forward(r, t, params, w_r=0.0, w_t=0.0)
    assert np.array_equal(out.r_out.array, r.array)
    assert np.array_equal(out.t_out.array, t.array)

    for _, p in store.items():
        p.array[...] = 0.0
    out = G.gate_forward(r, t, params, w_r=0.4, w_t=0.6)
    for gate_tensor in (out.w_tc, out.w_rc, out.w_ts, out.w_rs):
        assert np.all(gate_tensor.array == 0.5)
    _pass(3, "zero weights give exact identity; zero params give exactly-0.5 gates")


def test_criterion_4_cascade_confidence_fixture():
    c1, c_r, c_t = 0.8, 0.6, 0.9

    def c_final(w_r):
        return c1 * (w_r * c_r + (1.0 - w_r) * c_t)

    assert abs(c_final(0.3) - 0.648) <= 1e-12
    assert abs(c_final(0.0) + c_final(1.0) - 2.0 * c_final(0.5)) <= 1e-12
    _pass(4, "c_final fixture 0.648 exact; affine in the RGB weight at three points")


def test_criterion_5_focal_fixtures():
    cfg = L.LossConfig(alpha=0.25, gamma=2.0)
    pos = L.focal_loss(T.Tensor([0.5]), np.array([0]), cfg).item()
    neg = L.focal_loss(T.Tensor([0.5]), np.array([L.LABEL_NEGATIVE]), cfg).item()
    assert abs(pos - 0.043322) <= 1e-6
    assert abs(neg - 0.129966) <= 1e-6

    rng = np.random.default_rng(2)
    scores = rng.uniform(0.02, 0.98, 40)
    labels = rng.integers(-2, 3, 40)
    plain = L.focal_loss(T.Tensor(scores), labels, L.LossConfig(alpha=0.25, gamma=0.0)).item()
    n_pos = int((labels >= 0).sum())
    ce = 0.0
    for c, lb in zip(scores, labels):
        if lb >= 0:
            ce -= 0.25 * math.log(c)
        elif lb == L.LABEL_NEGATIVE:
            ce -= 0.75 * math.log(1.0 - c)
    ce /= max(1, n_pos)
    assert abs(plain - ce) <= 1e-12
    _pass(5, f"fixtures {pos:.6f}/{neg:.6f}; gamma=0 reduction matches weighted CE to 1e-12")


def test_criterion_6_evaluator_oracle():
    cfg = EV.EvalConfig(reasonable_min_height=10.0)
    rng = np.random.default_rng(1234)
    checked = 0
    while checked < 20:
        images = random_images(rng)
        matches = [EV.match(im.detections, im.ground_truths, cfg) for im in images]
        if sum(m.n_reasonable for m in matches) == 0:
            continue
        got = EV.mr_fppi_curve(matches, cfg)
        want_mr2, want_points = brute_force_curve(images, cfg)
        assert abs(got.mr2 - want_mr2) <= 1e-12
        for (_, gm), wm in zip(got.points, want_points):
            assert abs(gm - wm) <= 1e-12
        checked += 1

    perfect = [
        EV.EvalImage("a", "day", [GroundTruth(BoundingBox(20, 20, 8, 16))],
                     [Detection(BoundingBox(20, 20, 8, 16), 0.99)])
    ]
    curve = EV.mr_fppi_curve([EV.match(im.detections, im.ground_truths, cfg) for im in perfect], cfg)
    assert curve.mr2 <= 1e-9
    empty = EV.mr_fppi_curve([EV.match([], [GroundTruth(BoundingBox(20, 20, 8, 16))], cfg)], cfg)
    assert empty.mr2 == 1.0
    _pass(6, f"{checked} randomized fixtures match brute force to 1e-12; perfect/empty endpoints exact")


# ---------------------------------------------------------------------------
# Training-based criteria


def _read_ablation(path):
    rows = {}
    for line in path.read_text().splitlines()[1:]:
        mode, subset, seed, mr2 = line.split(",")
        rows[(mode, subset, seed)] = float(mr2)
    return rows


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    """Default synthetic set (500 train / 100 test, noise on) + full ablation."""
    root = tmp_path_factory.mktemp("accept")
    data = root / "data"
    assert main([
        "gen-data", "--n", "600", "--train-ratio", "0.8333333333333334",
        "--seed", "20", "--out", str(data), "--quiet",
    ]) == 0
    out = root / "ablation"
    code = main([
        "ablate", "--data", str(data),
        "--seeds", ",".join(str(s) for s in ABLATION_SEEDS),
        "--epochs", str(ABLATION_EPOCHS), "--lr", str(ABLATION_LR),
        "--out", str(out), "--quiet",
    ])
    assert code == 0
    return _read_ablation(out / "ablation.csv"), out


@SKIP_SLOW
def test_criterion_7_ablation_ordering(ablation):
    rows, _ = ablation
    mean = {mode: rows[(mode, "all", "mean")] for mode in ("baa_gate", "baa_gate_no_illum", "concat_baseline")}
    assert mean["baa_gate"] <= mean["baa_gate_no_illum"] <= mean["concat_baseline"], mean
    # strict gap: the full model must clear the baseline by at least the
    # larger of the two modes' cross-seed spreads
    spread = max(rows[("baa_gate", "all", "spread")], rows[("concat_baseline", "all", "spread")])
    gap = mean["concat_baseline"] - mean["baa_gate"]
    assert gap >= spread, f"gap {gap:.4f} < cross-seed spread {spread:.4f}"
    _pass(7, f"mean mr2 {mean['baa_gate']:.4f} <= {mean['baa_gate_no_illum']:.4f} "
             f"<= {mean['concat_baseline']:.4f}; gap {gap:.4f} >= spread {spread:.4f}")


@SKIP_SLOW
def test_criterion_8_night_advantage(ablation):
    rows, _ = ablation
    night_gain = rows[("concat_baseline", "night", "mean")] - rows[("baa_gate", "night", "mean")]
    day_gain = rows[("concat_baseline", "day", "mean")] - rows[("baa_gate", "day", "mean")]
    assert night_gain >= day_gain, f"night gain {night_gain:.4f} < day gain {day_gain:.4f}"
    _pass(8, f"night improvement {night_gain:.4f} >= day improvement {day_gain:.4f}")


@SKIP_SLOW
def test_training_loss_decreases(ablation):
    # final-epoch total loss under first-epoch loss on the default set
    _, out = ablation
    metrics = (out / f"baa_gate_s{ABLATION_SEEDS[0]}" / "metrics.csv").read_text().splitlines()
    first = float(metrics[1].split(",")[-1])
    last = float(metrics[-1].split(",")[-1])
    assert last < first, f"loss did not decrease: {first:.4f} -> {last:.4f}"
    _pass("7b", f"training loss decreased {first:.3f} -> {last:.3f} on the default set")


@SKIP_SLOW
def test_clean_data_control(tmp_path):
    """With all noise off the three modes are statistically indistinguishable."""
    data = tmp_path / "clean"
    assert main([
        "gen-data", "--n", "240", "--train-ratio", "0.8333333333333334",
        "--noise-profile", "none", "--seed", "21", "--out", str(data), "--quiet",
    ]) == 0
    out = tmp_path / "ablation"
    assert main([
        "ablate", "--data", str(data), "--seeds", "0,1",
        "--epochs", "12", "--lr", str(ABLATION_LR), "--out", str(out), "--quiet",
    ]) == 0
    rows = _read_ablation(out / "ablation.csv")
    intervals = {}
    for mode in ("baa_gate", "baa_gate_no_illum", "concat_baseline"):
        vals = [rows[(mode, "all", s)] for s in ("0", "1")]
        intervals[mode] = (min(vals), max(vals))
    names = list(intervals)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            lo = max(intervals[a][0], intervals[b][0])
            hi = min(intervals[a][1], intervals[b][1])
            assert lo <= hi + 0.05, f"{a} and {b} separated beyond tolerance: {intervals}"
    _pass("7c", f"clean-data control: overlapping spreads {intervals}")


def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "fast.cfg"
    cfg.write_text(
        "run.epochs = 2\nrun.batch_size = 4\nrun.learning_rate = 0.002\n"
        "model.stage_channels = 4,8\nmodel.anchor_heights = 10.0,20.0\nillum.resize_hw = 16\n"
    )
    artifacts = []
    for tag in ("one", "two"):
        data = tmp_path / tag / "data"
        assert main(["gen-data", "--n", "10", "--image-size", "32", "--seed", "13",
                     "--out", str(data), "--quiet"]) == 0
        run = tmp_path / tag / "run"
        assert main(["train", "--data", str(data), "--config", str(cfg), "--seed", "5",
                     "--out", str(run), "--quiet"]) == 0
        ev = tmp_path / tag / "eval"
        assert main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--data", str(data),
                     "--out", str(ev), "--quiet"]) == 0
        tree = {}
        for base in (data, run, ev):
            for p in sorted(base.rglob("*")):
                if p.is_file():
                    tree[str(p.relative_to(tmp_path / tag))] = p.read_bytes()
        artifacts.append(tree)
    assert artifacts[0].keys() == artifacts[1].keys()
    diffs = [k for k in artifacts[0] if artifacts[0][k] != artifacts[1][k]]
    assert not diffs, f"non-deterministic artifacts: {diffs}"
    _pass(9, f"{len(artifacts[0])} artifacts bit-identical across two seeded runs "
             "(dataset, checkpoint, metrics, detections, eval CSVs)")
