"""Acceptance gate. Each test records a PASS/FAIL verdict that is printed in the
terminal summary; the desk-scale empirical checks share one trained model.

Set HUELOC_ACCEPTANCE_CACHE to a directory to reuse the trained checkpoint
across runs (off by default, so a plain run trains from scratch).
"""
import hashlib
import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import optimize

from hueloc import baseline_choi, cli, colorops, dataset, evaluate, localize, model
from hueloc.localize import InconsistencyMap

C1 = "1 closed-form unit suite"
C2 = "2 architectural invariants"
C3 = "3 gradient check"
C4 = "4 mean-shift oracle"
C5 = "5 hue/CFA physics"
C6 = "6 Choi baseline at desk scale"
C7 = "7 end-to-end toy Siamese"
C8 = "8 pristine false alarms"
C9 = "9 determinism"

TRAIN_SEEDS = range(1000, 1030)  # 30 training sources
TEST_SEEDS = range(5000, 5020)  # 20 held-out forgery sources
PRISTINE_SEEDS = range(7000, 7020)  # 20 held-out pristine images
CHOI_SEEDS = range(9000, 9020)
TOY_CONFIG = model.TrainConfig(mode="clean", epochs=3, pairs=8192, lr0=1e-4, seed=0)


# --------------------------------------------------------------------------- 1

def test_criterion_1_closed_forms(acceptance_report):
    t0 = time.time()
    checks = {
        "loss(p=0.5)=ln2": abs(model.pair_loss([0.5], [0]) - math.log(2)) < 1e-12,
        "loss(y=1,p=0.25)=-ln0.25": abs(model.pair_loss([0.25], [1]) + math.log(0.25)) < 1e-12,
        "grid 768x1024/64/64 = 192": np.prod(dataset.grid_shape(768, 1024, 64, 64, 64)) == 192,
    }
    heat = np.array([0.1, 0.5] * 512)  # mean 0.3, population std 0.2
    checks["tau(0.3, 0.2)=0.62898"] = abs(localize.gaussian_tail_threshold(heat).tau - 0.62898) <= 1e-4
    checks["tau floor"] = localize.gaussian_tail_threshold(np.full(100, 0.1)).tau == 0.5
    m = evaluate.metrics(evaluate.ConfusionCounts(tp=30, tn=900, fp=20, fn=50))
    checks["metrics"] = (abs(m.tpr - 0.375) < 1e-12 and abs(m.tnr - 900 / 920) < 1e-12
                         and abs(m.f1 - 60 / 130) < 1e-12)
    elapsed = time.time() - t0
    ok = all(checks.values()) and elapsed < 10
    failed = [k for k, v in checks.items() if not v]
    acceptance_report(C1, ok, f"{len(checks) - len(failed)}/{len(checks)} exact, {elapsed:.2f}s"
                      + (f", failed: {failed}" if failed else ""))
    assert ok, failed


# --------------------------------------------------------------------------- 2

def test_criterion_2_architecture(acceptance_report):
    t0 = time.time()
    net = model.build_model(seed=11)
    img = dataset.synthetic_source(256, 256, seed=77)
    grid = dataset.extract_patch_grid(img, 64, 64, 32)  # 7 x 7 = 49 patches
    feats = localize.precompute_features(net, grid)
    calls = net.backbone_calls
    calls_ok = calls == len(grid)

    rng = np.random.default_rng(0)
    sym_ok = True
    for _ in range(100):
        i, j = rng.integers(len(grid), size=2)
        a = model.head_probabilities(net, feats[i: i + 1], feats[j: j + 1])
        b = model.head_probabilities(net, feats[j: j + 1], feats[i: i + 1])
        sym_ok &= a.tobytes() == b.tobytes()

    scores = localize.pairwise_scores(net, feats)
    diag_ok = bool(np.all(np.diag(scores) == model.self_score(net)))
    maps = [localize.inconsistency_map(k, feats, net, (grid.n_rows, grid.n_cols)) for k in range(len(grid))]
    diag_ok &= len({float(m.values.ravel()[k]) for k, m in enumerate(maps)}) == 1

    cache_ok = True
    for k, m_ in itertools.combinations(range(len(grid)), 2):
        direct = model.predict_inconsistency(net, grid.patches[k], grid.patches[m_])
        cache_ok &= np.float32(direct) == scores[k, m_]
    elapsed = time.time() - t0
    ok = calls_ok and sym_ok and diag_ok and cache_ok and elapsed < 120
    acceptance_report(C2, ok, f"symmetry={sym_ok} self-constant={diag_ok} cache==direct={cache_ok} "
                      f"backbone calls {calls} for {len(grid)} patches, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 3

def test_criterion_3_gradient_check(acceptance_report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for trial in range(5):
        torch.manual_seed(100 + trial)
        head = model.InconsistencyHead().double()
        u = torch.tensor(rng.normal(0, 0.5, (8, 256)), requires_grad=True)
        v = torch.tensor(rng.normal(0, 0.5, (8, 256)))
        y = torch.tensor(rng.integers(0, 2, 8), dtype=torch.float64)

        def loss_fn():
            return model.pair_loss(torch.sigmoid(head(model.pointwise_sq_diff(u, v))), y)

        tensors = list(head.parameters()) + [u]
        grads = torch.autograd.grad(loss_fn(), tensors)
        eps = 1e-4  # float64: keeps round-off well below the tolerance for small gradients
        for t, g in zip(tensors, grads):
            flat = t.data.view(-1)
            for idx in rng.choice(flat.numel(), size=min(12, flat.numel()), replace=False):
                orig = flat[idx].item()
                with torch.no_grad():
                    flat[idx] = orig + eps
                    up = loss_fn().item()
                    flat[idx] = orig - eps
                    down = loss_fn().item()
                    flat[idx] = orig
                fd = (up - down) / (2 * eps)
                an = g.view(-1)[idx].item()
                scale = max(abs(an), abs(fd))
                if scale > 1e-8:
                    worst = max(worst, abs(an - fd) / scale)
    ok = worst < 1e-4
    acceptance_report(C3, ok, f"max relative error {worst:.2e}")
    assert ok


# --------------------------------------------------------------------------- 4

def _kde_mode(X, h):
    def neg(y):
        return -np.exp(-((X - y) ** 2).sum(axis=1) / (2 * h * h)).sum()

    starts = list(X)
    d = X.shape[1]
    if d <= 3:
        axis = np.linspace(0, 1, 51)
        grid = np.stack(np.meshgrid(*[axis] * d, indexing="ij"), -1).reshape(-1, d)
        dens = sum(np.exp(-((grid - x) ** 2).sum(axis=1) / (2 * h * h)) for x in X)
        starts.append(grid[np.argmax(dens)])
    runs = [optimize.minimize(neg, s, method="Nelder-Mead",
                              options={"xatol": 1e-7, "fatol": 1e-12, "maxiter": 40000}) for s in starts]
    return min(runs, key=lambda r: r.fun).x


def test_criterion_4_mean_shift_oracle(acceptance_report):
    worst = 0.0
    rng = np.random.default_rng(44)
    for dim in (1, 2, 3, 4, 6, 9, 12):
        for _ in range(2):
            n_major, n_out = int(rng.integers(5, 9)), int(rng.integers(1, 4))
            centre = rng.uniform(0.15, 0.35, dim)
            major = np.clip(centre + rng.normal(0, 0.03, (n_major, dim)), 0, 1)
            outl = rng.uniform(0.65, 1.0, (n_out, dim))
            X = np.vstack([major, outl])
            maps = [InconsistencyMap(x.reshape(1, -1)) for x in X]
            res = localize.fuse_mean_shift(maps, bandwidth=0.1, exclude_self=False)
            worst = max(worst, float(np.abs(res.fused.values.ravel() - _kde_mode(X, 0.1)).max()))
    base = rng.random((3, 4))
    same = localize.fuse_mean_shift([InconsistencyMap(base.copy()) for _ in range(6)])
    single = localize.fuse_mean_shift([InconsistencyMap(base.copy(), anchor=5)])
    exact = np.array_equal(same.fused.values, base) and np.array_equal(single.fused.values, base)
    ok = worst < 0.01 and exact
    acceptance_report(C4, ok, f"max L-inf to KDE mode {worst:.2e} (dims 1-12); fixed point/single map exact={exact}")
    assert ok


# --------------------------------------------------------------------------- 5

def test_criterion_5_hue_cfa_physics(acceptance_report):
    rng = np.random.default_rng(5)
    px = rng.integers(0, 256, (1, 1000, 3)).astype(np.uint8)
    worst, wrap_exact = 0, True
    for angle in range(30, 361, 30):
        back = colorops.hue_rotate(colorops.hue_rotate(px, angle), 360 - angle)
        worst = max(worst, int(np.abs(back.astype(int) - px).max()))
        wrap_exact &= np.array_equal(colorops.hue_rotate(px, angle + 360), colorops.hue_rotate(px, angle))
    scene = dataset.synthetic_scene(96, 128, seed=5)
    mos = colorops.cfa_mosaic(scene)
    kept = np.array_equal(colorops.cfa_mosaic(colorops.demosaic_bilinear(mos)).values, mos.values)
    ok = worst <= 1 and wrap_exact and kept
    acceptance_report(C5, ok, f"max round-trip error {worst} LSB over 12 angles; "
                      f"360-periodic={wrap_exact}; recorded samples kept={kept}")
    assert ok


# --------------------------------------------------------------------------- 6

def test_criterion_6_choi_desk_scale(acceptance_report):
    t0 = time.time()
    params = dataset.TestSetParams(angles=(120,))
    clean, jpeg = [], []
    for src, seed in enumerate(CHOI_SEEDS):
        case = dataset.make_case(dataset.synthetic_source(seed=seed), src, 120, "png", None, 6, params)
        clean.append(evaluate.confusion(baseline_choi.choi_localize(case.image), case.mask))
        compressed = colorops.jpeg_roundtrip(case.image, 75)
        jpeg.append(evaluate.confusion(baseline_choi.choi_localize(compressed), case.mask))
    mc = evaluate.metrics(evaluate.aggregate(clean))
    mj = evaluate.metrics(evaluate.aggregate(jpeg))
    elapsed = time.time() - t0
    ok = mc.tpr >= 0.6 and mc.tnr >= 0.85 and mj.f1 <= 0.25 and elapsed < 15 * 60
    acceptance_report(C6, ok, f"uncompressed TPR {mc.tpr:.3f} TNR {mc.tnr:.3f} F1 {mc.f1:.3f}; "
                      f"QF75 F1 {mj.f1:.3f}; {elapsed / 60:.1f} min")
    assert ok


# --------------------------------------------------------------------------- 7 and 8

def _train_pairs_seen(cfg):
    train_idx, _ = model.split_indices(cfg)
    return (len(train_idx) // cfg.batch_size) * cfg.batch_size * cfg.epochs


@pytest.fixture(scope="module")
def toy_model():
    t0 = time.time()
    cache = os.environ.get("HUELOC_ACCEPTANCE_CACHE")
    key = hashlib.sha256(json.dumps([repr(TOY_CONFIG), list(TRAIN_SEEDS)]).encode()).hexdigest()[:16]
    path = Path(cache) / f"toy_{key}.pt" if cache else None
    if path is not None and path.is_file():
        net, meta = model.load_checkpoint(path)
    else:
        pool = [dataset.synthetic_source(seed=s) for s in TRAIN_SEEDS]
        res = model.train(TOY_CONFIG, pool)
        net, meta = res.model, res.metadata
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            model.save_checkpoint(net, path, meta)
    return net, meta, time.time() - t0


@pytest.fixture(scope="module")
def toy_results(toy_model):
    net, meta, train_time = toy_model
    t0 = time.time()
    params = dataset.TestSetParams()
    adaptive, fixed = [], []
    for src, seed in enumerate(TEST_SEEDS):
        angle = (90, 120, 150)[src % 3]
        case = dataset.make_case(dataset.synthetic_source(seed=seed), src, angle, "png", None, 17, params)
        res = localize.localize_pipeline(case.image, net)
        adaptive.append(evaluate.confusion(res.mask, case.mask))
        fixed.append(evaluate.confusion(localize.binarize(res.heatmap, localize.FIXED_THRESHOLD), case.mask))
    g = evaluate.metrics(evaluate.aggregate(adaptive))
    t = evaluate.metrics(evaluate.aggregate(fixed))
    return g, t, meta, train_time + time.time() - t0


def test_criterion_7_toy_siamese_quality(toy_results, acceptance_report):
    g, t, meta, elapsed = toy_results
    pairs = _train_pairs_seen(TOY_CONFIG)
    ok = (g.f1 >= 0.5 and g.tnr >= 0.9 and pairs >= 20_000 and len(TRAIN_SEEDS) >= 30
          and elapsed <= 2 * 3600)
    acceptance_report(C7, ok, f"Siamese-G F1 {g.f1:.3f} TNR {g.tnr:.3f} (TPR {g.tpr:.3f}); "
                      f"{pairs} training pairs from {len(TRAIN_SEEDS)} sources, "
                      f"best val acc {meta['best_val_acc']:.3f}, {elapsed / 60:.1f} min")
    assert ok


def test_criterion_7_adaptive_not_worse_than_fixed(toy_results, acceptance_report):
    g, t, _, _ = toy_results
    ok = g.f1 >= t.f1
    acceptance_report(C7, ok, f"F1 Siamese-G {g.f1:.3f} vs Siamese-T-0.8 {t.f1:.3f}")
    assert ok, f"adaptive F1 {g.f1:.4f} < fixed-0.8 F1 {t.f1:.4f}"


def test_criterion_8_pristine_false_alarms(toy_model, acceptance_report):
    net, _, _ = toy_model
    fractions, taus = [], []
    for seed in PRISTINE_SEEDS:
        res = localize.localize_pipeline(dataset.synthetic_source(seed=seed), net)
        fractions.append(float(res.mask.mean()))
        taus.append(res.tau)
    ok = max(fractions) <= 0.06 and min(taus) >= 0.5
    acceptance_report(C8, ok, f"max forged fraction {max(fractions):.4f} (mean {np.mean(fractions):.4f}); "
                      f"min tau {min(taus):.3f} over {len(fractions)} images")
    assert ok


# --------------------------------------------------------------------------- 9

def _cli_run(root: Path, sources: Path):
    def run(*argv):
        assert cli.main([str(a) for a in argv]) == 0

    ds = root / "ds"
    run("synth", "--recipe", "a-jpg", "--sources", sources, "--crop", "128x160", "--box", 64,
        "--angles", "90,150", "--qfs", "60,90", "--per-angle", 1, "--pristine", 1, "--seed", 7, "--out", ds)
    run("train", "--pool", sources, "--mode", "jpeg", "--pairs", 192, "--epochs", 2, "--batch-size", 32,
        "--seed", 7, "--out", root / "train")
    run("localize", "--manifest", ds / "manifest.jsonl", "--checkpoint", root / "train" / "checkpoint.pt",
        "--out", root / "loc")
    run("eval", "--manifest", ds / "manifest.jsonl", "--predictions", root / "loc", "--group-by", "qf",
        "--out", root / "ev")


def test_criterion_9_determinism(tmp_path, acceptance_report):
    sources = tmp_path / "sources"
    assert cli.main(["sources", "--count", "3", "--height", "128", "--width", "160",
                     "--seed", "9", "--out", str(sources)]) == 0
    _cli_run(tmp_path / "a", sources)
    _cli_run(tmp_path / "b", sources)
    compared, differing = 0, []
    for f in sorted((tmp_path / "a").rglob("*")):
        if not f.is_file() or f.name == "config.json":
            continue
        other = tmp_path / "b" / f.relative_to(tmp_path / "a")
        if f.suffix == ".pt":
            a, ma = model.load_checkpoint(f)
            b, mb = model.load_checkpoint(other)
            same = ma == mb and all(v.equal(b.state_dict()[k]) for k, v in a.state_dict().items())
        else:
            same = f.read_bytes() == other.read_bytes()
        compared += 1
        if not same:
            differing.append(str(f.relative_to(tmp_path / "a")))
    kinds = {"manifest.jsonl", "train_log.jsonl", "report_qf.txt"}
    present = {f.name for f in (tmp_path / "a").rglob("*")}
    ok = not differing and kinds <= present and any(n.endswith(".f32") for n in present)
    acceptance_report(C9, ok, f"{compared} artifacts compared (manifest, loss log, checkpoint, heatmaps, "
                      f"tables); differing: {differing or 'none'}")
    assert ok
