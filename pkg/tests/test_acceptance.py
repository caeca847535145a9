"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records a one-line PASS/FAIL verdict that is echoed in the
pytest terminal summary.
"""

import math
import time

import numpy as np
import pytest

from conftest import record_criterion
from fisheye_supcon.contrastive import EmbeddingBatch, LossConfig, combined_loss, supcon_loss
from fisheye_supcon.dataset import ObjectAnnotation, build_patch_pool, derive_distortion_class, load_manifest
from fisheye_supcon.evaluation import (
    alpha_sweep,
    knn_predict_loo,
    probe_model,
    random_init_baseline,
    sweep_csv,
    pool_normalization,
    train_test_split,
)
from fisheye_supcon.geometry import NormalizedPoint, radial_distance, region_boundary_presets
from fisheye_supcon.model import ModelConfig, TrainConfig, backward, forward, init_model, pretrain
from fisheye_supcon.quality import GaussianSummary, aggd_fit, brisque_features, gaussian_overlap
from fisheye_supcon.synthgen import GeneratorConfig, generate_patch_pool, generate_scene_annotations
from helpers import brute_knn, pipeline


# 1 ---------------------------------------------------------------------------


def _combined_value(model, x, sem, dc, cfg):
    _, z, cache = forward(model, x)
    return combined_loss(EmbeddingBatch(z, sem, dc), cfg), cache


def _gradient_error(seed):
    rng = np.random.default_rng(seed)
    dims = ModelConfig(input_dim=int(rng.integers(8, 33)), hidden_dims=(int(rng.integers(8, 33)),),
                       representation_dim=int(rng.integers(4, 17)), embedding_dim=int(rng.integers(3, 9)))
    model = init_model(dims, seed)
    b = 8
    x = rng.normal(size=(b, dims.input_dim))
    sem = rng.permutation(np.repeat(np.arange(4), 2))
    levels = rng.integers(0, 2, 4)[sem]  # keeps each semantic pair in one distortion class
    dc = sem * 2 + levels
    cfg = LossConfig(float(rng.uniform(0.07, 1.0)), float(rng.uniform(0.0, 1.0)))
    out, cache = _combined_value(model, x, sem, dc, cfg)
    analytic = backward(model, cache, out.gradient)
    h = 1e-6
    worst = 0.0
    for p, g in zip(model.parameters(), analytic):
        num = np.zeros_like(p)
        for idx in np.ndindex(*p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = _combined_value(model, x, sem, dc, cfg)[0].value
            p[idx] = old - h
            fm = _combined_value(model, x, sem, dc, cfg)[0].value
            p[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        worst = max(worst, float(np.max(np.abs(g - num)) / max(np.max(np.abs(num)), 1e-12)))
    return worst


def test_criterion_01_end_to_end_gradient_oracle():
    start = time.perf_counter()
    errors = [_gradient_error(seed) for seed in range(20)]
    elapsed = time.perf_counter() - start
    worst = max(errors)
    record_criterion(1, "end-to-end gradient vs central differences, 20 seeds",
                     worst < 1e-4 and elapsed < 30.0,
                     f"max relative error {worst:.2e} < 1e-4, {elapsed:.1f}s < 30s")


# 2 ---------------------------------------------------------------------------


def test_criterion_02_loss_closed_forms():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(2, 7))
    pair = EmbeddingBatch.from_raw(v, [1, 1])
    b2 = abs(supcon_loss(pair).value)
    ortho = supcon_loss(EmbeddingBatch(np.eye(3), [0, 0, 1], [0, 0, 1]), cfg=LossConfig(1.0)).value
    z = rng.normal(size=(16, 5))
    sem = rng.integers(0, 3, 16)
    batch = EmbeddingBatch.from_raw(z, sem, sem * 2 + rng.integers(0, 2, 16))
    c, d = supcon_loss(batch, "semantic"), supcon_loss(batch, "distortion")
    a0, a1 = combined_loss(batch, LossConfig(0.07, 0.0)), combined_loss(batch, LossConfig(0.07, 1.0))
    collapse = (a0.value == c.value and np.array_equal(a0.gradient, c.gradient)
                and a1.value == d.value and np.array_equal(a1.gradient, d.gradient))
    single_level = EmbeddingBatch.from_raw(z, sem, sem * 1 + 0)
    one_level_gap = max(abs(combined_loss(single_level, LossConfig(0.07, a)).value - supcon_loss(single_level).value)
                        for a in np.linspace(0, 1, 21))
    ok = b2 < 1e-12 and abs(ortho - math.log(2)) <= 1e-9 and collapse and one_level_gap < 1e-12
    record_criterion(2, "loss closed forms and alpha collapse", ok,
                     f"B=2 {b2:.1e}; orthogonal {ortho:.12f} vs log2; bit-exact collapse {collapse}; "
                     f"L=1 gap {one_level_gap:.1e}")


# 3 ---------------------------------------------------------------------------


def test_criterion_03_label_extraction(tmp_path):
    standard = region_boundary_presets()["standard"]
    space = {derive_distortion_class(ObjectAnnotation(c, NormalizedPoint(x, y), 0.1, 0.1), standard, 5)[1]
             for c in range(5) for x in np.linspace(0, 1, 9) for y in np.linspace(0, 1, 9)}
    cfg = GeneratorConfig(seed=0, num_images=1360, image_size=64)
    _, tally = generate_scene_annotations(cfg, tmp_path)
    manifest = load_manifest(tmp_path / "manifest.json")
    patches = build_patch_pool(manifest, standard)
    counts = np.zeros((5, 2), dtype=np.int64)
    for p in patches:
        counts[p.semantic_class, p.distortion_level] += 1
    frac = tally.center_fraction()
    ok = (space == set(range(10)) and tally.total >= 10_000 and np.array_equal(counts, tally.counts)
          and abs(frac - 0.25) <= 0.02)
    record_criterion(3, "distortion-class space and extraction counts", ok,
                     f"space {sorted(space)}; {tally.total} objects; counts match tally "
                     f"{np.array_equal(counts, tally.counts)}; center fraction {frac:.4f}")


# 4 ---------------------------------------------------------------------------


def test_criterion_04_geometry():
    corner = radial_distance(NormalizedPoint(0.0, 0.0))
    p = region_boundary_presets()
    boxes = {k: (b.top_left.x, b.top_left.y, b.bottom_right.x, b.bottom_right.y) for k, b in p.items()}
    expected = {"standard": (0.25, 0.25, 0.75, 0.75), "large": (0.1, 0.1, 0.9, 0.9), "small": (0.33, 0.33, 0.66, 0.66)}
    ok = abs(corner - 0.70711) <= 1e-5 and boxes == expected
    record_criterion(4, "radial distance and box presets", ok, f"corner distance {corner:.6f}; boxes {boxes}")


# 5 ---------------------------------------------------------------------------


def test_criterion_05_gaussian_overlap():
    oracle = 1.0 + math.erf(-1.0 / math.sqrt(2.0))
    shifted = gaussian_overlap(GaussianSummary(0, 1), GaussianSummary(2, 1))
    same = gaussian_overlap(GaussianSummary(0.3, 1.7), GaussianSummary(0.3, 1.7))
    ok = abs(shifted - oracle) <= 1e-4 and abs(shifted - 0.31731) <= 1e-4 and abs(same - 1.0) <= 1e-9
    record_criterion(5, "Gaussian overlap coefficient", ok,
                     f"N(0,1) vs N(2,1) {shifted:.6f} (erf oracle {oracle:.6f}); identical {same:.12f}")


# 6 ---------------------------------------------------------------------------


def test_criterion_06_estimators():
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    g_shape, g_left, g_right, _ = aggd_fit(rng.normal(size=100_000))
    l_shape, _, _, _ = aggd_fit(rng.laplace(size=100_000))
    lengths = {brisque_features(rng.uniform(0, 255, size=s)).values.size for s in [(32, 32), (45, 61), (128, 96)]}
    pool, _ = generate_patch_pool(GeneratorConfig(seed=1, num_images=4))
    lengths |= {brisque_features(p.pixels * 255).values.size for p in pool}
    elapsed = time.perf_counter() - start
    ratio = g_left / g_right
    ok = (abs(g_shape - 2) <= 0.1 and 0.95 <= ratio <= 1.05 and abs(l_shape - 1) <= 0.1
          and lengths == {36} and elapsed < 60)
    record_criterion(6, "AGGD/GGD estimators and feature length", ok,
                     f"gaussian alpha {g_shape:.3f}, sigma ratio {ratio:.4f}; laplacian alpha {l_shape:.3f}; "
                     f"lengths {sorted(lengths)}; {elapsed:.2f}s")


# 7 ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def default_split():
    pool, _ = generate_patch_pool(GeneratorConfig())
    train, test = train_test_split(pool, seed=0, test_fraction=0.2)
    return pool, train, test


def test_criterion_07_training_efficacy(default_split):
    pool, train, test = default_split
    start = time.perf_counter()
    model_cfg = ModelConfig()
    res = pretrain(train, model_cfg, LossConfig(0.07, 0.5), TrainConfig(epochs=25, batch_size=64, seed=0))
    trained, _ = probe_model(res.model, train, test, pool_normalization(train), seed=0, num_classes=5)
    base, _ = random_init_baseline(train, test, model_cfg, seed=0, num_classes=5)
    elapsed = time.perf_counter() - start
    margin = trained.accuracy - base.accuracy
    e1, e5 = res.epoch_losses[0], res.epoch_losses[4]
    ok = len(pool) >= 2000 and margin >= 0.15 and e5 < e1 and elapsed < 600
    record_criterion(7, "pre-training beats a random-init encoder", ok,
                     f"{len(pool)} patches; probe {trained.accuracy:.3f} vs random {base.accuracy:.3f}, "
                     f"margin {margin:+.3f} >= 0.15; epoch-5 loss {e5:.4f} < epoch-1 {e1:.4f}; {elapsed:.0f}s")


# 8 ---------------------------------------------------------------------------


def test_criterion_08_alpha_sweep(default_split):
    _, train, test = default_split
    run_cfg = TrainConfig(epochs=3, batch_size=64, seed=2)
    alphas = [0.0, 0.25, 0.5, 0.75, 1.0]
    rows = alpha_sweep(train, test, alphas, run_cfg, 0.07, ModelConfig(), probe_epochs=100)
    text = sweep_csv(rows)
    pure = pretrain(train, ModelConfig(), LossConfig(0.07, 0.0),
                    TrainConfig(epochs=3, batch_size=64, seed=2, objective="semantic"))
    identical = rows[0].epoch_losses == pure.epoch_losses
    same_batches = len({len(r.epoch_losses) for r in rows}) == 1
    lines = text.strip().splitlines()
    ok = [r.alpha for r in rows] == alphas and len(lines) == 1 + len(alphas) and identical and same_batches
    shape = ", ".join(f"{r.alpha:g}:{r.probe.accuracy:.3f}" for r in rows)
    record_criterion(8, "alpha sweep harness", ok,
                     f"{len(lines) - 1} rows; alpha=0 trace bit-identical to pure semantic run {identical}; "
                     f"probe accuracy by alpha {shape} (not asserted)")


# 9 ---------------------------------------------------------------------------


def test_criterion_09_cli_determinism(tmp_path):
    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    same_names = [p.relative_to(tmp_path / "a") for p in a] == [p.relative_to(tmp_path / "b") for p in b]
    diffs = [p.name for p, q in zip(a, b) if p.read_bytes() != q.read_bytes()]
    ok = same_names and not diffs
    record_criterion(9, "byte-identical artifacts from every subcommand", ok,
                     f"{len(a)} files compared; differing: {diffs or 'none'}")


# 10 --------------------------------------------------------------------------


def test_criterion_10_knn_oracle():
    mismatches = 0
    cases = 0
    for seed, (n, k) in enumerate([(12, 1), (50, 3), (101, 5), (150, 8), (200, 5), (200, 10)]):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, 8))
        if seed % 2:
            x[: n // 4] = x[0]  # exact similarity ties
        labels = rng.integers(0, 5, n)
        mismatches += int(np.sum(knn_predict_loo(x, labels, k) != brute_knn(x, labels, k)))
        cases += n
    record_criterion(10, "kNN equals the brute-force oracle", mismatches == 0,
                     f"{mismatches} mismatches over {cases} predictions, n <= 200")
