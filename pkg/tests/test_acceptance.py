"""Acceptance suite: one test per release criterion, each printing a
PASS line with its measured numbers (run with -s to see them inline).
"""

import json
import time

import numpy as np
import pytest

from advmark.analysis import DegenerateReferenceError, perturbation_level
from advmark.attack import AttackSpec, Placement, RegionConstraint, brute_force_grid, run_attack
from advmark.bench import sphere
from advmark.bhe import BheConfig, SearchSpace, optimize
from advmark.cli import main
from advmark.imaging import RasterImage, WatermarkAsset, composite, compute_scale, save_image
from advmark.oracle import ActivationVector, OracleConfig, make_oracle
from conftest import noise_host

BLACK_WM = WatermarkAsset.from_image(RasterImage.full(8, 8, (0, 0, 0, 255)))


def report(name: str, detail: str = ""):
    print(f"ACCEPTANCE {name}: PASS {detail}".rstrip())


def scalar_blend(host_px, wm_px, mask, alpha):
    a_eff = alpha * mask / 255.0
    return int(round((wm_px * a_eff + host_px * (255.0 - a_eff)) / 255.0))


def test_compositing_exactness():
    """1000+ random pixel tuples match the scalar blend bit-exactly; pixels
    outside the rectangle equal the host bit-for-bit; under one second."""
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    host = RasterImage(rng.integers(0, 256, (30, 30, 3)).astype(np.uint8))
    wm_pixels = rng.integers(0, 256, (20, 20, 4)).astype(np.uint8)
    wm = WatermarkAsset.from_image(RasterImage(wm_pixels))
    alpha = int(rng.integers(0, 256))
    p, q = 3, 7
    out = composite(host, wm, Placement(p, q, alpha))

    checked = 0
    for i in range(20):
        for j in range(20):
            mask = int(wm.opacity_mask[i, j])
            for c in range(3):
                expected = scalar_blend(
                    int(host.pixels[q + i, p + j, c]), int(wm_pixels[i, j, c]), mask, alpha
                )
                assert int(out.pixels[q + i, p + j, c]) == expected
                checked += 1
    assert checked >= 1000

    outside = np.ones((30, 30), dtype=bool)
    outside[q : q + 20, p : p + 20] = False
    assert np.array_equal(out.pixels[outside], host.pixels[outside])

    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    report("compositing-exactness", f"({checked} tuples, {elapsed:.2f}s)")


def test_scaling_exactness():
    """The dimension arithmetic matches hand calculation on the three anchors."""
    cases = [
        ((224, 224), (100, 50), 0.25, (56, 28)),
        ((224, 224), (224, 224), 1.0, (224, 224)),
        ((224, 224), (260, 100), 0.5, (112, 43)),
    ]
    for (hw, hh), (ww, wh), sl, expected in cases:
        spec = compute_scale(hw, hh, ww, wh, sl)
        assert (spec.scaled_w, spec.scaled_h) == expected
    report("scaling-exactness", f"({len(cases)} anchors)")


def test_optimizer_soundness_sphere():
    """Defaults reach < 1e-2 on the 3-d sphere within 5000 evaluations for
    all of 10 fixed seeds, with a non-increasing best-so-far trace; < 10 s."""
    start = time.perf_counter()
    space = SearchSpace.from_bounds([(-5.0, 5.0)] * 3)
    bests = []
    for seed in range(10):
        config = BheConfig(
            population=10, generations=20, bh_iterations=3, crossover_prob=0.9,
            step_size=0.5, epsilon=0.0, seed=seed, query_budget=5000,
        )
        result = optimize(sphere, space, config)
        assert result.trace.total_evaluations <= 5000
        fits = [g.best_fitness for g in result.trace.generations]
        assert all(a >= b for a, b in zip(fits, fits[1:]))
        assert result.best.fitness < 1e-2, f"seed {seed}: {result.best.fitness}"
        bests.append(result.best.fitness)
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    report(
        "optimizer-soundness",
        f"(10/10 seeds, worst best={max(bests):.2e}, {elapsed:.1f}s)",
    )


def test_bhe_not_worse_than_bh():
    """On 30 synthetic instances at an equal 2000-query budget the population
    optimizer flips at least as many images as the single-chain baseline."""
    start = time.perf_counter()
    successes = {}
    queries = {}
    for mode in ("bhe", "bh"):
        wins = 0
        spent = []
        for k in range(30):
            host = noise_host(1000 + k)
            config = BheConfig(seed=k, bh_only=(mode == "bh"))
            spec = AttackSpec(host=host, watermark=BLACK_WM, scale=0.25,
                              config=config, query_budget=2000)
            oracle = make_oracle(OracleConfig(kind="builtin", num_classes=4))
            outcome = run_attack(spec, oracle)
            assert outcome.queries <= 2000
            wins += outcome.success
            spent.append(outcome.queries)
        successes[mode] = wins
        queries[mode] = sum(spent) / len(spent)
    elapsed = time.perf_counter() - start
    assert successes["bhe"] >= successes["bh"], successes
    assert elapsed < 120.0
    report(
        "bhe-vs-bh",
        f"(BHE {successes['bhe']}/30 at avg {queries['bhe']:.1f} queries, "
        f"BH {successes['bh']}/30 at avg {queries['bh']:.1f} queries, {elapsed:.1f}s)",
    )


def test_grid_oracle_near_optimality():
    """Full-budget minimization lands within 0.02 of the exhaustive strided
    grid minimum on at least 8 of 10 instances."""
    within = 0
    margins = []
    for k in range(10):
        host = noise_host(2000 + k)
        spec = AttackSpec(host=host, watermark=BLACK_WM, scale=0.25,
                          config=BheConfig(seed=k, epsilon=0.0),
                          query_budget=2000, stop_on_success=False)
        oracle = make_oracle(OracleConfig(kind="builtin", num_classes=4))
        outcome = run_attack(spec, oracle)
        bhe_best = outcome.trace.best_evaluated_fitness

        grid_oracle = make_oracle(
            OracleConfig(kind="builtin", num_classes=4, cache_enabled=False)
        )
        grid_spec = AttackSpec(host=host, watermark=BLACK_WM, scale=0.25,
                               config=BheConfig(seed=k))
        _, grid_best, points = brute_force_grid(grid_spec, grid_oracle, strides=(4, 4, 10))
        assert points == 539
        margins.append(bhe_best - grid_best)
        if bhe_best <= grid_best + 0.02:
            within += 1
    assert within >= 8, margins
    report("grid-near-optimality", f"({within}/10 within 0.02, worst margin {max(margins):+.4f})")


def test_query_accounting_exact():
    """With caching, reported queries equal the oracle ledger total and the
    number of distinct placements evaluated."""
    for seed in range(3):
        oracle = make_oracle(OracleConfig(kind="builtin", num_classes=4))
        spec = AttackSpec(host=noise_host(3000 + seed), watermark=BLACK_WM, scale=0.25,
                          config=BheConfig(seed=seed, generations=3),
                          query_budget=400, stop_on_success=False)
        outcome = run_attack(spec, oracle)
        assert outcome.queries == oracle.ledger.total_queries
        assert outcome.queries == outcome.distinct_placements
    report("query-accounting", f"(last run: {outcome.queries} queries)")


def test_region_constraint_exact():
    """A full attack constrained to two side strips never evaluates a
    placement outside them, over the complete recorded trace."""
    region = RegionConstraint(((0, 0, 10, 32), (22, 0, 32, 32)))
    oracle = make_oracle(OracleConfig(kind="builtin", num_classes=4))
    spec = AttackSpec(host=noise_host(4000), watermark=BLACK_WM, scale=0.25,
                      config=BheConfig(seed=11, generations=4), query_budget=600,
                      region=region, stop_on_success=False)
    outcome = run_attack(spec, oracle)
    assert outcome.trace.evaluations
    checked = 0
    for (p, q, _alpha), _ in outcome.trace.evaluations:
        in_left = 0 <= p <= 2 and 0 <= q <= 24
        in_right = 22 <= p <= 24 and 0 <= q <= 24
        assert in_left or in_right, (p, q)
        checked += 1
    report("region-constraint", f"({checked} evaluations, all feasible)")


def test_manifest_determinism(tmp_path):
    """Two CLI runs with identical parameters produce byte-identical result
    files; manifests differ only in timestamps."""
    hosts = tmp_path / "hosts"
    hosts.mkdir()
    for k in range(3):
        save_image(noise_host(5000 + k), hosts / f"h{k}.png")
    wm_path = tmp_path / "wm.png"
    save_image(RasterImage.full(8, 8, (0, 0, 0, 255)), wm_path)
    args = ["attack", "--host", str(hosts), "--watermark", str(wm_path),
            "--scale", "1/4", "--classes", "4", "--seed", "21",
            "--budget", "500", "--generations", "3"]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(out_a)]) == 0
    assert main(args + ["--out", str(out_b)]) == 0
    assert (out_a / "results.jsonl").read_bytes() == (out_b / "results.jsonl").read_bytes()
    assert (out_a / "summary.json").read_bytes() == (out_b / "summary.json").read_bytes()
    man_a = json.loads((out_a / "manifest.json").read_text())
    man_b = json.loads((out_b / "manifest.json").read_text())
    for m in (man_a, man_b):
        m.pop("timestamp_start")
        m.pop("timestamp_end")
    assert man_a == man_b
    report("manifest-determinism", "(results byte-identical)")


def test_perturbation_metric_exact():
    """The relative-L2 layer metric matches hand arithmetic, is zero exactly
    for equal activations, and rejects a zero-norm reference."""
    ref = ActivationVector(layer="l", values=(3.0, 4.0))
    per = ActivationVector(layer="l", values=(0.0, 0.0))
    assert perturbation_level(per, ref) == 1.0
    assert perturbation_level(ref, ref) == 0.0
    near = ActivationVector(layer="l", values=(3.0, 4.0 + 1e-12))
    assert perturbation_level(near, ref) > 0.0
    with pytest.raises(DegenerateReferenceError):
        perturbation_level(ref, ActivationVector(layer="l", values=(0.0, 0.0)))
    with pytest.raises(ValueError):
        perturbation_level(ActivationVector(layer="l", values=(1.0,)), ref)
    report("perturbation-metric", "(hand values exact)")
