"""Command-line front end: attack runs, optimizer benchmarks, compositing
previews, and layer-perturbation sweeps, all emitting machine-readable files.

Exit codes: 0 completed, 2 usage/input error, 3 oracle/transport error.
Every run writes a manifest (resolved parameters, seed, version, timestamps);
result files carry no timestamps so reruns with one manifest are
byte-identical.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__, analysis, bench, bhe
from .attack import (
    AttackPreconditionError,
    AttackSpec,
    Placement,
    RegionConstraint,
    build_search_space,
    run_attack,
)
from .bhe import BheConfig
from .imaging import (
    ImageIOError,
    WatermarkAsset,
    composite,
    compute_scale,
    load_image,
    save_image,
    scale_watermark,
)
from .oracle import (
    Oracle,
    OracleConfig,
    OracleUnavailableError,
    ProtocolError,
    UnsupportedCapabilityError,
    make_oracle,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ORACLE = 3

_IMAGE_SUFFIXES = (".png", ".ppm")


def parse_scale(text: str) -> float:
    """Accept decimals ('0.25') and fractions ('1/4')."""
    text = text.strip()
    if "/" in text:
        num, _, den = text.partition("/")
        value = float(num) / float(den)
    else:
        value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"scale must be positive, got {text!r}")
    return value


def parse_region(text: str):
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"region must be x0,y0,x1,y1 - got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"region coordinates must be integers: {text!r}")


def _add_oracle_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--oracle", default="builtin",
                        help="'builtin' or a model-server base URL (http://...)")
    parser.add_argument("--classes", type=int, default=4,
                        help="class count for the builtin oracle")
    parser.add_argument("--temperature", type=float, default=8.0,
                        help="softmax temperature of the builtin oracle")
    parser.add_argument("--no-cache", action="store_true",
                        help="disable prediction caching")


def _add_bhe_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--population", type=int, default=10)
    parser.add_argument("--generations", type=int, default=20)
    parser.add_argument("--bh-iters", type=int, default=None,
                        help="basin-hopping iterations per pass (default 3; 450 with --bh-only)")
    parser.add_argument("--cr", type=float, default=0.9, help="crossover probability")
    parser.add_argument("--step", type=float, default=0.5, help="hop step size")
    parser.add_argument("--epsilon", type=float, default=0.05,
                        help="stop once best objective drops below this")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--budget", type=int, default=10_000, help="model-query budget")
    parser.add_argument("--local-budget", type=int, default=60,
                        help="evaluations per local search")
    parser.add_argument("--bh-only", action="store_true",
                        help="single basin-hopping chain, no crossover/selection")


def _bhe_config(args, epsilon: Optional[float] = None) -> BheConfig:
    return BheConfig(
        population=args.population,
        generations=args.generations,
        bh_iterations=args.bh_iters,
        crossover_prob=args.cr,
        step_size=args.step,
        epsilon=args.epsilon if epsilon is None else epsilon,
        seed=args.seed,
        query_budget=args.budget,
        local_search_budget=args.local_budget,
        bh_only=args.bh_only,
    )


def _oracle_config(args) -> OracleConfig:
    if args.oracle == "builtin":
        return OracleConfig(
            kind="builtin",
            num_classes=args.classes,
            temperature=args.temperature,
            cache_enabled=not args.no_cache,
        )
    return OracleConfig(kind="http", endpoint=args.oracle, cache_enabled=not args.no_cache)


def _manifest(command: str, params: dict, seed: Optional[int], argv: Optional[List[str]]) -> dict:
    return {
        "command": command,
        "parameters": params,
        "argv": argv,
        "seed": seed,
        "version": __version__,
        "timestamp_start": time.time(),
    }


def _write_manifest(manifest: dict, path: Path) -> None:
    manifest["timestamp_end"] = time.time()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _host_paths(host: str) -> List[Path]:
    path = Path(host)
    if path.is_dir():
        files = sorted(
            p for p in path.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
        )
        if not files:
            raise ImageIOError(f"no {'/'.join(_IMAGE_SUFFIXES)} images in directory {path}")
        return files
    if not path.exists():
        raise ImageIOError(f"host image {path} does not exist")
    return [path]


def _attack_one(host_path: Path, watermark: WatermarkAsset, args, seed: int, oracle: Oracle) -> dict:
    host = load_image(host_path)
    region = RegionConstraint(tuple(args.region)) if args.region else None
    spec = AttackSpec(
        host=host,
        watermark=watermark,
        scale=args.scale,
        config=replace(_bhe_config(args), seed=seed),
        region=region,
        alpha_min=args.alpha_min,
        alpha_max=args.alpha_max,
        cache_enabled=not args.no_cache,
        query_budget=args.budget,
        pin_initial_solution=args.pin_initial,
    )
    outcome = run_attack(spec, oracle)
    record = {
        "host": str(host_path),
        "watermark": str(args.watermark),
        "scale": args.scale,
        **outcome.to_record(),
        "seed": seed,
    }
    if args.save_images and outcome.adversarial_image is not None:
        out_path = Path(args.out) / f"{host_path.stem}_adv.png"
        save_image(outcome.adversarial_image, out_path)
        record["adversarial_image"] = str(out_path)
    return record


def cmd_attack(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = {
        "host": str(args.host), "watermark": str(args.watermark), "scale": args.scale,
        "alpha_min": args.alpha_min, "alpha_max": args.alpha_max,
        "population": args.population, "generations": args.generations,
        "bh_iters": args.bh_iters, "cr": args.cr, "step": args.step,
        "epsilon": args.epsilon, "budget": args.budget, "local_budget": args.local_budget,
        "bh_only": args.bh_only, "pin_initial": args.pin_initial,
        "oracle": args.oracle, "classes": args.classes, "temperature": args.temperature,
        "cache": not args.no_cache, "region": [list(r) for r in args.region] if args.region else None,
        "jobs": args.jobs,
    }
    manifest = _manifest("attack", params, args.seed, args._argv)

    watermark = WatermarkAsset.from_image(load_image(args.watermark))
    hosts = _host_paths(args.host)
    oracle_config = _oracle_config(args)

    def one(index_path):
        index, path = index_path
        return _attack_one(path, watermark, args, args.seed + index, make_oracle(oracle_config))

    tasks = list(enumerate(hosts))
    if args.jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            records = list(pool.map(one, tasks))
    else:
        records = [one(t) for t in tasks]

    results_path = out_dir / "results.jsonl"
    results_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    successes = [r["success"] for r in records]
    summary = {
        "success_rate": sum(successes) / len(successes),
        "images": len(records),
        "total_queries": sum(r["queries"] for r in records),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(manifest, out_dir / "manifest.json")
    for r in records:
        print(f"{r['host']}: success={r['success']} queries={r['queries']}")
    print(f"success_rate={summary['success_rate']:.3f} over {summary['images']} image(s)")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.list:
        for name in sorted(bench.FUNCTIONS):
            print(name)
        return EXIT_OK
    if not args.function:
        print("bench: --function is required unless --list is given", file=sys.stderr)
        return EXIT_USAGE
    objective = bench.get_function(args.function)
    lo, hi = bench.default_bounds(args.function)
    space = bhe.SearchSpace.from_bounds([(lo, hi)] * args.dims)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(
        "bench",
        {"function": args.function, "dims": args.dims, "seeds": args.seeds,
         "budget": args.budget, "population": args.population,
         "generations": args.generations, "bh_iters": args.bh_iters,
         "cr": args.cr, "step": args.step, "local_budget": args.local_budget},
        args.seed,
        args._argv,
    )

    summary = {"function": args.function, "dims": args.dims, "modes": {}}
    for mode in ("bhe", "bh"):
        bests = []
        for k in range(args.seeds):
            config = BheConfig(
                population=args.population,
                generations=args.generations,
                bh_iterations=args.bh_iters,
                crossover_prob=args.cr,
                step_size=args.step,
                epsilon=0.0,
                seed=args.seed + k,
                query_budget=args.budget,
                local_search_budget=args.local_budget,
                bh_only=(mode == "bh"),
            )
            result = bhe.optimize(objective, space, config)
            best = result.trace.best_evaluated_fitness
            bests.append(best)
            trace_path = out_dir / f"{args.function}_{mode}_seed{args.seed + k}.jsonl"
            trace_path.write_text(result.trace.to_jsonl() + "\n")
        summary["modes"][mode] = {
            "best_per_seed": bests,
            "median_best": statistics.median(bests),
            "mean_best": statistics.fmean(bests),
        }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(manifest, out_dir / "manifest.json")
    print(f"{args.function} d={args.dims} budget={args.budget}")
    for mode, stats in summary["modes"].items():
        print(f"  {mode:4s} median_best={stats['median_best']:.6g} mean_best={stats['mean_best']:.6g}")
    return EXIT_OK


def cmd_composite(args) -> int:
    host = load_image(args.host)
    asset = WatermarkAsset.from_image(load_image(args.watermark))
    scaled = scale_watermark(asset, host.width, host.height, args.scale)
    spec = compute_scale(host.width, host.height, asset.width, asset.height, args.scale)
    placement = Placement(p=args.p, q=args.q, alpha=args.alpha)
    result = composite(host, scaled, placement)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(result, out_path)
    manifest = _manifest(
        "composite",
        {"host": str(args.host), "watermark": str(args.watermark), "scale": args.scale,
         "p": args.p, "q": args.q, "alpha": args.alpha, "out": str(out_path)},
        None,
        args._argv,
    )
    _write_manifest(manifest, out_path.with_suffix(out_path.suffix + ".manifest.json"))
    print(f"scaled watermark: {spec.scaled_w}x{spec.scaled_h}")
    print(f"wrote {out_path}")
    return EXIT_OK


def _random_placement(space: bhe.SearchSpace, seed: int) -> Placement:
    rng = np.random.default_rng(seed)
    return Placement.from_genes(space.sample_uniform(rng))


def cmd_analyze(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    oracle = make_oracle(_oracle_config(args))

    if args.watermarked:
        manifest = _manifest(
            "analyze", {"host": args.host, "watermarked": args.watermarked,
                        "oracle": args.oracle, "classes": args.classes},
            None, args._argv,
        )
        clean = load_image(args.host)
        marked = load_image(args.watermarked)
        prof = analysis.profile(clean, marked, oracle)
        (out_dir / "profile.csv").write_text(prof.to_csv())
        (out_dir / "profile.json").write_text(prof.to_json() + "\n")
        _write_manifest(manifest, out_dir / "manifest.json")
        print(prof.to_csv(), end="")
        return EXIT_OK

    if not args.watermark:
        print("analyze: need --watermarked (pair mode) or --watermark (sweep mode)",
              file=sys.stderr)
        return EXIT_USAGE
    manifest = _manifest(
        "analyze",
        {"host": args.host, "watermark": args.watermark, "scale": args.scale,
         "oracle": args.oracle, "classes": args.classes, "budget": args.budget},
        args.seed,
        args._argv,
    )
    watermark = WatermarkAsset.from_image(load_image(args.watermark))
    hosts = _host_paths(args.host)
    adv_profiles, rnd_profiles = [], []
    per_image = []
    for index, path in enumerate(hosts):
        host = load_image(path)
        oracle_i = make_oracle(_oracle_config(args))
        spec = AttackSpec(
            host=host,
            watermark=watermark,
            scale=args.scale,
            config=replace(_bhe_config(args), seed=args.seed + index),
            alpha_min=args.alpha_min,
            alpha_max=args.alpha_max,
            cache_enabled=not args.no_cache,
            query_budget=args.budget,
        )
        outcome = run_attack(spec, oracle_i)
        if outcome.best_placement is None:
            continue
        scaled = scale_watermark(watermark, host.width, host.height, args.scale)
        space = build_search_space(host, scaled, args.alpha_min, args.alpha_max)
        random_placement = _random_placement(space, args.seed + 10_000 + index)
        adv_img = composite(host, scaled, outcome.best_placement)
        rnd_img = composite(host, scaled, random_placement)
        adv_prof = analysis.profile(host, adv_img, oracle_i)
        rnd_prof = analysis.profile(host, rnd_img, oracle_i)
        adv_profiles.append(adv_prof)
        rnd_profiles.append(rnd_prof)
        stem = path.stem
        (out_dir / f"{stem}_adversarial.csv").write_text(adv_prof.to_csv())
        (out_dir / f"{stem}_random.csv").write_text(rnd_prof.to_csv())
        per_image.append({
            "host": str(path), "success": outcome.success,
            "adversarial": dict(adv_prof.levels), "random": dict(rnd_prof.levels),
        })
    if not adv_profiles:
        print("analyze: no usable attack outcomes", file=sys.stderr)
        return EXIT_USAGE
    adv_avg = analysis.average_profiles(adv_profiles)
    rnd_avg = analysis.average_profiles(rnd_profiles)
    (out_dir / "adversarial_profile.csv").write_text(adv_avg.to_csv())
    (out_dir / "random_profile.csv").write_text(rnd_avg.to_csv())
    (out_dir / "profiles.json").write_text(json.dumps({
        "per_image": per_image,
        "adversarial_average": dict(adv_avg.levels),
        "random_average": dict(rnd_avg.levels),
    }, indent=2, sort_keys=True) + "\n")
    _write_manifest(manifest, out_dir / "manifest.json")
    print(f"averaged {len(adv_profiles)} image(s); wrote profiles to {out_dir}")
    return EXIT_OK


def _strip_out_flag(argv: List[str]) -> List[str]:
    stripped = []
    skip = False
    for token in argv:
        if skip:
            skip = False
            continue
        if token == "--out":
            skip = True
            continue
        if token.startswith("--out="):
            continue
        stripped.append(token)
    return stripped


def cmd_replay(args) -> int:
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        print(f"replay: manifest {manifest_path} does not exist", file=sys.stderr)
        return EXIT_USAGE
    manifest = json.loads(manifest_path.read_text())
    argv = manifest.get("argv")
    if not argv:
        print("replay: manifest carries no argv to rerun", file=sys.stderr)
        return EXIT_USAGE
    return main(_strip_out_flag(list(argv)) + ["--out", args.out])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advmark",
        description="Adversarial watermark attacks against black-box classifiers",
    )
    parser.add_argument("--version", action="version", version=f"advmark {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_attack = sub.add_parser("attack", help="run watermark attacks")
    p_attack.add_argument("--host", required=True, help="host image or directory of images")
    p_attack.add_argument("--watermark", required=True, help="watermark image (RGBA or RGB)")
    p_attack.add_argument("--scale", type=parse_scale, default=0.25,
                          help="watermark scale, e.g. 1/4 or 0.25")
    p_attack.add_argument("--alpha-min", type=int, default=100)
    p_attack.add_argument("--alpha-max", type=int, default=200)
    p_attack.add_argument("--region", type=parse_region, action="append",
                          help="allowed rectangle x0,y0,x1,y1 (repeatable)")
    p_attack.add_argument("--pin-initial", action="store_true",
                          help="pin one initial individual to (0, 0, alpha_min)")
    p_attack.add_argument("--jobs", type=int, default=1,
                          help="parallel attacks for directory batches")
    p_attack.add_argument("--save-images", action="store_true")
    p_attack.add_argument("--out", required=True, help="output directory")
    _add_bhe_flags(p_attack)
    _add_oracle_flags(p_attack)
    p_attack.set_defaults(func=cmd_attack)

    p_bench = sub.add_parser("bench", help="optimizer benchmarks on test functions")
    p_bench.add_argument("--function", help="sphere | rastrigin | ackley")
    p_bench.add_argument("--list", action="store_true", help="list available functions")
    p_bench.add_argument("--dims", type=int, default=3)
    p_bench.add_argument("--seeds", type=int, default=10, help="number of seeds per mode")
    p_bench.add_argument("--out", default="bench_out")
    _add_bhe_flags(p_bench)
    p_bench.set_defaults(func=cmd_bench)

    p_comp = sub.add_parser("composite", help="composite a watermark at an explicit placement")
    p_comp.add_argument("--host", required=True)
    p_comp.add_argument("--watermark", required=True)
    p_comp.add_argument("--scale", type=parse_scale, default=1.0)
    p_comp.add_argument("--p", type=int, required=True)
    p_comp.add_argument("--q", type=int, required=True)
    p_comp.add_argument("--alpha", type=int, required=True)
    p_comp.add_argument("--out", required=True, help="output image file")
    p_comp.set_defaults(func=cmd_composite)

    p_ana = sub.add_parser("analyze", help="layer-wise perturbation profiles")
    p_ana.add_argument("--host", required=True, help="clean image or directory")
    p_ana.add_argument("--watermarked", help="pair mode: profile host vs this image")
    p_ana.add_argument("--watermark", help="sweep mode: watermark asset to attack with")
    p_ana.add_argument("--scale", type=parse_scale, default=0.25)
    p_ana.add_argument("--alpha-min", type=int, default=100)
    p_ana.add_argument("--alpha-max", type=int, default=200)
    p_ana.add_argument("--out", required=True)
    _add_bhe_flags(p_ana)
    _add_oracle_flags(p_ana)
    p_ana.set_defaults(func=cmd_analyze)

    p_replay = sub.add_parser("replay", help="rerun a manifest into a fresh output directory")
    p_replay.add_argument("--manifest", required=True, help="manifest.json of an earlier run")
    p_replay.add_argument("--out", required=True, help="output directory for the rerun")
    p_replay.set_defaults(func=cmd_replay)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = list(argv) if argv is not None else sys.argv[1:]
    args = parser.parse_args(argv)
    # manifests record the run arguments without --out, so runs that differ
    # only in destination carry identical manifests (and replay adds its own)
    args._argv = _strip_out_flag(argv)
    try:
        return args.func(args)
    except (OracleUnavailableError, ProtocolError, UnsupportedCapabilityError) as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except (ImageIOError, AttackPreconditionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
