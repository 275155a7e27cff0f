"""Batch command-line front-end chaining the pipeline stages.

Every stage reads and writes datastore formats only, so stages can be re-run
independently; re-running a stage with unchanged inputs is byte-identical.
Exit codes: 0 success, 1 usage error, 2 data error. Logging level comes from
LOCMAP_LOG={error,info,debug}.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import evaluation, fusion, pairing, synth
from .datastore import (
    Dataset,
    image_pose,
    load_dataset,
    read_csv,
    write_csv,
)
from .errors import LocmapError, MissingPose
from .localization import (
    LocalizationResult,
    PnPConfig,
    load_results,
    localize_query,
    save_results,
)
from .mapping import MapperConfig, rgbd_map, triangulate_map
from .matching import MatchParams, match_image_pairs
from .pairing import DistancePairingParams, RetrievalParams
from .postproc import rig_complete, sequence_complete

log = logging.getLogger("locmap")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("LOCMAP_LOG", "error").lower(), logging.ERROR
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _read_image_list(path) -> List[str]:
    return [f[0] for _, f in read_csv(Path(path))]


def _posed_images(ds: Dataset) -> Dict[str, object]:
    out = {}
    for img in ds.image_index():
        try:
            out[img] = image_pose(ds, img)
        except MissingPose:
            continue
    return out


def _mapping_images(ds: Dataset) -> List[str]:
    return sorted(img for img in _posed_images(ds) if img in ds.features.keypoints)


def _query_images(ds: Dataset) -> List[str]:
    posed = _posed_images(ds)
    return sorted(
        img for img in ds.features.keypoints if img in ds.image_index() and img not in posed
    )


def _match_params(args) -> MatchParams:
    return MatchParams(
        mutual_check=not getattr(args, "no_mutual", False),
        ratio=getattr(args, "ratio", None),
        epipolar_px=getattr(args, "epipolar_px", 4.0),
    )


def _pnp_config(name: str, seed: int) -> PnPConfig:
    if name == "config1":
        return PnPConfig.config1(seed)
    if name == "config2":
        return PnPConfig.config2(seed)
    raise _UsageError(f"unknown localization config {name!r}")


def _mapper_config(name: str) -> MapperConfig:
    if name == "config1":
        return MapperConfig.config1()
    if name == "config2":
        return MapperConfig.config2()
    raise _UsageError(f"unknown mapper config {name!r}")


# --- subcommands ---

def _cmd_validate(args) -> int:
    ds = load_dataset(args.root)
    n_map = 0 if ds.map is None else len(ds.map.points)
    print(
        f"ok: {len(ds.cameras)} cameras, {len(ds.rigs)} rigs, "
        f"{len(ds.trajectories)} trajectory entries, "
        f"{len(ds.image_records)} image records, {len(ds.depth_records)} depth records, "
        f"{len(ds.features.keypoints)} keypoint files, {n_map} map points"
    )
    return 0


def _cmd_synth(args) -> int:
    rig_spec = None
    if args.rig:
        n, _, baseline = args.rig.partition(":")
        rig_spec = (int(n), float(baseline or 0.2))
    cfg = synth.SynthConfig(
        seed=args.seed,
        n_points=args.n_points,
        n_map_cams=args.n_map_cams,
        n_query_cams=args.n_query_cams,
        scene_extent_m=args.extent,
        pixel_noise_sigma=args.pixel_noise,
        outlier_fraction=args.outlier_fraction,
        rig_spec=rig_spec,
        depth_render=args.depth,
        pose_noise=(args.pose_noise_t, args.pose_noise_r) if args.pose_noise_t else None,
    )
    ds, gt = synth.generate_scene(cfg)
    out = Path(args.out)
    synth.write_scene(ds, gt, out)
    queries = _query_images(ds)
    write_csv(out / "queries.txt", "queries", [[q] for q in queries])
    _write_default_pipeline_config(out, args)
    print(f"wrote synthetic dataset with {len(queries)} queries to {out}")
    return 0


def _write_default_pipeline_config(root: Path, args) -> None:
    steps = "rig+seq" if args.rig else "none"
    method = "rgbd" if args.depth else "sfm"
    text = f"""# locmap pipeline configuration
[pairs]
strategy = "distance"
k = 10

[matching]
mutual = true

[mapping]
method = "{method}"
config = "config1"

[localization]
k = 20
config = "config2"
seed = {args.seed}

[postprocess]
steps = "{steps}"

[evaluation]
bins = "outdoor"
"""
    (root / "pipeline.toml").write_text(text, encoding="utf-8")


def _cmd_pairs(args) -> int:
    ds = load_dataset(args.root)
    strategy = args.strategy
    if args.queries:
        queries = _read_image_list(args.queries)
        symmetric = False
    else:
        queries = None
        symmetric = True
    if strategy == "retrieval":
        db_imgs = _mapping_images(ds)
        db = {i: ds.features.global_features[i] for i in db_imgs if i in ds.features.global_features}
        if queries is None:
            q = db
        else:
            q = {i: ds.features.global_features[i] for i in queries}
        pairs = pairing.retrieval_pairs(q, db, RetrievalParams(k=args.k), symmetric=symmetric)
    elif strategy == "distance":
        posed = _posed_images(ds)
        db = {i: posed[i] for i in _mapping_images(ds)}
        q = db if queries is None else {i: posed.get(i) for i in queries}
        params = DistancePairingParams(tau_c=args.tau_c, tau_r=args.tau_r, k=args.k)
        pairs = pairing.distance_pairs(q, db, params, symmetric=symmetric)
    elif strategy == "frustum":
        posed = _posed_images(ds)
        idx = ds.image_index()
        images = {
            i: (ds.cameras[idx[i][1]], posed[i]) for i in _mapping_images(ds)
        }
        pairs = pairing.frustum_pairs(images, near_m=args.near, far_m=args.far, k=args.k)
    elif strategy == "covis":
        if ds.map is None or ds.map.is_empty():
            raise LocmapError("covisibility pairing needs a reconstructed map")
        pairs = pairing.covisibility_pairs(ds.map, k=args.k)
    else:
        raise _UsageError(f"unknown pairing strategy {strategy!r}")
    pairing.save_pairs(args.out, pairs)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def _cmd_fuse(args) -> int:
    lists = [pairing.load_pairs(p) for p in args.inputs]
    params = fusion.FusionParams(
        method=fusion.FusionMethod(args.fusion),
        rho=_parse_weights(args.weights),
        alpha=_parse_weights(args.weights) if args.fusion == "gharm" else None,
        beta=args.beta,
        gamma=args.gamma,
    )
    fused = fusion.fuse_pair_lists(lists, params, k=args.k)
    pairing.save_pairs(args.out, fused)
    print(f"wrote {len(fused)} fused pairs to {args.out}")
    return 0


def _parse_weights(text: Optional[str]):
    if not text:
        return None
    return [float(x) for x in text.split(",")]


def _cmd_match(args) -> int:
    ds = load_dataset(args.root)
    pairs = pairing.load_pairs(args.pairs)
    params = _match_params(args)
    matched = match_image_pairs(
        ds.features.descriptors,
        [(a, b) for a, b, _ in pairs],
        params,
        threads=args.threads,
    )
    for (a, b), rows in matched.items():
        ds.features.add_matches(a, b, rows)
    from .datastore import save_dataset

    save_dataset(ds, args.root)
    total = sum(len(m) for m in matched.values())
    print(f"matched {len(matched)} pairs ({total} matches) into {args.root}")
    return 0


def _cmd_map(args) -> int:
    ds = load_dataset(args.root)
    mp = _match_params(args)
    mc = _mapper_config(args.config)
    mp = MatchParams(mutual_check=mp.mutual_check, ratio=mp.ratio, epipolar_px=mc.filter_max_reproj_error)
    if args.method == "sfm":
        if not args.pairs:
            raise _UsageError("map sfm requires --pairs")
        pairs = pairing.load_pairs(args.pairs)
        rec = triangulate_map(ds, pairs, mp, mc, threads=args.threads)
    else:
        rec = rgbd_map(ds, mp, merge=not args.no_merge)
    ds.map = rec
    from .datastore import save_dataset

    save_dataset(ds, args.root)
    print(f"built {args.method} map with {len(rec.points)} points in {args.root}")
    return 0


def _cmd_localize(args) -> int:
    ds = load_dataset(args.root)
    if ds.map is None or ds.map.is_empty():
        raise LocmapError("dataset has no reconstructed map; run `locmap map` first")
    queries = _read_image_list(args.queries) if args.queries else _query_images(ds)
    pre_pairs = pairing.load_pairs(args.pairs) if args.pairs else None
    pnp = _pnp_config(args.config, args.seed)
    match = _match_params(args)
    retrieval = RetrievalParams(k=args.k)

    def work(img: str) -> LocalizationResult:
        return localize_query(
            ds, ds.map, img, retrieval=retrieval, match=match, pnp=pnp, pairs=pre_pairs
        )

    if args.threads > 1 and len(queries) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(work, queries))
    else:
        results = [work(q) for q in queries]
    save_results(args.out, results)
    n_loc = sum(1 for r in results if r.pose is not None)
    print(f"localized {n_loc}/{len(results)} queries -> {args.out}")
    return 0


def _cmd_postprocess(args) -> int:
    ds = load_dataset(args.root)
    results = load_results(args.results)
    records = ds.image_index()
    if args.steps in ("rig", "rig+seq"):
        results = rig_complete(results, ds.rigs, records)
    if args.steps in ("seq", "rig+seq"):
        results = sequence_complete(results, records, max_gap=args.max_gap)
    save_results(args.out, results)
    n_loc = sum(1 for r in results if r.pose is not None)
    print(f"{n_loc}/{len(results)} localized after {args.steps} -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    results = load_results(args.results)
    gt = synth.load_ground_truth(args.gt if args.gt else args.root)
    gt_poses = {}
    for r in results:
        if r.image_path in gt.poses:
            gt_poses[r.image_path] = gt.poses[r.image_path]
    bins = evaluation.PRESETS.get(args.bins)
    if bins is None:
        raise _UsageError(f"unknown bins preset {args.bins!r}")
    report = evaluation.format_report(results, gt_poses, bins)
    if args.report:
        Path(args.report).write_text(report, encoding="utf-8")
    if args.csv:
        evaluation.save_metrics_csv(args.csv, results, gt_poses, bins)
    print(report, end="")
    return 0


def _cmd_pipeline(args) -> int:
    cfg_path = Path(args.config)
    with open(cfg_path, "rb") as fh:
        cfg = tomllib.load(fh)
    root_setting = cfg.get("dataset", {}).get("root")
    if root_setting is None:
        root = cfg_path.parent
    else:
        root = Path(root_setting)
        if not root.is_absolute():
            root = cfg_path.parent / root
    run_dir = root / "run"
    run_dir.mkdir(parents=True, exist_ok=True)

    pairs_cfg = cfg.get("pairs", {})
    mapping_cfg = cfg.get("mapping", {})
    matching_cfg = cfg.get("matching", {})
    loc_cfg = cfg.get("localization", {})
    post_cfg = cfg.get("postprocess", {})
    eval_cfg = cfg.get("evaluation", {})

    ns = argparse.Namespace(
        root=str(root),
        strategy=pairs_cfg.get("strategy", "distance"),
        k=int(pairs_cfg.get("k", 10)),
        queries=None,
        out=str(run_dir / "pairs_mapping.txt"),
        tau_c=float(pairs_cfg.get("tau_c", 25.0)),
        tau_r=float(pairs_cfg.get("tau_r", 45.0)),
        near=float(pairs_cfg.get("near", 0.1)),
        far=float(pairs_cfg.get("far", 50.0)),
    )
    _cmd_pairs(ns)

    ns = argparse.Namespace(
        root=str(root),
        pairs=str(run_dir / "pairs_mapping.txt"),
        no_mutual=not matching_cfg.get("mutual", True),
        ratio=matching_cfg.get("ratio"),
        threads=args.threads,
    )
    _cmd_match(ns)

    ns = argparse.Namespace(
        root=str(root),
        method=mapping_cfg.get("method", "sfm"),
        pairs=str(run_dir / "pairs_mapping.txt"),
        config=mapping_cfg.get("config", "config1"),
        no_mutual=not matching_cfg.get("mutual", True),
        ratio=matching_cfg.get("ratio"),
        no_merge=not mapping_cfg.get("merge", True),
        threads=args.threads,
    )
    _cmd_map(ns)

    queries_file = loc_cfg.get("queries")
    ns = argparse.Namespace(
        root=str(root),
        queries=str(root / queries_file) if queries_file else (
            str(root / "queries.txt") if (root / "queries.txt").is_file() else None
        ),
        out=str(run_dir / "results.txt"),
        pairs=None,
        config=loc_cfg.get("config", "config2"),
        seed=int(loc_cfg.get("seed", 0)),
        k=int(loc_cfg.get("k", 20)),
        no_mutual=not matching_cfg.get("mutual", True),
        ratio=matching_cfg.get("ratio"),
        epipolar_px=float(loc_cfg.get("epipolar_px", 4.0)),
        threads=args.threads,
    )
    _cmd_localize(ns)

    results_file = run_dir / "results.txt"
    steps = post_cfg.get("steps", "none")
    if steps != "none":
        ns = argparse.Namespace(
            root=str(root),
            results=str(results_file),
            out=str(run_dir / "results_postprocessed.txt"),
            steps=steps,
            max_gap=post_cfg.get("max_gap"),
        )
        _cmd_postprocess(ns)
        results_file = run_dir / "results_postprocessed.txt"

    ns = argparse.Namespace(
        root=str(root),
        results=str(results_file),
        gt=None,
        bins=eval_cfg.get("bins", "outdoor"),
        report=str(run_dir / "report.txt"),
        csv=str(run_dir / "metrics.csv"),
    )
    _cmd_evaluate(ns)
    return 0


# --- parser ---

def _build_parser() -> _Parser:
    p = _Parser(prog="locmap", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("validate", help="load a dataset and report its contents")
    sp.add_argument("root")
    sp.set_defaults(func=_cmd_validate)

    sp = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-points", type=int, default=500)
    sp.add_argument("--n-map-cams", type=int, default=12)
    sp.add_argument("--n-query-cams", type=int, default=4)
    sp.add_argument("--extent", type=float, default=10.0)
    sp.add_argument("--pixel-noise", type=float, default=0.5)
    sp.add_argument("--outlier-fraction", type=float, default=0.0)
    sp.add_argument("--rig", default=None, metavar="N[:BASELINE]", help="query rig spec")
    sp.add_argument("--depth", action="store_true", help="render depth maps")
    sp.add_argument("--pose-noise-t", type=float, default=0.0, metavar="METERS")
    sp.add_argument("--pose-noise-r", type=float, default=0.0, metavar="DEGREES")
    sp.set_defaults(func=_cmd_synth)

    sp = sub.add_parser("pairs", help="build an image-pair shortlist")
    sp.add_argument("strategy", choices=["retrieval", "distance", "frustum", "covis"])
    sp.add_argument("root")
    sp.add_argument("--out", required=True)
    sp.add_argument("--k", type=int, default=20)
    sp.add_argument("--queries", default=None, help="query list file (localization mode)")
    sp.add_argument("--tau-c", type=float, default=25.0)
    sp.add_argument("--tau-r", type=float, default=45.0)
    sp.add_argument("--near", type=float, default=0.1)
    sp.add_argument("--far", type=float, default=50.0)
    sp.set_defaults(func=_cmd_pairs)

    sp = sub.add_parser("fuse", help="fuse per-descriptor retrieval pair lists")
    sp.add_argument("--inputs", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument(
        "--fusion",
        default="mean",
        choices=[m.value for m in fusion.FusionMethod],
    )
    sp.add_argument("--beta", type=float, default=0.5)
    sp.add_argument("--gamma", type=float, default=1.0)
    sp.add_argument("--weights", default=None, help="comma-separated weights")
    sp.add_argument("--k", type=int, default=None)
    sp.set_defaults(func=_cmd_fuse)

    sp = sub.add_parser("match", help="match descriptors for listed pairs")
    sp.add_argument("root")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--no-mutual", action="store_true")
    sp.add_argument("--ratio", type=float, default=None)
    sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sp.set_defaults(func=_cmd_match)

    sp = sub.add_parser("map", help="build the reconstructed map")
    sp.add_argument("method", choices=["sfm", "rgbd"])
    sp.add_argument("root")
    sp.add_argument("--pairs", default=None)
    sp.add_argument("--config", default="config1", choices=["config1", "config2"])
    sp.add_argument("--no-mutual", action="store_true")
    sp.add_argument("--ratio", type=float, default=None)
    sp.add_argument("--no-merge", action="store_true", help="rgbd: skip match merging")
    sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sp.set_defaults(func=_cmd_map)

    sp = sub.add_parser("localize", help="localize query images against the map")
    sp.add_argument("root")
    sp.add_argument("--queries", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pairs", default=None, help="precomputed (possibly fused) pair list")
    sp.add_argument("--config", default="config1", choices=["config1", "config2"])
    sp.add_argument("--k", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-mutual", action="store_true")
    sp.add_argument("--ratio", type=float, default=None)
    sp.add_argument("--epipolar-px", type=float, default=4.0)
    sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sp.set_defaults(func=_cmd_localize)

    sp = sub.add_parser("postprocess", help="complete unlocalized queries")
    sp.add_argument("steps", choices=["rig", "seq", "rig+seq"])
    sp.add_argument("root")
    sp.add_argument("--results", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-gap", type=int, default=None)
    sp.set_defaults(func=_cmd_postprocess)

    sp = sub.add_parser("evaluate", help="compute recall buckets and medians")
    sp.add_argument("root")
    sp.add_argument("--results", required=True)
    sp.add_argument("--gt", default=None, help="directory holding ground_truth/")
    sp.add_argument("--bins", default="outdoor", choices=sorted(evaluation.PRESETS))
    sp.add_argument("--report", default=None)
    sp.add_argument("--csv", default=None)
    sp.set_defaults(func=_cmd_evaluate)

    sp = sub.add_parser("pipeline", help="run all stages from a TOML config")
    sp.add_argument("config")
    sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sp.set_defaults(func=_cmd_pipeline)

    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except LocmapError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
