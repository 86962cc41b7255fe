"""Command line entry point: ``mushpose <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .encoding import NoiseSpec, encode_gt, perturb
from .evaluation import evaluate, pred_to_obb
from .formats import (
    FormatError,
    SCHEMA_VERSION,
    annotation_from_doc,
    annotation_to_doc,
    dump_json,
    encoding_from_doc,
    encoding_to_doc,
    load_json,
    poses_from_doc,
    poses_to_doc,
    read_ply,
    report_to_doc,
    segmentation_from_doc,
    segmentation_to_doc,
    write_ply,
)
from .geometry import DegenerateGeometryError, PointCloud
from .pose import estimate_pose, icp_refine
from .segmentation import Segmentation, segment
from .synthesis import SceneConfig, generate_scene, make_template, scene_seed

log = logging.getLogger("mushpose")

SCENE_RE = re.compile(r"scene_(\d+)$")


# ---------------------------------------------------------------------------
# dataset helpers


def scene_dirs(args) -> list:
    dirs = [Path(p) for p in (args.scene or [])]
    if getattr(args, "dataset", None):
        dirs += sorted(p for p in Path(args.dataset).iterdir() if p.is_dir() and SCENE_RE.match(p.name))
    if not dirs:
        raise SystemExit("error: give --scene DIR or --dataset DIR")
    return dirs


def scene_index(path: Path) -> int:
    m = SCENE_RE.match(path.name)
    return int(m.group(1)) if m else 0


def load_cloud(scene: Path) -> PointCloud:
    return read_ply(scene / "cloud.ply")


def load_annotation(scene: Path, n_points=None):
    path = scene / "annotation.json"
    return annotation_from_doc(load_json(path, "annotation"), str(path), n_points)


def load_encoding(scene: Path, n_points: int, source: str = "auto"):
    """Encoding used downstream: external/perturbed predictions first, then GT."""
    pred = scene / "prediction.json"
    gt = scene / "encoding.json"
    if source == "prediction" or (source == "auto" and pred.exists()):
        return encoding_from_doc(load_json(pred, "prediction"), str(pred), n_points)
    if gt.exists():
        return encoding_from_doc(load_json(gt, "encoding"), str(gt), n_points)
    if source == "encoding":
        raise FormatError(f"{gt} not found")
    return encode_gt(load_cloud(scene), load_annotation(scene, n_points))


def run_jobs(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands


def _write_scene(task):
    out_dir, name, cfg_dict = task
    cfg = SceneConfig(**cfg_dict)
    cloud, ann, info = generate_scene(cfg, return_info=True)
    info["voxel_base"] = cfg.voxel_base
    scene = Path(out_dir) / name
    scene.mkdir(parents=True, exist_ok=True)
    write_ply(scene / "cloud.ply", cloud)
    dump_json(scene / "annotation.json", annotation_to_doc(ann, info), compact=True)
    return name, len(cloud), len(ann.mushrooms)


def parse_range(text: str):
    m = re.fullmatch(r"\s*(\d+)\s*(?:\.\.\s*(\d+)\s*)?", text)
    if not m:
        raise argparse.ArgumentTypeError(f"expected LO..HI, got {text!r}")
    lo = int(m.group(1))
    hi = int(m.group(2)) if m.group(2) else lo
    return lo, hi


def cmd_gen(args):
    out = Path(args.out)
    if args.from_manifest:
        manifest = load_json(args.from_manifest, "manifest")
        scenes = manifest["scenes"]
    else:
        if args.seed is None:
            raise SystemExit("error: gen requires --seed")
        base = SceneConfig.undeformed() if args.undeformed else SceneConfig()
        base.n_mushrooms = args.mushrooms
        base.ground_preset = args.preset
        if args.voxel is not None:
            base.voxel_base = args.voxel
        scenes = []
        for i in range(args.scenes):
            cfg = base.to_dict()
            cfg["seed"] = scene_seed(args.seed, i)
            scenes.append({"name": f"scene_{i:04d}", "config": cfg})
        manifest = {"schema_version": SCHEMA_VERSION, "kind": "manifest", "generator": f"mushpose {__version__}",
                    "dataset_seed": args.seed, "n_scenes": args.scenes, "scenes": scenes}
    for s in scenes:
        SceneConfig(**s["config"])
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "manifest.json", manifest)
    results = run_jobs(_write_scene, [(str(out), s["name"], s["config"]) for s in scenes], args.jobs)
    for name, n_points, n_mush in results:
        print(f"{name}: {n_points} points, {n_mush} mushrooms")


def _encode_one(scene):
    scene = Path(scene)
    cloud = load_cloud(scene)
    ann = load_annotation(scene, len(cloud))
    dump_json(scene / "encoding.json", encoding_to_doc(encode_gt(cloud, ann)), compact=True)
    return scene.name


def cmd_encode(args):
    for name in run_jobs(_encode_one, [str(s) for s in scene_dirs(args)], args.jobs):
        print(f"{name}: encoding.json")


def _perturb_one(task):
    scene, spec_args = task
    scene = Path(scene)
    n = len(load_cloud(scene))
    enc = load_encoding(scene, n, source="encoding_or_gt")
    sigma_r, sigma_o, flip, seed = spec_args
    spec = NoiseSpec(sigma_r, sigma_o, flip, scene_seed(seed, scene_index(scene)))
    dump_json(scene / "prediction.json", encoding_to_doc(perturb(enc, spec), kind="prediction"), compact=True)
    return scene.name


def cmd_perturb(args):
    if args.seed is None:
        raise SystemExit("error: perturb requires --seed")
    NoiseSpec(args.sigma_r, args.sigma_o, args.flip)
    tasks = [(str(s), (args.sigma_r, args.sigma_o, args.flip, args.seed)) for s in scene_dirs(args)]
    for name in run_jobs(_perturb_one, tasks, args.jobs):
        print(f"{name}: prediction.json")


def _scene_eps(scene: Path) -> float:
    try:
        info = load_json(scene / "annotation.json", "annotation").get("scene", {})
        return 2.5 * float(info.get("voxel_base", 0.08))
    except (OSError, FormatError):
        return 2.5 * 0.08


def _segment_one(task):
    scene, opts = task
    scene = Path(scene)
    cloud = load_cloud(scene)
    enc = load_encoding(scene, len(cloud), opts["source"])
    eps = opts["eps"] if opts["eps"] is not None else _scene_eps(scene)
    seg = segment(cloud, enc, opts["method"], bandwidth=opts["bandwidth"], eps=eps, min_pts=opts["min_pts"],
                  min_cluster_size=opts["min_cluster_size"])
    dump_json(scene / "segmentation.json", segmentation_to_doc(seg), compact=True)
    return scene.name, seg.n_instances


def cmd_segment(args):
    opts = {"source": args.source, "method": args.method, "bandwidth": args.bandwidth, "eps": args.eps,
            "min_pts": args.min_pts, "min_cluster_size": args.min_cluster_size}
    for name, k in run_jobs(_segment_one, [(str(s), opts) for s in scene_dirs(args)], args.jobs):
        print(f"{name}: {k} instances")


def _pose_one(task):
    scene, opts = task
    scene = Path(scene)
    cloud = load_cloud(scene)
    enc = load_encoding(scene, len(cloud), opts["source"])
    path = scene / "segmentation.json"
    seg = segmentation_from_doc(load_json(path, "segmentation"), str(path), len(cloud))
    poses = estimate_pose(cloud, enc, seg, outlier_filter=opts["outlier_filter"])
    if opts["icp"]:
        template = make_template()
        poses = [icp_refine(cloud.points[seg.members(k)], p, template) if p.ok else p
                 for k, p in enumerate(poses)]
    dump_json(scene / "poses.json", poses_to_doc(poses))
    return scene.name, len(poses)


def cmd_pose(args):
    opts = {"source": args.source, "icp": args.icp, "outlier_filter": args.outlier_filter}
    for name, k in run_jobs(_pose_one, [(str(s), opts) for s in scene_dirs(args)], args.jobs):
        print(f"{name}: {k} poses")


def cmd_eval(args):
    root = Path(args.dataset)
    thresholds = [float(t) for t in args.iou.split(",") if t.strip()]
    scenes = []
    for scene in sorted(p for p in root.iterdir() if p.is_dir() and SCENE_RE.match(p.name)):
        ann = load_annotation(scene)
        path = scene / "poses.json"
        poses = poses_from_doc(load_json(path, "poses"), str(path)) if path.exists() else []
        scenes.append((ann, poses))
    report = evaluate(scenes, thresholds, per_scene=args.per_scene, samples=args.samples)
    out = Path(args.out) if args.out else root / "report.json"
    dump_json(out, report_to_doc(report))
    print(report.format_table())


def _palette(k: int) -> np.ndarray:
    rng = np.random.default_rng(12345)
    return rng.integers(40, 256, size=(max(k, 1), 3)).astype(np.uint8)


def cmd_viz(args):
    scene = Path(args.scene[0])
    cloud = load_cloud(scene)
    seg_path = scene / "segmentation.json"
    if seg_path.exists() and not args.gt:
        seg = segmentation_from_doc(load_json(seg_path, "segmentation"), str(seg_path), len(cloud))
    else:
        seg = Segmentation.from_labels(load_annotation(scene, len(cloud)).seg_label)
    colors = np.full((len(cloud), 3), 150, dtype=np.uint8)
    palette = _palette(seg.n_instances)
    fg = seg.instance_id >= 0
    colors[fg] = palette[seg.instance_id[fg]]

    pose_path = scene / "poses.json"
    if pose_path.exists() and not args.gt:
        boxes = [pred_to_obb(p) for p in poses_from_doc(load_json(pose_path, "poses"), str(pose_path)) if p.ok]
    else:
        boxes = [m.obb for m in load_annotation(scene, len(cloud)).mushrooms]
    edge_pts = []
    for box in boxes:
        c = box.corners()
        for i in range(8):
            for j in range(i + 1, 8):
                if bin(i ^ j).count("1") == 1:
                    t = np.linspace(0.0, 1.0, args.edge_samples)[:, None]
                    edge_pts.append(c[i] + t * (c[j] - c[i]))
    if edge_pts:
        edges = np.vstack(edge_pts)
        points = np.vstack([cloud.points, edges])
        colors = np.vstack([colors, np.tile(np.array([[255, 0, 0]], dtype=np.uint8), (len(edges), 1))])
    else:
        points = cloud.points
    write_ply(args.out, PointCloud(points), colors=colors)
    print(f"wrote {args.out}: {len(points)} points, {len(boxes)} boxes")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mushpose", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def scene_args(sp, single=False):
        sp.add_argument("--scene", action="append", help="scene directory (repeatable)")
        if not single:
            sp.add_argument("--dataset", help="process every scene_XXXX under this root")
            sp.add_argument("--jobs", type=int, default=1)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--scenes", type=int, default=50)
    g.add_argument("--mushrooms", type=parse_range, default=(5, 45), help="LO..HI")
    g.add_argument("--seed", type=int)
    g.add_argument("--preset", choices=("A", "B"), default="A")
    g.add_argument("--voxel", type=float)
    g.add_argument("--undeformed", action="store_true", help="mushrooms keep the exact template shape")
    g.add_argument("--from-manifest", help="regenerate the scenes listed in a manifest.json")
    g.add_argument("--out", required=True)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("encode", help="write ground-truth implicit encodings")
    scene_args(e)
    e.set_defaults(func=cmd_encode)

    pt = sub.add_parser("perturb", help="noisy predictions from ground-truth encodings")
    scene_args(pt)
    pt.add_argument("--sigma-r", type=float, default=0.05)
    pt.add_argument("--sigma-o", type=float, default=0.02)
    pt.add_argument("--flip", type=float, default=0.02)
    pt.add_argument("--seed", type=int)
    pt.set_defaults(func=cmd_perturb)

    sg = sub.add_parser("segment", help="cluster encodings into instances")
    scene_args(sg)
    sg.add_argument("--method", choices=("meanshift", "dbscan"), default="meanshift")
    sg.add_argument("--bandwidth", type=float, default=0.3)
    sg.add_argument("--eps", type=float)
    sg.add_argument("--min-pts", type=int, default=8)
    sg.add_argument("--min-cluster-size", type=int, default=20)
    sg.add_argument("--source", choices=("auto", "prediction", "encoding"), default="auto")
    sg.set_defaults(func=cmd_segment)

    ps = sub.add_parser("pose", help="estimate a pose per instance")
    scene_args(ps)
    ps.add_argument("--icp", action="store_true")
    ps.add_argument("--outlier-filter", action="store_true")
    ps.add_argument("--source", choices=("auto", "prediction", "encoding"), default="auto")
    ps.set_defaults(func=cmd_pose)

    ev = sub.add_parser("eval", help="score poses against the annotations")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--iou", default="0.25,0.5")
    ev.add_argument("--per-scene", action="store_true")
    ev.add_argument("--samples", type=int, default=20000)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    vz = sub.add_parser("viz", help="export an instance-colored PLY with box edges")
    scene_args(vz, single=True)
    vz.add_argument("--out", required=True)
    vz.add_argument("--gt", action="store_true", help="show ground truth instead of predictions")
    vz.add_argument("--edge-samples", type=int, default=25)
    vz.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (FormatError, DegenerateGeometryError, ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
