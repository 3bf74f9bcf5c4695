"""Command-line entry point: ``bodyrefine <subcommand> ...``.

Failures print one line ``error: {"type": ..., "message": ...}`` to stderr and
exit with status 1. Usage mistakes (unknown subcommand, bad config key) exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio
from .config import Config, ConfigError, parse_assignment, read_config_file
from .fitting import FitInputs, run_pipeline
from .handles import JOINT_NAMES, joint_positions, load_template_metadata, select_anchor_handles
from .mesh import load_mesh, save_mesh
from .metrics import evaluate, write_csv
from .render import project, rasterize
from .template import body_proxy, proxy_metadata

logger = logging.getLogger("bodyrefine")

STAGES = ("joint", "anchor", "vertex")


class UsageError(Exception):
    pass


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def build_config(items) -> Config:
    """Merge ``--config`` arguments in order: a path loads a file, ``key=value`` overrides one key."""
    values = {}
    for item in items or ():
        if "=" in item and not Path(item).is_file():
            key, val = parse_assignment(item)
            values[key] = val
        else:
            values.update(read_config_file(item))
    return Config(values)


def _metadata_for(mesh, meta_path):
    meta = load_template_metadata(meta_path) if meta_path else proxy_metadata()
    top = max(max(g.vertex_indices) for g in meta.groups)
    if top >= mesh.n_vertices:
        raise ValueError(f"template metadata indexes vertex {top} but the mesh has {mesh.n_vertices}")
    return meta


def _anchor_indices(mesh, meta, cfg: Config):
    default = cfg["anchor.count"] == 200 and cfg["anchor.seed"] == 0
    if meta.anchors is not None and default:
        return list(meta.anchors)
    return [a.vertex_index for a in select_anchor_handles(mesh, meta.excluded, cfg["anchor.count"], cfg["anchor.seed"])]


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------

def fit_one(ann_path: Path, out_dir: Path, cfg: Config):
    """Fit one annotation; returns ``(report, metric_row)``. Writes meshes into ``out_dir``."""
    ann = dataio.load_annotation(ann_path)
    stem = ann_path.stem
    report = {"annotation": ann_path.name, "filtered": ann.filtered, "filter_reasons": ann.filter_reasons}
    if ann.initial_mesh_path is None:
        raise ValueError(f"{ann_path}: annotation has no initial_mesh")
    mesh = load_mesh(ann.resolve(ann.initial_mesh_path))
    meta = _metadata_for(mesh, ann.resolve(ann.template_meta_path))
    joints, valid = ann.joints_array()
    inputs = FitInputs(
        joints_2d=joints, joint_valid=valid,
        silhouette=dataio.read_mask(ann.resolve(ann.silhouette_path)) if ann.silhouette_path else None,
        image=dataio.read_image(ann.resolve(ann.image_path)) if ann.image_path else None,
        albedo=ann.albedo,
    )
    anchors = _anchor_indices(mesh, meta, cfg) if cfg["stages.anchor.enabled"] else None
    result = run_pipeline(mesh, ann.camera, inputs, cfg, meta, anchors)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in STAGES:
        if name in result.stage_meshes:
            save_mesh(result.stage_meshes[name], out_dir / f"{stem}_{name}.obj")
    report.update(result.report)

    final = result.state.mesh
    gt = load_mesh(ann.resolve(ann.gt_mesh_path)) if ann.gt_mesh_path else None
    pred_joints = project(ann.camera, joint_positions(final, meta.groups)) if valid.any() else None
    metrics = evaluate(final, gt, ann.camera, inputs.silhouette, pred_joints,
                       joints if valid.any() else None, valid, list(JOINT_NAMES))
    report["metrics"] = metrics.to_dict()
    return report, metrics.csv_row(stem)


def cmd_fit(args, cfg: Config) -> int:
    src = Path(args.annotation)
    out = Path(args.out)
    if src.is_dir():
        items = sorted(p for p in src.glob("*.json"))
        if not items:
            raise ValueError(f"no *.json annotations in {src}")
    else:
        items = [src]
    out.mkdir(parents=True, exist_ok=True)

    rows = {}
    lock = threading.Lock()
    batch = src.is_dir()

    def work(path):
        target = out / path.stem if batch else out
        try:
            if batch and args.skip_filtered and dataio.load_annotation(path).filtered:
                rep, row = {"annotation": path.name, "status": "filtered"}, None
            else:
                rep, row = fit_one(path, target, cfg)
        except Exception as exc:  # one bad item must not take down the batch
            if not batch:
                raise
            rep, row = {"annotation": path.name, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}, None
        # serialise writes: one appender at a time
        with lock:
            target.mkdir(parents=True, exist_ok=True)
            (target / "report.json").write_text(_dump(rep), encoding="utf-8")
            rows[path.stem] = (rep, row)

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        list(pool.map(work, items))

    csv_rows = [rows[p.stem][1] for p in items if rows[p.stem][1] is not None]
    write_csv(csv_rows, out / "metrics.csv")
    if batch:
        summary = {p.stem: rows[p.stem][0].get("status", "done") for p in items}
        (out / "summary.json").write_text(_dump(summary), encoding="utf-8")
    failed = [s for s, (r, _) in rows.items() if r.get("status") == "failed"]
    if failed:
        raise RuntimeError(f"{len(failed)} annotation(s) failed: {', '.join(sorted(failed))}")
    return 0


# --------------------------------------------------------------------------
# other subcommands
# --------------------------------------------------------------------------

def cmd_eval(args, cfg: Config) -> int:
    pred = load_mesh(args.pred)
    gt = load_mesh(args.gt)
    camera = sil = joints = valid = pred_joints = None
    if args.camera:
        ann = dataio.load_annotation(args.camera)
        camera = ann.camera
        if ann.silhouette_path:
            sil = dataio.read_mask(ann.resolve(ann.silhouette_path))
        joints, valid = ann.joints_array()
        meta_path = args.meta or ann.resolve(ann.template_meta_path)
        try:
            meta = _metadata_for(pred, meta_path)
        except ValueError:
            meta = None
        if meta is not None and valid.any():
            pred_joints = project(camera, joint_positions(pred, meta.groups))
        else:
            joints = None
    rep = evaluate(pred, gt, camera, sil, pred_joints, joints, valid, list(JOINT_NAMES))
    text = rep.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_gen_views(args, cfg: Config) -> int:
    mesh = load_mesh(args.mesh) if args.mesh else body_proxy()
    meta = _metadata_for(mesh, args.meta) if (args.meta or not args.mesh) else None
    views = dataio.sample_views(dataio.ViewSchedule(sample_count=args.count, seed=args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (az, el) in enumerate(views):
        stem = f"view_{i:02d}"
        vm = dataio.view_mesh(mesh, az, el)
        cam = dataio.fit_camera(vm, (args.size, args.size))
        maps = rasterize(vm, cam, cfg["render.eps_vis"])
        dataio.write_mask(out / f"{stem}_mask.png", maps.silhouette)
        dataio.write_pfm(out / f"{stem}_depth.pfm", maps.depth)
        save_mesh(vm, out / f"{stem}_gt.obj")
        record = {"camera": cam.to_dict(), "silhouette": f"{stem}_mask.png", "gt_mesh": f"{stem}_gt.obj",
                  "view": {"azimuth": az, "elevation": el}}
        if meta is not None:
            pts = project(cam, joint_positions(vm, meta.groups))
            record["joints"] = {
                g.joint_name: {"u": float(u), "v": float(v), "valid": bool(0 <= u < cam.width and 0 <= v < cam.height)}
                for g, (u, v) in zip(meta.groups, pts)}
        (out / f"{stem}.json").write_text(_dump(record), encoding="utf-8")
    return 0


def cmd_clean_mesh(args, cfg: Config) -> int:
    mesh = load_mesh(args.mesh)
    cleaned = dataio.remove_inner_surface(mesh, args.resolution)
    save_mesh(cleaned, args.out)
    print(json.dumps({"faces_in": mesh.n_faces, "faces_out": cleaned.n_faces,
                      "vertices_in": mesh.n_vertices, "vertices_out": cleaned.n_vertices}))
    return 0


def cmd_export_patches(args, cfg: Config) -> int:
    ann = dataio.load_annotation(args.annotation)
    mesh = load_mesh(args.mesh if args.mesh else ann.resolve(ann.initial_mesh_path))
    if ann.image_path is None:
        raise ValueError("patch export needs an annotation with an image")
    image = dataio.read_image(ann.resolve(ann.image_path))
    meta = _metadata_for(mesh, ann.resolve(ann.template_meta_path))
    sil = dataio.read_mask(ann.resolve(ann.silhouette_path)) if ann.silhouette_path else None
    joints, valid = ann.joints_array()
    patches = dataio.export_patches(
        image, mesh, ann.camera, args.level, groups=meta.groups, gt_joints_2d=joints, joint_valid=valid,
        anchor_indices=_anchor_indices(mesh, meta, cfg) if args.level == "anchor" else None,
        gt_silhouette=sil, margin_px=cfg["anchor.margin_px"])
    patches.save(args.out)
    print(json.dumps({"level": args.level, "count": len(patches.names),
                      "off_image": int(patches.off_image.sum())}))
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bodyrefine", description="Hierarchical body-mesh refinement.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def with_config(sp):
        sp.add_argument("--config", action="append", default=[], metavar="FILE|KEY=VALUE",
                        help="config file or single override; repeatable, later wins")
        return sp

    f = with_config(sub.add_parser("fit", help="refine the initial mesh of one annotation or a directory"))
    f.add_argument("--annotation", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--workers", type=int, default=1)
    f.add_argument("--skip-filtered", action="store_true",
                   help="in directory mode, skip annotations failing the joint filters")
    f.set_defaults(func=cmd_fit)

    e = with_config(sub.add_parser("eval", help="metrics of a predicted mesh against ground truth"))
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--camera", help="annotation JSON providing camera, silhouette and joints")
    e.add_argument("--meta", help="template metadata JSON (joint groups)")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    g = with_config(sub.add_parser("gen-views", help="render sampled views of a mesh"))
    g.add_argument("--mesh", help="defaults to the built-in body proxy")
    g.add_argument("--meta")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=6)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=dataio.NETWORK_INPUT)
    g.set_defaults(func=cmd_gen_views)

    c = with_config(sub.add_parser("clean-mesh", help="remove faces no axis view can see"))
    c.add_argument("--mesh", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--resolution", type=int, default=512)
    c.set_defaults(func=cmd_clean_mesh)

    x = with_config(sub.add_parser("export-patches", help="handle-centred training patches"))
    x.add_argument("--annotation", required=True)
    x.add_argument("--level", choices=sorted(dataio.PATCH_SIZES), required=True)
    x.add_argument("--mesh", help="mesh to crop around (defaults to the initial mesh)")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_patches)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args.config)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"error: {json.dumps({'type': 'ConfigError', 'message': str(exc)})}\n")
        return 2
    try:
        return args.func(args, cfg)
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        sys.stderr.write(f"error: {json.dumps({'type': type(exc).__name__, 'message': str(exc)})}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
