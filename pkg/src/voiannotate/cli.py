"""Command-line front end: seeded, resumable runs of the annotation pipeline.

Subcommands: scene-check, simulate, gan-train, gan-apply, train, ingest,
annotate-cnn, annotate-geo, qa, evaluate, compare, pipeline. Every delimited
output starts with a header line naming the tool version, the seed, and a
digest of the inputs, so equal runs produce byte-identical artifacts. A
config file of ``key = value`` lines (flag names, dashes or underscores) can
stand in for flags; explicit flags win.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import (
    HeadPoseSample,
    Registration,
    ScanPoint,
    annotate_scanpoints,
    parse_poses_csv,
)
from .classifier import (
    AugmentConfig,
    ClassCatalog,
    ClassifierConfig,
    TrainConfig,
    TrainedClassifier,
    format_train_log,
    predict,
    train,
)
from .evaluate import (
    ComparisonEntry,
    FixationAnnotation,
    compare_reports,
    confusion,
    format_metrics_report,
    parse_metrics_report,
    popular_vote,
    qa_target_check,
    weighted_metrics,
)
from .gan import (
    CycleGanModel,
    DomainDataset,
    GanTrainConfig,
    format_gan_log,
    train_cyclegan,
)
from .geometry import CameraIntrinsics, VoiError, parse_scene
from .images import Image
from .ingest import (
    FixationEvent,
    FrameIndex,
    fixation_thumbnails,
    parse_gaze_export,
    retention_ratio,
)
from .nn import AdamConfig
from .render import (
    CameraSamplingPlan,
    DatasetManifest,
    ManifestRow,
    MarkerPathConfig,
    MarkerStyle,
    generate_dataset,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# shared plumbing


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def inputs_digest(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(file_digest(p).encode())
    return h.hexdigest()[:12]


def output_header(kind: str, seed=None, inputs=(), **extra) -> str:
    parts = [f"#voi-{kind} v1", f"tool=voiannotate/{__version__}"]
    if seed is not None:
        parts.append(f"seed={seed}")
    if inputs:
        parts.append(f"inputs={inputs_digest(inputs)}")
    parts += [f"{k}={v}" for k, v in extra.items()]
    return " ".join(parts)


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _floats_list(text):
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _ints_list(text):
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def load_config_file(path):
    """key = value lines; '#' comments; keys mirror long flag names."""
    pairs = []
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise VoiError(f"{path} line {line_no}: expected key = value")
        key, value = line.split("=", 1)
        pairs.append((key.strip().replace("_", "-"), value.strip()))
    return pairs


def expand_config_argv(argv):
    """Splice config-file pairs in front of explicit flags so flags win."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise VoiError("--config needs a file path")
    pairs = load_config_file(argv[i + 1])
    rest = argv[:i] + argv[i + 2 :]
    injected = []
    for key, value in pairs:
        if value.lower() in ("true", "yes", "on") and key.startswith(("no-", "keep-", "drop-")):
            injected.append(f"--{key}")
        elif value.lower() in ("true", "yes", "on"):
            injected.append(f"--{key}")
        elif value.lower() in ("false", "off", "no"):
            continue
        else:
            injected += [f"--{key}", value]
    return rest[:1] + injected + rest[1:]


def _intrinsics_from_args(args) -> CameraIntrinsics:
    return CameraIntrinsics(
        width_px=args.frame_width, height_px=args.frame_height, focal_px=args.focal
    )


def _add_camera_flags(p):
    p.add_argument("--frame-width", type=int, default=1280)
    p.add_argument("--frame-height", type=int, default=960)
    p.add_argument("--focal", type=float, default=1000.0)


ANNOTATION_COLUMNS = "fixation_id,class_name,class_index,votes_total,votes_winner,confidence"


def write_annotations(path, annotations, class_names, header):
    lines = [header, ANNOTATION_COLUMNS]
    for a in annotations:
        if a.class_index < 0:
            lines.append(f"{a.fixation_id},uncovered,-1,0,0,")
            continue
        conf = f"{a.confidence:.6f}" if a.confidence is not None else ""
        lines.append(
            f"{a.fixation_id},{class_names[a.class_index]},{a.class_index},"
            f"{a.total_votes},{a.winner_votes},{conf}"
        )
    return write_text(path, "\n".join(lines) + "\n")


def read_annotations(path):
    """Annotation CSV (or ground-truth events CSV with a class column) as a
    list of (fixation_id, class_name)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise VoiError(f"{path}: empty annotation file")
    header = lines[0].split(",")
    if "fixation_id" in header and "class_name" in header:
        fid_col = header.index("fixation_id")
        cls_col = header.index("class_name")
    elif "id" in header and "class" in header:
        fid_col = header.index("id")
        cls_col = header.index("class")
    else:
        raise VoiError(f"{path}: need fixation_id/class_name or id/class columns")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        out.append((int(parts[fid_col]), parts[cls_col].strip()))
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_scene_check(args):
    scene = parse_scene(Path(args.scene).read_text())
    names = scene.class_names()
    print(f"scene ok: {scene.num_vois} VOIs, {len(scene.background)} background primitives")
    print(f"classes ({scene.num_classes}): " + ", ".join(f"{i}={n}" for i, n in enumerate(names)))
    c = scene.bbox_center()
    print(f"bounding-box center: ({c[0]:.3f}, {c[1]:.3f}, {c[2]:.3f})")
    return 0


def _plan_from_args(args, intrinsics):
    return CameraSamplingPlan(
        azimuth_start_deg=args.azimuth_start,
        azimuth_stop_deg=args.azimuth_stop,
        azimuth_step_deg=args.azimuth_step,
        eye_heights_m=_floats_list(args.eye_heights),
        extra_heights_m=_floats_list(args.extra_heights) if args.extra_heights else (),
        distance_m=args.distance,
        roll_deg=_floats_list(args.rolls),
        aim_jitter_deg=args.jitter,
        intrinsics=intrinsics,
    )


def cmd_simulate(args):
    scene = parse_scene(Path(args.scene).read_text())
    plan = _plan_from_args(args, _intrinsics_from_args(args))
    pathcfg = MarkerPathConfig(step_m=args.path_step, bg_step_m=args.bg_step)
    style = MarkerStyle(radius_px=args.marker_radius, ring_px=args.marker_ring)
    manifest = generate_dataset(
        scene,
        plan,
        pathcfg,
        style,
        args.out,
        seed=args.seed,
        thumb_side=args.thumb_side,
        include_defaults=not args.no_defaults,
        keep_full_frames=args.keep_full_frames,
        max_points_per_class_per_view=args.max_per_class_per_view,
        workers=args.workers,
    )
    manifest.extra["tool"] = f"voiannotate/{__version__}"
    manifest.extra["inputs"] = inputs_digest([args.scene])
    manifest.write(Path(args.out) / "manifest.csv")
    counts = manifest.class_counts()
    print(f"wrote {len(manifest.rows)} rows to {args.out}/manifest.csv")
    print("per-class counts: " + ", ".join(f"{c}:{counts.get(c, 0)}" for c in range(manifest.classes)))
    if manifest.underrepresented:
        print(f"WARNING underrepresented classes: {manifest.underrepresented}")
    return 0


def _domain_from_args(path, side, limit=None):
    path = Path(path)
    if path.is_dir():
        return DomainDataset.from_dir(path, limit=limit)
    manifest = DatasetManifest.read(path)
    rows = manifest.rows if limit is None else manifest.rows[:limit]
    images = [Image.load_png(path.parent / r.path) for r in rows]
    ds = DomainDataset.from_images(images)
    if ds.side != side:
        raise VoiError(f"{path}: image side {ds.side} does not match --side {side}")
    return ds


def cmd_gan_train(args):
    cfg = GanTrainConfig(
        epochs=args.epochs,
        image_side=args.side,
        width_scale=args.width_scale,
        res_blocks=args.res_blocks,
        cycle_weight=args.cycle_weight,
        pool_size=args.pool_size,
        lr=args.lr,
    )
    src = _domain_from_args(args.source, args.side, args.limit)
    tgt = _domain_from_args(args.target, args.side, args.limit)
    model, rows = train_cyclegan(src, tgt, cfg, seed=args.seed)
    out = Path(args.out)
    model.save(out / "cyclegan.ckpt")
    header = output_header("ganlog", seed=args.seed, inputs=[], epochs=cfg.epochs, side=cfg.image_side)
    write_text(out / "gan_log.csv", header + "\n" + format_gan_log(rows))
    if not args.no_figures:
        from .report import gan_curves_figure

        gan_curves_figure(rows, out / "gan_curves.png")
    print(f"trained translator for {cfg.epochs} epochs; final cycle loss {rows[-1]['cyc']:.4f}")
    print(f"checkpoint: {out / 'cyclegan.ckpt'}")
    return 0


def cmd_gan_apply(args):
    model = CycleGanModel.load(args.model)
    manifest = DatasetManifest.read(args.manifest)
    base = Path(args.manifest).parent
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    batch_paths = [base / r.path for r in manifest.rows]
    arr = np.stack([Image.load_png(p).to_float().transpose(2, 0, 1) for p in batch_paths])
    translated = model.translate(arr, direction=args.direction)
    for i, (row, img) in enumerate(zip(manifest.rows, translated)):
        rel = f"images/img_{i:06d}.png"
        Image.from_float(img.transpose(1, 2, 0)).save_png(out / rel)
        rows.append(
            ManifestRow(
                path=rel,
                class_index=row.class_index,
                px=row.px,
                py=row.py,
                cam_q=row.cam_q,
                cam_pos=row.cam_pos,
                marker=row.marker,
            )
        )
    shifted = DatasetManifest(classes=manifest.classes, seed=manifest.seed, rows=rows, underrepresented=manifest.underrepresented)
    shifted.extra["tool"] = f"voiannotate/{__version__}"
    shifted.extra["inputs"] = inputs_digest([args.model, args.manifest])
    shifted.extra["direction"] = args.direction
    shifted.write(out / "manifest.csv")
    print(f"translated {len(rows)} images into {out}")
    return 0


def cmd_train(args):
    scene = parse_scene(Path(args.scene).read_text())
    catalog = ClassCatalog.from_scene(scene)
    manifests = []
    for mp in args.manifest:
        manifests.append((DatasetManifest.read(mp), Path(mp).parent))
    clf_cfg = ClassifierConfig(
        num_classes=catalog.size,
        input_side=args.side,
        stage_widths=_ints_list(args.stages),
        blocks_per_stage=args.blocks,
        bottleneck=args.bottleneck,
        stem_pool=not args.no_stem_pool,
    )
    train_cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        adam=AdamConfig(lr=args.lr),
        oversample=not args.no_oversample,
        augment=AugmentConfig(rotation_deg=args.aug_rotation, translate_px=args.aug_translate, color_shift=args.aug_color),
    )
    clf = train(manifests, catalog, clf_cfg, train_cfg, seed=args.seed)
    out = Path(args.out)
    clf.save(out / "classifier.ckpt")
    header = output_header("trainlog", seed=args.seed, inputs=list(args.manifest), epochs=args.epochs)
    write_text(out / "train_log.csv", header + "\n" + format_train_log(clf.log_rows))
    if not args.no_figures:
        from .report import training_curves_figure

        training_curves_figure(clf.log_rows, out / "training_curves.png")
    final = clf.log_rows[-1]
    print(f"trained {args.epochs} epochs: loss={final['loss']:.4f} train_acc={final['train_acc']:.4f} val_acc={final['val_acc']:.4f}")
    print(f"checkpoint: {out / 'classifier.ckpt'}")
    return 0


def cmd_ingest(args):
    samples_text = Path(args.samples).read_text() if args.samples else None
    events_text = Path(args.events).read_text()
    samples, events = parse_gaze_export(samples_text, events_text)
    idx = FrameIndex(fps=args.fps)
    groups = fixation_thumbnails(args.frames, samples, events, idx, side_px=args.side)
    out = Path(args.out)
    (out / "thumbs").mkdir(parents=True, exist_ok=True)
    ratio = retention_ratio(args.side, args.frame_width, args.frame_height)
    header = output_header(
        "thumbs",
        seed=None,
        inputs=[args.events] + ([args.samples] if args.samples else []),
        side=args.side,
        fps=args.fps,
        retention=f"{100 * ratio:.2f}%",
    )
    lines = [header, "fixation_id,frame_index,path,dx,dy"]
    n = 0
    for ev, thumbs in groups:
        for th in thumbs:
            rel = f"thumbs/fix{ev.id:05d}_frame{th.frame_index:06d}.png"
            th.image.save_png(out / rel)
            lines.append(f"{ev.id},{th.frame_index},{rel},{th.dx},{th.dy}")
            n += 1
    write_text(out / "thumbs.csv", "\n".join(lines) + "\n")
    print(f"cropped {n} thumbnails over {len(groups)} fixations into {out}")
    print(f"thumbnail retention: {100 * ratio:.2f}% of frame pixels")
    return 0


def read_thumbs_index(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    rows = []
    for ln in lines:
        if ln.startswith("#") or ln.startswith("fixation_id"):
            continue
        fid, frame_idx, rel, dx, dy = ln.split(",")
        rows.append((int(fid), int(frame_idx), rel))
    return rows


def cmd_annotate_cnn(args):
    clf = TrainedClassifier.load(args.model)
    index = read_thumbs_index(args.thumbs)
    base = Path(args.thumbs).parent
    by_fix = {}
    order = []
    for fid, _frame, rel in index:
        if fid not in by_fix:
            by_fix[fid] = []
            order.append(fid)
        by_fix[fid].append(rel)
    annotations = []
    for fid in order:
        thumbs = [Image.load_png(base / rel) for rel in by_fix[fid]]
        probs, labels = predict(clf, thumbs)
        votes = [(int(lab), float(probs[i, lab])) for i, lab in enumerate(labels)]
        annotations.append(popular_vote(fid, votes, clf.catalog.size))
    header = output_header("annotations", seed=None, inputs=[args.model, args.thumbs], method="cnn")
    write_annotations(args.out, annotations, clf.catalog.names, header)
    print(f"annotated {len(annotations)} fixations -> {args.out}")
    return 0


def cmd_annotate_geo(args):
    scene = parse_scene(Path(args.scene).read_text())
    samples_text = Path(args.samples).read_text() if args.samples else None
    samples, events = parse_gaze_export(samples_text, Path(args.events).read_text())
    poses = parse_poses_csv(Path(args.poses).read_text())
    reg = Registration.from_row_major(_floats_list(args.registration)) if args.registration else Registration()
    k = _intrinsics_from_args(args)
    names = scene.class_names()
    annotations = []
    for ev in events:
        pts = [
            ScanPoint(s.t_ms, s.x_px, s.y_px)
            for s in samples
            if ev.start_ms <= s.t_ms <= ev.end_ms
        ]
        if not pts:
            pts = [ScanPoint(0.5 * (ev.start_ms + ev.end_ms), ev.cx_px, ev.cy_px)]
        results = annotate_scanpoints(scene, pts, poses, reg, k, window_ms=args.window)
        votes = [(r.class_index, None) for r in results if r.covered]
        if votes:
            annotations.append(popular_vote(ev.id, votes, scene.num_classes))
        else:
            annotations.append(FixationAnnotation(ev.id, -1, {}))
    header = output_header(
        "annotations",
        seed=None,
        inputs=[args.scene, args.events, args.poses],
        method="geo",
    )
    write_annotations(args.out, annotations, names, header)
    covered = sum(1 for a in annotations if a.class_index >= 0)
    print(f"annotated {covered}/{len(annotations)} fixations (rest uncovered) -> {args.out}")
    return 0


def cmd_qa(args):
    participants = {}
    if args.participant:
        for spec in args.participant:
            try:
                name, paths = spec.split("=", 1)
                events_path, poses_path = paths.split(":", 1)
            except ValueError:
                raise VoiError(f"--participant expects NAME=events.csv:poses.csv, got '{spec}'") from None
            _s, events = parse_gaze_export(None, Path(events_path).read_text())
            participants[name] = (events, parse_poses_csv(Path(poses_path).read_text()))
    else:
        if not (args.events and args.poses):
            raise VoiError("qa needs either --participant entries or --events plus --poses")
        _s, events = parse_gaze_export(None, Path(args.events).read_text())
        participants["p0"] = (events, parse_poses_csv(Path(args.poses).read_text()))
    tx, ty, tz, diameter = _floats_list(args.target)
    reg = Registration.from_row_major(_floats_list(args.registration)) if args.registration else Registration()
    report = qa_target_check(
        participants,
        np.array([tx, ty, tz]),
        diameter,
        _intrinsics_from_args(args),
        reg=reg,
        threshold_deg=args.threshold,
        window_ms=args.window,
    )
    out = Path(args.out)
    header = output_header(
        "qa",
        seed=None,
        inputs=[],
        threshold_deg=args.threshold,
        target_visual_angle_deg=f"{report.target_visual_angle_deg:.3f}",
    )
    lines = [header, "participant,n_revisits,mean_offset_deg,dispersion_deg,max_offset_deg,passed,pose_coverage"]
    for e in report.entries:
        lines.append(
            f"{e.name},{e.n_revisits},{e.mean_offset_deg:.4f},{e.dispersion_deg:.4f},"
            f"{e.max_offset_deg:.4f},{int(e.passed)},{e.pose_coverage:.4f}"
        )
    write_text(out / "qa.csv", "\n".join(lines) + "\n")
    if not args.no_figures:
        from .report import qa_figure

        qa_figure(report, out / "qa_offsets.png")
    kept = len(report.entries) - len(report.excluded)
    print(f"target visual angle: {report.target_visual_angle_deg:.3f} deg; threshold {args.threshold} deg")
    print(f"{kept} of {len(report.entries)} participants within threshold; excluded: {report.excluded or 'none'}")
    return 0


def cmd_evaluate(args):
    scene = parse_scene(Path(args.scene).read_text())
    names = scene.class_names()
    name_to_idx = {n: i for i, n in enumerate(names)}
    truth_rows = read_annotations(args.truth)
    pred_rows = read_annotations(args.pred)
    pred_map = dict(pred_rows)
    dropped = 0
    if args.drop_uncovered:
        uncovered = {fid for fid, cname in pred_rows if cname == "uncovered"}
        dropped = len(uncovered)
        truth_rows = [(f, c) for f, c in truth_rows if f not in uncovered]
        pred_rows = [(f, c) for f, c in pred_rows if f not in uncovered]

    def to_annotations(rows, which):
        out = []
        for fid, cname in rows:
            if cname not in name_to_idx:
                raise VoiError(f"{which}: unknown class name '{cname}'")
            out.append(FixationAnnotation(fid, name_to_idx[cname], {name_to_idx[cname]: 1}))
        return out

    cm = confusion(to_annotations(truth_rows, "truth"), to_annotations(pred_rows, "pred"), names)
    report = weighted_metrics(cm)
    out = Path(args.out)
    header = output_header("metrics", seed=None, inputs=[args.truth, args.pred], dropped_uncovered=dropped)
    write_text(out / "metrics.csv", header + "\n" + format_metrics_report(report))
    cm_lines = [output_header("confusion", inputs=[args.truth, args.pred]), "truth\\pred," + ",".join(names)]
    for i, n in enumerate(names):
        cm_lines.append(n + "," + ",".join(str(int(v)) for v in cm.counts[i]))
    write_text(out / "confusion.csv", "\n".join(cm_lines) + "\n")
    if not args.no_figures:
        from .report import confusion_figure

        confusion_figure(cm, out / "confusion.png")
    print(
        f"accuracy={report.accuracy:.4f} weighted_precision={report.weighted_precision:.4f} "
        f"weighted_f1={report.weighted_f1:.4f} over {cm.total} fixations"
        + (f" ({dropped} uncovered dropped)" if dropped else "")
    )
    return 0


def cmd_compare(args):
    entries = []
    for spec in args.report:
        try:
            method, setting, path = spec.split(",", 2)
        except ValueError:
            raise VoiError(f"--report expects METHOD,SETTING,PATH, got '{spec}'") from None
        entries.append(ComparisonEntry(method, setting, parse_metrics_report(Path(path).read_text())))
    table = compare_reports(entries)
    out = Path(args.out)
    header = output_header("comparison", inputs=[s.split(",", 2)[2] for s in args.report])
    write_text(out / "comparison.csv", header + "\n" + "\n".join(table.csv_rows()) + "\n")
    write_text(out / "comparison.txt", table.text() + "\n")
    if not args.no_figures:
        from .report import comparison_figure

        comparison_figure(table, out / "comparison.png")
    print(table.text())
    return 0


# ---------------------------------------------------------------------------
# pipeline


class _Stage:
    """Content-addressed stage cache: a stage reruns when its input digest
    changes, and half-written outputs are removed on failure."""

    def __init__(self, out_dir, name):
        self.name = name
        self.marker = Path(out_dir) / "stages" / f"{name}.json"

    def cached(self, digest, outputs):
        if not self.marker.exists():
            return False
        try:
            data = json.loads(self.marker.read_text())
        except json.JSONDecodeError:
            return False
        return data.get("digest") == digest and all(Path(p).exists() for p in data.get("outputs", []))

    def run(self, digest, outputs, fn):
        outputs = [str(o) for o in outputs]
        if self.cached(digest, outputs):
            return "cached"
        try:
            fn()
        except BaseException:
            for o in outputs:
                p = Path(o)
                if p.is_dir():
                    shutil.rmtree(p, ignore_errors=True)
                elif p.exists():
                    p.unlink()
            if self.marker.exists():
                self.marker.unlink()
            raise
        self.marker.parent.mkdir(parents=True, exist_ok=True)
        self.marker.write_text(json.dumps({"digest": digest, "outputs": outputs}, indent=1))
        return "complete"


def _digest_parts(*parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode())
        h.update(b"\0")
    return h.hexdigest()[:16]


def cmd_pipeline(args):
    if not args.scene:
        raise VoiError("pipeline stage 1 (simulate) needs --scene")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    statuses = []
    base_digest = _digest_parts(__version__, args.seed, file_digest(args.scene))

    # stage 1: simulate labeled thumbnails from the scene model
    sim_dir = out / "sim"
    sim_args = argparse.Namespace(**vars(args))
    sim_args.out = str(sim_dir)
    stage = _Stage(out, "simulate")
    digest = _digest_parts(
        base_digest, args.thumb_side, args.azimuth_start, args.azimuth_stop, args.azimuth_step,
        args.eye_heights, args.extra_heights, args.distance, args.rolls, args.jitter,
        args.path_step, args.bg_step, args.marker_radius, args.marker_ring,
        args.max_per_class_per_view, args.workers,
    )
    statuses.append(("simulate", stage.run(digest, [sim_dir], lambda: cmd_simulate(sim_args))))
    sim_manifest = sim_dir / "manifest.csv"

    manifests_for_training = [str(sim_manifest)]

    # stage 2: translator training + application (skipped without a target domain)
    if args.target_dir:
        gan_dir = out / "gan"
        stage = _Stage(out, "gan-train")
        digest = _digest_parts(base_digest, file_digest(sim_manifest), args.target_dir,
                               args.gan_epochs, args.thumb_side, args.width_scale, args.res_blocks, args.gan_limit)

        def run_gan_train():
            gt_args = argparse.Namespace(
                source=str(sim_manifest), target=args.target_dir, out=str(gan_dir),
                seed=args.seed, epochs=args.gan_epochs, side=args.thumb_side,
                width_scale=args.width_scale, res_blocks=args.res_blocks,
                cycle_weight=10.0, pool_size=50, lr=2e-4, limit=args.gan_limit,
                no_figures=args.no_figures,
            )
            cmd_gan_train(gt_args)

        statuses.append(("gan-train", stage.run(digest, [gan_dir], run_gan_train)))

        shifted_dir = out / "shifted"
        stage = _Stage(out, "gan-apply")
        digest = _digest_parts(base_digest, file_digest(gan_dir / "cyclegan.ckpt"), file_digest(sim_manifest))

        def run_gan_apply():
            ga_args = argparse.Namespace(
                model=str(gan_dir / "cyclegan.ckpt"), manifest=str(sim_manifest),
                out=str(shifted_dir), direction="src_to_tgt",
            )
            cmd_gan_apply(ga_args)

        statuses.append(("gan-apply", stage.run(digest, [shifted_dir], run_gan_apply)))
        manifests_for_training.append(str(shifted_dir / "manifest.csv"))
    else:
        statuses.append(("gan-train", "skipped (no --target-dir)"))
        statuses.append(("gan-apply", "skipped (no --target-dir)"))

    # stage 3: classifier training on simulated + shifted data
    clf_dir = out / "clf"
    stage = _Stage(out, "train")
    digest = _digest_parts(base_digest, *(file_digest(m) for m in manifests_for_training),
                           args.epochs, args.batch, args.lr, args.stages, args.blocks, args.thumb_side)

    def run_train():
        tr_args = argparse.Namespace(
            scene=args.scene, manifest=manifests_for_training, out=str(clf_dir),
            seed=args.seed, side=args.thumb_side, epochs=args.epochs, batch=args.batch,
            lr=args.lr, stages=args.stages, blocks=args.blocks, bottleneck=False,
            no_stem_pool=False, no_oversample=False,
            aug_rotation=args.aug_rotation, aug_translate=args.aug_translate, aug_color=args.aug_color,
            no_figures=args.no_figures,
        )
        cmd_train(tr_args)

    statuses.append(("train", stage.run(digest, [clf_dir], run_train)))

    # stage 4: ingest experimental data and annotate
    if args.frames and args.events:
        ing_dir = out / "ingest"
        stage = _Stage(out, "ingest")
        ingest_inputs = [args.events] + ([args.samples] if args.samples else [])
        digest = _digest_parts(base_digest, args.frames, *(file_digest(p) for p in ingest_inputs),
                               args.thumb_side, args.fps)

        def run_ingest():
            in_args = argparse.Namespace(
                frames=args.frames, events=args.events, samples=args.samples,
                out=str(ing_dir), side=args.thumb_side, fps=args.fps,
                frame_width=args.frame_width, frame_height=args.frame_height,
            )
            cmd_ingest(in_args)

        statuses.append(("ingest", stage.run(digest, [ing_dir], run_ingest)))

        ann_path = out / "annotations_cnn.csv"
        stage = _Stage(out, "annotate-cnn")
        digest = _digest_parts(base_digest, file_digest(clf_dir / "classifier.ckpt"), file_digest(ing_dir / "thumbs.csv"))

        def run_annotate():
            an_args = argparse.Namespace(
                model=str(clf_dir / "classifier.ckpt"), thumbs=str(ing_dir / "thumbs.csv"), out=str(ann_path)
            )
            cmd_annotate_cnn(an_args)

        statuses.append(("annotate-cnn", stage.run(digest, [ann_path], run_annotate)))

        if args.poses:
            geo_path = out / "annotations_geo.csv"
            stage = _Stage(out, "annotate-geo")
            digest = _digest_parts(base_digest, file_digest(args.poses), file_digest(args.events), args.registration or "")

            def run_geo():
                geo_args = argparse.Namespace(
                    scene=args.scene, events=args.events, samples=args.samples,
                    poses=args.poses, registration=args.registration, out=str(geo_path),
                    window=100.0, frame_width=args.frame_width, frame_height=args.frame_height,
                    focal=args.focal,
                )
                cmd_annotate_geo(geo_args)

            statuses.append(("annotate-geo", stage.run(digest, [geo_path], run_geo)))

        if args.truth:
            for label, pred_path in (("cnn", ann_path),) + ((("geo", out / "annotations_geo.csv"),) if args.poses else ()):
                eval_dir = out / f"eval_{label}"
                stage = _Stage(out, f"evaluate-{label}")
                digest = _digest_parts(base_digest, file_digest(args.truth), file_digest(pred_path))

                def run_eval(pred_path=pred_path, eval_dir=eval_dir):
                    ev_args = argparse.Namespace(
                        scene=args.scene, truth=args.truth, pred=str(pred_path), out=str(eval_dir),
                        drop_uncovered=True, no_figures=args.no_figures,
                    )
                    cmd_evaluate(ev_args)

                statuses.append((f"evaluate-{label}", stage.run(digest, [eval_dir], run_eval)))
            if args.poses:
                cmp_dir = out / "comparison"
                stage = _Stage(out, "compare")
                digest = _digest_parts(base_digest, file_digest(out / "eval_cnn/metrics.csv"), file_digest(out / "eval_geo/metrics.csv"))

                def run_compare():
                    cp_args = argparse.Namespace(
                        report=[
                            f"cnn,{args.setting},{out / 'eval_cnn/metrics.csv'}",
                            f"geo,{args.setting},{out / 'eval_geo/metrics.csv'}",
                        ],
                        out=str(cmp_dir),
                        no_figures=args.no_figures,
                    )
                    cmd_compare(cp_args)

                statuses.append(("compare", stage.run(digest, [cmp_dir], run_compare)))
    else:
        statuses.append(("ingest", "skipped (no --frames/--events)"))

    ratio = retention_ratio(args.thumb_side, args.frame_width, args.frame_height)
    lines = [output_header("pipeline-summary", seed=args.seed, inputs=[args.scene])]
    lines.append(f"thumbnail retention: {100 * ratio:.2f}% of frame pixels ({args.thumb_side}x{args.thumb_side} of {args.frame_width}x{args.frame_height})")
    for name, status in statuses:
        lines.append(f"stage {name}: {status}")
    write_text(out / "summary.txt", "\n".join(lines) + "\n")
    for line in lines[1:]:
        print(line)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="voiannotate",
        description="Annotate volumes of interest in 3D-scene eye-tracking data: "
        "simulate labeled training images, domain-shift them, train a classifier, "
        "and compare against the geometric gaze-ray baseline.",
    )
    parser.add_argument("--version", action="version", version=f"voiannotate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="key = value file mirroring flag names; flags override")
        return p

    p = add("scene-check", cmd_scene_check, "validate a scene description")
    p.add_argument("--scene", required=True)

    p = add("simulate", cmd_simulate, "render the labeled synthetic dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--thumb-side", type=int, default=224)
    p.add_argument("--azimuth-start", type=float, default=-45.0)
    p.add_argument("--azimuth-stop", type=float, default=45.0)
    p.add_argument("--azimuth-step", type=float, default=15.0)
    p.add_argument("--eye-heights", default="1.535,1.635,1.755")
    p.add_argument("--extra-heights", default="")
    p.add_argument("--distance", type=float, default=1.0)
    p.add_argument("--rolls", default="0")
    p.add_argument("--jitter", type=float, default=5.0)
    p.add_argument("--path-step", type=float, default=0.05)
    p.add_argument("--bg-step", type=float, default=None)
    p.add_argument("--marker-radius", type=int, default=8)
    p.add_argument("--marker-ring", type=int, default=2)
    p.add_argument("--max-per-class-per-view", type=int, default=None)
    p.add_argument("--keep-full-frames", action="store_true")
    p.add_argument("--no-defaults", action="store_true", help="sweep only VOI classes")
    p.add_argument("--workers", type=int, default=1)
    _add_camera_flags(p)

    p = add("gan-train", cmd_gan_train, "train the domain-shift translator")
    p.add_argument("--source", required=True, help="simulation manifest.csv or a directory of PNGs")
    p.add_argument("--target", required=True, help="directory of target-domain PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--width-scale", type=float, default=1.0)
    p.add_argument("--res-blocks", type=int, default=2)
    p.add_argument("--cycle-weight", type=float, default=10.0)
    p.add_argument("--pool-size", type=int, default=50)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--limit", type=int, default=None, help="cap images per domain")
    p.add_argument("--no-figures", action="store_true")

    p = add("gan-apply", cmd_gan_apply, "translate a manifest through a trained translator")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--direction", default="src_to_tgt", choices=["src_to_tgt", "tgt_to_src"])

    p = add("train", cmd_train, "train the fixation classifier")
    p.add_argument("--scene", required=True)
    p.add_argument("--manifest", action="append", required=True, help="repeatable")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--side", type=int, default=224)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--stages", default="16,32,64")
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--bottleneck", action="store_true")
    p.add_argument("--no-stem-pool", action="store_true")
    p.add_argument("--no-oversample", action="store_true")
    p.add_argument("--aug-rotation", type=float, default=15.0)
    p.add_argument("--aug-translate", type=int, default=10)
    p.add_argument("--aug-color", type=float, default=0.1)
    p.add_argument("--no-figures", action="store_true")

    p = add("ingest", cmd_ingest, "crop fixation thumbnails from exported frames")
    p.add_argument("--frames", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--samples", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--side", type=int, default=224)
    p.add_argument("--fps", type=float, default=24.0)
    p.add_argument("--frame-width", type=int, default=1280)
    p.add_argument("--frame-height", type=int, default=960)

    p = add("annotate-cnn", cmd_annotate_cnn, "annotate fixations with the trained classifier")
    p.add_argument("--model", required=True)
    p.add_argument("--thumbs", required=True, help="thumbs.csv from ingest")
    p.add_argument("--out", required=True)

    p = add("annotate-geo", cmd_annotate_geo, "annotate fixations with the gaze-ray baseline")
    p.add_argument("--scene", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--samples", default=None)
    p.add_argument("--poses", required=True)
    p.add_argument("--registration", default=None, help="12 numbers: row-major rotation then translation")
    p.add_argument("--window", type=float, default=100.0, help="pose coverage window (ms)")
    p.add_argument("--out", required=True)
    _add_camera_flags(p)

    p = add("qa", cmd_qa, "tracking-quality check against a revisited target")
    p.add_argument("--participant", action="append", default=None, help="NAME=events.csv:poses.csv, repeatable")
    p.add_argument("--events", default=None)
    p.add_argument("--poses", default=None)
    p.add_argument("--target", required=True, help="x,y,z,diameter_m")
    p.add_argument("--threshold", type=float, default=1.5)
    p.add_argument("--window", type=float, default=100.0)
    p.add_argument("--registration", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    _add_camera_flags(p)

    p = add("evaluate", cmd_evaluate, "confusion matrix and weighted metrics vs ground truth")
    p.add_argument("--scene", required=True)
    p.add_argument("--truth", required=True, help="events CSV with a class column, or an annotation CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--drop-uncovered", action="store_true", default=True)
    p.add_argument("--keep-uncovered", dest="drop_uncovered", action="store_false")
    p.add_argument("--no-figures", action="store_true")

    p = add("compare", cmd_compare, "side-by-side table of metric reports")
    p.add_argument("--report", action="append", required=True, help="METHOD,SETTING,metrics.csv, repeatable")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")

    p = add("pipeline", cmd_pipeline, "run the full flow with stage caching")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-dir", default=None, help="target-domain PNGs for the translator")
    p.add_argument("--frames", default=None)
    p.add_argument("--events", default=None)
    p.add_argument("--samples", default=None)
    p.add_argument("--poses", default=None)
    p.add_argument("--truth", default=None)
    p.add_argument("--registration", default=None)
    p.add_argument("--setting", default="default", help="label for the comparison table")
    p.add_argument("--thumb-side", type=int, default=64)
    p.add_argument("--azimuth-start", type=float, default=-45.0)
    p.add_argument("--azimuth-stop", type=float, default=45.0)
    p.add_argument("--azimuth-step", type=float, default=15.0)
    p.add_argument("--eye-heights", default="1.535,1.635,1.755")
    p.add_argument("--extra-heights", default="")
    p.add_argument("--distance", type=float, default=1.0)
    p.add_argument("--rolls", default="0")
    p.add_argument("--jitter", type=float, default=5.0)
    p.add_argument("--path-step", type=float, default=0.05)
    p.add_argument("--bg-step", type=float, default=None)
    p.add_argument("--marker-radius", type=int, default=4)
    p.add_argument("--marker-ring", type=int, default=1)
    p.add_argument("--max-per-class-per-view", type=int, default=None)
    p.add_argument("--keep-full-frames", action="store_true")
    p.add_argument("--no-defaults", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--fps", type=float, default=24.0)
    p.add_argument("--gan-epochs", type=int, default=50)
    p.add_argument("--gan-limit", type=int, default=64)
    p.add_argument("--width-scale", type=float, default=1.0)
    p.add_argument("--res-blocks", type=int, default=2)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--stages", default="16,32,64")
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--aug-rotation", type=float, default=15.0)
    p.add_argument("--aug-translate", type=int, default=10)
    p.add_argument("--aug-color", type=float, default=0.1)
    p.add_argument("--no-figures", action="store_true")
    _add_camera_flags(p)

    return parser


def dispatch(argv=None) -> int:
    """Run one subcommand: 0 on success, 1 on domain errors, 2 on usage."""
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        argv = expand_config_argv(argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except VoiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except VoiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
