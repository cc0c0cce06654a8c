"""``egocurate`` command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data/validation error, 4 I/O error.
Errors are printed to stderr as one JSON object per line.
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

from . import DEFAULT_WEIGHTS, PROPERTIES, DataError, __version__
from ._parallel import resolve_workers

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("egocurate")

# Options that never influence results and stay out of provenance.
_NON_RESULT = {"workers", "log_level", "config", "handler"}
_BOOL_KEYS = {"flip"}


class UsageError(Exception):
    pass


def _weights(text):
    try:
        vals = tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"weights must be comma-separated numbers: {text!r}")
    if len(vals) != len(PROPERTIES):
        raise argparse.ArgumentTypeError(f"need {len(PROPERTIES)} weights ({','.join(PROPERTIES)})")
    return vals


def _fraction(text):
    return float(text)


# --------------------------------------------------------------------------
# Provenance helpers
# --------------------------------------------------------------------------

def _digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(path)).encode())
            h.update(hashlib.sha256(f.read_bytes()).digest())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _provenance(args, config_values) -> dict:
    cfg, inputs = {}, {}
    for key, val in sorted(vars(args).items()):
        if key in _NON_RESULT or key == "out":
            continue
        vals = val if isinstance(val, list) else [val]
        paths = [Path(v) for v in vals if isinstance(v, str) and Path(v).exists()]
        if paths and len(paths) == len(vals):
            inputs[key] = [{"name": p.name, "sha256": _digest(p)} for p in paths]
            cfg[key] = [p.name for p in paths] if isinstance(val, list) else paths[0].name
        else:
            cfg[key] = list(val) if isinstance(val, tuple) else val
    return {"tool": "egocurate", "version": __version__, "config": cfg,
            "config_file": config_values, "inputs": inputs,
            "outputs": Path(args.out).name if getattr(args, "out", None) else None}


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run_record_path(out):
    from .manifest import provenance_path_for

    out = Path(out)
    return out / "provenance.json" if out.is_dir() else provenance_path_for(out)


def _require(path, what="input"):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(2, f"{what} not found", str(p))
    return p


# --------------------------------------------------------------------------
# Subcommand handlers
# --------------------------------------------------------------------------

def _cmd_merge_classes(args, prov):
    from .manifest import merge_classes, write_classes
    from .props import read_semantics

    sem = read_semantics(_require(args.input), dim=args.dim)
    table = merge_classes(list(sem.items()), args.threshold)
    write_classes(table, args.out)
    _write_json(_run_record_path(args.out), prov)
    print(f"{len(sem)} labels -> {len(table)} classes")


def _cmd_base_sample(args, prov):
    from .manifest import load_manifest, sample_class_balanced, underpopulated_classes

    man = load_manifest(_require(args.manifest), args.classes)
    ids = sample_class_balanced(man, args.per_class, args.seed)
    text = "".join(i + "\n" for i in ids)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        prov["underpopulated_classes"] = {str(k): v for k, v in underpopulated_classes(man, args.per_class).items()}
        _write_json(_run_record_path(args.out), prov)
    else:
        sys.stdout.write(text)


def _cmd_props_extract(args, prov):
    from .manifest import load_manifest
    from .props import FARNEBACK, FLOW_EPS, extract_all, write_props

    man = load_manifest(_require(args.manifest), args.classes)
    table = extract_all(man, args.frames_fps_motion, args.workers)
    write_props(table, args.out)
    prov["constants"] = {"farneback": FARNEBACK, "flow_eps": FLOW_EPS}
    _write_json(_run_record_path(args.out), prov)


def _cmd_props_ingest(args, prov):
    from .manifest import load_manifest
    from .props import PropertySet, apply_detections, ingest_detections, read_props, read_semantics, write_props

    man = load_manifest(_require(args.manifest), args.classes)
    table = read_props(_require(args.props))
    known = {r.id for r in man.records}
    stray = [ps.id for ps in table if ps.id not in known]
    if stray:
        raise DataError(f"property ids not in manifest: {stray[:5]}")
    if args.semantics:
        sem = read_semantics(_require(args.semantics), dim=args.dim)
        label = {r.id: r.label_text for r in man.records}
        missing = sorted({label[ps.id] for ps in table if label[ps.id] not in sem})
        if missing:
            raise DataError(f"no embedding for label texts {missing[:5]}")
        table = [PropertySet(ps.id, sem[label[ps.id]], ps.motion, ps.blur, ps.hand_loc, ps.obj_loc, ps.pose)
                 for ps in table]
    if args.detections:
        table = apply_detections(table, ingest_detections(_require(args.detections), man))
    write_props(table, args.out)
    _write_json(_run_record_path(args.out), prov)


def _cmd_kde_fit(args, prov):
    from . import kde
    from .blob import dump_model
    from .props import property_matrix, read_props
    from .selection import SEMANTIC_COMPONENTS

    table = read_props(_require(args.input))
    mask, values, widths = property_matrix(table, args.property)
    if not mask.any():
        raise DataError(f"no records carry property {args.property!r}")
    if args.property == "blur":
        model = kde.fit_blurriness(values[:, 0], widths)
    elif args.property == "semantic":
        ncomp = max(1, min(SEMANTIC_COMPONENTS, values.shape[1], values.shape[0] - 1))
        proj = kde.pca_projection(values, ncomp)
        base = kde.fit(proj.apply(values))
        model = kde.DensityModel(base.points, base.bandwidths, base.mode, base.warnings, proj)
    else:
        model = kde.fit(values)
    for w in model.warnings:
        log.warning(w)
    Path(args.out).write_bytes(dump_model(model, args.property))
    _write_json(_run_record_path(args.out), prov)


def _cmd_kde_sim(args, prov):
    from . import kde
    from .blob import load_model
    from .props import property_matrix, read_props

    model, prop = load_model(_require(args.model).read_bytes())
    prop = args.property or prop
    if prop is None:
        raise DataError("model file does not name its property; pass --property")
    _, values, _ = property_matrix(read_props(_require(args.input)), prop)
    print(repr(kde.ego_similarity(model, values, args.workers)))


def _selection_config(args, m):
    from .selection import SelectionConfig

    return SelectionConfig(args.mode, args.tau, min(args.k, m), m, args.weights, args.seed)


def _cmd_select(args, prov):
    from .props import read_props
    from .selection import select

    source = read_props(_require(args.source, "source file"))
    pool = read_props(_require(args.pool, "pool file"))
    result = select(source, pool, _selection_config(args, args.target), args.workers)
    with open(args.out, "w", encoding="utf-8") as fh:
        for r in result.rounds:
            fh.write(json.dumps(r.to_dict()) + "\n")
        fh.write(json.dumps({"chosen": result.chosen, "final_source_size": result.final_source_size}) + "\n")
    _write_json(_run_record_path(args.out), prov)
    print(f"chose {len(result.chosen)}; source size {result.final_source_size}")


def _cmd_prune(args, prov):
    from .props import read_props
    from .selection import prune, prune_scores

    table = read_props(_require(args.input))
    removed = prune(table, args.fraction, args.weights, args.seed, args.tau, args.workers)
    scores = prune_scores(table, args.weights, args.tau, args.workers)
    with open(args.out, "w", encoding="utf-8") as fh:
        for i in removed:
            fh.write(json.dumps({"id": i, "score": scores[i]}) + "\n")
    _write_json(_run_record_path(args.out), prov)


def _cmd_replace(args, prov):
    from .props import read_props
    from .selection import replace

    table = read_props(_require(args.input))
    pool = read_props(_require(args.pool, "pool file"))
    removed, added = replace(table, pool, args.fraction, _selection_config(args, max(args.k, 1)), args.workers)
    _write_json(args.out, {"removed": removed, "added": added, "final_size": len(table) - len(removed) + len(added)})
    _write_json(_run_record_path(args.out), prov)


def _cmd_build(args, prov):
    from .manifest import load_manifest, write_manifest
    from .props import read_props
    from .selection import SelectionConfig, build_dataset

    man = load_manifest(_require(args.manifest), args.classes)
    props = read_props(_require(args.props))
    base_ids = None
    if args.extend:
        base_ids = [r.id for r in load_manifest(_require(args.extend)).records]
    per_class = args.per_class if args.per_class is not None else (20 if args.role == "pretrain" else 5)
    cfg = SelectionConfig("balancedness", args.tau, min(args.k, args.target), args.target, args.weights, args.seed)
    out = build_dataset(man, props, args.role, args.target, per_class, cfg, base_ids, args.workers)
    out.provenance["run"] = prov
    write_manifest(out, args.out)
    print(f"{len(out.records)} records")


def _matrix(path):
    from .blob import load_matrix

    return load_matrix(_require(path).read_bytes())


def _cmd_loss_eval(args, prov):
    from . import losses

    which = args.which
    if which == "total":
        if not args.parts:
            raise UsageError("--parts cl,svsa,cf is required for --which total")
        parts = [float(v) for v in args.parts.split(",")]
        if len(parts) != 3:
            raise UsageError("--parts needs three values")
        value = losses.total_loss(parts, args.lambda1, args.lambda2)
    elif which == "svsa":
        if not args.motion:
            raise UsageError("--motion is required for --which svsa")
        value, _ = losses.svsa_batch_loss(_matrix(args.features), _matrix(args.motion))
    else:
        if not args.text:
            raise UsageError(f"--text is required for --which {which}")
        F, T = _matrix(args.features), _matrix(args.text)
        if which == "cf":
            vals = [losses.counterfactual_loss(t, v, args.gamma, args.flip) for t, v in zip(T, F)]
            value = float(np.mean(vals))
        elif which == "ce":
            value = losses.ce_contrastive(F, T, args.tau)
        else:
            if not args.labels:
                raise UsageError("--labels is required for --which kl")
            y = [int(v) for v in _require(args.labels).read_text().split()]
            if args.heavy:
                value = losses.combined_alignment(F, _matrix(args.heavy), T, y, args.tau)
            else:
                value = losses.kl_contrastive(F, T, y, args.tau)
    print(repr(float(value)))


def _cmd_cf_build(args, prov):
    import cv2

    from .counterfactual import CFConfig, build_counterfactual
    from .props import POSE_DIM, list_frames

    frames_dir = _require(args.frames, "frames directory")
    paths = list_frames(frames_dir)
    frames = []
    for p in paths:
        img = cv2.imread(str(p), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise OSError(f"cannot read image {p}")
        frames.append(img)
    rows = []
    with open(_require(args.detections), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{args.detections}:{lineno}: {exc}") from exc
    ids = sorted({str(r["id"]) for r in rows})
    vid = args.video_id
    if vid is None:
        if len(ids) != 1:
            raise UsageError(f"detections cover {len(ids)} videos; pass --video-id")
        vid = ids[0]
    boxes = [None] * len(frames)
    poses = [None] * len(frames)
    for r in rows:
        if str(r["id"]) != vid:
            continue
        i = int(r["frame_index"])
        if not 0 <= i < len(frames):
            raise DataError(f"frame_index {i} out of range for {len(frames)} frames")
        hands = sorted(r.get("hands", []), key=lambda b: -float(b[4]))
        if hands:
            boxes[i] = hands[0][:4]
        ps = sorted(r.get("poses", []), key=lambda p: -float(p[POSE_DIM]))
        if ps:
            poses[i] = ps[0][:POSE_DIM]
    labels = None
    if args.labels:
        labels = _require(args.labels).read_text(encoding="utf-8").split()
    cfg = CFConfig(args.alpha, args.gamma, args.pose_threshold, args.seed)
    new, mods = build_counterfactual(frames, boxes, poses, labels, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    changed = {m.index for m in mods if m.strategy != "skipped"}
    for i, (p, img) in enumerate(zip(paths, new)):
        if i in changed:
            if not cv2.imwrite(str(out / p.name), img):
                raise OSError(f"cannot write {out / p.name}")
        else:
            shutil.copyfile(p, out / p.name)
    with open(out / "cf_log.jsonl", "w", encoding="utf-8") as fh:
        for m in mods:
            fh.write(json.dumps(m.to_dict()) + "\n")
    _write_json(out / "provenance.json", prov)


def _cmd_report(args, prov):
    from .props import read_props
    from .report import emit_report

    datasets = {}
    for p in args.props:
        name = Path(p).stem
        if name in datasets:
            raise UsageError(f"two property files share the dataset name {name!r}")
        datasets[name] = read_props(_require(p))
    highlight = []
    if args.highlight:
        highlight = _require(args.highlight).read_text(encoding="utf-8").split()
    emit_report(datasets, args.weights, args.out, highlight, args.workers)
    _write_json(Path(args.out) / "provenance.json", prov)


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _selection_flags(p, with_k=True):
    p.add_argument("--mode", choices=("performance", "balancedness"), default="balancedness")
    p.add_argument("--tau", type=float, default=1.0)
    if with_k:
        p.add_argument("--k", type=int, default=1)
    p.add_argument("--weights", type=_weights, default=DEFAULT_WEIGHTS,
                   help="comma-separated weights for " + ",".join(PROPERTIES))
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="egocurate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"egocurate {__version__}")
    parser.add_argument("--config", help="flat key = value file mirroring the flags")
    parser.add_argument("--workers", type=int, default=None, help="worker threads (or EGOCURATE_WORKERS)")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)
    leaves = {}

    man = sub.add_parser("manifest", help="class merging and base sampling")
    msub = man.add_subparsers(dest="action", required=True)
    p = msub.add_parser("merge-classes")
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--in", dest="input", required=True, help="semantic-vector file of labels")
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_merge_classes)
    leaves["manifest merge-classes"] = p
    p = msub.add_parser("base-sample")
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes")
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_base_sample)
    leaves["manifest base-sample"] = p

    props = sub.add_parser("props", help="property extraction and ingestion")
    psub = props.add_subparsers(dest="action", required=True)
    p = psub.add_parser("extract")
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes")
    p.add_argument("--frames-fps-motion", type=float, default=8.0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_props_extract)
    leaves["props extract"] = p
    p = psub.add_parser("ingest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes")
    p.add_argument("--props", required=True)
    p.add_argument("--detections")
    p.add_argument("--semantics")
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_props_ingest)
    leaves["props ingest"] = p

    k = sub.add_parser("kde", help="density models")
    ksub = k.add_subparsers(dest="action", required=True)
    p = ksub.add_parser("fit")
    p.add_argument("--property", choices=PROPERTIES, required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_kde_fit)
    leaves["kde fit"] = p
    p = ksub.add_parser("sim")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--property", choices=PROPERTIES)
    p.set_defaults(handler=_cmd_kde_sim)
    leaves["kde sim"] = p

    p = sub.add_parser("select", help="likelihood-guided selection")
    _selection_flags(p)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_select)
    leaves["select"] = p

    p = sub.add_parser("prune", help="remove high-likelihood records")
    p.add_argument("--fraction", type=_fraction, required=True)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--weights", type=_weights, default=DEFAULT_WEIGHTS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_prune)
    leaves["prune"] = p

    p = sub.add_parser("replace", help="prune then refill from a pool")
    _selection_flags(p)
    p.add_argument("--fraction", type=_fraction, required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_replace, k=10**9)
    leaves["replace"] = p

    p = sub.add_parser("build", help="class-balanced base plus selection")
    p.add_argument("--role", choices=("pretrain", "test"), required=True)
    p.add_argument("--per-class", type=int)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--weights", type=_weights, default=DEFAULT_WEIGHTS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes")
    p.add_argument("--props", required=True)
    p.add_argument("--extend", help="existing manifest to grow instead of a fresh base")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_build)
    leaves["build"] = p

    loss = sub.add_parser("loss", help="reference loss values")
    lsub = loss.add_subparsers(dest="action", required=True)
    p = lsub.add_parser("eval")
    p.add_argument("--which", choices=("kl", "ce", "svsa", "cf", "total"), required=True)
    p.add_argument("--features", help="feature-matrix blob (visual, lite or predicted directions)")
    p.add_argument("--text", help="text-feature blob")
    p.add_argument("--heavy", help="heavy-net feature blob; with --which kl gives the combined loss")
    p.add_argument("--motion", help="camera-motion blob for --which svsa")
    p.add_argument("--labels", help="one integer label per line")
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--flip", action="store_true", help="use max(0, cos - gamma)^2")
    p.add_argument("--parts", help="cl,svsa,cf for --which total")
    p.add_argument("--lambda1", type=float, default=0.2)
    p.add_argument("--lambda2", type=float, default=0.1)
    p.set_defaults(handler=_cmd_loss_eval)
    leaves["loss eval"] = p

    cf = sub.add_parser("cf", help="counterfactual clips")
    csub = cf.add_subparsers(dest="action", required=True)
    p = csub.add_parser("build")
    p.add_argument("--alpha", type=float, default=0.25)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--pose-threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--video-id")
    p.add_argument("--labels", help="one label per frame, whitespace separated")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_cf_build)
    leaves["cf build"] = p

    p = sub.add_parser("report", help="figures and CSVs")
    p.add_argument("--props", nargs="+", required=True)
    p.add_argument("--weights", type=_weights, default=DEFAULT_WEIGHTS)
    p.add_argument("--highlight", help="ids to highlight in the PCA scatter")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_report)
    leaves["report"] = p
    return parser, leaves


def _read_config(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = val
    return values


def _config_path(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    return known.config


def _parse_with_config(parser, leaves, argv, config):
    """Parse ``argv`` with file values acting as defaults of the chosen command.

    Required flags are relaxed for the first pass so the command can be
    identified; the second pass enforces them again unless the file
    supplies them.
    """
    values = _read_config(config)
    relaxed = [a for leaf in leaves.values() for a in leaf._actions if a.required]
    for a in relaxed:
        a.required = False
    args = parser.parse_args(argv)
    for a in relaxed:
        a.required = True
    leaf = leaves[" ".join(filter(None, (args.command, getattr(args, "action", None))))]
    known = {a.dest for a in leaf._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config keys for this command: {unknown}")
    defaults = {}
    for key, val in values.items():
        if key in _BOOL_KEYS:
            defaults[key] = val.lower() in ("1", "true", "yes", "on")
        elif key in ("props",):
            defaults[key] = val.split()
        else:
            defaults[key] = val
    # string defaults go through each option's type converter on reparse
    leaf.set_defaults(**defaults)
    for action in leaf._actions:
        if action.dest in defaults:
            action.required = False
    return parser.parse_args(argv), values


def _error(kind, message, **extra):
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, leaves = build_parser()
    config_values = {}
    try:
        config = _config_path(argv)
        if config:
            args, config_values = _parse_with_config(parser, leaves, argv, config)
        else:
            args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        _error("usage", str(exc))
        return EXIT_USAGE
    except OSError as exc:
        _error("io", exc.strerror or str(exc), path=config)
        return EXIT_IO

    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args.workers = resolve_workers(args.workers)
    try:
        prov = _provenance(args, config_values)
        args.handler(args, prov)
    except UsageError as exc:
        _error("usage", str(exc))
        return EXIT_USAGE
    except DataError as exc:
        _error("data", str(exc))
        return EXIT_DATA
    except OSError as exc:
        _error("io", exc.strerror or str(exc), path=getattr(exc, "filename", None))
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
