"""Command-line entry point: ``uafuse <command> ...``.

Every command writes ``run_manifest.json`` into its output directory before
doing any work. Exit codes are listed in ``EXIT``.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, schemas

log = logging.getLogger("uafuse")

EXIT = {
    "ok": 0,
    "usage": 2,
    "missing_input": 3,
    "invalid_input": 4,
    "not_writable": 5,
    "check_failed": 6,
    "diverged": 7,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.code = EXIT[kind]


def _threads() -> int | None:
    raw = os.environ.get("UAFUSE_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError("usage", f"UAFUSE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError("usage", f"UAFUSE_THREADS must be a positive integer, got {raw!r}")
    return n


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError("not_writable", f"cannot write to {out}: {exc}") from None
    return out


def _write_manifest(out: Path, command: str, argv, threads, seed=None, config=None) -> None:
    doc = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "started": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "threads": threads,
        "seed": seed,
        "config": config,
    }
    schemas.validate("run_manifest", doc)
    (out / "run_manifest.json").write_text(json.dumps(doc, indent=2) + "\n")


def _read_json(path, schema: str | None = None) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_input", f"{p} does not exist")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError("invalid_input", f"{p}: not valid JSON ({exc})") from None
    if schema is not None:
        import jsonschema

        try:
            schemas.validate(schema, doc)
        except jsonschema.ValidationError as exc:
            loc = "/".join(str(v) for v in exc.absolute_path) or "<root>"
            raise CliError("invalid_input", f"{p}: {loc}: {exc.message}") from None
    return doc


def _case_dirs(root: Path) -> list[Path]:
    return sorted((d for d in root.iterdir() if d.is_dir() and (d / "modal1.nii").exists()), key=lambda d: d.name)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_synth(args, argv, threads) -> int:
    from .data.phantom import PhantomSpec, PhantomSpecError, generate_phantom
    from .data.volume import save_case

    spec_doc = _read_json(args.spec, "phantom_spec") if args.spec else {}
    try:
        spec = PhantomSpec.from_dict(spec_doc)
    except PhantomSpecError as exc:
        raise CliError("invalid_input", f"invalid phantom spec: {exc}") from None
    if args.count < 1:
        raise CliError("usage", "--count must be at least 1")
    out = _prepare_out(args.out)
    _write_manifest(out, "gen-synth", argv, threads, args.seed, spec.to_dict())
    # one child seed per case, so case i does not depend on how many cases are requested
    children = np.random.SeedSequence(args.seed).spawn(args.count)
    cases = []
    for i, child in enumerate(children):
        case_seed = int(child.generate_state(1)[0])
        try:
            vol = generate_phantom(spec, case_seed)
        except PhantomSpecError as exc:
            raise CliError("invalid_input", str(exc)) from None
        case_dir = out / f"case_{i}"
        save_case(vol, case_dir)
        entry = {
            "name": case_dir.name,
            "seed": case_seed,
            "files": sorted(p.name for p in case_dir.iterdir()),
            "class_voxels": np.bincount(vol.label.ravel(), minlength=spec.num_classes).tolist(),
        }
        if vol.region is not None:
            entry["region_voxels"] = int(vol.region.sum())
        cases.append(entry)
        log.info("wrote %s", case_dir)
    manifest = {"seed": args.seed, "count": args.count, "spec": spec.to_dict(), "cases": cases}
    schemas.validate("dataset_manifest", manifest)
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.count} case(s) to {out}")
    return EXIT["ok"]


def _load_cases(root, num_modalities: int, with_label: bool = True):
    from .data.nifti import NiftiError
    from .data.volume import load_case

    root = Path(root)
    if not root.is_dir():
        raise CliError("missing_input", f"{root} is not a directory")
    dirs = _case_dirs(root)
    if not dirs:
        raise CliError("missing_input", f"{root} contains no case_* directories with modal1.nii")
    vols = []
    for d in dirs:
        try:
            v = load_case(d, num_modalities, with_label)
        except FileNotFoundError as exc:
            raise CliError("missing_input", str(exc)) from None
        except (NiftiError, ValueError) as exc:
            raise CliError("invalid_input", f"{d}: {exc}") from None
        if with_label and v.label is None:
            raise CliError("missing_input", f"{d}: label.nii is required")
        vols.append(v)
    return dirs, vols


def cmd_train(args, argv, threads) -> int:
    from .config import TrainConfig
    from .training import TrainingDivergedError, train

    doc = _read_json(args.config, "train_config") if args.config else {}
    try:
        cfg = TrainConfig.from_dict(doc)
    except ValueError as exc:
        raise CliError("invalid_input", f"invalid train config: {exc}") from None
    dirs, vols = _load_cases(args.data, cfg.network.num_modalities)
    bad = [d.name for d, v in zip(dirs, vols) if int(v.label.max()) >= cfg.network.num_classes]
    if bad:
        raise CliError("invalid_input", f"labels exceed num_classes={cfg.network.num_classes} in {bad}")
    val_vols = None
    if args.val:
        _, val_vols = _load_cases(args.val, cfg.network.num_modalities)
    out = _prepare_out(args.out)
    _write_manifest(out, "train", argv, threads, cfg.seed, cfg.to_dict())
    try:
        state, _ = train(cfg, vols, val_vols, out_dir=out)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT["diverged"]
    print(f"best mean Dice {state.best_dice:.4f} at epoch {state.best_epoch}; checkpoints in {out}")
    return EXIT["ok"]


def cmd_predict(args, argv, threads) -> int:
    from .checkpoint import CheckpointError
    from .data.nifti import NiftiError, write_nifti
    from .data.volume import load_case, normalize
    from .training import load_network, predict_volume

    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise CliError("missing_input", f"{ckpt} does not exist")
    try:
        net, _, _ = load_network(ckpt)
    except (CheckpointError, KeyError, ValueError) as exc:
        raise CliError("invalid_input", f"{ckpt}: {exc}") from None
    case = Path(args.case)
    try:
        vol = load_case(case, net.config.num_modalities, with_label=False)
    except FileNotFoundError as exc:
        raise CliError("missing_input", str(exc)) from None
    except (NiftiError, ValueError) as exc:
        raise CliError("invalid_input", f"{case}: {exc}") from None
    if min(vol.dims) < min(args.patch):
        raise CliError("invalid_input", f"volume dims {vol.dims} smaller than patch {tuple(args.patch)}")
    out = _prepare_out(args.out)
    _write_manifest(out, "predict", argv, threads)
    maps = predict_volume(net, normalize(vol), tuple(args.patch), tuple(args.stride))
    write_nifti(maps["final"].argmax(axis=0).astype(np.uint8), vol.spacing, out / "label.nii")
    if args.emit_uncertainty:
        for j in range(net.config.num_modalities):
            write_nifti(maps[f"u_modal{j + 1}"].astype(np.float32), vol.spacing, out / f"u_modal{j + 1}.nii")
    print(f"wrote {out / 'label.nii'}")
    return EXIT["ok"]


def _label_path(d: Path) -> Path:
    p = d / "label.nii"
    if not p.is_file():
        raise CliError("missing_input", f"{d}: label.nii not found")
    return p


def cmd_eval(args, argv, threads) -> int:
    from .data.nifti import NiftiError, read_nifti
    from .training import dice

    pred_root, truth_root = Path(args.pred), Path(args.truth)
    for root in (pred_root, truth_root):
        if not root.is_dir():
            raise CliError("missing_input", f"{root} is not a directory")
    # a single case directory on either side is paired directly
    single = (pred_root / "label.nii").is_file()
    if single:
        pairs = [(pred_root.name, pred_root, truth_root)]
    else:
        truth_cases = {d.name: d for d in truth_root.iterdir() if d.is_dir()}
        pairs = [(d.name, d, truth_cases.get(d.name)) for d in sorted(pred_root.iterdir()) if d.is_dir()]
        if not pairs:
            raise CliError("missing_input", f"{pred_root} contains no case directories")
        unmatched = [name for name, _, t in pairs if t is None]
        if unmatched:
            raise CliError("missing_input", f"no ground truth for {unmatched}")
    labels = {}
    try:
        for name, pd, td in pairs:
            p = read_nifti(_label_path(pd))[0].astype(np.int64)
            t = read_nifti(_label_path(td))[0].astype(np.int64)
            if p.shape != t.shape:
                raise CliError("invalid_input", f"{name}: prediction {p.shape} vs truth {t.shape}")
            labels[name] = (p, t)
    except NiftiError as exc:
        raise CliError("invalid_input", str(exc)) from None
    num_classes = args.num_classes or 1 + max(int(max(p.max(), t.max())) for p, t in labels.values())
    classes = list(range(1, max(num_classes, 2)))
    cases = {name: [round(100 * dice(p, t, c), 4) for c in classes] for name, (p, t) in labels.items()}
    per_class = np.mean(list(cases.values()), axis=0)
    report = {"classes": classes, "cases": cases,
              "mean_per_class": [round(float(v), 4) for v in per_class], "mean": round(float(per_class.mean()), 4)}
    schemas.validate("eval_report", report)

    width = max(len("case"), len("mean"), *(len(n) for n in cases))
    head = f"{'case':<{width}}" + "".join(f"{'class ' + str(c):>10}" for c in classes) + f"{'mean':>10}"
    print(head)
    for name, row in cases.items():
        print(f"{name:<{width}}" + "".join(f"{v:>10.1f}" for v in row) + f"{np.mean(row):>10.1f}")
    print(f"{'mean':<{width}}" + "".join(f"{v:>10.1f}" for v in per_class) + f"{per_class.mean():>10.1f}")
    print(json.dumps(report))
    if args.out:
        out = _prepare_out(args.out)
        _write_manifest(out, "eval", argv, threads)
        (out / "eval.json").write_text(json.dumps(report, indent=2) + "\n")
    return EXIT["ok"]


def cmd_gradcheck(args, argv, threads) -> int:
    from . import gradcheck

    names = [args.op] if args.op else None
    if args.op and args.op not in gradcheck.REGISTRY:
        raise CliError("usage", f"unknown op {args.op!r}; registered: {', '.join(sorted(gradcheck.REGISTRY))}")
    if args.out:
        _write_manifest(_prepare_out(args.out), "gradcheck", argv, threads, None, {"seeds": args.seeds})
    results = gradcheck.run(names, seeds=args.seeds)
    failed = 0
    for name, (ok, worst) in sorted(results.items()):
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:<24} worst rel. error {worst:.3e}")
    print(f"{len(results) - failed}/{len(results)} ops within {gradcheck.REL_TOL:g} over {args.seeds} seeds")
    return EXIT["ok"] if not failed else EXIT["check_failed"]


def cmd_slices(args, argv, threads) -> int:
    from .data.nifti import NiftiError, read_nifti
    from .data.slices import export_slices

    vol = Path(args.vol)
    if not vol.is_file():
        raise CliError("missing_input", f"{vol} does not exist")
    try:
        grid = read_nifti(vol)[0]
    except NiftiError as exc:
        raise CliError("invalid_input", f"{vol}: {exc}") from None
    out = _prepare_out(args.out)
    _write_manifest(out, "slices", argv, threads)
    paths = export_slices(grid, out, prefix=vol.stem)
    print(f"wrote {len(paths)} slices to {out}")
    return EXIT["ok"]


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uafuse", description="Uncertainty-gated two-stream MR segmentation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="generate a synthetic phantom dataset")
    g.add_argument("--spec", help="phantom spec JSON (defaults used when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--config", help="train config JSON (defaults used when omitted)")
    t.add_argument("--data", required=True)
    t.add_argument("--val", help="optional validation dataset directory")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="stitched sliding-window inference on one case")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--case", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--emit-uncertainty", action="store_true")
    pr.add_argument("--patch", type=int, nargs=3, default=[32, 32, 32])
    pr.add_argument("--stride", type=int, nargs=3, default=[14, 14, 14])
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="per-class Dice of predicted vs true label volumes")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--num-classes", type=int)
    e.add_argument("--out", help="also write eval.json here")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every registered op")
    gc.add_argument("--op")
    gc.add_argument("--seeds", type=int, default=20)
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("slices", help="export axial slices of a volume as PGM")
    s.add_argument("--vol", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_slices)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        threads = _threads()
        if threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return args.func(args, argv, threads)
        return args.func(args, argv, threads)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
