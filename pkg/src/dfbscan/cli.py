"""Command-line surface: scan, scan-batch, calibrate, select, synth, indicators.

Exit codes: 0 = success / clean verdict, 3 = backdoor flagged, 1 = usage
error, 2 = data error. JSON output is the default; all file outputs are
written atomically. The scan-batch worker pool defaults to the logical CPU
count and can be overridden by --jobs or the DFBSCAN_THREADS environment
variable.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from dfbscan import __version__
from dfbscan.calibration import ConfigSet, build_profile
from dfbscan.detector import (
    ClueProfile,
    DetectionReport,
    detect,
    detect_reference_free,
    load_profile,
    profile_to_dict,
    save_profile,
)
from dfbscan.errors import ScanError
from dfbscan.indicators import (
    ALL_INDICATORS,
    compute_indicator_matrix,
    indicator_catalog,
)
from dfbscan.params import FinalLayerParams, _atomic_write, load_final_layer, save_final_layer
from dfbscan.selection import (
    METHODS,
    SelectionResult,
    featurize,
    rank_by_accuracy,
    rank_by_iforest,
    rank_by_mutual_info,
    rfe_ranking,
    select_l1_logistic,
    select_rfe,
    sweep_subset,
)
from dfbscan.synth import Attack, SynthSpec, generate_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKDOOR = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; the documented usage exit code is 1.
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _pool_size(jobs: int | None) -> int:
    if jobs is not None:
        return max(1, jobs)
    env = os.environ.get("DFBSCAN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise _UsageError(f"DFBSCAN_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def _emit(text: str, output: str | None) -> None:
    if output is None or output == "-":
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        _atomic_write(Path(output), text.encode())


def _report_row(
    path: str, report: DetectionReport, lam: float, with_timing: bool
) -> dict:
    row = {
        "path": path,
        "is_backdoored": report.is_backdoored,
        "similarity": report.similarity,
        "lambda": lam,
        "target_class": report.target_class,
        "score": [float(s) for s in report.score],
    }
    if with_timing:
        row["elapsed_us"] = int(report.elapsed * 1e6)
    row["profile_meta"] = report.profile_meta
    return row


def _require_file(path: str, what: str) -> None:
    if not os.path.isfile(path):
        raise _UsageError(f"{what} not found: {path}")


def _load_model(path: str) -> FinalLayerParams:
    return load_final_layer(path)


def cmd_scan(args: argparse.Namespace) -> int:
    _require_file(args.model, "model file")
    _require_file(args.profile, "profile file")
    profile = load_profile(args.profile)
    params = _load_model(args.model)
    report = detect(params, profile)
    row = _report_row(args.model, report, profile.lam, not args.no_timing)
    if args.format == "json":
        _emit(json.dumps(row, indent=1), args.output)
    elif args.format == "csv":
        _emit(_rows_to_csv([row]), args.output)
    else:
        verdict = "BACKDOORED" if report.is_backdoored else "clean"
        lines = [
            f"model:       {args.model}",
            f"verdict:     {verdict}",
            f"similarity:  {report.similarity:.6f} (lambda {profile.lam:.6f})",
        ]
        if report.target_class is not None:
            lines.append(f"target:      class {report.target_class}")
        if not args.no_timing:
            lines.append(f"elapsed:     {report.elapsed * 1e3:.3f} ms")
        _emit("\n".join(lines), args.output)
    return EXIT_BACKDOOR if report.is_backdoored else EXIT_OK


def _rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    fields = [k for k in rows[0] if k not in ("score", "profile_meta")]
    writer = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def _batch_paths(directory: str) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise _UsageError(f"not a directory: {directory}")
    paths = sorted(root.glob("*.dfbs"))
    if not paths:
        raise _UsageError(f"no .dfbs files in {directory}")
    return paths


def cmd_scan_batch(args: argparse.Namespace) -> int:
    paths = _batch_paths(args.directory)
    if args.reference_free:
        return _scan_batch_reference_free(args, paths)
    _require_file(args.profile, "profile file")
    profile = load_profile(args.profile)

    def one(path: Path) -> tuple[dict, bool, bool]:
        try:
            report = detect(_load_model(path), profile)
        except (ScanError, OSError) as exc:
            return (
                {"path": str(path), "error": f"{type(exc).__name__}: {exc}"},
                False,
                True,
            )
        row = _report_row(str(path), report, profile.lam, not args.no_timing)
        return row, report.is_backdoored, False

    with ThreadPoolExecutor(max_workers=_pool_size(args.jobs)) as pool:
        results = list(pool.map(one, paths))  # map preserves path order
    rows = [r for r, _, _ in results]
    flagged = sum(1 for _, f, _ in results if f)
    errors = sum(1 for _, _, e in results if e)
    summary = {
        "models": len(paths),
        "flagged": flagged,
        "errors": errors,
        "results": rows,
    }
    if args.format == "csv":
        _emit(_rows_to_csv([r for r in rows if "error" not in r]), args.output)
    else:
        _emit(json.dumps(summary, indent=1), args.output)
    if errors == len(paths):
        return EXIT_DATA
    return EXIT_BACKDOOR if flagged else EXIT_OK


def _scan_batch_reference_free(args: argparse.Namespace, paths: list[Path]) -> int:
    if len(paths) < 3:
        raise _UsageError("reference-free scanning needs at least 3 models")
    models = [_load_model(p) for p in paths]
    results = detect_reference_free(models, ALL_INDICATORS, args.z_threshold)
    rows = [
        {
            "path": str(paths[r.index]),
            "mean_similarity": r.mean_similarity,
            "z_score": r.z_score,
            "flagged": r.flagged,
        }
        for r in results
    ]
    flagged = sum(1 for r in results if r.flagged)
    doc = {
        "models": len(models),
        "flagged": flagged,
        "z_threshold": args.z_threshold,
        "results": rows,
    }
    if args.format == "csv":
        _emit(_rows_to_csv(rows), args.output)
    else:
        _emit(json.dumps(doc, indent=1), args.output)
    return EXIT_BACKDOOR if flagged else EXIT_OK


def _parse_ids(spec: str) -> tuple[int, ...]:
    if spec == "all":
        return ALL_INDICATORS
    try:
        ids = tuple(int(x) for x in spec.split(",") if x.strip() != "")
    except ValueError:
        raise _UsageError(f"bad indicator id list: {spec!r}")
    if not ids or any(not 0 <= i < len(ALL_INDICATORS) for i in ids):
        raise _UsageError(f"indicator ids must lie in 0..61, got {spec!r}")
    return ids


def _load_config_set(clean_dir: str, backdoor_dir: str, labels: str | None) -> ConfigSet:
    clean_root = Path(clean_dir)
    backdoor_root = Path(backdoor_dir)
    if not clean_root.is_dir():
        raise _UsageError(f"not a directory: {clean_dir}")
    if not backdoor_root.is_dir():
        raise _UsageError(f"not a directory: {backdoor_dir}")
    labels_path = Path(labels) if labels else backdoor_root / "labels.csv"
    if not labels_path.is_file():
        raise _UsageError(f"labels CSV not found: {labels_path}")
    cleans = [load_final_layer(p) for p in sorted(clean_root.glob("*.dfbs"))]
    if not cleans:
        raise _UsageError(f"no .dfbs files in {clean_dir}")
    backdoors = []
    with open(labels_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if not row.get("target"):
                continue
            path = Path(row["path"])
            if not path.is_absolute():
                path = backdoor_root / path
            backdoors.append((load_final_layer(path), int(row["target"])))
    if not backdoors:
        raise _UsageError(f"no labeled backdoor models in {labels_path}")
    return ConfigSet(cleans=tuple(cleans), backdoors=tuple(backdoors))


def cmd_calibrate(args: argparse.Namespace) -> int:
    config = _load_config_set(args.clean, args.backdoor, args.labels)
    profile = build_profile(config, _parse_ids(args.ids))
    if args.output:
        save_profile(profile, args.output)
        print(
            f"profile written to {args.output} "
            f"(lambda={profile.lam:.6f}, f1={profile.meta.get('config_f1')})"
        )
    else:
        _emit(json.dumps(profile_to_dict(profile), indent=1), None)
    return EXIT_OK


def _selection_to_dict(result: SelectionResult, profile: ClueProfile) -> dict:
    return {
        "method": result.method,
        "n": result.n,
        "f1": result.f1,
        "chosen": list(result.chosen),
        "ranking": list(result.ranking),
        "f1_curve": list(result.curve),
        "profile": profile_to_dict(profile),
    }


def cmd_select(args: argparse.Namespace) -> int:
    config = _load_config_set(args.clean, args.backdoor, args.labels)
    table = featurize(config)
    method = args.method
    if method == "all":
        ids = ALL_INDICATORS
        profile = build_profile(config, ids)
        result = SelectionResult(
            ranking=ALL_INDICATORS,
            chosen=ids,
            n=len(ids),
            f1=float(profile.meta["config_f1"]),
            method="all",
        )
    elif method == "topk":
        if args.n is None:
            raise _UsageError("--method topk requires --n")
        ranking = rank_by_accuracy(config)
        ids = tuple(sorted(ranking[: args.n]))
        profile = build_profile(config, ids)
        result = SelectionResult(
            ranking=ranking,
            chosen=ids,
            n=len(ids),
            f1=float(profile.meta["config_f1"]),
            method="topk",
        )
    elif method == "l1lr":
        path = select_l1_logistic(table, config)
        scored = [p for p in path if p.f1 is not None]
        if not scored:
            raise _UsageError("L1 path produced no nonempty support")
        best = max(scored, key=lambda p: (p.f1, -len(p.support), p.penalty))
        profile = build_profile(config, best.support)
        result = SelectionResult(
            ranking=_survival_ranking(path),
            chosen=tuple(sorted(best.support)),
            n=len(best.support),
            f1=best.f1,
            method="l1lr",
        )
    elif method == "rfe" and args.n is not None:
        chosen = select_rfe(table, args.n)
        profile = build_profile(config, chosen)
        result = SelectionResult(
            ranking=rfe_ranking(table),
            chosen=chosen,
            n=len(chosen),
            f1=float(profile.meta["config_f1"]),
            method="rfe",
        )
    else:
        if method == "acc":
            ranking = rank_by_accuracy(config)
        elif method == "mi":
            ranking = rank_by_mutual_info(table)
        elif method == "rfe":
            ranking = rfe_ranking(table)
        elif method == "iforest":
            ranking = rank_by_iforest(table, seed=args.seed)
        else:
            raise _UsageError(f"unknown method {method!r}")
        result = sweep_subset(config, ranking, method=method)
        profile = build_profile(config, result.chosen)
    _emit(json.dumps(_selection_to_dict(result, profile), indent=1), args.output)
    if args.profile_out:
        save_profile(profile, args.profile_out)
    return EXIT_OK


def _survival_ranking(path) -> tuple[int, ...]:
    # Features ordered by how long they survive along the L1 path (longest
    # first); never-selected features go last in canonical order.
    last_seen = {}
    for step, point in enumerate(path):
        for fid in point.support:
            last_seen[fid] = step
    survivors = sorted(last_seen, key=lambda f: (-last_seen[f], f))
    missing = [f for f in range(62) if f not in last_seen]
    return tuple(survivors + missing)


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    attack = Attack(args.attack)
    seeds = np.random.SeedSequence(args.seed).generate_state(args.count)
    rows = []
    for i in range(args.count):
        if attack == Attack.NONE:
            target = None
        elif args.target == "cycle":
            target = i % args.k
        else:
            try:
                target = int(args.target)
            except ValueError:
                raise _UsageError(f'--target must be an index or "cycle", got {args.target!r}')
        try:
            spec = SynthSpec(
                k=args.k,
                d=args.d,
                weight_scale=args.weight_scale,
                bias_scale=args.bias_scale,
                attack=attack,
                strength=args.strength,
                target=target or 0,
                seed=int(seeds[i]),
            )
        except ValueError as exc:
            raise _UsageError(str(exc))
        name = f"model_{i:04d}.dfbs"
        save_final_layer(generate_model(spec), out / name)
        rows.append((name, "" if target is None else str(target)))
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "target"])
        writer.writerows(rows)
    print(f"wrote {args.count} models to {out}")
    return EXIT_OK


def cmd_indicators(args: argparse.Namespace) -> int:
    _require_file(args.model, "model file")
    params = _load_model(args.model)
    matrix = compute_indicator_matrix(params)
    names = [name for _, _, name in indicator_catalog()]
    if args.format == "json":
        doc = {
            "k": params.k,
            "names": names,
            "raw": [[float(x) for x in row] for row in matrix.raw],
            "normalized": [[float(x) for x in row] for row in matrix.normalized],
        }
        _emit(json.dumps(doc, indent=1), args.output)
    else:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(names)
        for row in matrix.raw:
            writer.writerow([f"{x:.10g}" for x in row])
        _emit(buf.getvalue(), args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dfbscan", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    scan = sub.add_parser("scan", help="scan one final-layer file")
    scan.add_argument("model")
    scan.add_argument("--profile", required=True)
    scan.add_argument("--format", choices=("json", "csv", "human"), default="json")
    scan.add_argument("--no-timing", action="store_true")
    scan.add_argument("--output", "-o")
    scan.set_defaults(func=cmd_scan)

    batch = sub.add_parser("scan-batch", help="scan a directory of .dfbs files")
    batch.add_argument("directory")
    group = batch.add_mutually_exclusive_group(required=True)
    group.add_argument("--profile")
    group.add_argument("--reference-free", action="store_true")
    batch.add_argument("--z-threshold", type=float, default=2.0)
    batch.add_argument("--jobs", type=int)
    batch.add_argument("--format", choices=("json", "csv"), default="json")
    batch.add_argument("--no-timing", action="store_true")
    batch.add_argument("--output", "-o")
    batch.set_defaults(func=cmd_scan_batch)

    cal = sub.add_parser("calibrate", help="build a profile from a config set")
    cal.add_argument("--clean", required=True, help="directory of clean .dfbs files")
    cal.add_argument("--backdoor", required=True, help="directory with labels.csv")
    cal.add_argument("--labels", help="labels CSV (default backdoor/labels.csv)")
    cal.add_argument("--ids", default="all", help='comma-separated ids or "all"')
    cal.add_argument("--output", "-o")
    cal.set_defaults(func=cmd_calibrate)

    sel = sub.add_parser("select", help="search for a compact indicator subset")
    sel.add_argument("--clean", required=True)
    sel.add_argument("--backdoor", required=True)
    sel.add_argument("--labels")
    sel.add_argument("--method", choices=METHODS, required=True)
    sel.add_argument("--n", type=int)
    sel.add_argument("--seed", type=int, default=42)
    sel.add_argument("--output", "-o")
    sel.add_argument("--profile-out")
    sel.set_defaults(func=cmd_select)

    synth = sub.add_parser("synth", help="synthetic layer generation")
    synth_sub = synth.add_subparsers(dest="synth_command", required=True)
    gen = synth_sub.add_parser("generate", help="write synthetic .dfbs files")
    gen.add_argument("--k", type=int, required=True)
    gen.add_argument("--d", type=int, required=True)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument(
        "--attack", choices=[a.value for a in Attack], default=Attack.NONE.value
    )
    gen.add_argument("--strength", type=float, default=3.0)
    gen.add_argument("--target", default="cycle", help='class index or "cycle"')
    gen.add_argument("--weight-scale", type=float)
    gen.add_argument("--bias-scale", type=float, default=0.01)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_synth)

    ind = sub.add_parser("indicators", help="indicator matrix inspection")
    ind_sub = ind.add_subparsers(dest="indicators_command", required=True)
    dump = ind_sub.add_parser("dump", help="dump the 62-column matrix")
    dump.add_argument("model")
    dump.add_argument("--format", choices=("csv", "json"), default="csv")
    dump.add_argument("--output", "-o")
    dump.set_defaults(func=cmd_indicators)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"dfbscan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ScanError, OSError) as exc:
        print(f"dfbscan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
