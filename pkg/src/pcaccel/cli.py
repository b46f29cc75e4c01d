"""Command-line entry point.

Every subcommand writes its main output to ``--out`` (stdout when omitted)
plus, for file outputs, a ``.manifest.json`` sidecar describing the run. Wall
clock measurements and the run timestamp go to a separate ``.timing.json`` sidecar so the main
output and manifest are byte-identical across runs with the same seed.

Exit codes: 0 success, 2 usage error, 3 bad input data, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from . import synthetic
from .kdtree import KDTree
from .pointcloud import (PointCloud, PointCloudParseError, RigidTransform, load_kitti_bin, load_xyz_ascii)
from .twostage import ApproxConfig, TwoStageKDTree, redundancy_report

log = logging.getLogger("pcaccel")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4


class DataError(Exception):
    """Input data could not be read or is unusable."""


class UsageError(Exception):
    """Arguments are inconsistent."""


# ---------------------------------------------------------------- inputs


def load_cloud(path) -> PointCloud:
    p = Path(path)
    try:
        if p.suffix == ".bin":
            return load_kitti_bin(p)
        if p.suffix == ".npy":
            return PointCloud(np.load(p))
        return load_xyz_ascii(p)
    except FileNotFoundError as exc:
        raise DataError(f"no such file: {path}") from exc
    except (PointCloudParseError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def parse_synthetic(spec: str):
    """``GEOMETRY:COUNT`` where geometry is a synthetic_cloud geometry or ``lidar``."""
    geom, _, count = spec.partition(":")
    try:
        n = int(count) if count else 10000
    except ValueError:
        raise UsageError(f"bad --synthetic spec {spec!r}; expected GEOMETRY:COUNT") from None
    if n < 1:
        raise UsageError("synthetic count must be >= 1")
    return geom, n


def synth_cloud(spec: str, seed: int) -> PointCloud:
    geom, n = parse_synthetic(spec)
    if geom == "lidar":
        return synthetic.lidar_scan(n, seed=seed)
    try:
        return synthetic.synthetic_cloud(n, geom, seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def get_cloud(args) -> PointCloud:
    if args.input:
        return load_cloud(args.input)
    if args.synthetic:
        return synth_cloud(args.synthetic, args.seed)
    raise UsageError("give --input or --synthetic")


def make_queries(cloud: PointCloud, n: int, seed: int, jitter: float = 0.05) -> np.ndarray:
    """``n`` cloud points (sampled without replacement when possible) plus Gaussian jitter."""
    rng = np.random.default_rng(seed)
    P = cloud.points
    if len(P) == 0 and n > 0:
        raise DataError("cannot draw queries from an empty cloud")
    idx = rng.choice(len(P), size=n, replace=n > len(P))
    return P[idx] + rng.normal(0.0, jitter, size=(n, 3))


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------- outputs


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def render(payload, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n"
    rows = payload if isinstance(payload, list) else payload.get("rows")
    if rows is None:
        raise UsageError("this command's output has no tabular form; use --format json")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def resolve_out(out, default_name: str) -> Path:
    """``--out`` names a file, or a directory (existing, or ending in a separator) to put ``default_name`` in."""
    p = Path(out)
    if p.is_dir() or str(out).endswith(("/", "\\")):
        p.mkdir(parents=True, exist_ok=True)
        return p / default_name
    return p


def emit(args, payload, timings: dict | None = None, extra_files=()) -> None:
    text = render(payload, args.format)
    if not args.out:
        sys.stdout.write(text)
        return
    out = resolve_out(args.out, f"{args.command}.{args.format}")
    out.write_text(text)
    inputs = {}
    for name in ("input", "target", "trace", "config", "sim_config", "truth"):
        p = getattr(args, name, None)
        if p:
            inputs[name] = {"path": str(p), "sha256": _sha256(p)}
    manifest = {
        "command": args.command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")},
        "version": _version(),
        "seed": args.seed,
        "inputs": inputs,
        "outputs": {str(f): _sha256(f) for f in (out, *extra_files)},
    }
    Path(str(out) + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    timing = {"timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"), **(timings or {})}
    Path(str(out) + ".timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def _same(a, b) -> bool:
    """Exact equality of two NN or radius results (radius hits are index-sorted per query)."""
    if hasattr(a, "offsets"):
        return bool(np.array_equal(a.offsets, b.offsets) and np.array_equal(a.indices, b.indices))
    return bool(np.array_equal(a.indices, b.indices) and np.array_equal(a.distances, b.distances))


def _mismatches(a, b) -> int:
    """Queries whose result differs between two searches."""
    if hasattr(a, "offsets"):
        return sum(not np.array_equal(a[i][0], b[i][0]) for i in range(len(a)))
    return int(np.any(a.indices != b.indices, axis=1).sum())


def _bench_row(name, h, res, n, identical, mismatches=0):
    st = res.total
    return {"tree": name, "h_top": -1 if h is None else h, "queries": n,
            "nodes_visited": st.nodes_visited, "visits_per_query": st.nodes_visited / n,
            "distance_computations": st.distance_computations, "nodes_pruned": st.nodes_pruned,
            "leaf_sets_scanned": st.leaf_sets_scanned, "results_identical": identical,
            "mismatched_queries": mismatches}


def cmd_bench_search(args):
    cloud = get_cloud(args)
    Q = make_queries(cloud, args.queries, args.seed + 1)
    mode = "nn" if args.radius is None else "radius"
    approx = None
    if args.approx:
        try:
            approx = ApproxConfig(**read_json(args.approx)) if args.approx != "default" else ApproxConfig()
        except (TypeError, ValueError) as exc:
            raise DataError(f"bad approximation config: {exc}") from exc

    def run(tree):
        t0 = time.perf_counter()
        res = tree.query(Q, args.k) if mode == "nn" else tree.query_radius(Q, args.radius)
        return res, time.perf_counter() - t0

    canon = KDTree().fit(cloud.points)
    base, dt = run(canon)
    rows, timings = [_bench_row("canonical", None, base, len(Q), True)], {"canonical": dt}
    for h in args.h_top:
        tree = TwoStageKDTree(h_top=h).fit(cloud.points)
        res, timings[f"two-stage:{h}"] = run(tree)
        rows.append(_bench_row("two-stage", h, res, len(Q), _same(base, res)))
        if approx is not None:
            if args.k != 1 and mode == "nn":
                raise UsageError("approximate search supports k=1 only")
            t0 = time.perf_counter()
            ares = tree.approx_query(Q, approx, mode, args.radius)
            timings[f"approx:{h}"] = time.perf_counter() - t0
            rows.append(_bench_row("approx", h, ares, len(Q), _same(base, ares), _mismatches(base, ares)))
    emit(args, rows if args.format == "csv" else {"rows": rows}, timings)


def cmd_sweep_redundancy(args):
    cloud = get_cloud(args)
    Q = make_queries(cloud, args.queries, args.seed + 1)
    rows = redundancy_report(cloud, Q, args.sizes, radius=args.radius)
    emit(args, rows if args.format == "csv" else {"rows": rows})


def _pipeline_config(args):
    from .registration import PipelineConfig, preset
    if args.config:
        try:
            return PipelineConfig.from_dict(read_json(args.config))
        except (TypeError, ValueError) as exc:
            raise DataError(f"{args.config}: {exc}") from exc
    return preset(args.preset)


def _pairs(args):
    """Source/target/truth triples, from files or synthetic generation (one per seed)."""
    if args.input:
        if not args.target:
            raise UsageError("--input needs --target")
        truth = RigidTransform.from_dict(read_json(args.truth)) if args.truth else None
        return [(args.seed, load_cloud(args.input), load_cloud(args.target), truth)]
    geom, n = parse_synthetic(args.synthetic or "scene:10000")
    make = {"scene": synthetic.registration_pair, "lidar": synthetic.lidar_pair}.get(geom)
    if make is None:
        raise UsageError("synthetic registration pairs are 'scene:N' or 'lidar:N'")
    seeds = range(args.seed, args.seed + getattr(args, "seeds", 1))
    return [(s, *make(n, seed=s)) for s in seeds]


def cmd_register(args):
    from .registration import run_pipeline
    cfg = _pipeline_config(args)
    (seed, src, tgt, truth), = _pairs(args)
    res = run_pipeline(src, tgt, cfg, truth)
    payload = {"config": cfg.to_dict(), **res.to_dict(timing=False)}
    emit(args, payload, res.timing.as_dict())
    if args.trace_out:
        _write_stage_traces(res.backend, args.trace_out)


def _write_stage_traces(backend, prefix):
    from .sim import QueryTrace
    for stage, items in sorted(backend.traces.items()):
        tr = QueryTrace.concatenate(QueryTrace.from_result(t, r) for t, r in items
                                    if t is items[-1][0])
        tr.save(f"{prefix}.{stage}.npz")


def cmd_inject_errors(args):
    from dataclasses import replace
    from .registration import ErrorInjection, run_pipeline
    cfg = _pipeline_config(args)
    try:
        settings = [None] + [ErrorInjection(args.stage, k=k) for k in args.k or ()]
        if args.ring:
            settings.append(ErrorInjection(args.stage, ring=tuple(args.ring)))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid injection: {exc}") from exc
    errors = {i: [] for i in range(len(settings))}
    seeds = []
    for seed, src, tgt, truth in _pairs(args):
        if truth is None:
            raise UsageError("error injection needs a known truth transform (--truth)")
        seeds.append(seed)
        for i, inj in enumerate(settings):
            c = replace(cfg, injections=(inj,) if inj else (), seed=seed)
            res = run_pipeline(src, tgt, c, truth)
            errors[i].append((res.error.translational, res.error.rotational))
    rows = []
    for i, inj in enumerate(settings):
        e = np.array(errors[i])
        rows.append({"stage": inj.stage if inj else "none", "k": inj.k if inj and inj.k else "",
                     "ring": f"{inj.ring[0]}-{inj.ring[1]}" if inj and inj.ring else "",
                     "seeds": len(e), "translational_mean": e[:, 0].mean(), "translational_std": e[:, 0].std(),
                     "rotational_mean_deg": e[:, 1].mean(), "rotational_std_deg": e[:, 1].std(),
                     "translational_per_seed": " ".join(f"{v:.9g}" for v in e[:, 0])})
    emit(args, rows if args.format == "csv" else {"seeds": seeds, "rows": rows})


def _trace_from_args(args):
    from .sim import QueryTrace, trace_search
    if args.trace:
        p = Path(args.trace)
        try:
            return QueryTrace.from_csv(p) if p.suffix == ".csv" else QueryTrace.load(p)
        except FileNotFoundError as exc:
            raise DataError(f"no such file: {p}") from exc
        except ValueError as exc:
            raise DataError(f"{p}: {exc}") from exc
    cloud = get_cloud(args)
    Q = make_queries(cloud, args.queries, args.seed + 1)
    tree = TwoStageKDTree(h_top=args.h_top).fit(cloud.points)
    approx = ApproxConfig() if args.approx else None
    return trace_search(tree, Q, "nn" if args.radius is None else "radius", args.radius, approx)


def _sim_config(args):
    from .sim import SimConfig
    if args.sim_config:
        try:
            return SimConfig.from_dict(read_json(args.sim_config))
        except (TypeError, ValueError) as exc:
            raise DataError(f"{args.sim_config}: {exc}") from exc
    return SimConfig()


def cmd_trace(args):
    tr = _trace_from_args(args)
    if not args.out:
        raise UsageError("trace export needs --out")
    args.out = str(resolve_out(args.out, f"trace.{args.format}"))
    if args.format == "csv":
        tr.to_csv(args.out)
    else:
        tr.save(args.out)
    manifest_args = argparse.Namespace(**{**vars(args), "format": "json", "out": args.out + ".summary.json"})
    emit(manifest_args, {"h_top": tr.h_top, "queries": tr.n_queries, "events": len(tr.events)},
         extra_files=(args.out,))


def cmd_simulate(args):
    from .sim import simulate
    tr = _trace_from_args(args)
    cfg = _sim_config(args)
    if tr.has_approx and not cfg.approx_enabled:
        cfg = cfg.replace(approx_enabled=True)
    t0 = time.perf_counter()
    st = simulate(tr, cfg)
    emit(args, {"config": cfg.to_dict(), "stats": st.as_dict(), "rows": [st.row()]},
         {"simulate_seconds": time.perf_counter() - t0})


def cmd_sweep_sim(args):
    from .sim import h_top_sweep, hardware_sweep
    cfg = _sim_config(args)
    if args.h_range:
        lo, hi = args.h_range
        cloud = get_cloud(args)
        Q = make_queries(cloud, args.queries, args.seed + 1)
        rows = h_top_sweep(lambda h: TwoStageKDTree(h_top=h), cloud.points, Q, range(lo, hi + 1), cfg,
                           "nn" if args.radius is None else "radius", args.radius,
                           ApproxConfig() if args.approx else None)
    else:
        tr = _trace_from_args(args)
        if tr.has_approx:
            cfg = cfg.replace(approx_enabled=True)
        rows = hardware_sweep(tr, cfg, args.num_ru, args.num_su, args.pes_per_su)
    emit(args, rows if args.format == "csv" else {"rows": rows})


# ---------------------------------------------------------------- parser


def _ints(s):
    try:
        return [int(x) for x in s.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcaccel", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, fmt=("json", "csv"), default_fmt="json"):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output file (stdout when omitted)")
        sp.add_argument("--format", choices=fmt, default=default_fmt)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--input", help="point cloud (.bin KITTI, .npy, or x y z text)")
        sp.add_argument("--synthetic", help="synthetic input GEOMETRY:COUNT, e.g. scene:10000 or lidar:50000")

    def query_opts(sp):
        sp.add_argument("--queries", type=int, default=1000)
        sp.add_argument("--radius", type=float, default=None, help="radius search (default: NN)")

    sp = sub.add_parser("bench-search", help="visit counts for canonical vs two-stage search")
    common(sp)
    query_opts(sp)
    sp.add_argument("--k", type=int, default=1)
    sp.add_argument("--h-top", type=_ints, default=[8])
    sp.add_argument("--approx", nargs="?", const="default", help="also run leader/follower search "
                    "(optionally with an ApproxConfig JSON)")
    sp.set_defaults(func=cmd_bench_search)

    sp = sub.add_parser("sweep-redundancy", help="two-stage / canonical visit ratio per leaf-set size")
    common(sp)
    sp.add_argument("--queries", type=int, default=500)
    sp.add_argument("--radius", type=float, default=0.6)
    sp.add_argument("--sizes", type=_ints, default=[1, 2, 4, 8, 16, 32])
    sp.set_defaults(func=cmd_sweep_redundancy)

    for name, fn, hlp in (("register", cmd_register, "run the registration pipeline"),
                          ("inject-errors", cmd_inject_errors, "registration error under injected search errors")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        sp.add_argument("--target", help="target cloud file")
        sp.add_argument("--truth", help="truth transform JSON {R, T}")
        sp.add_argument("--preset", default="dp7-like", choices=["dp4-like", "dp7-like"])
        sp.set_defaults(func=fn)
    sub.choices["register"].add_argument("--trace-out", help="prefix for per-stage query traces (.npz)")
    ie = sub.choices["inject-errors"]
    ie.add_argument("--stage", default="rpce", choices=["ne", "keypoints", "descriptors", "kpce", "rpce"])
    ie.add_argument("--k", type=_ints, default=[1, 2, 3, 4])
    ie.add_argument("--ring", type=float, nargs=2, metavar=("R1", "R2"))
    ie.add_argument("--seeds", type=int, default=1)

    def trace_opts(sp):
        query_opts(sp)
        sp.add_argument("--trace", help="trace file (.npz or .csv)")
        sp.add_argument("--h-top", type=int, default=8)
        sp.add_argument("--approx", action="store_true", help="leader/follower search with defaults")
        sp.add_argument("--sim-config", help="SimConfig JSON")

    sp = sub.add_parser("trace", help="export a query trace for the simulator")
    common(sp, ("npz", "csv"), "npz")
    trace_opts(sp)
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("simulate", help="cycle-level simulation of a query trace")
    common(sp)
    trace_opts(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep-sim", help="simulator sweeps over hardware sizes or top-tree height")
    common(sp)
    trace_opts(sp)
    sp.add_argument("--num-ru", type=_ints, default=[16, 32, 64, 128])
    sp.add_argument("--num-su", type=_ints, default=[16, 32, 64, 128])
    sp.add_argument("--pes-per-su", type=_ints, default=[16, 32, 64, 128])
    sp.add_argument("--h-range", type=int, nargs=2, metavar=("LO", "HI"),
                    help="sweep top-tree height instead of hardware sizes")
    sp.set_defaults(func=cmd_sweep_sim)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"pcaccel: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"pcaccel: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        from .kdtree import EmptyTreeError
        from .sim import TraceError
        if isinstance(exc, (EmptyTreeError, TraceError)):
            print(f"pcaccel: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        log.exception("internal error")
        print(f"pcaccel: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
