"""Command-line entry point: run scenarios, benchmark, verify goldens, serve."""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import benchmark, compare_golden, load_scenario, run_scenario, write_metrics


def _add_overrides(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("scenario", help="scenario file (YAML)")
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                        default=None, help="override the scenario's deterministic flag")
    parser.add_argument("--substeps", type=int, default=None, help="substeps per frame")
    parser.add_argument("--frame-rate", type=float, default=None, help="frames per second")


def _load_with_overrides(args) -> "Scenario":
    scenario = load_scenario(args.scenario)
    if args.deterministic is not None:
        scenario.solver.deterministic = args.deterministic
    if args.substeps is not None:
        scenario.solver.substeps = args.substeps
    if args.frame_rate is not None:
        scenario.solver.frame_dt = 1.0 / args.frame_rate
    return scenario


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="surgsim",
        description="Soft-tissue XPBD simulation: scenario runs, benchmarks, "
                    "golden verification, and interactive serving.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario and write metrics")
    _add_overrides(p_run)
    p_run.add_argument("--metrics", default=None, help="metrics output path override")

    p_bench = sub.add_parser("bench", help="measure substep rate at element counts")
    _add_overrides(p_bench)
    p_bench.add_argument("--sizes", type=int, nargs="+", default=[5000],
                         help="target element counts")
    p_bench.add_argument("--frames", type=int, default=60, help="timed frames per size")

    p_verify = sub.add_parser("verify", help="run a scenario and compare to a golden")
    _add_overrides(p_verify)
    p_verify.add_argument("--golden", default=None, help="golden metrics path override")

    p_serve = sub.add_parser("serve", help="serve an interactive session")
    _add_overrides(p_serve)
    p_serve.add_argument("--port", type=int, default=8765)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--snapshot-hz", type=float, default=30.0)
    p_serve.add_argument("--frontend", default=None,
                         help="directory of viewer static files to serve over HTTP "
                              "on port+1")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    scenario = _load_with_overrides(args)

    if args.command == "run":
        if args.metrics:
            scenario.metrics_path = args.metrics
        report = run_scenario(scenario)
        dest = scenario.metrics_path or "<not written>"
        print(f"{scenario.name}: {report.rows.shape[0]} frames, "
              f"hash {report.position_hash[:16]}, metrics {dest}")
        if report.failure:
            print(f"FAILED: {report.failure}", file=sys.stderr)
            return 2
        return 0

    if args.command == "bench":
        rows = benchmark(scenario, args.sizes, timed_frames=args.frames)
        print(f"{'elements':>10} {'substeps/s':>12} {'ms/substep':>12}")
        for row in rows:
            print(f"{row.elements:>10} {row.substeps_per_second:>12.1f} "
                  f"{row.mean_substep_ms:>12.3f}")
        return 0

    if args.command == "verify":
        golden = args.golden or scenario.golden_path
        if not golden:
            print("no golden path given (use --golden or the scenario's golden field)",
                  file=sys.stderr)
            return 2
        report = run_scenario(scenario)
        if report.failure:
            print(f"FAILED: {report.failure}", file=sys.stderr)
            return 2
        diff = compare_golden(report, golden)
        if diff.passed:
            print(f"{scenario.name}: matches golden {golden}")
            return 0
        print(f"{scenario.name}: MISMATCH vs {golden}: {diff.detail}", file=sys.stderr)
        return 1

    if args.command == "serve":
        if args.frontend:
            _serve_static(args.frontend, args.host, args.port + 1)
        from .stream import serve_session

        try:
            serve_session(scenario, port=args.port, host=args.host,
                          snapshot_hz=args.snapshot_hz)
        except KeyboardInterrupt:
            pass
        return 0

    return 2


def _serve_static(directory: str, host: str, port: int) -> None:
    import functools
    import http.server
    import threading

    handler = functools.partial(http.server.SimpleHTTPRequestHandler, directory=directory)
    httpd = http.server.ThreadingHTTPServer((host, port), handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    print(f"viewer: http://{host}:{port}/ (websocket on port {port - 1})")


if __name__ == "__main__":
    sys.exit(main())
