"""Command-line entry point: reports, planning, serving, inference, training.

Exit codes: 0 success, 2 usage errors (argparse), 3 infeasible plan,
4 protocol/transport errors. Reports print as aligned text tables and can
also be written as CSV (``--out``) or printed as CSV (``--format csv``);
identical inputs always produce byte-identical output.
"""

from __future__ import annotations

import argparse
import csv
import io
import signal
import sys

import numpy as np
import torch

from . import arch as A
from . import bottleneck as B
from . import energy as E
from . import planner as P
from . import wire as W
from .checkpoint import apply_checkpoint, load_checkpoint, save_checkpoint
from .model import build_network
from .trainer import ToyTaskSpec, train_two_step

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_PROTOCOL = 4


# -- table / csv emission --------------------------------------------------


def format_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)).rstrip(),
        "  ".join("-" * widths[i] for i in range(len(headers))),
    ]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return "\n".join(lines) + "\n"


def csv_text(headers: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(headers)
    writer.writerows(rows)
    return buf.getvalue()


def emit(headers, rows, fmt: str, out_path: str | None):
    if fmt == "csv":
        sys.stdout.write(csv_text(headers, rows))
    else:
        sys.stdout.write(format_table(headers, rows))
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(csv_text(headers, rows))


def _fnum(x: float) -> str:
    """Full-precision float formatting that parses back to the same value."""
    return repr(float(x))


# -- report subcommands ------------------------------------------------------


def _candidate_rows(args) -> list[dict]:
    path = args.candidates or A.data_path(f"{args.arch}_candidates.csv")
    rows = B.load_compression_rows(path)
    if args.timesteps is not None:
        rows = [dict(r, timesteps=args.timesteps) for r in rows]
    return rows


def cmd_compress_report(args) -> int:
    spec = A.build_arch(args.arch)
    rows = _candidate_rows(args)
    timesteps = args.timesteps if args.timesteps is not None else rows[0]["timesteps"]
    reports = B.compression_table(spec, rows, timesteps)
    headers = [
        "split", "timesteps", "original", "compressed",
        "baseline_bytes", "spike_bytes", "ratio",
    ]
    table = [
        [
            str(r.split_point),
            str(r.timesteps),
            B.format_shape(r.in_shape),
            B.format_shape(r.out_shape),
            str(r.baseline_payload_bytes),
            str(r.spike_payload_bytes),
            str(r.compression_ratio),
        ]
        for r in reports
    ]
    emit(headers, table, args.format, args.out)
    return EXIT_OK


def cmd_energy_report(args) -> int:
    spec = A.build_arch(args.arch)
    profiles, baseline_name = E.load_profiles()
    if args.profile not in profiles:
        print(f"error: unknown profile {args.profile!r}; known: {sorted(profiles)}",
              file=sys.stderr)
        return EXIT_USAGE
    timesteps = args.timesteps or 2
    if args.fr_source == "measure":
        net = build_network(spec, seed=args.seed)
        rng = np.random.default_rng([args.seed, 0xCA11])
        images = torch.from_numpy(
            rng.random((args.fr_batch, *spec.input_shape), dtype=np.float32)
        )
        net.calibrate_norms(images, timesteps)
        net.eval()
        fr_rows = E.measured_firing_rates(net, images, timesteps)
        flops_source, fr_source = "computed", "measured"
    else:
        fr_path = args.fr_file or A.data_path(f"{args.arch}_fr.csv")
        try:
            fr_rows = E.load_firing_rates(fr_path)
        except OSError as exc:
            print(f"error: cannot read firing rates: {exc}", file=sys.stderr)
            return EXIT_USAGE
        flops_source, fr_source = args.flops, "file"
    reports = E.energy_table(
        spec, fr_rows, timesteps, profiles[args.profile],
        profiles[baseline_name], flops_source=flops_source, fr_source=fr_source,
    )
    headers = [
        "split", "gflops", "gflops_source", "fr", "fr_source", "timesteps",
        "gsyops", "e_baseline_mj", "e_spike_mj", "ratio", "profile",
    ]
    if args.format == "csv" or args.out:
        rows = [
            [
                str(r.split_point), _fnum(r.gflops), r.gflops_source,
                _fnum(r.firing_rate), r.fr_source, str(r.timesteps),
                _fnum(r.gsyops), _fnum(r.e_baseline_mj), _fnum(r.e_spike_mj),
                _fnum(r.ratio), r.profile,
            ]
            for r in reports
        ]
    else:
        rows = []
    if args.format != "csv":
        d = profiles[args.profile].display_decimals
        pretty = [
            [
                str(r.split_point), f"{r.gflops:.2f}", r.gflops_source,
                f"{r.firing_rate:.4f}", r.fr_source, str(r.timesteps),
                f"{r.gsyops:.2f}", f"{r.e_baseline_mj:.2f}",
                f"{r.e_spike_mj:.{d}f}",
                "inf" if r.ratio == float("inf") else f"{r.ratio:.2f}",
                r.profile,
            ]
            for r in reports
        ]
        sys.stdout.write(format_table(headers, pretty))
        if args.out:
            with open(args.out, "w", encoding="utf-8", newline="") as fh:
                fh.write(csv_text(headers, rows))
    else:
        emit(headers, rows, "csv", args.out)
    return EXIT_OK


def cmd_plan(args) -> int:
    rows = _candidate_rows(args)
    candidates = P.candidates_from_rows(rows)
    if args.objective == "min_energy":
        spec = A.build_arch(args.arch)
        profiles, baseline_name = E.load_profiles()
        fr_path = args.fr_file or A.data_path(f"{args.arch}_fr.csv")
        fr_rows = E.load_firing_rates(fr_path)
        reports = E.energy_table(
            spec, fr_rows, args.timesteps or 2, profiles[args.profile],
            profiles[baseline_name],
        )
        candidates = P.attach_edge_energy(
            candidates, {r.split_point: r.e_spike_mj for r in reports}
        )
    plan = P.plan_network(candidates, objective=args.objective, max_drop=args.max_drop)

    headers = ["split", "feasible", "compressed", "ratio", "drop",
               "spike_bytes", "edge_energy_mj", "global_best", "note"]
    rows_out = []
    for d in plan.decisions:
        if d.feasible:
            c = d.chosen
            rows_out.append([
                str(d.split_point), "yes", B.format_shape(c.out_shape),
                str(round(c.compression_ratio)), _fnum(c.accuracy_drop),
                str(c.spike_bytes),
                _fnum(c.edge_energy_mj) if c.edge_energy_mj is not None else "",
                "*" if plan.best is c else "",
                "",
            ])
        else:
            rows_out.append([str(d.split_point), "no", "", "", "", "", "", "", d.reason])
    emit(headers, rows_out, args.format, args.out)
    if plan.best is None:
        print(f"infeasible: {plan.diagnostics}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(
        f"best split: {plan.best.split_point} "
        f"(ratio {round(plan.best.compression_ratio)}, "
        f"drop {plan.best.accuracy_drop}%, objective {plan.objective})"
    )
    return EXIT_OK


# -- split inference subcommands ---------------------------------------------


def _build_split_network(args):
    spec = A.build_arch(args.arch)
    net = build_network(spec, seed=args.seed)
    split = args.split
    compressed = B.parse_shape(args.compressed) if args.compressed else None
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        split = ckpt.metadata.get("split_point", split)
        if "compressed_shape" in ckpt.metadata:
            compressed = tuple(ckpt.metadata["compressed_shape"])
    if split is None:
        raise ValueError("a split point is required (--split or checkpoint metadata)")
    if compressed is None:
        rows = B.load_compression_rows(A.data_path(f"{args.arch}_candidates.csv"))
        by_split = {r["split"]: r["compressed"] for r in rows}
        if split not in by_split:
            raise ValueError(f"no bundled compressed shape for split {split}")
        compressed = by_split[split]
    config = B.make_bottleneck(spec.blocks[split - 1].output_shape, compressed,
                               args.timesteps or 2)
    generator = torch.Generator().manual_seed(args.seed * 100003 + split)
    module = B.build_bottleneck(config, generator, v_threshold=net.lif.v_threshold)
    net.attach_bottleneck(module, split)
    if args.checkpoint:
        apply_checkpoint(net, load_checkpoint(args.checkpoint))
    else:
        # Seed-derived weights carry no trained normalization statistics;
        # calibrate them on a seed-derived batch so spikes survive to the
        # head. Both halves of a session derive the identical statistics.
        rng = np.random.default_rng([args.seed, 0xCA11])
        calib = torch.from_numpy(
            rng.random((1, *spec.input_shape), dtype=np.float32)
        )
        net.calibrate_norms(calib, args.timesteps or 2)
    net.eval()
    return net


def cmd_serve(args) -> int:
    try:
        net = _build_split_network(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    endpoint = args.endpoint or W.default_endpoint()
    try:
        server = W.serve(net, endpoint)
    except OSError as exc:
        print(f"error: cannot bind {endpoint}: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    print(f"serving {args.arch} split {net.split_point} on {server.endpoint}")
    try:
        signal.sigwait({signal.SIGINT, signal.SIGTERM})
    except (KeyboardInterrupt, AttributeError):
        pass
    finally:
        server.stop()
    return EXIT_OK


def cmd_infer(args) -> int:
    try:
        net = _build_split_network(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    c, h, w = net.arch.input_shape
    if args.input:
        image = torch.from_numpy(np.load(args.input).astype(np.float32))
        if image.ndim == 3:
            image = image.unsqueeze(0)
    else:
        rng = np.random.default_rng(args.seed)
        image = torch.from_numpy(rng.random((1, c, h, w), dtype=np.float32))
    endpoint = args.endpoint or W.default_endpoint()
    try:
        with torch.no_grad():
            logits, stats = W.edge_infer(image, net, endpoint, args.timesteps or 2)
    except W.WireError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    print("logits:", " ".join(_fnum(v) for v in logits.tolist()))
    print(
        f"frames_sent={stats.frames_sent} payload_bytes={stats.payload_bytes_total} "
        f"header_overhead_bytes={stats.header_overhead_bytes} round_trips={stats.round_trips}"
    )
    return EXIT_OK


def cmd_train_toy(args) -> int:
    task = ToyTaskSpec(seed=args.seed, epochs=args.epochs)
    result = train_two_step(task)
    print(f"step 1 train accuracy: {result.step1_accuracy:.4f}")
    print(f"step 2 train accuracy: {result.step2_accuracy:.4f}")
    if args.out:
        save_checkpoint(args.out, result.checkpoint)
        print(f"checkpoint written to {args.out}")
    if args.metrics_out:
        headers = ["step", "epoch", "loss", "accuracy"]
        rows = [
            [str(m.step), str(e.epoch), _fnum(e.loss), _fnum(e.accuracy)]
            for m in (result.step1, result.step2)
            for e in m.epochs
        ]
        with open(args.metrics_out, "w", encoding="utf-8", newline="") as fh:
            fh.write(csv_text(headers, rows))
    return EXIT_OK


# -- argument parsing --------------------------------------------------------


def _add_common_report_args(p):
    p.add_argument("--arch", required=True, choices=sorted(A.ARCH_IDS))
    p.add_argument("--timesteps", type=int, default=None)
    p.add_argument("--candidates", default=None, help="candidate table CSV")
    p.add_argument("--out", default=None, help="also write CSV to this path")
    p.add_argument("--format", choices=["table", "csv"], default="table")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikesplit",
        description="Split-computing toolkit for spiking neural networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress-report", help="per-split payload bytes and ratios")
    _add_common_report_args(p)
    p.set_defaults(func=cmd_compress_report)

    p = sub.add_parser("energy-report", help="per-split energy comparison")
    _add_common_report_args(p)
    p.add_argument("--profile", default="45nm")
    p.add_argument("--fr-source", choices=["file", "measure"], default="file")
    p.add_argument("--fr-file", default=None, help="CSV of split,fr[,gflops]")
    p.add_argument("--fr-batch", type=int, default=4,
                   help="random samples for --fr-source measure")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--flops", choices=["file", "computed"], default="file")
    p.set_defaults(func=cmd_energy_report)

    p = sub.add_parser("plan", help="select compression configs under a drop budget")
    _add_common_report_args(p)
    p.add_argument("--max-drop", type=float, default=2.0)
    p.add_argument("--objective", choices=["max_ratio", "min_energy"], default="max_ratio")
    p.add_argument("--profile", default="45nm")
    p.add_argument("--fr-file", default=None)
    p.set_defaults(func=cmd_plan)

    for name, fn, help_text in (
        ("serve", cmd_serve, "run the cloud half of a split"),
        ("infer", cmd_infer, "run the edge half of a split against a server"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--arch", required=True, choices=sorted(A.ARCH_IDS))
        p.add_argument("--split", type=int, default=None)
        p.add_argument("--compressed", default=None, help="CxHxW compressed shape")
        p.add_argument("--timesteps", type=int, default=2)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--endpoint", default=None,
                       help=f"host:port (default ${W.ENDPOINT_ENV_VAR} or {W.default_endpoint()})")
        if name == "infer":
            p.add_argument("--input", default=None, help=".npy image, (C,H,W) or (1,C,H,W)")
        p.set_defaults(func=fn)

    p = sub.add_parser("train-toy", help="two-step training on the synthetic task")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--out", default=None, help="checkpoint output path")
    p.add_argument("--metrics-out", default=None, help="per-epoch metrics CSV")
    p.set_defaults(func=cmd_train_toy)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
