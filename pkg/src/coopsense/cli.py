"""Command-line interface: scenario runner and message-file inspector."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import SCENARIO_SCHEMA_VERSION, WIRE_VERSION, __version__
from .cpm import CodecError, HEADER_SIZE, decode, message_size
from .runner import ARM_ORDER, RunManifest, run


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coopsense",
        description="cooperative perception scenario runner and tooling",
    )
    parser.add_argument(
        "--version", action="version",
        version=(f"coopsense {__version__} "
                 f"(wire v{WIRE_VERSION}, scenario schema v{SCENARIO_SCHEMA_VERSION})"),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="simulate a scenario and write reports")
    run_p.add_argument("--scenario", required=True, type=Path,
                       help="scenario JSON file")
    run_p.add_argument("--pipelines", default="vehicle,intra,inter",
                       help="comma-separated subset of vehicle,intra,inter")
    run_p.add_argument("--out", required=True, type=Path, help="output directory")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")

    inspect_p = sub.add_parser("inspect", help="dump a message file as text")
    inspect_p.add_argument("path", type=Path, help="file of concatenated wire messages")
    return parser


def _cmd_run(args) -> int:
    pipelines = tuple(p.strip() for p in args.pipelines.split(",") if p.strip())
    try:
        manifest = RunManifest(
            scenario_path=args.scenario,
            pipelines=pipelines,
            out_dir=args.out,
            seed_override=args.seed,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"usage: coopsense run --pipelines {','.join(ARM_ORDER)}",
              file=sys.stderr)
        return 2
    return run(manifest)


def _sources_text(flags: int) -> str:
    names = []
    for bit, name in ((1, "LIDAR"), (2, "RADAR"), (4, "RGB"), (8, "THERMAL"),
                      (16, "REMOTE")):
        if flags & bit:
            names.append(name)
    return "|".join(names) if names else "none"


def _cmd_inspect(args) -> int:
    try:
        data = args.path.read_bytes()
    except OSError as exc:
        print(f"error: cannot read {args.path}: {exc}", file=sys.stderr)
        return 2

    offset = 0
    n_messages = 0
    while offset < len(data):
        chunk = data[offset:]
        if len(chunk) < HEADER_SIZE:
            print(f"offset 0x{offset:08x}: Truncated "
                  f"({len(chunk)} trailing bytes, header needs {HEADER_SIZE})")
            return 0
        size = message_size(chunk[28])
        try:
            msg = decode(chunk[:size])
        except CodecError as exc:
            print(f"offset 0x{offset:08x}: {type(exc).__name__}: {exc}")
            return 0
        kind = "CPM" if msg.msg_type == 1 else "CAM"
        sender = msg.sender
        print(
            f"message @0x{offset:08x}: {kind} sender={sender.agent_id} "
            f"seq={msg.seq} stamp={sender.stamp.seconds:.6f}s "
            f"pos=({sender.position[0]:.2f}, {sender.position[1]:.2f}, "
            f"{sender.position[2]:.2f}) heading={sender.heading:.4f} "
            f"objects={len(msg.objects)} size={size}"
        )
        for obj in msg.objects:
            sigmas = [f"{v ** 0.5:.3f}" for v in obj.cov.diagonal()]
            print(
                f"  object track_id={obj.track_id} "
                f"class={obj.class_dist.argmax().name} "
                f"conf={obj.class_dist.prob(obj.class_dist.argmax()):.3f} "
                f"existence={obj.existence:.3f} "
                f"sources={_sources_text(int(obj.sources))} "
                f"pos=({obj.position[0]:.2f}, {obj.position[1]:.2f}, "
                f"{obj.position[2]:.2f}) "
                f"vel=({obj.velocity[0]:.2f}, {obj.velocity[1]:.2f}, "
                f"{obj.velocity[2]:.2f}) "
                f"heading={obj.heading:.4f} "
                f"dims=({obj.dims[0]:.2f}, {obj.dims[1]:.2f}, {obj.dims[2]:.2f}) "
                f"sigma_pos=({', '.join(sigmas[:3])}) "
                f"sigma_vel=({', '.join(sigmas[3:])})"
            )
        offset += size
        n_messages += 1
    print(f"total messages: {n_messages}, total bytes: {len(data)}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "inspect":
            return _cmd_inspect(args)
    except BrokenPipeError:
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
