"""Command line entry point: ``edenn {gen,train,eval,stream,bench}``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import network as nw
from . import runtime as rt
from . import synth
from .events import build_event_volume, initial_mask, parse_duration

log = logging.getLogger("edenn")


class CliError(RuntimeError):
    pass


def _size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text)
    if not m:
        raise argparse.ArgumentTypeError(f"size must look like 32x32, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _duration(text: str) -> int:
    try:
        return parse_duration(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# data directories


def load_data(directory: Path) -> tuple[synth.SceneSpec, list[synth.LabelledSample]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CliError(f"{directory}: no manifest.json (run `edenn gen` first)")
    manifest = json.loads(manifest_path.read_text())
    fields = {k: (tuple(v) if isinstance(v, list) else v) for k, v in manifest["spec"].items()}
    spec = synth.SceneSpec(**fields)
    samples = []
    for i, entry in enumerate(manifest["samples"]):
        samples.append(synth.read_sample(directory, entry["events"], entry["gt"], replace(spec, index=i)))
    return spec, samples


def _check_geometry(cfg: nw.NetworkConfig, spec: synth.SceneSpec) -> None:
    if (cfg.width, cfg.height) != (spec.width, spec.height):
        raise CliError(f"network expects {cfg.width}x{cfg.height} input but data is {spec.width}x{spec.height}")
    if (cfg.head == "scalar") != (spec.scenario == "rotating"):
        raise CliError(f"{cfg.head} head does not fit {spec.scenario} data")


def _metrics_line(metrics: dict[str, float]) -> str:
    return json.dumps({k: round(v, 12) for k, v in metrics.items()}, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    width, height = args.size
    spec = synth.SceneSpec(
        width=width,
        height=height,
        duration=args.duration,
        bin_width=args.bin_width,
        seed=args.seed,
        scenario="rotating" if args.scenario == "rotating" else "translating",
    )
    try:
        spec.validate()
    except synth.SceneError as exc:
        raise CliError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.samples):
        sample = synth.generate(replace(spec, index=i))
        ev, gt = synth.write_sample(sample, out, f"sample_{i:04d}", args.format)
        entries.append({"events": ev, "gt": gt, "n_events": len(sample.events)})
    manifest = {
        "scenario": spec.scenario,
        "n_bins": spec.window.n_bins,
        "samples": entries,
        "spec": synth.spec_to_manifest(spec),
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (out / "manifest.json").write_text(text)
    print(text, end="")
    return 0


def cmd_train(args) -> int:
    try:
        netcfg, traincfg = nw.parse_config(Path(args.config).read_text())
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}") from None
    if args.seed is not None:
        traincfg = replace(traincfg, seed=args.seed)
    if args.epochs is not None:
        traincfg = replace(traincfg, epochs=args.epochs)
    spec, samples = load_data(args.data)
    _check_geometry(netcfg, spec)
    data = synth.make_dataset(samples)
    net = nw.build_network(netcfg, seed=traincfg.seed)
    result = nw.train(net, data, traincfg)
    Path(args.out_checkpoint).write_bytes(nw.save_checkpoint(net))
    history_path = Path(args.history) if args.history else Path(str(args.out_checkpoint) + ".history.jsonl")
    history_path.write_text("".join(json.dumps({"epoch": i, "loss": v}) + "\n" for i, v in enumerate(result.history)))
    metrics = nw.evaluate(net, data, settle_us=traincfg.settle_us)
    print(_metrics_line(metrics))
    return 0


def _load_net(path: str) -> nw.Network:
    try:
        return nw.load_checkpoint(Path(path).read_bytes())
    except OSError as exc:
        raise CliError(f"cannot read checkpoint: {exc}") from None
    except ValueError as exc:
        raise CliError(f"bad checkpoint {path}: {exc}") from None


def cmd_eval(args) -> int:
    net = _load_net(args.checkpoint)
    spec, samples = load_data(args.data)
    _check_geometry(net.config, spec)
    data = synth.make_dataset(samples)
    baseline = None
    if args.baseline_data:
        _, base_samples = load_data(args.baseline_data)
        baseline = synth.make_dataset(base_samples).gt.mean(axis=(0, 1))
    settle = args.settle if args.settle is not None else None
    print(_metrics_line(nw.evaluate(net, data, baseline, settle)))
    return 0


def cmd_stream(args) -> int:
    net = _load_net(args.checkpoint)
    spec, samples = load_data(args.data)
    _check_geometry(net.config, spec)
    if not 0 <= args.sample < len(samples):
        raise CliError(f"sample {args.sample} out of range (have {len(samples)})")
    sample = samples[args.sample]
    vol = build_event_volume(sample.events, spec.width, spec.height, spec.window).tensor
    mask = initial_mask(vol)
    session = rt.open_session(net)
    preds = []
    for t in range(vol.shape[-1]):
        pred = rt.step(session, vol[..., t], mask[..., t])
        preds.append(pred)
        if net.config.head == "scalar":
            print(json.dumps({"bin": t, "pred": [float(v) for v in pred]}))
        else:
            print(json.dumps({"bin": t, "mean_flow": [float(v) for v in pred.reshape(-1, 2).mean(axis=0)]}))
    if args.verify:
        batch = net.forward(vol, mask)
        err = float(np.max(np.abs(np.stack(preds, axis=-1) - batch)))
        ok = err < 1e-9
        print(json.dumps({"max_abs_stream_minus_batch": err, "ok": ok}))
        return 0 if ok else 1
    return 0


def cmd_bench(args) -> int:
    net = _load_net(args.checkpoint)
    probes = [p for p in args.probes if p <= args.slices]
    report = rt.bench(net, args.slices, args.warmup, probes=probes, seed=args.seed)
    print(report.to_text(), end="")
    if args.records:
        Path(args.records).write_text(report.to_jsonl())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edenn", description="Event decay neural networks.")
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS threads (1 gives a fixed reduction order)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic event data")
    g.add_argument("--scenario", choices=["rotating", "translating"], required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--duration", type=_duration, default=100_000)
    g.add_argument("--bin-width", type=_duration, default=2_000)
    g.add_argument("--size", type=_size, default=(32, 32))
    g.add_argument("--samples", type=int, default=1)
    g.add_argument("--format", choices=["binary", "csv"], default="binary")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--history", help="loss history path (default: <checkpoint>.history.jsonl)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--baseline-data", help="data whose mean ground truth is the mean predictor")
    e.add_argument("--settle", type=_duration)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("stream", help="stream one sample slice by slice")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--sample", type=int, default=0)
    s.add_argument("--verify", action="store_true", help="compare against whole-window forward")
    s.set_defaults(func=cmd_stream)

    b = sub.add_parser("bench", help="measure streaming step latency")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--slices", type=int, default=500)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--probes", type=_ints, default=[10, 200])
    b.add_argument("--records", help="write one JSON record per slice here")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (CliError, nw.ConfigError, nw.TrainingError, ValueError) as exc:
        print(f"edenn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
