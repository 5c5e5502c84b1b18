"""Command-line entry point: ``ditmoe {train,sample,analyze,inspect}``.

Seeds: everything derives from ``--seed`` / ``seed = ...`` through
``numpy.random.default_rng([seed, counter])`` with counter 0 for the trainer
stream, 1 for built-in toy real data and 2 for built-in toy synthetic data.
Sample ``i`` of ``ditmoe sample`` uses ``default_rng([seed, i])``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path


from ditmoe import accounting
from ditmoe.analyze import (
    GROUP_KINDS,
    TraceFile,
    analyze_trace_files,
    entropy_summary,
    export_csv,
    export_heatmap,
    load_trace,
    save_trace,
)
from ditmoe.checkpoint import load_checkpoint, save_checkpoint
from ditmoe.config import (
    MODEL_KEYS,
    TABLE1_REFERENCE,
    ModelConfig,
    config_from_dict,
    config_to_dict,
    format_kv_text,
    get_preset,
    parse_kv_text,
    presets,
)
from ditmoe.data import load_dataset, toy_source
from ditmoe.moe import RoutingTrace
from ditmoe.sample import SampleRequest, ddpm_sample_batch, write_sample
from ditmoe.schedule import build_linear_schedule
from ditmoe.train import Trainer, TrainConfig

log = logging.getLogger("ditmoe")

TRAIN_KEYS = {
    "lr": "AdamW learning rate",
    "ema_decay": "EMA decay",
    "label_dropout_p": "probability of replacing a label by the null label",
    "batch_size": "images per step",
    "steps": "training steps",
    "objective": "ddpm | rectified_flow",
    "seed": "master seed",
    "mix_ratio": "real:synthetic draw ratio, e.g. 1:5",
    "data": "dataset directory, or 'toy' for built-in patterns",
    "synthetic_data": "synthetic dataset directory, 'toy', or empty for none",
    "toy_per_class": "images per class for built-in toy data",
    "checkpoint_every": "write a checkpoint every N steps (0: final only)",
    "diffusion_steps": "number of diffusion steps T",
}
TRAIN_DEFAULTS = {
    "lr": "0.0001",
    "ema_decay": "0.9999",
    "label_dropout_p": "0.1",
    "batch_size": "32",
    "steps": "1000",
    "objective": "ddpm",
    "seed": "0",
    "mix_ratio": "1:5",
    "data": "toy",
    "synthetic_data": "",
    "toy_per_class": "200",
    "checkpoint_every": "0",
    "diffusion_steps": "1000",
}


class CliError(Exception):
    pass


def _key_help(keys: dict[str, str]) -> str:
    width = max(len(k) for k in keys)
    return "\n".join(f"  {k.ljust(width)}  {v}" for k, v in keys.items())


def parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise CliError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_run_config(source: str, overrides: dict[str, str], allow_train: bool = True):
    """Load a preset name or config file, then apply overrides.

    Returns ``(model_config, train_values)`` where ``train_values`` holds
    every training key as a string.
    """
    known = set(MODEL_KEYS) | (set(TRAIN_KEYS) if allow_train else set())
    if Path(source).is_file():
        values = parse_kv_text(Path(source).read_text())
        base = None
    else:
        try:
            base = get_preset(source)
        except KeyError as exc:
            raise CliError(f"{source!r} is neither a config file nor a preset name") from exc
        values = {}
    values.update(overrides)
    unknown = set(values) - known
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
    model_vals = {k: v for k, v in values.items() if k in MODEL_KEYS}
    train_vals = dict(TRAIN_DEFAULTS)
    train_vals.update({k: v for k, v in values.items() if k in TRAIN_KEYS})
    try:
        cfg = config_from_dict(model_vals, base=base)
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc
    return cfg, train_vals


def _parse_ratio(text: str) -> tuple[float, float]:
    try:
        r, s = (float(v) for v in text.split(":"))
    except ValueError:
        raise CliError(f"mix_ratio must look like 1:5, got {text!r}") from None
    return r, s


def train_config_from(values: dict[str, str]) -> TrainConfig:
    try:
        return TrainConfig(
            lr=float(values["lr"]),
            ema_decay=float(values["ema_decay"]),
            label_dropout_p=float(values["label_dropout_p"]),
            batch_size=int(values["batch_size"]),
            steps=int(values["steps"]),
            objective=values["objective"],
            seed=int(values["seed"]),
            mix_ratio=_parse_ratio(values["mix_ratio"]),
            diffusion_steps=int(values["diffusion_steps"]),
        )
    except ValueError as exc:
        raise CliError(f"invalid training config: {exc}") from exc


def _load_source(location: str, cfg: ModelConfig, seed: int, counter: int, per_class: int, style: str):
    if location == "toy":
        return toy_source(cfg.num_classes, per_class, size=cfg.input_size, channels=cfg.in_channels,
                          seed=[seed, counter], style=style)
    path = Path(location)
    if not path.is_dir():
        raise CliError(f"dataset directory not found: {location}")
    return load_dataset(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def run_train(args) -> int:
    overrides = parse_overrides(args.overrides)
    for flag in ("objective", "seed", "steps"):
        value = getattr(args, flag)
        if value is not None:
            overrides[flag] = str(value)
    cfg, tv = resolve_run_config(args.config, overrides)
    tcfg = train_config_from(tv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_class = int(tv["toy_per_class"])
    real = _load_source(tv["data"], cfg, tcfg.seed, 1, per_class, "real")
    synth = _load_source(tv["synthetic_data"], cfg, tcfg.seed, 2, per_class, "synthetic") if tv["synthetic_data"] else None
    trainer = Trainer(cfg, tcfg, real, synth)
    (out / "config.txt").write_text(format_kv_text({**config_to_dict(cfg), **tv}))
    every = int(tv["checkpoint_every"])
    first_col = "rf_mse" if tcfg.objective == "rectified_flow" else "mse"
    with open(out / "loss_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", first_col, "vlb", "balance", "total"])

        def on_step(tr, rec):
            w.writerow([rec.step, repr(rec.mse), repr(rec.vlb), repr(rec.balance), repr(rec.total)])
            if every and rec.step % every == 0:
                save_checkpoint(out / f"ckpt_{rec.step:06d}.dmck", tr.to_checkpoint())
            if rec.step % 100 == 0:
                log.info("step %d total %.5f", rec.step, rec.total)

        trainer.run(tcfg.steps, on_step)
    save_checkpoint(out / "final.dmck", trainer.to_checkpoint())
    print(f"trained {tcfg.steps} steps; checkpoint {out / 'final.dmck'}")
    return 0


def run_sample(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.config
    if ck.meta.get("objective", "ddpm") != "ddpm":
        raise CliError("checkpoint was trained with the rectified_flow objective; DDPM sampling does not apply")
    params = ck.ema if args.weights == "ema" else ck.params
    schedule = build_linear_schedule(int(ck.meta.get("diffusion_steps", 1000)),
                                     float(ck.meta.get("beta_start", 1e-4)), float(ck.meta.get("beta_end", 2e-2)))
    if args.class_label == "all":
        classes = list(range(cfg.num_classes))
    else:
        try:
            classes = [int(args.class_label)]
        except ValueError:
            raise CliError(f"--class must be an integer or 'all', got {args.class_label!r}") from None
    for c in classes:
        if not 0 <= c < cfg.num_classes:
            raise CliError(f"class {c} outside [0, {cfg.num_classes})")
    if args.n < 1:
        raise CliError("--n must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace = RoutingTrace(cfg.moe.K) if args.trace else None
    index = 0
    for c in classes:
        reqs = []
        for _ in range(args.n):
            reqs.append(SampleRequest(class_label=c, num_steps=args.steps, cfg_scale=args.cfg_scale, seed=args.seed,
                                      trace=args.trace, index=index, trace_both=args.trace_both))
            index += 1
        for start in range(0, len(reqs), args.batch):
            chunk = reqs[start:start + args.batch]
            images = ddpm_sample_batch(params, cfg, schedule, chunk, trace)
            for req, img in zip(chunk, images):
                write_sample(out, f"sample_c{req.class_label}_{req.index:05d}", img, req)
    if trace is not None:
        save_trace(out / "trace.dmtr", TraceFile.for_config(cfg, trace, args.steps))
    print(f"wrote {index} images to {out}")
    return 0


def run_analyze(args) -> int:
    if not args.traces:
        raise CliError("need at least one trace file")
    files = []
    for p in args.traces:
        try:
            files.append(load_trace(p))
        except (OSError, ValueError) as exc:
            raise CliError(str(exc)) from exc
    try:
        stats = analyze_trace_files(files, args.by)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_csv(stats, out / f"routing_{args.by}.csv")
    for layer in range(stats.counts.shape[0]):
        export_heatmap(stats, layer, out / f"heatmap_{args.by}_layer{layer:02d}.pgm")
    ent = entropy_summary(stats)
    with open(out / f"entropy_{args.by}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "group_id", "entropy"])
        for l in range(ent["per_group_entropy"].shape[0]):
            for g in range(ent["per_group_entropy"].shape[1]):
                w.writerow([l, g, repr(float(ent["per_group_entropy"][l, g]))])
    print(f"{'layer':>5}  mean entropy (nats) by {args.by}")
    for l, h in enumerate(ent["per_layer_mean_entropy"]):
        print(f"{l:>5}  {h:.4f}")
    return 0


def _pct(value: float, ref: float) -> str:
    return f"{100.0 * (value - ref) / ref:+.2f}%"


def run_inspect(args) -> int:
    cfg, _ = resolve_run_config(args.config, parse_overrides(args.overrides), allow_train=False)
    ref = TABLE1_REFERENCE.get(args.config) if not args.overrides else None
    show_params = args.params or not args.flops
    if show_params:
        pc = accounting.param_count(cfg)
        print(f"{'':10}{'computed':>18}{'reference':>14}{'deviation':>11}")
        for label, value, r in (("total", pc.total, ref and ref[0]), ("activated", pc.activated, ref and ref[1])):
            line = f"{label:10}{value:>18,d}"
            if r:
                line += f"{r / 1e6:>13,.0f}M{_pct(value, r):>11}"
            print(line)
    if args.flops:
        g = accounting.flop_estimate(cfg, args.resolution, args.mode)
        line = f"gflops ({args.mode}, {args.resolution}px): {g:.2f}"
        if ref and args.mode == "core" and args.resolution == 256:
            line += f"  reference {ref[2]:.2f}  deviation {_pct(g, ref[2])}"
        print(line)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ditmoe", description="Sparse mixture-of-experts diffusion transformer")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    preset_names = ", ".join(presets())

    model_epilog = f"presets: {preset_names}\n\nmodel keys:\n{_key_help(MODEL_KEYS)}"
    p = sub.add_parser("train", help="train a model", formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog=f"{model_epilog}\n\ntraining keys:\n{_key_help(TRAIN_KEYS)}")
    p.add_argument("config", help="config file or preset name")
    p.add_argument("overrides", nargs="*", help="key=value overrides applied after the file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--objective", choices=["ddpm", "rectified_flow"])
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=run_train)

    p = sub.add_parser("sample", help="sample images from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--class", dest="class_label", default="0", help="class label or 'all'")
    p.add_argument("--n", type=int, default=1, help="images per class")
    p.add_argument("--steps", type=int, default=250)
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", action="store_true", help="record routing decisions to trace.dmtr")
    p.add_argument("--trace-both", action="store_true", help="also trace the unconditional guidance branch")
    p.add_argument("--weights", choices=["ema", "raw"], default="ema")
    p.add_argument("--batch", type=int, default=64, help="images per sampling batch")
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_sample)

    p = sub.add_parser("analyze", help="expert-selection statistics from trace files")
    p.add_argument("traces", nargs="+")
    p.add_argument("--by", choices=GROUP_KINDS, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_analyze)

    p = sub.add_parser("inspect", help="parameter and flop accounting",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=model_epilog)
    p.add_argument("config", help="config file or preset name")
    p.add_argument("overrides", nargs="*", help="key=value overrides")
    p.add_argument("--params", action="store_true")
    p.add_argument("--flops", action="store_true")
    p.add_argument("--mode", choices=["core", "full"], default="core")
    p.add_argument("--resolution", type=int, default=256)
    p.set_defaults(func=run_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    # key=value overrides may follow options; argparse only collects them up front
    stray = [e for e in extra if e.startswith("-") or "=" not in e or not hasattr(args, "overrides")]
    if stray:
        parser.error(f"unrecognized arguments: {' '.join(stray)}")
    if extra:
        args.overrides = list(args.overrides) + extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
