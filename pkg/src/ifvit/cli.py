"""Command-line entry point: ``ifvit <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys

import numpy as np

from . import analysis, config as cfgmod, data as datamod, evaluation
from .backbone import CONCAT, CROSSATTN, EARLY, INTERMEDIATE, build_model, param_count
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import EveryN, MetricLog, make_schedule, new_train_state, sample, train_loop
from .errors import ArgumentError, ConfigurationError, DataError, DimensionError, NumericalError
from .numerics import RngState

logger = logging.getLogger("ifvit")

OUTPUT_ROOT_ENV = "IFVIT_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_CONFIG = "run.ini"
DATASET_FILE = "data.ifv"
CHECKPOINT_FILE = "checkpoint.ifv"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def resolve_out(path):
    """Relative output paths land under ``$IFVIT_OUTPUT_ROOT`` when it is set."""
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        path = os.path.join(root, path)
    os.makedirs(path, exist_ok=True)
    return path


def write_provenance(cfg, out):
    """Copy of the resolved config (which carries the seed) plus a bare seed file."""
    cfgmod.dump(cfg, os.path.join(out, RUN_CONFIG))
    with open(os.path.join(out, "seed.txt"), "w") as f:
        f.write(f"{cfg.run.seed}\n")


def schedule_for(cfg):
    d = cfg.diffusion
    return make_schedule(d.T, d.beta_start, d.beta_end)


def _checkpoint_config(checkpoint):
    """The run config saved next to a checkpoint, if any."""
    p = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), RUN_CONFIG)
    return cfgmod.load(p) if os.path.exists(p) else None


def _load_model(cfg, checkpoint, explicit):
    """Load a checkpoint. An explicitly given config must describe the same model."""
    if not os.path.exists(checkpoint):
        raise DataError(f"checkpoint not found: {checkpoint}")
    model, meta = load_checkpoint(checkpoint, cfg.model_config() if explicit else None)
    return model, meta


def _prompt_ids(prompts, text_len):
    if not prompts:
        raise ArgumentError("at least one prompt is required")
    return np.stack([datamod.tokenize(p, text_len) for p in prompts])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg, n, out):
    """Generate ``n`` captioned images into ``out/data.ifv``."""
    out = resolve_out(out)
    spec = cfg.scene_spec()
    records = datamod.generate_dataset(spec, n, cfg.run.seed, cfg.model.img_channels)
    path = os.path.join(out, DATASET_FILE)
    datamod.save_dataset(path, records, spec, cfg.model.img_channels)
    write_provenance(cfg, out)
    return path


def _check_dataset(cfg, spec, channels):
    m = cfg.model
    if spec.canvas != m.img_size or channels != m.img_channels or spec.text_len != m.text_len:
        raise DataError(f"dataset ({channels}x{spec.canvas}x{spec.canvas}, text_len {spec.text_len}) does not "
                        f"fit the model ({m.img_channels}x{m.img_size}x{m.img_size}, text_len {m.text_len})")


def cmd_train(cfg, data, out, steps=None):
    """Train from scratch on the dataset file ``data``; writes checkpoint and metric log."""
    if cfg.run.preset == "paper":
        raise ConfigurationError("run.preset: the paper preset is for FLOP/parameter analysis only; "
                                 "train with the tiny or desk preset")
    if not os.path.exists(data):
        raise DataError(f"dataset not found: {data}")
    records, spec, channels = datamod.load_dataset(data)
    _check_dataset(cfg, spec, channels)
    out = resolve_out(out)
    write_provenance(cfg, out)
    mc = cfg.model_config()
    tr = cfg.train
    root = RngState(cfg.run.seed)
    model = build_model(mc, root.spawn(0))
    state = new_train_state(model, tr.lr, tr.warmup, tr.weight_decay, (tr.beta1, tr.beta2),
                            tr.batch_size, tr.cfg_drop_prob)
    ckpt = os.path.join(out, CHECKPOINT_FILE)
    metrics = os.path.join(out, "metrics.csv")
    if os.path.exists(metrics):
        os.remove(metrics)

    def save(st):
        save_checkpoint(ckpt, st.model, {"step": st.step, "seed": cfg.run.seed, "preset": cfg.run.preset})

    callbacks = [MetricLog(metrics)]
    if tr.checkpoint_every > 0:
        callbacks.append(EveryN(tr.checkpoint_every, save))
    n_steps = tr.steps if steps is None else steps
    train_loop(state, datamod.to_arrays(records), n_steps, schedule_for(cfg), root.spawn(1), callbacks)
    save(state)
    return state


def cmd_sample(cfg, checkpoint, prompts, omega, n, out, explicit=True):
    """``n`` images per prompt as PNG files plus an index CSV. ``omega=None``
    selects the conditional-only sampler."""
    model, _ = _load_model(cfg, checkpoint, explicit)
    ids = _prompt_ids(prompts, model.config.text_len)
    ids = np.repeat(ids, n, axis=0)
    out = resolve_out(out)
    write_provenance(cfg, out)
    images = sample(model, schedule_for(cfg), ids, omega, cfg.diffusion.sample_steps, RngState(cfg.run.seed))
    with open(os.path.join(out, "samples.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["file", "prompt"])
        for i, img in enumerate(images):
            name = f"sample_{i // n:03d}_{i % n:03d}.png"
            datamod.write_png(os.path.join(out, name), img)
            w.writerow([name, prompts[i // n]])
    return images


FLOPS_SETTINGS = [(EARLY, CONCAT), (INTERMEDIATE, CONCAT), (EARLY, CROSSATTN), (INTERMEDIATE, CROSSATTN)]


def cmd_flops(cfg, all_settings=False, attention_matmuls=False, out=None):
    """FLOPs and parameter counts; returns ``[(fusion, conditioning, report, params)]``."""
    settings = FLOPS_SETTINGS if all_settings else [(cfg.model.fusion, cfg.model.conditioning)]
    rows = []
    for fusion, cond in settings:
        c = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, fusion=fusion, conditioning=cond))
        mc = c.model_config()
        rows.append((fusion, cond, analysis.count_flops(mc, attention_matmuls), param_count(mc)))
    if out is not None:
        out = resolve_out(out)
        write_provenance(cfg, out)
        for fusion, cond, rep, _ in rows:
            name = "flops.csv" if len(rows) == 1 else f"flops_{fusion}_{cond}.csv"
            analysis.write_flops_csv(rep, os.path.join(out, name))
    return rows


def cmd_analyze_attn(cfg, checkpoint, prompts, out, explicit=True):
    """Attention maps over a full conditional sampling run, averaged, border-trimmed
    and reduced to singular spectra."""
    model, _ = _load_model(cfg, checkpoint, explicit)
    ids = _prompt_ids(prompts, model.config.text_len)
    out = resolve_out(out)
    write_provenance(cfg, out)
    _, records = analysis.collect_attention(model, schedule_for(cfg), ids, cfg.diffusion.sample_steps,
                                            RngState(cfg.run.seed))
    averaged = analysis.average_attention(records)
    report = analysis.spectrum_report(averaged)
    analysis.emit_reports(out, spectrum=report, averaged=averaged)
    return report


def cmd_eval_count(cfg, checkpoint, out, explicit=True):
    """Count-alignment table over every (count, color, shape) prompt."""
    model, _ = _load_model(cfg, checkpoint, explicit)
    out = resolve_out(out)
    write_provenance(cfg, out)
    prompts = evaluation.prompt_set(cfg.eval_counts)
    res = evaluation.evaluate_counts(model, schedule_for(cfg), prompts, cfg.eval.n_per_prompt,
                                     cfg.diffusion.omega, cfg.run.seed, cfg.diffusion.sample_steps)
    res.write_csv(os.path.join(out, "count.csv"))
    return res


def cmd_cfg_sweep(cfg, checkpoint, omegas, out, n=None, explicit=True):
    """Pixel Frechet distance and count metrics for each guidance scale."""
    model, _ = _load_model(cfg, checkpoint, explicit)
    out = resolve_out(out)
    write_provenance(cfg, out)
    n = n or max(2, cfg.eval.n_per_prompt * len(evaluation.prompt_set(cfg.eval_counts)))
    spec = cfg.scene_spec()
    real, _ = datamod.to_arrays(datamod.generate_dataset(spec, max(n, 2), cfg.run.seed + 1, model.config.img_channels))
    rows = evaluation.cfg_sweep(model, schedule_for(cfg), omegas, n, cfg.run.seed, real,
                                evaluation.prompt_set(cfg.eval_counts), cfg.diffusion.sample_steps)
    evaluation.write_sweep_csv(rows, os.path.join(out, "sweep.csv"))
    return rows


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _add_config_args(p, default_preset="tiny"):
    p.add_argument("--config", help="INI run config; overrides the preset")
    p.add_argument("--preset", choices=cfgmod.PRESETS, default=None,
                   help=f"built-in preset (default {default_preset})")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("--fusion", choices=[EARLY, INTERMEDIATE])
    p.add_argument("--conditioning", choices=[CONCAT, CROSSATTN])
    p.add_argument("--seed", type=int)
    p.set_defaults(default_preset=default_preset)


def build_parser():
    parser = _Parser(prog="ifvit", description="Early vs intermediate fusion for text-to-image diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic captioned-shapes dataset")
    _add_config_args(p)
    p.add_argument("--n", type=int, help="number of records (default train.n_train)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a dataset file")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample", help="sample images from a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", action="append", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--omega", type=float, help="guidance scale (default diffusion.omega)")
    g.add_argument("--conditional-only", action="store_true", help="skip the unconditional branch")
    p.add_argument("--n", type=int, default=1, help="images per prompt")
    p.add_argument("--out", required=True)

    p = sub.add_parser("flops", help="FLOPs and parameter counts")
    _add_config_args(p, default_preset="paper")
    p.add_argument("--all", action="store_true", help="all four fusion x conditioning settings")
    p.add_argument("--attention-matmuls", action="store_true", help="also count QK^T and AV matmuls")
    p.add_argument("--out")

    p = sub.add_parser("analyze-attn", help="attention-map singular spectra from a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", action="append", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-count", help="count-alignment metrics from a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cfg-sweep", help="guidance-scale sweep from a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--omegas", help="comma-separated scales (default eval.omegas)")
    p.add_argument("--n", type=int, help="images per scale")
    p.add_argument("--out", required=True)
    return parser


def resolve_config(args):
    """Config file or preset, then flag and ``--set`` overrides. Returns
    ``(config, explicit)`` where ``explicit`` says whether the user named a model."""
    explicit = bool(args.config or args.preset or args.fusion or args.conditioning
                    or any(item.startswith("model.") for item in args.set))
    ckpt = getattr(args, "checkpoint", None)
    saved = _checkpoint_config(ckpt) if ckpt and not (args.config or args.preset) else None
    if args.config:
        cfg = cfgmod.load(args.config)
    elif args.preset:
        cfg = cfgmod.preset(args.preset)
    elif saved is not None:
        cfg, explicit = saved, True
    else:
        cfg = cfgmod.preset(args.default_preset)
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfgmod.set_value(cfg, key.strip(), value.strip())
    if args.fusion:
        cfg.model.fusion = args.fusion
    if args.conditioning:
        cfg.model.conditioning = args.conditioning
    if args.seed is not None:
        cfg.run.seed = args.seed
    return cfg.validate(), explicit


def _parse_omegas(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ArgumentError(f"--omegas expects comma-separated numbers, got {text!r}") from None


def run(args):
    cfg, explicit = resolve_config(args)
    cmd = args.command
    if cmd == "gen-data":
        path = cmd_gen_data(cfg, args.n or cfg.train.n_train or 1000, args.out)
        print(path)
    elif cmd == "train":
        state = cmd_train(cfg, args.data, args.out, args.steps)
        last = state.losses[-1] if state.losses else float("nan")
        print(f"trained {state.step} steps, final loss {last:.4f}")
    elif cmd == "sample":
        omega = None if args.conditional_only else (cfg.diffusion.omega if args.omega is None else args.omega)
        images = cmd_sample(cfg, args.checkpoint, args.prompt, omega, args.n, args.out, explicit)
        print(f"wrote {len(images)} images")
    elif cmd == "flops":
        rows = cmd_flops(cfg, args.all, args.attention_matmuls, args.out)
        print(f"{'fusion':<14}{'conditioning':<14}{'GFLOPs':>10}{'params':>14}")
        for fusion, cond, rep, params in rows:
            print(f"{fusion:<14}{cond:<14}{rep.gflops:>10.3f}{params['total']:>14,d}")
    elif cmd == "analyze-attn":
        report = cmd_analyze_attn(cfg, args.checkpoint, args.prompt, args.out, explicit)
        for layer, kind, vals in zip(report.layers, report.kinds, report.values):
            print(f"layer {layer:2d} {kind:<5} " + " ".join(f"{v:.4g}" for v in vals))
    elif cmd == "eval-count":
        res = cmd_eval_count(cfg, args.checkpoint, args.out, explicit)
        print(f"avg_error {res.avg_error:.4f}  match_ratio {res.match_ratio:.4f}")
    elif cmd == "cfg-sweep":
        omegas = cfg.omegas if args.omegas is None else _parse_omegas(args.omegas)
        rows = cmd_cfg_sweep(cfg, args.checkpoint, omegas, args.out, args.n, explicit)
        for r in rows:
            print(f"omega {r['omega']:g}: frechet {r['frechet']:.4f} match_ratio {r['match_ratio']:.4f}")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (ConfigurationError, ArgumentError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
