"""Command-line interface: synth, train, eval, infer, profile, gradcheck, ablate."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PRESETS, load_config
from .data import DegradationSpec, KINDS, load_image, read_dataset, save_image, synth_pairs, write_dataset
from .errors import ConfigError, ContractError, FormatError, TrainingError
from .grid import GridConfig, GridFormer
from .metrics import psnr, ssim
from .serialization import checkpoint_load

log = logging.getLogger("gridformer")

REPORT_HEADER = "id,psnr_rgb,psnr_y,ssim"

# Reference figures from the published ablations (params in M, MACs in G at
# 256x256).  Printed next to our counts; never compared against.
REFERENCE_CESA = {
    (False, False, False): (38.08, 322.26),
    (True, False, False): (34.91, 237.79),
    (True, True, False): (26.88, 227.65),
    (True, True, True): (30.12, 251.35),
}
REFERENCE_RDTB = {
    (False, False, False): (27.99, 253.57),
    (True, False, False): (32.78, 284.87),
    (True, True, False): (30.12, 251.35),
    (True, True, True): (30.12, 251.35),
}
REFERENCE_GRID = {
    (1, 2): (0.61, 38.47),
    (1, 4): (1.01, 64.01),
    (1, 6): (1.41, 89.54),
    (2, 3): (2.64, 80.48),
    (2, 5): (4.51, 129.52),
    (2, 6): (5.37, 153.01),
    (3, 4): (19.09, 166.01),
    (3, 5): (24.99, 210.72),
    (3, 6): (30.12, 251.35),
    (4, 6): (150.86, 410.09),
}
ABLATE_HEADER = "table,variant,params,macs,ref_params_m,ref_macs_g"


def _flag(on: bool) -> str:
    return "+" if on else "-"


def cesa_variants(base: GridConfig) -> list[tuple[str, GridConfig, tuple]]:
    out = []
    for key in REFERENCE_CESA:
        fs, cs, le = key
        name = f"FS{_flag(fs)} CS{_flag(cs)} LE{_flag(le)}"
        cfg = base.replace(use_feature_sampling=fs, use_channel_split=cs, use_local_enhancement=le)
        out.append((name, cfg, REFERENCE_CESA[key]))
    return out


def rdtb_variants(base: GridConfig) -> list[tuple[str, GridConfig, tuple]]:
    out = []
    for key in REFERENCE_RDTB:
        dc, lf, lsc = key
        name = f"DC{_flag(dc)} LF{_flag(lf)} LSC{_flag(lsc)}"
        cfg = base.replace(use_dense=dc, use_local_fusion=lf, use_local_skip=lsc)
        out.append((name, cfg, REFERENCE_RDTB[key]))
    return out


def grid_variants(base: GridConfig) -> list[tuple[str, GridConfig, tuple]]:
    """Row/column sweep.  ``c`` counts head + fusion columns, tail excluded."""
    out = []
    strides = tuple(base.sampler_strides) + (base.sampler_strides[-1],) * 4
    for (r, c), ref in REFERENCE_GRID.items():
        cfg = base.replace(rows=r, fusion_columns=c - 1, sampler_strides=strides[:r])
        out.append((f"r={r} c={c}", cfg, ref))
    return out


ABLATIONS = {"cesa": cesa_variants, "rdtb": rdtb_variants, "grid": grid_variants}


def ablation_rows(base: GridConfig, tables: list[str], size: int) -> list[str]:
    from .profiler import profile

    lines = [ABLATE_HEADER]
    for table in tables:
        for name, cfg, (pp, pm) in ABLATIONS[table](base):
            prof = profile(cfg, size, size)
            lines.append(f"{table},{name},{prof.params},{prof.macs},{pp},{pm}")
    return lines


def evaluate_pairs(model: GridFormer | None, ds) -> list[str]:
    """Report lines for every pair; with no model the degraded input is scored."""
    lines = [REPORT_HEADER]
    scores = []
    for key, deg, clean in zip(ds.ids, ds.degraded, ds.clean):
        out = deg if model is None else np.clip(model.restore(deg), 0.0, 1.0)
        row = (psnr(out, clean), psnr(out, clean, "y"), ssim(out, clean))
        scores.append(row)
        lines.append(f"{key},{row[0]:.4f},{row[1]:.4f},{row[2]:.6f}")
    mean = np.mean(scores, axis=0)
    lines.append(f"mean,{mean[0]:.4f},{mean[1]:.4f},{mean[2]:.6f}")
    return lines


def _emit(lines: list[str], out: str | None, name: str) -> None:
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text)


def _configs(args) -> dict:
    cfgs = load_config(args.config)
    if args.seed is not None:
        cfgs["grid"] = cfgs["grid"].replace(seed=args.seed)
        cfgs["train"] = _replace(cfgs["train"], seed=args.seed)
    if args.deterministic is not None:
        cfgs["train"] = _replace(cfgs["train"], deterministic=args.deterministic)
    return cfgs


def _replace(obj, **changes):
    import dataclasses

    return dataclasses.replace(obj, **changes)


def _load_model(path: str | None) -> GridFormer | None:
    return checkpoint_load(path) if path else None


def cmd_synth(args) -> int:
    spec = DegradationSpec(args.kind, seed=args.seed if args.seed is not None else 0)
    ds = synth_pairs(args.count, spec, args.size, args.prefix)
    out = args.out or "data"
    write_dataset(ds, out)
    print(f"wrote {len(ds)} {args.kind} pairs ({args.size}x{args.size}) to {out}")
    return 0


def cmd_train(args) -> int:
    from .losses import LossConfig
    from .train import train_loop

    cfgs = _configs(args)
    train_cfg = cfgs["train"]
    changes = {}
    for flag, key in (("steps", "total_steps"), ("batch_size", "batch_size"), ("patch_size", "patch_size"),
                      ("lr", "lr_start"), ("checkpoint_every", "checkpoint_every")):
        value = getattr(args, flag)
        if value is not None:
            changes[key] = value
    train_cfg = _replace(train_cfg, **changes)
    loss_cfg = cfgs["loss"] if args.alpha is None else LossConfig(
        cfgs["loss"].epsilon, args.alpha, cfgs["loss"].charbonnier_mode, cfgs["loss"].extractor_seed
    )
    ds = read_dataset(args.data)
    model = GridFormer(cfgs["grid"])
    if args.init:
        checkpoint_load(args.init, into=model)
    out = args.out or "run"
    result = train_loop(model, ds, train_cfg, loss_cfg, out)
    last = result.trace[-1]
    print(f"trained {len(result.trace)} steps; final loss {last.loss:.6g}; wrote {out}/final.gfck and {out}/trace.csv")
    return 0


def cmd_eval(args) -> int:
    ds = read_dataset(args.data)
    _emit(evaluate_pairs(_load_model(args.checkpoint), ds), args.out, "report.csv")
    return 0


def cmd_infer(args) -> int:
    model = _load_model(args.checkpoint)
    src = Path(args.input)
    paths = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")) if src.is_dir() else [src]
    if not paths:
        raise ContractError(f"no images found in {src}")
    out = Path(args.out or "restored")
    out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        img = load_image(p, np.float64)
        restored = img if model is None else np.clip(model.restore(img.astype(model.config.np_dtype)), 0.0, 1.0)
        save_image(restored, out / (p.stem + ".png"))
    print(f"restored {len(paths)} image(s) into {out}")
    return 0


def cmd_profile(args) -> int:
    from .profiler import profile

    cfg = _configs(args)["grid"]
    prof = profile(cfg, args.size, args.size)
    widths = "/".join(str(cfg.width(i)) for i in range(cfg.rows))
    lines = [
        f"config: rows={cfg.rows} fusion_columns={cfg.fusion_columns} C={cfg.base_channels} G={cfg.growth}",
        f"widths: {widths}",
        f"input: {args.size}x{args.size}",
        f"params: {prof.params} ({prof.params / 1e6:.2f}M)",
        f"macs: {prof.macs} ({prof.macs / 1e9:.2f}G)",
        "",
    ] + prof.lines(args.depth)
    _emit(lines, args.out, "profile.csv")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    seed = args.seed if args.seed is not None else 0
    report = run_gradcheck(seed=seed, size=args.size)
    status = "PASS" if report.passed else "FAIL"
    print(f"gradcheck {status}: {report.summary()}")
    for c in report.failures():
        print(f"  {c.path}: rel err {c.max_rel_err:.3g}")
    return 0 if report.passed else 1


def cmd_ablate(args) -> int:
    base = load_config(args.config or "gridformer")["grid"]
    tables = list(ABLATIONS) if args.table == "all" else [args.table]
    _emit(ablation_rows(base, tables, args.size), args.out, "ablation.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"preset ({', '.join(PRESETS)}) or key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gridformer", description="Grid-structured restoration transformer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic paired dataset")
    p.add_argument("--kind", choices=KINDS, default="haze")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--prefix", default="img")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--init", help="checkpoint to start from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM report over a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="model checkpoint; omit to score the degraded inputs")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="restore an image or a directory of images")
    p.add_argument("input")
    p.add_argument("--checkpoint")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("profile", parents=[common], help="parameter and MAC counts")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--depth", type=int, default=2)
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check on the micro config")
    p.add_argument("--size", type=int, default=16)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common], help="parameter/MAC sweeps over ablation variants")
    p.add_argument("--table", choices=["cesa", "rdtb", "grid", "all"], default="all")
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ContractError, FormatError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
