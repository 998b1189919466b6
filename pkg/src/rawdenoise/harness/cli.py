"""Command line: ``rawdenoise <command> [options]``.

Exit status is 0 on success, 1 when a validation fails and 2 on usage or input errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..pipeline import ConfigError, PipelineConfig, read_config_file

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("rawdenoise")

# config keys that get a dedicated spelling or are set by a subcommand flag
_SPECIAL = {"iterative", "seed"}


def _config_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("pipeline settings (mirror config-file keys)")
    g.add_argument("--config", metavar="FILE", default=argparse.SUPPRESS, help="key = value config file")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    for f in dataclasses.fields(PipelineConfig):
        if f.name in _SPECIAL:
            continue
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, dest=f"cfg_{f.name}", metavar="VALUE", default=argparse.SUPPRESS)
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _config_flags(common)
    parser = _Parser(prog="rawdenoise", description="Blind raw-image denoising toolkit.", parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("estimate", parents=[common], help="estimate noise parameters of a raw frame")
    p.add_argument("input", help="noisy .raw16 frame (with JSON sidecar)")
    p.add_argument("--json", metavar="FILE", help="write the report here instead of stdout")
    p.add_argument("--out-dir", metavar="DIR", help="also write sample CSVs, masks and plots")

    p = sub.add_parser("denoise", parents=[common], help="blind two-stage denoising")
    p.add_argument("input")
    p.add_argument("--out", required=True, help="output .raw16 path")
    p.add_argument("--iterative", action="store_true", help="use the iterative final denoise")
    p.add_argument("--report", metavar="FILE", help="JSON report path (default: next to the output)")
    p.add_argument("--preview", metavar="PNG", help="also write an sRGB preview")

    p = sub.add_parser("synth", parents=[common], help="build a noisy/clean suite from clean images")
    p.add_argument("clean_dir")
    p.add_argument("--out", required=True, help="suite directory")
    p.add_argument("--procedural", type=int, metavar="N", default=0,
                   help="first write N procedural scenes into CLEAN_DIR")
    p.add_argument("--kind", default="natural", choices=["natural", "mixed", "flat"])
    p.add_argument("--size", type=int, default=512)

    p = sub.add_parser("validate-vst", parents=[common], help="Monte Carlo check of the bias-corrected transform")
    p.add_argument("--camera", default="phone")
    p.add_argument("--iso", type=int, default=3200)
    p.add_argument("--n", type=int, default=1_000_000, help="draws per signal level")
    p.add_argument("--chi-min", type=float, default=1.0)
    p.add_argument("--chi-max", type=float, default=500.0)
    p.add_argument("--points", type=int, default=40)
    p.add_argument("--out-dir", default="validate-vst")

    p = sub.add_parser("validate-estimation", parents=[common], help="coarse/fine estimation accuracy on a suite")
    p.add_argument("suite", help="suite directory or manifest.csv")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--out-dir", default="validate-estimation")
    p.add_argument("--psnr-gap", action="store_true", help="also compare blind and true-parameter PSNR")

    p = sub.add_parser("metrics", parents=[common], help="PSNR/SSIM of a frame against a reference")
    p.add_argument("image")
    p.add_argument("reference")

    p = sub.add_parser("lut", parents=[common], help="build or inspect the bias lookup table cache")
    p.add_argument("--rebuild", action="store_true")
    p.add_argument("--export", metavar="FILE", help="copy the table to FILE")
    p.add_argument("--plot", metavar="PNG", help="plot the bias surface")

    p = sub.add_parser("preview", parents=[common], help="8-bit sRGB preview of a raw frame")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    return parser


def config_from_args(args) -> PipelineConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key, val in vars(args).items():
        if key.startswith("cfg_"):
            values[key[4:]] = val
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "iterative", False):
        values["iterative"] = True
    return PipelineConfig.from_mapping(values)


def _write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


# ------------------------------------------------------------------ commands


def cmd_estimate(args, cfg) -> int:
    from ..cne import run_cne
    from ..rawmodel import load_raw
    from . import plotting
    from .validate import write_csv

    report, _ = run_cne(load_raw(args.input), config=cfg)
    text = report.to_json()
    if args.json:
        Path(args.json).write_text(text + "\n")
    else:
        print(text)
    if args.out_dir:
        from PIL import Image

        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for stage, params, samples, mask in (("coarse", report.coarse, report.coarse_samples, report.coarse_mask),
                                             ("fine", report.fine, report.fine_samples, report.fine_mask)):
            samples.to_csv(out / f"{stage}_samples.csv")
            plotting.plot_samples(samples, params, out / f"{stage}_samples.png", f"{stage} stage")
            tiles = np.concatenate(list(mask.mask.astype(np.uint8) * 255), axis=1)
            Image.fromarray(tiles).save(out / f"{stage}_mask.png")
        write_csv([{"stage": s, "quantile": q, "candidate_std": c, "score": sc}
                   for s, m in (("coarse", report.coarse_mask), ("fine", report.fine_mask))
                   for q, c, sc in zip(np.arange(1, 21) / 20, m.candidates, m.scores)], out / "ats_scores.csv")
    return EXIT_OK


def cmd_denoise(args, cfg) -> int:
    from ..pipeline import run_yond, run_yond_p
    from ..rawmodel import preview_isp, save_png, save_raw, load_raw

    noisy = load_raw(args.input)
    result = (run_yond_p if cfg.iterative else run_yond)(noisy, cfg)
    out = save_raw(result.denoised, args.out)
    report_path = Path(args.report) if args.report else out.with_name(out.name.removesuffix(".raw16") + ".report.json")
    _write_json({"input": args.input, "output": str(out), **result.as_dict(cfg)}, report_path)
    if args.preview:
        save_png(preview_isp(result.denoised), args.preview)
    params = result.report.params
    print(f"alpha={params.alpha:.4g} sigma={params.sigma:.4g} multiplier={cfg.sigma_mult} -> {out}")
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    from .synth import make_synthetic_suite, write_procedural_scenes

    if args.procedural:
        write_procedural_scenes(args.clean_dir, args.procedural, cfg.seed, args.size, args.kind)
    manifest = make_synthetic_suite(args.clean_dir, seed=cfg.seed, out_dir=args.out)
    print(manifest)
    return EXIT_OK


def cmd_validate_vst(args, cfg) -> int:
    from ..vst import get_lut
    from .synth import sensor_setting
    from .validate import summarize, validate_vst, vst_signal_grid

    params = cfg.noise_override or sensor_setting(args.camera, args.iso).params
    grid = vst_signal_grid(args.chi_min, args.chi_max, args.points)
    records = validate_vst(params, grid, args.n, cfg.seed, get_lut(cfg.lut_chi_grid, cfg.lut_sigma_grid),
                           out_dir=args.out_dir)
    print(summarize(records))
    return EXIT_OK if all(r.passed for r in records) else EXIT_FAIL


def cmd_validate_estimation(args, cfg) -> int:
    from .validate import blind_vs_oracle, validate_estimation

    table = validate_estimation(args.suite, args.trials, cfg.seed, cfg, out_dir=args.out_dir)
    print(table.summary())
    ok = table.passed
    if args.psnr_gap:
        gap = blind_vs_oracle(args.suite, cfg, out_dir=args.out_dir)
        print(gap.summary())
        ok = ok and gap.passed
    return EXIT_OK if ok else EXIT_FAIL


def cmd_metrics(args, cfg) -> int:
    from ..rawmodel import load_raw
    from .metrics import QualityScore

    a, b = load_raw(args.image), load_raw(args.reference)
    print(json.dumps(QualityScore.of(a, b).as_dict()))
    return EXIT_OK


def cmd_lut(args, cfg) -> int:
    import shutil

    from ..vst import clear_lut_memo, get_lut, lut_cache_path

    path = lut_cache_path(cfg.lut_chi_grid, cfg.lut_sigma_grid)
    if args.rebuild and path.exists():
        path.unlink()
        clear_lut_memo()
    lut = get_lut(cfg.lut_chi_grid, cfg.lut_sigma_grid, use_disk=True)
    info = {"path": str(path), "exists": path.exists(), "version": lut.version,
            "chi_grid": cfg.lut_chi_grid, "sigma_grid": cfg.lut_sigma_grid,
            "min": float(lut.values.min()), "max": float(lut.values.max())}
    print(json.dumps(info, indent=2))
    if args.export:
        if path.exists():
            shutil.copyfile(path, args.export)
        else:
            lut.save(args.export)
    if args.plot:
        from . import plotting

        plotting.plot_lut(lut, args.plot)
    return EXIT_OK


def cmd_preview(args, cfg) -> int:
    from ..rawmodel import load_raw, preview_isp, save_png

    save_png(preview_isp(load_raw(args.input)), args.out)
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "denoise": cmd_denoise, "synth": cmd_synth,
            "validate-vst": cmd_validate_vst, "validate-estimation": cmd_validate_estimation,
            "metrics": cmd_metrics, "lut": cmd_lut, "preview": cmd_preview}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"rawdenoise: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
