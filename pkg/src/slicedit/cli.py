"""Command-line entry point.

    slicedit edit --in frames/ --out out/ --src "a man" --tar "a robot"
    slicedit invert --in video.stv --save-record rec.stw
    slicedit metrics --in frames/ --edit out/
    slicedit experiment --out report/
    slicedit selfcheck

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .formats import FormatError, read_video, write_video
from .pipeline import ConfigError, EditConfig, InputError, edit, encode, invert, invert_ddim
from .schedule import ScheduleError
from .stvolume import VolumeError

log = logging.getLogger("slicedit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", metavar="FILE", help="'key = value' config file")
    g.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, default=0, help="torch threads, 0 = auto")
    g.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    g.add_argument("--ddim", action="store_true", help="deterministic DDIM inversion and sampling")
    g.add_argument("--no-slices", action="store_true", help="frame branch only (gamma = 1)")
    g.add_argument("--no-inject", action="store_true", help="no attention injection")
    g.add_argument("--xt-slices", action="store_true", help="add the x-t slice branch")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slicedit", description="Zero-shot video editing with spatiotemporal slices")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--print-config", action="store_true", help="print the default config and exit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("edit", help="edit a video")
    p.add_argument("--in", dest="input", required=True, help="frame directory or STV1 file")
    p.add_argument("--out", required=True)
    p.add_argument("--src", required=True, help="source prompt")
    p.add_argument("--tar", required=True, help="target prompt")
    p.add_argument("--save-record", metavar="PATH", help="also write the inversion record")
    _config_flags(p)

    p = sub.add_parser("invert", help="invert a video and save the record")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--save-record", "--out", dest="save_record", required=True, metavar="PATH")
    _config_flags(p)

    p = sub.add_parser("metrics", help="flow error and embedding consistency")
    p.add_argument("--in", dest="input", required=True, help="source video")
    p.add_argument("--edit", required=True, help="edited video")
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--report", metavar="DIR", help="write per-pair CSV and figures here")

    p = sub.add_parser("experiment", help="noise-prediction MSE on frames, slices and permuted frames")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--size", type=int, default=16, help="frames, height and width of each synthetic video")
    p.add_argument("--rho-t", type=float, default=0.9)
    p.add_argument("--rho-s", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("selfcheck", help="run the invariant checks")
    p.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args) -> EditConfig:
    """defaults < config file < --set < dedicated flags"""
    cfg = EditConfig()
    if getattr(args, "config", None):
        cfg = EditConfig.from_file(args.config, cfg)
    pairs = {}
    for item in getattr(args, "overrides", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    cfg = cfg.with_overrides(pairs)
    flags = {}
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    if getattr(args, "ddim", False):
        flags["eta"] = 0.0
    if getattr(args, "no_slices", False):
        flags["gamma"] = 1.0
    if getattr(args, "no_inject", False):
        flags["inject_fraction"] = 0.0
    if getattr(args, "xt_slices", False):
        flags["xt_slices"] = True
    return cfg.replace(**flags) if flags else cfg


def _progress(verbose: bool):
    if not verbose:
        return None
    t0 = time.time()

    def report(stage, tau):
        print(f"{stage} step {tau} ({time.time() - t0:.1f}s)", file=sys.stderr)

    return report


def _set_threads(n: int) -> None:
    if n > 0:
        import torch

        torch.set_num_threads(n)


def cmd_edit(args, cfg: EditConfig) -> int:
    vol = read_video(args.input)
    out = edit(vol, args.src, args.tar, cfg, progress=_progress(args.verbose > 1), record_path=args.save_record)
    write_video(args.out, out, like=args.input)
    log.info("wrote %d frames to %s", out.n_frames, args.out)
    return 0


def cmd_invert(args, cfg: EditConfig) -> int:
    from .denoisers import embed_prompt

    vol = read_video(args.input)
    latent = encode(vol.data, cfg.codec)
    run = invert_ddim if cfg.eta == 0.0 else invert
    record = run(latent, embed_prompt(args.src), cfg, progress=_progress(args.verbose > 1))
    record.save(args.save_record)
    log.info("wrote inversion record to %s", args.save_record)
    return 0


def cmd_metrics(args) -> int:
    from .metrics import embed_consistency, flow_error

    src, edt = read_video(args.input), read_video(args.edit)
    per_pair: list[float] = []
    fe = flow_error(src, edt, alpha=args.alpha, iters=args.iters, per_pair=per_pair)
    ec = embed_consistency(edt)
    print(f"{fe:.6f},{ec:.6f}")
    if args.report:
        from .plotting import plot_flow_errors, plot_slices

        out = Path(args.report)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "flow_pairs.csv", "w", encoding="utf-8") as fh:
            fh.write("pair,flow_error\n")
            for i, e in enumerate(per_pair):
                fh.write(f"{i},{e!r}\n")
        plot_flow_errors(per_pair, out / "flow_pairs.png")
        plot_slices(src.data, edt.data, out / "slices.png")
    return 0


def cmd_experiment(args) -> int:
    from .denoisers.analytic import AnalyticDenoiser, GaussianPrior
    from .experiments import default_alphas, slice_mse_experiment, synthetic_videos
    from .plotting import plot_mse_report

    n = args.size
    videos = synthetic_videos(args.videos, n, n, n, 1, args.rho_t, args.rho_s, args.seed)
    denoiser = AnalyticDenoiser(GaussianPrior.ar1(args.rho_s, args.rho_s))
    alphas = default_alphas(EditConfig().schedule())
    report = slice_mse_experiment(videos, denoiser, alphas, args.samples, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "mse_report.csv")
    plot_mse_report(report, out / "mse_report.png")
    for ab in report.alphas:
        cells = ",".join(f"{k}={report.mse(k, ab):.4f}" for k in ("frame", "yt_slice", "permuted"))
        print(f"alpha_bar={ab:.4f},{cells}")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    results = run_selfcheck(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 2


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        if args.command in ("edit", "invert"):
            cfg = resolve_config(args)
            if args.print_config:
                sys.stdout.write(cfg.to_text())
                return 0
            _set_threads(args.threads)
            return cmd_edit(args, cfg) if args.command == "edit" else cmd_invert(args, cfg)
        if args.print_config:
            sys.stdout.write(EditConfig().to_text())
            return 0
        if args.command is None:
            raise UsageError("slicedit: a subcommand is required (edit, invert, metrics, experiment, selfcheck)")
        return {"metrics": cmd_metrics, "experiment": cmd_experiment, "selfcheck": cmd_selfcheck}[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"slicedit: config error: {e}", file=sys.stderr)
        return 1
    except (FormatError, InputError, VolumeError, ScheduleError, OSError, ValueError) as e:
        print(f"slicedit: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
