"""Command-line surface.

    dcnet [--seed S] [--threads N] <command> ...

Commands: gen-phantom, fit-sh, metrics, train, predict, evaluate.  Global
options come before the command.  All randomness funnels through the
seed; the thread count only distributes deterministic work, so results
are identical for any value.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import backends, phantom, pipeline, volio
from .network import NetworkConfig
from .sh import num_coeffs
from .training import TrainingConfig, train


def _require(path, kind="file"):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{kind} not found: {p}")
    return p


def _cmd_gen_phantom(args):
    if (args.spec is None) == (args.scenario is None):
        raise ValueError("give exactly one of --spec or --scenario")
    if args.spec is not None:
        spec = phantom.PhantomSpec.from_json(_require(args.spec, "spec").read_text())
    else:
        factory = {"a": phantom.scenario_a, "b": phantom.scenario_b, "null": phantom.null_spec}
        spec = factory[args.scenario]()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    manifest = phantom.gen_cohort(spec, args.out)
    print(f"wrote {len(manifest.subjects)} subjects to {args.out}")
    return 0


def _cmd_fit_sh(args):
    volume = volio.read_volume(_require(args.infile, "volume"))
    mask = volio.read_mask(_require(args.mask, "mask"))
    coeffs = volio.fit_sh_volume(volume, mask, args.nmax, args.reg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    p = num_coeffs(args.nmax)
    volio.write_volume(out_dir / "coeffs.dcb", coeffs, volume.b_value, np.zeros((p, 3)))
    print(f"wrote {out_dir / 'coeffs.dcb'} ({p} channels)")
    return 0


def _cmd_metrics(args):
    from .metrics import METRIC_NAMES, metric_table

    volume = volio.read_volume(_require(args.infile, "volume"))
    mask = volio.read_mask(_require(args.mask, "mask"))
    table = metric_table(volume.data[mask], volume.scheme)
    coords = np.argwhere(mask)

    def emit(fh):
        writer = csv.writer(pipeline._TextWrap(fh))
        writer.writerow(["x", "y", "z"] + list(METRIC_NAMES))
        for (x, y, z), row in zip(coords, table):
            writer.writerow([x, y, z] + [f"{v:.10e}" for v in row])

    volio._atomic_write(args.out, emit)
    print(f"wrote {args.out} ({len(coords)} voxels)")
    return 0


def _load_eval_config(args):
    if args.config is not None:
        return pipeline.EvalConfig.from_json(_require(args.config, "config").read_text(), seed=args.seed)
    cfg = pipeline.EvalConfig()
    if args.seed is not None:
        cfg = replace(
            cfg,
            seed=args.seed,
            training=replace(cfg.training, seed=args.seed),
            network=replace(cfg.network, seed=args.seed),
        )
    return cfg


def _cmd_train(args):
    cfg = _load_eval_config(args)
    manifest = volio.read_manifest(_require(args.manifest, "manifest"))
    subjects = pipeline.load_cohort(manifest, cfg.network, cfg.sh_reg)
    dcset = pipeline.build_dcset(subjects, cfg.max_dcs_per_subject, cfg.seed)
    writer = csv.writer(sys.stdout)
    writer.writerow(["epoch", "mean_loss", "train_pa", "valid_pa"])
    params, history = train(
        dcset, cfg.network, cfg.training, log=lambda row: writer.writerow(list(row))
    )
    volio.write_model(
        args.out, params, cfg.seed, {"roi": args.roi, "epochs": cfg.training.epochs}
    )
    with open(str(args.out) + ".history.csv", "w", newline="") as fh:
        history.write_csv(fh)
    print(f"wrote {args.out}")
    return 0


def _cmd_predict(args):
    params, _ = volio.read_model(_require(args.model, "model"))
    volume = volio.read_volume(_require(args.infile, "volume"))
    mask = volio.read_mask(_require(args.mask, "mask"))
    scores = pipeline.predict_scores_volume(params, volume, mask)
    written = volio.export_psic(args.out, scores, mask)
    print(f"wrote {len(written)} files ({written[0]})")
    return 0


def _cmd_evaluate(args):
    cfg = _load_eval_config(args)
    result = pipeline.evaluate_manifest(
        _require(args.manifest, "manifest"),
        cfg,
        args.out,
        artifacts_dir=args.artifacts,
    )
    print(f"wrote {args.out}")
    dnn = result.table["auc_subject"]["DNN"]
    print(f"DNN subject AUC {dnn:.3f}, validation PA {result.table['pa_dc_valid']['DNN']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcnet", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="override all configured seeds")
    parser.add_argument("--threads", type=int, default=None, help="worker thread cap (numba backend)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="generate a synthetic cohort")
    p.add_argument("--spec", default=None, help="PhantomSpec JSON file")
    p.add_argument("--scenario", choices=["a", "b", "null"], default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_phantom)

    p = sub.add_parser("fit-sh", help="fit SH coefficients over a masked volume")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--nmax", type=int, default=6)
    p.add_argument("--reg", type=float, default=0.006)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_fit_sh)

    p = sub.add_parser("metrics", help="per-voxel diffusion metrics as CSV")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_metrics)

    p = sub.add_parser("train", help="train the scoring network on a cohort")
    p.add_argument("--manifest", required=True)
    p.add_argument("--roi", default="roi")
    p.add_argument("--config", default=None, help="EvalConfig JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("predict", help="score one volume with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("evaluate", help="full comparison report on a cohort")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None, help="EvalConfig JSON")
    p.add_argument("--roi", default="roi")
    p.add_argument("--artifacts", default=None, help="directory for model/history/score maps")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        backends.set_num_threads(args.threads)
    try:
        return args.fn(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
