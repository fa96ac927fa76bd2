"""Command line entry point: generate, train, evaluate, analyze, avg."""
import argparse
import glob
import json
import logging
import os
import sys

from ..checkpoint import save_arrays
from ..model import SpeakerModel
from ..scoring import read_trials, write_metrics
from .analysis import analyze, read_samples
from .config import dataset_config, model_config, read_config, training_config
from .data import generate_dataset, load_dataset, save_dataset
from .evaluate import RHO_OPTIONS, evaluate, metrics_record
from .train import average_checkpoint_files, train

log = logging.getLogger("uaspk")


def cmd_generate(args):
    sections = read_config(args.config)
    ds = generate_dataset(dataset_config(sections["dataset"]))
    save_dataset(ds, args.out)
    print(f"{len(ds.train)} train / {len(ds.eval)} eval utterances, {len(ds.trials)} trials -> {args.out}")


def cmd_train(args):
    sections = read_config(args.config)
    ds = load_dataset(args.data)
    n_classes = len({u.speaker for u in ds.train})
    mcfg = model_config(sections["model"], n_classes, ds.cfg.feature_dim)
    tcfg = training_config(sections["training"])
    result = train(ds, tcfg, mcfg, out_dir=args.out)
    last = result.report.epochs[-1]
    print(f"trained {tcfg.epochs} epochs: loss {last['loss_total']:.4f}, acc {last['train_acc']:.3f} -> {args.out}")


def cmd_evaluate(args):
    model, _ = SpeakerModel.load(args.model)
    trials = read_trials(args.trials)
    ds = load_dataset(args.data or os.path.dirname(os.path.abspath(args.trials)))
    rhos = list(RHO_OPTIONS) if args.rho == ["all"] else args.rho
    det_dir = os.path.splitext(args.out)[0] + "_det"
    results = evaluate(model, ds.utterances, trials, rhos, out_dir=det_dir)
    record = metrics_record(results)
    write_metrics(args.out, record)
    for k, v in record.items():
        print(f"rho={k} ({v['rho']:.4g}): EER {v['eer']:.4f}  minDCF {v['min_dcf']:.4f}")


def cmd_analyze(args):
    model, _ = SpeakerModel.load(args.model)
    ds = load_dataset(args.data)
    samples_path = os.path.join(os.path.dirname(os.path.abspath(args.model)), "telemetry_samples.csv")
    samples = read_samples(samples_path) if os.path.exists(samples_path) else None
    summary = analyze(model, ds, args.out, samples=samples)
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for k, v in summary.items():
        print(f"{k}: {v:.4f}" if v is not None else f"{k}: n/a")


def cmd_avg(args):
    src = args.in_dir
    if os.path.isdir(os.path.join(src, "checkpoints")):
        src = os.path.join(src, "checkpoints")
    paths = sorted(glob.glob(os.path.join(src, "epoch_*.json")))
    if len(paths) < args.last:
        raise SystemExit(f"need {args.last} checkpoints in {src}, found {len(paths)}")
    arrays, meta = average_checkpoint_files(paths[-args.last:])
    meta = {**meta, "averaged": [os.path.basename(p) for p in paths[-args.last:]]}
    save_arrays(args.out, arrays, meta)
    print(f"averaged {args.last} checkpoints -> {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="uaspk", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a trial list")
    e.add_argument("--model", required=True, help="checkpoint stem")
    e.add_argument("--trials", required=True)
    e.add_argument("--rho", nargs="+", default=["0"], choices=list(RHO_OPTIONS) + ["all"])
    e.add_argument("--data", help="dataset directory (default: directory of the trial list)")
    e.add_argument("--out", required=True, help="metrics JSON")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="uncertainty analyses as CSV")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("avg", help="average the last k epoch checkpoints")
    v.add_argument("--last", type=int, required=True)
    v.add_argument("--in", dest="in_dir", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_avg)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (KeyError, ValueError, FloatingPointError, FileNotFoundError) as err:
        print(f"uaspk {args.command}: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
