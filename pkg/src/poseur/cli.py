"""``poseur`` command line: train, eval, infer, gradcheck, bench, synth."""
from __future__ import annotations

import argparse
import json
import os
import sys

from .config import load_config
from .errors import PoseurError


def _write_json(path, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve(args, **extra):
    overrides = {"seed": args.seed, "out_dir": args.out, **extra}
    return load_config(args.config, **overrides)


def _samples(config, data_dir):
    from .training import load_scenes, prepare_samples

    return prepare_samples(load_scenes(config, data_dir), config.input_size, config.bbox_expand)


def _plot_loss(path, history):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([r["step"] for r in history], [r["loss"] for r in history], "o-", ms=3)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_train(args):
    from .training import evaluate, train

    config = _resolve(args, data_dir=args.data, steps=args.steps)
    samples = _samples(config, config.data_dir)
    model, history = train(config, samples, out_dir=config.out_dir)
    report, _ = evaluate(model, samples, seed=config.seed, score_a=config.score_a)
    report["split"] = "train"
    _write_json(os.path.join(config.out_dir, "report.json"), report)
    _plot_loss(os.path.join(config.out_dir, "loss.svg"), history)
    print(f"trained {config.steps} steps; train mean L1 {report['mean_l1_px']:.3f} px, AP {report['mean_ap']:.3f}")
    return 0


def _load(args):
    from .training import load_model

    model, stored = load_model(args.checkpoint)
    if args.config is not None or args.seed is not None:
        # explicit settings must describe the same network as the checkpoint
        config = _resolve(args)
        if config.model_config() != stored.model_config():
            from .errors import FormatError

            raise FormatError("config does not match the architecture stored in the checkpoint")
    else:
        config = stored.replace(out_dir=args.out) if args.out else stored
    return model, config


def _eval_dir(args, config):
    return args.data or config.val_dir or config.data_dir


def cmd_eval(args):
    from .evaluation import write_jsonl
    from .training import evaluate

    model, config = _load(args)
    samples = _samples(config, _eval_dir(args, config))
    report, detections = evaluate(model, samples, seed=config.seed, score_a=args.score_a, rescore=not args.no_rescore)
    report["checkpoint"] = os.path.abspath(args.checkpoint)
    out = args.out or config.out_dir
    _write_json(os.path.join(out, "report.json"), report)
    write_jsonl(os.path.join(out, "predictions.jsonl"), detections)
    print(f"mean AP {report['mean_ap']:.4f} (rescore={'on' if report['rescore'] else 'off'}), PCK {report['pck']:.4f}")
    return 0


def cmd_infer(args):
    from .evaluation import write_jsonl
    from .training import predict_instances

    model, config = _load(args)
    samples = _samples(config, _eval_dir(args, config))
    detections = predict_instances(model, samples, seed=config.seed, score_a=args.score_a)
    out = args.out or config.out_dir
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "predictions.jsonl")
    write_jsonl(path, detections)
    print(f"wrote {len(detections)} predictions to {path}")
    return 0


def cmd_gradcheck(args):
    from .gradsuite import TOLERANCE, run_suite

    seed = 0 if args.seed is None else args.seed
    results = run_suite(seed=seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:34s} max rel err {r.error:.3e}")
    failed = [r.name for r in results if not r.passed]
    if args.out:
        payload = {
            "tolerance": TOLERANCE,
            "seed": seed,
            "checks": [{"name": r.name, "error": float(r.error), "passed": bool(r.passed)} for r in results],
        }
        _write_json(os.path.join(args.out, "report.json"), payload)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_bench(args):
    from .bench import run_bench, write_report

    seed = 0 if args.seed is None else args.seed
    rows = run_bench(seed=seed, repeats=args.repeats)
    out = args.out or "bench"
    write_report(out, rows)
    for r in rows:
        print(
            f"{r['case']:22s} ratio {r['ratio_measured']:.5f} (analytic {r['ratio_analytic']:.5f})"
            f"  emsda {r['time_emsda_ms']:.2f} ms  msda {r['time_msda_ms']:.2f} ms  diff {r['max_rel_diff']:.1e}"
        )
    return 0


def cmd_synth(args):
    from .synth import write_dataset

    config = _resolve(args, num_scenes=args.n)
    out = args.out or "data"
    manifest = write_dataset(out, config.seed, config.num_scenes, config.synth_config())
    print(f"wrote {manifest['count']} scenes to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="poseur", description="Keypoint regression with deformable query decoding.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML run configuration (flat keys)")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed, overrides the config")
        p.add_argument("--out", help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train a model")
    p.add_argument("--data", help="dataset directory written by `synth` (default: generate from config)")
    p.add_argument("--steps", type=int, help="override the number of optimizer steps")

    for name, func, text in (("eval", cmd_eval, "evaluate a checkpoint"), ("infer", cmd_infer, "write predictions")):
        p = add(name, func, text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="dataset directory (default: config val_dir, then data_dir, then generated)")
        p.add_argument("--score-a", type=float, default=0.2, help="half-width of the keypoint score interval")
        if name == "eval":
            p.add_argument("--no-rescore", action="store_true", help="rank instances by box score only")

    add("gradcheck", cmd_gradcheck, "run the finite-difference gradient suite")
    p = add("bench", cmd_bench, "compare the two deformable attention routes")
    p.add_argument("--repeats", type=int, default=3)
    p = add("synth", cmd_synth, "write a synthetic dataset")
    p.add_argument("-n", type=int, help="number of scenes (default: config num_scenes)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PoseurError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
