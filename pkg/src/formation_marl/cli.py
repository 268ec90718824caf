"""Command-line front end: train, eval, baseline, export-traces."""

import argparse
import sys

from .harness import (
    evaluate,
    export_traces,
    load_config,
    run_baseline,
    train,
)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="formation-marl",
        description="Train and evaluate decentralized formation-control agents.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training session")
    p_train.add_argument("--config", required=True,
                         help="JSON or TOML config file")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--seed", type=int, default=None,
                         help="override the config seed")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint noise-free")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, required=True)
    p_eval.add_argument("--out", required=True)

    p_base = sub.add_parser("baseline", help="run the scripted controller")
    p_base.add_argument("--episodes", type=int, required=True)
    p_base.add_argument("--out", required=True)
    p_base.add_argument("--seed", type=int, default=0)

    p_export = sub.add_parser("export-traces",
                              help="extract one episode's trace from a run")
    p_export.add_argument("--run", required=True, help="run directory")
    p_export.add_argument("--episode", type=int, required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "train":
        config = load_config(args.config)
        result = train(config, args.out, seed=args.seed)
        last = result.rewards[-min(100, len(result.rewards)):]
        print(f"trained {len(result.rewards)} episodes; "
              f"mean reward over last {len(last)}: {last.mean():.2f}")
        print(f"artifacts in {result.out_dir}")
    elif args.command == "eval":
        summary, _ = evaluate(args.checkpoint, args.episodes, args.out)
        print(f"evaluated {summary['episodes']} episodes: "
              f"success rate {summary['success_rate']:.2%}, "
              f"collision rate {summary['collision_rate']:.2%}")
        print(f"artifacts in {args.out}")
    elif args.command == "baseline":
        summary, _ = run_baseline(args.episodes, args.out, seed=args.seed)
        print(f"baseline over {summary['episodes']} episodes: "
              f"success rate {summary['success_rate']:.2%}, "
              f"mean final edge error {summary['mean_final_edge_error']:.3f} m")
        print(f"artifacts in {args.out}")
    else:
        path = export_traces(args.run, args.episode)
        print(f"wrote {path}")
    return 0


def entrypoint():
    try:
        sys.exit(main())
    except BrokenPipeError:
        sys.exit(1)
    except Exception as exc:  # argparse handles its own SystemExit
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    entrypoint()
