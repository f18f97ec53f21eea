"""Command-line surface.

Commands mirror the pipeline stages; every stage command re-uses cached
artifacts from earlier stages when they exist, so running `evaluate` on a
fresh output directory executes the whole pipeline.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import load_run_config
from .errors import PipelineError
from .runner import ExperimentRunner
from .synth import SynthConfig, synth_dataset

log = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, type=Path, help="YAML config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", type=Path, default=None, help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="incimpact",
        description="Label, predict, and evaluate traffic incident impact.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--config", type=Path, default=None, help="YAML synth config")
    synth.add_argument("--seed", type=int, default=None)
    synth.add_argument("--out", type=Path, required=True, help="dataset output directory")
    synth.add_argument("--incidents", type=int, default=None, help="override incident count")
    synth.add_argument("--days", type=int, default=None, help="override number of days")

    for name, help_text in (
        ("label", "compute traffic features and ground-truth labels"),
        ("extract", "extract incident features from the logs"),
        ("select-examples", "run the example-selection stage"),
        ("predict", "predict the test set with the selected examples"),
        ("evaluate", "score predictions and emit reports"),
        ("compare-random", "compare selected examples against random ones"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        _add_common(cmd)

    sweep = sub.add_parser("sweep-k", help="evaluate several top-k values")
    _add_common(sweep)
    sweep.add_argument(
        "k_values",
        type=lambda s: [int(v) for v in s.split(",")],
        help="comma-separated k values, e.g. 0,1,2,3",
    )
    return parser


def _synth_config(args: argparse.Namespace) -> SynthConfig:
    overrides = {}
    if args.config is not None:
        import yaml

        data = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        overrides.update(data)
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    if args.incidents is not None:
        overrides["incident_count"] = args.incidents
    if args.days is not None:
        overrides["days"] = args.days
    known = {f for f in SynthConfig.__dataclass_fields__}
    unknown = set(overrides) - known
    if unknown:
        raise PipelineError(f"unknown synth config keys: {sorted(unknown)}")
    return SynthConfig(**overrides)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synth":
            paths = synth_dataset(_synth_config(args), args.out)
            for name, path in sorted(paths.items()):
                print(f"{name}: {path}")
            return 0

        config = load_run_config(args.config, seed_override=args.seed, out_override=args.out)
        runner = ExperimentRunner(config)
        if args.command == "label":
            prepared = runner.prepare()
            print(
                f"labeled {len(prepared.incidents)} incidents "
                f"(train {len(prepared.train_ids)}, test {len(prepared.test_ids)}); "
                f"excluded {prepared.excluded}"
            )
        elif args.command == "extract":
            prepared = runner.prepare()
            print(f"extracted features for {len(prepared.features)} incidents")
        elif args.command == "select-examples":
            for provider_cfg in config.providers:
                for horizon in config.horizons:
                    artifact = runner.select(provider_cfg, horizon)
                    print(
                        f"{provider_cfg.provider_name} h{horizon}: "
                        f"winners {artifact['winners']}, "
                        f"{len(artifact['final_example_ids'])} examples"
                    )
        elif args.command == "predict":
            for provider_cfg in config.providers:
                for horizon in config.horizons:
                    artifact = runner.select(provider_cfg, horizon)
                    for run_index in range(config.runs):
                        records = runner.predict_test_set(
                            provider_cfg, horizon, run_index, artifact["final_example_ids"]
                        )
                        print(
                            f"{provider_cfg.provider_name} h{horizon} run{run_index}: "
                            f"{len(records)} predictions"
                        )
        elif args.command == "evaluate":
            result = runner.run()
            print((runner.out / "reports" / "summary.txt").read_text(encoding="utf-8"))
        elif args.command == "sweep-k":
            result = runner.sweep_k(args.k_values)
            print((runner.out / "reports" / "sweep_k.txt").read_text(encoding="utf-8"))
        elif args.command == "compare-random":
            result = runner.compare_random()
            print(
                (runner.out / "reports" / "selection_vs_random.txt").read_text(
                    encoding="utf-8"
                )
            )
        return 0
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
