"""Train every stage with a config and print the metrics table and stage timings."""
import argparse
import logging
from pathlib import Path

from icl_ser.pipeline import load_config, run_pipeline


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", type=Path, default=Path(__file__).resolve().parents[1] / "configs" / "default.toml")
    p.add_argument("--workdir", type=Path, default=Path("runs/default"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    result = run_pipeline(load_config(args.config), args.workdir)
    print(result.metrics_csv.read_text(), end="")
    for stage, seconds in result.timings.items():
        print(f"# {stage}: {seconds:.0f}s")


if __name__ == "__main__":
    main()
