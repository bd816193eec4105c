"""Command-line entry point: ``wc4dvar <command> --config <path> --out <dir>``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..assimilation import ConvergenceError
from ..covariance import SingularCovarianceError
from ..criteria import DenseLimitError, SingularCriterionError
from ..selection import BudgetExceeded
from ..traceest import LanczosError
from .commands import COMMANDS, CommandOutput
from .config import ConfigError, config_hash, load_config

log = logging.getLogger("wc4dvar")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_BUDGET = 0, 2, 3, 4


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def result_json(record: dict) -> str:
    return json.dumps(_plain(record), indent=2, sort_keys=True, allow_nan=False) + "\n"


def table_csv(rows: list[dict], cfg_hash: str) -> str:
    buf = io.StringIO(newline="")
    if not rows:
        return "config_hash\n" + cfg_hash + "\n"
    fields = list(rows[0].keys()) + ["config_hash"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        out = {k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()}
        out["config_hash"] = cfg_hash
        writer.writerow(out)
    return buf.getvalue()


def write_outputs(out_dir: Path, cfg: dict, result: CommandOutput) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    (out_dir / "result.json").write_text(result_json(result.record))
    for name, rows in result.tables.items():
        (out_dir / f"table_{name}.csv").write_text(table_csv(rows, h))
    for name, doc in result.svgs.items():
        (out_dir / f"hist_{name}.svg").write_text(doc)
    (out_dir / "timings.json").write_text(json.dumps(result.timings, indent=2, sort_keys=True) + "\n")


def load_result(path: str | Path, cfg: dict) -> dict:
    """Read a result.json, refusing it if it was produced from a different config."""
    rec = json.loads(Path(path).read_text())
    if rec.get("config_hash") != config_hash(cfg):
        raise ConfigError(f"{path} was produced by a different configuration")
    return rec


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wc4dvar", description="Sensor placement for weak-constraint 4D-Var.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed (u64)")
    p.add_argument("--scale", choices=["desk", "paper"], default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.scale)
        result = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetExceeded as exc:
        print(f"budget refusal: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (SingularCriterionError, SingularCovarianceError, LanczosError, ConvergenceError, DenseLimitError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    write_outputs(Path(args.out), cfg, result)
    log.info("wrote %s (config %s)", args.out, config_hash(cfg)[:12])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
