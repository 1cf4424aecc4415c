"""Command line entry point: ``mvcn {simulate,poc,tangent,ibp,replay}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigError, EllipticityFailure, MVCNError, NonFiniteState
from .harness import load_config, replay, resolve_threads, run_study, write_record, RunRecord

EXIT_OK, EXIT_NUMERIC, EXIT_REFUSED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("mvcn")


def _parser():
    p = argparse.ArgumentParser(prog="mvcn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "poc", "tangent", "ibp", "replay"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True,
                       help="JSON config (for replay: a record.json)")
        s.add_argument("--out", default=None, help="output directory; results are printed as JSON when omitted")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--threads", type=int, default=None, help="worker threads (fallback: MVCN_THREADS)")
    return p


def _refusal(out, cfg_json, reason):
    if out is not None:
        rec = RunRecord(cfg_json, cfg_json.get("seed", 0), {}, {}, False, "refused", reason)
        write_record(rec, out)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _parser().parse_args(argv)
    try:
        threads = resolve_threads(args.threads)
        if args.command == "replay":
            rec, same = replay(args.config, threads, args.out)
            if args.out is not None:
                write_record(rec, args.out)
            for name, ok in same.items():
                log.info("table %s: %s", name, "identical" if ok else "DIFFERS")
            return EXIT_OK if same and all(same.values()) else EXIT_NUMERIC
        cfg = load_config(args.config, args.seed)
        if cfg.study != args.command:
            raise ConfigError(f"config is for study {cfg.study!r}, not {args.command!r}")
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        log.error("cannot read input: %s", e)
        return EXIT_IO
    except (ConfigError, json.JSONDecodeError, KeyError) as e:
        log.error("config error: %s", e)
        return EXIT_REFUSED
    except EllipticityFailure as e:
        log.error("refused: %s", e)
        return EXIT_REFUSED
    except NonFiniteState as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except OSError as e:
        log.error("I/O error: %s", e)
        return EXIT_IO

    try:
        rec = run_study(cfg, threads, args.out)
    except EllipticityFailure as e:
        log.error("refused: %s", e)
        try:
            _refusal(args.out, cfg.to_json(), str(e))
        except OSError:
            return EXIT_IO
        return EXIT_REFUSED
    except (NonFiniteState, FloatingPointError) as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except OSError as e:
        log.error("I/O error: %s", e)
        return EXIT_IO
    except MVCNError as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC

    for name, rows in rec.tables.items():
        log.info("table %s: %d rows", name, len(rows))
    for msg in rec.findings:
        log.warning("finding: %s", msg)
    if args.out is not None:
        try:
            path = write_record(rec, args.out)
        except OSError as e:
            log.error("I/O error: %s", e)
            return EXIT_IO
        log.info("wrote %s", path)
    else:
        print(json.dumps(rec.to_json()["results"], indent=2))
    log.info("%s study %s in %.2f s", cfg.study, rec.status, rec.wall_clock_s)
    return EXIT_OK if rec.passed else EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
