import argparse
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from models.schemas import Verdict
from services.check_service import CheckService, report_json
from utils.constants import EXIT_CONFIG_ERROR, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_PASS, VERSION
from utils.errors import ConfigError
from utils.logging_config import get_logger, setup_logging

# Load environment variables
load_dotenv()
logger = get_logger(__name__)

VERDICT_EXIT_CODES = {
    Verdict.PASS: EXIT_PASS,
    Verdict.FAIL: EXIT_FAIL,
    Verdict.INCONCLUSIVE: EXIT_INCONCLUSIVE,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="varinv",
        description="Numerical checks of quasiconvexity, lower invariance and null lagrangians",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    check = sub.add_parser("check", help="run a single check from a JSON config")
    check.add_argument("config", help="path to a RunConfig JSON file")
    check.add_argument("--out", help="report path (overrides the config's output)")
    check.add_argument("--series", help="write the per-sample CSV series to this path")

    suite = sub.add_parser("suite", help="run every check of a suite file")
    suite.add_argument("suite", help="path to a suite JSON file")
    suite.add_argument("--out", required=True, help="directory for reports, CSV series and the suite result")
    suite.add_argument("--jobs", type=int, default=None, help="worker threads (default VARINV_JOBS or 1)")

    sub.add_parser("list", help="list energies, groups and tests")
    return parser


def _config_error(e: ConfigError) -> int:
    path = e.details.get("path", "<config>")
    print(f"config error at {path}: {e}", file=sys.stderr)
    logger.error(f"[CONFIG] {path}: {e}")
    return EXIT_CONFIG_ERROR


def cmd_check(service: CheckService, args) -> int:
    config = service.load_config(args.config)
    report = service.run_check(config)
    output = args.out or config.output
    if output:
        service.write_report(report, output)
        print(output)
    else:
        sys.stdout.write(report_json(report))
    if args.series:
        service.write_series(report, args.series)
    return VERDICT_EXIT_CODES[report.verdict]


def cmd_suite(service: CheckService, args) -> int:
    jobs = args.jobs
    if jobs is None:
        try:
            jobs = int(os.getenv("VARINV_JOBS", "1"))
        except ValueError:
            raise ConfigError("VARINV_JOBS must be an integer", {"path": "VARINV_JOBS"})
    if jobs < 1:
        raise ConfigError("--jobs must be at least 1", {"path": "--jobs"})
    suite = service.load_suite(args.suite)
    result = service.run_suite(suite, args.out, jobs)
    for index in result.mismatches:
        entry = result.entries[index]
        print(f"mismatch: entry {index} ({entry.report.condition}) expected {entry.expect.value}, "
              f"got {entry.report.verdict.value}", file=sys.stderr)
    print(os.path.join(args.out, "suite_result.json"))
    return EXIT_PASS if not result.mismatches else EXIT_FAIL


def cmd_list(service: CheckService, args) -> int:
    for section, name, description in service.list_catalog():
        print(f"{section:<7} {name} - {description}")
    return EXIT_PASS


COMMANDS = {"check": cmd_check, "suite": cmd_suite, "list": cmd_list}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        service = CheckService()
        return COMMANDS[args.command](service, args)
    except ConfigError as e:
        return _config_error(e)


if __name__ == "__main__":
    sys.exit(main())
