import csv
import hashlib
import io
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Tuple

from pydantic import ValidationError

from models.schemas import (BoxDomain, GroupKind, GroupSpec, RunConfig, Subject, SuiteFile, SuiteResult, SuiteResultEntry,
                            TestName, TestPoint, TestReport, ThetaConfig, Verdict)
from services import testers
from services.algebra import make_rng
from services.energies import EnergyDensity, catalog_get
from services.functional import map_from_config
from services.kinematics import sample_field_spec
from utils.constants import (ENERGY_DESCRIPTIONS, GROUP_DESCRIPTIONS, INEQUALITY_TOLERANCE, PARHL_TOLERANCE,
                             TEST_CONDITIONS, TEST_DESCRIPTIONS, VERSION)
from utils.errors import ConfigError, VarinvError

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCES = {
    TestName.PARHL: PARHL_TOLERANCE,
    TestName.FIRST_VARIATION: 1e-6,
    TestName.EXP_INVARIANCE: 1e-6,
    TestName.THETA_CONVEXITY: 1e-9,
}

CSV_HEADER = ("sample", "margin", "tau", "amplitude")


def _key_path(error: ValidationError) -> str:
    first = error.errors()[0]
    return ".".join(str(part) for part in first["loc"]) or "<root>"


def config_digest(config: RunConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_atomic(path: Path, text: str):
    """Write via a temporary file in the target directory and os.replace."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def report_json(report: TestReport) -> str:
    return json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def series_csv(report: TestReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for record in report.series:
        writer.writerow([record.sample, repr(record.margin),
                         "" if record.tau is None else repr(record.tau),
                         "" if record.amplitude is None else repr(record.amplitude)])
    return buffer.getvalue()


class CheckService:
    """Turns validated RunConfigs into tester calls, writes reports and runs suites."""

    def __init__(self, seed_override: Optional[int] = None):
        if seed_override is None and os.getenv("VARINV_SEED"):
            try:
                seed_override = int(os.getenv("VARINV_SEED"))
            except ValueError as e:
                raise ConfigError(f"VARINV_SEED must be an integer, got {os.getenv('VARINV_SEED')!r}",
                                  {"path": "VARINV_SEED"}) from e
        if seed_override is not None and not 0 <= seed_override < 2 ** 64:
            raise ConfigError("VARINV_SEED must lie in [0, 2^64)", {"path": "VARINV_SEED"})
        self.seed_override = seed_override
        if seed_override is not None:
            logger.info(f"[CONFIG] seed override {seed_override} applies to every check")

    def load_config(self, path) -> RunConfig:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}", {"path": str(path)}) from e
        try:
            return RunConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigError(e.errors()[0]["msg"], {"path": _key_path(e)}) from e

    def load_suite(self, path) -> SuiteFile:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read suite {path}: {e}", {"path": str(path)}) from e
        try:
            suite = SuiteFile.model_validate(data)
        except ValidationError as e:
            raise ConfigError(e.errors()[0]["msg"], {"path": _key_path(e)}) from e
        if not suite.entries:
            raise ConfigError("suite file has no entries", {"path": "entries"})
        return suite

    def _effective(self, config: RunConfig) -> RunConfig:
        if self.seed_override is None:
            return config
        return config.model_copy(update={"seed": self.seed_override})

    def _dimension(self, config: RunConfig) -> int:
        for candidate in (config.group.n if config.group else None,
                          config.test_point.n if config.test_point else None,
                          config.energy.n if config.energy else None,
                          len(config.map.F) if config.map else None,
                          config.character.n if config.character else None):
            if candidate is not None:
                return candidate
        return 2

    def _energy(self, config: RunConfig, n: int) -> EnergyDensity:
        if config.energy is None:
            raise ConfigError(f"{config.test.value} requires 'energy'", {"path": "energy"})
        try:
            return catalog_get(config.energy.name, config.energy.params, config.energy.n or n)
        except ConfigError as e:
            e.details.setdefault("path", "energy.name" if "unknown energy" in str(e) else "energy.params")
            raise

    @staticmethod
    def _require(config: RunConfig, *keys: str):
        for key in keys:
            if getattr(config, key) is None:
                raise ConfigError(f"{config.test.value} requires '{key}'", {"path": key})

    def prepare(self, config: RunConfig) -> Callable[[], TestReport]:
        """Validate everything a check needs and return the deferred tester call."""
        c = self._effective(config)
        if c.test == TestName.THETA_CONVEXITY:
            theta = c.theta or ThetaConfig()
            tol = c.tolerance or DEFAULT_TOLERANCES[c.test]
            return lambda: testers.test_theta_convexity(theta, tol=tol, seed=c.seed, steps_per_unit=c.steps_per_unit)

        n = self._dimension(c)
        domain = c.domain or BoxDomain.unit(n)
        if domain.n != n:
            raise ConfigError(f"domain.n = {domain.n} but the check has n = {n}", {"path": "domain.n"})
        tol = c.tolerance or DEFAULT_TOLERANCES.get(c.test, INEQUALITY_TOLERANCE)
        tp = c.test_point or TestPoint(F=tuple(tuple(1.0 if i == j else 0.0 for j in range(n)) for i in range(n)))
        common = {"seed": c.seed, "tol": tol}
        flow_options = {"steps_per_unit": c.steps_per_unit}

        try:
            u = map_from_config(c.map) if c.map is not None else None
        except VarinvError as e:
            raise ConfigError(str(e), {"path": "map"}) from e
        if u is not None and u.n != n:
            raise ConfigError(f"map has n = {u.n} but the check has n = {n}", {"path": "map.F"})

        test = c.test
        if test == TestName.CHARACTER_NLL:
            self._require(c, "character", "group")
            return lambda: testers.test_character_nll(c.character, c.group, tp.F, domain, c.samples,
                                                      tol=tol, seed=c.seed, **flow_options)

        W = self._energy(c, n)
        if test == TestName.QUASICONVEXITY:
            return lambda: testers.test_quasiconvexity(W, tp, domain, c.samples, displacement=c.displacement,
                                                       field=c.field, tau=c.tau, **common, **flow_options)
        if test == TestName.LOWER_INVARIANCE:
            self._require(c, "group")
            return lambda: testers.test_lower_invariance(W, c.group, tp, c.side, domain, c.samples, field=c.field,
                                                         tau=c.tau, **common, **flow_options)
        if test == TestName.CONJUGATION_IDENTITY:
            self._require(c, "group")
            return lambda: testers.test_conjugation_identity(W, c.group, tp.F, domain, c.samples, field=c.field,
                                                             tau=c.tau, **common, **flow_options)
        if test == TestName.LEGH:
            return lambda: testers.test_legh(W, tp.F, domain, field=c.field, g=c.group, n_samples=c.samples,
                                             equality=c.equality, **common)
        if test == TestName.LH_POINTWISE:
            return lambda: testers.test_lh_pointwise(W, tp.F, c.mode, c.samples, **common)
        if test == TestName.PARHL:
            return lambda: testers.test_parhl(W, tp.F, tol)
        if test == TestName.NULL_LAGRANGIAN:
            self._require(c, "group")
            return lambda: testers.test_null_lagrangian(W, c.group, tp, domain, c.samples, field=c.field,
                                                        tau=c.tau, **common, **flow_options)
        if test == TestName.FIRST_VARIATION:
            self._require(c, "map")
            field = c.field or sample_field_spec(GroupSpec(kind=GroupKind.FULL_DIFF, n=n), domain, make_rng(c.seed))
            return lambda: testers.test_first_variation(W, u, field, domain, tol)
        if test == TestName.EXP_INVARIANCE:
            self._require(c, "group")
            if c.subject == Subject.MAP:
                self._require(c, "map")
            return lambda: testers.test_exp_invariance(W, c.group, c.subject, u=u, F=tp.F, field=c.field,
                                                       tau=c.tau, domain=domain, n_samples=c.samples,
                                                       **common, **flow_options)
        if test == TestName.EQUILIBRIUM_RESIDUAL:
            self._require(c, "map")
            return lambda: testers.test_equilibrium_residual(W, u, domain, tol)
        if test == TestName.POLYCONVEX_JENSEN:
            self._require(c, "group")
            return lambda: testers.test_polyconvex_jensen(W, c.group, tp, domain, c.samples, **common, **flow_options)
        if test == TestName.SEMICONTINUITY:
            self._require(c, "group")
            if c.subject == Subject.MAP:
                self._require(c, "map")
            return lambda: testers.test_semicontinuity_sequence(W, c.group, c.subject, u=u, tp=tp, field=c.field,
                                                                tau0=c.tau, levels=c.levels, domain=domain,
                                                                **common, **flow_options)
        if test == TestName.GROUP_NESTING:
            self._require(c, "group")
            return lambda: testers.test_group_nesting(W, tp, c.group, domain, c.samples, **common, **flow_options)
        raise ConfigError(f"unknown test '{test}'", {"path": "test"})

    def run_check(self, config: RunConfig) -> TestReport:
        """Run one check. Configuration problems raise; numerical errors give an inconclusive report."""
        effective = self._effective(config)
        run = self.prepare(effective)
        logger.info(f"[START] {effective.test.value} (seed {effective.seed})")
        try:
            report = run()
        except VarinvError as e:
            logger.error(f"[ERROR] {effective.test.value}: {e}")
            report = TestReport(
                condition=effective.test.value, verdict=Verdict.INCONCLUSIVE, margin=0.0,
                tolerance=effective.tolerance or INEQUALITY_TOLERANCE, seed=effective.seed,
                witness={"error": {"type": e.error_type.value, "message": str(e), "details": e.details}},
                caveat="the check stopped on a numerical error",
            )
        report.seed = effective.seed
        report.config = effective.model_dump(mode="json")
        return report

    def write_report(self, report: TestReport, path) -> Path:
        path = Path(path)
        write_atomic(path, report_json(report))
        logger.info(f"[SUCCESS] report written to {path}")
        return path

    def write_series(self, report: TestReport, path) -> Path:
        path = Path(path)
        write_atomic(path, series_csv(report))
        return path

    def run_suite(self, suite: SuiteFile, out_dir, jobs: int = 1) -> SuiteResult:
        """Validate every entry first, then run them (optionally in a thread pool) and write all outputs."""
        for index, entry in enumerate(suite.entries):
            try:
                self.prepare(entry.config)
            except ConfigError as e:
                e.details["path"] = f"entries.{index}.config.{e.details.get('path', '')}".rstrip(".")
                raise

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        logger.info(f"[START] suite with {len(suite.entries)} entries, {jobs} worker(s)")

        def run(indexed: Tuple[int, object]) -> TestReport:
            index, entry = indexed
            report = self.run_check(entry.config)
            stem = f"{index:03d}_{entry.config.test.value}"
            self.write_report(report, out_dir / f"{stem}.json")
            self.write_series(report, out_dir / f"{stem}.csv")
            return report

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                reports: List[TestReport] = list(pool.map(run, enumerate(suite.entries)))
        else:
            reports = [run(item) for item in enumerate(suite.entries)]

        entries = []
        mismatches = []
        for index, (entry, report) in enumerate(zip(suite.entries, reports)):
            entries.append(SuiteResultEntry(digest=config_digest(self._effective(entry.config)),
                                            expect=entry.expect, report=report))
            if report.verdict != entry.expect:
                mismatches.append(index)
                logger.warning(f"[WARNING] entry {index} ({entry.config.test.value}): expected "
                               f"{entry.expect.value}, got {report.verdict.value}")
        verdicts = [r.verdict for r in reports]
        result = SuiteResult(
            entries=entries,
            passed=verdicts.count(Verdict.PASS),
            failed=verdicts.count(Verdict.FAIL),
            inconclusive=verdicts.count(Verdict.INCONCLUSIVE),
            mismatches=mismatches,
            duration_seconds=time.perf_counter() - start,
            version=VERSION,
            seed=self.seed_override,
        )
        write_atomic(out_dir / "suite_result.json",
                     json.dumps(result.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
        logger.info(f"[SUCCESS] suite finished: {result.passed} pass, {result.failed} fail, "
                    f"{result.inconclusive} inconclusive, {len(mismatches)} mismatches")
        return result

    def list_catalog(self) -> List[Tuple[str, str, str]]:
        """(section, name, description) rows, sorted by name within each section.

        Test rows carry the condition each tester checks.
        """
        rows = [("energy", name, ENERGY_DESCRIPTIONS[name]) for name in sorted(ENERGY_DESCRIPTIONS)]
        rows += [("group", name, GROUP_DESCRIPTIONS[name]) for name in sorted(GROUP_DESCRIPTIONS)]
        rows += [("test", name.value, f"{TEST_DESCRIPTIONS[name]}; condition: {TEST_CONDITIONS[name]}")
                 for name in sorted(TEST_DESCRIPTIONS, key=lambda t: t.value)]
        return rows
