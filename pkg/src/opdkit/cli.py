"""``opd``: command-line entry point.

Exit codes: 0 success, 1 fatal or usage error, 2 partial (some items failed
or a quota could not be filled). Every run writes ``resolved_config.ini``
(a valid ``--config`` file reproducing the run) and ``errors.jsonl`` into
the output directory. Flags override config-file values; every flag can
also be set through an ``OPD_``-prefixed environment variable, e.g.
``OPD_SEED`` or ``OPD_PAIRS_BUILD_QUOTA``.
"""

from __future__ import annotations

import configparser
import json
import logging
import sys
from pathlib import Path

import click

from opdkit import audit as audit_mod
from opdkit.benchmark import compare, score
from opdkit.consistency import (
    ClippedEvaluator,
    PotentialDifferenceEvaluator,
    Sampling,
    check_cocycle,
    equivalence_invariance_check,
    induce_potential,
    reconstruction_mismatches,
)
from opdkit.discarded import DiscardedConfig, discarded_row
from opdkit.errors import BatchFailed, ConfigError, OpdError
from opdkit.judges import JudgeClient, parse_judge_spec, write_verdicts
from opdkit.metrics import DEFAULT_NOISE_SIGMA, DEFAULT_TAIL_PROB, OpdConfig, calibrate_epsilon, opd_record
from opdkit.potential import read_traces
from opdkit.sampler import (
    SamplerConfig,
    build_pairs,
    frame_seed,
    load_image,
    perturb_observation,
    perturbation_manifest,
    read_annotations,
    read_pairs,
    save_image,
    write_pairs,
)
from opdkit.seeding import component_seed

logger = logging.getLogger("opdkit")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2

DEFAULTS = {
    "run": {"seed": "0", "jobs": "1", "out": "opd-out", "validation": "clamp"},
    "opd": {
        "milestone_count": "4",
        "ppl_delta": "1e-08",
        "str_epsilon": repr(calibrate_epsilon(DEFAULT_NOISE_SIGMA, DEFAULT_TAIL_PROB)),
    },
    "discarded": {"ppe_epsilon": "1e-08", "ead_epsilon": "0.05", "cs_window": "1"},
    "audit": {"min_failures": "3"},
    "sampler": {"chunk_size": "30", "quota": "50", "dt_boundaries": "", "retained_only": "true",
                "noise_level": "0"},
    "judge": {"spec": "", "max_in_flight": "1", "timeout": "30"},
    "consistency": {"tolerance": "1e-09", "samples": "10000"},
}


class RunConfig:
    """Flat INI sections, defaults < config file < flags."""

    def __init__(self, path: str | None = None):
        self.cp = configparser.ConfigParser(interpolation=None)
        self.cp.read_dict(DEFAULTS)
        if path:
            try:
                with open(path, encoding="utf-8") as fh:
                    self.cp.read_file(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except configparser.Error as exc:
                raise ConfigError(f"bad config {path}: {exc}") from exc
            unknown = set(self.cp.sections()) - set(DEFAULTS)
            if unknown:
                raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")

    def override(self, section: str, key: str, value) -> None:
        if value is None:
            return
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (tuple, list)):
            value = "\n".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        self.cp.set(section, key, str(value))

    def get(self, section, key) -> str:
        return self.cp.get(section, key)

    def getint(self, section, key) -> int:
        try:
            return self.cp.getint(section, key)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc

    def getfloat(self, section, key) -> float:
        try:
            return self.cp.getfloat(section, key)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc

    def getbool(self, section, key) -> bool:
        try:
            return self.cp.getboolean(section, key)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc

    @property
    def out(self) -> Path:
        return Path(self.get("run", "out"))

    def opd(self) -> OpdConfig:
        return OpdConfig(self.getint("opd", "milestone_count"), self.getfloat("opd", "ppl_delta"),
                         self.getfloat("opd", "str_epsilon"))

    def discarded(self) -> DiscardedConfig:
        return DiscardedConfig(self.getfloat("discarded", "ppe_epsilon"), self.getfloat("discarded", "ead_epsilon"),
                               self.getint("discarded", "cs_window"))

    def sampler(self) -> SamplerConfig:
        b = self.get("sampler", "dt_boundaries").replace(",", " ").split()
        return SamplerConfig(
            chunk_size=self.getint("sampler", "chunk_size"),
            quota=parse_quota(self.get("sampler", "quota")),
            dt_boundaries=tuple(int(x) for x in b) if b else None,
            seed=self.getint("run", "seed"),
            retained_only=self.getbool("sampler", "retained_only"),
        )

    def judge_specs(self) -> list[str]:
        return [s.strip() for s in self.get("judge", "spec").splitlines() if s.strip()]

    def echo(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "resolved_config.ini"
        with open(path, "w", encoding="utf-8") as fh:
            self.cp.write(fh)
        return path


def parse_quota(text: str):
    """``50`` or ``Small=20, Medium=10, Large:2=5``."""
    text = text.strip()
    if "=" not in text:
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"bad quota {text!r}") from exc
    out = {}
    for item in text.replace("\n", ",").split(","):
        if not item.strip():
            continue
        key, _, val = item.partition("=")
        try:
            out[key.strip()] = int(val)
        except ValueError as exc:
            raise ConfigError(f"bad quota entry {item!r}") from exc
    return out


# --- shared plumbing -----------------------------------------------------


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _start(ctx: click.Context, **overrides) -> RunConfig:
    rc: RunConfig = ctx.obj
    for dotted, value in overrides.items():
        section, key = dotted.split("__")
        rc.override(section, key, value)
    rc.echo(rc.out)
    return rc


def _finish(rc: RunConfig, errors: list, partial: bool = False) -> int:
    _write_jsonl(rc.out / "errors.jsonl", errors)
    if errors or partial:
        click.echo(f"partial run: {len(errors)} error(s) logged to {rc.out / 'errors.jsonl'}", err=True)
        return EXIT_PARTIAL
    return EXIT_OK


def _load_traces(rc: RunConfig, path: str):
    tf = read_traces(path)
    errors = [dict(e.to_dict(), stage="parse") for e in tf.errors]
    return tf, errors


@click.group(context_settings={"auto_envvar_prefix": "OPD", "help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="INI config file.")
@click.option("--seed", type=int, help="Top-level seed; per-component seeds derive from it.")
@click.option("--jobs", type=click.IntRange(min=1), help="Parallelism bound.")
@click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
@click.option("--strict/--clamp", "strict", default=None, help="Out-of-range potentials: fail or clip.")
@click.option("-v", "--verbose", count=True)
@click.version_option(package_name="artifact", prog_name="opd")
@click.pass_context
def cli(ctx, config_path, seed, jobs, out, strict, verbose):
    """Audit potential traces, build pair benchmarks, evaluate judges."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    rc = RunConfig(config_path)
    rc.override("run", "seed", seed)
    rc.override("run", "jobs", jobs)
    rc.override("run", "out", out)
    if strict is not None:
        rc.override("run", "validation", "strict" if strict else "clamp")
    ctx.obj = rc


# --- audit / metrics -----------------------------------------------------


@cli.command("audit")
@click.argument("traces", type=click.Path(exists=True, dir_okay=False))
@click.option("--milestones", type=click.IntRange(min=1), help="Milestone count K.")
@click.option("--epsilon", type=float, help="Stagnation threshold.")
@click.option("--min-failures", type=click.IntRange(min=1), help="Failures needed for a fingerprint.")
@click.option("--include-discarded", is_flag=True, default=False, help="Also write discarded_metrics.csv.")
@click.pass_context
def cmd_audit(ctx, traces, milestones, epsilon, min_failures, include_discarded):
    """Audit a JSONL trace file: table, reachability, success stats, fingerprints."""
    rc = _start(ctx, opd__milestone_count=milestones, opd__str_epsilon=epsilon, audit__min_failures=min_failures)
    config = rc.opd()
    tf, errors = _load_traces(rc, traces)
    result = audit_mod.audit_episodes(tf.traces, config, rc.get("run", "validation"), rc.getint("run", "jobs"))
    for f in result.failures:
        tr = tf.traces[f.index]
        errors.append({"line": tr.line, "episode_id": tr.episode_id, "error": f.error, "stage": "audit"})
    report = audit_mod.build_report(result, min_failures=rc.getint("audit", "min_failures"), config=config)
    audit_mod.emit_report(report, rc.out)
    _write_jsonl(rc.out / "opd_records.jsonl", [r.to_dict() for r in result.records])
    if include_discarded:
        _write_discarded(rc, tf.traces, rc.out / "discarded_metrics.csv", errors)
    click.echo(f"audited {len(result.records)} episode(s) into {rc.out}")
    return _finish(rc, errors)


def _write_discarded(rc: RunConfig, raw_traces, path: Path, errors: list) -> None:
    dconf = rc.discarded()
    traces = []
    for raw in raw_traces:
        try:
            traces.append(raw.validate(rc.get("run", "validation")))
        except OpdError:
            continue  # already reported by the main pass
    refs = {}
    for i, t in enumerate(traces):
        if t.success:
            refs.setdefault(t.task_id, []).append((i, t.values))
    rows = []
    for i, t in enumerate(traces):
        # a successful episode is never its own reference
        own = [v for j, v in refs.get(t.task_id, ()) if j != i]
        row = {"episode_id": t.episode_id, "task_id": t.task_id, "policy_id": t.policy_id}
        row.update(discarded_row(t, dconf, own or None))
        rows.append(row)
    cols = ["episode_id", "task_id", "policy_id", "PPE", "PTI", "EAD", "PJ", "CS", "RR", "GRDTW", "GRDTW_Z"]
    audit_mod.write_csv(path, cols, rows)


@cli.command("metrics")
@click.argument("traces", type=click.Path(exists=True, dir_okay=False))
@click.option("--milestones", type=click.IntRange(min=1))
@click.option("--epsilon", type=float)
@click.option("--include-discarded", is_flag=True, default=False,
              help="Add the superseded candidate metrics (GRDTW references: successful traces of the same task).")
@click.pass_context
def cmd_metrics(ctx, traces, milestones, epsilon, include_discarded):
    """Per-episode OPD metrics as metrics.csv and metrics.jsonl."""
    rc = _start(ctx, opd__milestone_count=milestones, opd__str_epsilon=epsilon)
    config = rc.opd()
    tf, errors = _load_traces(rc, traces)
    rows = []
    for raw in tf.traces:
        try:
            rec = opd_record(raw.validate(rc.get("run", "validation")), config)
        except OpdError as exc:
            errors.append({"line": raw.line, "episode_id": raw.episode_id, "error": str(exc), "stage": "metrics"})
            continue
        d = rec.to_dict()
        d.pop("config", None)
        rows.append(d)
    _write_jsonl(rc.out / "metrics.jsonl", rows)
    cols = ["episode_id", "task_id", "policy_id", "success", "MC", "MP", "PPL", "CRA", "STR"]
    audit_mod.write_csv(rc.out / "metrics.csv", cols, rows)
    if include_discarded:
        _write_discarded(rc, tf.traces, rc.out / "discarded_metrics.csv", errors)
    return _finish(rc, errors)


# --- pairs ---------------------------------------------------------------


@cli.group("pairs")
def pairs_group():
    """Benchmark pair construction."""


@pairs_group.command("build")
@click.argument("annotations", type=click.Path(exists=True, dir_okay=False))
@click.option("--chunk-size", type=click.IntRange(min=1))
@click.option("--quota", type=str, help="Per-cell quota: N or 'Small=20,Medium=10,Large:2=5'.")
@click.option("--dt-boundaries", type=str, help="Inclusive frame-distance stratum edges, comma separated.")
@click.option("--noise-level", type=click.FloatRange(0.0, 1.0), help="Write a perturbation manifest when > 0.")
@click.pass_context
def cmd_pairs_build(ctx, annotations, chunk_size, quota, dt_boundaries, noise_level):
    """Discretize annotated episodes and sample stratified progress pairs."""
    rc = _start(ctx, sampler__chunk_size=chunk_size, sampler__quota=quota,
                sampler__dt_boundaries=dt_boundaries, sampler__noise_level=noise_level)
    config = rc.sampler()
    anns, errors = read_annotations(annotations)
    errors = [dict(e, stage="parse") for e in errors]
    pairs, report, failures = build_pairs(anns, config)
    errors += [dict(f, stage="discretize") for f in failures]
    write_pairs(rc.out / "pairs.jsonl", pairs)
    _write_json(rc.out / "stratum_report.json", dict(report.to_dict(), sampler=config.to_dict()))
    alpha = rc.getfloat("sampler", "noise_level")
    if alpha > 0:
        seed = component_seed(rc.getint("run", "seed"), "perturb")
        _write_jsonl(rc.out / "perturbation_manifest.jsonl", perturbation_manifest(pairs, alpha, seed))
    click.echo(f"wrote {len(pairs)} pair(s) to {rc.out / 'pairs.jsonl'}")
    for s in report.shortfalls:
        click.echo(f"shortfall: {s.bin} stratum {s.stratum}: {s.filled}/{s.requested}", err=True)
    return _finish(rc, errors, partial=bool(report.shortfalls))


@cli.command("perturb")
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.argument("output", type=click.Path(dir_okay=False))
@click.option("--noise-level", type=click.FloatRange(0.0, 1.0))
@click.option("--frame-ref", type=str, help="Derive the noise seed from this frame reference.")
@click.pass_context
def cmd_perturb(ctx, image, output, noise_level, frame_ref):
    """Blend an .npy image in [0, 1] with Gaussian noise."""
    rc = _start(ctx, sampler__noise_level=noise_level)
    seed = component_seed(rc.getint("run", "seed"), "perturb")
    if frame_ref:
        seed = frame_seed(seed, frame_ref)
    try:
        img = load_image(image)
    except ValueError as exc:
        raise ConfigError(f"cannot load {image}: {exc}") from exc
    save_image(output, perturb_observation(img, rc.getfloat("sampler", "noise_level"), seed))
    return _finish(rc, [])


# --- judging -------------------------------------------------------------


@cli.command("judge-eval")
@click.argument("pairs_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--judge", "judges", multiple=True, help="Judge spec; repeat to compare several.")
@click.option("--max-in-flight", type=click.IntRange(min=1))
@click.option("--timeout", type=click.FloatRange(min=0, min_open=True), help="Per-request timeout (s).")
@click.pass_context
def cmd_judge_eval(ctx, pairs_file, judges, max_in_flight, timeout):
    """Score judges on a pair file; writes accuracy.csv/json and verdict logs."""
    rc = _start(ctx, judge__spec=list(judges) or None, judge__max_in_flight=max_in_flight,
                judge__timeout=timeout)
    specs = rc.judge_specs()
    if not specs:
        raise click.UsageError("no judge given (--judge or [judge] spec)")
    pairs = read_pairs(pairs_file)
    if not pairs:
        raise ConfigError(f"{pairs_file} holds no pairs")
    tables, errors = {}, []
    for i, spec in enumerate(specs):
        desc = parse_judge_spec(spec, max_in_flight=rc.getint("judge", "max_in_flight"),
                                timeout=rc.getfloat("judge", "timeout"),
                                validation=rc.get("run", "validation"))
        with JudgeClient.from_descriptor(desc) as client:
            try:
                verdicts = client.batch_judge(pairs)
            except BatchFailed as exc:
                verdicts = exc.verdicts
        table = score(verdicts, pairs)
        tables[spec] = table
        write_verdicts(rc.out / f"verdicts_{i}.jsonl", verdicts)
        errors += [{"judge": spec, "id": v.id, "error": v.error, "kind": v.error_kind}
                   for v in verdicts if not v.ok]
        overall = "n/a" if table.overall is None else f"{table.overall:.4f}"
        click.echo(f"{spec}: accuracy {overall}, failure rate {table.failure_rate:.2%}")
    report = compare(tables)
    report.write(rc.out)
    _write_json(rc.out / "accuracy_tables.json", {k: t.to_dict() for k, t in tables.items()})
    return _finish(rc, errors)


# --- consistency ---------------------------------------------------------


@cli.group("consistency")
def consistency_group():
    """Additivity checks for pairwise evaluators."""


def _evaluator(spec: str, potentials: dict):
    kind, _, rest = spec.partition(":")
    name, _, params = rest.partition(":")
    kw = dict(p.split("=", 1) for p in filter(None, params.split(",")))
    if kind != "builtin" or name not in ("potential_difference", "clipped"):
        raise click.UsageError(f"evaluator must be builtin:potential_difference or builtin:clipped[:cap=X], got {spec!r}")
    if name == "clipped":
        return ClippedEvaluator(potentials, cap=float(kw.get("cap", 0.5)))
    return PotentialDifferenceEvaluator(potentials)


@consistency_group.command("check")
@click.argument("states_arg", required=False, type=click.Path(exists=True, dir_okay=False))
@click.option("--states", "states_opt", type=click.Path(exists=True, dir_okay=False), help="States file.")
@click.option("--evaluator", "--judge", "spec", help="builtin:potential_difference or builtin:clipped[:cap=X].")
@click.option("--tolerance", type=click.FloatRange(min=0))
@click.option("--samples", type=click.IntRange(min=1), help="Triples to sample above the exhaustive limit.")
@click.option("--anchor", type=str, help="Also reconstruct a potential from this anchor state.")
@click.pass_context
def cmd_consistency(ctx, states_arg, states_opt, spec, tolerance, samples, anchor):
    """Certify or refute additivity on a states file.

    The file is JSON: ``{"states": [...], "potentials": {state: value},
    "context": ..., "equivalence_classes": [[...], ...]}``; the last two
    are optional.
    """
    states_file = states_opt or states_arg
    if not states_file:
        raise click.UsageError("a states file is required (STATES or --states)")
    rc = _start(ctx, judge__spec=spec, consistency__tolerance=tolerance, consistency__samples=samples)
    specs = rc.judge_specs() or ["builtin:potential_difference"]
    try:
        doc = json.loads(Path(states_file).read_text(encoding="utf-8"))
        states = [str(s) for s in doc["states"]]
        potentials = {str(k): float(v) for k, v in doc["potentials"].items()}
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise ConfigError(f"bad states file {states_file}: {exc}") from exc
    evaluator = _evaluator(specs[0], potentials)
    tol = rc.getfloat("consistency", "tolerance")
    sampling = Sampling("auto", rc.getint("consistency", "samples"), component_seed(rc.getint("run", "seed"), "cocycle"))
    report = check_cocycle(evaluator, states, doc.get("context"), tol, sampling, rc.getint("run", "jobs"))
    out = dict(report.to_dict(), evaluator=specs[0])
    if anchor is not None:
        phi = induce_potential(evaluator, anchor, states, doc.get("context"))
        out["reconstruction"] = {"anchor": anchor, "potential": phi,
                                 "mismatches": len(reconstruction_mismatches(evaluator, phi, doc.get("context"), tol))}
    if doc.get("equivalence_classes"):
        viol = equivalence_invariance_check(potentials, doc["equivalence_classes"], tol)
        out["equivalence_violations"] = [v.to_dict() for v in viol]
    _write_json(rc.out / "consistency_report.json", out)
    click.echo(f"{report.verdict} (max |residual| {report.max_abs_residual:.3g}, tolerance {tol!r}, "
               f"{report.triples_checked} triples)")
    if report.certificate is not None:
        c = report.certificate
        click.echo(f"certificate: {c.to_dict()}")
    return _finish(rc, [])


# --- calibration ---------------------------------------------------------


@cli.command("calibrate")
@click.option("--sigma", type=float, default=DEFAULT_NOISE_SIGMA, show_default=True, help="Judge noise std.")
@click.option("--tail", type=float, default=DEFAULT_TAIL_PROB, show_default=True,
              help="Two-sided false-stagnation-miss probability.")
@click.pass_context
def cmd_calibrate(ctx, sigma, tail):
    """Print the stagnation threshold for a judge noise level."""
    rc = _start(ctx)
    try:
        eps = calibrate_epsilon(sigma, tail)
    except OpdError as exc:
        raise click.UsageError(str(exc)) from exc
    click.echo(repr(eps))
    _write_json(rc.out / "epsilon.json", {"sigma": sigma, "tail_prob": tail, "epsilon": eps})
    return _finish(rc, [])


def main(argv=None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="opd", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_FATAL
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_FATAL
    except (OpdError, OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_FATAL
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
