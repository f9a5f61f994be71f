"""Command-line pipeline: registration, Jacobian analysis, region statistics,
cohort classification, phantom generation, and fixture reproduction.

Configuration is a flat `key value` text file whose keys mirror
PipelineConfig one-to-one; every key can also be overridden on the command
line as --key value. Artifacts land under --out. Errors print a
machine-readable JSON record to stderr and exit with a code identifying
the failure class (2 missing input, 3 malformed file, 4 invariant
violation, 5 internal). DEFIELD_THREADS caps worker parallelism.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import defanalysis, volio
from .cohort import (
    CohortReport,
    ValidationError,
    load_fixture,
    load_manifest,
    reproduce_from_fixture,
    run_cohort,
)
from .defanalysis import collect_samples, jacobian_map, partition_regions
from .grids import DefieldError, GridGeometry, warp_mask
from .phantom import PhantomSpec, synth_cohort
from .registration import RegistrationParams, register, save_transform
from .stats import bootstrap_ci, normal_ci, summarize
from .volio import VolFormatError

EXIT_OK = 0
EXIT_MISSING_INPUT = 2
EXIT_FORMAT = 3
EXIT_INVALID = 4
EXIT_INTERNAL = 5


@dataclass(frozen=True)
class PipelineConfig:
    """Flat pipeline configuration; every field is a config/CLI key."""

    pyramid_levels: int = 3
    iterations_per_level: int = 50
    lcc_sigma: float = 3.0
    fluid_sigma: float = 2.0
    diffusion_sigma: float = 1.5
    exp_steps: int = 4
    step_scale: float = 1.0
    convergence_tol: float = 1e-4
    bootstrap_b: int = 1000
    bootstrap_seed: int = 0
    confidence_level: float = 0.95
    week_limit: str = "all"
    population_ids: str = ""
    test_ids: str = ""
    workers: int = 1

    def __post_init__(self):
        self.registration_params()  # validates the registration block
        if self.bootstrap_b < 100:
            raise ValidationError("bootstrap_b must be >= 100")
        if not 0 < self.confidence_level < 1:
            raise ValidationError("confidence_level must be in (0, 1)")
        if self.week_limit not in ("all", "3"):
            raise ValidationError("week_limit must be 'all' or '3'")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")

    def registration_params(self) -> RegistrationParams:
        return RegistrationParams(
            pyramid_levels=self.pyramid_levels,
            iterations_per_level=self.iterations_per_level,
            lcc_sigma=self.lcc_sigma,
            fluid_sigma=self.fluid_sigma,
            diffusion_sigma=self.diffusion_sigma,
            exp_steps=self.exp_steps,
            step_scale=self.step_scale,
            convergence_tol=self.convergence_tol,
        )


_FIELD_TYPES = {"int": int, "float": float, "str": str}


def load_config(path=None, overrides=None) -> PipelineConfig:
    """Defaults, then `key value` lines from path, then CLI overrides."""
    values = {}
    types = {f.name: _FIELD_TYPES[f.type] for f in fields(PipelineConfig)}
    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, value = line.partition(" ")
                if key not in types or not value.strip():
                    raise ValidationError(
                        f"{path}:{lineno}: bad config line {line!r}")
                values[key] = types[key](value.strip())
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return PipelineConfig(**values)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key-value config file")
    for f in fields(PipelineConfig):
        parser.add_argument("--" + f.name.replace("_", "-"),
                            dest="cfg_" + f.name,
                            type=_FIELD_TYPES[f.type], default=None,
                            help=f"override config key {f.name}")


def _config_from_args(args) -> PipelineConfig:
    overrides = {f.name: getattr(args, "cfg_" + f.name)
                 for f in fields(PipelineConfig)}
    return load_config(args.config, overrides)


def _workers(cfg: PipelineConfig) -> int:
    cap = os.environ.get("DEFIELD_THREADS")
    workers = cfg.workers
    if cap is not None:
        workers = min(workers, max(1, int(cap)))
    return workers


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_register(args) -> int:
    cfg = _config_from_args(args)
    source = volio.read_volume(args.source)
    target = volio.read_volume(args.target)
    transform, trace = register(source, target, cfg.registration_params())
    save_transform(_outdir(args), transform, cfg.registration_params(), trace)
    print(f"registered {args.source} -> {args.target}: "
          f"max |g| = {transform.forward.max_norm():.3f} voxels, "
          f"artifacts in {args.out}")
    return EXIT_OK


def cmd_jacobian(args) -> int:
    field = volio.read_field(args.field)
    jmap = jacobian_map(field)
    out = os.path.join(_outdir(args), "jacobian.vol")
    defanalysis.write_jacobian(out, jmap)
    interior = jmap.data[1:-1, 1:-1, 1:-1]
    print(f"jacobian: min {interior.min():.4f} mean {interior.mean():.4f} "
          f"max {interior.max():.4f} -> {out}")
    return EXIT_OK


def cmd_regions(args) -> int:
    mask_prev = volio.read_mask(args.mask_prev)
    mask_next = volio.read_mask(args.mask_next)
    field = volio.read_field(args.field)
    warped = warp_mask(mask_prev, field)
    part = partition_regions(warped, mask_next, week_index=args.week)
    samples = collect_samples(jacobian_map(field), part)
    out = _outdir(args)
    defanalysis.write_partition(os.path.join(out, "partition.vol"), part)
    defanalysis.write_samples_csv(os.path.join(out, "samples.csv"), samples)
    print("region counts:", json.dumps(part.counts(), sort_keys=True))
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = _config_from_args(args)
    samples = defanalysis.read_samples_csv(args.samples)
    out = _outdir(args)
    report = {}
    records = []
    boxplot_rows = []
    for region in defanalysis.REGIONS:
        values = samples.samples[region]
        if values.size == 0:
            report[region] = None
            continue
        stats = summarize(values)
        entry = {"n": stats.n, "mean": stats.mean, "sd": stats.sd}
        if stats.n >= 2:
            ci = normal_ci(stats, cfg.confidence_level)
            boot = bootstrap_ci(values, cfg.bootstrap_b, cfg.confidence_level,
                                cfg.bootstrap_seed)
            whisk = normal_ci(stats, 0.98)
            q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75])
            entry.update(normal_ci=[ci.lo, ci.hi], bootstrap_ci=[boot.lo, boot.hi])
            inputs = {"region": region, "n": stats.n, "sd": stats.sd,
                      "level": cfg.confidence_level}
            records.append({"test": "normal_ci", "inputs": inputs,
                            "statistic": stats.mean, "p": None,
                            "interval": [ci.lo, ci.hi]})
            records.append({"test": "bootstrap_ci",
                            "inputs": {**inputs, "b": cfg.bootstrap_b,
                                       "seed": cfg.bootstrap_seed},
                            "statistic": stats.mean, "p": None,
                            "interval": [boot.lo, boot.hi]})
            boxplot_rows.append((region, stats.n, stats.mean, float(med),
                                 float(q1), float(q3), whisk.lo, whisk.hi))
        report[region] = entry
    _write_json(os.path.join(out, "stats.json"),
                {"confidence_level": cfg.confidence_level,
                 "bootstrap_b": cfg.bootstrap_b,
                 "bootstrap_seed": cfg.bootstrap_seed,
                 "regions": report,
                 "records": records})
    with open(os.path.join(out, "stats.csv"), "w", newline="\n") as fh:
        fh.write("region,n,mean,sd,normal_lo,normal_hi,boot_lo,boot_hi\n")
        for region in defanalysis.REGIONS:
            entry = report[region]
            if entry is None:
                continue
            if "normal_ci" in entry:
                fh.write(f"{region},{entry['n']},{entry['mean']!r},{entry['sd']!r},"
                         f"{entry['normal_ci'][0]!r},{entry['normal_ci'][1]!r},"
                         f"{entry['bootstrap_ci'][0]!r},{entry['bootstrap_ci'][1]!r}\n")
    with open(os.path.join(out, "boxplot.csv"), "w", newline="\n") as fh:
        fh.write("region,n,mean,median,q1,q3,whisker_lo98,whisker_hi98\n")
        for region, n, *values in boxplot_rows:
            fh.write(",".join([region, str(n)] + [repr(float(v)) for v in values]) + "\n")
    print(f"stats for {sum(1 for r in report.values() if r)} regions -> {out}")
    return EXIT_OK


def _split_report(report: CohortReport, ids: set[str]):
    from .cohort import build_contingency, metrics
    from .stats import fisher_exact
    sub = [p for p in report.patients if p.patient_id in ids]
    if not sub:
        return None
    out = {"n": len(sub)}
    for limit in ("all", "3"):
        try:
            table = build_contingency([p.decisions[limit] for p in sub],
                                      [p.recist for p in sub])
            m = metrics(table)
            orat, p = fisher_exact(table)
            out[limit] = {"contingency": table.as_tuple(), "metrics": m.as_dict(),
                          "fisher": {"odds_ratio": orat, "p": p}}
        except ValidationError as exc:
            out[limit] = {"error": str(exc)}
    return out


def cmd_classify(args) -> int:
    cfg = _config_from_args(args)
    records = load_manifest(args.manifest)
    report = run_cohort(records, cfg.registration_params(), _workers(cfg))
    out = _outdir(args)
    payload = report.as_dict()
    for name, id_csv in (("population", cfg.population_ids),
                         ("test", cfg.test_ids)):
        if id_csv:
            split = _split_report(report, set(id_csv.split(",")))
            payload.setdefault("splits", {})[name] = split
    _write_json(os.path.join(out, "report.json"), payload)
    with open(os.path.join(out, "decisions.csv"), "w", newline="\n") as fh:
        fh.write("patient_id,recist,decision_full,decision_3w,"
                 "mu_R_full,mu_G_full,mu_U_full,mu_N_full,"
                 "mu_R_3w,mu_G_3w,mu_U_3w,mu_N_3w,note\n")
        for p in report.patients:
            row = [p.patient_id, p.recist.value,
                   p.decisions["all"].value, p.decisions["3"].value]
            for limit in ("all", "3"):
                m = p.means[limit]
                row += ["" if v is None else repr(v)
                        for v in (m.mu_R, m.mu_G, m.mu_U, m.mu_N)]
            note = "; ".join(m.note for m in p.means.values() if m.note)
            row.append(note)
            fh.write(",".join(row) + "\n")
    def fmt(value, spec_str):
        return "" if value is None else format(value, spec_str)

    with open(os.path.join(out, "tables.csv"), "w", newline="\n") as fh:
        fh.write("limit,a,b,c,d,accuracy,precision,recall,odds_ratio,p\n")
        for limit in ("all", "3"):
            table = report.contingency[limit]
            if table is None:
                continue
            m = report.metric_table[limit]
            orat, pval = report.fisher[limit] or (None, None)
            fh.write(f"{limit},{table.a},{table.b},{table.c},{table.d},"
                     f"{fmt(m.accuracy, '.1f')},{fmt(m.precision, '.1f')},"
                     f"{fmt(m.recall, '.1f')},{fmt(orat, '.2f')},"
                     f"{fmt(pval, '.3f')}\n")
    with open(os.path.join(out, "boxplot.csv"), "w", newline="\n") as fh:
        fh.write("group,region,n,mean,median,q1,q3,whisker_lo98,whisker_hi98\n")
        for row in report.boxplot:
            fh.write(f"{row['group']},{row['region']},{row['n']},"
                     f"{row['mean']!r},{row['median']!r},{row['q1']!r},"
                     f"{row['q3']!r},{row['whisker_lo98']!r},"
                     f"{row['whisker_hi98']!r}\n")
    n_pr = {limit: sum(1 for p in report.patients
                       if p.decisions[limit].value == "PR-classified")
            for limit in ("all", "3")}
    print(f"classified {len(report.patients)} patients: "
          f"{n_pr['all']} PR (full), {n_pr['3']} PR (three weeks)")
    for warning in report.warnings:
        print("warning:", warning)
    return EXIT_OK


def cmd_phantom(args) -> int:
    dims = (args.grid, args.grid, args.grid)
    spec = PhantomSpec(
        grid=GridGeometry(dims),
        radius=args.radius,
        mode=args.mode,
        amplitude=args.amplitude,
        noise_sd=args.noise_sd,
        weeks=args.weeks,
        seed=args.seed,
    )
    out = _outdir(args)
    courses = synth_cohort(spec, args.patients)
    rows = []
    for index, course in enumerate(courses):
        rows.extend(course.write(out, f"p{index:02d}", recist=args.recist))
    manifest = os.path.join(out, "manifest.csv")
    with open(manifest, "w", newline="\n") as fh:
        fh.write("patient_id,week,volume_path,mask_path,recist\n")
        for row in rows:
            fh.write(f"{row['patient_id']},{row['week']},"
                     f"{os.path.relpath(row['volume_path'], out)},"
                     f"{os.path.relpath(row['mask_path'], out)},{row['recist']}\n")
    print(f"wrote {args.patients} synthetic {args.mode} patients -> {manifest}")
    return EXIT_OK


def cmd_reproduce_paper(args) -> int:
    rows = load_fixture(args.fixture)
    rep = reproduce_from_fixture(rows)
    out = _outdir(args)
    _write_json(os.path.join(out, "reproduction.json"), rep.as_dict())
    with open(os.path.join(out, "tables.csv"), "w", newline="\n") as fh:
        fh.write("limit,a,b,c,d,accuracy,precision,recall,odds_ratio,p\n")
        for limit in ("all", "3"):
            table = rep.contingency[limit]
            m = rep.metric_table[limit]
            orat, pval = rep.fisher[limit]
            fh.write(f"{limit},{table.a},{table.b},{table.c},{table.d},"
                     f"{m.accuracy:.1f},{m.precision:.1f},{m.recall:.1f},"
                     f"{orat:.2f},{pval:.3f}\n")
    for limit, title in (("all", "full course"), ("3", "first three weeks")):
        table = rep.contingency[limit]
        orat, pval = rep.fisher[limit]
        m = rep.metric_table[limit]
        print(f"{title}: contingency {table.as_tuple()}, "
              f"OR = {orat:.2f}, p = {pval:.3f}, "
              f"accuracy {m.accuracy:.1f}, precision {m.precision:.1f}, "
              f"recall {m.recall:.1f}")
    for flag in rep.flags:
        print("flag:", flag)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="defield",
        description="deformation-field analysis of serial 3-D scans")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register a source volume onto a target")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("jacobian", help="Jacobian-determinant map of a field")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_jacobian)

    p = sub.add_parser("regions", help="partition tumor regions and collect samples")
    p.add_argument("--mask-prev", required=True, dest="mask_prev")
    p.add_argument("--mask-next", required=True, dest="mask_next")
    p.add_argument("--field", required=True, help="forward displacement field")
    p.add_argument("--week", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_regions)

    p = sub.add_parser("stats", help="confidence-interval report from samples CSV")
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("classify", help="run the cohort pipeline from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("phantom", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("shrink", "grow", "stable"), default="shrink")
    p.add_argument("--patients", type=int, default=1)
    p.add_argument("--grid", type=int, default=40)
    p.add_argument("--radius", type=float, default=12.0)
    p.add_argument("--amplitude", type=float, default=1.1)
    p.add_argument("--noise-sd", type=float, default=0.02, dest="noise_sd")
    p.add_argument("--weeks", type=int, default=4)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--recist", default="NA")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("reproduce-paper",
                       help="tables, metrics and Fisher results from the "
                            "shipped response fixture")
    p.add_argument("--fixture", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reproduce_paper)
    return parser


def _error_record(code: str, message: str, input_path=None) -> None:
    record = {"error": code, "message": message}
    if input_path:
        record["input"] = str(input_path)
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        _error_record("missing-input", str(exc), exc.filename)
        return EXIT_MISSING_INPUT
    except VolFormatError as exc:
        _error_record("format-error", str(exc))
        return EXIT_FORMAT
    except DefieldError as exc:
        _error_record("invalid-input", str(exc))
        return EXIT_INVALID
    except Exception as exc:  # pragma: no cover - defensive
        _error_record("internal-error", f"{type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
