"""Pipeline orchestration and report generation.

``run_pipeline`` wires the stages together (filesystem -> trace ->
debloat -> packages -> vulnerabilities -> dependency graph) and produces
an :class:`AnalysisBundle` whose serializable document is written as
``bundle.json``. Every CSV table and plot-data file the toolkit emits is
derived from that document alone, so reports can be regenerated without
re-ingesting the container. Output bytes are deterministic for identical
inputs; the provenance timestamp honors ``SOURCE_DATE_EPOCH``.
"""

from __future__ import annotations

import bisect
import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Sequence

from ._version import __version__
from .debloat import DebloatResult, debloat, materialize, render_manifest
from .depgraph import (
    PackageAttrGraph,
    build_graph,
    depth_correlations,
    pd_aggregate,
    pd_set,
    pr_set,
    to_dot,
    to_node_link,
)
from .errors import ContractViolation, InputError, VulnReportError
from .imagefs import (
    REGULAR,
    ContentSource,
    FileSet,
    FlatTarSource,
    LayeredSource,
    RootfsSource,
    load_flat_tar,
    load_layers,
    load_rootfs,
)
from .packages import (
    APT,
    CONDA,
    GENERIC,
    ML,
    PIP,
    PackageRecord,
    build_owner_index,
    category_breakdown,
    detect_packages,
    load_rules,
    package_bloat_degree,
    quartile_summary,
    size_reduction_R,
)
from .trace import parse_trace
from .vuln import (
    VulnDiff,
    load_report,
    load_trivy_report,
    severity_table,
    surviving_cves,
    vuln_counts_by_package,
)

log = logging.getLogger(__name__)

PARETO_FRACTION = 0.8


def _r6(x: float) -> float:
    return round(x, 6)


# -- Plot-ready statistics ------------------------------------------------


def pareto_files(fs: FileSet, fraction: float) -> list[tuple[str, int, float]]:
    """Largest-first file prefix covering ``fraction`` of the total size.

    Regular files are sorted by size descending (ties by path ascending)
    and truncated at the first prefix whose cumulative size reaches
    fraction * total. Each row carries the cumulative fraction so far.
    """
    if not 0 < fraction <= 1:
        raise ContractViolation(f"fraction must be in (0, 1], got {fraction}")
    regs = sorted(
        (e for e in fs.entries.values() if e.kind == REGULAR),
        key=lambda e: (-e.size, e.path),
    )
    total = sum(e.size for e in regs)
    if total == 0:
        return []
    threshold = fraction * total
    rows = []
    cum = 0
    for e in regs:
        cum += e.size
        rows.append((e.path, e.size, cum / total))
        if cum >= threshold or math.isclose(cum, threshold, rel_tol=1e-9):
            break
    return rows


_HIST_BOUNDS = [i / 10 for i in range(1, 10)]


def bloat_degree_histogram(values: Sequence[float]) -> list[int]:
    """Counts in ten bins [0,0.1), ..., [0.9,1.0]; the last bin is closed."""
    counts = [0] * 10
    for v in values:
        if not 0 <= v <= 1:
            raise ContractViolation(f"bloat degree out of range: {v}")
        counts[bisect.bisect_right(_HIST_BOUNDS, v)] += 1
    return counts


def cdf_points(values: Sequence[float]) -> list[tuple[float, float]]:
    """Empirical CDF: one (value, cumulative probability) step per distinct
    value, in ascending order."""
    if not values:
        raise ContractViolation("cdf_points requires a nonempty value list")
    ordered = sorted(values)
    n = len(ordered)
    points = []
    for i, v in enumerate(ordered, start=1):
        if i == n or ordered[i] != v:
            points.append((v, i / n))
    return points


# -- Pipeline -------------------------------------------------------------


@dataclass
class PipelineConfig:
    """Inputs for one analysis run. Exactly one of rootfs/layers is set."""

    rootfs: str | None = None
    layers: tuple[str, ...] = ()
    trace: str | None = None
    vuln_report: str | None = None
    rules: str | None = None
    keep: tuple[str, ...] = ()
    include_failed: bool = False
    root_prefix: str = "/"
    container_id: str | None = None
    out: str | None = None
    emit_tar: bool = False


@dataclass
class AnalysisBundle:
    """Everything one pipeline run produced, plus its JSON document."""

    container_id: str
    debloat: DebloatResult
    catalog: list[PackageRecord]
    d_p: dict[str, float]
    vuln: VulnDiff | None
    graph: PackageAttrGraph
    document: dict
    partial_errors: list[str] = field(default_factory=list)


def _timestamp() -> str:
    sde = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(sde) if sde else int(time.time())
    return datetime.fromtimestamp(t, timezone.utc).isoformat()


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_image(config: PipelineConfig) -> tuple[FileSet, ContentSource]:
    if bool(config.rootfs) == bool(config.layers):
        raise InputError("exactly one of --rootfs or --layers is required",
                         flag="--rootfs")
    if config.rootfs:
        if not os.path.isdir(config.rootfs):
            raise InputError(f"rootfs directory not found: {config.rootfs}",
                             flag="--rootfs")
        return load_rootfs(config.rootfs), RootfsSource(config.rootfs)
    for layer in config.layers:
        if not os.path.isfile(layer):
            raise InputError(f"layer tar not found: {layer}", flag="--layers")
    if len(config.layers) == 1:
        return load_flat_tar(config.layers[0]), FlatTarSource(config.layers[0])
    return load_layers(config.layers), LayeredSource(config.layers)


def load_any_report(doc):
    """Accept either the Grype matches[] layout or Trivy's Results[]."""
    if isinstance(doc, dict) and "Results" in doc and "matches" not in doc:
        return load_trivy_report(doc)
    return load_report(doc)


def run_pipeline(config: PipelineConfig) -> AnalysisBundle:
    """Execute the full analysis and (if configured) write all outputs.

    Optional inputs produce partial bundles: without a vulnerability
    report the vuln section is null. A vulnerability report that is
    present but unreadable is recorded in ``partial_errors`` instead of
    aborting the run.
    """
    if not config.trace:
        raise InputError("a trace log is required", flag="--trace")
    if not os.path.isfile(config.trace):
        raise InputError(f"trace log not found: {config.trace}", flag="--trace")
    if config.vuln_report and not os.path.isfile(config.vuln_report):
        raise InputError(f"vulnerability report not found: {config.vuln_report}",
                         flag="--vuln-report")
    if config.rules and not os.path.isfile(config.rules):
        raise InputError(f"rules file not found: {config.rules}", flag="--rules")

    fs, source = _load_image(config)
    partial_errors: list[str] = []
    container_id = config.container_id or _default_container_id(config)
    rules = load_rules(config.rules)

    access = parse_trace(config.trace, root_prefix=config.root_prefix,
                         include_failed=config.include_failed)
    result = debloat(fs, access, keep=config.keep)
    catalog = detect_packages(fs, source, rules)
    dp_pairs = [(rec, package_bloat_degree(rec, result.bloat, fs)) for rec in catalog]
    dp_map: dict[str, float] = {}
    for rec, dp in dp_pairs:
        dp_map.setdefault(rec.graph_key, dp)

    vuln_diff = None
    vuln_counts: dict[str, int] = {}
    if config.vuln_report:
        try:
            with open(config.vuln_report, "r", encoding="utf-8") as f:
                doc = json.load(f)
            matches = load_any_report(doc)
            vuln_diff = surviving_cves(matches, result.bloat, catalog)
            vuln_counts = vuln_counts_by_package(matches, catalog)
        except (VulnReportError, json.JSONDecodeError) as exc:
            msg = f"vulnerability report ignored: {exc}"
            log.error("%s", msg)
            partial_errors.append(msg)

    graph = build_graph(catalog, dp_map, vuln_counts)
    document = _build_document(config, container_id, fs, result, catalog,
                               dp_pairs, dp_map, vuln_diff, graph, partial_errors)
    bundle = AnalysisBundle(
        container_id=container_id, debloat=result, catalog=catalog,
        d_p=dp_map, vuln=vuln_diff, graph=graph, document=document,
        partial_errors=partial_errors,
    )
    if config.out:
        write_outputs(bundle, config, source)
    return bundle


def _default_container_id(config: PipelineConfig) -> str:
    base = config.rootfs or config.layers[0]
    name = os.path.basename(os.path.normpath(base))
    return name or "container"


def _provenance(config: PipelineConfig, fs: FileSet) -> dict:
    inputs: dict[str, object] = {}
    digests: dict[str, object] = {"filesystem": hashlib.sha256(
        render_manifest(fs).encode("utf-8")).hexdigest()}
    if config.rootfs:
        inputs["rootfs"] = config.rootfs
    if config.layers:
        inputs["layers"] = list(config.layers)
        digests["layers"] = [_sha256_file(p) for p in config.layers]
    inputs["trace"] = config.trace
    digests["trace"] = _sha256_file(config.trace)
    for field_name in ("vuln_report", "rules"):
        value = getattr(config, field_name)
        if value:
            inputs[field_name] = value
            digests[field_name] = _sha256_file(value)
    if config.keep:
        inputs["keep"] = list(config.keep)
    if config.include_failed:
        inputs["include_failed"] = True
    if config.root_prefix != "/":
        inputs["root_prefix"] = config.root_prefix
    return {
        "tool": "bloatlens",
        "version": __version__,
        "generated_at": _timestamp(),
        "inputs": inputs,
        "input_digests": digests,
    }


def _build_document(config: PipelineConfig, container_id: str, fs: FileSet,
                    result: DebloatResult, catalog: list[PackageRecord],
                    dp_pairs: list[tuple[PackageRecord, float]],
                    dp_map: dict[str, float], vuln_diff: VulnDiff | None,
                    graph: PackageAttrGraph,
                    partial_errors: list[str]) -> dict:
    index = build_owner_index(catalog, fs)
    container_breakdown = category_breakdown(fs, index)
    bloat_breakdown = category_breakdown(result.bloat, index)

    catalog_rows = []
    for rec, dp in dp_pairs:
        catalog_rows.append({
            "manager": rec.manager,
            "name": rec.name,
            "version": rec.version,
            "functionality": rec.functionality,
            "size": rec.size,
            "bloat_bytes": _bloat_bytes(rec, result.bloat),
            "files": len(rec.files),
            "d_p": _r6(dp),
        })

    quartiles = {}
    for manager in (APT, PIP, CONDA):
        values = [dp for rec, dp in dp_pairs if rec.manager == manager]
        if values:
            q = quartile_summary(values)
            quartiles[manager] = {"count": q.count, "mean": q.mean,
                                  "q1": q.q1, "q2": q.q2, "q3": q.q3}

    reductions = {}
    for label, functionality in (("ml", ML), ("generic", GENERIC)):
        subset = [(rec, dp) for rec, dp in dp_pairs if rec.functionality == functionality]
        r = size_reduction_R(subset) if subset else None
        reductions[label] = _r6(r) if r is not None else None
    r_all = size_reduction_R(dp_pairs) if dp_pairs else None
    reductions["all"] = _r6(r_all) if r_all is not None else None

    dp_values = [dp for _, dp in dp_pairs]
    violin = {}
    for label, functionality in (("ml", ML), ("generic", GENERIC)):
        rows = [(rec, dp) for rec, dp in dp_pairs if rec.functionality == functionality]
        violin[label] = {
            "sizes": sorted(rec.size for rec, _ in rows),
            "d_p": sorted(_r6(dp) for _, dp in rows),
            "bloat_sizes": sorted(_bloat_bytes(rec, result.bloat) for rec, _ in rows),
        }
        for series in ("sizes", "d_p", "bloat_sizes"):
            data = violin[label][series]
            violin[label][f"{series}_summary"] = _series_summary(data)

    graph_doc = to_node_link(graph)
    per_node = []
    for key in sorted(graph.nodes):
        avg_dp, pd_vulns = pd_aggregate(graph, key)
        per_node.append({
            "key": key,
            "depth": graph.nodes[key].depth,
            "pd": len(pd_set(graph, key)),
            "pr": len(pr_set(graph, key)),
            "pd_avg_d_p": _r6(avg_dp) if avg_dp is not None else None,
            "pd_total_vulns": pd_vulns,
        })
    correlations = {}
    for manager in (APT, PIP, CONDA):
        cor_pd, cor_pr = depth_correlations(graph, manager)
        correlations[manager] = {
            "depth_vs_pd": _r6(cor_pd) if cor_pd is not None else None,
            "depth_vs_pr": _r6(cor_pr) if cor_pr is not None else None,
        }
    cdfs = _cdf_section(per_node, graph)

    vuln_doc = None
    if vuln_diff is not None:
        table = severity_table(vuln_diff)
        vuln_doc = {
            "removed": [_match_row(m) for m in vuln_diff.removed],
            "retained": [_match_row(m) for m in vuln_diff.retained],
            "reduction": _r6(vuln_diff.reduction) if vuln_diff.reduction is not None else None,
            "severity_table": {
                "rows": [{"severity": s, "before": b, "after": a}
                         for s, b, a in table.rows],
                "total_before": table.total_before,
                "total_after": table.total_after,
                "reduction_percent": table.reduction_percent,
            },
        }

    return {
        "container_id": container_id,
        "provenance": _provenance(config, fs),
        "debloat": {
            "s_c": result.s_c,
            "s_c_prime": result.s_c_prime,
            "d_c": _r6(result.d_c),
            "files_original": len(fs.entries),
            "files_retained": len(result.retained.entries),
            "files_bloat": len(result.bloat.entries),
        },
        "packages": {
            "catalog": catalog_rows,
            "quartiles_by_manager": quartiles,
            "size_reduction": reductions,
            "histogram_d_p": bloat_degree_histogram(dp_values) if dp_values else [0] * 10,
            "category_breakdown": {
                "container": _breakdown_doc(container_breakdown),
                "bloat": _breakdown_doc(bloat_breakdown),
            },
            "violin": violin,
        },
        "vuln": vuln_doc,
        "graph": {
            **graph_doc,
            "per_node": per_node,
            "correlations": correlations,
            "cdfs": cdfs,
        },
        "pareto": {
            "fraction": PARETO_FRACTION,
            "original": [_pareto_row(r) for r in pareto_files(fs, PARETO_FRACTION)],
            "retained": [_pareto_row(r) for r in pareto_files(result.retained, PARETO_FRACTION)],
        },
        "partial_errors": list(partial_errors),
    }


def _bloat_bytes(rec: PackageRecord, bloat: FileSet) -> int:
    return sum(e.size for p in rec.files
               if (e := bloat.entries.get(p)) is not None and e.kind == REGULAR)


def _series_summary(data: list) -> dict:
    if not data:
        return {"min": None, "median": None, "max": None}
    mid = data[len(data) // 2] if len(data) % 2 else (
        (data[len(data) // 2 - 1] + data[len(data) // 2]) / 2)
    return {"min": data[0], "median": _r6(float(mid)), "max": data[-1]}


def _match_row(m) -> dict:
    return {
        "cve_id": m.cve_id,
        "severity": m.severity,
        "pkg_name": m.pkg_name,
        "pkg_version": m.pkg_version,
        "locations": sorted(m.locations),
    }


def _pareto_row(row: tuple[str, int, float]) -> dict:
    path, size, cum = row
    return {"path": path, "size": size, "cumulative_fraction": _r6(cum)}


def _breakdown_doc(b) -> dict:
    return {
        "by_manager": {k: _r6(v) for k, v in b.by_manager.items()},
        "by_functionality": {k: _r6(v) for k, v in b.by_functionality.items()},
        "overlap_files": b.overlap_files,
        "total_bytes": b.total_bytes,
    }


def _cdf_section(per_node: list[dict], graph: PackageAttrGraph) -> dict:
    cdfs: dict[str, dict] = {}
    for manager in (APT, PIP, CONDA):
        rows = [r for r in per_node if graph.nodes[r["key"]].manager == manager]
        if not rows:
            continue
        section = {
            "pd": [[v, _r6(p)] for v, p in cdf_points([r["pd"] for r in rows])],
            "pr": [[v, _r6(p)] for v, p in cdf_points([r["pr"] for r in rows])],
            "pd_total_vulns": [[v, _r6(p)] for v, p in
                               cdf_points([r["pd_total_vulns"] for r in rows])],
        }
        avg_values = [r["pd_avg_d_p"] for r in rows if r["pd_avg_d_p"] is not None]
        if avg_values:
            section["pd_avg_d_p"] = [[_r6(v), _r6(p)] for v, p in cdf_points(avg_values)]
        cdfs[manager] = section
    return cdfs


# -- Output writing -------------------------------------------------------


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt2(x) -> str:
    return "" if x is None else f"{x:.2f}"


def tables_from_document(doc: dict) -> dict[str, str]:
    """Render every CSV table from the bundle document alone."""
    tables: dict[str, str] = {}
    tables["container_bloat.csv"] = _csv_text(
        ["container_id", "s_c", "s_c_prime", "d_c"],
        [[doc["container_id"], doc["debloat"]["s_c"], doc["debloat"]["s_c_prime"],
          _fmt2(doc["debloat"]["d_c"])]],
    )
    tables["package_bloat_degrees.csv"] = _csv_text(
        ["manager", "name", "version", "functionality", "size", "bloat_bytes",
         "files", "d_p"],
        [[r["manager"], r["name"], r["version"], r["functionality"], r["size"],
          r["bloat_bytes"], r["files"], _fmt2(r["d_p"])]
         for r in doc["packages"]["catalog"]],
    )
    tables["quartiles_by_manager.csv"] = _csv_text(
        ["manager", "count", "mean", "q1", "q2", "q3"],
        [[m, q["count"], _fmt2(q["mean"]), _fmt2(q["q1"]), _fmt2(q["q2"]), _fmt2(q["q3"])]
         for m, q in sorted(doc["packages"]["quartiles_by_manager"].items())],
    )
    tables["size_reduction.csv"] = _csv_text(
        ["package_set", "R"],
        [[label, _fmt2(value)]
         for label, value in sorted(doc["packages"]["size_reduction"].items())],
    )
    breakdown_rows = []
    for scope in ("container", "bloat"):
        b = doc["packages"]["category_breakdown"][scope]
        for dimension, key in (("manager", "by_manager"), ("functionality", "by_functionality")):
            for category, value in sorted(b[key].items()):
                breakdown_rows.append([scope, dimension, category, _fmt2(value)])
    tables["category_breakdown.csv"] = _csv_text(
        ["scope", "dimension", "category", "proportion"], breakdown_rows)
    tables["package_dependency.csv"] = _csv_text(
        ["package", "depth", "pd", "pr", "pd_avg_d_p", "pd_total_vulns"],
        [[r["key"], r["depth"], r["pd"], r["pr"], _fmt2(r["pd_avg_d_p"]),
          r["pd_total_vulns"]] for r in doc["graph"]["per_node"]],
    )
    tables["depth_correlations.csv"] = _csv_text(
        ["manager", "cor_depth_pd", "cor_depth_pr"],
        [[m, _fmt2(c["depth_vs_pd"]), _fmt2(c["depth_vs_pr"])]
         for m, c in sorted(doc["graph"]["correlations"].items())],
    )
    if doc.get("vuln"):
        table = doc["vuln"]["severity_table"]
        rows = [[r["severity"], r["before"], r["after"]] for r in table["rows"]]
        rows.append(["Total", table["total_before"], table["total_after"]])
        reduction = table["reduction_percent"]
        rows.append(["Reduction", "", "" if reduction is None else f"{reduction}%"])
        tables["severity_table.csv"] = _csv_text(["severity", "before", "after"], rows)
    return tables


def plots_from_document(doc: dict) -> dict[str, str]:
    """Render every plot-data JSON file from the bundle document alone."""
    plots = {
        "pareto_original.json": _dump_json(doc["pareto"]["original"]),
        "pareto_retained.json": _dump_json(doc["pareto"]["retained"]),
        "bloat_degree_histogram.json": _dump_json({
            "bin_width": 0.1,
            "counts": doc["packages"]["histogram_d_p"],
        }),
        "cdf_pd_pr.json": _dump_json(doc["graph"]["cdfs"]),
        "violin_packages.json": _dump_json(doc["packages"]["violin"]),
    }
    if doc.get("vuln"):
        plots["severity_table.json"] = _dump_json(doc["vuln"]["severity_table"])
    return plots


def write_report_files(doc: dict, out: str) -> None:
    for name, text in tables_from_document(doc).items():
        _write_text(os.path.join(out, "tables", name), text)
    for name, text in plots_from_document(doc).items():
        _write_text(os.path.join(out, "plots", name), text)


def write_outputs(bundle: AnalysisBundle, config: PipelineConfig,
                  source: ContentSource) -> None:
    out = config.out
    os.makedirs(out, exist_ok=True)
    _write_text(os.path.join(out, "bundle.json"), _dump_json(bundle.document))
    _write_text(os.path.join(out, "manifest.tsv"), render_manifest(bundle.debloat.retained))
    _write_text(os.path.join(out, "graph.json"), _dump_json(to_node_link(bundle.graph)))
    _write_text(os.path.join(out, "graph.dot"), to_dot(bundle.graph))
    write_report_files(bundle.document, out)
    if config.emit_tar:
        materialize(bundle.debloat.retained, source,
                    os.path.join(out, "debloated.tar"), fmt="tar")
