"""Vulnerability report ingestion and CVE survival after debloating.

Reports are consumed offline as JSON. The primary schema is the subset of
Grype's ``matches[]`` layout documented in docs/vuln-reports.md; a
converter for Trivy's ``Results[]`` layout is provided as well. A CVE
survives debloating unless every file it is tied to was removed, so the
reduction numbers stay conservative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

from .errors import VulnReportError
from .imagefs import FileSet
from .packages import PackageRecord, canonical_pip_name

log = logging.getLogger(__name__)

SEVERITIES = ("Critical", "High", "Medium", "Low", "Negligible")

# Scanner labels vary; anything outside the five levels maps to Negligible
# (with a diagnostic). The table ships in docs/vuln-reports.md.
_SEVERITY_ALIASES = {s.lower(): s for s in SEVERITIES} | {
    "unknown": "Negligible",
    "none": "Negligible",
    "": "Negligible",
}


@dataclass(frozen=True)
class VulnMatch:
    """One scanner finding tied to a package and optionally to files."""

    cve_id: str
    severity: str
    pkg_name: str
    pkg_version: str
    locations: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")
        if not self.locations and not self.pkg_name:
            raise ValueError(f"{self.cve_id}: needs locations or a package name")


@dataclass(frozen=True)
class VulnDiff:
    """Partition of matches into removed-by-debloating and retained."""

    removed: tuple[VulnMatch, ...]
    retained: tuple[VulnMatch, ...]
    reduction: float | None


def normalize_severity(label: str) -> str:
    sev = _SEVERITY_ALIASES.get(label.strip().lower())
    if sev is None:
        log.warning("unknown severity %r; treating as Negligible", label)
        return "Negligible"
    return sev


def _require(obj: Any, key: str, where: str) -> Any:
    if not isinstance(obj, dict) or key not in obj:
        raise VulnReportError(f"missing required field at {where}.{key}")
    return obj[key]


def _norm_location(path: str) -> str:
    return path if path.startswith("/") else "/" + path


def load_report(doc: Any) -> list[VulnMatch]:
    """Parse a scanner report (Grype matches[] subset) into VulnMatch rows.

    ``doc`` is the decoded JSON document: either {"matches": [...]} or the
    bare array. Duplicate (cve, package, version) entries are merged with
    their locations unioned. Schema violations are fatal and name the JSON
    path of the offending field.
    """
    if isinstance(doc, dict):
        matches = _require(doc, "matches", "$")
    else:
        matches = doc
    if not isinstance(matches, list):
        raise VulnReportError("$.matches is not an array")
    merged: dict[tuple[str, str, str], tuple[str, set[str]]] = {}
    order: list[tuple[str, str, str]] = []
    for i, m in enumerate(matches):
        where = f"$.matches[{i}]"
        vul = _require(m, "vulnerability", where)
        art = _require(m, "artifact", where)
        cve = _require(vul, "id", f"{where}.vulnerability")
        sev = normalize_severity(str(_require(vul, "severity", f"{where}.vulnerability")))
        name = str(_require(art, "name", f"{where}.artifact"))
        version = str(_require(art, "version", f"{where}.artifact"))
        locs = set()
        for j, loc in enumerate(art.get("locations") or []):
            locs.add(_norm_location(str(_require(loc, "path", f"{where}.artifact.locations[{j}]"))))
        if not isinstance(cve, str) or not cve:
            raise VulnReportError(f"{where}.vulnerability.id must be a non-empty string")
        key = (cve, name, version)
        if key in merged:
            old_sev, old_locs = merged[key]
            if old_sev != sev:
                log.warning("conflicting severities for %s; keeping %s", key, old_sev)
            old_locs |= locs
        else:
            merged[key] = (sev, locs)
            order.append(key)
    out = []
    for key in order:
        sev, locs = merged[key]
        out.append(VulnMatch(cve_id=key[0], severity=sev, pkg_name=key[1],
                             pkg_version=key[2], locations=frozenset(locs)))
    return sorted(out, key=lambda v: (v.cve_id, v.pkg_name, v.pkg_version))


def load_trivy_report(doc: Any) -> list[VulnMatch]:
    """Convert Trivy's Results[].Vulnerabilities[] layout to VulnMatch rows.

    Trivy reports carry no per-file locations for OS packages, so matches
    fall back to package-file coverage during survival analysis.
    """
    results = _require(doc, "Results", "$")
    if not isinstance(results, list):
        raise VulnReportError("$.Results is not an array")
    grype_like = []
    for i, res in enumerate(results):
        for j, v in enumerate(res.get("Vulnerabilities") or []):
            where = f"$.Results[{i}].Vulnerabilities[{j}]"
            grype_like.append({
                "vulnerability": {
                    "id": _require(v, "VulnerabilityID", where),
                    "severity": str(v.get("Severity", "Unknown")),
                },
                "artifact": {
                    "name": _require(v, "PkgName", where),
                    "version": str(v.get("InstalledVersion", "")),
                    "locations": [],
                },
            })
    return load_report(grype_like)


def _catalog_lookup(catalog: Sequence[PackageRecord]):
    exact: dict[tuple[str, str], PackageRecord] = {}
    normalized: dict[tuple[str, str], PackageRecord] = {}
    for rec in catalog:
        exact.setdefault((rec.name, rec.version), rec)
        normalized.setdefault((canonical_pip_name(rec.name), rec.version), rec)
    return exact, normalized


def surviving_cves(matches: Iterable[VulnMatch], bloat: FileSet,
                   catalog: Sequence[PackageRecord] = ()) -> VulnDiff:
    """Decide which findings debloating removed.

    A match is removed iff all of its file locations lie in the bloat set,
    or, lacking locations, iff the matched catalog package has files and
    every one of them lies in the bloat set. Matches that resolve to no
    catalog package and carry no locations are retained conservatively.
    """
    exact, normalized = _catalog_lookup(catalog)
    removed, retained = [], []
    for match in matches:
        if match.locations:
            gone = all(loc in bloat.entries for loc in match.locations)
        else:
            rec = exact.get((match.pkg_name, match.pkg_version)) or \
                normalized.get((canonical_pip_name(match.pkg_name), match.pkg_version))
            if rec is None:
                log.debug("no catalog package for %s %s; retaining %s conservatively",
                          match.pkg_name, match.pkg_version, match.cve_id)
                gone = False
            elif not rec.files:
                log.debug("package %s owns no files; retaining %s conservatively",
                          match.pkg_name, match.cve_id)
                gone = False
            else:
                gone = all(f in bloat.entries for f in rec.files)
        (removed if gone else retained).append(match)
    total = len(removed) + len(retained)
    reduction = len(removed) / total if total else None
    return VulnDiff(tuple(removed), tuple(retained), reduction)


@dataclass(frozen=True)
class SeverityTable:
    """Per-severity CVE counts before and after debloating."""

    rows: tuple[tuple[str, int, int], ...]  # (severity, before, after)
    total_before: int
    total_after: int
    reduction_percent: int | None


def severity_table(diff: VulnDiff) -> SeverityTable:
    """Tabulate counts by severity; reduction is rendered as a whole percent."""
    before = {s: 0 for s in SEVERITIES}
    after = {s: 0 for s in SEVERITIES}
    for m in diff.removed:
        before[m.severity] += 1
    for m in diff.retained:
        before[m.severity] += 1
        after[m.severity] += 1
    total_before = sum(before.values())
    total_after = sum(after.values())
    if total_before:
        reduction = int((1 - total_after / total_before) * 100 + 0.5)
    else:
        reduction = None
    return SeverityTable(
        rows=tuple((s, before[s], after[s]) for s in SEVERITIES),
        total_before=total_before,
        total_after=total_after,
        reduction_percent=reduction,
    )


def vuln_counts_by_package(matches: Iterable[VulnMatch],
                           catalog: Sequence[PackageRecord]) -> dict[str, int]:
    """Number of distinct CVE findings per catalog package graph key."""
    exact, normalized = _catalog_lookup(catalog)
    counts: dict[str, int] = {}
    for match in matches:
        rec = exact.get((match.pkg_name, match.pkg_version)) or \
            normalized.get((canonical_pip_name(match.pkg_name), match.pkg_version))
        if rec is not None:
            counts[rec.graph_key] = counts.get(rec.graph_key, 0) + 1
    return counts
