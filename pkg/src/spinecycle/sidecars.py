"""Sidecar file formats: small structured text files that travel next to
the image volumes.

All writers are atomic (temp file + rename in the target directory) and
all floats are written with full round-trip precision.  JSON documents
carry an explicit "schema_version"; loaders reject unknown fields naming
the offending field and the schema version they implement.

Formats
-------
locations (.txt)     one record per line: ``<label> <x> <y> <z>`` in world
                     mm, ``?`` for an unassigned label, ``#`` comments.
probabilities (.json) {"schema_version": 1, "records": [{"group": [3],
                     "cervical": [7], "thoracic": [12], "lumbar": [5]}]}
stats (.json)        fitted anatomy priors, see default_stats.json.
annotations (.json)  training scans for fit-stats.
report (.json)       consistency report written by run-cycle.
manifest (.json)     inputs and oracle wiring for run-cycle.
"""

from __future__ import annotations

import importlib.resources
import json
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from . import labels
from .labels import Group, GROUPS
from .priors import (AnatomyStats, DistanceGaussian, DistanceRegressor, GapMode,
                     GroupStats, MreBounds, ScanAnnotation, VolumeRegressor)
from .records import Flag, InconsistencyReport, LocalPrediction, ReportEntry, TransitionalEvent

SCHEMA_VERSION = 1


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write text so readers never observe a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_bytes(path: str | Path, blob: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _dump_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _require_keys(obj: dict, allowed: set[str], required: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError(f"{where}: unknown field(s) {sorted(unknown)} "
                         f"(schema version {SCHEMA_VERSION})")
    missing = required - set(obj)
    if missing:
        raise ValueError(f"{where}: missing field(s) {sorted(missing)}")


def _check_version(doc: dict, where: str) -> None:
    v = doc.get("schema_version")
    if v != SCHEMA_VERSION:
        raise ValueError(f"{where}: unsupported schema_version {v!r}, expected {SCHEMA_VERSION}")


# -- locations ------------------------------------------------------------------


def write_locations(path: str | Path,
                    rows: list[tuple[int | None, np.ndarray]]) -> None:
    lines = ["# label x_mm y_mm z_mm"]
    for code, loc in rows:
        name = labels.name_of(code) if code is not None else "?"
        x, y, z = (repr(float(v)) for v in np.asarray(loc, dtype=np.float64))
        lines.append(f"{name} {x} {y} {z}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_locations(path: str | Path) -> list[tuple[int | None, np.ndarray]]:
    out: list[tuple[int | None, np.ndarray]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'label x y z', got {raw!r}")
        code = None if parts[0] == "?" else labels.code_of(parts[0])
        try:
            vec = np.array([float(p) for p in parts[1:]], dtype=np.float64)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad coordinate in {raw!r}") from None
        out.append((code, vec))
    return out


# -- probabilities ----------------------------------------------------------------


def write_probabilities(path: str | Path, preds: list[LocalPrediction]) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "records": [
            {
                "group": [float(v) for v in p.group_probs],
                "cervical": [float(v) for v in p.within_cervical],
                "thoracic": [float(v) for v in p.within_thoracic],
                "lumbar": [float(v) for v in p.within_lumbar],
            }
            for p in preds
        ],
    }
    atomic_write_text(path, _dump_json(doc))


def read_probabilities(path: str | Path) -> list[LocalPrediction]:
    doc = json.loads(Path(path).read_text())
    where = f"probabilities file {path}"
    if not isinstance(doc, dict):
        raise ValueError(f"{where}: expected a JSON object")
    _require_keys(doc, {"schema_version", "records"}, {"schema_version", "records"}, where)
    _check_version(doc, where)
    preds = []
    for i, rec in enumerate(doc["records"]):
        w = f"{where}: records[{i}]"
        if not isinstance(rec, dict):
            raise ValueError(f"{w}: expected an object")
        _require_keys(rec, {"group", "cervical", "thoracic", "lumbar"},
                      {"group", "cervical", "thoracic", "lumbar"}, w)
        try:
            preds.append(LocalPrediction(
                group_probs=np.asarray(rec["group"], dtype=np.float64),
                within_cervical=np.asarray(rec["cervical"], dtype=np.float64),
                within_thoracic=np.asarray(rec["thoracic"], dtype=np.float64),
                within_lumbar=np.asarray(rec["lumbar"], dtype=np.float64),
            ))
        except ValueError as exc:
            raise ValueError(f"{w}: {exc}") from None
    return preds


# -- stats ------------------------------------------------------------------------


def stats_to_doc(stats: AnatomyStats) -> dict:
    groups: dict[str, Any] = {}
    for g in GROUPS:
        gs = stats.for_group(g)
        groups[g.value] = {
            "volume": {"a": gs.volume.a, "c1": gs.volume.c1, "b": gs.volume.b, "c2": gs.volume.c2},
            "gaussian": {"mu": gs.gaussian.mu, "sigma": gs.gaussian.sigma},
            "distance": {"m1": gs.distance.m1, "n1": gs.distance.n1, "k1": gs.distance.k1,
                         "m2": gs.distance.m2, "k2": gs.distance.k2,
                         "n2": gs.distance.n2, "k3": gs.distance.k3},
            "mre": {mode.value: {"mu": gs.mre[mode].mu, "sigma": gs.mre[mode].sigma}
                    for mode in GapMode},
        }
    return {
        "schema_version": SCHEMA_VERSION,
        "fallback_volume_mm3": stats.fallback_volume_mm3,
        "fallback_gap_mm": stats.fallback_gap_mm,
        "groups": groups,
    }


def write_stats(path: str | Path, stats: AnatomyStats) -> None:
    atomic_write_text(path, _dump_json(stats_to_doc(stats)))


def stats_from_doc(doc: dict, where: str = "stats") -> AnatomyStats:
    _require_keys(doc, {"schema_version", "fallback_volume_mm3", "fallback_gap_mm", "groups"},
                  {"schema_version", "groups"}, where)
    _check_version(doc, where)
    groups = {}
    gdoc = doc["groups"]
    if set(gdoc) != {g.value for g in GROUPS}:
        raise ValueError(f"{where}: groups must be exactly {[g.value for g in GROUPS]}")
    for g in GROUPS:
        d = gdoc[g.value]
        w = f"{where}: groups.{g.value}"
        _require_keys(d, {"volume", "gaussian", "distance", "mre"},
                      {"volume", "gaussian", "distance", "mre"}, w)
        vol = d["volume"]
        _require_keys(vol, {"a", "c1", "b", "c2"}, {"a", "c1", "b", "c2"}, f"{w}.volume")
        gau = d["gaussian"]
        _require_keys(gau, {"mu", "sigma"}, {"mu", "sigma"}, f"{w}.gaussian")
        dis = d["distance"]
        _require_keys(dis, {"m1", "n1", "k1", "m2", "k2", "n2", "k3"},
                      {"m1", "n1", "k1", "m2", "k2", "n2", "k3"}, f"{w}.distance")
        mre = d["mre"]
        _require_keys(mre, {m.value for m in GapMode}, {m.value for m in GapMode}, f"{w}.mre")
        for mode in GapMode:
            _require_keys(mre[mode.value], {"mu", "sigma"}, {"mu", "sigma"},
                          f"{w}.mre.{mode.value}")
        try:
            groups[g] = GroupStats(
                volume=VolumeRegressor(float(vol["a"]), float(vol["c1"]),
                                       float(vol["b"]), float(vol["c2"])),
                gaussian=DistanceGaussian(float(gau["mu"]), float(gau["sigma"])),
                distance=DistanceRegressor(float(dis["m1"]), float(dis["n1"]), float(dis["k1"]),
                                           float(dis["m2"]), float(dis["k2"]),
                                           float(dis["n2"]), float(dis["k3"])),
                mre={mode: MreBounds(float(mre[mode.value]["mu"]), float(mre[mode.value]["sigma"]))
                     for mode in GapMode},
            )
        except ValueError as exc:
            raise ValueError(f"{w}: {exc}") from None
    return AnatomyStats(
        groups,
        fallback_volume_mm3=float(doc.get("fallback_volume_mm3", 3910.0)),
        fallback_gap_mm=float(doc.get("fallback_gap_mm", 50.0)),
    )


def read_stats(path: str | Path) -> AnatomyStats:
    doc = json.loads(Path(path).read_text())
    return stats_from_doc(doc, where=f"stats file {path}")


def load_default_stats() -> AnatomyStats:
    """The priors shipped with the package."""
    text = importlib.resources.files("spinecycle").joinpath("data/default_stats.json").read_text()
    return stats_from_doc(json.loads(text), where="default stats")


# -- annotations -------------------------------------------------------------------


def write_annotations(path: str | Path, scans: list[ScanAnnotation]) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "scans": [
            {
                "id": s.scan_id,
                "labels": [labels.name_of(c) for c in s.labels],
                "volumes_mm3": list(s.volumes_mm3),
                "centroids_mm": [list(map(float, row)) for row in s.centroids_mm],
            }
            for s in scans
        ],
    }
    atomic_write_text(path, _dump_json(doc))


def read_annotations(path: str | Path) -> list[ScanAnnotation]:
    doc = json.loads(Path(path).read_text())
    where = f"annotations file {path}"
    _require_keys(doc, {"schema_version", "scans"}, {"schema_version", "scans"}, where)
    _check_version(doc, where)
    scans = []
    for i, s in enumerate(doc["scans"]):
        w = f"{where}: scans[{i}]"
        _require_keys(s, {"id", "labels", "volumes_mm3", "centroids_mm"},
                      {"id", "labels", "volumes_mm3", "centroids_mm"}, w)
        try:
            scans.append(ScanAnnotation(
                scan_id=str(s["id"]),
                labels=tuple(labels.code_of(n) for n in s["labels"]),
                volumes_mm3=tuple(float(v) for v in s["volumes_mm3"]),
                centroids_mm=np.asarray(s["centroids_mm"], dtype=np.float64),
            ))
        except ValueError as exc:
            raise ValueError(f"{w}: {exc}") from None
    return scans


# -- report ------------------------------------------------------------------------


def report_to_doc(report: InconsistencyReport, *, iterations: int,
                  events: list[TransitionalEvent] | None = None,
                  label_names: list[str] | None = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "passed": report.passed,
        "iterations": iterations,
        "entries": [
            {
                "kind": e.kind.value,
                "region_min_mm": [float(v) for v in e.region_min],
                "region_max_mm": [float(v) for v in e.region_max],
                "detail": e.detail,
            }
            for e in report.entries
        ],
        "transitional_events": [
            {"position": ev.position, "kind": ev.kind} for ev in (events or [])
        ],
        "labels": label_names or [],
    }


def write_report(path: str | Path, report: InconsistencyReport, *, iterations: int,
                 events: list[TransitionalEvent] | None = None,
                 label_names: list[str] | None = None) -> None:
    atomic_write_text(path, _dump_json(report_to_doc(
        report, iterations=iterations, events=events, label_names=label_names)))


def read_report(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    where = f"report file {path}"
    _require_keys(doc, {"schema_version", "passed", "iterations", "entries",
                        "transitional_events", "labels"},
                  {"schema_version", "passed", "entries"}, where)
    _check_version(doc, where)
    for e in doc["entries"]:
        Flag(e["kind"])   # raises on unknown kinds
    return doc


# -- manifest ------------------------------------------------------------------------


def read_manifest(path: str | Path) -> dict:
    """Load and validate a run-cycle manifest; paths resolve relative to it."""
    path = Path(path)
    doc = json.loads(path.read_text())
    where = f"manifest {path}"
    _require_keys(doc, {"schema_version", "ct", "spine_mask", "stats", "oracle", "config"},
                  {"schema_version", "ct", "spine_mask", "oracle"}, where)
    _check_version(doc, where)
    base = path.parent
    resolved = dict(doc)
    for key in ("ct", "spine_mask"):
        p = base / doc[key]
        if not p.exists():
            raise ValueError(f"{where}: {key} path {p} does not exist")
        resolved[key] = p
    stats_ref = doc.get("stats", "default")
    if stats_ref != "default":
        p = base / stats_ref
        if not p.exists():
            raise ValueError(f"{where}: stats path {p} does not exist")
        resolved["stats"] = p
    else:
        resolved["stats"] = "default"
    oracle = doc["oracle"]
    if not isinstance(oracle, dict) or "kind" not in oracle:
        raise ValueError(f"{where}: oracle must be an object with a 'kind'")
    kind = oracle["kind"]
    if kind == "phantom":
        _require_keys(oracle, {"kind", "spec"}, {"kind", "spec"}, f"{where}: oracle")
        spec = base / oracle["spec"]
        if not spec.exists():
            raise ValueError(f"{where}: oracle spec {spec} does not exist")
        resolved["oracle"] = {"kind": kind, "spec": spec}
    elif kind == "directory":
        _require_keys(oracle, {"kind", "root"}, {"kind", "root"}, f"{where}: oracle")
        root = base / oracle["root"]
        if not root.is_dir():
            raise ValueError(f"{where}: oracle root {root} is not a directory")
        resolved["oracle"] = {"kind": kind, "root": root}
    elif kind == "subprocess":
        _require_keys(oracle, {"kind", "command"}, {"kind", "command"}, f"{where}: oracle")
        cmd = oracle["command"]
        if not (isinstance(cmd, list) and cmd and all(isinstance(c, str) for c in cmd)):
            raise ValueError(f"{where}: oracle command must be a list of strings")
        resolved["oracle"] = {"kind": kind, "command": cmd}
    else:
        raise ValueError(f"{where}: unknown oracle kind {kind!r}")
    resolved.setdefault("config", {})
    return resolved


def write_manifest(path: str | Path, doc: dict) -> None:
    atomic_write_text(path, _dump_json({"schema_version": SCHEMA_VERSION, **doc}))
