"""Command-line front end.

Subcommands cover the whole workflow: fit priors from annotations
(``fit-stats``), label a fixed set of detections (``identify``), run the
full localize-label-check cycle from a manifest (``run-cycle``), score a
result against a reference (``evaluate``), and generate synthetic test
cases (``phantom``).

Exit codes: 0 on success, 2 when the requested analysis completed but
found the case inconsistent (a non-empty report, or a label repeat), and
1 for every kind of error.  All file outputs are written atomically.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import adapters, labels, metrics, nrrd_io, phantom, sidecars
from .cycle import CycleConfig, run_cycle
from .graph import GraphWeights, build_graph, postprocess_transitional, shortest_path
from .grid import VolumeGrid
from .priors import fit_stats
from .records import SpineState

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INCONSISTENT = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is taken by "inconsistent",
    # so usage problems are remapped to the generic error code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


# -- config plumbing -----------------------------------------------------------


def _config_from_doc(doc: dict, threads: int | None = None) -> CycleConfig:
    if not isinstance(doc, dict):
        raise ValueError("config must be a JSON object")
    try:
        weights = GraphWeights(**doc.get("weights", {}))
        fields = {k: v for k, v in doc.items() if k != "weights"}
        config = CycleConfig(weights=weights, **fields)
    except TypeError as exc:
        raise ValueError(f"bad config: {exc}") from None
    if threads is not None:
        config = dataclasses.replace(config, threads=threads)
    return config


def _load_config_doc(path: str | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return doc


def _load_stats(ref):
    if ref == "default" or ref is None:
        return sidecars.load_default_stats()
    return sidecars.read_stats(ref)


def _parse_label_list(text: str) -> tuple[int, ...]:
    """``C1,C2,C3`` or ``T9-L5`` or a mix; ranges run in graph order."""
    out: list[int] = []
    for token in text.split(","):
        token = token.strip().upper()
        if not token:
            continue
        if "-" in token:
            lo, hi = (labels.code_of(t.strip()) for t in token.split("-", 1))
            if not (1 <= lo < hi <= 24):
                raise ValueError(f"bad label range {token!r}: ends must be ordinary "
                                 "labels in graph order")
            out.extend(range(lo, hi + 1))
        else:
            out.append(labels.code_of(token))
    if not out:
        raise ValueError("empty label list")
    return tuple(out)


# -- subcommands -----------------------------------------------------------------


def _cmd_fit_stats(args) -> int:
    scans = sidecars.read_annotations(args.annotations)
    stats = fit_stats(scans)
    sidecars.write_stats(args.output, stats)
    print(f"fitted priors from {len(scans)} scans -> {args.output}")
    return EXIT_OK


def _cmd_identify(args) -> int:
    rows = sidecars.read_locations(args.locations)
    preds = sidecars.read_probabilities(args.probabilities)
    if len(rows) != len(preds):
        raise ValueError(f"{len(rows)} locations but {len(preds)} probability records")
    if not rows:
        raise ValueError("no detections to identify")
    config_doc = _load_config_doc(args.config)
    weights = GraphWeights(**config_doc.get("weights", {}))

    locs = [np.asarray(loc, dtype=np.float64) for _, loc in rows]
    order = sorted(range(len(locs)), key=lambda i: -locs[i][2])   # cranial first
    graph = build_graph([preds[i] for i in order], weights)
    post = postprocess_transitional(shortest_path(graph).labels)

    out_rows = [(post.labels[k], locs[i]) for k, i in enumerate(order)]
    sidecars.write_locations(args.output, out_rows)
    print(" ".join(labels.name_of(c) for c in post.labels))
    for pos, kind in post.events:
        print(f"transitional: {kind} at position {pos}")
    for pos in post.repeat_flags:
        print(f"label repeat at position {pos}", file=sys.stderr)
    return EXIT_INCONSISTENT if post.repeat_flags else EXIT_OK


def _label_map_from_state(state: SpineState, like: VolumeGrid) -> VolumeGrid | None:
    data = np.zeros(like.shape, dtype=np.int16)
    found = False
    for rec in state.records:
        if rec.mask_id is not None and rec.label is not None:
            data[state.masks[rec.mask_id].data] = rec.label
            found = True
    if not found:
        return None
    return VolumeGrid(data, like.spacing, like.origin, like.orientation)


def _print_report(doc_passed: bool, state: SpineState) -> None:
    status = "PASS" if doc_passed else "FAIL"
    print(f"consistency: {status} after {state.iteration} iteration(s), "
          f"{len(state.records)} vertebrae, {len(state.report.entries)} finding(s)")
    for e in state.report.entries:
        lo = ", ".join(f"{v:.1f}" for v in e.region_min)
        hi = ", ".join(f"{v:.1f}" for v in e.region_max)
        print(f"  {e.kind.value} @ [{lo}] .. [{hi}]: {e.detail}")


def _cmd_run_cycle(args) -> int:
    manifest = sidecars.read_manifest(args.manifest)
    ct = nrrd_io.read_nrrd(manifest["ct"])
    spine = nrrd_io.read_nrrd(manifest["spine_mask"])
    if spine.data.dtype != np.bool_:
        raise ValueError("spine_mask must be a binary NRRD volume")
    stats = _load_stats(manifest["stats"])

    merged = {**manifest.get("config", {}), **_load_config_doc(args.config)}
    config = _config_from_doc(merged, args.threads)

    oracle = manifest["oracle"]
    close = lambda: None   # noqa: E731
    if oracle["kind"] == "phantom":
        recipe = json.loads(Path(oracle["spec"]).read_text())
        bundle = phantom.bundle_from_doc(recipe, stats)
        segmentor, classifier = bundle.segmentor, bundle.classifier
    elif oracle["kind"] == "directory":
        store = adapters.DirectoryAdapter(oracle["root"])
        segmentor = classifier = store
    else:
        worker = adapters.SubprocessAdapter(oracle["command"])
        segmentor = classifier = worker
        close = worker.close

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        state = run_cycle(ct, spine, segmentor, classifier, stats, config)
    finally:
        close()

    named = [(r.label, r.location) for r in state.records]
    sidecars.write_locations(outdir / "locations.txt", named)
    sidecars.write_report(outdir / "report.json", state.report,
                          iterations=state.iteration, events=state.events,
                          label_names=[labels.name_of(r.label) for r in state.records
                                       if r.label is not None])
    label_map = _label_map_from_state(state, ct)
    if label_map is not None:
        nrrd_io.write_nrrd(outdir / "label_map.nrrd", label_map, encoding="gzip")
    _print_report(state.report.passed, state)
    return EXIT_OK if state.report.passed else EXIT_INCONSISTENT


def _cmd_evaluate(args) -> int:
    def labeled(path):
        rows = sidecars.read_locations(path)
        kept = [(c, loc) for c, loc in rows if c is not None]
        if len(kept) < len(rows):
            log.warning("%s: ignoring %d unlabeled row(s)", path, len(rows) - len(kept))
        return kept

    gt, pred = labeled(args.reference), labeled(args.test)
    gt_seg = nrrd_io.read_nrrd(args.reference_map) if args.reference_map else None
    pred_seg = nrrd_io.read_nrrd(args.test_map) if args.test_map else None
    summary = metrics.evaluate_case(gt, pred, gt_seg, pred_seg,
                                    tolerance_mm=args.tolerance,
                                    hd_percentile=args.hd_percentile)
    text = metrics.format_eval_report(summary)
    if args.output:
        sidecars.atomic_write_text(args.output, text)
    print(text, end="")
    return EXIT_OK


def _cmd_phantom(args) -> int:
    spec = phantom.PhantomSpec(
        labels=_parse_label_list(args.labels),
        seed=args.seed,
        noise_epsilon=args.noise,
        gaps_mm=tuple(float(g) for g in args.gaps.split(",")) if args.gaps else None,
    )
    corruptions = []
    for item in args.corrupt or []:
        kind, _, index = item.partition(":")
        kinds = {"drop": "drop_mask", "blank": "blank_probability"}
        if kind not in kinds or not index.lstrip("-").isdigit():
            raise ValueError(f"bad --corrupt {item!r}: expected drop:<i> or blank:<i>")
        corruptions.append({"kind": kinds[kind], "index": int(index)})
    recipe = {"spec": phantom.spec_to_doc(spec), "corruptions": corruptions}

    stats = _load_stats("default")
    bundle = phantom.bundle_from_doc(recipe, stats)

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    nrrd_io.write_nrrd(outdir / "ct.nrrd", bundle.ct, encoding="gzip")
    nrrd_io.write_nrrd(outdir / "spine_mask.nrrd", bundle.spine_mask, encoding="gzip")
    nrrd_io.write_nrrd(outdir / "gt_label_map.nrrd", bundle.label_map(), encoding="gzip")
    sidecars.write_locations(outdir / "gt_locations.txt", bundle.gt_rows)
    sidecars.atomic_write_text(outdir / "phantom.json",
                               json.dumps(recipe, indent=2, sort_keys=True) + "\n")
    sidecars.write_manifest(outdir / "manifest.json", {
        "ct": "ct.nrrd",
        "spine_mask": "spine_mask.nrrd",
        "stats": "default",
        "oracle": {"kind": "phantom", "spec": "phantom.json"},
        "config": {},
    })
    names = " ".join(labels.name_of(c) for c in spec.labels)
    print(f"phantom [{names}] seed={spec.seed} shape={bundle.ct.shape} -> {outdir}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # global options are accepted both before and after the subcommand;
    # SUPPRESS keeps a subparser from clobbering a value parsed up front
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON file with cycle/graph settings")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="seed for synthetic data")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads for classification")
    common.add_argument("--log-level", default=argparse.SUPPRESS,
                        choices=["debug", "info", "warning", "error"])

    top = _Parser(prog="spinecycle", parents=[common],
                  description="anatomically-informed vertebra labeling and consistency checking")
    top.set_defaults(config=None, seed=0, threads=None, log_level="warning")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-stats", parents=[common], help="fit priors from annotated scans")
    p.add_argument("annotations", help="annotations JSON")
    p.add_argument("-o", "--output", required=True, help="stats JSON to write")
    p.set_defaults(func=_cmd_fit_stats)

    p = sub.add_parser("identify", parents=[common], help="label a fixed detection set (no cycle)")
    p.add_argument("--locations", required=True, help="detected locations file")
    p.add_argument("--probabilities", required=True,
                   help="per-detection probabilities, same order")
    p.add_argument("-o", "--output", required=True, help="labeled locations to write")
    p.set_defaults(func=_cmd_identify)

    p = sub.add_parser("run-cycle", parents=[common], help="run the full cycle from a manifest")
    p.add_argument("manifest", help="run manifest JSON")
    p.add_argument("-o", "--outdir", required=True, help="output directory")
    p.set_defaults(func=_cmd_run_cycle)

    p = sub.add_parser("evaluate", parents=[common], help="score labeled locations against a reference")
    p.add_argument("--reference", required=True, help="reference locations file")
    p.add_argument("--test", required=True, help="locations file under test")
    p.add_argument("--reference-map", help="reference label map NRRD")
    p.add_argument("--test-map", help="label map NRRD under test")
    p.add_argument("--tolerance", type=float, default=metrics.MATCH_TOLERANCE_MM,
                   help="identification tolerance in mm")
    p.add_argument("--hd-percentile", type=float, default=100.0,
                   help="Hausdorff percentile (100 = max)")
    p.add_argument("-o", "--output", help="also write the report here")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic test case + manifest")
    p.add_argument("--labels", required=True, help="e.g. 'L1-L5' or 'T11,T12,T13,L1'")
    p.add_argument("--noise", type=float, default=0.0,
                   help="classifier label-shift probability")
    p.add_argument("--gaps", help="explicit comma-separated gaps in mm")
    p.add_argument("--corrupt", action="append", metavar="KIND:INDEX",
                   help="drop:<i> (segmentation hole) or blank:<i> (no classification); "
                        "repeatable")
    p.add_argument("-o", "--outdir", required=True, help="output directory")
    p.set_defaults(func=_cmd_phantom)
    return top


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
