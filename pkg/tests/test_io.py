import gzip
import json

import numpy as np
import pytest

from conftest import cube_mask, make_grid
from spinecycle import sidecars
from spinecycle.adapters import (DirectoryAdapter, SubprocessAdapter,
                                 add_classify_entry, add_segment_entry,
                                 coordinate_key, crop_center_mm)
from spinecycle.grid import VolumeGrid, extract_crop
from spinecycle.nrrd_io import read_nrrd, write_nrrd
from spinecycle.priors import ScanAnnotation
from spinecycle.records import (Flag, InconsistencyReport, LocalPrediction,
                                ReportEntry, TransitionalEvent)


# -- NRRD round trips ---------------------------------------------------------------


@pytest.mark.parametrize("encoding", ["raw", "gzip"])
@pytest.mark.parametrize("dtype,fill", [
    (np.bool_, None),
    (np.int16, 1200),
    (np.float32, -3.25),
])
def test_nrrd_round_trip(tmp_path, encoding, dtype, fill):
    rng = np.random.default_rng(7)
    if dtype == np.bool_:
        data = rng.random((5, 6, 7)) < 0.3
    else:
        data = (rng.random((5, 6, 7)) * 100).astype(dtype)
        data[0, 0, 0] = fill
    grid = VolumeGrid(data, (0.7, 1.0, 2.5), (-3.0, 4.0, 11.5), ("R", "P", "I"))
    path = tmp_path / "vol.nrrd"
    write_nrrd(path, grid, encoding=encoding)
    back = read_nrrd(path)
    assert back.data.dtype == np.dtype(dtype)
    np.testing.assert_array_equal(back.data, data)
    assert back.same_geometry(grid)
    assert back.orientation == grid.orientation


def test_nrrd_write_rejects_unknown_encoding(tmp_path):
    g = make_grid(np.zeros((2, 2, 2), dtype=np.int16))
    with pytest.raises(ValueError):
        write_nrrd(tmp_path / "x.nrrd", g, encoding="hex")


def craft(tmp_path, header, payload=b"\x00" * 8):
    path = tmp_path / "bad.nrrd"
    path.write_bytes("\n".join(header).encode("ascii") + b"\n\n" + payload)
    return path


BASE = ["NRRD0004", "type: uchar", "dimension: 3", "sizes: 2 2 2",
        "encoding: raw", "spacings: 1 1 1"]


def test_nrrd_reader_accepts_minimal_header(tmp_path):
    grid = read_nrrd(craft(tmp_path, BASE, b"\x01" * 8))
    assert grid.data.dtype == np.bool_ and grid.data.all()
    assert grid.orientation == ("L", "P", "S")


def test_nrrd_reader_tolerates_comments_and_metadata(tmp_path):
    header = BASE + ["# a comment", "made by := somebody"]
    assert read_nrrd(craft(tmp_path, header)).shape == (2, 2, 2)


@pytest.mark.parametrize("mutate,needle", [
    (lambda h: ["NRRD9999"] + h[1:], "not an NRRD"),
    (lambda h: h + ["flavor: salted"], "unsupported NRRD field"),
    (lambda h: [h[0], "type: double"] + h[2:], "unsupported type"),
    (lambda h: h[:2] + ["dimension: 2"] + h[3:], "only 3"),
    (lambda h: h[:3] + ["sizes: 2 2"] + h[4:], "three positive ints"),
    (lambda h: h[:4] + ["encoding: hex"] + h[5:], "unsupported encoding"),
    (lambda h: h + ["space: right-anterior-superior"], "only 'left-posterior-superior'"),
    (lambda h: h[:5] + ["space directions: (1,1,0) (0,1,0) (0,0,1)"], "not diagonal"),
])
def test_nrrd_reader_rejections(tmp_path, mutate, needle):
    with pytest.raises(ValueError, match=needle):
        read_nrrd(craft(tmp_path, mutate(list(BASE))))


def test_nrrd_reader_rejects_truncated_payload(tmp_path):
    with pytest.raises(ValueError, match="truncated"):
        read_nrrd(craft(tmp_path, BASE, b"\x00" * 5))


def test_nrrd_reader_rejects_nonbinary_uint8(tmp_path):
    with pytest.raises(ValueError, match="0/1"):
        read_nrrd(craft(tmp_path, BASE, b"\x07" * 8))


def test_nrrd_reader_requires_endian_for_wide_types(tmp_path):
    header = ["NRRD0004", "type: short", "dimension: 3", "sizes: 2 2 2",
              "encoding: raw", "spacings: 1 1 1"]
    with pytest.raises(ValueError, match="endian"):
        read_nrrd(craft(tmp_path, header, b"\x00" * 16))


def test_nrrd_reader_requires_blank_separator(tmp_path):
    path = tmp_path / "x.nrrd"
    path.write_bytes(b"NRRD0004\ntype: uchar\n")
    with pytest.raises(ValueError, match="blank line"):
        read_nrrd(path)


def test_nrrd_gzip_payload_really_compressed(tmp_path):
    g = make_grid(np.zeros((32, 32, 32), dtype=np.int16))
    raw, gz = tmp_path / "r.nrrd", tmp_path / "g.nrrd"
    write_nrrd(raw, g, encoding="raw")
    write_nrrd(gz, g, encoding="gzip")
    assert gz.stat().st_size < raw.stat().st_size / 10
    np.testing.assert_array_equal(read_nrrd(gz).data, read_nrrd(raw).data)


# -- location and probability sidecars ------------------------------------------------


def test_locations_round_trip(tmp_path):
    rows = [(5, np.array([1.25, -3.5, 700.0625])), (None, np.array([0.0, 0.1, 0.2]))]
    path = tmp_path / "locs.txt"
    sidecars.write_locations(path, rows)
    back = sidecars.read_locations(path)
    assert back[0][0] == 5 and back[1][0] is None
    for (_, a), (_, b) in zip(rows, back):
        np.testing.assert_array_equal(a, b)     # repr round trip is exact


def test_locations_reader_skips_comments_and_blanks(tmp_path):
    path = tmp_path / "locs.txt"
    path.write_text("# header\n\nC3 1.0 2.0 3.0   # trailing note\n")
    assert sidecars.read_locations(path) == [(3, pytest.approx([1.0, 2.0, 3.0]))]


def test_locations_reader_errors(tmp_path):
    path = tmp_path / "locs.txt"
    path.write_text("C3 1.0 2.0\n")
    with pytest.raises(ValueError, match="expected 'label x y z'"):
        sidecars.read_locations(path)
    path.write_text("C3 1.0 2.0 north\n")
    with pytest.raises(ValueError, match="bad coordinate"):
        sidecars.read_locations(path)
    path.write_text("C9 1.0 2.0 3.0\n")
    with pytest.raises(ValueError):
        sidecars.read_locations(path)


def test_probabilities_round_trip(tmp_path, rng):
    def vec(k):
        v = rng.random(k) + 1e-3
        return v / v.sum()
    preds = [LocalPrediction(vec(3), vec(7), vec(12), vec(5)) for _ in range(3)]
    path = tmp_path / "probs.json"
    sidecars.write_probabilities(path, preds)
    back = sidecars.read_probabilities(path)
    assert len(back) == 3
    for a, b in zip(preds, back):
        np.testing.assert_array_equal(a.fused(), b.fused())


def test_probabilities_validation(tmp_path):
    path = tmp_path / "probs.json"
    path.write_text(json.dumps({"schema_version": 1, "records": [
        {"group": [1, 0, 0], "cervical": [1] + [0] * 6,
         "thoracic": [1] + [0] * 11, "lumbar": [1, 0, 0, 0], "extra": 1}]}))
    with pytest.raises(ValueError, match="unknown field"):
        sidecars.read_probabilities(path)
    path.write_text(json.dumps({"schema_version": 2, "records": []}))
    with pytest.raises(ValueError, match="schema_version"):
        sidecars.read_probabilities(path)
    bad = {"group": [0.5, 0.5, 0.5], "cervical": [1.0] + [0.0] * 6,
           "thoracic": [1.0] + [0.0] * 11, "lumbar": [1.0, 0, 0, 0, 0]}
    path.write_text(json.dumps({"schema_version": 1, "records": [bad]}))
    with pytest.raises(ValueError, match="records\\[0\\]"):
        sidecars.read_probabilities(path)


# -- stats and annotations ---------------------------------------------------------


def test_stats_file_round_trip(tmp_path, stats):
    path = tmp_path / "stats.json"
    sidecars.write_stats(path, stats)
    again = sidecars.read_stats(path)
    assert sidecars.stats_to_doc(again) == sidecars.stats_to_doc(stats)


def test_stats_doc_validation(stats):
    doc = sidecars.stats_to_doc(stats)
    doc["groups"]["cervical"]["volume"]["q"] = 1.0
    with pytest.raises(ValueError, match="unknown field"):
        sidecars.stats_from_doc(doc)
    doc = sidecars.stats_to_doc(stats)
    del doc["groups"]["lumbar"]
    with pytest.raises(ValueError, match="groups must be exactly"):
        sidecars.stats_from_doc(doc)


def test_annotations_round_trip(tmp_path):
    scans = [ScanAnnotation(
        scan_id="s1", labels=(8, 9, 10),
        volumes_mm3=(15000.0, 0.0, 17000.0),
        centroids_mm=np.array([[0, 0, 0], [0, 0, -23.0], [0, 0, -46.5]], dtype=np.float64),
    )]
    path = tmp_path / "ann.json"
    sidecars.write_annotations(path, scans)
    back = sidecars.read_annotations(path)
    assert back[0].scan_id == "s1"
    assert back[0].labels == (8, 9, 10)
    assert back[0].volumes_mm3 == (15000.0, 0.0, 17000.0)
    np.testing.assert_array_equal(back[0].centroids_mm, scans[0].centroids_mm)


def test_annotations_reject_invalid_scan(tmp_path):
    doc = {"schema_version": 1, "scans": [
        {"id": "s1", "labels": ["C1", "C3"], "volumes_mm3": [1.0, 1.0],
         "centroids_mm": [[0, 0, 0], [0, 0, -20]]}]}
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="scans\\[0\\]"):
        sidecars.read_annotations(path)


# -- reports and manifests ----------------------------------------------------------


def sample_report():
    return InconsistencyReport(entries=[ReportEntry(
        region_min=(0.0, 0.0, -40.0), region_max=(1.0, 2.0, -20.0),
        kind=Flag.DISTANCE_ANOMALY, detail="implausible spacing")])


def test_report_round_trip(tmp_path):
    path = tmp_path / "report.json"
    sidecars.write_report(path, sample_report(), iterations=3,
                          events=[TransitionalEvent(position=2, kind="T13")],
                          label_names=["T11", "T12", "T13"])
    doc = sidecars.read_report(path)
    assert doc["passed"] is False and doc["iterations"] == 3
    assert doc["entries"][0]["kind"] == "DistanceAnomaly"
    assert doc["transitional_events"] == [{"position": 2, "kind": "T13"}]
    assert doc["labels"] == ["T11", "T12", "T13"]


def test_report_reader_rejects_unknown_kind(tmp_path):
    path = tmp_path / "report.json"
    doc = {"schema_version": 1, "passed": False,
           "entries": [{"kind": "Gremlins", "region_min_mm": [0, 0, 0],
                        "region_max_mm": [0, 0, 0], "detail": ""}]}
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        sidecars.read_report(path)


def manifest_dir(tmp_path):
    ct = make_grid(np.zeros((2, 2, 2), dtype=np.float32))
    write_nrrd(tmp_path / "ct.nrrd", ct)
    write_nrrd(tmp_path / "mask.nrrd", make_grid(np.ones((2, 2, 2), dtype=bool)))
    (tmp_path / "phantom.json").write_text(json.dumps({"labels": ["T1", "T2"]}))
    return tmp_path


def test_manifest_resolves_relative_paths(tmp_path):
    d = manifest_dir(tmp_path)
    path = d / "run.json"
    sidecars.write_manifest(path, {
        "ct": "ct.nrrd", "spine_mask": "mask.nrrd",
        "oracle": {"kind": "phantom", "spec": "phantom.json"}})
    doc = sidecars.read_manifest(path)
    assert doc["ct"] == d / "ct.nrrd"
    assert doc["stats"] == "default"
    assert doc["oracle"]["spec"] == d / "phantom.json"
    assert doc["config"] == {}


def test_manifest_validation(tmp_path):
    d = manifest_dir(tmp_path)
    path = d / "run.json"
    sidecars.write_manifest(path, {
        "ct": "missing.nrrd", "spine_mask": "mask.nrrd",
        "oracle": {"kind": "phantom", "spec": "phantom.json"}})
    with pytest.raises(ValueError, match="does not exist"):
        sidecars.read_manifest(path)
    sidecars.write_manifest(path, {
        "ct": "ct.nrrd", "spine_mask": "mask.nrrd", "oracle": {"kind": "psychic"}})
    with pytest.raises(ValueError, match="unknown oracle kind"):
        sidecars.read_manifest(path)
    sidecars.write_manifest(path, {
        "ct": "ct.nrrd", "spine_mask": "mask.nrrd",
        "oracle": {"kind": "subprocess", "command": "not-a-list"}})
    with pytest.raises(ValueError, match="list of strings"):
        sidecars.read_manifest(path)


def test_atomic_write_leaves_no_droppings(tmp_path):
    target = tmp_path / "out.txt"
    sidecars.atomic_write_text(target, "one")
    sidecars.atomic_write_text(target, "two")
    assert target.read_text() == "two"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


# -- directory adapter ----------------------------------------------------------------


def test_coordinate_key_rounds_to_whole_mm():
    assert coordinate_key([12.3, -4.7, 0.2]) == "12_-5_0"
    assert coordinate_key(np.array([1.0, 2.0, 3.0])) == "1_2_3"
    with pytest.raises(ValueError):
        coordinate_key([1.0, 2.0])


def test_crop_center_round_trip():
    g = cube_mask((9, 9, 9), (0, 0, 0), (9, 9, 9), origin=(-4.0, -4.0, -4.0))
    np.testing.assert_allclose(crop_center_mm(g), [0.0, 0.0, 0.0])
    crop = extract_crop(g, np.array([1.0, 2.0, 3.0]), side_voxels=5)
    np.testing.assert_allclose(crop_center_mm(crop), [1.0, 2.0, 3.0])


def test_directory_adapter_segment_hit_and_miss(tmp_path):
    ct = make_grid(np.zeros((8, 8, 8), dtype=np.float32))
    mask = cube_mask((8, 8, 8), (2, 2, 2), (5, 5, 5))
    seed = np.array([3.0, 3.0, 3.0])
    add_segment_entry(tmp_path, seed, np.array([3.5, 3.5, 3.5]), mask)
    adapter = DirectoryAdapter(tmp_path)
    hit = adapter.segment(ct, seed + 0.2)       # rounds to the same key
    assert hit is not None
    np.testing.assert_allclose(hit.location_mm, [3.5, 3.5, 3.5])
    np.testing.assert_array_equal(hit.mask.data, mask.data)
    assert adapter.segment(ct, np.array([40.0, 0.0, 0.0])) is None


def test_directory_adapter_rejects_geometry_mismatch(tmp_path):
    ct = make_grid(np.zeros((8, 8, 8), dtype=np.float32))
    wrong = cube_mask((8, 8, 8), (2, 2, 2), (5, 5, 5), spacing=(2.0, 2.0, 2.0))
    seed = np.array([3.0, 3.0, 3.0])
    add_segment_entry(tmp_path, seed, seed, wrong)
    with pytest.raises(ValueError, match="geometry"):
        DirectoryAdapter(tmp_path).segment(ct, seed)


def test_directory_adapter_classify_requires_entry(tmp_path):
    crop = cube_mask((5, 5, 5), (0, 0, 0), (5, 5, 5))
    add_classify_entry(tmp_path, crop_center_mm(crop), LocalPrediction.peaked(9))
    adapter = DirectoryAdapter(tmp_path)
    pred = adapter.classify(crop)
    assert int(np.argmax(pred.fused())) + 1 == 9
    other = cube_mask((5, 5, 5), (0, 0, 0), (5, 5, 5), origin=(50.0, 0.0, 0.0))
    with pytest.raises(ValueError, match="no classification"):
        adapter.classify(other)


def test_directory_adapter_needs_directory(tmp_path):
    with pytest.raises(ValueError):
        DirectoryAdapter(tmp_path / "nope")


def test_directory_adapter_replays_full_cycle(tmp_path):
    """Precompute phantom oracle answers, then run the cycle against the
    frozen store alone."""
    from spinecycle.cycle import run_cycle
    from spinecycle.grid import connected_components
    from spinecycle.labels import code_of
    from spinecycle.phantom import PhantomSpec, generate

    b = generate(PhantomSpec(tuple(code_of(n) for n in ("T1", "T2", "T3")), seed=5))
    # the first iteration seeds from residual-component centroids
    comps = connected_components(b.spine_mask, 26).components
    seeds = sorted((c.centroid_mm for c in comps), key=lambda p: -p[2])
    for seed, rec in zip(seeds, b.gt_state.records):
        add_segment_entry(tmp_path, seed, rec.location, b.gt_state.masks[rec.mask_id])
    for i, rec in enumerate(b.gt_state.records):
        add_classify_entry(tmp_path, rec.location,
                           LocalPrediction.peaked(int(b.classifier.reported_codes[i])))
    adapter = DirectoryAdapter(tmp_path)
    state = run_cycle(b.ct, b.spine_mask, adapter, adapter)
    assert state.report.passed
    assert [r.label for r in state.records] == list(b.spec.labels)


# -- subprocess adapter -----------------------------------------------------------------


WORKER = r'''
import sys
import numpy as np
from spinecycle import nrrd_io, sidecars
from spinecycle.grid import VolumeGrid
from spinecycle.records import LocalPrediction

for line in sys.stdin:
    parts = line.split()
    if not parts:
        continue
    token, op, args = parts[0], parts[1], parts[2:]
    if op == "segment":
        ct = nrrd_io.read_nrrd(args[0])
        seed = sidecars.read_locations(args[1])[0][1]
        if seed[2] < -900.0:
            print(f"{token} EMPTY", flush=True)
            continue
        idx = np.round(ct.world_to_index(seed)).astype(int)
        data = np.zeros(ct.shape, dtype=bool)
        data[tuple(idx)] = True
        nrrd_io.write_nrrd("mask.nrrd", VolumeGrid(data, ct.spacing, ct.origin, ct.orientation))
        sidecars.write_locations("loc.txt", [(None, seed + 0.25)])
        print(f"{token} loc.txt mask.nrrd", flush=True)
    elif op == "classify":
        nrrd_io.read_nrrd(args[0])
        sidecars.write_probabilities("probs.json", [LocalPrediction.peaked(11)])
        print(f"{token} probs.json", flush=True)
'''


def spawn(tmp_path, body=WORKER):
    script = tmp_path / "worker.py"
    script.write_text(body)
    return SubprocessAdapter(["python3", str(script)], workdir=tmp_path / "work")


def test_subprocess_adapter_protocol(tmp_path):
    ct = make_grid(np.zeros((6, 6, 6), dtype=np.float32))
    with spawn(tmp_path) as oracle:
        res = oracle.segment(ct, np.array([2.0, 2.0, 2.0]))
        assert res is not None
        np.testing.assert_allclose(res.location_mm, [2.25, 2.25, 2.25])
        assert res.mask.data.sum() == 1 and res.mask.data[2, 2, 2]
        assert oracle.segment(ct, np.array([0.0, 0.0, -1000.0])) is None
        pred = oracle.classify(cube_mask((4, 4, 4), (0, 0, 0), (2, 2, 2)))
        assert int(np.argmax(pred.fused())) + 1 == 11


def test_subprocess_adapter_reports_worker_death(tmp_path):
    body = "import sys\nsys.stdin.readline()\nsys.stderr.write('worker bug\\n')\nsys.exit(3)\n"
    ct = make_grid(np.zeros((4, 4, 4), dtype=np.float32))
    with spawn(tmp_path, body) as oracle:
        with pytest.raises(RuntimeError, match="worker bug|exited"):
            oracle.segment(ct, np.array([1.0, 1.0, 1.0]))


def test_subprocess_adapter_rejects_token_mismatch(tmp_path):
    body = ("import sys\n"
            "for line in sys.stdin:\n"
            "    print('zzz EMPTY', flush=True)\n")
    ct = make_grid(np.zeros((4, 4, 4), dtype=np.float32))
    with spawn(tmp_path, body) as oracle:
        with pytest.raises(RuntimeError, match="replied"):
            oracle.segment(ct, np.array([1.0, 1.0, 1.0]))
