"""Oracle adapters: plug external segmentors/classifiers into the cycle.

The cycle engine only sees two callables (``segment``, ``classify``); this
module provides the two standard ways to satisfy them without importing the
model code into this process:

* :class:`DirectoryAdapter` replays precomputed answers from a directory
  tree keyed by rounded query coordinates.  Useful for frozen regression
  fixtures and for decoupling model inference (run once, on whatever
  hardware) from consistency analysis (rerun cheaply).

* :class:`SubprocessAdapter` drives a long-lived worker process over a
  line-oriented request/response protocol.  Payloads travel as files, so
  the protocol itself stays trivial to implement in any language.

Subprocess protocol, one request line -> one response line::

    <id> segment <ct_path> <seed_path>      ->  <id> <loc_path> <mask_path>
                                            |   <id> EMPTY
    <id> classify <crop_path>               ->  <id> <probs_path>
                                            |   <id> EMPTY

``<id>`` is an opaque token echoed back verbatim; requests are answered in
order.  ``<seed_path>`` and ``<loc_path>`` are single-row location files,
``<probs_path>`` is a single-record probabilities file (see `sidecars`),
masks and crops are NRRD volumes.  Relative paths in responses resolve
against the worker's working directory.  Closing the worker's stdin asks it
to exit.
"""

from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
import threading
from pathlib import Path

import numpy as np

from . import nrrd_io, sidecars
from .cycle import SegmentationResult
from .grid import VolumeGrid
from .records import LocalPrediction

log = logging.getLogger(__name__)

__all__ = [
    "DirectoryAdapter",
    "SubprocessAdapter",
    "coordinate_key",
    "add_segment_entry",
    "add_classify_entry",
    "crop_center_mm",
]


def coordinate_key(point_mm) -> str:
    """Directory name for a query point: whole-mm rounding, ``x_y_z``.

    Rounding makes the key stable against sub-millimetre drift between the
    run that produced the store and the run that replays it.
    """
    p = np.asarray(point_mm, dtype=np.float64)
    if p.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {p.shape}")
    return "_".join(str(int(round(float(v)))) for v in p)


def crop_center_mm(crop: VolumeGrid) -> np.ndarray:
    """World coordinate of a crop's geometric centre (the classify key)."""
    c = (np.asarray(crop.shape, dtype=np.float64) - 1.0) / 2.0
    return crop.index_to_world(c)


def add_segment_entry(root: str | Path, seed_mm, location_mm, mask: VolumeGrid) -> Path:
    """Store one segmentation answer under ``root`` (helper for building stores)."""
    d = Path(root) / "segment" / coordinate_key(seed_mm)
    d.mkdir(parents=True, exist_ok=True)
    sidecars.write_locations(d / "location.txt", [(None, np.asarray(location_mm, dtype=np.float64))])
    nrrd_io.write_nrrd(d / "mask.nrrd", mask, encoding="gzip")
    return d


def add_classify_entry(root: str | Path, center_mm, pred: LocalPrediction) -> Path:
    """Store one classification answer under ``root``."""
    d = Path(root) / "classify" / coordinate_key(center_mm)
    d.mkdir(parents=True, exist_ok=True)
    sidecars.write_probabilities(d / "probs.json", [pred])
    return d


class DirectoryAdapter:
    """Replay precomputed oracle answers from a directory tree.

    Layout::

        root/
          segment/<x>_<y>_<z>/location.txt   refined location (1 row)
          segment/<x>_<y>_<z>/mask.nrrd      binary mask on the CT grid
          classify/<x>_<y>_<z>/probs.json    probabilities (1 record)

    Segmentation keys are rounded seed locations; a missing directory means
    the segmentor found nothing there (Empty).  Classification keys are
    rounded crop centres and must all be present: a crop whose answer was
    never precomputed is a store-construction bug, not a model abstention,
    so it raises.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ValueError(f"oracle store {self.root} is not a directory")

    def segment(self, ct: VolumeGrid, seed_mm: np.ndarray) -> SegmentationResult | None:
        d = self.root / "segment" / coordinate_key(seed_mm)
        if not d.is_dir():
            return None
        rows = sidecars.read_locations(d / "location.txt")
        if len(rows) != 1:
            raise ValueError(f"{d}/location.txt: expected exactly 1 row, got {len(rows)}")
        mask = nrrd_io.read_nrrd(d / "mask.nrrd")
        if mask.data.dtype != np.bool_:
            raise ValueError(f"{d}/mask.nrrd: expected a binary mask")
        if not mask.same_geometry(ct):
            raise ValueError(f"{d}/mask.nrrd: geometry does not match the CT volume")
        return SegmentationResult(location_mm=rows[0][1], mask=mask)

    def classify(self, crop: VolumeGrid) -> LocalPrediction | None:
        key = coordinate_key(crop_center_mm(crop))
        path = self.root / "classify" / key / "probs.json"
        if not path.exists():
            raise ValueError(f"oracle store has no classification for crop centre {key}")
        preds = sidecars.read_probabilities(path)
        if len(preds) != 1:
            raise ValueError(f"{path}: expected exactly 1 record, got {len(preds)}")
        return preds[0]


class SubprocessAdapter:
    """Drive an external oracle worker over stdin/stdout.

    The worker is spawned once and handles requests serially; an internal
    lock keeps the pipe coherent when the cycle classifies from multiple
    threads (calls are simply serialized — a worker that wants parallelism
    should batch internally instead).

    Use as a context manager, or call :meth:`close` when done.
    """

    def __init__(self, command: list[str], workdir: str | Path | None = None):
        if isinstance(command, str):
            command = shlex.split(command)
        self.command = list(command)
        self._own_workdir = workdir is None
        self.workdir = Path(tempfile.mkdtemp(prefix="oracle-")) if workdir is None else Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._next_id = 0
        self._last_ct: VolumeGrid | None = None
        self._ct_path = self.workdir / "ct.nrrd"
        log.debug("starting oracle worker: %s", " ".join(self.command))
        self._proc = subprocess.Popen(
            self.command,
            cwd=self.workdir,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            bufsize=1,
        )

    # -- plumbing --------------------------------------------------------

    def _roundtrip(self, *fields: str) -> list[str]:
        proc = self._proc
        if proc.stdin is None or proc.stdout is None:
            raise RuntimeError("oracle worker pipes are not available")
        self._next_id += 1
        token = f"r{self._next_id}"
        line = " ".join((token,) + fields)
        try:
            proc.stdin.write(line + "\n")
            proc.stdin.flush()
            reply = proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise RuntimeError(self._death_notice(line)) from exc
        if reply == "":
            raise RuntimeError(self._death_notice(line))
        parts = reply.split()
        if not parts or parts[0] != token:
            raise RuntimeError(f"oracle worker replied {reply!r} to request {line!r}")
        return parts[1:]

    def _death_notice(self, request: str) -> str:
        code = self._proc.poll()
        err = ""
        if self._proc.stderr is not None:
            try:
                err = self._proc.stderr.read() or ""
            except OSError:
                pass
        tail = err.strip().splitlines()[-5:]
        msg = f"oracle worker exited (returncode={code}) while handling {request!r}"
        return msg + ("\n" + "\n".join(tail) if tail else "")

    def _resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.workdir / path

    def _ensure_ct(self, ct: VolumeGrid) -> Path:
        # the CT volume is identical across calls within one run; rewrite
        # only when the caller hands us a different grid object
        if self._last_ct is not ct:
            nrrd_io.write_nrrd(self._ct_path, ct, encoding="gzip")
            self._last_ct = ct
        return self._ct_path

    # -- oracle interface --------------------------------------------------

    def segment(self, ct: VolumeGrid, seed_mm: np.ndarray) -> SegmentationResult | None:
        with self._lock:
            ct_path = self._ensure_ct(ct)
            seed_path = self.workdir / "seed.txt"
            sidecars.write_locations(seed_path, [(None, np.asarray(seed_mm, dtype=np.float64))])
            parts = self._roundtrip("segment", str(ct_path), str(seed_path))
        if parts == ["EMPTY"]:
            return None
        if len(parts) != 2:
            raise RuntimeError(f"segment reply must be 'EMPTY' or '<loc> <mask>', got {parts}")
        rows = sidecars.read_locations(self._resolve(parts[0]))
        if len(rows) != 1:
            raise ValueError(f"{parts[0]}: expected exactly 1 location row, got {len(rows)}")
        mask = nrrd_io.read_nrrd(self._resolve(parts[1]))
        if mask.data.dtype != np.bool_:
            raise ValueError(f"{parts[1]}: expected a binary mask")
        if not mask.same_geometry(ct):
            raise ValueError(f"{parts[1]}: geometry does not match the CT volume")
        return SegmentationResult(location_mm=rows[0][1], mask=mask)

    def classify(self, crop: VolumeGrid) -> LocalPrediction | None:
        with self._lock:
            crop_path = self.workdir / "crop.nrrd"
            nrrd_io.write_nrrd(crop_path, crop, encoding="gzip")
            parts = self._roundtrip("classify", str(crop_path))
        if parts == ["EMPTY"]:
            return None
        if len(parts) != 1:
            raise RuntimeError(f"classify reply must be 'EMPTY' or '<probs>', got {parts}")
        preds = sidecars.read_probabilities(self._resolve(parts[0]))
        if len(preds) != 1:
            raise ValueError(f"{parts[0]}: expected exactly 1 record, got {len(preds)}")
        return preds[0]

    # -- lifecycle ---------------------------------------------------------

    def close(self, timeout: float = 10.0) -> None:
        proc = self._proc
        if proc.poll() is None:
            try:
                if proc.stdin is not None:
                    proc.stdin.close()
                proc.wait(timeout=timeout)
            except subprocess.TimeoutExpired:
                log.warning("oracle worker ignored EOF; killing it")
                proc.kill()
                proc.wait()
        for stream in (proc.stdout, proc.stderr):
            if stream is not None:
                stream.close()

    def __enter__(self) -> "SubprocessAdapter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
