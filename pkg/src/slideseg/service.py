"""Annotation HTTP service: upload volumes, view slices, run prompted jobs.

All state lives under one store directory in the same file formats the CLI
reads and writes (raw voxel files with JSON sidecars, RLE mask JSON), plus a
single JSON job index.  Segmentation runs on a bounded worker pool; a volume
can only have one queued-or-running job at a time.
"""

from __future__ import annotations

import base64
import io
import json
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Query, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image

from .errors import InvalidInputError, SlideSegError
from .inference import segment_volume
from .prompts import Prompt
from .volume_io import (
    AXES,
    DTYPE_CODES,
    Volume,
    VolumeMask,
    axis_dim,
    clip_and_normalize,
    load_mask,
    load_volume,
    mask_payload,
    rle_encode,
    save_mask,
    save_volume,
    write_json,
)

API_PREFIX = "/v1"
DEFAULT_MAX_BYTES = 64 * 1024 * 1024

QUEUED, RUNNING, DONE, FAILED = "queued", "running", "done", "failed"
ACTIVE = (QUEUED, RUNNING)

OVERLAY_COLOR = np.array([255, 80, 40], dtype=np.float64)
OVERLAY_ALPHA = 0.45


def prompt_from_json(doc: dict) -> Prompt:
    """Parse ``{"type": "box"|"point", "coords": [...], "label": 0|1}``."""
    if not isinstance(doc, dict):
        raise InvalidInputError("prompt must be an object")
    kind = doc.get("type")
    coords = doc.get("coords")
    if not isinstance(coords, (list, tuple)) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in coords
    ):
        raise InvalidInputError("prompt coords must be a list of numbers")
    if kind == "box":
        if len(coords) != 4:
            raise InvalidInputError("box prompts need [x0, y0, x1, y1]")
        return Prompt(box=tuple(float(v) for v in coords))
    if kind == "point":
        if len(coords) != 2:
            raise InvalidInputError("point prompts need [x, y]")
        label = doc.get("label", 1)
        if label not in (0, 1):
            raise InvalidInputError("point label must be 0 or 1")
        return Prompt(points=np.array([coords], dtype=np.float64),
                      point_labels=np.array([label]))
    raise InvalidInputError(f"unknown prompt type {kind!r}")


@dataclass
class Job:
    id: str
    volume_id: str
    axis: str
    start_index: int
    prompt: dict
    status: str = QUEUED
    refined_from: str | None = None
    error: str | None = None
    total_slices: int = 0
    labeled: set[int] = field(default_factory=set)
    partial: dict[int, dict] = field(default_factory=dict)
    done_body: bytes | None = None

    def public(self) -> dict:
        doc = {
            "id": self.id,
            "volume_id": self.volume_id,
            "axis": self.axis,
            "start_index": self.start_index,
            "prompt": self.prompt,
            "status": self.status,
            "progress": {"labeled": len(self.labeled), "total": self.total_slices},
            "refined_from": self.refined_from,
        }
        if self.status == RUNNING and self.partial:
            # live per-slice masks along the job axis; the finished result
            # carries the full payload instead
            doc["partial"] = {str(i): dict(r) for i, r in sorted(self.partial.items())}
        if self.error:
            doc["error"] = self.error
        return doc


class AnnotationStore:
    """Disk-backed state shared by all request handlers."""

    def __init__(self, root: Path, predictor, max_workers: int = 2,
                 max_bytes: int = DEFAULT_MAX_BYTES):
        self.root = Path(root)
        self.volume_dir = self.root / "volumes"
        self.job_dir = self.root / "jobs"
        self.volume_dir.mkdir(parents=True, exist_ok=True)
        self.job_dir.mkdir(parents=True, exist_ok=True)
        self.predictor = predictor
        self.max_bytes = max_bytes
        self.lock = threading.RLock()
        self.jobs: dict[str, Job] = {}
        self.pool = ThreadPoolExecutor(max_workers=max_workers)
        self._normalized: dict[str, Volume] = {}
        self._result_masks: dict[str, np.ndarray] = {}
        self._load_index()

    # -- persistence ------------------------------------------------------

    def _index_path(self) -> Path:
        return self.job_dir / "index.json"

    def _load_index(self):
        path = self._index_path()
        if not path.exists():
            return
        doc = json.loads(path.read_text())
        for jid, meta in doc.items():
            job = Job(
                id=jid,
                volume_id=meta["volume_id"],
                axis=meta["axis"],
                start_index=int(meta["start_index"]),
                prompt=meta["prompt"],
                status=meta["status"],
                refined_from=meta.get("refined_from"),
                error=meta.get("error"),
                total_slices=int(meta.get("total", 0)),
            )
            if job.status in ACTIVE:
                # the process that ran this job is gone
                job.status = FAILED
                job.error = "interrupted by service restart"
            if job.status == DONE:
                job.labeled = set(range(int(meta.get("labeled", 0))))
            self.jobs[jid] = job
        self._save_index()

    def _save_index(self):
        doc = {}
        for jid, job in self.jobs.items():
            doc[jid] = {
                "volume_id": job.volume_id,
                "axis": job.axis,
                "start_index": job.start_index,
                "prompt": job.prompt,
                "status": job.status,
                "refined_from": job.refined_from,
                "error": job.error,
                "total": job.total_slices,
                "labeled": len(job.labeled),
            }
        write_json(self._index_path(), doc)

    # -- volumes ----------------------------------------------------------

    def volume_ids(self) -> list[str]:
        return sorted(p.name[: -len(".vol.json")] for p in self.volume_dir.glob("*.vol.json"))

    def has_volume(self, volume_id: str) -> bool:
        return (self.volume_dir / f"{volume_id}.vol.json").exists()

    def load(self, volume_id: str) -> Volume:
        return load_volume(self.volume_dir, volume_id)

    def normalized(self, volume_id: str) -> Volume:
        with self.lock:
            cached = self._normalized.get(volume_id)
        if cached is not None:
            return cached
        normalized = clip_and_normalize(self.load(volume_id))
        with self.lock:
            self._normalized[volume_id] = normalized
        return normalized

    def add_volume(self, volume: Volume) -> None:
        save_volume(volume, self.volume_dir)

    # -- jobs -------------------------------------------------------------

    def mask_path(self, job_id: str) -> Path:
        return self.job_dir / f"{job_id}.mask.rle.json"

    def result_labels(self, job: Job) -> np.ndarray | None:
        with self.lock:
            cached = self._result_masks.get(job.id)
        if cached is not None:
            return cached
        path = self.mask_path(job.id)
        if not path.exists():
            return None
        labels = load_mask(path).labels
        with self.lock:
            self._result_masks[job.id] = labels
        return labels

    def submit(self, volume_id: str, axis: str, start_index: int, prompt_doc: dict,
               refined_from: str | None = None) -> Job:
        prompt = prompt_from_json(prompt_doc)  # may raise InvalidInputError
        volume = self.normalized(volume_id)
        depth = volume.extent(axis)
        if not 1 <= start_index <= depth - 2:
            raise InvalidInputError(
                f"start_index {start_index} outside interior [1, {depth - 2}]"
            )
        dim = axis_dim(axis)
        plane = tuple(s for i, s in enumerate(volume.shape) if i != dim)
        prompt.validate_bounds(*plane)
        with self.lock:
            busy = [j for j in self.jobs.values()
                    if j.volume_id == volume_id and j.status in ACTIVE]
            if busy:
                raise VolumeBusy(busy[0].id)
            job = Job(
                id=uuid.uuid4().hex[:12],
                volume_id=volume_id,
                axis=axis,
                start_index=start_index,
                prompt=prompt_doc,
                total_slices=depth,
                refined_from=refined_from,
            )
            self.jobs[job.id] = job
            self._save_index()
        self.pool.submit(self._run, job.id)
        return job

    def _run(self, job_id: str):
        with self.lock:
            job = self.jobs[job_id]
            job.status = RUNNING
            self._save_index()
        try:
            volume = self.normalized(job.volume_id)
            prompt = prompt_from_json(job.prompt)

            def on_progress(index: int, plane: np.ndarray):
                rle = rle_encode(plane)
                with self.lock:
                    job.labeled.add(int(index))
                    job.partial[int(index)] = {
                        "height": rle.height, "width": rle.width, "runs": rle.runs,
                    }

            result = segment_volume(volume, job.axis, job.start_index, prompt,
                                    self.predictor, progress_cb=on_progress)
            labels = result.mask.labels
            if job.refined_from is not None:
                parent = self.jobs.get(job.refined_from)
                parent_labels = self.result_labels(parent) if parent else None
                if parent_labels is not None:
                    merged = (parent_labels > 0) | (labels > 0)
                    labels = np.zeros_like(labels)
                    labels[merged] = 1
            mask = VolumeMask(
                labels,
                {1: {"name": "instance-1", "source": "predicted"}} if labels.any() else {},
            )
            save_mask(mask, self.mask_path(job.id), job.volume_id)
            payload = {
                "job": job.id,
                "volume_id": job.volume_id,
                "axis": job.axis,
                "start_index": job.start_index,
                "forward_reason": result.forward_reason,
                "backward_reason": result.backward_reason,
                "mask": mask_payload(mask, job.volume_id),
            }
            with self.lock:
                job.status = DONE
                self._result_masks[job.id] = labels
                # freeze the response body once; later GETs return these bytes
                body = dict(job.public())
                body["result"] = payload
                job.done_body = (
                    json.dumps(body, sort_keys=True, separators=(",", ":")).encode() + b"\n"
                )
                self._save_index()
        except Exception as exc:  # noqa: BLE001 - job failures become state
            with self.lock:
                job.status = FAILED
                job.error = f"{type(exc).__name__}: {exc}"
                self._save_index()


class VolumeBusy(SlideSegError):
    def __init__(self, job_id: str):
        super().__init__(f"volume already has active job {job_id}")
        self.job_id = job_id


# ---------------------------------------------------------------------------
# PNG rendering


def render_slice_png(gray: np.ndarray, overlay: np.ndarray | None) -> bytes:
    """Encode one slice; an empty overlay is byte-identical to no overlay."""
    img8 = np.clip(np.asarray(gray, dtype=np.float64), 0, 255).astype(np.uint8)
    if overlay is not None and overlay.any():
        rgb = np.repeat(img8[:, :, None].astype(np.float64), 3, axis=2)
        rgb[overlay] = (1 - OVERLAY_ALPHA) * rgb[overlay] + OVERLAY_ALPHA * OVERLAY_COLOR
        image = Image.fromarray(rgb.astype(np.uint8), mode="RGB")
    else:
        image = Image.fromarray(img8, mode="L")
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# FastAPI wiring


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse({"error": message}, status_code=status)


def create_app(store_dir: Path | str, predictor, max_workers: int = 2,
               max_bytes: int = DEFAULT_MAX_BYTES) -> FastAPI:
    """Build the service around a store directory and a window predictor."""
    store = AnnotationStore(Path(store_dir), predictor, max_workers=max_workers,
                            max_bytes=max_bytes)
    app = FastAPI(title="slideseg annotation service", version="1")
    app.state.store = store
    # the browser client may be served from a different origin (static page)
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    @app.post(API_PREFIX + "/volumes", status_code=201)
    async def upload_volume(request: Request):
        try:
            doc = json.loads(await request.body())
        except json.JSONDecodeError:
            return _error(400, "body must be JSON")
        try:
            shape = tuple(int(v) for v in doc["shape"])
            dtype = str(doc.get("dtype", "float32"))
            spacing = tuple(float(v) for v in doc.get("spacing", (1.0, 1.0, 1.0)))
            modality = str(doc.get("modality", "SYNTH"))
            voxels_b64 = doc["voxels_b64"]
            volume_id = str(doc.get("id") or uuid.uuid4().hex[:12])
        except (KeyError, TypeError, ValueError) as exc:
            return _error(400, f"bad volume payload: {exc}")
        if dtype not in DTYPE_CODES:
            return _error(400, f"dtype must be one of {sorted(DTYPE_CODES)}")
        try:
            raw = base64.b64decode(voxels_b64, validate=True)
        except (ValueError, TypeError):
            return _error(400, "voxels_b64 is not valid base64")
        if len(raw) > store.max_bytes:
            return _error(413, f"volume exceeds {store.max_bytes} bytes")
        expected = int(np.prod(shape)) * np.dtype(DTYPE_CODES[dtype]).itemsize
        if len(shape) != 3 or min(shape, default=0) < 3:
            return _error(400, f"shape must be 3 dims of at least 3, got {list(shape)}")
        if len(raw) != expected:
            return _error(400, f"voxel buffer is {len(raw)} bytes, expected {expected}")
        # repeat uploads are kept, never deduplicated: mint a distinct id
        assigned = volume_id
        suffix = 2
        while store.has_volume(assigned):
            assigned = f"{volume_id}-{suffix}"
            suffix += 1
        volume_id = assigned
        voxels = np.frombuffer(raw, dtype=DTYPE_CODES[dtype]).reshape(shape)
        voxels = voxels.astype(voxels.dtype.newbyteorder("="), copy=True)
        try:
            volume = Volume(voxels, spacing, modality, volume_id)
        except SlideSegError as exc:
            return _error(400, str(exc))
        store.add_volume(volume)
        return {"id": volume_id, "shape": list(shape), "modality": modality,
                "spacing": list(spacing)}

    @app.get(API_PREFIX + "/volumes")
    def list_volumes():
        out = []
        for vid in store.volume_ids():
            volume = store.load(vid)
            out.append({"id": vid, "shape": list(volume.shape),
                        "modality": volume.modality, "spacing": list(volume.spacing)})
        return {"volumes": out}

    @app.get(API_PREFIX + "/volumes/{volume_id}")
    def get_volume(volume_id: str):
        if not store.has_volume(volume_id):
            return _error(404, f"unknown volume {volume_id}")
        volume = store.load(volume_id)
        return {"id": volume_id, "shape": list(volume.shape),
                "modality": volume.modality, "spacing": list(volume.spacing)}

    @app.get(API_PREFIX + "/volumes/{volume_id}/slices/{axis}/{index}")
    def get_slice(volume_id: str, axis: str, index: int,
                  overlay: str | None = Query(default=None)):
        if not store.has_volume(volume_id):
            return _error(404, f"unknown volume {volume_id}")
        if axis not in AXES:
            return _error(404, f"unknown axis {axis!r}")
        volume = store.normalized(volume_id)
        depth = volume.extent(axis)
        if not 0 <= index < depth:
            return _error(416, f"slice {index} outside [0, {depth - 1}]")
        dim = axis_dim(axis)
        gray = np.moveaxis(volume.voxels, dim, 0)[index]
        overlay_mask = None
        if overlay is not None:
            with store.lock:
                job = store.jobs.get(overlay)
            if job is None:
                return _error(404, f"unknown job {overlay}")
            if job.volume_id != volume_id:
                return _error(404, f"job {overlay} does not belong to volume {volume_id}")
            if job.status == DONE:
                labels = store.result_labels(job)
                if labels is not None:
                    overlay_mask = np.moveaxis(labels, dim, 0)[index] > 0
            elif axis == job.axis:
                with store.lock:
                    entry = job.partial.get(index)
                if entry is not None:
                    from .volume_io import RleMask, rle_decode

                    overlay_mask = rle_decode(
                        RleMask(entry["height"], entry["width"], entry["runs"])
                    )
        return Response(render_slice_png(gray, overlay_mask), media_type="image/png")

    @app.post(API_PREFIX + "/volumes/{volume_id}/jobs", status_code=201)
    async def create_job(volume_id: str, request: Request):
        if not store.has_volume(volume_id):
            return _error(404, f"unknown volume {volume_id}")
        try:
            doc = json.loads(await request.body())
        except json.JSONDecodeError:
            return _error(422, "body must be JSON")
        axis = doc.get("axis", "z")
        if axis not in AXES:
            return _error(422, f"axis must be one of {AXES}")
        try:
            start_index = int(doc["start_index"])
        except (KeyError, TypeError, ValueError):
            return _error(422, "start_index is required and must be an integer")
        try:
            job = store.submit(volume_id, axis, start_index, doc.get("prompt"))
        except VolumeBusy as exc:
            return _error(409, str(exc))
        except InvalidInputError as exc:
            return _error(422, str(exc))
        return job.public()

    @app.get(API_PREFIX + "/jobs/{job_id}")
    def get_job(job_id: str):
        with store.lock:
            job = store.jobs.get(job_id)
            if job is None:
                return _error(404, f"unknown job {job_id}")
            if job.status == DONE and job.done_body is not None:
                return Response(job.done_body, media_type="application/json")
            return JSONResponse(job.public())

    @app.post(API_PREFIX + "/jobs/{job_id}/refine", status_code=201)
    async def refine_job(job_id: str, request: Request):
        with store.lock:
            parent = store.jobs.get(job_id)
        if parent is None:
            return _error(404, f"unknown job {job_id}")
        if parent.status != DONE:
            return _error(409, f"job {job_id} is {parent.status}, refine needs a done job")
        try:
            doc = json.loads(await request.body())
        except json.JSONDecodeError:
            return _error(422, "body must be JSON")
        try:
            start_index = int(doc["start_index"])
        except (KeyError, TypeError, ValueError):
            return _error(422, "start_index is required and must be an integer")
        try:
            job = store.submit(parent.volume_id, parent.axis, start_index,
                               doc.get("prompt"), refined_from=parent.id)
        except VolumeBusy as exc:
            return _error(409, str(exc))
        except InvalidInputError as exc:
            return _error(422, str(exc))
        return job.public()

    return app
