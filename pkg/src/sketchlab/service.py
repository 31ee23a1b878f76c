"""JSON-over-HTTP session service for iterative sketch refinement.

Stdlib-only server (ThreadingHTTPServer). Sessions live in memory in an LRU
store (default cap 64); per-session operations are serialized with a lock,
and a single inference lock guards the shared encoder's forward caches.
Images travel as base64-encoded PGM bytes, which keeps the wire format
bit-exact and codec-free.

Routes:
    POST   /v1/sessions                           -> 201 {"session_id": ...}
    POST   /v1/sessions/{id}/iterations           -> 200 iteration payload
    GET    /v1/sessions/{id}                      -> session summary
    GET    /v1/sessions/{id}/iterations/{n}/image -> PGM bytes (n = 0: input)
    DELETE /v1/sessions/{id}                      -> 204
    GET    /v1/healthz                            -> 200 {"status": "ok"}

Malformed bodies return 400 with per-field errors, unknown sessions 404, and
degenerate embedding combinations 422. Sessions do not survive restarts.
"""

from __future__ import annotations

import base64
import binascii
import json
import math
import re
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import urlsplit

from sketchlab.encoder import EncoderModel
from sketchlab.errors import (
    DegenerateCombinationError,
    SketchLabError,
    ValidationError,
)
from sketchlab.images import GrayImage, decode_pgm, encode_pgm
from sketchlab.refine import (
    MODEL_KINDS,
    GeneratorBackend,
    RefinementConfig,
    RefinementSession,
    ToyLatentBackend,
    new_session,
    refine_step,
)

DEFAULT_MAX_SESSIONS = 64

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".mjs": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
    ".map": "application/json",
    ".txt": "text/plain; charset=utf-8",
}


class HttpError(Exception):
    """Carries an HTTP status and a JSON payload to the handler."""

    def __init__(self, status: int, payload: dict):
        super().__init__(f"http {status}")
        self.status = status
        self.payload = payload


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()


def _jsonable_metrics(metrics: dict[str, float]) -> dict[str, float | None]:
    """Leave finite values alone; +inf (identical images) becomes JSON null."""
    return {k: (None if math.isinf(v) else v) for k, v in metrics.items()}


@dataclass
class SessionResource:
    session: RefinementSession
    lock: threading.Lock
    created_at: float
    updated_at: float


def _validate_create(body: dict) -> tuple[dict, dict[str, str]]:
    """Returns (clean fields, field errors); errors empty means valid."""
    errors: dict[str, str] = {}
    clean: dict = {}

    description = body.get("description")
    if not isinstance(description, str) or not description.strip():
        errors["description"] = "required: non-empty string"
    else:
        clean["description"] = description.strip()

    image_b64 = body.get("image_base64")
    if not isinstance(image_b64, str) or not image_b64:
        errors["image_base64"] = "required: base64-encoded PGM image"
    else:
        try:
            raw = base64.b64decode(image_b64, validate=True)
            clean["image"] = decode_pgm(raw)
        except (binascii.Error, ValueError) as exc:
            errors["image_base64"] = f"not valid base64: {exc}"
        except SketchLabError as exc:
            errors["image_base64"] = f"not a valid PGM image: {exc}"

    model_kind = body.get("model_kind")
    if model_kind not in MODEL_KINDS:
        errors["model_kind"] = f"required: one of {list(MODEL_KINDS)}"
    else:
        clean["model_kind"] = model_kind

    clean["strength"], err = _number_field(body, "strength", 0.3, 0.0, 1.0)
    if err:
        errors["strength"] = err
    clean["guidance_scale"], err = _number_field(body, "guidance_scale", 7.5,
                                                 0.0, None)
    if err:
        errors["guidance_scale"] = err

    seed = body.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        errors["seed"] = "must be an integer"
    else:
        clean["seed"] = seed

    known = {"description", "image_base64", "model_kind", "strength",
             "guidance_scale", "seed"}
    for key in body:
        if key not in known:
            errors[key] = "unknown field"
    return clean, errors


def _number_field(body: dict, name: str, default: float,
                  lo: float, hi: float | None) -> tuple[float, str | None]:
    value = body.get(name, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return default, "must be a number"
    value = float(value)
    if not math.isfinite(value) or value < lo or (hi is not None and value > hi):
        bound = f"[{lo}, {hi}]" if hi is not None else f">= {lo}"
        return default, f"must be in {bound}"
    return value, None


class SketchService:
    """Session store plus the state shared by every request."""

    def __init__(self, model: EncoderModel, base_model: EncoderModel,
                 backend: GeneratorBackend | None = None,
                 *, max_sessions: int = DEFAULT_MAX_SESSIONS):
        if max_sessions < 1:
            raise ValidationError("max_sessions must be >= 1")
        self.tuned = model
        self.base = base_model
        self.backend = backend or ToyLatentBackend(
            image_size=model.config.image_size,
            conditioning_dim=model.config.cond_dim,
        )
        self.max_sessions = max_sessions
        self._store: OrderedDict[str, SessionResource] = OrderedDict()
        self._store_lock = threading.Lock()
        # Forward passes cache activations on shared layers, so inference is
        # serialized globally even across distinct sessions.
        self._model_lock = threading.Lock()

    def _model_for(self, kind: str) -> EncoderModel:
        return self.tuned if kind == "model3" else self.base

    def _get(self, session_id: str) -> SessionResource:
        with self._store_lock:
            resource = self._store.get(session_id)
            if resource is None:
                raise HttpError(404, {"error": "not_found",
                                      "detail": f"no session {session_id!r}"})
            self._store.move_to_end(session_id)
            return resource

    def create_session(self, body: dict) -> dict:
        clean, errors = _validate_create(body)
        if errors:
            raise HttpError(400, {"errors": errors})
        model = self._model_for(clean["model_kind"])
        size = model.config.image_size
        cfg = RefinementConfig(
            model_kind=clean["model_kind"],
            strength=clean["strength"],
            guidance_scale=clean["guidance_scale"],
            seed=clean["seed"],
        )
        session = new_session(clean["description"],
                              clean["image"].resize(size, size), cfg)
        now = time.time()
        resource = SessionResource(session=session, lock=threading.Lock(),
                                   created_at=now, updated_at=now)
        with self._store_lock:
            while len(self._store) >= self.max_sessions:
                self._store.popitem(last=False)
            self._store[session.id] = resource
        return {"session_id": session.id}

    def run_iteration(self, session_id: str, body: dict) -> dict:
        resource = self._get(session_id)
        errors: dict[str, str] = {}
        feedback = body.get("feedback_text")
        if feedback is not None and not isinstance(feedback, str):
            errors["feedback_text"] = "must be a string"
        overrides = {}
        for name, lo, hi in (("strength", 0.0, 1.0), ("guidance_scale", 0.0, None)):
            if name in body:
                value, err = _number_field(body, name, 0.0, lo, hi)
                if err:
                    errors[name] = err
                else:
                    overrides[name] = value
        known = {"feedback_text", "strength", "guidance_scale"}
        for key in body:
            if key not in known:
                errors[key] = "unknown field"
        if errors:
            raise HttpError(400, {"errors": errors})

        with resource.lock:
            session = resource.session
            if overrides:
                session.config = replace(session.config, **overrides)
            model = self._model_for(session.config.model_kind)
            try:
                with self._model_lock:
                    record = refine_step(session, model, self.backend,
                                         feedback_text=feedback)
            except DegenerateCombinationError as exc:
                raise HttpError(422, {"error": "degenerate_combination",
                                      "detail": str(exc)}) from exc
            resource.updated_at = time.time()
            return {
                "iteration_index": record.index,
                "metrics": _jsonable_metrics(record.metrics_prev),
                "image_base64": base64.b64encode(
                    encode_pgm(record.image)).decode("ascii"),
            }

    def summary(self, session_id: str) -> dict:
        resource = self._get(session_id)
        with resource.lock:
            session = resource.session
            series = {
                key: [None if math.isinf(r.metrics_prev[key]) else r.metrics_prev[key]
                      for r in session.records]
                for key in ("ssim", "psnr", "clip_score", "perceptual_distance")
            }
            return {
                "session_id": session.id,
                "description": session.description,
                "model_kind": session.config.model_kind,
                "strength": session.config.strength,
                "guidance_scale": session.config.guidance_scale,
                "seed": session.config.seed,
                "iteration_count": len(session.records),
                "feedback": list(session.feedback),
                "prompts": [r.prompt_used for r in session.records],
                "metrics": series,
                "created_at": _iso(resource.created_at),
                "updated_at": _iso(resource.updated_at),
            }

    def image_bytes(self, session_id: str, index: int) -> bytes:
        resource = self._get(session_id)
        with resource.lock:
            images = resource.session.images()
            if not 0 <= index < len(images):
                raise HttpError(404, {
                    "error": "not_found",
                    "detail": f"iteration {index} not in [0, {len(images) - 1}]",
                })
            return encode_pgm(images[index])

    def delete_session(self, session_id: str) -> None:
        with self._store_lock:
            if session_id not in self._store:
                raise HttpError(404, {"error": "not_found",
                                      "detail": f"no session {session_id!r}"})
            del self._store[session_id]

    def session_count(self) -> int:
        with self._store_lock:
            return len(self._store)


_ROUTES = (
    ("POST", re.compile(r"^/v1/sessions$"), "create"),
    ("POST", re.compile(r"^/v1/sessions/([^/]+)/iterations$"), "iterate"),
    ("GET", re.compile(r"^/v1/sessions/([^/]+)$"), "summary"),
    ("GET", re.compile(r"^/v1/sessions/([^/]+)/iterations/(\d+)/image$"), "image"),
    ("DELETE", re.compile(r"^/v1/sessions/([^/]+)$"), "delete"),
    ("GET", re.compile(r"^/v1/healthz$"), "health"),
)


class _Handler(BaseHTTPRequestHandler):
    server_version = "sketchlab"
    protocol_version = "HTTP/1.1"

    @property
    def service(self) -> SketchService:
        return self.server.service  # type: ignore[attr-defined]

    def log_message(self, format, *args):  # noqa: A002 (stdlib signature)
        if getattr(self.server, "verbose", False):
            super().log_message(format, *args)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_DELETE(self):
        self._dispatch("DELETE")

    def _dispatch(self, method: str):
        path = urlsplit(self.path).path
        try:
            for route_method, pattern, name in _ROUTES:
                if route_method != method:
                    continue
                m = pattern.match(path)
                if not m:
                    continue
                getattr(self, f"_handle_{name}")(*m.groups())
                return
            if method == "GET" and self._maybe_static(path):
                return
            raise HttpError(404, {"error": "not_found",
                                  "detail": f"no route {method} {path}"})
        except HttpError as exc:
            self._send_json(exc.status, exc.payload)
        except SketchLabError as exc:
            self._send_json(500, {"error": type(exc).__name__, "detail": str(exc)})

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return {}
        raw = self.rfile.read(length)
        try:
            body = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise HttpError(400, {"errors": {"body": "not valid JSON"}})
        if not isinstance(body, dict):
            raise HttpError(400, {"errors": {"body": "must be a JSON object"}})
        return body

    def _handle_create(self):
        result = self.service.create_session(self._read_body())
        self._send_json(201, result)

    def _handle_iterate(self, session_id: str):
        result = self.service.run_iteration(session_id, self._read_body())
        self._send_json(200, result)

    def _handle_summary(self, session_id: str):
        self._send_json(200, self.service.summary(session_id))

    def _handle_image(self, session_id: str, index: str):
        data = self.service.image_bytes(session_id, int(index))
        self._send_bytes(200, "image/x-portable-graymap", data)

    def _handle_delete(self, session_id: str):
        self.service.delete_session(session_id)
        self.send_response(204)
        self.send_header("Content-Length", "0")
        self.end_headers()

    def _handle_health(self):
        self._send_json(200, {"status": "ok"})

    def _maybe_static(self, path: str) -> bool:
        """Serves the optional bundled UI directory; returns False if unset."""
        root = getattr(self.server, "ui_dir", None)
        if root is None:
            return False
        rel = path.lstrip("/") or "index.html"
        target = (root / rel).resolve()
        if not str(target).startswith(str(root.resolve())) or not target.is_file():
            if path == "/" or "." not in rel.rsplit("/", 1)[-1]:
                target = (root / "index.html").resolve()  # SPA fallback
                if not target.is_file():
                    return False
            else:
                return False
        ctype = _CONTENT_TYPES.get(target.suffix.lower(),
                                   "application/octet-stream")
        self._send_bytes(200, ctype, target.read_bytes())
        return True

    def _send_json(self, status: int, payload: dict):
        self._send_bytes(status, "application/json",
                         json.dumps(payload).encode("utf-8"))

    def _send_bytes(self, status: int, content_type: str, data: bytes):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


def build_server(service: SketchService, host: str = "127.0.0.1",
                 port: int = 8765, *, ui_dir: str | Path | None = None,
                 verbose: bool = False) -> ThreadingHTTPServer:
    """Binds a threading HTTP server; the caller drives serve_forever()."""
    server = ThreadingHTTPServer((host, port), _Handler)
    server.daemon_threads = True
    server.service = service  # type: ignore[attr-defined]
    server.ui_dir = Path(ui_dir) if ui_dir is not None else None  # type: ignore[attr-defined]
    server.verbose = verbose  # type: ignore[attr-defined]
    return server
