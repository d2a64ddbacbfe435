"""Read-only HTTP rendering service consumed by the scrubber UI.

Endpoints:
  GET /api/info                      -> JSON scene description
  GET /api/render?variant=&pose=&t=  -> PNG bytes (strong ETag = content hash)
  GET /api/freeze?variant=&t=        -> ZIP of all poses rendered at t
  GET /...                           -> static UI bundle, when configured

Renders are deterministic, so responses are cache-friendly; repeated requests
return byte-identical bodies. Models are immutable snapshots shared across
request threads; a lock serializes rendering (numpy releases the GIL anyway,
and correctness beats parallel renders here).
"""

from __future__ import annotations

import hashlib
import io
import json
import threading
import zipfile
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from . import sceneio


class ServiceError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class _Variant:
    def __init__(self, model, poses, timestamps):
        self.model = model
        self.poses = poses
        self.timestamps = timestamps


class RenderService:
    def __init__(self, variants: dict, static_dir: Path | None = None):
        if not variants:
            raise ValueError("need at least one checkpoint")
        self.variants = variants
        self.static_dir = static_dir
        self._lock = threading.Lock()
        self._render_cache: dict = {}
        first = next(iter(variants.values()))
        self.n_poses = len(first.poses)
        self.timestamps = list(first.timestamps)
        camera = first.model.camera
        self.width, self.height = camera.width, camera.height

    @classmethod
    def from_checkpoints(cls, checkpoints: dict, static_dir: Path | None = None) -> "RenderService":
        variants = {}
        for name, path in checkpoints.items():
            model, poses, timestamps, _ = sceneio.load_checkpoint(path)
            variants[name] = _Variant(model, poses, timestamps)
        return cls(variants, static_dir=static_dir)

    # ---- request handlers (pure: path+query -> status, content-type, body) ----

    def info(self) -> dict:
        return {
            "n_poses": self.n_poses,
            "timestamps": self.timestamps,
            "variants": sorted(self.variants),
            "width": self.width,
            "height": self.height,
        }

    def _variant(self, params) -> tuple:
        name = params.get("variant", [sorted(self.variants)[0]])[0]
        variant = self.variants.get(name)
        if variant is None:
            raise ServiceError(404, f"unknown variant {name!r}")
        return name, variant

    @staticmethod
    def _float_param(params, key) -> float:
        raw = params.get(key)
        if not raw:
            raise ServiceError(400, f"missing query parameter {key!r}")
        try:
            return float(raw[0])
        except ValueError:
            raise ServiceError(400, f"query parameter {key!r} is not a number: {raw[0]!r}")

    def render_png(self, params) -> bytes:
        name, variant = self._variant(params)
        t = self._float_param(params, "t")
        if not 0.0 <= t <= 1.0:
            raise ServiceError(400, f"t={t} outside [0, 1]")
        raw_pose = params.get("pose")
        if not raw_pose:
            raise ServiceError(400, "missing query parameter 'pose'")
        try:
            pose_idx = int(raw_pose[0])
        except ValueError:
            raise ServiceError(400, f"pose is not an integer: {raw_pose[0]!r}")
        if not 0 <= pose_idx < len(variant.poses):
            raise ServiceError(404, f"pose {pose_idx} out of range [0, {len(variant.poses)})")

        key = (name, pose_idx, t)
        with self._lock:
            cached = self._render_cache.get(key)
            if cached is not None:
                return cached
            state = variant.model.deform_at(t)
            img, _ = variant.model.render_state(state, variant.poses[pose_idx])
            png = sceneio.png_bytes(img.pixels)
            if len(self._render_cache) > 256:
                self._render_cache.clear()
            self._render_cache[key] = png
            return png

    def freeze_zip(self, params) -> bytes:
        _, variant = self._variant(params)
        t = self._float_param(params, "t")
        if not 0.0 <= t <= 1.0:
            raise ServiceError(400, f"t={t} outside [0, 1]")
        with self._lock:
            state = variant.model.deform_at(t)  # one deformation for every pose
            buf = io.BytesIO()
            with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
                for n, pose in enumerate(variant.poses):
                    img, _ = variant.model.render_state(state, pose)
                    info = zipfile.ZipInfo(f"frame_{n:04d}.png", date_time=(1980, 1, 1, 0, 0, 0))
                    zf.writestr(info, sceneio.png_bytes(img.pixels))
            return buf.getvalue()

    def handle(self, path: str) -> tuple:
        """Dispatch a GET path; returns (status, content type, body bytes)."""
        parsed = urlparse(path)
        params = parse_qs(parsed.query)
        try:
            if parsed.path == "/api/info":
                return 200, "application/json", json.dumps(self.info()).encode()
            if parsed.path == "/api/render":
                return 200, "image/png", self.render_png(params)
            if parsed.path == "/api/freeze":
                return 200, "application/zip", self.freeze_zip(params)
            if self.static_dir is not None and not parsed.path.startswith("/api/"):
                return self._static(parsed.path)
            raise ServiceError(404, f"no such endpoint {parsed.path!r}")
        except ServiceError as err:
            return err.status, "application/json", json.dumps({"error": str(err)}).encode()

    def _static(self, path: str) -> tuple:
        rel = path.lstrip("/") or "index.html"
        target = (self.static_dir / rel).resolve()
        if not str(target).startswith(str(self.static_dir.resolve())) or not target.is_file():
            raise ServiceError(404, f"no static file {rel!r}")
        types = {".html": "text/html", ".js": "text/javascript", ".css": "text/css", ".map": "application/json"}
        return 200, types.get(target.suffix, "application/octet-stream"), target.read_bytes()

    def serve_forever(self, host: str, port: int):
        server = self.make_server(host, port)
        server.serve_forever()

    def make_server(self, host: str, port: int) -> ThreadingHTTPServer:
        service = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):
                status, ctype, body = service.handle(self.path)
                etag = '"' + hashlib.sha256(body).hexdigest() + '"'
                if self.headers.get("If-None-Match") == etag:
                    self.send_response(304)
                    self.send_header("ETag", etag)
                    self.end_headers()
                    return
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.send_header("ETag", etag)
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        try:
            return ThreadingHTTPServer((host, port), Handler)
        except OSError as err:
            raise ServiceError(500, f"cannot bind {host}:{port}: {err}")
