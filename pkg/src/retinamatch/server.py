"""HTTP service backing the browser annotation / match-review UI.

JSON API (same-origin only; no CORS headers are emitted):

  GET  /api/images                      -> [{id, width, height, annotated}]
  GET  /api/image/{id}                  -> PNG bytes
  GET  /api/annotations/{id}            -> AnnotationFile (empty skeleton if new)
  PUT  /api/annotations/{id}            -> 200 stored doc | 409 stale version |
                                           422 schema violation (field path)
  GET  /api/pairs                       -> [{id, query, ref, category, has_matches}]
  GET  /api/matches/{pair_id}           -> match dump + registration overlay + review
  PUT  /api/matches/{pair_id}/review    -> {"accepted": [bool|null, ...]}
  GET  /api/export/controls/{pair_id}   -> accepted matches, text control format

Annotation writes are atomic (write-temp-then-rename) and serialized per
image id; concurrent PUTs resolve by version check (last writer wins only
when it saw the latest version).
"""

from __future__ import annotations

import json
import os
import re
import signal
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from PIL import Image

from . import data as data_mod
from .data import AnnotationFile, AnnotationSchemaError

DATA_DIR_ENV = "RETINA_MATCH_DATA_DIR"

_ROUTES: list[tuple[str, re.Pattern, str]] = [
    ("GET", re.compile(r"^/api/images$"), "list_images"),
    ("GET", re.compile(r"^/api/image/(?P<id>[\w.-]+)$"), "get_image"),
    ("GET", re.compile(r"^/api/annotations/(?P<id>[\w.-]+)$"), "get_annotations"),
    ("PUT", re.compile(r"^/api/annotations/(?P<id>[\w.-]+)$"), "put_annotations"),
    ("GET", re.compile(r"^/api/pairs$"), "list_pairs"),
    ("GET", re.compile(r"^/api/matches/(?P<id>[\w.-]+)$"), "get_matches"),
    ("PUT", re.compile(r"^/api/matches/(?P<id>[\w.-]+)/review$"), "put_review"),
    ("GET", re.compile(r"^/api/export/controls/(?P<id>[\w.-]+)$"), "export_controls"),
]


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class AnnotationStore:
    """File-backed state shared by all request threads."""

    def __init__(self, data_dir: str | Path):
        self.root = Path(data_dir)
        if not self.root.is_dir():
            raise ApiError(500, f"data dir {self.root} does not exist")
        self._meta = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}

    def lock_for(self, image_id: str) -> threading.Lock:
        with self._meta:
            return self._locks.setdefault(image_id, threading.Lock())

    # --- images ---------------------------------------------------------
    def image_path(self, image_id: str) -> Path:
        p = self.root / "images" / f"{image_id}.png"
        if not p.is_file():
            raise ApiError(404, f"no image {image_id!r}")
        return p

    def annotation_path(self, image_id: str) -> Path:
        return self.root / "annotations" / f"{image_id}.json"

    def list_images(self) -> list[dict]:
        images_dir = self.root / "images"
        out = []
        for p in sorted(images_dir.glob("*.png")) if images_dir.is_dir() else []:
            with Image.open(p) as im:
                w, h = im.size
            out.append({
                "id": p.stem,
                "width": w,
                "height": h,
                "annotated": self.annotation_path(p.stem).is_file(),
            })
        return out

    def get_annotations(self, image_id: str) -> dict:
        ann_path = self.annotation_path(image_id)
        if ann_path.is_file():
            return data_mod.load_annotations(ann_path).to_dict()
        with Image.open(self.image_path(image_id)) as im:
            w, h = im.size
        return AnnotationFile(image_id=image_id, image_path=f"images/{image_id}.png",
                              width=w, height=h, version=0).to_dict()

    def put_annotations(self, image_id: str, doc: dict) -> dict:
        try:
            ann = data_mod.parse_annotation(doc)
        except AnnotationSchemaError as exc:
            raise ApiError(422, str(exc)) from exc
        if ann.image_id != image_id:
            raise ApiError(422, f"image_id: body says {ann.image_id!r}, path says {image_id!r}")
        self.image_path(image_id)  # 404 for unknown images
        with self.lock_for(image_id):
            current = self.get_annotations(image_id)["version"]
            if ann.version != current:
                raise ApiError(409, f"version conflict: server has {current}, "
                                    f"request sent {ann.version}")
            stored = data_mod.save_annotations(ann, self.annotation_path(image_id))
        return stored.to_dict()

    # --- pairs / matches -------------------------------------------------
    def list_pairs(self) -> list[dict]:
        manifest = self.root / "pairs.json"
        if not manifest.is_file():
            return []
        entries = json.loads(manifest.read_text())
        out = []
        for i, e in enumerate(entries):
            pid = str(e.get("id", i))
            out.append({
                "id": pid,
                "query": e.get("query"),
                "ref": e.get("ref"),
                "category": e.get("category"),
                "has_matches": (self.root / "matches" / f"{pid}.json").is_file(),
            })
        return out

    def get_matches(self, pair_id: str) -> dict:
        p = self.root / "matches" / f"{pair_id}.json"
        if not p.is_file():
            raise ApiError(404, f"no matches dumped for pair {pair_id!r}")
        doc = json.loads(p.read_text())
        review = self._review_path(pair_id)
        n = len(doc.get("matches", []))
        if review.is_file():
            doc["review"] = json.loads(review.read_text())["accepted"]
        else:
            doc["review"] = [None] * n
        return doc

    def _review_path(self, pair_id: str) -> Path:
        return self.root / "reviews" / f"{pair_id}.json"

    def put_review(self, pair_id: str, doc: dict) -> dict:
        matches = self.get_matches(pair_id)
        accepted = doc.get("accepted")
        if not isinstance(accepted, list):
            raise ApiError(422, "accepted: expected a list of booleans")
        if len(accepted) != len(matches["matches"]):
            raise ApiError(422, f"accepted: expected {len(matches['matches'])} entries, "
                                f"got {len(accepted)}")
        for i, v in enumerate(accepted):
            if v is not None and not isinstance(v, bool):
                raise ApiError(422, f"accepted[{i}]: expected boolean or null")
        path = self._review_path(pair_id)
        with self.lock_for(f"review:{pair_id}"):
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps({"pair_id": pair_id, "accepted": accepted}))
            os.replace(tmp, path)
        return {"pair_id": pair_id, "accepted": accepted}

    def export_controls(self, pair_id: str) -> str:
        doc = self.get_matches(pair_id)
        review = doc["review"]
        lines = []
        for m, (iq, ir, _dist) in enumerate(doc["matches"]):
            if m < len(review) and review[m] is True:
                qx, qy, _ = doc["query_keypoints"][iq]
                rx, ry, _ = doc["ref_keypoints"][ir]
                lines.append(f"{qx!r} {qy!r} {rx!r} {ry!r}")
        return "\n".join(lines) + ("\n" if lines else "")


class _Handler(BaseHTTPRequestHandler):
    server_version = "retinamatch"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        if os.environ.get("RETINA_MATCH_HTTP_LOG"):
            super().log_message(fmt, *args)

    # --- plumbing ---------------------------------------------------------
    def _send(self, status: int, body: bytes, ctype: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, status: int, doc) -> None:
        self._send(status, json.dumps(doc).encode(), "application/json")

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ApiError(400, f"invalid JSON body: {exc}") from exc

    def _dispatch(self, method: str) -> None:
        store: AnnotationStore = self.server.store  # type: ignore[attr-defined]
        path = self.path.split("?")[0]
        try:
            for m, pattern, name in _ROUTES:
                match = pattern.match(path)
                if m == method and match:
                    self._handle(store, name, match.groupdict())
                    return
            if method == "GET":
                self._static(path)
                return
            raise ApiError(404, f"no route for {method} {path}")
        except ApiError as exc:
            self._send_json(exc.status, {"error": str(exc)})
        except Exception as exc:  # pragma: no cover - defensive
            self._send_json(500, {"error": f"{type(exc).__name__}: {exc}"})

    def _handle(self, store: AnnotationStore, name: str, kw: dict) -> None:
        if name == "list_images":
            self._send_json(200, store.list_images())
        elif name == "get_image":
            self._send(200, store.image_path(kw["id"]).read_bytes(), "image/png")
        elif name == "get_annotations":
            self._send_json(200, store.get_annotations(kw["id"]))
        elif name == "put_annotations":
            self._send_json(200, store.put_annotations(kw["id"], self._read_json()))
        elif name == "list_pairs":
            self._send_json(200, store.list_pairs())
        elif name == "get_matches":
            self._send_json(200, store.get_matches(kw["id"]))
        elif name == "put_review":
            self._send_json(200, store.put_review(kw["id"], self._read_json()))
        elif name == "export_controls":
            self._send(200, store.export_controls(kw["id"]).encode("ascii"), "text/plain")
        else:  # pragma: no cover
            raise ApiError(500, f"unwired route {name}")

    def _static(self, path: str) -> None:
        static: Path | None = self.server.static_dir  # type: ignore[attr-defined]
        if static is None:
            if path == "/":
                self._send(200, b"<html><body>retinamatch annotation server; "
                                b"no UI bundle configured (use --static).</body></html>",
                           "text/html")
                return
            raise ApiError(404, f"not found: {path}")
        rel = "index.html" if path == "/" else path.lstrip("/")
        target = (static / rel).resolve()
        if not str(target).startswith(str(static.resolve())) or not target.is_file():
            raise ApiError(404, f"not found: {path}")
        ctype = {
            ".html": "text/html", ".js": "application/javascript",
            ".css": "text/css", ".png": "image/png", ".svg": "image/svg+xml",
            ".map": "application/json",
        }.get(target.suffix, "application/octet-stream")
        self._send(200, target.read_bytes(), ctype)

    def do_GET(self):
        self._dispatch("GET")

    def do_PUT(self):
        self._dispatch("PUT")


def make_server(data_dir: str | Path, port: int = 0, host: str = "127.0.0.1",
                static_dir: str | Path | None = None) -> ThreadingHTTPServer:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise OSError(f"data dir {data_dir} does not exist")
    if not os.access(data_dir, os.W_OK):
        raise OSError(f"data dir {data_dir} is not writable")
    server = ThreadingHTTPServer((host, port), _Handler)
    server.store = AnnotationStore(data_dir)             # type: ignore[attr-defined]
    server.static_dir = Path(static_dir) if static_dir else None  # type: ignore[attr-defined]
    return server


def serve_forever(server: ThreadingHTTPServer) -> None:
    """Run until SIGINT/SIGTERM, then shut down cleanly."""
    def _stop(signum, frame):
        threading.Thread(target=server.shutdown, daemon=True).start()

    previous = {}
    for sig in (signal.SIGINT, signal.SIGTERM):
        previous[sig] = signal.signal(sig, _stop)
    try:
        server.serve_forever()
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)
        server.server_close()
