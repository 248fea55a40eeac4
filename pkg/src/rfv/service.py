"""Read-only JSON-over-HTTP retrieval service.

The index is built once at startup and never mutated, so request handler
threads share it without locks.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import unquote, urlsplit

from .bank import Bank, entry_metadata
from .errors import RfvError
from .retriever import EmbedderConfig, RetrievalIndex, build_index, embed_text, mips_topk

log = logging.getLogger("rfv.service")


class BadRequest(Exception):
    pass


class RetrievalService:
    """Library-level request handling, shared by HTTP and in-process callers."""

    def __init__(self, bank: Bank, index: RetrievalIndex | None = None):
        self.bank = bank
        self.index = index if index is not None else build_index(
            bank, EmbedderConfig(bank.embedding_dim or 64))
        self.embedder = EmbedderConfig(self.index.dim)
        # materialise per-view sub-indices now so request threads only read
        for v in sorted(set(self.index.views) - {""}):
            self.index.for_view(v)

    def retrieve(self, body) -> dict:
        if not isinstance(body, dict):
            raise BadRequest("request body must be a JSON object")
        unknown = set(body) - {"query", "k", "view"}
        if unknown:
            raise BadRequest(f"unknown fields: {sorted(unknown)}")
        query = body.get("query")
        if not isinstance(query, str) or not query.strip():
            raise BadRequest("'query' must be a non-empty string")
        k = body.get("k", 3)
        if isinstance(k, bool) or not isinstance(k, int) or k < 1:
            raise BadRequest("'k' must be an integer >= 1")
        view = body.get("view")
        if view is not None and not isinstance(view, str):
            raise BadRequest("'view' must be a string")
        try:
            q = embed_text(query, self.embedder)
            ranked = mips_topk(self.index.for_view(view), q, k)
        except RfvError as exc:
            raise BadRequest(str(exc)) from exc
        return {"results": ranked.to_json()}

    def entry(self, entry_id: str) -> dict | None:
        if entry_id not in self.bank:
            return None
        return entry_metadata(self.bank.get_entry(entry_id))


def _handler(service: RetrievalService):
    class Handler(BaseHTTPRequestHandler):
        server_version = "rfv/1"
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("%s - " + fmt, self.address_string(), *args)

        def _send(self, code: int, payload, content_type="application/json"):
            data = payload if isinstance(payload, bytes) else json.dumps(payload).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            path = urlsplit(self.path).path
            if path == "/v1/health":
                return self._send(200, b"ok", "text/plain; charset=utf-8")
            if path.startswith("/v1/entries/"):
                eid = unquote(path[len("/v1/entries/"):])
                meta = service.entry(eid)
                if meta is None:
                    return self._send(404, {"error": f"unknown entry id {eid!r}"})
                return self._send(200, meta)
            self._send(404, {"error": f"no route for GET {path}"})

        def do_POST(self):
            path = urlsplit(self.path).path
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length > 0 else b""
            if path != "/v1/retrieve":
                return self._send(404, {"error": f"no route for POST {path}"})
            try:
                body = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                return self._send(400, {"error": f"malformed JSON: {exc}"})
            try:
                return self._send(200, service.retrieve(body))
            except BadRequest as exc:
                return self._send(400, {"error": str(exc)})

    return Handler


def make_server(service: RetrievalService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    srv = ThreadingHTTPServer((host, port), _handler(service))
    srv.daemon_threads = True
    return srv


def serve_in_thread(service: RetrievalService, host: str = "127.0.0.1", port: int = 0):
    """Start on a background thread; returns (server, thread). Port 0 picks a free port."""
    srv = make_server(service, host, port)
    th = threading.Thread(target=srv.serve_forever, name="rfv-service", daemon=True)
    th.start()
    return srv, th
