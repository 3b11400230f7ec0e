"""Minimal HTTP ranking service over a frozen model snapshot.

POST /recommend  {"query": "...", "top_k": 5} ->
    {"results": [{"doctor_id", "score", "department"}], "model_id": "..."}
GET  /health     -> {"status": "ok", "model_id": "..."}

The model is immutable for the process lifetime; requests are served from a
threading server, which is safe because ranking is pure.
"""

from __future__ import annotations

import json
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .corpus import tokenize
from .ranker import RecModel, rank


class RankingService:
    """Holds the frozen model; ``model`` may arrive after the server binds, in
    which case requests get 503 until it does."""

    def __init__(self, model: RecModel | None = None, model_id: str = "unset",
                 stoplist=frozenset()):
        self.model = model
        self.model_id = model_id
        self.stoplist = frozenset(stoplist)

    def ready(self) -> bool:
        return self.model is not None

    def recommend(self, query_text: str, top_k: int) -> list[dict]:
        tokens = tokenize(query_text, keep_stopwords=True)
        result = rank(self.model, tokens)
        return [{"doctor_id": d, "score": s,
                 "department": self.model.departments.get(d, "")}
                for d, s in result.top(top_k)]


class _Handler(BaseHTTPRequestHandler):
    service: RankingService  # attached by make_server

    def log_message(self, fmt, *args):  # tests stay quiet
        pass

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path != "/health":
            self._send(404, {"error": "unknown path"})
            return
        if not self.service.ready():
            self._send(503, {"error": "model still loading"})
            return
        self._send(200, {"status": "ok", "model_id": self.service.model_id})

    def do_POST(self):
        if self.path != "/recommend":
            self._send(404, {"error": "unknown path"})
            return
        if not self.service.ready():
            self._send(503, {"error": "model still loading"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            payload = json.loads(self.rfile.read(length))
            if not isinstance(payload, dict):
                raise ValueError("body must be a JSON object")
            query = payload["query"]
            top_k = payload.get("top_k", 5)
        except (ValueError, KeyError) as exc:
            self._send(400, {"error": f"malformed request body: {exc}"})
            return
        if not isinstance(top_k, int) or isinstance(top_k, bool) or top_k < 1:
            self._send(400, {"error": "top_k must be a positive integer"})
            return
        if not isinstance(query, str):
            self._send(400, {"error": "query must be a string"})
            return
        if not query.strip():
            self._send(422, {"error": "query is empty"})
            return
        try:
            results = self.service.recommend(query, top_k)
        except ValueError as exc:
            self._send(400, {"error": str(exc)})
            return
        self._send(200, {"results": results, "model_id": self.service.model_id})


def make_server(service: RankingService, host: str = "127.0.0.1",
                port: int = 8341) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"service": service})
    return ThreadingHTTPServer((host, port), handler)


def serve_forever(service: RankingService, host: str, port: int) -> None:
    server = make_server(service, host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
