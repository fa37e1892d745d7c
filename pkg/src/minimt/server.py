"""JSON-over-HTTP translation service on the standard library HTTP server."""
from __future__ import annotations

import json
import logging
import signal
import threading
import time
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .translate import DECODE_KEYS

log = logging.getLogger("minimt.server")

API_VERSION = 1
MAX_BODY = 16 << 20


class RequestError(ValueError):
    pass


class TranslationService:
    """Turns request objects into response objects against one loaded model."""

    def __init__(self, translator, cfg, max_input_len=None):
        self.translator = translator
        self.cfg = dict(cfg)
        self.max_input_len = max_input_len
        self.started = time.monotonic()

    def health(self):
        return {
            "status": "ok",
            "api_version": API_VERSION,
            "model": self.translator.name,
            "config_hash": self.translator.config_hash,
            "uptime": round(time.monotonic() - self.started, 3),
        }

    def _options(self, overrides):
        if overrides is None:
            overrides = {}
        if not isinstance(overrides, dict):
            raise RequestError("opts must be an object")
        unknown = sorted(set(overrides) - set(DECODE_KEYS) - {"attn"})
        if unknown:
            raise RequestError(f"unknown opts {unknown}")
        cfg = dict(self.cfg)
        cfg.update({k: v for k, v in overrides.items() if k != "attn"})
        return self.translator.options(cfg), bool(overrides.get("attn", False))

    def translate(self, items):
        """Translate a list of request objects; errors stay per item.

        Items sharing the same options are decoded in consecutive batches of
        ``translate_batch_size``, exactly as the command line cuts a file.
        """
        responses = [None] * len(items)
        groups = {}
        for i, item in enumerate(items):
            try:
                if not isinstance(item, dict) or "src" not in item:
                    raise RequestError("each request needs a 'src' field")
                if not isinstance(item["src"], str):
                    raise RequestError("'src' must be a string")
                opts, want_attn = self._options(item.get("opts"))
                tokens = self.translator.prepare(item["src"])
                if self.max_input_len is not None and len(tokens) > self.max_input_len:
                    raise RequestError(f"source has {len(tokens)} tokens, limit is {self.max_input_len}")
                key = json.dumps(item.get("opts") or {}, sort_keys=True)
                groups.setdefault(key, (opts, []))[1].append((i, item.get("src"), want_attn))
            except (RequestError, ValueError) as exc:
                responses[i] = {"id": item.get("id") if isinstance(item, dict) else None, "error": str(exc)}
        size = self.cfg["translate_batch_size"]
        for opts, members in groups.values():
            lines = [src for _, src, _ in members]
            try:
                results = self.translator.translate_lines(lines, opts, size)
            except ValueError as exc:
                for i, _, _ in members:
                    responses[i] = {"id": items[i].get("id"), "error": str(exc)}
                continue
            for (i, _, want_attn), r in zip(members, results):
                resp = {
                    "id": items[i].get("id"),
                    "tgt": r.text,
                    "score": r.score,
                    "raw_score": r.raw_score,
                    "n_best": [{"tgt": t, "score": n, "raw_score": raw} for t, n, raw in r.n_best],
                }
                if r.flags:
                    resp["flags"] = r.flags
                if want_attn:
                    resp["attn"] = r.attn
                responses[i] = resp
        return responses


class _Handler(BaseHTTPRequestHandler):
    server_version = "minimt"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status, obj):
        body = (json.dumps(obj, ensure_ascii=False) + "\n").encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/health":
            self._send(HTTPStatus.OK, self.server.service.health())
        else:
            self._send(HTTPStatus.NOT_FOUND, {"error": f"no route {self.path}"})

    def do_POST(self):
        if self.path != "/translate":
            self._send(HTTPStatus.NOT_FOUND, {"error": f"no route {self.path}"})
            return
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY:
            self._send(HTTPStatus.REQUEST_ENTITY_TOO_LARGE, {"error": "request body too large"})
            return
        raw = self.rfile.read(length)
        try:
            body = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            self._send(HTTPStatus.BAD_REQUEST, {"error": f"malformed JSON: {exc}"})
            return
        single = isinstance(body, dict)
        items = [body] if single else body
        if not isinstance(items, list):
            self._send(HTTPStatus.BAD_REQUEST, {"error": "body must be a request object or an array of them"})
            return
        responses = self.server.service.translate(items)
        self._send(HTTPStatus.OK, responses[0] if single else responses)


class TranslationServer(ThreadingHTTPServer):
    """Threaded server; ``shutdown`` waits for in-flight requests."""

    daemon_threads = False
    block_on_close = True

    def __init__(self, address, service):
        super().__init__(address, _Handler)
        self.service = service


def make_server(translator, cfg, max_input_len=None, host=None, port=None):
    service = TranslationService(translator, cfg, max_input_len)
    return TranslationServer((host or cfg["host"], cfg["port"] if port is None else port), service)


def serve(translator, cfg, max_input_len=None):
    server = make_server(translator, cfg, max_input_len)
    host, port = server.server_address[:2]
    log.info("serving %s on http://%s:%d", translator.name, host, port)

    def stop(signum, frame):
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    try:
        server.serve_forever()
    finally:
        server.server_close()
        log.info("server stopped")


def start_background(translator, cfg, max_input_len=None, port=0):
    """Start a server on a daemon thread; returns (server, base_url). Call ``server.shutdown()`` to stop."""
    server = make_server(translator, cfg, max_input_len, port=port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    return server, f"http://{host}:{port}"
