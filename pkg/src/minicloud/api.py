"""HTTP/JSON management API.

One surface, two consumers: the SDK/CLI and the operator dashboard. Every
``/api`` endpoint requires ``Authorization: Bearer <token>``; handlers are
concurrent readers and forward mutations to the master event loop. The
dashboard's static files are served from the configured root without auth.
"""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qs, urlparse

from .config import Role
from .errors import (
    NotFound,
    PlatformError,
    TooLarge,
    Unauthorized,
    ValidationFailed,
)

# (method, path template). The auth property test enumerates this table.
ROUTES = [
    ("POST", "/api/apps"),
    ("GET", "/api/apps"),
    ("GET", "/api/apps/{app_id}"),
    ("GET", "/api/apps/{app_id}/results"),
    ("POST", "/api/apps/{app_id}/cancel"),
    ("POST", "/api/apps/{app_id}/close"),
    ("POST", "/api/apps/{app_id}/units"),
    ("GET", "/api/apps/{app_id}/units/{unit_id}"),
    ("POST", "/api/apps/{app_id}/units/{unit_id}/abort"),
    ("GET", "/api/nodes"),
    ("GET", "/api/pools"),
    ("GET", "/api/reports/usage"),
    ("GET", "/api/billing/{user}"),
    ("GET", "/api/catalog"),
    ("GET", "/api/events"),
    ("POST", "/api/admin/{command}"),
    ("POST", "/api/files"),
    ("GET", "/api/files/{digest}"),
]

_STATUS_BY_CODE = {
    "Unauthorized": 401,
    "NotAuthorized": 403,
    "UnknownApp": 404,
    "UnknownUnit": 404,
    "UnknownNode": 404,
    "NotFound": 404,
    "UnknownCommand": 404,
    "DuplicateAppId": 409,
    "Overlap": 409,
    "NodeBusy": 409,
    "NotTerminal": 409,
    "PoolExhausted": 409,
    "TooLarge": 413,
    "FrameTooLarge": 413,
}


def status_for(exc: PlatformError) -> int:
    return _STATUS_BY_CODE.get(exc.code, 400)


def _compile_routes():
    compiled = []
    for method, template in ROUTES:
        pattern = re.sub(r"\{(\w+)\}", r"(?P<\1>[^/]+)", template)
        compiled.append((method, template, re.compile(f"^{pattern}$")))
    return compiled


_COMPILED = _compile_routes()

MAX_JSON_BODY = 8 * 1024 * 1024


class ManagementApi:
    def __init__(self, master, host: str, port: int, dashboard_root: Optional[str] = None):
        self.master = master
        self.dashboard_root = Path(dashboard_root) if dashboard_root else None
        handler = self._make_handler()
        self.server = ThreadingHTTPServer((host, port), handler)
        self.server.daemon_threads = True
        self.port = self.server.server_address[1]
        self._thread = threading.Thread(target=self.server.serve_forever,
                                        name="api-server", daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()

    def _make_handler(self):
        api = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            server_version = "minicloud"

            def log_message(self, fmt, *args):  # quiet
                pass

            def do_GET(self):
                api.handle(self, "GET")

            def do_POST(self):
                api.handle(self, "POST")

        return Handler

    # -- request handling -------------------------------------------------------

    def handle(self, request: BaseHTTPRequestHandler, method: str) -> None:
        parsed = urlparse(request.path)
        path = parsed.path
        try:
            if not path.startswith("/api/"):
                if method == "GET":
                    self._serve_static(request, path)
                else:
                    self._send_json(request, 404, {"error": "NotFound", "message": path})
                return
            match = None
            for route_method, template, pattern in _COMPILED:
                m = pattern.match(path)
                if m:
                    if route_method == method:
                        match = (template, m.groupdict())
                        break
                    match = match or None
            if match is None:
                self._send_json(request, 404, {"error": "NotFound", "message": path})
                return
            template, args = match

            user = self.master.authenticate(self._bearer_token(request))
            if user is None:
                raise Unauthorized("missing or invalid bearer token")
            if user.role is Role.WORKER and not template.startswith("/api/files") \
                    and template != "/api/catalog":
                raise Unauthorized("worker tokens may only access staging endpoints")

            query = {k: v[-1] for k, v in parse_qs(parsed.query).items()}
            result = self._dispatch(request, method, template, args, query, user)
            if result is not None:
                self._send_json(request, 200, result)
        except PlatformError as exc:
            self._send_json(request, status_for(exc), exc.to_doc())
        except BrokenPipeError:
            pass
        except Exception as exc:  # internal error
            try:
                self._send_json(request, 500, {"error": "Internal", "message": str(exc)})
            except Exception:
                pass

    def _bearer_token(self, request) -> Optional[str]:
        header = request.headers.get("Authorization", "")
        if header.startswith("Bearer "):
            return header[len("Bearer "):].strip()
        return None

    def _read_json(self, request) -> dict:
        length = int(request.headers.get("Content-Length") or 0)
        if length > MAX_JSON_BODY:
            raise TooLarge(f"request body of {length} bytes")
        if length == 0:
            return {}
        data = request.rfile.read(length)
        try:
            doc = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValidationFailed(f"request body is not JSON: {exc}")
        if not isinstance(doc, dict):
            raise ValidationFailed("request body must be a JSON object")
        return doc

    def _send_json(self, request, status: int, doc) -> None:
        body = json.dumps(doc).encode("utf-8")
        request.send_response(status)
        request.send_header("Content-Type", "application/json")
        request.send_header("Content-Length", str(len(body)))
        request.end_headers()
        request.wfile.write(body)

    def _send_bytes(self, request, status: int, content: bytes,
                    content_type: str = "application/octet-stream") -> None:
        request.send_response(status)
        request.send_header("Content-Type", content_type)
        request.send_header("Content-Length", str(len(content)))
        request.end_headers()
        request.wfile.write(content)

    def _dispatch(self, request, method: str, template: str, args: dict,
                  query: dict, user):
        master = self.master
        if template == "/api/apps" and method == "POST":
            if user.role is Role.WORKER:
                raise Unauthorized("worker tokens cannot submit applications")
            return master.api_submit_app(user, self._read_json(request))
        if template == "/api/apps" and method == "GET":
            return master.api_list_apps(user)
        if template == "/api/apps/{app_id}":
            include_units = query.get("units", "1") not in ("0", "false")
            return master.api_app_status(user, args["app_id"], include_units=include_units)
        if template == "/api/apps/{app_id}/results":
            return master.api_results(user, args["app_id"])
        if template == "/api/apps/{app_id}/cancel":
            return master.api_cancel_app(user, args["app_id"])
        if template == "/api/apps/{app_id}/close":
            return master.api_close_app(user, args["app_id"])
        if template == "/api/apps/{app_id}/units":
            body = self._read_json(request)
            return master.api_add_units(user, args["app_id"], body.get("units", []))
        if template == "/api/apps/{app_id}/units/{unit_id}":
            return master.api_unit_doc(user, args["app_id"], args["unit_id"])
        if template == "/api/apps/{app_id}/units/{unit_id}/abort":
            return master.api_abort_unit(user, args["app_id"], args["unit_id"])
        if template == "/api/nodes":
            return master.api_nodes()
        if template == "/api/pools":
            return master.api_pools()
        if template == "/api/reports/usage":
            return master.api_usage_report()
        if template == "/api/billing/{user}":
            return master.api_billing(user, args["user"])
        if template == "/api/catalog":
            return master.api_catalog()
        if template == "/api/events":
            since = int(query.get("since", 0))
            limit = min(int(query.get("limit", 1000)), 10000)
            return master.api_events(since, limit)
        if template == "/api/admin/{command}":
            return master.api_admin(user, args["command"], self._read_json(request))
        if template == "/api/files" and method == "POST":
            length = int(request.headers.get("Content-Length") or 0)
            if length > master.store.size_cap:
                raise TooLarge(f"{length} bytes exceeds cap {master.store.size_cap}")
            content = request.rfile.read(length)
            name = request.headers.get("X-Logical-Name", "")
            ref = master.store.stage_in(content, logical_name=name)
            return ref.to_doc()
        if template == "/api/files/{digest}":
            content = master.store.stage_out(args["digest"])
            self._send_bytes(request, 200, content)
            return None
        raise NotFound(template)

    # -- static dashboard ---------------------------------------------------------

    _CONTENT_TYPES = {".html": "text/html", ".js": "application/javascript",
                      ".css": "text/css", ".map": "application/json",
                      ".json": "application/json", ".svg": "image/svg+xml"}

    def _serve_static(self, request, path: str) -> None:
        if path in ("/", ""):
            path = "/index.html"
        if path == "/health":
            self._send_json(request, 200, {"ok": True})
            return
        if self.dashboard_root is None:
            self._send_json(request, 404, {"error": "NotFound",
                                           "message": "no dashboard configured"})
            return
        target = (self.dashboard_root / path.lstrip("/")).resolve()
        root = self.dashboard_root.resolve()
        if not str(target).startswith(str(root)) or not target.is_file():
            self._send_json(request, 404, {"error": "NotFound", "message": path})
            return
        content_type = self._CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        self._send_bytes(request, 200, target.read_bytes(), content_type)
