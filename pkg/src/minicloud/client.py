"""Client SDK: a thin typed wrapper over the management API.

Submission is asynchronous (submit returns an app id immediately); the only
blocking client call is ``RemoteThreadHandle.join``, which is safe to use
from multiple threads at once.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Any, Optional

import requests
from requests.adapters import HTTPAdapter

from . import errors
from .errors import ExecutionFailed, JoinTimeout, PlatformError, UnitAborted
from .foundation.storage import FileRef


class RemoteFailure(PlatformError):
    code = "RemoteFailure"


def _session(token: str) -> requests.Session:
    session = requests.Session()
    session.headers["Authorization"] = f"Bearer {token}"
    adapter = HTTPAdapter(pool_connections=4, pool_maxsize=64)
    session.mount("http://", adapter)
    return session


class _Http:
    def __init__(self, base_url: str, token: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = _session(token)

    def request(self, method: str, path: str, *, json_body=None, params=None,
                raw_body: Optional[bytes] = None, headers=None, raw_response=False):
        url = self.base_url + path
        try:
            response = self.session.request(method, url, json=json_body, params=params,
                                            data=raw_body, headers=headers,
                                            timeout=self.timeout)
        except requests.RequestException as exc:
            raise RemoteFailure(f"{method} {path}: {exc}") from exc
        if response.status_code >= 400:
            try:
                doc = response.json()
            except ValueError:
                doc = {"error": "RemoteFailure", "message": response.text[:500]}
            if response.status_code >= 500 and doc.get("error") in (None, "Internal"):
                raise RemoteFailure(doc.get("message", ""), status=response.status_code)
            raise errors.from_code(doc.get("error", "PlatformError"),
                                   doc.get("message", ""),
                                   status=response.status_code,
                                   **doc.get("details", {}))
        if raw_response:
            return response.content
        return response.json()


class RemoteStorage:
    """File staging against the master's content-addressed store."""

    def __init__(self, api_url: str, token: str, timeout: float = 60.0):
        self._http = _Http(api_url, token, timeout)

    def stage_in(self, content: bytes, name: str = "") -> FileRef:
        doc = self._http.request("POST", "/api/files", raw_body=content,
                                 headers={"X-Logical-Name": name,
                                          "Content-Type": "application/octet-stream"})
        return FileRef.from_doc(doc)

    def stage_out(self, ref) -> bytes:
        digest = ref if isinstance(ref, str) else (
            ref.digest if isinstance(ref, FileRef) else ref["digest"])
        return self._http.request("GET", f"/api/files/{digest}", raw_response=True)


@dataclass
class RemoteThreadHandle:
    """A submitted remote thread; mirrors its unit's lifecycle."""
    client: "PlatformClient"
    app_id: str
    unit_id: str

    def state(self) -> dict:
        return self.client.unit_status(self.app_id, self.unit_id)

    def join(self, timeout: Optional[float] = None, poll: float = 0.05) -> Any:
        """Block until the underlying unit is terminal, then return its result.

        Raises ExecutionFailed after retries are exhausted, UnitAborted for
        cancelled units, and JoinTimeout when the deadline passes first (the
        unit keeps running).
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            doc = self.state()
            state = doc["state"]
            if state == "Completed":
                return doc["result"]
            if state == "Aborted":
                raise UnitAborted(f"{self.unit_id} was aborted")
            if state == "Failed" and doc["attempts"] >= doc["max_attempts"]:
                raise ExecutionFailed(doc.get("error") or "remote execution failed",
                                      unit_id=self.unit_id)
            if deadline is not None and time.monotonic() >= deadline:
                raise JoinTimeout(f"join timed out after {timeout}s; unit still {state}")
            time.sleep(poll)

    def abort(self) -> dict:
        return self.client.abort_unit(self.app_id, self.unit_id)


class ThreadApp:
    """An open Thread-model application; close it when no more threads come."""

    def __init__(self, client: "PlatformClient", app_id: str):
        self.client = client
        self.app_id = app_id

    def start(self, fn: str, args: Optional[dict] = None) -> RemoteThreadHandle:
        return self.client.thread_start(self.app_id, fn, args)

    def close(self) -> dict:
        return self.client.close_app(self.app_id)

    def __enter__(self) -> "ThreadApp":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        try:
            self.close()
        except PlatformError:
            pass


class PlatformClient:
    def __init__(self, api_url: str, token: str, timeout: float = 30.0):
        self._http = _Http(api_url, token, timeout)
        self.storage = RemoteStorage(api_url, token)

    # -- submission --------------------------------------------------------------

    def submit_application(self, model_kind: str, *, units: Optional[list] = None,
                           sweep: Optional[dict] = None, mapreduce: Optional[dict] = None,
                           qos: Optional[dict] = None, name: str = "",
                           sealed: Optional[bool] = None) -> str:
        body: dict = {"model_kind": model_kind, "name": name}
        if units is not None:
            body["units"] = units
        if sweep is not None:
            body["sweep"] = sweep
        if mapreduce is not None:
            body["mapreduce"] = mapreduce
        if qos is not None:
            body["qos"] = qos
        if sealed is not None:
            body["sealed"] = sealed
        return self._http.request("POST", "/api/apps", json_body=body)["app_id"]

    def submit_task_bag(self, units: list, qos: Optional[dict] = None, name: str = "") -> str:
        return self.submit_application("Task", units=units, qos=qos, name=name)

    def submit_sweep(self, template: dict, dimensions: list,
                     qos: Optional[dict] = None, name: str = "") -> str:
        return self.submit_application(
            "Task", sweep={"template": template, "dimensions": dimensions},
            qos=qos, name=name)

    def submit_mapreduce(self, map_fn: str, reduce_fn: str, splits: list,
                         reducers: int, qos: Optional[dict] = None, name: str = "") -> str:
        split_docs = [s.to_doc() if isinstance(s, FileRef) else s for s in splits]
        return self.submit_application(
            "MapReduce", mapreduce={"map_fn": map_fn, "reduce_fn": reduce_fn,
                                    "splits": split_docs, "reducers": reducers},
            qos=qos, name=name)

    # -- threads --------------------------------------------------------------------

    def create_thread_app(self, name: str = "") -> ThreadApp:
        app_id = self.submit_application("Thread", units=[], name=name)
        return ThreadApp(self, app_id)

    def thread_start(self, app_id: str, fn: str, args: Optional[dict] = None) -> RemoteThreadHandle:
        doc = self._http.request("POST", f"/api/apps/{app_id}/units",
                                 json_body={"units": [{"function": fn, "args": args or {}}]})
        return RemoteThreadHandle(client=self, app_id=app_id, unit_id=doc["unit_ids"][0])

    def close_app(self, app_id: str) -> dict:
        return self._http.request("POST", f"/api/apps/{app_id}/close")

    # -- monitoring -------------------------------------------------------------------

    def app_status(self, app_id: str, include_units: bool = True) -> dict:
        params = None if include_units else {"units": "0"}
        return self._http.request("GET", f"/api/apps/{app_id}", params=params)

    def list_apps(self) -> list:
        return self._http.request("GET", "/api/apps")

    def wait_app(self, app_id: str, timeout: Optional[float] = None,
                 poll: float = 0.1) -> dict:
        """Poll until the application is terminal; returns its final status."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            doc = self.app_status(app_id, include_units=False)
            if doc["state"] in ("Completed", "Failed", "Cancelled"):
                return doc
            if deadline is not None and time.monotonic() >= deadline:
                raise JoinTimeout(f"application {app_id} still {doc['state']} after {timeout}s")
            time.sleep(poll)

    def unit_status(self, app_id: str, unit_id: str) -> dict:
        return self._http.request("GET", f"/api/apps/{app_id}/units/{unit_id}")

    def fetch_results(self, app_id: str) -> dict:
        return self._http.request("GET", f"/api/apps/{app_id}/results")

    def cancel_app(self, app_id: str) -> dict:
        return self._http.request("POST", f"/api/apps/{app_id}/cancel")

    def abort_unit(self, app_id: str, unit_id: str) -> dict:
        return self._http.request("POST", f"/api/apps/{app_id}/units/{unit_id}/abort")

    # -- staging ----------------------------------------------------------------------

    def stage_in(self, content: bytes, name: str = "") -> FileRef:
        return self.storage.stage_in(content, name)

    def stage_out(self, ref) -> bytes:
        return self.storage.stage_out(ref)

    # -- platform views -----------------------------------------------------------------

    def nodes(self) -> list:
        return self._http.request("GET", "/api/nodes")

    def pools(self) -> dict:
        return self._http.request("GET", "/api/pools")

    def usage_report(self) -> dict:
        return self._http.request("GET", "/api/reports/usage")

    def billing(self, user: str) -> dict:
        return self._http.request("GET", f"/api/billing/{user}")

    def catalog(self) -> list:
        return self._http.request("GET", "/api/catalog")

    def events(self, since: int = 0, limit: int = 1000) -> dict:
        return self._http.request("GET", "/api/events",
                                  params={"since": since, "limit": limit})

    def admin(self, command: str, **params) -> dict:
        return self._http.request("POST", f"/api/admin/{command}", json_body=params)
