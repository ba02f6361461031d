"""Attach an out-of-process model as a coalition scorer.

Wire format is newline-delimited JSON, one object per line:

    -> {"id": 7, "op": "register", "image_id": "a", "grids": [[...], ...]}
    <- {"id": 7, "ok": true}
    -> {"id": 8, "op": "score", "image_id": "a", "mask": [1, 0, ...], "label": 1}
    <- {"id": 8, "score": 0.25}          or  {"id": 8, "error": "..."}

The remote side zeroes the grids outside ``mask`` and returns the logit of
``label``.  Responses may arrive in any order; they are matched by id.
"""

from __future__ import annotations

import contextlib
import itertools
import json
import logging
import queue
import shlex
import socket
import subprocess
import threading
from dataclasses import dataclass, field

import numpy as np

from ..game import EvaluationError, _GameBase, coerce_masks

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0


class ProtocolError(EvaluationError):
    def __init__(self, message: str, payload: str = ""):
        super().__init__(message)
        self.payload = payload


@dataclass(eq=False)
class ExternalScorer:
    """Session with a scoring process over child stdio or a TCP socket.

    ``endpoint`` is a command line (``transport="stdio"``) or ``host:port``.
    Scorers not marked ``concurrent_safe`` serialise whole batches behind a lock.
    """

    transport: str
    endpoint: str
    concurrent_safe: bool = False
    timeout: float = DEFAULT_TIMEOUT
    _ids: itertools.count = field(default_factory=lambda: itertools.count(1), init=False, repr=False)
    _pending: dict = field(default_factory=dict, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)
    _batch_lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)
    _proc: subprocess.Popen | None = field(default=None, init=False, repr=False)
    _sock: socket.socket | None = field(default=None, init=False, repr=False)
    _dead: str | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.transport not in ("stdio", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")

    # --- session -------------------------------------------------------------------
    def start(self) -> "ExternalScorer":
        if self.transport == "stdio":
            self._proc = subprocess.Popen(shlex.split(self.endpoint), stdin=subprocess.PIPE,
                                          stdout=subprocess.PIPE, bufsize=0)
            self._out, self._in = self._proc.stdin, self._proc.stdout
        else:
            host, _, port = self.endpoint.rpartition(":")
            try:
                self._sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=self.timeout)
            except OSError as exc:
                raise EvaluationError(f"cannot connect to {self.endpoint}: {exc}") from exc
            self._sock.settimeout(None)
            self._in = self._sock.makefile("rb")
            self._out = self._sock.makefile("wb", buffering=0)
        threading.Thread(target=self._read_loop, daemon=True).start()
        return self

    def close(self) -> None:
        for closer in (getattr(self, "_out", None), self._sock):
            try:
                if closer is not None:
                    closer.close()
            except OSError:
                pass
        if self._proc is not None:
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    # --- transport -----------------------------------------------------------------
    def _read_loop(self) -> None:
        try:
            for raw in self._in:
                line = raw.decode("utf-8", "replace").strip()
                if not line:
                    continue
                try:
                    msg = json.loads(line)
                    rid = msg["id"]
                except (ValueError, KeyError, TypeError):
                    log.error("malformed response from %s: %r", self.endpoint, line)
                    self._fail_all(ProtocolError(f"malformed response from {self.endpoint}", line))
                    continue
                with self._lock:
                    slot = self._pending.pop(rid, None)
                if slot is None:
                    log.warning("response with unknown id %r from %s", rid, self.endpoint)
                else:
                    slot.put((msg, line))
        except (OSError, ValueError):
            pass
        self._dead = f"scorer {self.endpoint!r} closed the connection"
        self._fail_all(EvaluationError(self._dead))

    def _fail_all(self, exc: Exception) -> None:
        with self._lock:
            slots, self._pending = list(self._pending.values()), {}
        for slot in slots:
            slot.put(exc)

    def _send(self, payload: dict) -> queue.Queue:
        if self._dead:
            raise EvaluationError(self._dead)
        rid = next(self._ids)
        slot: queue.Queue = queue.Queue(1)
        with self._lock:
            self._pending[rid] = slot
        try:
            self._out.write((json.dumps({"id": rid, **payload}) + "\n").encode())
        except (OSError, ValueError) as exc:
            with self._lock:
                self._pending.pop(rid, None)
            raise EvaluationError(f"scorer {self.endpoint!r} is not accepting requests: {exc}") from exc
        return slot

    def _await(self, slot: queue.Queue) -> tuple[dict, str]:
        try:
            got = slot.get(timeout=self.timeout)
        except queue.Empty:
            raise EvaluationError(f"scorer {self.endpoint!r} timed out after {self.timeout:g} s") from None
        if isinstance(got, Exception):
            raise got
        return got

    # --- operations ----------------------------------------------------------------
    def register(self, image_id: str, grids) -> None:
        grids = np.asarray(grids, dtype=np.float64)
        msg, line = self._await(self._send({"op": "register", "image_id": image_id, "grids": grids.tolist()}))
        if "error" in msg or not msg.get("ok", False):
            raise ProtocolError(f"registration of {image_id!r} rejected: {msg.get('error', line)}", line)

    def score_many(self, image_id: str, masks, label: int) -> np.ndarray:
        masks = np.atleast_2d(np.asarray(masks))
        with self._batch_lock if not self.concurrent_safe else contextlib.nullcontext():
            slots = [self._send({"op": "score", "image_id": image_id,
                                 "mask": [int(b) for b in m], "label": int(label)}) for m in masks]
            out = np.empty(len(slots))
            for i, slot in enumerate(slots):
                msg, line = self._await(slot)
                if "error" in msg:
                    raise EvaluationError(f"scorer error for {image_id!r}: {msg['error']}", masks[i].astype(np.uint8))
                try:
                    out[i] = float(msg["score"])
                except (KeyError, TypeError, ValueError):
                    log.error("malformed response from %s: %r", self.endpoint, line)
                    raise ProtocolError(f"response without a numeric score from {self.endpoint}", line) from None
        return out


def external_score(scorer: ExternalScorer, image_id: str, mask, label: int = 1) -> float:
    return float(scorer.score_many(image_id, [mask], label)[0])


class ExternalGame(_GameBase):
    """Coalition game whose value is computed remotely from a registered image."""

    def __init__(self, scorer: ExternalScorer, image_id: str, grids, label: int):
        grids = np.asarray(grids, dtype=np.float64)
        self.scorer, self.image_id, self.label = scorer, image_id, int(label)
        self.n_players = grids.shape[0]
        scorer.register(image_id, grids)
        self.baseline_score = self.evaluate(np.zeros(self.n_players, dtype=bool))

    @property
    def concurrent_safe(self) -> bool:
        return self.scorer.concurrent_safe

    def evaluate_many(self, masks) -> np.ndarray:
        return self.scorer.score_many(self.image_id, coerce_masks(masks, self.n_players), self.label)


def parse_scorer(spec: str, timeout: float = DEFAULT_TIMEOUT, concurrent_safe: bool = False) -> ExternalScorer:
    """``stdio:<command line>`` or ``tcp:<host:port>``."""
    kind, sep, rest = spec.partition(":")
    if not sep or kind not in ("stdio", "tcp") or not rest:
        raise ValueError(f"scorer spec must be stdio:<command> or tcp:<host:port>, got {spec!r}")
    return ExternalScorer(kind, rest, concurrent_safe, timeout)
