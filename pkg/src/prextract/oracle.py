"""Black-box victim access with budget and price accounting.

The attacker only ever holds an :class:`Oracle`, whose sole public method is
``query_batch``. Every answered sample is charged to a :class:`QueryLedger`;
a batch that would overrun the budget is rejected whole.
"""

from __future__ import annotations

import base64
import json
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Sequence

import numpy as np

from .datasets import Sample, stack_images
from .nn import Classifier

API_VERSION = "1"
LABEL_ONLY = "label_only"
TOPK_POSTERIOR = "topk_posterior"
MODES = (LABEL_ONLY, TOPK_POSTERIOR)


class BudgetExhausted(RuntimeError):
    """The batch would take the ledger past its query budget."""


class RemoteUnavailable(ConnectionError):
    """The remote endpoint could not deliver a valid response."""


@dataclass(frozen=True)
class OracleResponse:
    sample_id: int
    label: int
    posterior: tuple[tuple[int, float], ...] | None = None  # (class, probability), descending

    def __post_init__(self):
        if self.posterior is not None:
            probs = [p for _, p in self.posterior]
            if any(a < b for a, b in zip(probs, probs[1:])):
                raise ValueError("top-k probabilities must be in descending order")
            if sum(probs) > 1 + 1e-6:
                raise ValueError("top-k probabilities sum to more than 1")
            if self.posterior and self.posterior[0][0] != self.label:
                raise ValueError("label must equal the top-1 class")

    def soft_target(self, num_classes: int) -> np.ndarray:
        """Training target: one-hot label, or the top-k mass renormalized over the returned classes."""
        y = np.zeros(num_classes)
        if not self.posterior:
            y[self.label] = 1.0
            return y
        for cls, p in self.posterior:
            y[cls] = p
        total = y.sum()
        if total <= 0:
            y[:] = 0.0
            y[self.label] = 1.0
            return y
        return y / total


@dataclass(frozen=True)
class OracleConfig:
    mode: str = LABEL_ONLY
    k: int = 1
    noise_seed: int = 0
    noise_scale: float = 0.0  # serving-side logit noise, off by default

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"oracle mode must be one of {MODES}, got {self.mode!r}")
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")


@dataclass
class QueryLedger:
    """Query budget, spend and an append-only ``(round, sample_id)`` log."""

    budget_B: int
    unit_price: float = 0.0
    spent: int = 0
    log: list[tuple[int, int]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.budget_B < 0 or self.unit_price < 0:
            raise ValueError("budget and unit price must be non-negative")

    @property
    def remaining(self) -> int:
        return self.budget_B - self.spent

    def check(self, n: int) -> None:
        if self.spent + n > self.budget_B:
            raise BudgetExhausted(
                f"batch of {n} exceeds remaining budget ({self.spent}/{self.budget_B} spent)"
            )

    def charge(self, ids: Sequence[int], round: int = 0) -> None:
        """Atomically bill ``ids``; all-or-nothing."""
        with self._lock:
            self.check(len(ids))
            self.spent += len(ids)
            self.log.extend((round, int(i)) for i in ids)

    def queried_ids(self) -> list[int]:
        return [i for _, i in self.log]


def cost_report(ledger: QueryLedger) -> tuple[int, float]:
    """``(queries, currency)`` with ``currency = spent * unit_price``."""
    return ledger.spent, ledger.spent * ledger.unit_price


def build_responses(posteriors: np.ndarray, ids: Sequence[int], cfg: OracleConfig) -> list[OracleResponse]:
    """Turn victim posteriors into API responses per ``cfg.mode``.

    Ties are broken towards the lower class index, for the label and for the
    order of the top-k list alike.
    """
    out = []
    for sid, p in zip(ids, posteriors):
        order = np.argsort(-p, kind="stable")
        label = int(order[0])
        topk = None
        if cfg.mode == TOPK_POSTERIOR:
            k = min(cfg.k, len(p))
            topk = tuple((int(c), float(p[c])) for c in order[:k])
        out.append(OracleResponse(int(sid), label, topk))
    return out


def _victim_posteriors(model: Classifier, images: np.ndarray, ids: Sequence[int], cfg: OracleConfig) -> np.ndarray:
    logits = model.logits(images).double().numpy()
    if cfg.noise_scale:
        for row, sid in enumerate(ids):
            rng = np.random.default_rng([cfg.noise_seed, int(sid)])
            logits[row] += rng.normal(0.0, cfg.noise_scale, size=logits.shape[1])
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


class Oracle:
    """Metered black box. Only ``query_batch`` is public."""

    __slots__ = ("_serve",)

    def __init__(self, serve: Callable[[list[Sample]], list[OracleResponse]]):
        self._serve = serve

    def query_batch(self, samples: Sequence[Sample], ledger: QueryLedger, round: int = 0) -> list[OracleResponse]:
        samples = list(samples)
        if not samples:
            return []
        ledger.check(len(samples))
        responses = self._serve(samples)
        ledger.charge([s.id for s in samples], round)
        return responses


def make_local_victim(model: Classifier, cfg: OracleConfig) -> Oracle:
    """Wrap a trained classifier so that only its predictions are reachable."""
    if not model.trained:
        raise ValueError("victim model has not been trained")
    if cfg.k > model.num_classes:
        raise ValueError(f"k={cfg.k} exceeds the victim's {model.num_classes} classes")

    def serve(samples: list[Sample]) -> list[OracleResponse]:
        ids = [s.id for s in samples]
        return build_responses(_victim_posteriors(model, stack_images(samples), ids, cfg), ids, cfg)

    return Oracle(serve)


def offline_labels(oracle_model: Classifier, samples: Sequence[Sample]) -> list[tuple[int, int]]:
    """Experimenter-side victim argmax for evaluation sets; never billed."""
    if not samples:
        return []
    preds = oracle_model.predict(stack_images(samples))
    return [(s.id, int(p)) for s, p in zip(samples, preds)]


# ---------------------------------------------------------------- wire format

def encode_request(samples: Sequence[Sample]) -> str:
    batch = []
    for s in samples:
        raw = np.ascontiguousarray(s.image, dtype="<f4").tobytes()
        batch.append({"id": int(s.id), "shape": list(s.image.shape), "image": base64.b64encode(raw).decode("ascii")})
    return json.dumps({"api-version": API_VERSION, "batch": batch}, separators=(",", ":"))


def decode_request(text: str) -> list[Sample]:
    doc = json.loads(text)
    if doc.get("api-version") != API_VERSION:
        raise ValueError(f"unsupported api-version {doc.get('api-version')!r}")
    out = []
    for item in doc["batch"]:
        arr = np.frombuffer(base64.b64decode(item["image"]), dtype="<f4").reshape(item["shape"])
        out.append(Sample(int(item["id"]), arr.astype(np.float32)))
    return out


def encode_response(responses: Sequence[OracleResponse]) -> str:
    batch = []
    for r in responses:
        item: dict = {"id": r.sample_id, "label": r.label}
        if r.posterior is not None:
            item["top-k"] = [[c, p] for c, p in r.posterior]
        batch.append(item)
    return json.dumps({"batch": batch}, separators=(",", ":"))


def decode_response(text: str) -> list[OracleResponse]:
    doc = json.loads(text)
    out = []
    for item in doc["batch"]:
        topk = item.get("top-k")
        out.append(OracleResponse(
            int(item["id"]), int(item["label"]),
            None if topk is None else tuple((int(c), float(p)) for c, p in topk),
        ))
    return out


class OracleServer:
    """Victim side of the wire stub: answers encoded requests without any billing."""

    def __init__(self, model: Classifier, cfg: OracleConfig):
        if not model.trained:
            raise ValueError("victim model has not been trained")
        self._model = model
        self._cfg = cfg
        self._http: ThreadingHTTPServer | None = None

    def handle(self, request_text: str) -> str:
        samples = decode_request(request_text)
        ids = [s.id for s in samples]
        if not samples:
            return encode_response([])
        post = _victim_posteriors(self._model, stack_images(samples), ids, self._cfg)
        return encode_response(build_responses(post, ids, self._cfg))

    def serve_http(self, host: str = "127.0.0.1", port: int = 0) -> str:
        """Start a background HTTP endpoint; returns its URL."""
        handle = self.handle

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802
                body = self.rfile.read(int(self.headers.get("Content-Length", 0))).decode()
                try:
                    payload, status = handle(body).encode(), 200
                except (ValueError, KeyError) as exc:
                    payload, status = json.dumps({"error": str(exc)}).encode(), 400
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self._http = ThreadingHTTPServer((host, port), Handler)
        threading.Thread(target=self._http.serve_forever, daemon=True).start()
        h, p = self._http.server_address[:2]
        return f"http://{h}:{p}/predict"

    def shutdown(self) -> None:
        if self._http is not None:
            self._http.shutdown()
            self._http.server_close()
            self._http = None


def _http_transport(url: str, timeout: float) -> Callable[[str], str]:
    def send(text: str) -> str:
        req = urllib.request.Request(url, data=text.encode(), headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.read().decode()

    return send


def remote_client_stub(
    endpoint: str | Callable[[str], str],
    cfg: OracleConfig,
    retries: int = 2,
    timeout: float = 5.0,
) -> Oracle:
    """Oracle that forwards batches over the JSON wire format.

    ``endpoint`` is an ``http://`` URL or any callable taking and returning the
    encoded text (e.g. ``OracleServer.handle`` for an in-process loopback).
    A batch is retried up to ``retries`` extra times with the same ids; the
    ledger is billed once, and only when a complete response arrives.
    """
    if callable(endpoint):
        send = endpoint
    elif isinstance(endpoint, str) and endpoint.startswith(("http://", "https://")):
        send = _http_transport(endpoint, timeout)
    else:
        raise ValueError(f"unsupported endpoint descriptor {endpoint!r}")

    def serve(samples: list[Sample]) -> list[OracleResponse]:
        request = encode_request(samples)
        last: Exception | None = None
        for _ in range(retries + 1):
            try:
                responses = decode_response(send(request))
            except (OSError, urllib.error.URLError, ValueError, KeyError) as exc:
                last = exc
                continue
            if [r.sample_id for r in responses] != [s.id for s in samples]:
                last = ValueError("response ids do not match the request")
                continue
            if cfg.mode == LABEL_ONLY:
                responses = [OracleResponse(r.sample_id, r.label) for r in responses]
            return responses
        raise RemoteUnavailable(f"no valid response from {endpoint!r}: {last}")

    return Oracle(serve)
