"""Model oracles the attack queries for class probabilities.

Ships a deterministic synthetic classifier (vertical-band intensity
statistics under a softmax) so every attack-level number has a closed-form
check, an HTTP client for real model servers, a query ledger, and an
image-keyed memoization wrapper.
"""

from __future__ import annotations

import base64
import hashlib
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import requests

from .imaging import RasterImage, encode_png

__all__ = [
    "Prediction",
    "ActivationVector",
    "QueryLedger",
    "OracleConfig",
    "Oracle",
    "BuiltinClassifier",
    "HttpOracle",
    "CachingOracle",
    "OracleUnavailableError",
    "ProtocolError",
    "UnsupportedCapabilityError",
    "builtin_fragile_classifier",
    "make_oracle",
    "luma",
]

_PROB_SUM_TOL = 1e-3


class OracleUnavailableError(RuntimeError):
    """Transport-level failure talking to a remote oracle; retryable."""


class ProtocolError(RuntimeError):
    """The remote oracle answered, but not in the documented wire format."""


class UnsupportedCapabilityError(RuntimeError):
    """The oracle does not implement the requested interface (e.g. activations)."""


@dataclass(frozen=True)
class Prediction:
    """Class probabilities for one image, with optional class names."""

    probs: Tuple[float, ...]
    labels: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "probs", probs)
        if any(p < 0 for p in probs):
            raise ValueError("probabilities must be non-negative")
        total = sum(probs)
        if not (1 - _PROB_SUM_TOL <= total <= 1 + _PROB_SUM_TOL):
            raise ValueError(f"probabilities sum to {total}, expected ~1")
        if self.labels is not None:
            labels = tuple(str(s) for s in self.labels)
            if len(labels) != len(probs):
                raise ValueError("labels length must match probs length")
            object.__setattr__(self, "labels", labels)

    @property
    def argmax(self) -> int:
        """Index of the most probable class; ties resolve to the lowest index."""
        return int(np.argmax(self.probs))


@dataclass(frozen=True)
class ActivationVector:
    """A named flat activation vector from one model layer."""

    layer: str
    values: Tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if not all(np.isfinite(values)):
            raise ValueError(f"layer {self.layer!r} has non-finite activations")
        object.__setattr__(self, "values", values)


@dataclass
class QueryLedger:
    """Counters for underlying model evaluations and cache hits."""

    total_queries: int = 0
    cache_hits: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record_query(self) -> None:
        with self._lock:
            self.total_queries += 1

    def record_hit(self) -> None:
        with self._lock:
            self.cache_hits += 1

    def snapshot(self) -> "QueryLedger":
        with self._lock:
            return QueryLedger(total_queries=self.total_queries, cache_hits=self.cache_hits)

    def reset(self) -> "QueryLedger":
        """Zero the counters, returning the previous counts."""
        with self._lock:
            previous = QueryLedger(total_queries=self.total_queries, cache_hits=self.cache_hits)
            self.total_queries = 0
            self.cache_hits = 0
        return previous


@dataclass(frozen=True)
class OracleConfig:
    """How to construct an oracle: the builtin classifier or a remote endpoint."""

    kind: str = "builtin"
    endpoint: Optional[str] = None
    num_classes: int = 4
    temperature: float = 8.0
    cache_enabled: bool = True

    def __post_init__(self):
        if self.kind not in ("builtin", "http"):
            raise ValueError(f"oracle kind must be 'builtin' or 'http', got {self.kind!r}")
        if self.kind == "http":
            if not self.endpoint or not str(self.endpoint).startswith(("http://", "https://")):
                raise ValueError(f"http oracle needs a valid endpoint, got {self.endpoint!r}")


class Oracle:
    """Interface every oracle implements; predict() must be thread-safe."""

    ledger: QueryLedger

    def predict(self, image: RasterImage) -> Prediction:
        raise NotImplementedError

    def activations(self, image: RasterImage) -> List[ActivationVector]:
        raise UnsupportedCapabilityError(f"{type(self).__name__} exposes no activations")

    def num_classes(self) -> int:
        raise NotImplementedError

    def reset_ledger(self) -> QueryLedger:
        return self.ledger.reset()


def luma(pixels: np.ndarray) -> np.ndarray:
    """Integer luma (0.299R + 0.587G + 0.114B, nearest integer) per pixel."""
    rgb = pixels[:, :, :3].astype(np.int64)
    return (299 * rgb[:, :, 0] + 587 * rgb[:, :, 1] + 114 * rgb[:, :, 2] + 500) // 1000


class BuiltinClassifier(Oracle):
    """Deterministic synthetic classifier over K equal-width vertical bands.

    Band k spans columns [floor(w*k/K), floor(w*(k+1)/K)); its logit is
    ``temperature * mean_band_luma / 255`` and probabilities come from a
    softmax over the K logits.  Every number is reproducible by hand, which
    is what makes attack outcomes against it exactly checkable.
    """

    def __init__(self, num_classes: int, temperature: float = 8.0):
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.k = int(num_classes)
        self.temperature = float(temperature)
        self.ledger = QueryLedger()

    def num_classes(self) -> int:
        return self.k

    def band_means(self, image: RasterImage) -> np.ndarray:
        """Mean luma per band, scaled to [0, 1]."""
        if self.k > image.width:
            raise ValueError(
                f"{self.k} bands do not fit an image {image.width} px wide"
            )
        lum = luma(image.pixels)
        edges = [(image.width * k) // self.k for k in range(self.k + 1)]
        means = np.array(
            [lum[:, edges[k] : edges[k + 1]].mean() for k in range(self.k)],
            dtype=np.float64,
        )
        return means / 255.0

    def predict(self, image: RasterImage) -> Prediction:
        logits = self.temperature * self.band_means(image)
        shifted = np.exp(logits - logits.max())
        probs = shifted / shifted.sum()
        self.ledger.record_query()
        return Prediction(probs=tuple(probs.tolist()))

    def activations(self, image: RasterImage) -> List[ActivationVector]:
        """The K band means exposed as a single shallow layer."""
        means = self.band_means(image)
        return [ActivationVector(layer="band_means", values=tuple(means.tolist()))]


def builtin_fragile_classifier(num_classes: int, temperature: float = 8.0) -> BuiltinClassifier:
    """Construct the synthetic band-statistics classifier."""
    return BuiltinClassifier(num_classes=num_classes, temperature=temperature)


class HttpOracle(Oracle):
    """Client for the JSON-over-HTTP prediction protocol.

    POST {endpoint}/predict     {"image_png_b64": ...} -> {"probs": [...], "labels": [...]?}
    POST {endpoint}/activations {"image_png_b64": ...} -> {"layers": [{"name", "values"}...]}
    GET  {endpoint}/info        -> {"num_classes": int, "input_size": [w, h]?}

    Transport failures and 5xx responses are retried with exponential
    backoff; concurrent in-flight requests are bounded.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 0.5,
        max_inflight: int = 4,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.ledger = QueryLedger()
        self._session = requests.Session()
        self._inflight = threading.Semaphore(max_inflight)
        self._info: Optional[dict] = None

    def _request(self, method: str, path: str, payload: Optional[dict] = None) -> dict:
        url = f"{self.endpoint}{path}"
        last_exc: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            if attempt > 0:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._inflight:
                    resp = self._session.request(method, url, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code >= 500:
                last_exc = OracleUnavailableError(f"{url} -> {resp.status_code}")
                continue
            if resp.status_code != 200:
                try:
                    detail = resp.json().get("error", resp.text)
                except ValueError:
                    detail = resp.text
                raise ProtocolError(f"{url} -> {resp.status_code}: {detail}")
            try:
                body = resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{url}: response is not JSON: {exc}") from exc
            if not isinstance(body, dict):
                raise ProtocolError(f"{url}: expected a JSON object, got {type(body).__name__}")
            return body
        raise OracleUnavailableError(f"{url} unreachable after {self.retries + 1} attempts: {last_exc}")

    @staticmethod
    def _image_payload(image: RasterImage) -> dict:
        return {"image_png_b64": base64.b64encode(encode_png(image)).decode("ascii")}

    def info(self) -> dict:
        if self._info is None:
            self._info = self._request("GET", "/info")
        return self._info

    def num_classes(self) -> int:
        info = self.info()
        try:
            return int(info["num_classes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"/info missing usable num_classes: {info}") from exc

    def predict(self, image: RasterImage) -> Prediction:
        body = self._request("POST", "/predict", self._image_payload(image))
        try:
            probs = tuple(float(p) for p in body["probs"])
            labels = tuple(str(s) for s in body["labels"]) if body.get("labels") else None
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"/predict returned malformed body: {body}") from exc
        self.ledger.record_query()
        try:
            return Prediction(probs=probs, labels=labels)
        except ValueError as exc:
            raise ProtocolError(f"/predict violated invariants: {exc}") from exc

    def activations(self, image: RasterImage) -> List[ActivationVector]:
        body = self._request("POST", "/activations", self._image_payload(image))
        try:
            layers = body["layers"]
            return [
                ActivationVector(layer=str(entry["name"]), values=tuple(float(v) for v in entry["values"]))
                for entry in layers
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"/activations returned malformed body: {body}") from exc


class CachingOracle(Oracle):
    """Memoizes predictions by image content hash; transparent to callers.

    The shared ledger counts each distinct image exactly once; repeats land
    in cache_hits.
    """

    def __init__(self, inner: Oracle):
        self.inner = inner
        self._cache: Dict[bytes, Prediction] = {}
        self._lock = threading.Lock()

    @property
    def ledger(self) -> QueryLedger:
        return self.inner.ledger

    @staticmethod
    def _key(image: RasterImage) -> bytes:
        digest = hashlib.sha256()
        digest.update(np.asarray(image.pixels.shape, dtype=np.int64).tobytes())
        digest.update(image.tobytes())
        return digest.digest()

    def predict(self, image: RasterImage) -> Prediction:
        key = self._key(image)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            self.ledger.record_hit()
            return hit
        pred = self.inner.predict(image)
        with self._lock:
            self._cache.setdefault(key, pred)
        return pred

    def activations(self, image: RasterImage) -> List[ActivationVector]:
        return self.inner.activations(image)

    def num_classes(self) -> int:
        return self.inner.num_classes()


def make_oracle(config: OracleConfig) -> Oracle:
    """Build an oracle from its config, honoring the cache flag."""
    if config.kind == "builtin":
        inner: Oracle = BuiltinClassifier(config.num_classes, config.temperature)
    else:
        inner = HttpOracle(config.endpoint)
    return CachingOracle(inner) if config.cache_enabled else inner
