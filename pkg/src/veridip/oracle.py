"""Black-box prediction access to a suspect model.

Every oracle counts the sample rows it answers and can enforce a query
budget; the ownership test only ever talks to models through this surface.
"""

from __future__ import annotations

import json
import logging
import time
import urllib.error
import urllib.parse
import urllib.request
from typing import Callable, Optional

import numpy as np

from . import nn
from .errors import BudgetExceededError, OracleUnreachableError, ProtocolError, ShapeError

log = logging.getLogger(__name__)


class PredictionOracle:
    """Base class; subclasses implement ``_predict(features) -> probs``."""

    kind = "abstract"

    def __init__(self, query_budget: Optional[int] = None):
        self.query_count = 0
        self.query_budget = query_budget

    def _predict(self, features: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_proba(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"expected a 2-D feature batch, got shape {x.shape}")
        if self.query_budget is not None and self.query_count + len(x) > self.query_budget:
            raise BudgetExceededError(
                f"query budget {self.query_budget} exhausted ({self.query_count} used, {len(x)} requested)"
            )
        probs = self._predict(x)
        self.query_count += len(x)
        return probs

    def losses(self, features, labels) -> np.ndarray:
        return nn.ce_loss(self.predict_proba(features), labels)


class LocalOracle(PredictionOracle):
    kind = "local"

    def __init__(self, model: nn.MlpModel, query_budget: Optional[int] = None):
        super().__init__(query_budget)
        self.model = model

    @classmethod
    def from_file(cls, path, query_budget: Optional[int] = None) -> "LocalOracle":
        return cls(nn.load_model(path), query_budget)

    def _predict(self, features):
        return nn.forward_proba(self.model, features)


class FunctionOracle(PredictionOracle):
    """Wraps any ``features -> probabilities`` callable (test doubles, ensembles)."""

    kind = "function"

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], query_budget: Optional[int] = None):
        super().__init__(query_budget)
        self.fn = fn

    def _predict(self, features):
        return np.asarray(self.fn(features), dtype=np.float64)


class RemoteOracle(PredictionOracle):
    """Client for the ``POST /predict`` endpoint served by :mod:`veridip.server`."""

    kind = "remote"

    def __init__(
        self,
        url: str,
        timeout_ms: int = 10_000,
        max_retries: int = 3,
        batch_size: int = 64,
        query_budget: Optional[int] = None,
        backoff_s: float = 0.1,
    ):
        super().__init__(query_budget)
        parsed = urllib.parse.urlparse(url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ValueError(f"not an http(s) URL: {url!r}")
        self.url = url.rstrip("/")
        self.timeout_ms = timeout_ms
        self.max_retries = max_retries
        self.batch_size = batch_size
        self.backoff_s = backoff_s

    def _post(self, rows: np.ndarray) -> np.ndarray:
        body = json.dumps({"features": rows.tolist()}).encode()
        req = urllib.request.Request(
            self.url + "/predict", data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        last = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
            try:
                with urllib.request.urlopen(req, timeout=self.timeout_ms / 1000) as resp:
                    payload = resp.read()
                break
            except urllib.error.HTTPError as exc:
                if exc.code < 500:
                    raise ProtocolError(f"server rejected request: HTTP {exc.code} {exc.read()[:200]!r}") from None
                last = exc
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
                last = exc
            log.debug("predict attempt %d failed: %s", attempt + 1, last)
        else:
            raise OracleUnreachableError(f"{self.url} unreachable after {self.max_retries + 1} attempts: {last}")
        try:
            probs = np.asarray(json.loads(payload)["probs"], dtype=np.float64)
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed response: {exc}") from None
        if probs.ndim != 2 or len(probs) != len(rows):
            raise ProtocolError(f"expected {len(rows)} probability rows, got shape {probs.shape}")
        if not np.all(np.isfinite(probs)) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
            raise ProtocolError("probability rows do not sum to 1")
        return probs

    def _predict(self, features):
        out = [self._post(features[i : i + self.batch_size]) for i in range(0, len(features), self.batch_size)]
        return np.vstack(out) if out else np.empty((0, 0))


def open_oracle(target: str, query_budget: Optional[int] = None, **remote_kw) -> PredictionOracle:
    """Model file path or http(s) URL."""
    if target.startswith(("http://", "https://")):
        return RemoteOracle(target, query_budget=query_budget, **remote_kw)
    return LocalOracle.from_file(target, query_budget)
