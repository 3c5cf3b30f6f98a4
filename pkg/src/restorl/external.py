"""Client for out-of-process quality scorers, plus a reference loopback server.

Wire format, one image per request::

    {"shape": [C, H, W], "dtype": "<f4", "data": "<base64 of the little-endian payload>"}

The response is a single decimal score. In subprocess mode each request is one
line on the child's stdin and each response one line on its stdout. In HTTP mode
the request is the body of a POST and the response body is the score.

Run ``python -m restorl.external --constant 3.0`` (add ``--http PORT`` for HTTP)
to get a loopback scorer.
"""

from __future__ import annotations

import argparse
import base64
import json
import math
import os
import queue
import shlex
import subprocess
import sys
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from restorl.rewards import SCORE_MAX, SCORE_MIN, RewardServiceError

ENDPOINT_ENV = "RESTORL_SCORER_ENDPOINT"


class ScoreValidationError(RewardServiceError):
    pass


def encode_image(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(image, dtype="<f4")
    return json.dumps({"shape": list(arr.shape), "dtype": "<f4",
                       "data": base64.b64encode(arr.tobytes()).decode("ascii")})


def decode_image(message: str) -> np.ndarray:
    req = json.loads(message)
    raw = base64.b64decode(req["data"])
    return np.frombuffer(raw, dtype=req.get("dtype", "<f4")).reshape(req["shape"])


def parse_score(text: str, lo: float = SCORE_MIN, hi: float = SCORE_MAX) -> float:
    try:
        value = float(text.strip())
    except ValueError:
        raise RewardServiceError(f"malformed scorer response {text[:80]!r}") from None
    if not math.isfinite(value) or not lo <= value <= hi:
        raise ScoreValidationError(f"scorer returned {value}, outside [{lo}, {hi}]")
    return value


@dataclass
class EndpointConfig:
    mode: str = "subprocess"          # "subprocess" or "http"
    command: str = ""
    url: str = ""
    timeout: float = 10.0
    max_in_flight: int = 4

    @classmethod
    def from_string(cls, spec: str, **kwargs) -> "EndpointConfig":
        if spec.startswith(("http://", "https://")):
            return cls(mode="http", url=spec, **kwargs)
        if spec.startswith("subprocess:"):
            return cls(mode="subprocess", command=spec[len("subprocess:"):], **kwargs)
        raise ValueError(f"endpoint must be 'http(s)://...' or 'subprocess:<command>', got {spec!r}")

    @classmethod
    def from_env(cls, **kwargs) -> "EndpointConfig":
        spec = os.environ.get(ENDPOINT_ENV)
        if not spec:
            raise RewardServiceError(f"{ENDPOINT_ENV} is not set")
        return cls.from_string(spec, **kwargs)


class ExternalScorer:
    """Blocking client; errors and timeouts always raise :class:`RewardServiceError`."""

    def __init__(self, config: EndpointConfig):
        if config.mode not in ("subprocess", "http"):
            raise ValueError(f"unknown endpoint mode {config.mode!r}")
        self.config = config
        self._proc = None
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._lock = threading.Lock()

    def _start(self):
        try:
            self._proc = subprocess.Popen(shlex.split(self.config.command), stdin=subprocess.PIPE,
                                          stdout=subprocess.PIPE, text=True, bufsize=1)
        except OSError as exc:
            raise RewardServiceError(f"cannot start scorer {self.config.command!r}: {exc}") from exc

        def pump(stream, q):
            for line in stream:
                q.put(line)
            q.put(None)

        threading.Thread(target=pump, args=(self._proc.stdout, self._lines), daemon=True).start()

    def _score_subprocess(self, image: np.ndarray) -> float:
        with self._lock:
            if self._proc is None:
                self._start()
            try:
                self._proc.stdin.write(encode_image(image) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise RewardServiceError(f"scorer process died: {exc}") from exc
            try:
                line = self._lines.get(timeout=self.config.timeout)
            except queue.Empty:
                self.close()
                raise RewardServiceError(f"scorer timed out after {self.config.timeout}s") from None
            if line is None:
                raise RewardServiceError("scorer process closed its output")
            return parse_score(line)

    def _score_http(self, image: np.ndarray) -> float:
        req = urllib.request.Request(self.config.url, data=encode_image(image).encode(),
                                     headers={"Content-Type": "application/json"}, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                body = resp.read().decode()
        except (urllib.error.URLError, OSError) as exc:
            raise RewardServiceError(f"scorer endpoint {self.config.url} unreachable: {exc}") from exc
        return parse_score(body)

    def score(self, image: np.ndarray) -> float:
        if not np.all(np.isfinite(image)):
            raise ValueError("non-finite image")
        if self.config.mode == "http":
            return self._score_http(image)
        return self._score_subprocess(image)

    def score_many(self, images: np.ndarray) -> np.ndarray:
        if self.config.mode == "http" and self.config.max_in_flight > 1:
            with ThreadPoolExecutor(self.config.max_in_flight) as pool:
                return np.array(list(pool.map(self.score, images)))
        return np.array([self.score(im) for im in images])

    def close(self):
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            self._proc = None
            self._lines = queue.Queue()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def external_score(config: EndpointConfig, image: np.ndarray) -> float:
    with ExternalScorer(config) as client:
        return client.score(image)


class ExternalReward:
    name = "external"

    def __init__(self, config: EndpointConfig):
        self.client = ExternalScorer(config)

    def __call__(self, images: np.ndarray, gts: np.ndarray) -> np.ndarray:
        return self.client.score_many(images)


def _loopback_score(args, image: np.ndarray) -> str:
    if args.brightness:
        return repr(1.0 + 4.0 * float(np.clip(image.mean(), 0, 1)))
    return repr(args.constant)


def main(argv=None):
    ap = argparse.ArgumentParser(description="loopback quality scorer")
    ap.add_argument("--constant", type=float, default=3.0)
    ap.add_argument("--brightness", action="store_true", help="score = 1 + 4 * mean intensity")
    ap.add_argument("--http", type=int, default=None, metavar="PORT")
    args = ap.parse_args(argv)
    if args.http is None:
        for line in sys.stdin:
            print(_loopback_score(args, decode_image(line)), flush=True)
        return
    from http.server import BaseHTTPRequestHandler, HTTPServer

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = self.rfile.read(int(self.headers["Content-Length"])).decode()
            out = _loopback_score(args, decode_image(body)).encode()
            self.send_response(200)
            self.send_header("Content-Length", str(len(out)))
            self.end_headers()
            self.wfile.write(out)

        def log_message(self, *a):
            pass

    HTTPServer(("127.0.0.1", args.http), Handler).serve_forever()


if __name__ == "__main__":
    main()
