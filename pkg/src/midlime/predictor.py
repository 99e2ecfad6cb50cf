"""Black-box predictor access.

Two implementations of the same contract (batch of spectrograms in, one
(mid-level vector, emotion vector) pair per item out):

* ``BuiltinPredictor``: a seeded synthetic model, affine end to end, whose
  ground truth is computable in closed form. Used by tests and as a default.
* ``ExternalPredictor``: a gateway to a child process speaking a newline-
  delimited JSON protocol on stdin/stdout (see module docstring below).

The wire protocol, one UTF-8 JSON object per line:

* parent sends ``{"type": "handshake", "protocol": 1}``
* child replies ``{"type": "capabilities", "mid_names": [...7], "emotion_names":
  [...8], "linear_head": {"weights": [[...7] x8], "bias": [...8]} | null,
  "input_spec": {"bins": B | "variable", "frames": F | "variable"}}``
* parent sends ``{"type": "predict", "id": n, "shape": [B, F], "scale": "db",
  "batch": [flattened row-major arrays ...]}`` with monotonically increasing ids
* child replies ``{"type": "prediction", "id": n, "mid": [[...7] x items],
  "emotion": [[...8] x items]}`` in any order; the gateway reassembles by id
* parent sends ``{"type": "shutdown"}`` and the child exits 0

The child's stderr is inherited, so its diagnostics land in the host's logs.
"""

from __future__ import annotations

import fcntl
import json
import os
import selectors
import shlex
import subprocess
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng
from .dsp import SCALE_DB, Spectrogram
from .errors import (
    BatchShapeError,
    CapabilitiesError,
    ConfigError,
    PredictionValueError,
    PredictorTimeoutError,
    ProtocolError,
    ProtocolVersionError,
    ScaleMismatchError,
    ShapeMismatchError,
    SpawnError,
    TransportError,
)

PROTOCOL_VERSION = 1
MID_COUNT = 7
EMOTION_COUNT = 8

# The literature names only some dimensions; the rest get neutral placeholders.
BUILTIN_MID_NAMES = (
    "melodiousness",
    "rhythmic_complexity",
    "articulation",
    "mid_4",
    "mid_5",
    "mid_6",
    "mid_7",
)
BUILTIN_EMOTION_NAMES = (
    "valence",
    "tension",
    "sadness",
    "energy",
    "emotion_5",
    "emotion_6",
    "emotion_7",
    "emotion_8",
)


@dataclass(frozen=True)
class LinearHead:
    """Final linear layer mapping 7 mid-level values to 8 emotion values."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        if weights.shape != (EMOTION_COUNT, MID_COUNT):
            raise ShapeMismatchError(
                f"head weights must be {EMOTION_COUNT}x{MID_COUNT}, got {weights.shape}"
            )
        if bias.shape != (EMOTION_COUNT,):
            raise ShapeMismatchError(f"head bias must have {EMOTION_COUNT} entries")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise ValueError("head entries must be finite")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    def apply(self, mid: np.ndarray) -> np.ndarray:
        return self.weights @ np.asarray(mid, dtype=np.float64) + self.bias


@dataclass(frozen=True)
class PredictorCapabilities:
    mid_names: tuple[str, ...]
    emotion_names: tuple[str, ...]
    linear_head: LinearHead | None
    input_spec: dict = field(default_factory=lambda: {"bins": "variable", "frames": "variable"})

    def __post_init__(self):
        mid = tuple(str(n) for n in self.mid_names)
        emo = tuple(str(n) for n in self.emotion_names)
        if len(mid) != MID_COUNT:
            raise CapabilitiesError(
                f"expected {MID_COUNT} mid names, got {len(mid)}", field="mid_names"
            )
        if len(emo) != EMOTION_COUNT:
            raise CapabilitiesError(
                f"expected {EMOTION_COUNT} emotion names, got {len(emo)}",
                field="emotion_names",
            )
        object.__setattr__(self, "mid_names", mid)
        object.__setattr__(self, "emotion_names", emo)


def _check_batch(batch: Sequence[Spectrogram]) -> None:
    shapes = {s.values.shape for s in batch}
    if len(shapes) > 1:
        raise BatchShapeError(f"batch mixes spectrogram shapes: {sorted(shapes)}")


class BuiltinPredictor:
    """Seeded synthetic stand-in for a trained audio-to-emotion model.

    Each mid-level output is an affine functional of the input: the mean over
    a seeded excitatory rectangle minus half the mean over a seeded
    inhibitory rectangle, plus a seeded offset. Rectangles are fractional, so
    any spectrogram shape works and the functional for a given shape is fixed.
    Emotions are exactly W @ mid + b, so downstream linearity contracts can
    be verified in closed form.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        corners = rng.uniform_grid(rng.derive(self.seed, 0),
                                   np.arange(MID_COUNT), np.arange(8))
        self._pos_frac = corners[:, 0:4]
        self._neg_frac = corners[:, 4:8]
        self.offsets = (
            2.0 * rng.uniform_grid(rng.derive(self.seed, 1),
                                   np.arange(MID_COUNT), np.arange(1))[:, 0] - 1.0
        )
        head_w = 2.0 * rng.uniform_grid(rng.derive(self.seed, 2),
                                        np.arange(EMOTION_COUNT), np.arange(MID_COUNT)) - 1.0
        head_b = 2.0 * rng.uniform_grid(rng.derive(self.seed, 3),
                                        np.arange(EMOTION_COUNT), np.arange(1))[:, 0] - 1.0
        self.head = LinearHead(weights=head_w, bias=head_b)

    @staticmethod
    def _rect(frac: np.ndarray, extent: int, lo: int) -> tuple[int, int]:
        start = int(frac[0] * 0.7 * extent)
        length = max(1, int(round((0.15 + 0.15 * frac[1]) * extent)))
        return start, min(extent, start + length)

    def regions(self, shape: tuple[int, int]) -> list[tuple[tuple[int, int, int, int], tuple[int, int, int, int]]]:
        """Pixel rectangles ((r0, r1, c0, c1) positive, same negative) per mid
        dimension, for closed-form oracles."""
        h, w = shape
        out = []
        for j in range(MID_COUNT):
            pr = self._rect(self._pos_frac[j, 0:2], h, 0) + self._rect(self._pos_frac[j, 2:4], w, 0)
            nr = self._rect(self._neg_frac[j, 0:2], h, 0) + self._rect(self._neg_frac[j, 2:4], w, 0)
            out.append(((pr[0], pr[1], pr[2], pr[3]), (nr[0], nr[1], nr[2], nr[3])))
        return out

    def capabilities(self) -> PredictorCapabilities:
        return PredictorCapabilities(
            mid_names=BUILTIN_MID_NAMES,
            emotion_names=BUILTIN_EMOTION_NAMES,
            linear_head=self.head,
            input_spec={"bins": "variable", "frames": "variable"},
        )

    def predict(self, batch: Sequence[Spectrogram]) -> list[tuple[np.ndarray, np.ndarray]]:
        if not batch:
            return []
        _check_batch(batch)
        stack = np.stack([s.values for s in batch])
        mids = np.empty((len(batch), MID_COUNT))
        for j, (pos, neg) in enumerate(self.regions(stack.shape[1:])):
            pos_mean = stack[:, pos[0]:pos[1], pos[2]:pos[3]].mean(axis=(1, 2))
            neg_mean = stack[:, neg[0]:neg[1], neg[2]:neg[3]].mean(axis=(1, 2))
            mids[:, j] = pos_mean - 0.5 * neg_mean + self.offsets[j]
        emotions = mids @ self.head.weights.T + self.head.bias
        return [(mids[i].copy(), emotions[i].copy()) for i in range(len(batch))]

    def close(self) -> None:
        pass


class ConstantPredictor:
    """Degenerate predictor returning the same vectors for every input."""

    def __init__(self, mid_value: float = 0.5):
        self._mid = np.full(MID_COUNT, float(mid_value))
        self.head = LinearHead(weights=np.zeros((EMOTION_COUNT, MID_COUNT)),
                               bias=np.zeros(EMOTION_COUNT))

    def capabilities(self) -> PredictorCapabilities:
        return PredictorCapabilities(
            mid_names=BUILTIN_MID_NAMES,
            emotion_names=BUILTIN_EMOTION_NAMES,
            linear_head=self.head,
        )

    def predict(self, batch: Sequence[Spectrogram]) -> list[tuple[np.ndarray, np.ndarray]]:
        _check_batch(batch)
        emotion = self.head.apply(self._mid)
        return [(self._mid.copy(), emotion.copy()) for _ in batch]

    def close(self) -> None:
        pass


def builtin_predict(batch: Sequence[Spectrogram], seed: int = 0):
    """One-shot convenience over BuiltinPredictor."""
    return BuiltinPredictor(seed).predict(batch)


def _parse_capabilities(msg: dict) -> PredictorCapabilities:
    if "protocol" in msg and msg["protocol"] != PROTOCOL_VERSION:
        raise ProtocolVersionError(
            f"child speaks protocol {msg['protocol']!r}, this gateway speaks "
            f"{PROTOCOL_VERSION}"
        )
    mid_names = msg.get("mid_names")
    emotion_names = msg.get("emotion_names")
    if not isinstance(mid_names, list):
        raise CapabilitiesError("mid_names missing or not a list", field="mid_names")
    if not isinstance(emotion_names, list):
        raise CapabilitiesError("emotion_names missing or not a list", field="emotion_names")
    head_msg = msg.get("linear_head")
    head = None
    if head_msg is not None:
        try:
            head = LinearHead(weights=np.asarray(head_msg["weights"], dtype=np.float64),
                              bias=np.asarray(head_msg["bias"], dtype=np.float64))
        except (KeyError, TypeError, ValueError, ShapeMismatchError) as exc:
            raise CapabilitiesError(f"malformed linear_head: {exc}",
                                    field="linear_head") from exc
    input_spec = msg.get("input_spec") or {"bins": "variable", "frames": "variable"}
    if not isinstance(input_spec, dict):
        raise CapabilitiesError("input_spec must be an object", field="input_spec")
    return PredictorCapabilities(mid_names=mid_names, emotion_names=emotion_names,
                                 linear_head=head, input_spec=input_spec)


class ExternalPredictor:
    """Gateway owning a child predictor process.

    Requests are pipelined with a bounded window of outstanding chunks, and
    stdin/stdout are driven by one non-blocking event loop so a slow or
    bursty child cannot deadlock the pipe pair. Not thread-safe: callers
    sharing a gateway must serialize access themselves.
    """

    def __init__(self, command: str | Sequence[str], *, timeout: float = 30.0,
                 batch_size: int = 256, window: int = 4):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not argv:
            raise ConfigError("empty predictor command")
        if not timeout > 0:
            raise ConfigError(f"timeout must be positive, got {timeout}")
        if batch_size < 1 or window < 1:
            raise ConfigError("batch_size and window must be >= 1")
        self._argv = argv
        self._timeout = float(timeout)
        self.batch_size = int(batch_size)
        self._window = int(window)
        self._proc: subprocess.Popen | None = None
        self._buf = bytearray()
        self._capabilities: PredictorCapabilities | None = None
        self._next_id = 0

    def __enter__(self) -> "ExternalPredictor":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def capabilities(self) -> PredictorCapabilities:
        if self._capabilities is None:
            raise TransportError("handshake not completed")
        return self._capabilities

    def start(self) -> PredictorCapabilities:
        if self._proc is not None:
            return self.capabilities
        try:
            self._proc = subprocess.Popen(
                self._argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=None, bufsize=0,
            )
        except OSError as exc:
            raise SpawnError(f"cannot spawn predictor {self._argv!r}: {exc}") from exc
        flags = fcntl.fcntl(self._proc.stdin.fileno(), fcntl.F_GETFL)
        fcntl.fcntl(self._proc.stdin.fileno(), fcntl.F_SETFL, flags | os.O_NONBLOCK)
        line = self._exchange(
            [self._encode({"type": "handshake", "protocol": PROTOCOL_VERSION})],
            want=1,
        )[0]
        msg = self._decode(line)
        if msg.get("type") != "capabilities":
            raise ProtocolError(
                f"expected a capabilities reply, got type {msg.get('type')!r}",
                line=line,
            )
        self._capabilities = _parse_capabilities(msg)
        return self._capabilities

    def predict(self, batch: Sequence[Spectrogram],
                batch_size: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        if self._proc is None:
            self.start()
        if not batch:
            return []
        _check_batch(batch)
        for s in batch:
            if s.scale != SCALE_DB:
                raise ScaleMismatchError(
                    f"external predictors receive dB spectrograms, got '{s.scale}'"
                )
        size = self.batch_size if batch_size is None else int(batch_size)
        if size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {size}")
        shape = list(batch[0].values.shape)
        chunks: list[tuple[int, int, int]] = []  # (id, start, stop)
        payloads: deque[tuple[int, bytes]] = deque()
        for start in range(0, len(batch), size):
            stop = min(start + size, len(batch))
            cid = self._next_id
            self._next_id += 1
            msg = {
                "type": "predict",
                "id": cid,
                "shape": shape,
                "scale": batch[start].scale,
                "batch": [batch[i].values.ravel().tolist() for i in range(start, stop)],
            }
            chunks.append((cid, start, stop))
            payloads.append((cid, self._encode(msg)))
        bounds = {cid: (start, stop) for cid, start, stop in chunks}
        replies = self._relay(payloads, bounds)
        out: list[tuple[np.ndarray, np.ndarray]] = [None] * len(batch)  # type: ignore
        for cid, start, stop in chunks:
            mids, emotions = replies[cid]
            for k in range(stop - start):
                out[start + k] = (mids[k], emotions[k])
        return out

    def close(self) -> int | None:
        """Request shutdown and reap the child; returns its exit code."""
        if self._proc is None:
            return None
        proc = self._proc
        self._proc = None
        try:
            if proc.poll() is None:
                try:
                    self._exchange([self._encode({"type": "shutdown"})], want=0,
                                   proc=proc)
                except (TransportError, PredictorTimeoutError, OSError):
                    pass
            proc.stdin.close()
            try:
                proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.wait()
            proc.stdout.close()
        return proc.returncode

    # -- wire helpers ------------------------------------------------------

    @staticmethod
    def _encode(msg: dict) -> bytes:
        return json.dumps(msg, separators=(",", ":")).encode("utf-8") + b"\n"

    @staticmethod
    def _decode(line: bytes) -> dict:
        try:
            msg = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"child emitted a non-JSON line: {exc}",
                                line=line.decode("utf-8", "replace")) from exc
        if not isinstance(msg, dict):
            raise ProtocolError("child emitted a non-object JSON line",
                                line=line.decode("utf-8", "replace"))
        return msg

    def _exchange(self, payloads: list[bytes], want: int,
                  proc: subprocess.Popen | None = None) -> list[bytes]:
        """Write small messages and read `want` reply lines."""
        proc = proc or self._proc
        outbox = bytearray(b"".join(payloads))
        lines: list[bytes] = []
        sel = selectors.DefaultSelector()
        sel.register(proc.stdout, selectors.EVENT_READ)
        if outbox:
            sel.register(proc.stdin, selectors.EVENT_WRITE)
        try:
            deadline = time.monotonic() + self._timeout
            while outbox or len(lines) < want:
                line = self._take_line()
                if line is not None:
                    lines.append(line)
                    continue
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise PredictorTimeoutError(
                        f"no reply from predictor within {self._timeout}s"
                    )
                events = sel.select(remaining)
                progressed = False
                for key, _ in events:
                    if key.fileobj is proc.stdout:
                        progressed |= self._fill_buffer(proc)
                    else:
                        try:
                            n = os.write(proc.stdin.fileno(), outbox[:65536])
                        except BlockingIOError:
                            n = 0
                        del outbox[:n]
                        progressed = n > 0
                        if not outbox:
                            sel.unregister(proc.stdin)
                if progressed:
                    deadline = time.monotonic() + self._timeout
        finally:
            sel.close()
        return lines

    def _relay(self, payloads: deque[tuple[int, bytes]],
               bounds: dict[int, tuple[int, int]]) -> dict:
        """Pipelined predict exchange with a bounded outstanding window."""
        proc = self._proc
        replies: dict[int, tuple[list, list]] = {}
        pending: set[int] = set()
        outbox = bytearray()
        sel = selectors.DefaultSelector()
        sel.register(proc.stdout, selectors.EVENT_READ)
        stdin_armed = False
        try:
            deadline = time.monotonic() + self._timeout
            while len(replies) < len(bounds):
                while payloads and len(pending) < self._window:
                    cid, data = payloads.popleft()
                    pending.add(cid)
                    outbox += data
                if outbox and not stdin_armed:
                    sel.register(proc.stdin, selectors.EVENT_WRITE)
                    stdin_armed = True
                elif not outbox and stdin_armed:
                    sel.unregister(proc.stdin)
                    stdin_armed = False
                line = self._take_line()
                if line is not None:
                    self._handle_prediction(line, pending, bounds, replies)
                    deadline = time.monotonic() + self._timeout
                    continue
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise PredictorTimeoutError(
                        f"predictor silent for {self._timeout}s with chunks "
                        f"{sorted(pending)} outstanding"
                    )
                progressed = False
                for key, _ in sel.select(remaining):
                    if key.fileobj is proc.stdout:
                        progressed |= self._fill_buffer(proc)
                    else:
                        try:
                            n = os.write(proc.stdin.fileno(), outbox[:65536])
                        except BlockingIOError:
                            n = 0
                        except BrokenPipeError as exc:
                            raise TransportError(
                                f"predictor closed stdin pipe (exit code "
                                f"{proc.poll()})"
                            ) from exc
                        del outbox[:n]
                        progressed |= n > 0
                if progressed:
                    deadline = time.monotonic() + self._timeout
        finally:
            sel.close()
        return replies

    def _take_line(self) -> bytes | None:
        i = self._buf.find(b"\n")
        if i < 0:
            return None
        line = bytes(self._buf[:i])
        del self._buf[:i + 1]
        return line

    def _fill_buffer(self, proc: subprocess.Popen) -> bool:
        chunk = os.read(proc.stdout.fileno(), 1 << 16)
        if not chunk:
            raise TransportError(
                f"predictor closed stdout (exit code {proc.poll()})"
            )
        self._buf += chunk
        return True

    def _handle_prediction(self, line: bytes, pending: set,
                           bounds: dict, replies: dict) -> None:
        msg = self._decode(line)
        if msg.get("type") != "prediction":
            raise ProtocolError(
                f"expected a prediction reply, got type {msg.get('type')!r}",
                line=line.decode("utf-8", "replace"),
            )
        cid = msg.get("id")
        if cid not in pending:
            raise TransportError(
                f"prediction for unknown or already-answered id {cid!r}"
            )
        start, stop = bounds[cid]
        count = stop - start
        mid_rows = msg.get("mid")
        emo_rows = msg.get("emotion")
        if (not isinstance(mid_rows, list) or not isinstance(emo_rows, list)
                or len(mid_rows) != count or len(emo_rows) != count):
            raise TransportError(
                f"chunk {cid} expected {count} items, got "
                f"{len(mid_rows) if isinstance(mid_rows, list) else '?'} mid / "
                f"{len(emo_rows) if isinstance(emo_rows, list) else '?'} emotion"
            )
        mids, emotions = [], []
        for k in range(count):
            try:
                mid = np.asarray(mid_rows[k], dtype=np.float64)
                emo = np.asarray(emo_rows[k], dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise ProtocolError(
                    f"non-numeric prediction entry in chunk {cid} item {k}",
                    line=line.decode("utf-8", "replace"),
                ) from exc
            if mid.shape != (MID_COUNT,) or emo.shape != (EMOTION_COUNT,):
                raise ProtocolError(
                    f"prediction arity {mid.shape}/{emo.shape} in chunk {cid}, "
                    f"expected ({MID_COUNT},)/({EMOTION_COUNT},)",
                    line=line.decode("utf-8", "replace"),
                )
            if not (np.all(np.isfinite(mid)) and np.all(np.isfinite(emo))):
                raise PredictionValueError(
                    f"non-finite prediction for batch item {start + k}",
                    index=start + k,
                )
            mids.append(mid)
            emotions.append(emo)
        pending.discard(cid)
        replies[cid] = (mids, emotions)


def external_handshake(command: str | Sequence[str],
                       timeout: float = 30.0) -> PredictorCapabilities:
    """Spawn, handshake, shut down; returns the child's declared capabilities."""
    gateway = ExternalPredictor(command, timeout=timeout)
    try:
        return gateway.start()
    finally:
        gateway.close()
