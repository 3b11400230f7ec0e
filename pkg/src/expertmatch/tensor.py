"""Minimal dense 2-D linear algebra with a reverse-mode autodiff tape.

Everything is a (rows, cols) matrix of float64. A ``Tape`` records each
primitive as it runs; ``backward`` replays the records in reverse and
accumulates gradients into the ``Param`` leaves that were watched during
recording. The primitive set is deliberately small: exactly what the
attention encoder, the MLP scorer, and the losses need.
"""

from __future__ import annotations

import json
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse as sp

MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when operands of a primitive have incompatible shapes."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class Tensor:
    """Immutable 2-D float64 value. Do not mutate ``data`` while a tape holds it."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError("tensor", arr.shape)
        self.data = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError("item", self.data.shape)
        return float(self.data[0, 0])

    def require_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"{context}: non-finite entries")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class Param:
    """A named trainable matrix with a gradient accumulator of the same shape."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.grad = Tensor(np.zeros_like(self.value.data))
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.data[:] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={self.value.shape})"


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Records primitives in execution order; ``recording=False`` gives a pure
    forward evaluator for frozen-model inference."""

    def __init__(self, recording: bool = True):
        self.recording = recording
        self._records: list[_Record] = []
        self._watched: dict[int, Param] = {}
        self._produced: set[int] = set()

    # -- bookkeeping -------------------------------------------------------

    def _coerce(self, x) -> Tensor:
        if isinstance(x, Param):
            if self.recording:
                self._watched[id(x.value)] = x
            return x.value
        if isinstance(x, Tensor):
            return x
        return Tensor(x)

    def _emit(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
        if self.recording:
            # outputs are fresh objects, so the record list is topologically
            # ordered by construction; guard against accidental reuse anyway
            assert id(out) not in self._produced, "primitive output recorded twice"
            self._produced.add(id(out))
            self._records.append(_Record(out, inputs, vjp))
        return out

    def const(self, data) -> Tensor:
        t = data if isinstance(data, Tensor) else Tensor(data)
        return t.require_finite("const")

    def watch(self, param: Param) -> Tensor:
        """Register a Param as a gradient target and return its value tensor."""
        return self._coerce(param)

    # -- primitives --------------------------------------------------------

    def matmul(self, a, b) -> Tensor:
        ta, tb = self._coerce(a), self._coerce(b)
        if ta.cols != tb.rows:
            raise ShapeError("matmul", ta.shape, tb.shape)
        out = Tensor(ta.data @ tb.data)
        return self._emit(out, (ta, tb), lambda g: (g @ tb.data.T, ta.data.T @ g))

    def transpose(self, a) -> Tensor:
        ta = self._coerce(a)
        out = Tensor(ta.data.T)
        return self._emit(out, (ta,), lambda g: (g.T,))

    def add(self, a, b) -> Tensor:
        """Elementwise add; also accepts a 1-row bias broadcast over rows of ``a``."""
        ta, tb = self._coerce(a), self._coerce(b)
        if ta.shape == tb.shape:
            out = Tensor(ta.data + tb.data)
            return self._emit(out, (ta, tb), lambda g: (g, g))
        if tb.rows == 1 and tb.cols == ta.cols:
            out = Tensor(ta.data + tb.data)
            return self._emit(out, (ta, tb), lambda g: (g, g.sum(axis=0, keepdims=True)))
        raise ShapeError("add", ta.shape, tb.shape)

    def scale(self, a, c: float) -> Tensor:
        ta = self._coerce(a)
        c = float(c)
        out = Tensor(ta.data * c)
        return self._emit(out, (ta,), lambda g: (g * c,))

    def elementwise_mul(self, a, b) -> Tensor:
        ta, tb = self._coerce(a), self._coerce(b)
        if ta.shape != tb.shape:
            raise ShapeError("elementwise_mul", ta.shape, tb.shape)
        out = Tensor(ta.data * tb.data)
        return self._emit(out, (ta, tb), lambda g: (g * tb.data, g * ta.data))

    def row_softmax(self, a) -> Tensor:
        ta = self._coerce(a)
        shifted = ta.data - ta.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)
        out = Tensor(y)

        def vjp(g):
            dot = (g * y).sum(axis=1, keepdims=True)
            return (y * (g - dot),)

        return self._emit(out, (ta,), vjp)

    def tanh(self, a) -> Tensor:
        ta = self._coerce(a)
        y = np.tanh(ta.data)
        out = Tensor(y)
        return self._emit(out, (ta,), lambda g: (g * (1.0 - y * y),))

    def sigmoid(self, a) -> Tensor:
        ta = self._coerce(a)
        # split by sign for numerical stability at large |x|
        x = ta.data
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, 0, None))),
                     np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))
        out = Tensor(y)
        return self._emit(out, (ta,), lambda g: (g * y * (1.0 - y),))

    def log(self, a) -> Tensor:
        ta = self._coerce(a)
        out = Tensor(np.log(ta.data))
        return self._emit(out, (ta,), lambda g: (g / ta.data,))

    def clip(self, a, lo: float, hi: float) -> Tensor:
        ta = self._coerce(a)
        y = np.clip(ta.data, lo, hi)
        mask = (ta.data > lo) & (ta.data < hi)
        out = Tensor(y)
        return self._emit(out, (ta,), lambda g: (g * mask,))

    def concat_cols(self, parts: Sequence) -> Tensor:
        ts = [self._coerce(p) for p in parts]
        if not ts:
            raise ShapeError("concat_cols", ())
        rows = ts[0].rows
        if any(t.rows != rows for t in ts):
            raise ShapeError("concat_cols", *[t.shape for t in ts])
        widths = [t.cols for t in ts]
        out = Tensor(np.hstack([t.data for t in ts]))
        offsets = np.cumsum([0] + widths)

        def vjp(g):
            return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(ts)))

        return self._emit(out, tuple(ts), vjp)

    def concat_rows(self, parts: Sequence) -> Tensor:
        ts = [self._coerce(p) for p in parts]
        if not ts:
            raise ShapeError("concat_rows", ())
        cols = ts[0].cols
        if any(t.cols != cols for t in ts):
            raise ShapeError("concat_rows", *[t.shape for t in ts])
        heights = [t.rows for t in ts]
        out = Tensor(np.vstack([t.data for t in ts]))
        offsets = np.cumsum([0] + heights)

        def vjp(g):
            return tuple(g[offsets[i]:offsets[i + 1], :] for i in range(len(ts)))

        return self._emit(out, tuple(ts), vjp)

    def mean_rows(self, a) -> Tensor:
        ta = self._coerce(a)
        n = ta.rows
        out = Tensor(ta.data.mean(axis=0, keepdims=True))
        return self._emit(out, (ta,), lambda g: (np.repeat(g / n, n, axis=0),))

    def sum_all(self, a) -> Tensor:
        ta = self._coerce(a)
        out = Tensor([[ta.data.sum()]])
        return self._emit(out, (ta,), lambda g: (np.full(ta.shape, g[0, 0]),))

    def select_rows(self, a, indices) -> Tensor:
        ta = self._coerce(a)
        idx = np.asarray(indices, dtype=np.intp)
        if idx.ndim != 1:
            raise ShapeError("select_rows", idx.shape)
        out = Tensor(ta.data[idx])

        def vjp(g):
            acc = np.zeros(ta.shape)
            np.add.at(acc, idx, g)
            return (acc,)

        return self._emit(out, (ta,), vjp)

    def sparse_matmul(self, x: sp.csr_matrix, p) -> Tensor:
        """Constant CSR features times a dense trainable matrix."""
        tp = self._coerce(p)
        if x.shape[1] != tp.rows:
            raise ShapeError("sparse_matmul", x.shape, tp.shape)
        out = Tensor(np.asarray(x @ tp.data))
        return self._emit(out, (tp,), lambda g: (np.asarray(x.T @ g),))


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every Param watched by the tape.

    May be called repeatedly; each call adds another copy of the gradient.
    """
    if loss.shape != (1, 1):
        raise ShapeError("backward loss", loss.shape)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for rec in reversed(tape._records):
        g_out = grads.get(id(rec.out))
        if g_out is None:
            continue
        for inp, g in zip(rec.inputs, rec.vjp(g_out)):
            if g is None:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = g if prev is None else prev + g
    for tid, param in tape._watched.items():
        g = grads.get(tid)
        if g is not None:
            param.grad.data += g


# -- seeded PRNG and initialization -----------------------------------------


class SplitMix64:
    """Counter-based splitmix generator; identical streams across platforms."""

    _GAMMA = 0x9E3779B97F4A7C15

    def __init__(self, seed: int):
        self._seed = seed & MASK64
        self._counter = 0

    @staticmethod
    def _mix(z: int) -> int:
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
        return z ^ (z >> 31)

    def next_u64(self) -> int:
        self._counter += 1
        return self._mix((self._seed + self._counter * self._GAMMA) & MASK64)

    def uniform(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias."""
        if n <= 0:
            raise ValueError("below() needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, items: Sequence, k: int) -> list:
        """k distinct elements, order randomized, without replacement."""
        n = len(items)
        if k > n:
            raise ValueError(f"sample of {k} from {n} items")
        idx = list(range(n))
        self.shuffle(idx)
        return [items[i] for i in idx[:k]]

    def choice(self, items: Sequence):
        return items[self.below(len(items))]

    def fill_uniform(self, n: int) -> np.ndarray:
        """Vectorized batch of the same stream as repeated ``uniform`` calls."""
        counters = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        z = (np.uint64(self._seed) + counters * np.uint64(self._GAMMA))
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def derive_seed(seed: int, stream: int) -> int:
    """Independent child seed for a named sub-stream of a run seed."""
    return SplitMix64((seed ^ (stream * 0xA5A5A5A5A5A5A5A5)) & MASK64).next_u64()


def xavier_param(rng: SplitMix64, rows: int, cols: int, name: str) -> Param:
    bound = math.sqrt(6.0 / (rows + cols))
    vals = rng.fill_uniform(rows * cols) * (2.0 * bound) - bound
    return Param(vals.reshape(rows, cols), name)


# -- optimizer ----------------------------------------------------------------


class AdamState:
    """First/second moment accumulators, zero-initialized per parameter."""

    def __init__(self):
        self._moments: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def moments(self, p: Param) -> tuple[np.ndarray, np.ndarray]:
        key = id(p)
        if key not in self._moments:
            self._moments[key] = (np.zeros(p.shape), np.zeros(p.shape))
        return self._moments[key]


def adam_step(params: Iterable[Param], moments: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps_adam: float = 1e-8, t: int = 1) -> None:
    """One bias-corrected Adam update; zeroes gradients afterward."""
    if t < 1:
        raise ValueError("adam_step: t must be >= 1")
    for p in params:
        m, v = moments.moments(p)
        g = p.grad.data
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.value.data -= lr * m_hat / (np.sqrt(v_hat) + eps_adam)
        p.zero_grad()


# -- verification --------------------------------------------------------------


def grad_check(loss_fn: Callable[[Tape], Tensor], params: list[Param],
               eps: float = 1e-4) -> float:
    """Max relative error between tape gradients and central finite differences.

    ``loss_fn`` must rebuild the computation from the current parameter values
    on the tape it is given, and be deterministic.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError("grad_check: eps must be in (0, 1e-2]")
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = loss_fn(tape)
    backward(tape, loss)

    def eval_loss() -> float:
        val = loss_fn(Tape(recording=False)).item()
        if not math.isfinite(val):
            raise ValueError("grad_check: non-finite loss at perturbed point")
        return val

    worst = 0.0
    for p in params:
        flat_value = p.value.data.reshape(-1)
        flat_grad = p.grad.data.reshape(-1)
        for i in range(flat_value.size):
            orig = flat_value[i]
            flat_value[i] = orig + eps
            f_plus = eval_loss()
            flat_value[i] = orig - eps
            f_minus = eval_loss()
            flat_value[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = flat_grad[i]
            rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, rel)
    return worst


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, params: Sequence[Param], extra_header: dict | None = None) -> None:
    """Write params as a JSONL checkpoint: one header line, then one line per param."""
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate parameter names in checkpoint: {names}")
    header = {"format": 1, "names": names}
    if extra_header:
        header.update(extra_header)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for p in params:
            rows, cols = p.shape
            rec = {"name": p.name, "rows": rows, "cols": cols,
                   "data": p.value.data.reshape(-1).tolist()}
            fh.write(json.dumps(rec) + "\n")


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != 1:
            raise ValueError(f"unsupported checkpoint format: {header.get('format')}")
        arrays: dict[str, np.ndarray] = {}
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            arr = np.asarray(rec["data"], dtype=np.float64).reshape(rec["rows"], rec["cols"])
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"checkpoint param {rec['name']!r} has non-finite entries")
            if rec["name"] in arrays:
                raise ValueError(f"duplicate checkpoint param {rec['name']!r}")
            arrays[rec["name"]] = arr
    missing = set(header["names"]) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint missing params named in header: {sorted(missing)}")
    return header, arrays


def load_into(path, params: Sequence[Param]) -> dict:
    """Restore parameter values in place; names and shapes must match."""
    header, arrays = load_checkpoint(path)
    for p in params:
        if p.name not in arrays:
            raise ValueError(f"checkpoint lacks param {p.name!r}")
        arr = arrays[p.name]
        if arr.shape != p.shape:
            raise ShapeError(f"load_into {p.name}", arr.shape, p.shape)
        p.value.data[:] = arr
        p.zero_grad()
    return header
