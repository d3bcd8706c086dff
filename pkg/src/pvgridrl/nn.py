"""Minimal float64 MLP toolkit.

Everything the trainer needs from a neural-network library, and nothing else:
orthogonally initialized tanh MLPs, forward passes that record a tape, exact
reverse-mode gradients from that tape, Adam, and a byte-stable checkpoint
container. All math is float64 numpy; there is no implicit global state, so
two processes given the same seeds produce bitwise identical parameters.
"""

from __future__ import annotations

import json
import numpy as np

ADAM_LR = 3e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"PVCK"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for unreadable, truncated, or version-mismatched checkpoint files."""


class Mlp:
    """Fully connected network with tanh hidden layers and an identity output layer.

    Layer l computes y = x @ W_l.T + b_l with W_l of shape (fan_out, fan_in).
    """

    def __init__(self, sizes, weights, biases):
        self.sizes = list(sizes)
        self.weights = weights
        self.biases = biases

    @classmethod
    def from_params(cls, weights, biases):
        """Rebuild a network from its weight list; sizes come from the shapes."""
        sizes = [weights[0].shape[1]] + [w.shape[0] for w in weights]
        return cls(sizes, list(weights), list(biases))

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]


def count_parameters(sizes) -> int:
    """Number of scalars in an MLP with the given layer sizes: sum of in*out + out."""
    return sum(n_in * n_out + n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))


def init_orthogonal(shape, gain, rng) -> np.ndarray:
    """Orthogonal weight draw: rows orthonormal for wide matrices, columns for tall.

    Sign-fixed QR of a standard normal draw, scaled by gain.
    """
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    # qr leaves the column signs arbitrary; pin them to the sign of diag(r)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q)


def init_mlp(sizes, rng, hidden_gain=np.sqrt(2.0), out_gain=1.0) -> Mlp:
    """Build an MLP with orthogonal weights and zero biases.

    out_gain scales the final layer only; policy heads pass 0.01 so initial
    outputs sit near zero.
    """
    if len(sizes) < 2:
        raise ValueError("an MLP needs at least an input and an output size")
    weights, biases = [], []
    for l, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if l == len(sizes) - 2 else hidden_gain
        weights.append(init_orthogonal((n_out, n_in), gain, rng))
        biases.append(np.zeros(n_out))
    return Mlp(sizes, weights, biases)


def forward(net: Mlp, x):
    """Run the network on x (1D sample or 2D batch), returning (y, tape).

    The tape holds each layer's input batch; hidden tanh outputs are simply the
    next layer's input, which is all backward() needs.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.n_in:
        raise ValueError(f"input has width {x.shape[-1]}, network expects {net.n_in}")
    squeeze = x.ndim == 1
    h = np.atleast_2d(x)
    inputs = []
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        h = h @ w.T + b
        if l != last:
            h = np.tanh(h)
    y = h[0] if squeeze else h
    return y, inputs


def backward(net: Mlp, tape, dy):
    """Exact gradients of sum(dy * y) w.r.t. every weight and bias.

    tape is the structure returned by forward(); dy must match the output
    shape used there. Returns [(dW_0, db_0), ...] in layer order.
    """
    g = np.atleast_2d(np.asarray(dy, dtype=np.float64))
    grads = [None] * len(net.weights)
    for l in reversed(range(len(net.weights))):
        if l != len(net.weights) - 1:
            a = tape[l + 1]  # tanh output of this layer
            g = g * (1.0 - a * a)
        x = tape[l]
        grads[l] = (g.T @ x, g.sum(axis=0))
        if l > 0:
            g = g @ net.weights[l]
    return grads


def parameters(net: Mlp):
    """Flat list of parameter arrays in a fixed order: w0, b0, w1, b1, ..."""
    out = []
    for w, b in zip(net.weights, net.biases):
        out.append(w)
        out.append(b)
    return out


def grads_list(grads):
    """Flatten backward() output to match parameters() ordering."""
    out = []
    for dw, db in grads:
        out.append(dw)
        out.append(db)
    return out


class AdamState:
    """First/second moment buffers and step counter for one parameter list."""

    def __init__(self, params, lr=ADAM_LR, beta1=ADAM_BETA1, beta2=ADAM_BETA2,
                 eps=ADAM_EPS):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params, grads, state: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    if len(params) != len(grads):
        raise ValueError("parameter and gradient lists differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)


# ---------------------------------------------------------------------------
# checkpoint container
#
# Layout: magic, 1-byte format version, 8-byte little-endian header length,
# canonical-JSON header, raw little-endian array payload. Identical inputs
# produce identical bytes (no timestamps, no pickle).

def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named float64/int64 arrays plus a JSON-serializable meta dict."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            dtype = "<f8"
        elif arr.dtype.kind in ("i", "u"):
            dtype = "<i8"
        else:
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "meta": meta or {}, "arrays": entries},
        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(bytes([CHECKPOINT_VERSION]))
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for raw in chunks:
            f.write(raw)


def load_arrays(path):
    """Read a container written by save_arrays(); returns (arrays, meta)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = blob[4]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, "
            f"this build reads version {CHECKPOINT_VERSION}")
    header_len = int.from_bytes(blob[5:13], "little")
    header = json.loads(blob[13:13 + header_len].decode())
    payload = blob[13 + header_len:]
    arrays = {}
    for ent in header["arrays"]:
        dt = np.dtype(ent["dtype"])
        n = int(np.prod(ent["shape"], dtype=np.int64)) if ent["shape"] else 1
        start = ent["offset"]
        raw = payload[start:start + n * dt.itemsize]
        if len(raw) != n * dt.itemsize:
            raise CheckpointError(f"{path}: truncated payload for {ent['name']!r}")
        arrays[ent["name"]] = np.frombuffer(raw, dtype=dt).reshape(ent["shape"]).copy()
    return arrays, header["meta"]
