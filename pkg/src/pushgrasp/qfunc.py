"""Bifunctional fully-convolutional Q network, from scratch.

A shared three-block strided encoder feeds two structurally identical
heads (grasp and push).  Each head upsamples back to input resolution,
concatenating the matching encoder feature (and finally the raw input)
before every 3x3 convolution, and ends in a linear 1x1 projection.
Forward, backward, Huber loss and Adam are all implemented here on top
of the conv kernels in :mod:`pushgrasp.kernels`.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels, percept
from .config import ArchConfig, OptimConfig

HEADS = ("grasp", "push")


class ArchError(ValueError):
    pass


class CheckpointError(IOError):
    pass


@dataclass
class Conv:
    w: np.ndarray  # (Cout, Cin, k, k)
    b: np.ndarray  # (Cout,)


@dataclass
class NetworkParams:
    arch: ArchConfig
    encoder: list[Conv]
    grasp: list[Conv]
    push: list[Conv]

    @property
    def dtype(self):
        return self.encoder[0].w.dtype

    def head(self, name: str) -> list[Conv]:
        if name == "grasp":
            return self.grasp
        if name == "push":
            return self.push
        raise ValueError(f"unknown head {name!r}")

    def flatten(self) -> list[np.ndarray]:
        out = []
        for conv in self.encoder + self.grasp + self.push:
            out.append(conv.w)
            out.append(conv.b)
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            arch=self.arch,
            encoder=[Conv(c.w.copy(), c.b.copy()) for c in self.encoder],
            grasp=[Conv(c.w.copy(), c.b.copy()) for c in self.grasp],
            push=[Conv(c.w.copy(), c.b.copy()) for c in self.push],
        )


@dataclass
class Grads:
    """Parameter gradients aligned with NetworkParams.flatten() order."""

    arrays: list[np.ndarray]
    active: list[bool]

    def __iadd__(self, other: "Grads") -> "Grads":
        for mine, theirs, on in zip(self.arrays, other.arrays, other.active):
            if on:
                mine += theirs
        self.active = [a or b for a, b in zip(self.active, other.active)]
        return self


def _layer_plan(arch: ArchConfig):
    """(cin, cout, kernel, stride) per conv, encoder then one head."""
    e1, e2, e3 = arch.encoder_channels
    d1, d2, d3 = arch.decoder_channels
    cin = arch.in_channels
    k = arch.kernel
    encoder = [(cin, e1, k, 2), (e1, e2, k, 2), (e2, e3, k, 2)]
    head = [(e3 + e2, d1, k, 1), (d1 + e1, d2, k, 1), (d2 + cin, d3, k, 1), (d3, 1, 1, 1)]
    return encoder, head


def count_params(arch: ArchConfig) -> int:
    encoder, head = _layer_plan(arch)
    total = 0
    for cin, cout, k, _ in encoder + head + head:
        total += cout * cin * k * k + cout
    return total


def init_params(seed: int, arch: ArchConfig, dtype=np.float32) -> NetworkParams:
    """Fan-in-scaled Gaussian init (He, corrected for the leaky slope)."""
    if len(arch.encoder_channels) != 3 or len(arch.decoder_channels) != 3:
        raise ArchError("need exactly 3 encoder and 3 decoder channel counts")
    if min(arch.encoder_channels + arch.decoder_channels) < 1:
        raise ArchError("channel counts must be positive")
    if arch.kernel % 2 != 1:
        raise ArchError("kernel size must be odd")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 3)))
    gain = 2.0 / (1.0 + arch.leaky_slope ** 2)

    def make(plan):
        convs = []
        for cin, cout, k, _ in plan:
            std = np.sqrt(gain / (cin * k * k))
            w = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
            b = np.zeros(cout, dtype=dtype)
            convs.append(Conv(w, b))
        return convs

    enc_plan, head_plan = _layer_plan(arch)
    return NetworkParams(
        arch=arch,
        encoder=make(enc_plan),
        grasp=make(head_plan),
        push=make(head_plan),
    )


# ---------------------------------------------------------------------------
# elementwise pieces


def _lrelu(x: np.ndarray, slope: float) -> np.ndarray:
    # x is always a fresh conv output, safe to overwrite
    return np.maximum(x, x * x.dtype.type(slope), out=x)


def _lrelu_grad(post: np.ndarray, dpost: np.ndarray, slope: float) -> np.ndarray:
    dt = dpost.dtype.type
    return dpost * ((post > 0) * dt(1.0 - slope) + dt(slope))


def _up2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def _up2_grad(dout: np.ndarray) -> np.ndarray:
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    x: np.ndarray
    enc_acts: list[np.ndarray]                  # post-activation e1, e2, e3
    head_cats: dict[str, list[np.ndarray]]      # concatenated conv inputs per head
    head_acts: dict[str, list[np.ndarray]]      # post-activation d1, d2, d3


def _head_forward(head: list[Conv], x, e1, e2, e3, slope):
    cats, acts = [], []
    feat = e3
    for conv, skip in zip(head[:3], (e2, e1, x)):
        cat = np.concatenate([_up2(feat), skip], axis=1)
        cats.append(cat)
        feat = _lrelu(kernels.conv2d_forward(cat, conv.w, conv.b, 1, conv.w.shape[2] // 2), slope)
        acts.append(feat)
    q = kernels.conv2d_forward(feat, head[3].w, head[3].b, 1, 0)
    return q[:, 0], cats, acts


def forward(params: NetworkParams, x: np.ndarray):
    """Run a batch of canonical-frame inputs (N, C, H, W).

    Returns (grasp_q, push_q, trace) with q maps shaped (N, H, W).
    """
    arch = params.arch
    if x.ndim != 4 or x.shape[1] != arch.in_channels:
        raise ValueError(f"expected (N, {arch.in_channels}, H, W) input, got {x.shape}")
    if x.shape[2] % 8 or x.shape[3] % 8 or x.shape[2] != x.shape[3]:
        raise ValueError("spatial size must be square and divisible by 8")
    x = np.ascontiguousarray(x, dtype=params.dtype)
    slope = arch.leaky_slope

    acts = []
    feat = x
    for conv in params.encoder:
        feat = _lrelu(kernels.conv2d_forward(feat, conv.w, conv.b, 2, conv.w.shape[2] // 2), slope)
        acts.append(feat)
    e1, e2, e3 = acts

    trace = ForwardTrace(x=x, enc_acts=acts, head_cats={}, head_acts={})
    qs = {}
    for name in HEADS:
        q, cats, hacts = _head_forward(params.head(name), x, e1, e2, e3, slope)
        trace.head_cats[name] = cats
        trace.head_acts[name] = hacts
        qs[name] = q
    return qs["grasp"], qs["push"], trace


@dataclass
class QMaps:
    """Dense Q values per rotation in the unrotated frame."""

    grasp: np.ndarray   # (16, H, W)
    push: np.ndarray    # (16, H, W)


def forward_all_rotations(params: NetworkParams, x: np.ndarray,
                          sequential: bool = False) -> QMaps:
    """Run the net over all 16 gripper-aligned frames of one input.

    ``sequential`` runs one rotation per kernel call instead of a single
    batched call; both paths are bit-identical because the kernels treat
    batch samples independently.
    """
    if x.ndim != 3:
        raise ValueError("expected a single (C, H, W) input")
    n_rot = percept.N_ROTATIONS
    rotated = np.stack([percept.rotate_map(x, k) for k in range(n_rot)])
    if sequential:
        gs, ps = [], []
        for k in range(n_rot):
            g, p, _ = forward(params, rotated[k:k + 1])
            gs.append(g[0])
            ps.append(p[0])
        g_rot = np.stack(gs)
        p_rot = np.stack(ps)
    else:
        g_rot, p_rot, _ = forward(params, rotated)
    grasp = np.stack([percept.inverse_rotate_map(g_rot[k], k) for k in range(n_rot)])
    push = np.stack([percept.inverse_rotate_map(p_rot[k], k) for k in range(n_rot)])
    return QMaps(grasp=grasp, push=push)


def _zero_grads(params: NetworkParams) -> Grads:
    return Grads([np.zeros_like(a) for a in params.flatten()],
                 [False] * (2 * len(params.encoder + params.grasp + params.push)))


def _head_backward(head, trace, name, dq, slope):
    """Backprop one head; returns (conv grads, de1, de2, de3)."""
    cats = trace.head_cats[name]
    acts = trace.head_acts[name]
    skip_channels = {
        2: trace.x.shape[1],
        1: trace.enc_acts[0].shape[1],
        0: trace.enc_acts[1].shape[1],
    }
    grads = []

    _dfeat, dw, db = kernels.conv2d_backward(acts[2], head[3].w, dq[:, None], 1, 0)
    grads.append((dw, db))
    d_post = _dfeat

    skips = []
    for idx in (2, 1, 0):
        conv = head[idx]
        dpre = _lrelu_grad(acts[idx], d_post, slope)
        dcat, dw, db = kernels.conv2d_backward(cats[idx], conv.w, dpre, 1, conv.w.shape[2] // 2)
        grads.append((dw, db))
        c_up = dcat.shape[1] - skip_channels[idx]
        skips.append(np.ascontiguousarray(dcat[:, c_up:]))
        d_post = _up2_grad(dcat[:, :c_up])

    grads.reverse()                  # order: conv0, conv1, conv2, final
    _dx, de1, de2 = skips            # skip grads for x (dropped), e1, e2
    de3 = d_post
    return grads, de1, de2, de3


def backward_maps(params: NetworkParams, trace: ForwardTrace,
                  dq_grasp: np.ndarray | None, dq_push: np.ndarray | None) -> Grads:
    """Backprop from full per-head dQ maps (N, H, W); None skips a head."""
    slope = params.arch.leaky_slope
    out = _zero_grads(params)
    n_enc = len(params.encoder)

    de = [None, None, None]  # accumulated grads for e1, e2, e3
    dq_by_head = {"grasp": dq_grasp, "push": dq_push}
    for hi, name in enumerate(HEADS):
        dq = dq_by_head[name]
        if dq is None:
            continue
        dq = np.ascontiguousarray(dq, dtype=params.dtype)
        hgrads, de1_h, de2_h, de3_h = _head_backward(
            params.head(name), trace, name, dq, slope)
        base = 2 * (n_enc + hi * 4)
        for li, (dw, db) in enumerate(hgrads):
            out.arrays[base + 2 * li][:] = dw
            out.arrays[base + 2 * li + 1][:] = db
            out.active[base + 2 * li] = True
            out.active[base + 2 * li + 1] = True
        for i, d in enumerate((de1_h, de2_h, de3_h)):
            de[i] = d if de[i] is None else de[i] + d

    if all(d is None for d in de):
        return out

    # encoder backward, deepest first
    inputs = [trace.x, trace.enc_acts[0], trace.enc_acts[1]]
    d_next = None
    for idx in (2, 1, 0):
        conv = params.encoder[idx]
        d_post = de[idx] if de[idx] is not None else 0.0
        if d_next is not None:
            d_post = d_post + d_next
        dpre = _lrelu_grad(trace.enc_acts[idx], d_post, slope)
        dx, dw, db = kernels.conv2d_backward(inputs[idx], conv.w, dpre, 2, conv.w.shape[2] // 2)
        out.arrays[2 * idx][:] = dw
        out.arrays[2 * idx + 1][:] = db
        out.active[2 * idx] = True
        out.active[2 * idx + 1] = True
        d_next = dx if idx > 0 else None
    return out


def backward(params: NetworkParams, trace: ForwardTrace, action, d_loss_d_q: float) -> Grads:
    """Gradient of a loss applied at one executed pixel of one head.

    ``action`` is (primitive, u, v) with u the row and v the column in the
    trace's (already rotated) frame.
    """
    primitive, u, v = action
    n, h, w = trace.x.shape[0], trace.x.shape[2], trace.x.shape[3]
    if n != 1:
        raise ValueError("single-action backward expects a batch of one")
    if not (0 <= u < h and 0 <= v < w):
        raise ValueError(f"pixel ({u}, {v}) out of bounds for {h}x{w}")
    dq = np.zeros((1, h, w), dtype=params.dtype)
    dq[0, u, v] = d_loss_d_q
    if primitive == "grasp":
        return backward_maps(params, trace, dq, None)
    if primitive == "push":
        return backward_maps(params, trace, None, dq)
    raise ValueError(f"unknown primitive {primitive!r}")


# ---------------------------------------------------------------------------
# loss and optimizer


def huber(delta: float, kappa: float):
    """Huber loss and d(loss)/d(delta); quadratic inside |delta| <= kappa."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    a = abs(delta)
    if a <= kappa:
        return 0.5 * delta * delta, delta
    return kappa * (a - 0.5 * kappa), kappa if delta > 0 else -kappa


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: list[int]

    @classmethod
    def zeros(cls, params: NetworkParams) -> "AdamState":
        flat = params.flatten()
        return cls(
            m=[np.zeros_like(a) for a in flat],
            v=[np.zeros_like(a) for a in flat],
            t=[0] * len(flat),
        )

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], list(self.t))


def adam_step(params: NetworkParams, grads: Grads, state: AdamState,
              cfg: OptimConfig) -> tuple[NetworkParams, AdamState]:
    """One Adam update on the arrays marked active in ``grads``.

    Inactive arrays (the untouched head) keep parameters, moments and step
    counters unchanged, so the two heads stay isolated.
    """
    new_params = params.copy()
    new_state = state.copy()
    flat = new_params.flatten()
    if len(grads.arrays) != len(flat):
        raise ValueError("gradient/parameter layout mismatch")
    dt = params.dtype
    b1 = dt.type(cfg.beta1)
    b2 = dt.type(cfg.beta2)
    lr = dt.type(cfg.lr)
    eps = dt.type(cfg.eps)
    one = dt.type(1.0)
    for i, g in enumerate(grads.arrays):
        if not grads.active[i]:
            continue
        g = g.astype(dt, copy=False)
        t = new_state.t[i] + 1
        new_state.t[i] = t
        m = new_state.m[i]
        v = new_state.v[i]
        m *= b1
        m += (one - b1) * g
        v *= b2
        v += (one - b2) * g * g
        mhat = m / (one - b1 ** dt.type(t))
        vhat = v / (one - b2 ** dt.type(t))
        flat[i] -= lr * mhat / (np.sqrt(vhat) + eps)
    return new_params, new_state


# ---------------------------------------------------------------------------
# verification utility


def grad_check(params: NetworkParams, x: np.ndarray, action, eps: float = 1e-4,
               d_loss_d_q: float = 1.0) -> float:
    """Max relative error of analytic grads vs central differences.

    Run this on a small float64 net; float32 rounding swamps the 1e-4
    difference quotients otherwise.
    """
    primitive, u, v = action

    def loss_at(p: NetworkParams) -> float:
        gq, pq, _ = forward(p, x)
        q = gq if primitive == "grasp" else pq
        return float(q[0, u, v]) * d_loss_d_q

    _, _, trace = forward(params, x)
    grads = backward(params, trace, action, d_loss_d_q)

    worst = 0.0
    flat = params.flatten()
    for ai, (arr, g, on) in enumerate(zip(flat, grads.arrays, grads.active)):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            lp = loss_at(params)
            arr[idx] = orig - eps
            lm = loss_at(params)
            arr[idx] = orig
            num = (lp - lm) / (2 * eps)
            ana = float(g[idx]) if on else 0.0
            scale = max(abs(num), abs(ana), 1e-6)
            worst = max(worst, abs(num - ana) / scale)
    return worst


# ---------------------------------------------------------------------------
# parameter block serialization (little-endian float32)

_MAGIC = b"PGQC"
_VERSION = 1


def _arch_json(arch: ArchConfig) -> bytes:
    d = {
        "in_channels": arch.in_channels,
        "encoder_channels": list(arch.encoder_channels),
        "decoder_channels": list(arch.decoder_channels),
        "kernel": arch.kernel,
        "leaky_slope": arch.leaky_slope,
        "n_rotations": arch.n_rotations,
    }
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode()


def _arch_from_json(blob: bytes) -> ArchConfig:
    d = json.loads(blob.decode())
    return ArchConfig(
        in_channels=d["in_channels"],
        encoder_channels=tuple(d["encoder_channels"]),
        decoder_channels=tuple(d["decoder_channels"]),
        kernel=d["kernel"],
        leaky_slope=d["leaky_slope"],
        n_rotations=d["n_rotations"],
    )


def _write_arrays(out: io.BytesIO, arrays: list[np.ndarray]):
    out.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        a32 = np.ascontiguousarray(a, dtype="<f4")
        out.write(struct.pack("<I", a32.ndim))
        out.write(struct.pack(f"<{a32.ndim}I", *a32.shape))
        out.write(a32.tobytes())


def _read_arrays(buf: io.BytesIO) -> list[np.ndarray]:
    (count,) = struct.unpack("<I", _take(buf, 4))
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack("<I", _take(buf, 4))
        shape = struct.unpack(f"<{ndim}I", _take(buf, 4 * ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(_take(buf, 4 * n), dtype="<f4").reshape(shape)
        arrays.append(data.copy())
    return arrays


def _take(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint data")
    return data


def params_to_blob(params: NetworkParams, state: AdamState | None = None) -> bytes:
    out = io.BytesIO()
    out.write(_MAGIC)
    out.write(struct.pack("<I", _VERSION))
    aj = _arch_json(params.arch)
    out.write(struct.pack("<I", len(aj)))
    out.write(aj)
    _write_arrays(out, params.flatten())
    if state is None:
        out.write(struct.pack("<B", 0))
    else:
        out.write(struct.pack("<B", 1))
        _write_arrays(out, state.m)
        _write_arrays(out, state.v)
        out.write(struct.pack(f"<{len(state.t)}Q", *state.t))
    return out.getvalue()


def params_from_blob(blob: bytes) -> tuple[NetworkParams, AdamState | None]:
    buf = io.BytesIO(blob)
    if _take(buf, 4) != _MAGIC:
        raise CheckpointError("bad magic: not a network checkpoint")
    (version,) = struct.unpack("<I", _take(buf, 4))
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (alen,) = struct.unpack("<I", _take(buf, 4))
    arch = _arch_from_json(_take(buf, alen))
    flat = _read_arrays(buf)

    params = init_params(0, arch, dtype=np.float32)
    expect = params.flatten()
    if len(flat) != len(expect):
        raise CheckpointError("parameter count does not match architecture")
    for dst, src in zip(expect, flat):
        if dst.shape != src.shape:
            raise CheckpointError(f"shape mismatch {src.shape} vs {dst.shape}")
        dst[:] = src

    (has_adam,) = struct.unpack("<B", _take(buf, 1))
    state = None
    if has_adam:
        m = _read_arrays(buf)
        v = _read_arrays(buf)
        t = list(struct.unpack(f"<{len(m)}Q", _take(buf, 8 * len(m))))
        state = AdamState(m=m, v=v, t=t)
    return params, state
