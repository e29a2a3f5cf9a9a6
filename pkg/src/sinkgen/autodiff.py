"""Tape-based reverse-mode autodiff over float64 numpy arrays.

A ``Tape`` records one forward pass as an ordered list of backward closures;
``Tape.backward`` replays them in exact reverse order, accumulating gradients
on ``Tensor`` leaves. The op set is deliberately small: dense/conv layers,
the two norms, SiLU/ReLU, inverted dropout, shape-preserving adds, nearest
upsampling, reshape, and scalar reductions.

Sequence tensors are laid out channels-last, (batch, length, channels), so
convolutions lower to a single patch-matrix GEMM with no output transpose;
feature tensors are (batch, features). Matrix products dispatch to the
fastest available BLAS (torch's, when importable) via ``_matmul``; data stays
in float64 numpy arrays throughout.

No graph optimization, no broadcasting beyond the documented cases, no
higher-order derivatives.
"""

from __future__ import annotations

import struct
import threading

import numpy as np

EPS_NORM = 1e-5

_local = threading.local()


def _scratch(tag: str, shape) -> np.ndarray:
    """Reusable per-thread work buffer for op-local temporaries.

    Callers must fully overwrite and consume the buffer before returning;
    nothing handed to ``_accumulate`` or kept in a closure may live here.
    """
    pool = getattr(_local, "pool", None)
    if pool is None:
        pool = _local.pool = {}
    key = (tag,) + tuple(shape)
    buf = pool.get(key)
    if buf is None:
        buf = pool[key] = np.empty(shape)
    return buf


def _padded(tag: str, x: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad along axis 1 into a scratch buffer."""
    batch, length, ch = x.shape
    out = _scratch(tag, (batch, length + 2 * pad, ch))
    out[:, :pad] = 0.0
    out[:, length + pad:] = 0.0
    out[:, pad:length + pad] = x
    return out


def _numpy_matmul(a, b):
    return np.matmul(a, b)


def _numpy_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


try:  # pragma: no cover - exercised indirectly by everything
    import torch as _torch

    def _wrap(a):
        # from_numpy warns on read-only views; those are rare, copy them
        if not a.flags.writeable:
            a = a.copy()
        return _torch.from_numpy(a)

    def _matmul(a, b):
        return _torch.mm(_wrap(a), _wrap(b)).numpy()

    def _sigmoid(x):
        return _torch.sigmoid(_wrap(x)).numpy()

except ImportError:  # pragma: no cover
    _matmul = _numpy_matmul
    _sigmoid = _numpy_sigmoid


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf while finite checking was enabled."""


class CheckpointError(ValueError):
    """Malformed checkpoint header or payload."""


class Tensor:
    """Array value with an accumulated gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def _accumulate(t: Tensor, g) -> None:
    # backward rules either donate a fresh array or pass an explicit copy,
    # so in-place accumulation never aliases a live buffer
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def zero_grads(params) -> None:
    tensors = params.values() if hasattr(params, "values") else params
    for p in tensors:
        p.grad = None


class Tape:
    """Records ops while ``recording`` and any input requires a gradient.

    With ``check_finite`` every op output is scanned for NaN/Inf. A
    non-recording tape is a plain forward evaluator.
    """

    def __init__(self, recording: bool = True, check_finite: bool = False):
        self.recording = recording
        self.check_finite = check_finite
        self._ops = []

    def _emit(self, name: str, out_data, inputs, backward) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"non-finite output in op '{name}'")
        needs = self.recording and any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=needs)
        if needs:
            self._ops.append((out, backward))
        return out

    def backward(self, root: Tensor) -> None:
        """Seed the scalar root with gradient 1 and replay the tape reversed."""
        if root.data.size != 1:
            raise ValueError("backward root must be a scalar")
        root.grad = np.ones_like(root.data)
        for out, bw in reversed(self._ops):
            if out.grad is not None:
                bw(out.grad)
        self._ops.clear()

    # ---- dense ----

    def linear(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        """x (batch, f_in) @ w (f_in, f_out) + b (f_out,)."""
        y = _matmul(x.data, w.data)
        y += b.data

        def bw(dy):
            _accumulate(x, _matmul(dy, w.data.T))
            _accumulate(w, _matmul(x.data.T, dy))
            _accumulate(b, dy.sum(axis=0))

        return self._emit("linear", y, (x, w, b), bw)

    # ---- convolution ----

    def conv1d(self, x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
        """x (batch, length, c_in) * w (c_out, c_in, k) + b, channels-last.

        Patches are gathered once into (batch*l_out, k*c_in) and multiplied
        against the reshaped kernel; the same patch matrix serves the weight
        gradient, and the input gradient is scattered back with one clipped
        slice-add per tap.
        """
        batch, length, c_in = x.data.shape
        c_out, c_in_w, k = w.data.shape
        if c_in_w != c_in:
            raise ValueError(f"conv1d channel mismatch: kernel {c_in_w} vs input {c_in}")
        l_out = (length + 2 * padding - k) // stride + 1
        if l_out <= 0:
            raise ValueError("conv1d output length would be non-positive")
        xp = _padded("conv_xp", x.data, padding) if padding else x.data
        windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride]
        cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(batch * l_out, k * c_in)
        w2 = np.ascontiguousarray(w.data.transpose(0, 2, 1)).reshape(c_out, k * c_in)
        y2 = _matmul(cols, w2.T)
        y2 += b.data
        y = y2.reshape(batch, l_out, c_out)

        def bw(dy):
            dy2 = np.ascontiguousarray(dy).reshape(batch * l_out, c_out)
            dw2 = _matmul(dy2.T, cols)
            _accumulate(w, np.ascontiguousarray(dw2.reshape(c_out, k, c_in).transpose(0, 2, 1)))
            _accumulate(b, dy2.sum(axis=0))
            if not x.requires_grad:
                return
            if stride == 1:
                # full correlation with the flipped kernel, as one GEMM
                lead = k - 1 - padding
                dyr = dy2.reshape(batch, l_out, c_out)
                dyp = _padded("conv_dyp", dyr, lead) if lead else dyr
                win = np.lib.stride_tricks.sliding_window_view(dyp, k, axis=1)
                dyc = _scratch("conv_dyc", (batch, length, k, c_out))
                np.copyto(dyc, win.transpose(0, 1, 3, 2))
                wT = np.ascontiguousarray(w.data[:, :, ::-1].transpose(2, 0, 1)).reshape(k * c_out, c_in)
                dx = _matmul(dyc.reshape(batch * length, k * c_out), wT)
                _accumulate(x, dx.reshape(batch, length, c_in))
            else:
                dcols = _matmul(dy2, w2).reshape(batch, l_out, k, c_in)
                dx = np.zeros((batch, length, c_in))
                for kk in range(k):
                    off = kk - padding
                    i_min = 0 if off >= 0 else (-off + stride - 1) // stride
                    i_max = min(l_out, (length - 1 - off) // stride + 1)
                    if i_max <= i_min:
                        continue
                    dst = slice(i_min * stride + off, (i_max - 1) * stride + off + 1, stride)
                    dx[:, dst, :] += dcols[:, i_min:i_max, kk, :]
                _accumulate(x, dx)

        return self._emit("conv1d", y, (x, w, b), bw)

    def upsample_nearest_2x(self, x: Tensor) -> Tensor:
        """Repeat each position twice along the length axis."""
        y = np.repeat(x.data, 2, axis=1)

        def bw(dy):
            _accumulate(x, dy[:, 0::2, :] + dy[:, 1::2, :])

        return self._emit("upsample_nearest_2x", y, (x,), bw)

    # ---- normalization ----

    def group_norm(self, x: Tensor, groups: int, gamma: Tensor, beta: Tensor) -> Tensor:
        """Normalize (batch, length, channels) over each channel group's
        (length, group-channels) slab; affine parameters are per channel.

        Group statistics reduce through per-channel sums so the hot passes
        stay contiguous, and the normalized field is folded into one affine
        map y = x*scale + shift instead of materializing xhat.
        """
        batch, length, channels = x.data.shape
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        cg = channels // groups
        m = length * cg
        xd = x.data
        xs = xd.sum(axis=1)
        xq = np.einsum("blc,blc->bc", xd, xd)
        mu = xs.reshape(batch, groups, cg).sum(axis=2) / m
        var = xq.reshape(batch, groups, cg).sum(axis=2) / m - mu * mu
        inv = 1.0 / np.sqrt(var + EPS_NORM)
        mu_c = np.repeat(mu, cg, axis=1)
        inv_c = np.repeat(inv, cg, axis=1)
        scale = gamma.data * inv_c
        shift = beta.data - mu_c * scale
        y = xd * scale[:, None, :]
        y += shift[:, None, :]

        def bw(dy):
            dys = dy.sum(axis=1)
            dyx = np.einsum("blc,blc->bc", dy, xd)
            dyxh = (dyx - mu_c * dys) * inv_c  # per-channel sum of dy*xhat
            _accumulate(gamma, dyxh.sum(axis=0))
            _accumulate(beta, dys.sum(axis=0))
            if x.requires_grad:
                m1 = (dys * gamma.data).reshape(batch, groups, cg).sum(axis=2) / m
                m2 = (dyxh * gamma.data).reshape(batch, groups, cg).sum(axis=2) / m
                m1_c = np.repeat(m1, cg, axis=1)
                m2_c = np.repeat(m2, cg, axis=1)
                coef_x = -inv_c * inv_c * m2_c
                const = (mu_c * inv_c * m2_c - m1_c) * inv_c
                dx = dy * scale[:, None, :]
                tmp = _scratch("gn_dx", xd.shape)
                np.multiply(xd, coef_x[:, None, :], out=tmp)
                dx += tmp
                dx += const[:, None, :]
                _accumulate(x, dx)

        return self._emit("group_norm", y, (x, gamma, beta), bw)

    def batch_norm(
        self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        running_mean: np.ndarray,
        running_var: np.ndarray,
        training: bool,
        momentum: float = 0.1,
    ) -> Tensor:
        """Feature-wise norm over the batch axis of (batch, features) input.

        Training mode normalizes with batch statistics and folds them into
        the running buffers in place; eval mode normalizes with the buffers
        and has a diagonal backward.
        """
        if training:
            mu = x.data.mean(axis=0)
            var = x.data.var(axis=0)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var
        else:
            mu = running_mean
            var = running_var
        inv_std = 1.0 / np.sqrt(var + EPS_NORM)
        xhat = (x.data - mu) * inv_std
        y = xhat * gamma.data + beta.data

        def bw(dy):
            _accumulate(gamma, (dy * xhat).sum(axis=0))
            _accumulate(beta, dy.sum(axis=0))
            if x.requires_grad:
                if training:
                    dxh = dy * gamma.data
                    term = dxh - dxh.mean(axis=0) - xhat * (dxh * xhat).mean(axis=0)
                    _accumulate(x, term * inv_std)
                else:
                    _accumulate(x, dy * (gamma.data * inv_std))

        return self._emit("batch_norm", y, (x, gamma, beta), bw)

    # ---- activations ----

    def silu(self, x: Tensor) -> Tensor:
        sig = _sigmoid(x.data)
        y = x.data * sig

        def bw(dy):
            # d/dx x*sig(x) = sig + x*sig*(1-sig) = sig + y*(1-sig)
            g = 1.0 - sig
            g *= y
            g += sig
            g *= dy
            _accumulate(x, g)

        return self._emit("silu", y, (x,), bw)

    def relu(self, x: Tensor) -> Tensor:
        mask = x.data > 0.0
        y = x.data * mask

        def bw(dy):
            _accumulate(x, dy * mask)

        return self._emit("relu", y, (x,), bw)

    def dropout(self, x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
        """Inverted dropout; identity (and rng untouched) when not training."""
        if not training or p == 0.0:

            def bw_id(dy):
                _accumulate(x, dy.copy())

            return self._emit("dropout", x.data, (x,), bw_id)
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate {p} outside [0, 1)")
        scale = 1.0 / (1.0 - p)
        # keep/scale factors folded into one float64 mask, single pass each way
        mask = (rng.random(x.data.shape, dtype=np.float32) >= p) * scale
        y = x.data * mask

        def bw(dy):
            _accumulate(x, dy * mask)

        return self._emit("dropout", y, (x,), bw)

    # ---- combination and reduction ----

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
        y = a.data + b.data

        def bw(dy):
            _accumulate(a, dy)
            _accumulate(b, dy.copy())

        return self._emit("add", y, (a, b), bw)

    def add_channel_bias(self, x: Tensor, v: Tensor) -> Tensor:
        """x (batch, length, channels) plus a per-sample channel bias (batch, channels)."""
        y = x.data + v.data[:, None, :]

        def bw(dy):
            _accumulate(v, dy.sum(axis=1))
            _accumulate(x, dy)

        return self._emit("add_channel_bias", y, (x, v), bw)

    def reshape(self, x: Tensor, shape) -> Tensor:
        shape = tuple(shape)
        orig = x.data.shape
        y = x.data.reshape(shape)

        def bw(dy):
            _accumulate(x, dy.reshape(orig))

        return self._emit("reshape", y, (x,), bw)

    def total(self, x: Tensor) -> Tensor:
        y = np.asarray(x.data.sum())

        def bw(dy):
            _accumulate(x, np.full_like(x.data, float(dy)))

        return self._emit("total", y, (x,), bw)

    def mse(self, pred: Tensor, target) -> Tensor:
        target = np.asarray(target, dtype=np.float64)
        diff = pred.data - target
        y = np.asarray(np.mean(diff * diff))

        def bw(dy):
            g = diff * (2.0 * float(dy) / diff.size)
            _accumulate(pred, g)

        return self._emit("mse", y, (pred,), bw)


class AdamW:
    """Decoupled weight decay applied to the parameter before the Adam update."""

    def __init__(
        self,
        params: dict,
        lr: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        largest = max((p.data.size for p in params.values()), default=0)
        self._work = np.empty(largest)

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m = self.m[k]
            v = self.v[k]
            s = self._work[: g.size].reshape(g.shape)
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=s)
            m += s
            v *= self.beta2
            np.multiply(g, g, out=s)
            s *= 1.0 - self.beta2
            v += s
            np.divide(v, bc2, out=s)
            np.sqrt(s, out=s)
            s += self.eps
            np.divide(m, s, out=s)
            s *= self.lr / bc1
            p.data -= s

    def zero_grad(self) -> None:
        zero_grads(self.params)


def grad_check(build, tensors, h: float = 1e-5) -> float:
    """Compare tape gradients against central finite differences.

    ``build(tape)`` must re-evaluate the same deterministic scalar from the
    captured ``tensors`` (no dropout, no mutated state). Returns
    max |g_ad - g_fd| / max(1, |g_fd|) over every coordinate.
    """
    tape = Tape(recording=True)
    loss = build(tape)
    tape.backward(loss)
    grads = []
    for t in tensors:
        grads.append(np.zeros_like(t.data) if t.grad is None else np.array(t.grad))
        t.grad = None
    worst = 0.0
    for t, g_ad in zip(tensors, grads):
        flat = t.data.reshape(-1)
        g_flat = g_ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(build(Tape(recording=False)).data)
            flat[i] = orig - h
            f_minus = float(build(Tape(recording=False)).data)
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(g_flat[i] - g_fd) / max(1.0, abs(g_fd))
            if rel > worst:
                worst = rel
    return worst


CHECKPOINT_MAGIC = b"HGCKPT1"


def write_checkpoint(path, kind: str, arrays: dict) -> None:
    """Little-endian binary dump: magic, kind, count, then per-array
    (name, rank, dims, float64 payload) in dict insertion order."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        kind_b = kind.encode("utf-8")
        f.write(struct.pack("<I", len(kind_b)))
        f.write(kind_b)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            # asarray keeps rank (ascontiguousarray would promote 0-d to 1-d);
            # tobytes already serializes any layout in C order
            a = np.asarray(arr, dtype="<f8")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", a.ndim))
            if a.ndim:
                f.write(struct.pack(f"<{a.ndim}q", *a.shape))
            f.write(a.tobytes())


def read_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    off = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        out = blob[off:off + n]
        off += n
        return out

    kind_len = struct.unpack("<I", take(4))[0]
    kind = take(kind_len).decode("utf-8")
    count = struct.unpack("<I", take(4))[0]
    arrays = {}
    for _ in range(count):
        name_len = struct.unpack("<I", take(4))[0]
        name = take(name_len).decode("utf-8")
        rank = struct.unpack("<I", take(4))[0]
        shape = struct.unpack(f"<{rank}q", take(8 * rank)) if rank else ()
        size = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
    if off != len(blob):
        raise CheckpointError("trailing bytes after last array")
    return kind, arrays
