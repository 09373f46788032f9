"""Neural-network primitives on top of the tape: convolutions, norms, attention."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from voxinit import ops
from voxinit.autodiff import ShapeError, Tensor, record

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ValueError(f"expected 3 values, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, k, s, out_sz) -> np.ndarray:
    """[B,C,H,W,D] -> strided view [B,C,Ho,Wo,Do,k0,k1,k2]."""
    win = sliding_window_view(xp, k, axis=(2, 3, 4))
    return win[:, :, ::s[0], ::s[1], ::s[2]][:, :, :out_sz[0], :out_sz[1], :out_sz[2]]


def _scatter_windows(cols: np.ndarray, full_shape, k, s) -> np.ndarray:
    """Adjoint of ``_windows``: cols [B,Ho,Wo,Do,C,k0,k1,k2] summed into [B,C,*full]."""
    B, Ho, Wo, Do, C = cols.shape[:5]
    out = np.zeros((B, C) + tuple(full_shape), dtype=cols.dtype)
    for a in range(k[0]):
        for b in range(k[1]):
            for c in range(k[2]):
                out[:, :, a:a + s[0] * (Ho - 1) + 1:s[0],
                    b:b + s[1] * (Wo - 1) + 1:s[1],
                    c:c + s[2] * (Do - 1) + 1:s[2]] += cols[..., a, b, c].transpose(0, 4, 1, 2, 3)
    return out


def _pad(x: np.ndarray, p) -> np.ndarray:
    if not any(p):
        return x
    return np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0,
           method: str = "auto") -> Tensor:
    """3D cross-correlation. x [B,Cin,H,W,D], w [Cout,Cin,k0,k1,k2].

    ``method`` picks the kernel: ``"im2col"`` (generic strided windows),
    ``"shift"`` (stride 1, one matmul per kernel offset on the flattened
    padded grid), ``"patch"`` (kernel == stride, no padding) or ``"auto"``.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input channels {x.shape[1]} != weight channels {w.shape[1]} "
                         f"(input {x.shape}, weight {w.shape})")
    s, p, k = _triple(stride), _triple(padding), tuple(w.shape[2:])
    if min(s) < 1:
        raise ValueError(f"conv3d: stride must be >= 1, got {s}")
    spatial = x.shape[2:]
    if any(kk > n + 2 * pp for kk, n, pp in zip(k, spatial, p)):
        raise ShapeError(f"conv3d: kernel {k} larger than padded input {spatial} (padding {p})")
    out_sz = tuple(conv_output_size(n, kk, ss, pp) for n, kk, ss, pp in zip(spatial, k, s, p))
    if method == "auto":
        if k == s and not any(p):
            method = "patch"
        elif s == (1, 1, 1):
            method = "shift"
        else:
            method = "im2col"
    fwd = {"im2col": _conv_im2col, "shift": _conv_shift, "patch": _conv_patch}[method]
    out, vjp_xw = fwd(x, w, k, s, p, out_sz)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)
    inputs = (x, w) if bias is None else (x, w, bias)

    def vjp(g):
        gx, gw = vjp_xw(g, x.requires_grad, w.requires_grad)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return record("conv3d", inputs, out, vjp)


def _conv_im2col(x, w, k, s, p, out_sz):
    spatial = x.shape[2:]
    xp = _pad(x.data, p)
    win = _windows(xp, k, s, out_sz)
    out = np.tensordot(win, w.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # [B,Ho,Wo,Do,Cout]
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))

    def vjp(g, need_x, need_w):
        gx = gw = None
        if need_x:
            cols = np.tensordot(g, w.data, axes=([1], [0]))  # [B,Ho,Wo,Do,Cin,k..]
            gxp = _scatter_windows(cols, xp.shape[2:], k, s)
            gx = gxp[:, :, p[0]:p[0] + spatial[0], p[1]:p[1] + spatial[1], p[2]:p[2] + spatial[2]]
        if need_w:
            gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        return gx, gw

    return out, vjp


def _conv_shift(x, w, k, s, p, out_sz):
    # output (h,w,d) reads padded voxel (h+a, w+b, d+c): a constant flat offset
    B, C = x.shape[:2]
    O = w.shape[0]
    spatial = x.shape[2:]
    xp = _pad(x.data, p)
    Hp, Wp, Dp = xp.shape[2:]
    xflat = xp.reshape(B, C, Hp * Wp * Dp)
    Ho, Wo, Do = out_sz
    L = (Ho - 1) * Wp * Dp + (Wo - 1) * Dp + Do
    offsets = [a * Wp * Dp + b * Dp + c for a in range(k[0]) for b in range(k[1]) for c in range(k[2])]
    wk = np.ascontiguousarray(w.data.transpose(2, 3, 4, 0, 1)).reshape(len(offsets), O, C)
    acc = np.zeros((B, O, Hp * Wp * Dp), dtype=np.result_type(x.dtype, w.dtype))
    for n in range(B):
        for j, off in enumerate(offsets):
            acc[n, :, :L] += wk[j] @ xflat[n, :, off:off + L]
    out = np.ascontiguousarray(acc.reshape(B, O, Hp, Wp, Dp)[:, :, :Ho, :Wo, :Do])

    def vjp(g, need_x, need_w):
        gflat = np.zeros((B, O, Hp, Wp, Dp), dtype=g.dtype)
        gflat[:, :, :Ho, :Wo, :Do] = g
        gL = gflat.reshape(B, O, -1)[:, :, :L]
        gx = gw = None
        if need_x:
            wt = np.ascontiguousarray(wk.transpose(0, 2, 1))
            gxp = np.zeros((B, C, Hp * Wp * Dp), dtype=g.dtype)
            for n in range(B):
                gn = np.ascontiguousarray(gL[n])
                for j, off in enumerate(offsets):
                    gxp[n, :, off:off + L] += wt[j] @ gn
            gx = gxp.reshape(B, C, Hp, Wp, Dp)[:, :, p[0]:p[0] + spatial[0],
                                                p[1]:p[1] + spatial[1], p[2]:p[2] + spatial[2]]
            gx = np.ascontiguousarray(gx)
        if need_w:
            gwk = np.zeros((len(offsets), O, C), dtype=g.dtype)
            for n in range(B):
                gn = np.ascontiguousarray(gL[n])
                for j, off in enumerate(offsets):
                    gwk[j] += gn @ xflat[n, :, off:off + L].T
            gw = np.ascontiguousarray(gwk.reshape(k + (O, C)).transpose(3, 4, 0, 1, 2))
        return gx, gw

    return out, vjp


def _blocks(xd: np.ndarray, k) -> np.ndarray:
    """[B,C,H,W,D] -> [B,Ho,Wo,Do,C,k0,k1,k2] for non-overlapping k-blocks."""
    B, C, H, W, D = xd.shape
    v = xd.reshape(B, C, H // k[0], k[0], W // k[1], k[1], D // k[2], k[2])
    return v.transpose(0, 2, 4, 6, 1, 3, 5, 7)


def _unblocks(cols: np.ndarray) -> np.ndarray:
    """Inverse of ``_blocks``."""
    B, Ho, Wo, Do, C, k0, k1, k2 = cols.shape
    return cols.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(B, C, Ho * k0, Wo * k1, Do * k2)


def _conv_patch(x, w, k, s, p, out_sz):
    spatial = x.shape[2:]
    xd = x.data
    crop = tuple(o * kk for o, kk in zip(out_sz, k))
    if crop != spatial:
        xd = xd[:, :, :crop[0], :crop[1], :crop[2]]
    blocks = _blocks(xd, k)
    out = np.tensordot(blocks, w.data, axes=([4, 5, 6, 7], [1, 2, 3, 4]))  # [B,Ho,Wo,Do,O]
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))

    def vjp(g, need_x, need_w):
        gx = gw = None
        if need_x:
            cols = np.tensordot(g, w.data, axes=([1], [0]))  # [B,Ho,Wo,Do,C,k..]
            gx = np.zeros(x.shape, dtype=g.dtype)
            gx[:, :, :crop[0], :crop[1], :crop[2]] = _unblocks(cols)
        if need_w:
            gw = np.tensordot(g, blocks, axes=([0, 2, 3, 4], [0, 1, 2, 3]))
        return gx, gw

    return out, vjp


def conv_transpose3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0,
                     method: str = "auto") -> Tensor:
    """Transposed 3D convolution, the adjoint of :func:`conv3d` in its input.

    x [B,Cin,H,W,D], w [Cin,Cout,k0,k1,k2]; output spatial size is
    (n - 1) * stride + k - 2 * padding. ``method="patch"`` (kernel == stride,
    no padding) is a pure reshape; ``"scatter"`` handles everything.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv_transpose3d expects 5-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose3d: input channels {x.shape[1]} != weight rows {w.shape[0]} "
                         f"(input {x.shape}, weight {w.shape})")
    s, p, k = _triple(stride), _triple(padding), tuple(w.shape[2:])
    if min(s) < 1:
        raise ValueError(f"conv_transpose3d: stride must be >= 1, got {s}")
    spatial = x.shape[2:]
    full = tuple((n - 1) * ss + kk for n, ss, kk in zip(spatial, s, k))
    out_sz = tuple(f - 2 * pp for f, pp in zip(full, p))
    if min(out_sz) < 1:
        raise ShapeError(f"conv_transpose3d: padding {p} leaves empty output from {spatial}")
    if method == "auto":
        method = "patch" if k == s and not any(p) else "scatter"
    cols = np.tensordot(x.data, w.data, axes=([1], [0]))  # [B,H,W,D,Cout,k..]
    if method == "patch":
        out = np.ascontiguousarray(_unblocks(cols))
    else:
        out_full = _scatter_windows(cols, full, k, s)
        out = np.ascontiguousarray(out_full[:, :, p[0]:p[0] + out_sz[0], p[1]:p[1] + out_sz[1],
                                            p[2]:p[2] + out_sz[2]])
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)
    inputs = (x, w) if bias is None else (x, w, bias)

    def vjp(g):
        if method == "patch":
            win = _blocks(g, k).transpose(0, 4, 1, 2, 3, 5, 6, 7)  # [B,Cout,H,W,D,k..]
        else:
            win = _windows(_pad(g, p), k, s, spatial)
        gx = gw = None
        if x.requires_grad:
            gx = np.tensordot(win, w.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # [B,H,W,D,Cin]
            gx = np.ascontiguousarray(gx.transpose(0, 4, 1, 2, 3))
        if w.requires_grad:
            gw = np.tensordot(x.data, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # [Cin,Cout,k..]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return record("conv_transpose3d", inputs, out, vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x [..., In] @ w [In, Out] + b."""
    y = ops.matmul(x, w)
    return y if b is None else ops.add(y, b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]
    red = tuple(range(x.ndim - 1))

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record("layer_norm", (x, gamma, beta), out.astype(x.dtype, copy=False), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", (x,), y,
                  lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return record("log_softmax", (x,), out,
                  lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = (x.data * cdf).astype(x.dtype, copy=False)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return record("gelu", (x,), out, lambda g: (g * (cdf + x.data * pdf),))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return record("leaky_relu", (x,), x.data * scale, lambda g: (g * scale,))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention on [B,T,E] inputs."""
    if q.ndim != 3 or q.shape != k.shape or k.shape != v.shape:
        raise ShapeError(f"attention expects equal [B,T,E] inputs, got {q.shape}, {k.shape}, {v.shape}")
    B, T, E = q.shape
    if heads < 1 or E % heads:
        raise ValueError(f"attention: embedding {E} is not divisible by {heads} heads")
    dh = E // heads

    def split(t):
        return ops.transpose(ops.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = ops.mul(ops.matmul(qh, ops.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1)
    out = ops.matmul(weights, vh)
    return ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, T, E))


def attention_weights(q: np.ndarray, k: np.ndarray, heads: int) -> np.ndarray:
    """Per-head attention matrices [B,heads,T,T] (inspection only, not recorded)."""
    B, T, E = q.shape
    dh = E // heads
    qh = q.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)
    s = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
    s = np.exp(s - s.max(axis=-1, keepdims=True))
    return s / s.sum(axis=-1, keepdims=True)
