"""Spatial ops: convolution (strided/dilated/grouped), pooling, bilinear
upsampling and instance normalization, all differentiable on the tape.

conv2d picks a lowering per geometry. Dense stride-1 convs (the bulk of
the network cost) run one GEMM per kernel tap directly on overlapping
views of the flattened padded image, which avoids materializing im2col
columns; 1x1 convs are plain channel GEMMs; depthwise convs take a 9-tap
multiply-add path; everything else (strided or grouped) falls back to
im2col + batched GEMM. All paths use fixed reduction orders, so results
are reproducible run to run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateStatisticsError, ShapeError
from .tensor import Tensor, accumulate_grad, record_op


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 2-D cross-correlation."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: tuple[int, int] | None = None  # None = "same" for stride 1 halving rules
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )
        if self.stride < 1 or self.dilation < 1:
            raise ShapeError("stride and dilation must be >= 1")
        if self.padding is None:
            kh, kw = self.kernel
            if kh % 2 == 0 or kw % 2 == 0:
                raise ShapeError("same-padding needs odd kernels")
            object.__setattr__(
                self, "padding", (self.dilation * (kh - 1) // 2, self.dilation * (kw - 1) // 2)
            )

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        eh = self.dilation * (kh - 1) + 1
        ew = self.dilation * (kw - 1) + 1
        ph, pw = self.padding
        if eh > h + 2 * ph or ew > w + 2 * pw:
            raise ShapeError(
                f"effective kernel {eh}x{ew} exceeds padded input {h + 2 * ph}x{w + 2 * pw}"
            )
        return (h + 2 * ph - eh) // self.stride + 1, (w + 2 * pw - ew) // self.stride + 1


def same_padding(kernel: int, dilation: int = 1) -> int:
    return dilation * (kernel - 1) // 2


def _pad2d(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph : ph + h, pw : pw + w] = x
    return out


def _im2col(xp: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """(B, Cin, Hp, Wp) -> columns (B, Cin*kh*kw, ho*wo)."""
    b, cin = xp.shape[:2]
    kh, kw = spec.kernel
    d, s = spec.dilation, spec.stride
    cols = np.empty((b, cin, kh, kw, ho, wo), dtype=xp.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xp[
                :, :, ki * d : ki * d + (ho - 1) * s + 1 : s, kj * d : kj * d + (wo - 1) * s + 1 : s
            ]
    return cols.reshape(b, cin * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, xp_shape, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """Transpose of _im2col: scatter-add columns back onto the padded grid."""
    b, cin = xp_shape[:2]
    kh, kw = spec.kernel
    d, s = spec.dilation, spec.stride
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    dc = dcols.reshape(b, cin, kh, kw, ho, wo)
    for ki in range(kh):
        for kj in range(kw):
            dxp[
                :, :, ki * d : ki * d + (ho - 1) * s + 1 : s, kj * d : kj * d + (wo - 1) * s + 1 : s
            ] += dc[:, :, ki, kj]
    return dxp


def _dw_slices(spec: ConvSpec, ho: int, wo: int, ki: int, kj: int):
    d, s = spec.dilation, spec.stride
    return (
        slice(ki * d, ki * d + (ho - 1) * s + 1, s),
        slice(kj * d, kj * d + (wo - 1) * s + 1, s),
    )


def _rows_build(xflat_b: np.ndarray, rows: np.ndarray, kh: int, shift: int, lr: int):
    """rows[ki, c, u] = xflat_b[c, u + ki*shift] for the row-folded GEMM."""
    for ki in range(kh):
        rows[ki, :, :] = xflat_b[:, ki * shift : ki * shift + lr]


def _rows_forward(xp, weight, spec, ho, wo):
    """Row-folded conv: the kh kernel rows are stacked into the GEMM
    reduction axis, leaving one GEMM (plus one shifted add) per kernel
    column on views of the flattened padded image."""
    b, cin, hp, wp = xp.shape
    cout = spec.out_channels
    kh, kw = spec.kernel
    d = spec.dilation
    lr = hp * wp - (kh - 1) * d * wp
    t = (ho - 1) * wp + wo
    xflat = xp.reshape(b, cin, -1)
    wcols = [
        np.ascontiguousarray(weight[:, :, :, kj].transpose(0, 2, 1)).reshape(cout, kh * cin)
        for kj in range(kw)
    ]
    rows = np.empty((kh, cin, lr), dtype=xp.dtype)
    rows_k = rows.reshape(kh * cin, lr)
    out_full = np.empty((b, cout, ho * wp), dtype=xp.dtype)
    tmp = np.empty((cout, t), dtype=xp.dtype)
    for bb in range(b):
        _rows_build(xflat[bb], rows, kh, d * wp, lr)
        acc = out_full[bb, :, :t]
        np.matmul(wcols[0], rows_k[:, :t], out=acc)
        for kj in range(1, kw):
            np.matmul(wcols[kj], rows_k[:, kj * d : kj * d + t], out=tmp)
            acc += tmp
    return np.ascontiguousarray(out_full.reshape(b, cout, ho, wp)[:, :, :, :wo])


def _rows_backward(g, xp, weight, spec, ho, wo, need_dx, need_dw):
    b, cin, hp, wp = xp.shape
    cout = spec.out_channels
    kh, kw = spec.kernel
    d = spec.dilation
    t = (ho - 1) * wp + wo
    lg = (kh - 1) * d * wp + t
    xflat = xp.reshape(b, cin, -1)
    g_full = np.zeros((b, cout, ho, wp), dtype=g.dtype)
    g_full[:, :, :, :wo] = g
    gflat = g_full.reshape(b, cout, -1)
    dw = dxp = None
    if need_dw:
        # per-tap view GEMMs; K = t gives full intensity with no column copies
        dwt = np.zeros((kh, kw, cin, cout), dtype=g.dtype)
        tmpw = np.empty((cin, cout), dtype=g.dtype)
    if need_dx:
        wback = [
            np.ascontiguousarray(weight[:, :, :, kj].transpose(1, 2, 0)).reshape(cin, kh * cout)
            for kj in range(kw)
        ]
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        dxf = dxp.reshape(b, cin, -1)
        grows = np.zeros((kh, cout, lg), dtype=g.dtype)
        grows_k = grows.reshape(kh * cout, lg)
        tmpx = np.empty((cin, lg), dtype=g.dtype)
    for bb in range(b):
        gb = gflat[bb]
        gbt = gb[:, :t].T
        if need_dw:
            for ki in range(kh):
                for kj in range(kw):
                    off = ki * d * wp + kj * d
                    np.matmul(xflat[bb, :, off : off + t], gbt, out=tmpw)
                    dwt[ki, kj] += tmpw
        if need_dx:
            for ki in range(kh):
                grows[ki, :, ki * d * wp : ki * d * wp + t] = gb[:, :t]
            for kj in range(kw):
                np.matmul(wback[kj], grows_k, out=tmpx)
                dxf[bb, :, kj * d : kj * d + lg] += tmpx
    if need_dw:
        dw = np.ascontiguousarray(dwt.transpose(3, 2, 0, 1))
    return dxp, dw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Dilated grouped 2-D cross-correlation."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects (B,C,H,W), got {x.shape}")
    b, cin, h, w = x.shape
    if cin != spec.in_channels:
        raise ShapeError(f"conv2d: input has {cin} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape():
        raise ShapeError(f"conv2d: weight shape {weight.shape} != {spec.weight_shape()}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)")
    ho, wo = spec.out_size(h, w)
    ph, pw = spec.padding
    kh, kw = spec.kernel
    cout = spec.out_channels

    pointwise = spec.kernel == (1, 1) and spec.stride == 1 and spec.groups == 1 and not (ph or pw)
    flat = not pointwise and spec.groups == 1 and spec.stride == 1
    depthwise = spec.depthwise
    xp = None if pointwise else _pad2d(x.data, ph, pw)

    if pointwise:
        w2 = weight.data.reshape(cout, cin)
        xf = x.data.reshape(b, cin, h * w)
        out = np.empty((b, cout, h * w), dtype=x.data.dtype)
        for bb in range(b):
            np.matmul(w2, xf[bb], out=out[bb])
        out = out.reshape(b, cout, ho, wo)
    elif depthwise:
        out = np.zeros((b, cout, ho, wo), dtype=x.data.dtype)
        for ki in range(kh):
            for kj in range(kw):
                hs, ws = _dw_slices(spec, ho, wo, ki, kj)
                out += weight.data[None, :, 0, ki, kj, None, None] * xp[:, :, hs, ws]
    elif flat:
        out = _rows_forward(xp, weight.data, spec, ho, wo)
    else:
        cols = _im2col(xp, spec, ho, wo)
        grp = spec.groups
        if grp == 1:
            out = np.matmul(weight.data.reshape(cout, -1)[None], cols)
        else:
            k = cols.shape[1] // grp
            out = np.matmul(
                weight.data.reshape(grp, cout // grp, k)[None], cols.reshape(b, grp, k, ho * wo)
            ).reshape(b, cout, ho * wo)
        out = out.reshape(b, cout, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    res = Tensor(out)

    def bwd(g):
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3)), fresh=True)
        need_dx, need_dw = x.requires_grad, weight.requires_grad
        if pointwise:
            gf = g.reshape(b, cout, ho * wo)
            xf = x.data.reshape(b, cin, h * w)
            if need_dw:
                dw = np.zeros((cout, cin), dtype=g.dtype)
                tmpw = np.empty_like(dw)
                for bb in range(b):
                    np.matmul(gf[bb], xf[bb].T, out=tmpw)
                    dw += tmpw
                accumulate_grad(weight, dw.reshape(weight.shape), fresh=True)
            if need_dx:
                w2t = np.ascontiguousarray(weight.data.reshape(cout, cin).T)
                dx = np.empty((b, cin, h * w), dtype=g.dtype)
                for bb in range(b):
                    np.matmul(w2t, gf[bb], out=dx[bb])
                accumulate_grad(x, dx.reshape(x.shape), fresh=True)
            return
        if depthwise:
            if need_dw:
                dw = np.zeros_like(weight.data)
                for ki in range(kh):
                    for kj in range(kw):
                        hs, ws = _dw_slices(spec, ho, wo, ki, kj)
                        dw[:, 0, ki, kj] = (g * xp[:, :, hs, ws]).sum(axis=(0, 2, 3))
                accumulate_grad(weight, dw, fresh=True)
            if need_dx:
                dxp = np.zeros_like(xp)
                for ki in range(kh):
                    for kj in range(kw):
                        hs, ws = _dw_slices(spec, ho, wo, ki, kj)
                        dxp[:, :, hs, ws] += weight.data[None, :, 0, ki, kj, None, None] * g
                dx = dxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else dxp
                accumulate_grad(x, dx, fresh=True)
            return
        if flat:
            dxp, dw = _rows_backward(g, xp, weight.data, spec, ho, wo, need_dx, need_dw)
            if need_dw:
                accumulate_grad(weight, dw, fresh=True)
            if need_dx:
                dx = dxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else dxp
                accumulate_grad(x, dx, fresh=True)
            return
        gmat = g.reshape(b, cout, ho * wo)
        grp = spec.groups
        coutg = cout // grp
        if grp == 1:
            if need_dw:
                cols = _im2col(xp, spec, ho, wo)
                dw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
                accumulate_grad(weight, dw.reshape(weight.shape), fresh=True)
            if need_dx:
                wmat = weight.data.reshape(cout, -1)
                dcols = np.matmul(wmat.T[None], gmat)
                dxp = _col2im(dcols, xp.shape, spec, ho, wo)
                dx = dxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else dxp
                accumulate_grad(x, dx, fresh=True)
        else:
            k = (cin // grp) * kh * kw
            gg = gmat.reshape(b, grp, coutg, ho * wo)
            if need_dw:
                cols = _im2col(xp, spec, ho, wo).reshape(b, grp, k, ho * wo)
                dw = np.matmul(gg, cols.transpose(0, 1, 3, 2)).sum(axis=0)
                accumulate_grad(weight, dw.reshape(weight.shape), fresh=True)
            if need_dx:
                wmat = weight.data.reshape(grp, coutg, k)
                dcols = np.matmul(wmat.transpose(0, 2, 1)[None], gg)
                dxp = _col2im(dcols.reshape(b, grp * k, ho * wo), xp.shape, spec, ho, wo)
                dx = dxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else dxp
                accumulate_grad(x, dx, fresh=True)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op("conv2d", inputs, res, bwd)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2/stride-2 max pooling; ties route the gradient to the first
    (row-major) window element."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even extents, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = (
        x.data.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
    )
    idx = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])

    def bwd(g):
        dwin = np.zeros((b, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        accumulate_grad(x, dx, fresh=True)

    return record_op("maxpool2d", (x,), out, bwd)


def _interp_matrix(n: int, scale: int, dtype) -> np.ndarray:
    """Half-pixel-centers linear interpolation weights, (n*scale, n)."""
    m = np.zeros((n * scale, n), dtype=dtype)
    for dst in range(n * scale):
        src = (dst + 0.5) / scale - 0.5
        src = min(max(src, 0.0), float(n - 1))
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        w1 = src - i0
        m[dst, i0] += 1.0 - w1
        m[dst, i1] += w1
    return m


_INTERP_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _interp(n: int, scale: int, dtype) -> np.ndarray:
    key = (n, scale, np.dtype(dtype).str)
    if key not in _INTERP_CACHE:
        _INTERP_CACHE[key] = _interp_matrix(n, scale, dtype)
    return _INTERP_CACHE[key]


def _sep_apply(mh: np.ndarray, mw: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y[b,c] = mh @ x[b,c] @ mw.T via two folded GEMMs."""
    b, c, h, w = x.shape
    oh, ow = mh.shape[0], mw.shape[0]
    t = np.matmul(x.reshape(b * c * h, w), mw.T).reshape(b * c, h, ow)
    y = np.tensordot(t, mh, axes=([1], [1]))  # (b*c, ow, oh)
    return np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(b, c, oh, ow)


def bilinear_upsample(x: Tensor, scale: int) -> Tensor:
    """Separable bilinear upsampling; backward is the exact transpose."""
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects (B,C,H,W), got {x.shape}")
    if int(scale) != scale or scale < 2:
        raise ShapeError(f"upsample scale must be an integer >= 2, got {scale}")
    scale = int(scale)
    _, _, h, w = x.shape
    mh = _interp(h, scale, x.data.dtype)
    mw = _interp(w, scale, x.data.dtype)
    out = Tensor(_sep_apply(mh, mw, x.data))

    def bwd(g):
        accumulate_grad(x, _sep_apply(mh.T, mw.T, g), fresh=True)

    return record_op("bilinear_upsample", (x,), out, bwd)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) spatial standardization with learned affine."""
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm expects (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    if h * w < 2:
        raise DegenerateStatisticsError(f"instance_norm over {h}x{w} spatial elements")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    n = h * w
    dt = x.data.dtype
    x2 = x.data.reshape(b * c, n)
    mu = x2.mean(axis=1)
    xc = x2 - mu[:, None]
    var = np.einsum("in,in->i", xc, xc) / dt.type(n)
    inv_std = 1.0 / np.sqrt(var + dt.type(eps))
    gamma_bc = np.tile(gamma.data, b)
    scale = (gamma_bc * inv_std)[:, None]
    out2 = xc * scale
    out2 += np.tile(beta.data, b)[:, None]
    out = Tensor(out2.reshape(x.shape))

    def bwd(g):
        g2 = g.reshape(b * c, n)
        if gamma.requires_grad:
            dgam = (np.einsum("in,in->i", g2, xc) * inv_std).reshape(b, c).sum(axis=0)
            accumulate_grad(gamma, dgam, fresh=True)
        if beta.requires_grad:
            accumulate_grad(beta, g2.sum(axis=1).reshape(b, c).sum(axis=0), fresh=True)
        if x.requires_grad:
            # dL/dx = inv/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
            dxhat = g2 * (gamma_bc[:, None])
            s1 = dxhat.sum(axis=1)
            s2 = np.einsum("in,in->i", dxhat, xc) * (inv_std * inv_std)
            np.multiply(dxhat, inv_std[:, None], out=dxhat)
            dxhat -= xc * ((inv_std * s2) / n)[:, None]
            dxhat -= ((inv_std * s1) / n)[:, None]
            accumulate_grad(x, dxhat.reshape(x.shape), fresh=True)

    return record_op("instance_norm", (x, gamma, beta), out, bwd)
