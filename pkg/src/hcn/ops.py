"""Forward and backward implementations of every network operation.

All ops are pure functions ``Tensor -> Tensor``.  Passing a
:class:`~hcn.tensor.GradTape` records a backward closure; with ``tape=None``
the op runs forward-only.  Convolutions use stride 1 with symmetric "same"
zero padding (odd kernels only); downsampling is done exclusively by max
pooling.  Layout for the 4-D ops is ``[batch, channels, frames, width]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import GradTape, Tensor


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution layer.

    Kernels must be odd in both axes so that "same" padding is symmetric.
    Stride is fixed at 1; pooling handles all downsampling.
    """

    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_h % 2 == 0:
            raise ValueError(f"kernel_h must be a positive odd int, got {self.kernel_h}")
        if self.kernel_w < 1 or self.kernel_w % 2 == 0:
            raise ValueError(f"kernel_w must be a positive odd int, got {self.kernel_w}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def padding(self) -> tuple[int, int]:
        return self.kernel_h // 2, self.kernel_w // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return self.out_channels, self.in_channels, self.kernel_h, self.kernel_w

    @property
    def bias_shape(self) -> tuple[int]:
        return (self.out_channels,)

    @property
    def param_count(self) -> int:
        o, c, kh, kw = self.weight_shape
        return o * c * kh * kw + o


def _should_record(tape: GradTape | None, *tensors: Tensor) -> bool:
    return tape is not None and any(t.requires_grad for t in tensors)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, tape: GradTape | None = None) -> Tensor:
    """Stride-1 cross-correlation with symmetric same padding.

    ``x`` is ``[B, C_in, H, W]``, ``weight`` is ``[C_out, C_in, kH, kW]``
    (odd kernels), ``bias`` is ``[C_out]``.  Output spatial extents equal the
    input's.
    """
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [B, C, H, W], got shape {xd.shape}")
    if wd.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D [C_out, C_in, kH, kW], got shape {wd.shape}")
    cout, cin, kh, kw = wd.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernels must be odd, got {kh}x{kw}")
    if xd.shape[1] != cin:
        raise ShapeError(
            f"channel axis mismatch: input has {xd.shape[1]} channels, weight expects {cin}"
        )
    if bd.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bd.shape}")

    b, _, h, w = xd.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # im2col: one GEMM per forward call.  Overflow is not a warning here; the
    # Tensor constructor turns non-finite values into an error.
    with np.errstate(over="ignore", invalid="ignore"):
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # [B, C, H, W, kh, kw]
        cols_m = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, cin * kh * kw)
        out_m = cols_m @ wd.reshape(cout, -1).T
        out = out_m.reshape(b, h, w, cout).transpose(0, 3, 1, 2) + bd[None, :, None, None]
    result = Tensor(out)

    if _should_record(tape, x, weight, bias):
        result.requires_grad = True

        def _backward():
            g = result.grad
            if g is None:
                return
            if bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if weight.requires_grad:
                g_m = g.transpose(0, 2, 3, 1).reshape(b * h * w, cout)
                gw = (g_m.T @ cols_m).reshape(cout, cin, kh, kw)
                weight.accumulate_grad(gw)
            if x.requires_grad:
                # grad wrt input: correlate the padded output gradient with the
                # spatially flipped kernel, in/out channels swapped
                gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
                gcols = sliding_window_view(gp, (kh, kw), axis=(2, 3))
                gcols_m = gcols.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, cout * kh * kw)
                w_flip = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
                gx = (gcols_m @ w_flip.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)
                x.accumulate_grad(gx)

        tape.record(_backward)
    return result


def maxpool2d(x: Tensor, window: tuple[int, int], tape: GradTape | None = None) -> Tensor:
    """Max pooling with stride equal to the window; trailing remainder dropped.

    Backward routes the gradient to the first maximal element of each window
    in row-major order.
    """
    wh, ww = window
    if wh < 1 or ww < 1:
        raise ValueError(f"pool window must be positive, got {window}")
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2d input must be 4-D, got shape {xd.shape}")
    b, c, h, w = xd.shape
    if wh > h or ww > w:
        raise ShapeError(
            f"pool window {window} larger than spatial extents ({h}, {w})"
        )
    h2, w2 = h // wh, w // ww
    cropped = xd[:, :, : h2 * wh, : w2 * ww]
    # [..., wh*ww] with window elements in row-major order so argmax ties
    # resolve to the first element
    win = cropped.reshape(b, c, h2, wh, w2, ww).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h2, w2, wh * ww)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    result = Tensor(out)

    if _should_record(tape, x):
        result.requires_grad = True

        def _backward():
            g = result.grad
            if g is None or not x.requires_grad:
                return
            gx = np.zeros_like(xd)
            bi, ci, hi, wi = np.indices(idx.shape)
            rows = hi * wh + idx // ww
            cols = wi * ww + idx % ww
            np.add.at(gx, (bi, ci, rows, cols), g)
            x.accumulate_grad(gx)

        tape.record(_backward)
    return result


def permute(x: Tensor, order: tuple[int, ...], tape: GradTape | None = None) -> Tensor:
    """Reorder axes; backward permutes by the inverse order."""
    order = tuple(order)
    if sorted(order) != list(range(x.ndim)):
        raise ValueError(f"order {order} is not a permutation of axes 0..{x.ndim - 1}")
    result = Tensor(np.ascontiguousarray(x.data.transpose(order)))

    if _should_record(tape, x):
        result.requires_grad = True
        inverse = tuple(np.argsort(order))

        def _backward():
            g = result.grad
            if g is None or not x.requires_grad:
                return
            x.accumulate_grad(np.ascontiguousarray(g.transpose(inverse)))

        tape.record(_backward)
    return result


def concat_channels(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """Concatenate along axis 1; ``a`` occupies the leading channel block."""
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.ndim < 2:
        raise ShapeError(f"rank mismatch: {ad.shape} vs {bd.shape}")
    for axis in range(ad.ndim):
        if axis != 1 and ad.shape[axis] != bd.shape[axis]:
            raise ShapeError(
                f"axis {axis} mismatch: {ad.shape[axis]} vs {bd.shape[axis]} "
                f"(only the channel axis may differ)"
            )
    ca = ad.shape[1]
    result = Tensor(np.concatenate([ad, bd], axis=1))

    if _should_record(tape, a, b):
        result.requires_grad = True

        def _backward():
            g = result.grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(np.ascontiguousarray(g[:, :ca]))
            if b.requires_grad:
                b.accumulate_grad(np.ascontiguousarray(g[:, ca:]))

        tape.record(_backward)
    return result


def relu(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """max(0, x); subgradient at exactly 0 is 0."""
    result = Tensor(np.maximum(x.data, 0.0))

    if _should_record(tape, x):
        result.requires_grad = True
        mask = x.data > 0

        def _backward():
            g = result.grad
            if g is None or not x.requires_grad:
                return
            x.accumulate_grad(g * mask)

        tape.record(_backward)
    return result


def dense(x: Tensor, weight: Tensor, bias: Tensor, tape: GradTape | None = None) -> Tensor:
    """Affine map: ``[B, F_in] @ weight.T + bias`` with weight ``[F_out, F_in]``."""
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 2:
        raise ShapeError(f"dense input must be 2-D [B, F_in], got shape {xd.shape}")
    fout, fin = wd.shape
    if xd.shape[1] != fin:
        raise ShapeError(
            f"feature axis mismatch: input has {xd.shape[1]} features, weight expects {fin}"
        )
    if bd.shape != (fout,):
        raise ShapeError(f"bias must have shape ({fout},), got {bd.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = xd @ wd.T + bd
    result = Tensor(out)

    if _should_record(tape, x, weight, bias):
        result.requires_grad = True

        def _backward():
            g = result.grad
            if g is None:
                return
            if bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=0))
            if weight.requires_grad:
                weight.accumulate_grad(g.T @ xd)
            if x.requires_grad:
                x.accumulate_grad(g @ wd)

        tape.record(_backward)
    return result


def dropout(
    x: Tensor,
    ratio: float,
    mode: str,
    rng: np.random.Generator | None = None,
    tape: GradTape | None = None,
) -> Tensor:
    """Inverted dropout: train mode zeroes with probability ``ratio`` and
    rescales survivors by 1/(1-ratio); eval mode is the identity."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or ratio == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout requires an explicit rng")
    keep = rng.random(x.shape) >= ratio
    scale = 1.0 / (1.0 - ratio)
    result = Tensor(x.data * keep * scale)

    if _should_record(tape, x):
        result.requires_grad = True

        def _backward():
            g = result.grad
            if g is None or not x.requires_grad:
                return
            x.accumulate_grad(g * keep * scale)

        tape.record(_backward)
    return result


def reshape(x: Tensor, shape: tuple[int, ...], tape: GradTape | None = None) -> Tensor:
    result = Tensor(x.data.reshape(shape).copy())

    if _should_record(tape, x):
        result.requires_grad = True
        original = x.data.shape

        def _backward():
            g = result.grad
            if g is None or not x.requires_grad:
                return
            x.accumulate_grad(g.reshape(original))

        tape.record(_backward)
    return result


def flatten(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """Collapse all axes after the batch axis."""
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:], dtype=np.int64))), tape)


def add(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    result = Tensor(a.data + b.data)

    if _should_record(tape, a, b):
        result.requires_grad = True

        def _backward():
            g = result.grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)

        tape.record(_backward)
    return result


def scale(x: Tensor, factor: float, tape: GradTape | None = None) -> Tensor:
    result = Tensor(x.data * factor)

    if _should_record(tape, x):
        result.requires_grad = True

        def _backward():
            g = result.grad
            if g is None or not x.requires_grad:
                return
            x.accumulate_grad(g * factor)

        tape.record(_backward)
    return result


def maximum(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """Element-wise max; on ties the gradient routes to ``a`` (the earlier input)."""
    if a.shape != b.shape:
        raise ShapeError(f"maximum shape mismatch: {a.shape} vs {b.shape}")
    take_b = b.data > a.data
    result = Tensor(np.where(take_b, b.data, a.data))

    if _should_record(tape, a, b):
        result.requires_grad = True

        def _backward():
            g = result.grad
            if g is None:
                return
            if a.requires_grad:
                a.accumulate_grad(g * ~take_b)
            if b.requires_grad:
                b.accumulate_grad(g * take_b)

        tape.record(_backward)
    return result


def masked_maximum(acc: Tensor, update: Tensor, valid: np.ndarray, tape: GradTape | None = None) -> Tensor:
    """Row-masked element-wise max: rows of ``update`` with ``valid`` False are ignored.

    ``valid`` is a boolean vector over the leading (batch) axis.  Used to fold
    variable person counts inside one batch.
    """
    if acc.shape != update.shape:
        raise ShapeError(f"masked_maximum shape mismatch: {acc.shape} vs {update.shape}")
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (acc.shape[0],):
        raise ShapeError(f"valid mask must have shape ({acc.shape[0]},), got {valid.shape}")
    mask = valid.reshape((-1,) + (1,) * (acc.ndim - 1))
    take_b = (update.data > acc.data) & mask
    result = Tensor(np.where(take_b, update.data, acc.data))

    if _should_record(tape, acc, update):
        result.requires_grad = True

        def _backward():
            g = result.grad
            if g is None:
                return
            if acc.requires_grad:
                acc.accumulate_grad(g * ~take_b)
            if update.requires_grad:
                update.accumulate_grad(g * take_b)

        tape.record(_backward)
    return result


def masked_mean_stack(
    tensors: list[Tensor], counts: np.ndarray, tape: GradTape | None = None
) -> Tensor:
    """Mean over a list of equally shaped tensors, counting only the first
    ``counts[b]`` entries for each row ``b``.

    The addends are sorted element-wise before summation, so the result is
    bit-identical under any permutation of the valid entries; each valid
    entry's gradient is grad/count.
    """
    if not tensors:
        raise ShapeError("masked_mean_stack needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack shape mismatch: {t.shape} vs {shape}")
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (shape[0],) or counts.min() < 1 or counts.max() > len(tensors):
        raise ShapeError(
            f"counts must be [{shape[0]}] ints in [1, {len(tensors)}], got {counts!r}"
        )
    expand = (-1,) + (1,) * (len(shape) - 1)
    masks = [
        (counts > i).reshape(expand).astype(tensors[0].dtype) for i in range(len(tensors))
    ]
    stacked = np.stack([t.data * m for t, m in zip(tensors, masks)])
    total = np.sort(stacked, axis=0).sum(axis=0)
    inv_counts = (1.0 / counts).reshape(expand)
    result = Tensor(total * inv_counts)

    if _should_record(tape, *tensors):
        result.requires_grad = True

        def _backward():
            g = result.grad
            if g is None:
                return
            shared = g * inv_counts
            for t, m in zip(tensors, masks):
                if t.requires_grad:
                    t.accumulate_grad(shared * m)

        tape.record(_backward)
    return result


def scale_rows(x: Tensor, factors: np.ndarray, tape: GradTape | None = None) -> Tensor:
    """Multiply each row (leading-axis slice) by its own scalar factor."""
    factors = np.asarray(factors, dtype=x.dtype)
    if factors.shape != (x.shape[0],):
        raise ShapeError(f"factors must have shape ({x.shape[0]},), got {factors.shape}")
    f = factors.reshape((-1,) + (1,) * (x.ndim - 1))
    result = Tensor(x.data * f)

    if _should_record(tape, x):
        result.requires_grad = True

        def _backward():
            g = result.grad
            if g is None or not x.requires_grad:
                return
            x.accumulate_grad(g * f)

        tape.record(_backward)
    return result


def _resample_positions(length: int, target: int) -> np.ndarray:
    """Endpoint-aligned sample positions for linear interpolation along frames."""
    if target == 1 or length == 1:
        return np.zeros(target, dtype=np.float64)
    return np.arange(target, dtype=np.float64) * ((length - 1) / (target - 1))


def resize_temporal_bilinear(x: Tensor, target_len: int, tape: GradTape | None = None) -> Tensor:
    """Linear resampling along axis 0 with endpoints aligned; other axes untouched."""
    if target_len < 1:
        raise ValueError(f"target length must be >= 1, got {target_len}")
    xd = x.data
    if xd.ndim < 1 or xd.shape[0] < 1:
        raise ShapeError(f"input must have a non-empty frame axis, got shape {xd.shape}")
    t = xd.shape[0]
    pos = _resample_positions(t, target_len)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, t - 1)
    w1 = (pos - i0).reshape((-1,) + (1,) * (xd.ndim - 1))
    out = xd[i0] * (1.0 - w1) + xd[i1] * w1
    result = Tensor(out)

    if _should_record(tape, x):
        result.requires_grad = True

        def _backward():
            g = result.grad
            if g is None or not x.requires_grad:
                return
            gx = np.zeros_like(xd)
            np.add.at(gx, i0, g * (1.0 - w1))
            np.add.at(gx, i1, g * w1)
            x.accumulate_grad(gx)

        tape.record(_backward)
    return result


def crop_resize_temporal(
    features: Tensor,
    spans: np.ndarray,
    out_len: int,
    tape: GradTape | None = None,
) -> Tensor:
    """Crop-and-resize spans of a ``[C, T, W]`` feature map along the time axis.

    ``spans`` is ``[n, 2]`` of (start, end) in feature-map coordinates;
    each span is resampled to ``out_len`` bin centers with linear
    interpolation and edge clamping, giving ``[n, C, out_len, W]``.  A span
    covering the whole map with ``out_len == T`` is the identity.
    Differentiable with respect to ``features`` (not the spans).
    """
    fd = features.data
    if fd.ndim != 3:
        raise ShapeError(f"features must be [C, T, W], got shape {fd.shape}")
    spans = np.asarray(spans, dtype=np.float64)
    if spans.ndim != 2 or spans.shape[1] != 2:
        raise ShapeError(f"spans must be [n, 2], got shape {spans.shape}")
    if out_len < 1:
        raise ValueError(f"out_len must be >= 1, got {out_len}")
    c, t, w = fd.shape
    starts, ends = spans[:, 0], spans[:, 1]
    if np.any(ends <= starts):
        raise ValueError("every span must satisfy end > start")
    if np.any(ends <= 0) or np.any(starts >= t):
        raise ValueError(f"span fully outside the feature map of length {t}")
    lengths = ends - starts
    bins = (np.arange(out_len, dtype=np.float64) + 0.5) / out_len  # [L]
    pos = starts[:, None] + bins[None, :] * lengths[:, None] - 0.5  # [n, L]
    pos = np.clip(pos, 0.0, t - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, t - 1)
    w1 = pos - i0  # [n, L]
    gathered0 = fd[:, i0, :]  # [C, n, L, W]
    gathered1 = fd[:, i1, :]
    out = gathered0 * (1.0 - w1)[None, :, :, None] + gathered1 * w1[None, :, :, None]
    result = Tensor(out.transpose(1, 0, 2, 3).copy())  # [n, C, L, W]

    if _should_record(tape, features):
        result.requires_grad = True

        def _backward():
            g = result.grad
            if g is None or not features.requires_grad:
                return
            gf = np.zeros_like(fd)
            gc = g.transpose(1, 0, 2, 3)  # [C, n, L, W]
            # scatter per span to keep the index bookkeeping simple
            for k in range(spans.shape[0]):
                np.add.at(gf, (slice(None), i0[k], slice(None)), gc[:, k] * (1.0 - w1)[k][None, :, None])
                np.add.at(gf, (slice(None), i1[k], slice(None)), gc[:, k] * w1[k][None, :, None])
            features.accumulate_grad(gf)

        tape.record(_backward)
    return result
