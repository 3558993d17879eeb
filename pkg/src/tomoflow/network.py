"""Trainable regularizer network with hand-written vector-Jacobian products.

A small encoder-decoder convolutional net, dimension-generic over 2D and 3D:
conv -> (optional instance norm) -> ReLU blocks, 2x average-pool downsampling,
nearest-neighbour 2x upsampling, encoder-decoder skip connections by channel
concatenation, and a final 1x1 projection.  The projection layer initializes
to exact zeros so an untrained network is the zero map.

Everything is plain numpy.  Convolutions gather the k^d shifted views of the
padded input into a patch matrix and reduce with one matmul; the VJPs are the
exact transposes of that linearization (patch-matrix products for the kernel
gradient, scatter of the transposed taps for the input gradient).  ReLU uses
the subgradient 0 at exactly 0.  Padding is zero ("same") by default; periodic
padding exists for the shift-equivariance test mode.

Parameters live in an explicit layer list and flatten to a single vector in a
fixed order (per conv: kernel, bias, then instance-norm scale and shift when
enabled), which is the order the optimizer and the checkpoint format use.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError, ShapeMismatchError
from .projector import Volume

_NORM_VAR_FLOOR = 1e-5

PARAMS_MAGIC = b"CTNP"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class NetArch:
    """Architecture of the regularizer network.

    n_levels is the encoder depth: n_levels - 1 pooled encoder stages plus a
    bottom stage.  Channel width doubles per level from base_channels.
    Spatial input sides must be divisible by 2^(n_levels - 1).
    """

    n_levels: int = 2
    base_channels: int = 4
    kernel_size: int = 3
    dims: int = 2
    instance_norm: bool = False

    def __post_init__(self):
        if not isinstance(self.n_levels, int) or self.n_levels < 1:
            raise ValueError(f"n_levels must be an integer >= 1, got {self.n_levels!r}")
        if not isinstance(self.base_channels, int) or self.base_channels < 1:
            raise ValueError(
                f"base_channels must be an integer >= 1, got {self.base_channels!r}"
            )
        if (
            not isinstance(self.kernel_size, int)
            or self.kernel_size < 1
            or self.kernel_size % 2 == 0
        ):
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size!r}")
        if self.dims not in (2, 3):
            raise ValueError(f"dims must be 2 or 3, got {self.dims!r}")

    @property
    def pool_factor(self) -> int:
        return 2 ** (self.n_levels - 1)


def _conv_plan(arch: NetArch) -> list[tuple[int, int, tuple[int, ...], bool]]:
    """Per-conv (c_in, c_out, kernel shape, is_projection) in forward order."""
    k = (arch.kernel_size,) * arch.dims
    width = lambda lvl: arch.base_channels * 2**lvl
    plan = []
    prev = 1
    for lvl in range(arch.n_levels - 1):
        plan.append((prev, width(lvl), k, False))
        prev = width(lvl)
    plan.append((prev, width(arch.n_levels - 1), k, False))
    cur = width(arch.n_levels - 1)
    for lvl in reversed(range(arch.n_levels - 1)):
        plan.append((cur + width(lvl), width(lvl), k, False))
        cur = width(lvl)
    plan.append((cur, 1, (1,) * arch.dims, True))
    return plan


@dataclass
class NetParams:
    """All trainable tensors of one network, in _conv_plan order."""

    arch: NetArch
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    norm_scales: list[np.ndarray] | None = None
    norm_shifts: list[np.ndarray] | None = None

    @property
    def n_params(self) -> int:
        total = sum(w.size for w in self.weights) + sum(b.size for b in self.biases)
        if self.norm_scales is not None:
            total += sum(s.size for s in self.norm_scales)
            total += sum(s.size for s in self.norm_shifts)
        return total

    def flatten(self) -> np.ndarray:
        """Single parameter vector; inverse of from_flat."""
        parts = []
        for i in range(len(self.weights)):
            parts.append(self.weights[i].ravel())
            parts.append(self.biases[i].ravel())
            if self.norm_scales is not None and i < len(self.norm_scales):
                parts.append(self.norm_scales[i].ravel())
                parts.append(self.norm_shifts[i].ravel())
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, arch: NetArch, vec: np.ndarray) -> "NetParams":
        plan = _conv_plan(arch)
        vec = np.asarray(vec, dtype=np.float64)
        needed = 0
        for c_in, c_out, k, is_proj in plan:
            needed += c_out * c_in * int(np.prod(k)) + c_out
            if arch.instance_norm and not is_proj:
                needed += 2 * c_out
        if vec.size != needed:
            raise ShapeMismatchError(
                f"parameter vector has {vec.size} entries, architecture needs {needed}"
            )
        weights, biases = [], []
        scales = [] if arch.instance_norm else None
        shifts = [] if arch.instance_norm else None
        pos = 0

        def take(shape):
            nonlocal pos
            size = int(np.prod(shape))
            out = vec[pos : pos + size].reshape(shape).copy()
            pos += size
            return out

        for c_in, c_out, k, is_proj in plan:
            weights.append(take((c_out, c_in) + k))
            biases.append(take((c_out,)))
            if arch.instance_norm and not is_proj:
                scales.append(take((c_out,)))
                shifts.append(take((c_out,)))
        return cls(arch, weights, biases, scales, shifts)

    def copy(self) -> "NetParams":
        return NetParams.from_flat(self.arch, self.flatten())


def init_params(arch: NetArch, seed: int) -> NetParams:
    """He-initialized hidden layers, exactly-zero final projection.

    Zero projection makes the untrained network the zero map, so it has no
    influence on the dynamics until training moves it.
    """
    rng = np.random.default_rng(seed)
    plan = _conv_plan(arch)
    weights, biases = [], []
    scales = [] if arch.instance_norm else None
    shifts = [] if arch.instance_norm else None
    for c_in, c_out, k, is_proj in plan:
        shape = (c_out, c_in) + k
        if is_proj:
            weights.append(np.zeros(shape))
        else:
            fan_in = c_in * int(np.prod(k))
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape))
            if arch.instance_norm:
                scales.append(np.ones(c_out))
                shifts.append(np.zeros(c_out))
        biases.append(np.zeros(c_out))
    return NetParams(arch, weights, biases, scales, shifts)


# ---------------------------------------------------------------------------
# layer primitives, dimension-generic over (channels, *spatial) arrays


def _pad_input(x: np.ndarray, k: tuple[int, ...], pad_mode: str) -> np.ndarray:
    if all(ki == 1 for ki in k):
        return x
    pads = [(0, 0)] + [(ki // 2, ki // 2) for ki in k]
    return np.pad(x, pads, mode="constant" if pad_mode == "zeros" else "wrap")


def _patch_matrix(xp: np.ndarray, k: tuple[int, ...], spatial: tuple[int, ...]):
    """Stack the k^d shifted views: (c_in * n_taps, prod(spatial))."""
    c_in = xp.shape[0]
    taps = list(np.ndindex(*k))
    stack = np.empty((c_in, len(taps)) + spatial)
    for ti, offs in enumerate(taps):
        sl = tuple(slice(o, o + s) for o, s in zip(offs, spatial))
        stack[:, ti] = xp[(slice(None),) + sl]
    return stack.reshape(c_in * len(taps), -1)


def _conv_forward(x, w, b, pad_mode):
    k = w.shape[2:]
    spatial = x.shape[1:]
    xp = _pad_input(x, k, pad_mode)
    patches = _patch_matrix(xp, k, spatial)
    c_out = w.shape[0]
    y = w.reshape(c_out, -1) @ patches + b[:, None]
    return y.reshape((c_out,) + spatial)


def _fold_pad_adjoint(gxp, k, spatial, pad_mode):
    """Adjoint of _pad_input: crop (zeros) or circular fold (periodic)."""
    if all(ki == 1 for ki in k):
        return gxp
    nd = len(spatial)
    if pad_mode == "zeros":
        sl = tuple(slice(ki // 2, ki // 2 + s) for ki, s in zip(k, spatial))
        return gxp[(slice(None),) + sl]
    # np.pad applies axes in order, so the adjoint folds in reverse order
    out = gxp
    for axis in reversed(range(nd)):
        p = k[axis] // 2
        s = spatial[axis]
        full = [slice(None)] * out.ndim
        core_sl, head_sl, tail_sl = list(full), list(full), list(full)
        core_sl[axis + 1] = slice(p, p + s)
        head_sl[axis + 1] = slice(0, p)
        tail_sl[axis + 1] = slice(p + s, p + s + p)
        core = out[tuple(core_sl)].copy()
        lead, trail = list(full[:]), list(full[:])
        lead[axis + 1] = slice(0, p)
        trail[axis + 1] = slice(s - p, s)
        core[tuple(trail)] += out[tuple(head_sl)]
        core[tuple(lead)] += out[tuple(tail_sl)]
        out = core
    return out


def _conv_vjp(gy, x, w, pad_mode):
    k = w.shape[2:]
    spatial = x.shape[1:]
    c_out, c_in = w.shape[0], w.shape[1]
    xp = _pad_input(x, k, pad_mode)
    patches = _patch_matrix(xp, k, spatial)
    gy2 = gy.reshape(c_out, -1)
    gb = gy2.sum(axis=1)
    gw = (gy2 @ patches.T).reshape(w.shape)
    spread = (w.reshape(c_out, -1).T @ gy2).reshape((c_in, -1) + spatial)
    gxp = np.zeros_like(xp)
    for ti, offs in enumerate(np.ndindex(*k)):
        sl = tuple(slice(o, o + s) for o, s in zip(offs, spatial))
        gxp[(slice(None),) + sl] += spread[:, ti]
    return _fold_pad_adjoint(gxp, k, spatial, pad_mode), gw, gb


def _avgpool_forward(x):
    c = x.shape[0]
    spatial = x.shape[1:]
    shape = (c,)
    for s in spatial:
        shape += (s // 2, 2)
    axes = tuple(range(2, 2 * len(spatial) + 1, 2))
    return x.reshape(shape).mean(axis=axes)


def _avgpool_vjp(gy, ndim_spatial):
    g = gy / (2**ndim_spatial)
    for axis in range(1, ndim_spatial + 1):
        g = np.repeat(g, 2, axis=axis)
    return g


def _upsample_forward(x):
    for axis in range(1, x.ndim):
        x = np.repeat(x, 2, axis=axis)
    return x


def _upsample_vjp(gy):
    c = gy.shape[0]
    spatial = gy.shape[1:]
    shape = (c,)
    for s in spatial:
        shape += (s // 2, 2)
    axes = tuple(range(2, 2 * len(spatial) + 1, 2))
    return gy.reshape(shape).sum(axis=axes)


def _instance_norm_forward(x, scale, shift):
    spatial_axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=spatial_axes, keepdims=True)
    var = x.var(axis=spatial_axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + _NORM_VAR_FLOOR)
    xhat = (x - mu) * inv
    bcast = (slice(None),) + (None,) * (x.ndim - 1)
    return scale[bcast] * xhat + shift[bcast], xhat, inv


def _instance_norm_vjp(gy, xhat, inv, scale):
    spatial_axes = tuple(range(1, gy.ndim))
    bcast = (slice(None),) + (None,) * (gy.ndim - 1)
    gshift = gy.sum(axis=spatial_axes)
    gscale = (gy * xhat).sum(axis=spatial_axes)
    gxhat = gy * scale[bcast]
    mean_g = gxhat.mean(axis=spatial_axes, keepdims=True)
    mean_gx = (gxhat * xhat).mean(axis=spatial_axes, keepdims=True)
    gx = inv * (gxhat - mean_g - xhat * mean_gx)
    return gx, gscale, gshift


# ---------------------------------------------------------------------------
# full network walk


def _check_input_shape(arch: NetArch, shape: tuple[int, ...]):
    if len(shape) != arch.dims:
        raise ShapeMismatchError(
            f"network expects {arch.dims}D input, got shape {shape}"
        )
    factor = arch.pool_factor
    for s in shape:
        if s % factor != 0:
            raise ShapeMismatchError(
                f"input sides must be divisible by {factor}, got shape {shape}"
            )


def net_apply_array(params: NetParams, x: np.ndarray, pad_mode: str = "zeros"):
    """Forward pass on a bare spatial array; returns (output, tape).

    The tape holds every intermediate needed by net_vjp_array.
    """
    arch = params.arch
    x = np.asarray(x, dtype=np.float64)
    _check_input_shape(arch, x.shape)
    use_norm = arch.instance_norm
    levels = arch.n_levels

    def block(h, idx):
        z = _conv_forward(h, params.weights[idx], params.biases[idx], pad_mode)
        cache = {"x": h}
        if use_norm:
            z, xhat, inv = _instance_norm_forward(
                z, params.norm_scales[idx], params.norm_shifts[idx]
            )
            cache["xhat"], cache["inv"] = xhat, inv
        cache["pre"] = z
        return np.maximum(z, 0.0), cache

    h = x[None]
    tape = {"blocks": [], "pad_mode": pad_mode}
    skips = []
    idx = 0
    for _ in range(levels - 1):
        h, cache = block(h, idx)
        tape["blocks"].append(cache)
        skips.append(h)
        h = _avgpool_forward(h)
        idx += 1
    h, cache = block(h, idx)
    tape["blocks"].append(cache)
    idx += 1
    for lvl in reversed(range(levels - 1)):
        h = _upsample_forward(h)
        h = np.concatenate([skips[lvl], h], axis=0)
        h, cache = block(h, idx)
        tape["blocks"].append(cache)
        idx += 1
    tape["proj_in"] = h
    y = _conv_forward(h, params.weights[idx], params.biases[idx], pad_mode)
    return y[0], tape


def net_vjp_array(params: NetParams, tape, gy: np.ndarray):
    """Backward pass from a forward tape: returns (grad NetParams, grad input)."""
    arch = params.arch
    pad_mode = tape["pad_mode"]
    use_norm = arch.instance_norm
    levels = arch.n_levels
    n_convs = len(params.weights)

    gws = [None] * n_convs
    gbs = [None] * n_convs
    gscales = [None] * (n_convs - 1) if use_norm else None
    gshifts = [None] * (n_convs - 1) if use_norm else None

    def block_backward(g, idx):
        cache = tape["blocks"][idx]
        g = g * (cache["pre"] > 0)
        if use_norm:
            g, gscale, gshift = _instance_norm_vjp(
                g, cache["xhat"], cache["inv"], params.norm_scales[idx]
            )
            gscales[idx] = gscale
            gshifts[idx] = gshift
        gx, gw, gb = _conv_vjp(g, cache["x"], params.weights[idx], pad_mode)
        gws[idx] = gw
        gbs[idx] = gb
        return gx

    idx = n_convs - 1
    g, gw, gb = _conv_vjp(
        gy[None], tape["proj_in"], params.weights[idx], pad_mode
    )
    gws[idx] = gw
    gbs[idx] = gb
    idx -= 1

    width = lambda lvl: arch.base_channels * 2**lvl
    skip_grads = []
    for lvl in range(levels - 1):
        g = block_backward(g, idx)
        idx -= 1
        skip_grads.append((lvl, g[: width(lvl)]))
        g = _upsample_vjp(g[width(lvl) :])
    g = block_backward(g, idx)
    idx -= 1
    skip_by_level = dict(skip_grads)
    for lvl in reversed(range(levels - 1)):
        g = _avgpool_vjp(g, arch.dims) + skip_by_level[lvl]
        g = block_backward(g, idx)
        idx -= 1

    grads = NetParams(arch, gws, gbs, gscales, gshifts)
    return grads, g[0]


def net_forward(params: NetParams, x: Volume, pad_mode: str = "zeros") -> Volume:
    """Apply the regularizer network to a volume."""
    y, _ = net_apply_array(params, x.values, pad_mode)
    return Volume(x.grid, y)


def net_vjp(
    params: NetParams, x: Volume, cotangent: Volume, pad_mode: str = "zeros"
) -> tuple[NetParams, Volume]:
    """Gradients of <cotangent, N(x)> with respect to parameters and input."""
    if cotangent.values.shape != x.values.shape:
        raise ShapeMismatchError(
            f"cotangent shape {cotangent.values.shape} does not match "
            f"input shape {x.values.shape}"
        )
    _, tape = net_apply_array(params, x.values, pad_mode)
    grads, gx = net_vjp_array(params, tape, cotangent.values)
    return grads, Volume(x.grid, gx)


# ---------------------------------------------------------------------------
# serialization: header (magic, version, arch as little-endian u32) + flat f64


def save_net_params(path, params: NetParams) -> None:
    """Write parameters as a single binary file."""
    arch = params.arch
    header = PARAMS_MAGIC + struct.pack(
        "<6I",
        PARAMS_VERSION,
        arch.n_levels,
        arch.base_channels,
        arch.kernel_size,
        arch.dims,
        1 if arch.instance_norm else 0,
    )
    payload = params.flatten().astype("<f8").tobytes()
    Path(path).write_bytes(header + payload)


def load_net_params(path) -> NetParams:
    raw = Path(path).read_bytes()
    if raw[:4] != PARAMS_MAGIC:
        raise DataFormatError(f"{path}: not a network parameter file")
    version, n_levels, base_channels, kernel_size, dims, norm = struct.unpack(
        "<6I", raw[4:28]
    )
    if version != PARAMS_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    arch = NetArch(
        n_levels=n_levels,
        base_channels=base_channels,
        kernel_size=kernel_size,
        dims=dims,
        instance_norm=bool(norm),
    )
    vec = np.frombuffer(raw[28:], dtype="<f8")
    expected = init_params(arch, 0).n_params
    if vec.size != expected:
        raise DataFormatError(
            f"{path}: payload has {vec.size} values, architecture needs {expected}"
        )
    return NetParams.from_flat(arch, vec)
