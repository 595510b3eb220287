"""Feed-forward network over SH coefficient cubes.

Architecture (for radius L, M = 2L+1, P channels): three branches of
3-D composite convolution + ReLU + single-axis max pooling (one branch per
spatial axis), 2-D composite convolution on each branch with pooling along
both remaining axes (six streams), six 1-D composite convolutions pooled
to P-vectors, pairwise fully connected fusion (2P -> P, pairing the two
streams of each branch), a merge layer (3P -> P, dropout applied to its
input during training), and a linear head (P -> 2) with a two-way softmax
whose first output is the per-voxel score in [0, 1].

All passes are float64 and exactly reproducible; the backward pass is a
hand-derived reverse-mode chain rule validated against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .kernels import conv_apply, conv_input_grad, conv_weight_grads, get_meta, pack_input
from .sh import ShCube, band_degrees, num_coeffs

WIRING_SHARED = "shared"
WIRING_PER_DIRECTION = "per_direction"


@dataclass(frozen=True)
class NetworkConfig:
    radius: int = 1
    n_max: int = 6
    kernel_size: int = 3
    layer2_wiring: str = WIRING_SHARED
    seed: int = 0

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd")
        num_coeffs(self.n_max)
        if self.layer2_wiring not in (WIRING_SHARED, WIRING_PER_DIRECTION):
            raise ValueError(f"unknown layer2_wiring {self.layer2_wiring!r}")

    @property
    def m(self) -> int:
        return 2 * self.radius + 1

    @property
    def p(self) -> int:
        return num_coeffs(self.n_max)

    @property
    def n_layer2_units(self) -> int:
        return 3 if self.layer2_wiring == WIRING_SHARED else 6

    @property
    def fcl_widths(self):
        """(in, out) of the fusion and merge fully connected layers."""
        return ((2 * self.p, self.p), (3 * self.p, self.p))


def _bank_weights(n_max: int, j: int, ndim: int) -> int:
    return sum((2 * n + 1) ** 2 for n in band_degrees(n_max)) * j ** ndim


@lru_cache(maxsize=None)
def param_layout(config: NetworkConfig):
    """Ordered (name, shape, offset) table defining the flat parameter vector."""
    p = config.p
    j = config.kernel_size
    entries = []
    offset = 0

    def add(name, shape):
        nonlocal offset
        size = int(np.prod(shape))
        entries.append((name, shape, offset))
        offset += size

    for br in range(3):
        add(f"layer1/{br}/w", (_bank_weights(config.n_max, j, 3),))
        add(f"layer1/{br}/b", (p,))
    for u in range(config.n_layer2_units):
        add(f"layer2/{u}/w", (_bank_weights(config.n_max, j, 2),))
        add(f"layer2/{u}/b", (p,))
    for s in range(6):
        add(f"layer3/{s}/w", (_bank_weights(config.n_max, j, 1),))
        add(f"layer3/{s}/b", (p,))
    for i in range(3):
        add(f"fuse/{i}/w", (p, 2 * p))
        add(f"fuse/{i}/b", (p,))
    add("merge/w", (p, 3 * p))
    add("merge/b", (p,))
    add("head/w", (2, p))
    add("head/b", (2,))
    return tuple(entries), offset


@dataclass
class NetworkParams:
    """All trainable parameters as one flat float64 vector plus views."""

    config: NetworkConfig
    flat: np.ndarray
    version: int = 0

    def __post_init__(self):
        _, total = param_layout(self.config)
        if self.flat.shape != (total,):
            raise ValueError(f"expected {total} parameters, got {self.flat.shape}")
        self._views = {}
        for name, shape, offset in param_layout(self.config)[0]:
            size = int(np.prod(shape))
            self._views[name] = self.flat[offset : offset + size].reshape(shape)

    def view(self, name: str) -> np.ndarray:
        return self._views[name]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, self.flat.copy(), self.version)


@dataclass
class ParamCount:
    total: int
    per_layer: dict


def param_count(config: NetworkConfig) -> ParamCount:
    """Deterministic parameter audit with a per-layer breakdown."""
    p = config.p
    j = config.kernel_size
    per_layer = {
        "layer1": 3 * (_bank_weights(config.n_max, j, 3) + p),
        "layer2": config.n_layer2_units * (_bank_weights(config.n_max, j, 2) + p),
        "layer3": 6 * (_bank_weights(config.n_max, j, 1) + p),
        "fuse": 3 * (2 * p * p + p),
        "merge": 3 * p * p + p,
        "head": 2 * p + 2,
    }
    total = sum(per_layer.values())
    assert total == param_layout(config)[1]
    return ParamCount(total, per_layer)


def init_params(config: NetworkConfig, seed: int | None = None) -> NetworkParams:
    """He-style initialization: N(0, 2/fan_in) weights, zero biases."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    entries, total = param_layout(config)
    flat = np.zeros(total)
    params = NetworkParams(config, flat)
    j = config.kernel_size
    for name, shape, _ in entries:
        view = params.view(name)
        if name.endswith("/b"):
            continue
        if name.startswith(("layer1", "layer2", "layer3")):
            ndim = {"layer1": 3, "layer2": 2, "layer3": 1}[name.split("/")[0]]
            taps = j ** ndim
            pos = 0
            for n in band_degrees(config.n_max):
                q = 2 * n + 1
                size = q * q * taps
                std = np.sqrt(2.0 / (q * taps))
                view[pos : pos + size] = rng.normal(0.0, std, size)
                pos += size
        else:
            fan_in = shape[1]
            view[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    return params


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------


def relu(x):
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def fcl(v: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map W v + b."""
    v = np.asarray(v, dtype=np.float64)
    if w.shape[1] != v.shape[-1] or w.shape[0] != b.shape[0]:
        raise ValueError("fcl shape mismatch")
    return v @ w.T + b


def softmax2(alpha: float, beta: float) -> float:
    """Two-way softmax e^a / (e^a + e^b), max-shifted for stability."""
    m = max(alpha, beta)
    ea = np.exp(alpha - m)
    eb = np.exp(beta - m)
    return float(ea / (ea + eb))


_AXIS_NAMES = {"x": 0, "y": 1, "z": 2, 0: 0, 1: 1, 2: 2}


def _pool(a: np.ndarray, axis: int):
    idx = np.argmax(a, axis=axis)  # ties resolve to the lowest index
    return a.max(axis=axis), idx


def _unpool(g: np.ndarray, idx: np.ndarray, axis: int, size: int) -> np.ndarray:
    shape = list(g.shape)
    shape.insert(axis, size)
    out = np.zeros(shape)
    np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
    return out


def pool3(c: np.ndarray, axis) -> np.ndarray:
    """Max over one spatial axis of an (M, M, M, P) array."""
    ax = _AXIS_NAMES[axis]
    if c.ndim != 4:
        raise ValueError("pool3 expects an (M, M, M, P) array")
    return _pool(np.asarray(c, dtype=np.float64), ax)[0]


def pool2(c: np.ndarray, axis) -> np.ndarray:
    """Max over one spatial axis of an (M, M, P) array."""
    ax = _AXIS_NAMES[axis]
    if c.ndim != 3 or ax > 1:
        raise ValueError("pool2 expects an (M, M, P) array and axis 0 or 1")
    return _pool(np.asarray(c, dtype=np.float64), ax)[0]


def pool1(c: np.ndarray) -> np.ndarray:
    """Collapse the spatial dimension of an (M, P) array to a P-vector."""
    if c.ndim != 2:
        raise ValueError("pool1 expects an (M, P) array")
    return _pool(np.asarray(c, dtype=np.float64), 0)[0]


# ---------------------------------------------------------------------------
# filter banks as a public type (tests, docs); the network keeps them flat
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompositeFilterBank:
    """Per-band spatial filter stacks w[n][l, k, taps...]."""

    filters: tuple  # one (q, q, J, ..) array per even band

    @property
    def ndim(self) -> int:
        return self.filters[0].ndim - 2

    @property
    def n_max(self) -> int:
        return 2 * (len(self.filters) - 1)

    def to_flat(self) -> np.ndarray:
        return np.concatenate([np.asarray(f, dtype=np.float64).ravel() for f in self.filters])


def bank_from_flat(wflat: np.ndarray, n_max: int, j: int, ndim: int) -> CompositeFilterBank:
    filters = []
    pos = 0
    taps = j ** ndim
    for n in band_degrees(n_max):
        q = 2 * n + 1
        size = q * q * taps
        filters.append(wflat[pos : pos + size].reshape((q, q) + (j,) * ndim).copy())
        pos += size
    return CompositeFilterBank(tuple(filters))


def delta_bank(n_max: int, j: int, ndim: int, gains=None) -> CompositeFilterBank:
    """Bank whose filters are center-tap deltas times a per-band gain.

    With unit gains the composite convolution is the identity; with gains
    xi_n it reduces to the zonal convolution applied at every voxel.
    """
    if gains is None:
        gains = np.ones(len(band_degrees(n_max)))
    center = (j // 2,) * ndim
    filters = []
    for bi, n in enumerate(band_degrees(n_max)):
        q = 2 * n + 1
        f = np.zeros((q, q) + (j,) * ndim)
        for l in range(q):
            f[(l, l) + center] = gains[bi]
        filters.append(f)
    return CompositeFilterBank(tuple(filters))


def composite_conv(c_in: np.ndarray, bank: CompositeFilterBank, bias: np.ndarray) -> np.ndarray:
    """Band-wise spatial convolution of a single (spatial..., P) array."""
    c_in = np.asarray(c_in, dtype=np.float64)
    ndim = bank.ndim
    if c_in.ndim != ndim + 1:
        raise ValueError(f"input has {c_in.ndim - 1} spatial dims, bank expects {ndim}")
    p = num_coeffs(bank.n_max)
    if c_in.shape[-1] != p:
        raise ValueError("channel count does not match the bank's n_max")
    m = c_in.shape[0]
    if any(s != m for s in c_in.shape[:-1]):
        raise ValueError("spatial dimensions must be equal")
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (p,):
        raise ValueError("bias length must equal the channel count")
    j = bank.filters[0].shape[-1]
    meta = get_meta(m, ndim, j, bank.n_max)
    pack = pack_input(c_in.reshape(1, -1, p), meta)
    return conv_apply(pack, bank.to_flat(), bias).reshape(c_in.shape)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    """Everything needed to replay the forward pass in reverse."""

    params_version: int
    x_shape: tuple
    pack1: object = None                          # shared input pack of the three branches
    l1: list = field(default_factory=list)        # (z1 spatial, idx1) per branch
    pack2: list = field(default_factory=list)     # input pack per branch
    l2: list = field(default_factory=list)        # z2 spatial per conv unit
    l2_idx: list = field(default_factory=list)    # idx2 per stream
    pack3: list = field(default_factory=list)     # input pack per stream
    l3: list = field(default_factory=list)        # (z3, idx3) per stream
    fuse: list = field(default_factory=list)      # (v, z4) per pair
    merge_in: np.ndarray | None = None            # u after dropout
    dropout_mask: np.ndarray | None = None
    z5: np.ndarray | None = None
    a5: np.ndarray | None = None
    probs: np.ndarray | None = None
    gamma: np.ndarray | None = None


def _metas(config: NetworkConfig):
    j = config.kernel_size
    return (
        get_meta(config.m, 3, j, config.n_max),
        get_meta(config.m, 2, j, config.n_max),
        get_meta(config.m, 1, j, config.n_max),
    )


def forward_batch(
    params: NetworkParams,
    x: np.ndarray,
    keep_prob: float = 1.0,
    dropout_rng=None,
    dropout_mask: np.ndarray | None = None,
):
    """Run the network on a batch (B, M, M, M, P); returns (gamma, cache).

    Dropout is applied to the merge-layer input only when a mask is active:
    either an explicit ``dropout_mask`` or inverted-dropout sampling from
    ``dropout_rng`` with ``keep_prob`` < 1.
    """
    cfg = params.config
    m, p = cfg.m, cfg.p
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5 or x.shape[1:] != (m, m, m, p):
        raise ValueError(f"expected input (B, {m}, {m}, {m}, {p}), got {x.shape}")
    b = x.shape[0]
    meta3, meta2, meta1 = _metas(cfg)
    cache = ForwardCache(params_version=params.version, x_shape=x.shape)

    streams = []
    cache.pack1 = pack_input(x.reshape(b, -1, p), meta3)
    for br in range(3):
        out = conv_apply(cache.pack1, params.view(f"layer1/{br}/w"), params.view(f"layer1/{br}/b"))
        z1 = out.reshape(b, m, m, m, p)
        a1 = np.maximum(z1, 0.0)
        p1, idx1 = _pool(a1, 1 + br)
        cache.l1.append((z1, idx1))
        pack2 = pack_input(p1.reshape(b, -1, p), meta2)
        cache.pack2.append(pack2)
        if cfg.layer2_wiring == WIRING_SHARED:
            z2 = conv_apply(pack2, params.view(f"layer2/{br}/w"), params.view(f"layer2/{br}/b")).reshape(b, m, m, p)
            a2 = np.maximum(z2, 0.0)
            cache.l2.append(z2)
            for di in range(2):
                p2, idx2 = _pool(a2, 1 + di)
                cache.l2_idx.append(idx2)
                streams.append(p2)
        else:
            for di in range(2):
                u = 2 * br + di
                z2 = conv_apply(pack2, params.view(f"layer2/{u}/w"), params.view(f"layer2/{u}/b")).reshape(b, m, m, p)
                a2 = np.maximum(z2, 0.0)
                cache.l2.append(z2)
                p2, idx2 = _pool(a2, 1 + di)
                cache.l2_idx.append(idx2)
                streams.append(p2)

    p3s = []
    for s, p2 in enumerate(streams):
        pack3 = pack_input(p2, meta1)
        cache.pack3.append(pack3)
        z3 = conv_apply(pack3, params.view(f"layer3/{s}/w"), params.view(f"layer3/{s}/b"))  # (B, M, P)
        a3 = np.maximum(z3, 0.0)
        p3, idx3 = _pool(a3, 1)
        cache.l3.append((z3, idx3))
        p3s.append(p3)

    a4s = []
    for i in range(3):
        v = np.concatenate([p3s[2 * i], p3s[2 * i + 1]], axis=1)
        z4 = v @ params.view(f"fuse/{i}/w").T + params.view(f"fuse/{i}/b")
        cache.fuse.append((v, z4))
        a4s.append(np.maximum(z4, 0.0))

    u = np.concatenate(a4s, axis=1)  # (B, 3P)
    if dropout_mask is not None:
        mask = np.asarray(dropout_mask, dtype=np.float64)
        if mask.shape != u.shape:
            raise ValueError("dropout mask shape mismatch")
    elif dropout_rng is not None and keep_prob < 1.0:
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError("keep_prob must be in (0, 1]")
        mask = (dropout_rng.random(u.shape) < keep_prob) / keep_prob
    else:
        mask = None
    cache.dropout_mask = mask
    ud = u * mask if mask is not None else u
    cache.merge_in = ud

    z5 = ud @ params.view("merge/w").T + params.view("merge/b")
    a5 = np.maximum(z5, 0.0)
    cache.z5, cache.a5 = z5, a5

    z6 = a5 @ params.view("head/w").T + params.view("head/b")
    zmax = z6.max(axis=1, keepdims=True)
    ez = np.exp(z6 - zmax)
    probs = ez / ez.sum(axis=1, keepdims=True)
    cache.probs = probs
    cache.gamma = probs[:, 0]
    return cache.gamma, cache


def backward_batch(params: NetworkParams, cache: ForwardCache, targets: np.ndarray, mean: bool = True):
    """Gradient of the (mean) cross-entropy over the cached batch.

    Fused softmax + cross-entropy head; max-pool routes to the recorded
    argmax; ReLU gates on the sign of the cached pre-activations.
    """
    if cache.params_version != params.version:
        raise ValueError("stale forward cache: parameters changed since the forward pass")
    cfg = params.config
    m, p = cfg.m, cfg.p
    b = cache.x_shape[0]
    targets = np.asarray(targets, dtype=np.float64).reshape(b)
    meta3, meta2, meta1 = _metas(cfg)
    _, total = param_layout(cfg)
    grads = np.zeros(total)
    gview = NetworkParams(cfg, grads)

    onehot = np.column_stack([targets, 1.0 - targets])
    dz6 = (cache.probs - onehot) * (1.0 / b if mean else 1.0)

    gview.view("head/w")[...] = dz6.T @ cache.a5
    gview.view("head/b")[...] = dz6.sum(axis=0)
    da5 = dz6 @ params.view("head/w")

    dz5 = da5 * (cache.z5 > 0)
    gview.view("merge/w")[...] = dz5.T @ cache.merge_in
    gview.view("merge/b")[...] = dz5.sum(axis=0)
    dud = dz5 @ params.view("merge/w")
    du = dud * cache.dropout_mask if cache.dropout_mask is not None else dud

    dp3 = [None] * 6
    for i in range(3):
        v, z4 = cache.fuse[i]
        dz4 = du[:, i * p : (i + 1) * p] * (z4 > 0)
        gview.view(f"fuse/{i}/w")[...] = dz4.T @ v
        gview.view(f"fuse/{i}/b")[...] = dz4.sum(axis=0)
        dv = dz4 @ params.view(f"fuse/{i}/w")
        dp3[2 * i] = dv[:, :p]
        dp3[2 * i + 1] = dv[:, p:]

    dp2 = [None] * 6
    for s in range(6):
        z3, idx3 = cache.l3[s]
        da3 = _unpool(dp3[s], idx3, 1, m)
        dz3 = da3 * (z3 > 0)
        gw, gb = conv_weight_grads(cache.pack3[s], dz3)
        gview.view(f"layer3/{s}/w")[...] = gw
        gview.view(f"layer3/{s}/b")[...] = gb
        dp2[s] = conv_input_grad(dz3, params.view(f"layer3/{s}/w"), meta1)  # (B, M, P)

    dp1 = [np.zeros((b, m, m, p)) for _ in range(3)]
    if cfg.layer2_wiring == WIRING_SHARED:
        for br in range(3):
            z2 = cache.l2[br]
            da2 = np.zeros((b, m, m, p))
            for di in range(2):
                s = 2 * br + di
                da2 += _unpool(dp2[s], cache.l2_idx[s], 1 + di, m)
            dz2 = (da2 * (z2 > 0)).reshape(b, -1, p)
            gw, gb = conv_weight_grads(cache.pack2[br], dz2)
            gview.view(f"layer2/{br}/w")[...] = gw
            gview.view(f"layer2/{br}/b")[...] = gb
            dp1[br] += conv_input_grad(dz2, params.view(f"layer2/{br}/w"), meta2).reshape(b, m, m, p)
    else:
        for br in range(3):
            for di in range(2):
                s = 2 * br + di
                z2 = cache.l2[s]
                da2 = _unpool(dp2[s], cache.l2_idx[s], 1 + di, m)
                dz2 = (da2 * (z2 > 0)).reshape(b, -1, p)
                gw, gb = conv_weight_grads(cache.pack2[br], dz2)
                gview.view(f"layer2/{s}/w")[...] = gw
                gview.view(f"layer2/{s}/b")[...] = gb
                dp1[br] += conv_input_grad(dz2, params.view(f"layer2/{s}/w"), meta2).reshape(b, m, m, p)

    for br in range(3):
        z1, idx1 = cache.l1[br]
        da1 = _unpool(dp1[br], idx1, 1 + br, m)
        dz1 = (da1 * (z1 > 0)).reshape(b, -1, p)
        gw, gb = conv_weight_grads(cache.pack1, dz1)
        gview.view(f"layer1/{br}/w")[...] = gw
        gview.view(f"layer1/{br}/b")[...] = gb

    return grads


def forward(params: NetworkParams, cube, dropout_rng=None, keep_prob: float = 1.0):
    """Single-sample forward; accepts an ShCube or an (M, M, M, P) array."""
    data = cube.data if isinstance(cube, ShCube) else np.asarray(cube, dtype=np.float64)
    gamma, cache = forward_batch(params, data[None], keep_prob=keep_prob, dropout_rng=dropout_rng)
    return float(gamma[0]), cache


def backward(params: NetworkParams, cache: ForwardCache, target) -> np.ndarray:
    """Gradient of one sample's cross-entropy w.r.t. the flat parameters."""
    return backward_batch(params, cache, np.array([target]), mean=False)
