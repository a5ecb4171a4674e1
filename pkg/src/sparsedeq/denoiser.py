"""Small spectrally normalised convolutional denoiser with a hand-written backward pass.

Layout for ``n_scales = L`` (``C`` hidden channels, zero padding everywhere)::

    e0 = act(conv_in(x))                     full resolution, 1 -> C
    e_l = act(conv(pool(e_{l-1})))           l = 1 .. L-1, C -> C
    b  = act(conv(e_{L-1}))                  bottom, C -> C
    d  = act(conv(0.5 * (e_{l-1} + up(d))))  l = L-1 .. 1, C -> C
    r  = conv_out(d)                         C -> 1
    out = x + r  (use_skip)  or  r

Pooling is a 2x2 average, upsampling nearest neighbour. Averaging the skip
merge keeps every stage 1-Lipschitz once the convolutions have unit norm.
Activations are stored channels-last, ``(batch, H, W, C)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class DenoiserSpec:
    n_scales: int = 2
    channels: int = 16
    kernel_size: int = 3
    activation: str = "leaky-relu"
    leaky_slope: float = 0.1
    use_skip: bool = True
    sn_power_iters: int = 1
    image_side: int = 32  # resolution the spectral norms are measured at

    def __post_init__(self):
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.channels < 1 or self.n_scales < 1:
            raise ValueError("channels and n_scales must be >= 1")
        if self.activation not in ("relu", "leaky-relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def slope(self) -> float:
        return 0.0 if self.activation == "relu" else self.leaky_slope

    @property
    def n_layers(self) -> int:
        return 2 * self.n_scales + 1

    def layer_layout(self) -> list[tuple[int, int, int]]:
        """``(in_channels, out_channels, resolution level)`` per convolution."""
        c, L = self.channels, self.n_scales
        layout = [(1, c, 0)]
        layout += [(c, c, lvl) for lvl in range(1, L)]
        layout += [(c, c, L - 1)]
        layout += [(c, c, lvl - 1) for lvl in range(L - 1, 0, -1)]
        layout += [(c, 1, 0)]
        return layout


@dataclass
class SNState:
    u: np.ndarray
    v: np.ndarray
    sigma: float = float("nan")


@dataclass
class DenoiserParams:
    spec: DenoiserSpec
    kernels: list[np.ndarray]
    biases: list[np.ndarray]
    sn: list[SNState] | None = field(default=None)

    def leaves(self) -> list[np.ndarray]:
        out = []
        for k, b in zip(self.kernels, self.biases):
            out += [k, b]
        return out

    def with_leaves(self, leaves: list[np.ndarray]) -> "DenoiserParams":
        return replace(self, kernels=list(leaves[0::2]), biases=list(leaves[1::2]))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.leaves()])

    def from_flat(self, vec: np.ndarray) -> "DenoiserParams":
        leaves, pos = [], 0
        for a in self.leaves():
            leaves.append(np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape).copy())
            pos += a.size
        return self.with_leaves(leaves)

    def copy(self) -> "DenoiserParams":
        sn = None if self.sn is None else [SNState(s.u.copy(), s.v.copy(), s.sigma) for s in self.sn]
        return DenoiserParams(self.spec, [k.copy() for k in self.kernels],
                              [b.copy() for b in self.biases], sn)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.leaves())


def _side_at(spec: DenoiserSpec, level: int, side: int | None = None) -> int:
    return (spec.image_side if side is None else side) >> level


def init_denoiser(spec: DenoiserSpec, seed: int) -> DenoiserParams:
    """Fan-in scaled normal kernels (variance ``2 / fan_in``), zero biases."""
    rng = np.random.default_rng(seed)
    k = spec.kernel_size
    kernels, biases, sn = [], [], []
    for cin, cout, lvl in spec.layer_layout():
        fan_in = cin * k * k
        kernels.append(rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(cout))
        side = _side_at(spec, lvl)
        v = rng.standard_normal((side, side, cin))
        u = rng.standard_normal((side, side, cout))
        sn.append(SNState(u / np.linalg.norm(u), v / np.linalg.norm(v)))
    return DenoiserParams(spec, kernels, biases, sn)


def zero_params(spec: DenoiserSpec) -> DenoiserParams:
    p = init_denoiser(spec, 0)
    return p.with_leaves([np.zeros_like(a) for a in p.leaves()])


# ---------------------------------------------------------------------------
# primitive layers


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    cout = kernel.shape[0]
    return kernel.reshape(cout, -1).T  # rows ordered (in_channel, di, dj)


def _pad(h: np.ndarray, r: int) -> np.ndarray:
    b, hh, ww, c = h.shape
    hp = np.zeros((b, hh + 2 * r, ww + 2 * r, c))
    hp[:, r:r + hh, r:r + ww, :] = h
    return hp


def _im2col(h: np.ndarray, k: int) -> np.ndarray:
    b, hh, ww, c = h.shape
    hp = _pad(h, k // 2) if k > 1 else h
    win = np.lib.stride_tricks.sliding_window_view(hp, (k, k), axis=(1, 2))
    return win.reshape(b * hh * ww, c * k * k)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], k: int) -> np.ndarray:
    b, hh, ww, c = shape
    r = k // 2
    dcols = dcols.reshape(b, hh, ww, c, k, k)
    dp = np.zeros((b, hh + 2 * r, ww + 2 * r, c))
    for di in range(k):
        for dj in range(k):
            dp[:, di:di + hh, dj:dj + ww, :] += dcols[..., di, dj]
    return dp[:, r:r + hh, r:r + ww, :]


def conv2d(h: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None):
    """Same-size zero-padded convolution (cross-correlation); returns output and im2col."""
    cols = _im2col(h, kernel.shape[-1])
    out = cols @ _kernel_matrix(kernel)
    if bias is not None:
        out += bias
    return out.reshape(*h.shape[:3], kernel.shape[0]), cols


def conv2d_vjp(g: np.ndarray, cols: np.ndarray, kernel: np.ndarray, in_shape, need_input=True):
    cout, cin, k, _ = kernel.shape
    g2 = g.reshape(-1, cout)
    dk = (cols.T @ g2).T.reshape(cout, cin, k, k)
    db = g2.sum(axis=0)
    dx = _col2im(g2 @ _kernel_matrix(kernel).T, in_shape, k) if need_input else None
    return dk, db, dx


def conv2d_transpose(g: np.ndarray, kernel: np.ndarray, in_shape) -> np.ndarray:
    cout, cin, k, _ = kernel.shape
    return _col2im(g.reshape(-1, cout) @ _kernel_matrix(kernel).T, in_shape, k)


def avg_pool(h: np.ndarray) -> np.ndarray:
    b, hh, ww, c = h.shape
    return h.reshape(b, hh // 2, 2, ww // 2, 2, c).mean(axis=(2, 4))


def avg_pool_vjp(g: np.ndarray) -> np.ndarray:
    return 0.25 * upsample(g)


def upsample(h: np.ndarray) -> np.ndarray:
    return h.repeat(2, axis=1).repeat(2, axis=2)


def upsample_vjp(g: np.ndarray) -> np.ndarray:
    b, hh, ww, c = g.shape
    return g.reshape(b, hh // 2, 2, ww // 2, 2, c).sum(axis=(2, 4))


def _act(z: np.ndarray, slope: float) -> np.ndarray:
    # valid for 0 <= slope <= 1
    return np.maximum(z, slope * z)


def _act_grad(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, 1.0, slope)


# ---------------------------------------------------------------------------
# network


def _check_input(p: DenoiserParams, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ValueError("denoiser input must be (H, W) or (batch, H, W)")
    div = 2 ** (p.spec.n_scales - 1)
    if x.shape[1] % div or x.shape[2] % div:
        raise ValueError(f"image side must be divisible by {div} for {p.spec.n_scales} scales")
    return x, single


def _forward(p: DenoiserParams, x: np.ndarray, keep: bool):
    spec = p.spec
    slope = spec.slope
    L = spec.n_scales
    tape = []
    layer = 0

    def conv_act(h, act=True):
        nonlocal layer
        z, cols = conv2d(h, p.kernels[layer], p.biases[layer])
        if keep:
            tape.append((layer, cols, h.shape, z))
        layer += 1
        return _act(z, slope) if act else z

    enc = [conv_act(x[..., None])]
    for _ in range(1, L):
        enc.append(conv_act(avg_pool(enc[-1])))
    d = conv_act(enc[-1])
    for lvl in range(L - 1, 0, -1):
        d = conv_act(0.5 * (enc[lvl - 1] + upsample(d)))
    r = conv_act(d, act=False)[..., 0]
    out = x + r if spec.use_skip else r
    return out, tape


def denoiser_forward(p: DenoiserParams, x: np.ndarray) -> np.ndarray:
    """Apply the network to one image ``(H, W)`` or a batch ``(B, H, W)``."""
    x, single = _check_input(p, x)
    out, _ = _forward(p, x, keep=False)
    return out[0] if single else out


def denoiser_vjp(p: DenoiserParams, x: np.ndarray, cotangent: np.ndarray):
    """Reverse-mode derivative of :func:`denoiser_forward` contracted with ``cotangent``.

    Returns ``(param_grads, input_grad)``; ``param_grads`` is a
    :class:`DenoiserParams` without spectral-norm state. For a batch the
    parameter gradients are summed over the batch.
    """
    x, single = _check_input(p, x)
    g = np.asarray(cotangent, dtype=np.float64)
    if single:
        g = g[None]
    if g.shape != x.shape:
        raise ValueError(f"cotangent shape {g.shape} does not match output shape {x.shape}")
    spec = p.spec
    slope = spec.slope
    L = spec.n_scales
    _, tape = _forward(p, x, keep=True)
    dks = [None] * len(p.kernels)
    dbs = [None] * len(p.biases)

    def back(g_out, act=True):
        layer, cols, in_shape, z = tape.pop()
        if act:
            g_out = g_out * _act_grad(z, slope)
        dk, db, dh = conv2d_vjp(g_out, cols, p.kernels[layer], in_shape)
        dks[layer], dbs[layer] = dk, db
        return dh

    dx = g.copy() if spec.use_skip else np.zeros_like(x)
    gd = back(g[..., None], act=False)
    g_enc = [None] * L
    for lvl in range(1, L):
        gm = back(gd)
        g_enc[lvl - 1] = 0.5 * gm
        gd = upsample_vjp(0.5 * gm)
    ge = back(gd)
    for lvl in range(L - 1, 0, -1):
        if g_enc[lvl] is not None:
            ge = ge + g_enc[lvl]
        ge = avg_pool_vjp(back(ge))
    if g_enc[0] is not None:
        ge = ge + g_enc[0]
    dx += back(ge)[..., 0]
    grads = DenoiserParams(spec, dks, dbs, None)
    return grads, (dx[0] if single else dx)


# ---------------------------------------------------------------------------
# spectral normalisation


def conv_operator_norm_step(kernel: np.ndarray, state: SNState, n_iters: int) -> SNState:
    """Warm-started power iteration on the bias-free convolution operator."""
    v = state.v[None]
    u = state.u[None]
    sigma = state.sigma
    for _ in range(max(n_iters, 1)):
        u, _ = conv2d(v, kernel)
        un = np.linalg.norm(u)
        if un == 0.0:
            return SNState(state.u.copy(), state.v.copy(), 0.0)
        u /= un
        v = conv2d_transpose(u, kernel, v.shape)
        vn = np.linalg.norm(v)
        v /= vn
        sigma = float(vn)
    return SNState(u[0], v[0], sigma)


def spectral_normalize(p: DenoiserParams, n_iters: int | None = None) -> DenoiserParams:
    """Divide every kernel by its estimated convolution-operator norm."""
    if p.sn is None:
        raise ValueError("parameters carry no spectral-norm state")
    n_iters = p.spec.sn_power_iters if n_iters is None else n_iters
    kernels, states = [], []
    for kern, st in zip(p.kernels, p.sn):
        st = conv_operator_norm_step(kern, st, n_iters)
        kernels.append(kern / st.sigma if st.sigma > 0 else kern.copy())
        states.append(st)
    return DenoiserParams(p.spec, kernels, [b.copy() for b in p.biases], states)


def conv_operator_norm(kernel: np.ndarray, side: int, n_iters: int = 50, seed: int = 0) -> float:
    """Cold-started power-iteration estimate of a convolution's operator norm."""
    rng = np.random.default_rng(seed)
    cout, cin = kernel.shape[:2]
    v = rng.standard_normal((side, side, cin))
    st = SNState(np.zeros((side, side, cout)), v / np.linalg.norm(v))
    return conv_operator_norm_step(kernel, st, n_iters).sigma


def layer_norms(p: DenoiserParams, n_iters: int = 50, seed: int = 0) -> list[float]:
    return [conv_operator_norm(k, _side_at(p.spec, lvl), n_iters, seed + i)
            for i, (k, (_, _, lvl)) in enumerate(zip(p.kernels, p.spec.layer_layout()))]


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"TSDN"
CKPT_VERSION = 1


def save_checkpoint(path, p: DenoiserParams, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Magic, u16 version, u32 JSON header length, JSON header, then ``<f8`` arrays.

    Arrays follow layer order: kernel, bias, SN ``u``, SN ``v``, SN sigma;
    named ``extra`` arrays (e.g. optimiser moments) come last.
    """
    extra = extra or {}
    arrays: list[np.ndarray] = []
    for i, (k, b) in enumerate(zip(p.kernels, p.biases)):
        arrays += [k, b]
        if p.sn is not None:
            s = p.sn[i]
            arrays += [s.u, s.v, np.array([s.sigma])]
    names = sorted(extra)
    arrays += [np.asarray(extra[n]) for n in names]
    header = {
        "spec": asdict(p.spec),
        "has_sn": p.sn is not None,
        "extra": [[n, list(np.shape(extra[n]))] for n in names],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(blob)) + blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, meta, extra)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a denoiser checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[10:10 + hlen])
    spec = DenoiserSpec(**header["spec"])
    pos = 10 + hlen

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + 8 * n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        a = np.frombuffer(raw, "<f8", n, pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        return a

    kernels, biases, sn = [], [], []
    k = spec.kernel_size
    for cin, cout, lvl in spec.layer_layout():
        kernels.append(take((cout, cin, k, k)))
        biases.append(take((cout,)))
        if header["has_sn"]:
            side = _side_at(spec, lvl)
            u = take((side, side, cout))
            v = take((side, side, cin))
            sn.append(SNState(u, v, float(take((1,))[0])))
    extra = {name: take(tuple(shape)) for name, shape in header["extra"]}
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    params = DenoiserParams(spec, kernels, biases, sn if header["has_sn"] else None)
    return params, header["meta"], extra
