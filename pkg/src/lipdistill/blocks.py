"""Model zoo: SE residual front-ends, bidirectional GRU backend, classifier.

The audio (teacher) and visual (student) networks share the backend:
a 3-layer bidirectional GRU whose per-frame outputs are average-pooled
into a sequence vector, followed by dropout and a linear classifier.
Front-ends differ: per-frame 2-D SE residual blocks for video, 1-D
residual blocks along time for spectrograms.

Layout conventions: channels are the LAST axis inside all conv/SE code
(so 1x1 convs and gates are plain matmuls); sequence tensors are
[batch, time, features]. GRU update, fixed convention:

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    c = tanh(x W_h + (r * h) U_h + b_h)
    h' = (1 - z) * h + z * c
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from ._kernels import gru_scan_fwd, gru_scan_bwd
from .tensor import Tensor

__all__ = [
    "ModelConfig", "EncoderOutput", "GruCellParams", "linear", "gru_cell",
    "BiGru", "se_block", "SqueezeExcite", "conv1d_same", "conv2d_same",
    "avgpool2d", "ResidualBlock2d", "ResidualBlock1d", "VisualFrontend",
    "AudioFrontend", "ClassifierHead", "TeacherModel", "StudentModel",
]

CONV_KERNEL = 3


@dataclass
class ModelConfig:
    """Shapes and widths for one teacher/student pair.

    The GRU hidden size is shared by both models so their encoder outputs
    can be compared directly, with no adapter in between.
    """

    visual_frames: int = 29
    visual_channels: int = 1
    visual_height: int = 16
    visual_width: int = 16
    audio_frames: int = 139
    audio_bins: int = 20
    visual_widths: tuple = (8, 16)
    audio_widths: tuple = (32, 32, 32)
    audio_feature_dim: int = 32
    se_reduction: int = 4
    hidden_size: int = 64
    gru_layers: int = 3
    num_classes: int = 20
    dropout: float = 0.2

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.hidden_size < 1 or self.gru_layers < 1:
            raise ValueError("hidden_size and gru_layers must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if len(self.visual_widths) < 1 or len(self.audio_widths) < 1:
            raise ValueError("front-end width lists must be non-empty")
        side = self.visual_height
        for _ in range(len(self.visual_widths) - 1):
            if side % 2 != 0:
                raise ValueError("visual extent must halve cleanly between blocks")
            side //= 2
        if self.audio_frames < CONV_KERNEL:
            raise ValueError("audio sequence shorter than the conv kernel")

    @property
    def backend_dim(self) -> int:
        return 2 * self.hidden_size


@dataclass
class EncoderOutput:
    """Final-layer GRU states per frame plus their temporal average."""

    frame_states: Tensor      # [T x D] or [B x T x D], D = 2 * hidden
    sequence_vector: Tensor   # [D] or [B x D]


def _uniform(rng, shape, fan_in) -> Tensor:
    s = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-s, s, shape))


def _orthogonal(rng, n: int) -> Tensor:
    # orthogonal recurrent weights; sign-fixed so the draw is canonical
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return Tensor(q * np.sign(np.diag(r)))


def linear(x, w, b) -> Tensor:
    """x W + b over the last axis of x."""
    return T.add(T.matmul(x, w), b)


@dataclass
class GruCellParams:
    """One direction of one GRU layer."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    @classmethod
    def create(cls, rng, d_in: int, hidden: int) -> "GruCellParams":
        kw = {}
        for gate in ("z", "r", "h"):
            kw[f"w_{gate}"] = _uniform(rng, (d_in, hidden), d_in)
            kw[f"u_{gate}"] = _orthogonal(rng, hidden)
            kw[f"b_{gate}"] = Tensor(np.zeros(hidden))
        return cls(**kw)

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.{name}": getattr(self, name)
                for name in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")}


def _gru_step(xz, xr, xh, h, p: GruCellParams) -> Tensor:
    z = T.sigmoid(T.add(xz, T.matmul(h, p.u_z)))
    r = T.sigmoid(T.add(xr, T.matmul(h, p.u_r)))
    c = T.tanh(T.add(xh, T.matmul(T.mul(r, h), p.u_h)))
    return T.add(T.mul(T.sub(1.0, z), h), T.mul(z, c))


def _gru_scan(xpz, xpr, xph, p: GruCellParams, reverse: bool) -> Tensor:
    """One direction of one GRU layer as a single tape node.

    Runs the whole recurrence over the precomputed per-gate input
    projections (biases already folded in); the backward replays it in
    reverse (plain BPTT, truncated nowhere). Each step applies exactly the
    _gru_step update. Covered by the BiGRU finite-difference checks and the
    step-equivalence test against gru_cell.
    """
    uz, ur, uh = p.u_z.data, p.u_r.data, p.u_h.data
    xz_all = np.ascontiguousarray(xpz.data)
    xr_all = np.ascontiguousarray(xpr.data)
    xh_all = np.ascontiguousarray(xph.data)
    hidden = uz.shape[0]
    out, zs, rs, cs, prev = gru_scan_fwd(xz_all, xr_all, xh_all, uz, ur, uh, reverse)

    cache = {}

    def shared(g):
        if cache.get("g") is not g:
            dxz, dxr, dxh = gru_scan_bwd(
                g, zs, rs, cs, prev,
                np.ascontiguousarray(uz.T), np.ascontiguousarray(ur.T),
                np.ascontiguousarray(uh.T), reverse)
            flat_prev = prev.reshape(-1, hidden)
            duz = flat_prev.T @ dxz.reshape(-1, hidden)
            dur = flat_prev.T @ dxr.reshape(-1, hidden)
            duh = (rs.reshape(-1, hidden) * flat_prev).T @ dxh.reshape(-1, hidden)
            cache.update(g=g, dxz=dxz, dxr=dxr, dxh=dxh, duz=duz, dur=dur, duh=duh)
        return cache

    parents = [
        (xpz, lambda g: shared(g)["dxz"]),
        (xpr, lambda g: shared(g)["dxr"]),
        (xph, lambda g: shared(g)["dxh"]),
        (p.u_z, lambda g: shared(g)["duz"]),
        (p.u_r, lambda g: shared(g)["dur"]),
        (p.u_h, lambda g: shared(g)["duh"]),
    ]
    return T.custom_op(out, parents)


def gru_cell(x_t, h_prev, p: GruCellParams) -> Tensor:
    """One recurrence step; x_t is [D] or [B x D], h_prev matching [H]/[B x H]."""
    x_t = T.as_tensor(x_t)
    h_prev = T.as_tensor(h_prev)
    if x_t.shape[-1] != p.w_z.shape[0] or h_prev.shape[-1] != p.u_z.shape[0]:
        raise ValueError("gru_cell: input/hidden dims do not match the parameters")
    xz = linear(x_t, p.w_z, p.b_z)
    xr = linear(x_t, p.w_r, p.b_r)
    xh = linear(x_t, p.w_h, p.b_h)
    return _gru_step(xz, xr, xh, h_prev, p)


class BiGru:
    """Stacked bidirectional GRU; direction outputs concatenate to feed the
    next layer. frame_states come from the last layer, the sequence vector
    is their mean over time."""

    def __init__(self, rng, d_in: int, hidden: int, layers: int = 3):
        self.hidden = hidden
        self.layers = []
        for i in range(layers):
            d = d_in if i == 0 else 2 * hidden
            self.layers.append((GruCellParams.create(rng, d, hidden),
                                GruCellParams.create(rng, d, hidden)))

    def named_params(self, prefix: str) -> dict:
        out = {}
        for i, (fwd, bwd) in enumerate(self.layers):
            out.update(fwd.named(f"{prefix}.l{i}.fwd"))
            out.update(bwd.named(f"{prefix}.l{i}.bwd"))
        return out

    def _scan(self, x, p: GruCellParams, reverse: bool):
        # hoist the input projections out of the recurrence
        xpz = linear(x, p.w_z, p.b_z)
        xpr = linear(x, p.w_r, p.b_r)
        xph = linear(x, p.w_h, p.b_h)
        return _gru_scan(xpz, xpr, xph, p, reverse)

    def __call__(self, x) -> EncoderOutput:
        x = T.as_tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[1] < 1:
            raise ValueError("empty sequence")
        for fwd, bwd in self.layers:
            x = T.concat([self._scan(x, fwd, False), self._scan(x, bwd, True)], axis=2)
        seq = T.reduce_mean(x, axis=1)
        if squeeze:
            x = T.reshape(x, x.shape[1:])
            seq = T.reshape(seq, seq.shape[1:])
        return EncoderOutput(frame_states=x, sequence_vector=seq)


def se_block(x, w1, w2, spatial_axes) -> Tensor:
    """Channel gate: squeeze by averaging the spatial axes, excite through a
    bottleneck, scale x channelwise. Gates are sigmoid outputs, so (0, 1)."""
    if spatial_axes and spatial_axes == tuple(range(spatial_axes[0], x.ndim - 1)):
        # contiguous middle axes collapse into one mean
        lead = x.shape[:spatial_axes[0]]
        sq = T.reduce_mean(T.reshape(x, lead + (-1, x.shape[-1])), len(lead))
    else:
        sq = x
        for ax in sorted(spatial_axes, reverse=True):
            sq = T.reduce_mean(sq, ax)
    gate = T.sigmoid(T.matmul(T.relu(T.matmul(sq, w1)), w2))
    if spatial_axes:
        gshape = list(x.shape)
        for ax in spatial_axes:
            gshape[ax] = 1
        gate = T.reshape(gate, gshape)
    return T.mul(x, gate)


class SqueezeExcite:
    def __init__(self, rng, channels: int, reduction: int):
        mid = max(1, channels // reduction)
        self.w1 = _uniform(rng, (channels, mid), channels)
        self.w2 = _uniform(rng, (mid, channels), mid)

    def __call__(self, x, spatial_axes):
        return se_block(x, self.w1, self.w2, spatial_axes)

    def named_params(self, prefix: str) -> dict:
        return {f"{prefix}.w1": self.w1, f"{prefix}.w2": self.w2}


def conv1d_same(x, w, b) -> Tensor:
    """Length-preserving conv along time, zero-padded at the edges.

    x: [B x T x Cin]; w: [K*Cin x Cout] flattened in (offset, cin) order.
    One tape node; forward and backward are sums of shifted matmuls.
    """
    x = T.as_tensor(x)
    xd = x.data
    batch, t_len, cin = xd.shape
    k = w.data.shape[0] // cin
    if w.data.shape[0] != k * cin:
        raise ValueError(f"conv1d weight rows {w.data.shape[0]} not a multiple of Cin={cin}")
    if t_len < k:
        raise ValueError(f"sequence of {t_len} frames is shorter than kernel {k}")
    cout = w.data.shape[1]
    wk = w.data.reshape(k, cin, cout)
    half = k // 2
    xp = np.pad(xd, ((0, 0), (half, half), (0, 0)))
    y = np.zeros((batch, t_len, cout))
    for off in range(k):
        y += xp[:, off:off + t_len, :] @ wk[off]
    y += b.data

    cache = {}

    def shared(g):
        if cache.get("g") is not g:
            g2 = np.ascontiguousarray(g)
            gxp = np.zeros_like(xp)
            gwk = np.empty_like(wk)
            gflat = g2.reshape(-1, cout)
            for off in range(k):
                gxp[:, off:off + t_len, :] += g2 @ wk[off].T
                gwk[off] = xp[:, off:off + t_len, :].reshape(-1, cin).T @ gflat
            cache.update(g=g, gx=gxp[:, half:half + t_len, :],
                         gw=gwk.reshape(k * cin, cout), gb=g2.sum(axis=(0, 1)))
        return cache

    return T.custom_op(y, [(x, lambda g: shared(g)["gx"]),
                           (w, lambda g: shared(g)["gw"]),
                           (b, lambda g: shared(g)["gb"])])


def conv2d_same(x, w, b) -> Tensor:
    """Extent-preserving square conv, channels last, zero-padded.

    x: [B x H x W x Cin]; w: [K*K*Cin x Cout] flattened in (dy, dx, cin)
    order. One tape node; shifted matmuls on both passes.
    """
    x = T.as_tensor(x)
    xd = x.data
    batch, hh, ww, cin = xd.shape
    k = int(round(np.sqrt(w.data.shape[0] // cin)))
    if k * k * cin != w.data.shape[0]:
        raise ValueError(f"conv2d weight rows {w.data.shape[0]} do not factor as K*K*{cin}")
    cout = w.data.shape[1]
    wk = w.data.reshape(k * k, cin, cout)
    half = k // 2
    xp = np.pad(xd, ((0, 0), (half, half), (half, half), (0, 0)))
    y = np.zeros((batch, hh, ww, cout))
    tmp = np.empty_like(y)
    i = 0
    for dy in range(k):
        for dx in range(k):
            np.matmul(xp[:, dy:dy + hh, dx:dx + ww, :], wk[i], out=tmp)
            y += tmp
            i += 1
    y += b.data

    cache = {}

    def shared(g):
        if cache.get("g") is not g:
            g2 = np.ascontiguousarray(g)
            gxp = np.zeros_like(xp)
            gwk = np.empty_like(wk)
            gflat = g2.reshape(-1, cout)
            gtmp = np.empty((batch, hh, ww, cin))
            i = 0
            for dy in range(k):
                for dx in range(k):
                    np.matmul(g2, wk[i].T, out=gtmp)
                    gxp[:, dy:dy + hh, dx:dx + ww, :] += gtmp
                    gwk[i] = xp[:, dy:dy + hh, dx:dx + ww, :].reshape(-1, cin).T @ gflat
                    i += 1
            cache.update(g=g, gx=gxp[:, half:half + hh, half:half + ww, :],
                         gw=gwk.reshape(k * k * cin, cout), gb=g2.sum(axis=(0, 1, 2)))
        return cache

    return T.custom_op(y, [(x, lambda g: shared(g)["gx"]),
                           (w, lambda g: shared(g)["gw"]),
                           (b, lambda g: shared(g)["gb"])])


def avgpool2d(x) -> Tensor:
    """2x2 average pooling, stride 2, channels last."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError("avgpool2d needs even spatial extents")
    xr = T.reshape(x, (b, h // 2, 2, w // 2, 2, c))
    return T.reduce_mean(T.reduce_mean(xr, 4), 2)


class ResidualBlock2d:
    """y = shortcut(x) + F(x), F = conv-relu-conv, optionally SE-gated.
    The shortcut is the identity when channel counts match, else a 1x1
    projection."""

    def __init__(self, rng, c_in: int, c_out: int, se_reduction: int, use_se: bool):
        k2 = CONV_KERNEL * CONV_KERNEL
        self.conv1_w = _uniform(rng, (k2 * c_in, c_out), k2 * c_in)
        self.conv1_b = Tensor(np.zeros(c_out))
        self.conv2_w = _uniform(rng, (k2 * c_out, c_out), k2 * c_out)
        self.conv2_b = Tensor(np.zeros(c_out))
        self.se = SqueezeExcite(rng, c_out, se_reduction) if use_se else None
        self.proj_w = None if c_in == c_out else _uniform(rng, (c_in, c_out), c_in)

    def __call__(self, x):
        f = conv2d_same(x, self.conv1_w, self.conv1_b)
        f = conv2d_same(T.relu(f), self.conv2_w, self.conv2_b)
        if self.se is not None:
            f = self.se(f, (1, 2))
        shortcut = x if self.proj_w is None else T.matmul(x, self.proj_w)
        return T.add(shortcut, f)

    def named_params(self, prefix: str) -> dict:
        out = {f"{prefix}.conv1_w": self.conv1_w, f"{prefix}.conv1_b": self.conv1_b,
               f"{prefix}.conv2_w": self.conv2_w, f"{prefix}.conv2_b": self.conv2_b}
        if self.se is not None:
            out.update(self.se.named_params(f"{prefix}.se"))
        if self.proj_w is not None:
            out[f"{prefix}.proj_w"] = self.proj_w
        return out


class ResidualBlock1d:
    """Same structure as the 2-D block, convolving along time."""

    def __init__(self, rng, c_in: int, c_out: int, se_reduction: int = 4, use_se: bool = False):
        k = CONV_KERNEL
        self.conv1_w = _uniform(rng, (k * c_in, c_out), k * c_in)
        self.conv1_b = Tensor(np.zeros(c_out))
        self.conv2_w = _uniform(rng, (k * c_out, c_out), k * c_out)
        self.conv2_b = Tensor(np.zeros(c_out))
        self.se = SqueezeExcite(rng, c_out, se_reduction) if use_se else None
        self.proj_w = None if c_in == c_out else _uniform(rng, (c_in, c_out), c_in)

    def __call__(self, x):
        f = conv1d_same(x, self.conv1_w, self.conv1_b)
        f = conv1d_same(T.relu(f), self.conv2_w, self.conv2_b)
        if self.se is not None:
            f = self.se(f, (1,))
        shortcut = x if self.proj_w is None else T.matmul(x, self.proj_w)
        return T.add(shortcut, f)

    def named_params(self, prefix: str) -> dict:
        out = {f"{prefix}.conv1_w": self.conv1_w, f"{prefix}.conv1_b": self.conv1_b,
               f"{prefix}.conv2_w": self.conv2_w, f"{prefix}.conv2_b": self.conv2_b}
        if self.se is not None:
            out.update(self.se.named_params(f"{prefix}.se"))
        if self.proj_w is not None:
            out[f"{prefix}.proj_w"] = self.proj_w
        return out


class VisualFrontend:
    """Per-frame 2-D SE residual stack -> global average pool -> dropout.

    The time axis is untouched: [B x T x C x H x W] -> [B x T x D_in].
    A 2x2 average downsample sits between consecutive blocks.
    """

    def __init__(self, rng, in_channels: int, widths, se_reduction: int, dropout: float):
        self.dropout = dropout
        self.blocks = []
        c = in_channels
        for w in widths:
            self.blocks.append(ResidualBlock2d(rng, c, w, se_reduction, use_se=True))
            c = w
        self.out_dim = c

    def conv_stack(self, frames):
        """Pre-pool feature maps [B*T x H' x W' x C_out]."""
        x = T.as_tensor(frames)
        b, t, c, h, w = x.shape
        x = T.reshape(x, (b * t, c, h, w))
        x = T.transpose(x, (0, 2, 3, 1))
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = avgpool2d(x)
            x = block(x)
        return x

    def __call__(self, frames, training=False, rng=None):
        frames = T.as_tensor(frames)
        b, t = frames.shape[0], frames.shape[1]
        x = self.conv_stack(frames)
        x = T.reduce_mean(T.reshape(x, (x.shape[0], -1, self.out_dim)), 1)
        x = T.dropout(x, self.dropout, rng, training)
        return T.reshape(x, (b, t, self.out_dim))

    def named_params(self, prefix: str) -> dict:
        out = {}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_params(f"{prefix}.block{i}"))
        return out


class AudioFrontend:
    """1-D residual blocks along time, then a per-frame linear projection.
    [B x T x F] -> [B x T x D_out]; the time length is preserved."""

    def __init__(self, rng, in_bins: int, widths, out_dim: int):
        self.blocks = []
        c = in_bins
        for w in widths:
            self.blocks.append(ResidualBlock1d(rng, c, w))
            c = w
        self.proj_w = _uniform(rng, (c, out_dim), c)
        self.proj_b = Tensor(np.zeros(out_dim))
        self.out_dim = out_dim

    def __call__(self, spec):
        x = T.as_tensor(spec)
        for block in self.blocks:
            x = block(x)
        return linear(x, self.proj_w, self.proj_b)

    def named_params(self, prefix: str) -> dict:
        out = {}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_params(f"{prefix}.block{i}"))
        out[f"{prefix}.proj_w"] = self.proj_w
        out[f"{prefix}.proj_b"] = self.proj_b
        return out


class ClassifierHead:
    """Dropout then a linear map to class logits (softmax lives in the loss)."""

    def __init__(self, rng, d_in: int, n_classes: int, dropout: float):
        self.w = _uniform(rng, (d_in, n_classes), d_in)
        self.b = Tensor(np.zeros(n_classes))
        self.dropout = dropout

    def __call__(self, seq_vec, training=False, rng=None):
        x = T.dropout(T.as_tensor(seq_vec), self.dropout, rng, training)
        return linear(x, self.w, self.b)

    def named_params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class _Model:
    def named_params(self) -> dict:
        out = {}
        out.update(self.frontend.named_params("frontend"))
        out.update(self.encoder.named_params("encoder"))
        out.update(self.head.named_params("head"))
        return out

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.named_params().items()}

    def load_state(self, arrays: dict):
        params = self.named_params()
        if set(arrays) != set(params):
            missing = set(params) - set(arrays)
            extra = set(arrays) - set(params)
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    @property
    def backend_dim(self) -> int:
        return 2 * self.encoder.hidden


class TeacherModel(_Model):
    """Audio word classifier: 1-D residual front-end + BiGRU + head."""

    def __init__(self, cfg: ModelConfig, rng):
        cfg.validate()
        self.cfg = cfg
        self.frontend = AudioFrontend(rng, cfg.audio_bins, cfg.audio_widths, cfg.audio_feature_dim)
        self.encoder = BiGru(rng, cfg.audio_feature_dim, cfg.hidden_size, cfg.gru_layers)
        self.head = ClassifierHead(rng, cfg.backend_dim, cfg.num_classes, cfg.dropout)

    def forward(self, audio, training=False, rng=None):
        feats = self.frontend(audio)
        enc = self.encoder(feats)
        logits = self.head(enc.sequence_vector, training, rng)
        return logits, enc


class StudentModel(_Model):
    """Visual word classifier: 2-D SE residual front-end + BiGRU + head.

    With use_boundary_channel the input carries one extra channel marking
    the frames that contain the word.
    """

    def __init__(self, cfg: ModelConfig, rng, use_boundary_channel: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.use_boundary_channel = use_boundary_channel
        in_ch = cfg.visual_channels + (1 if use_boundary_channel else 0)
        self.frontend = VisualFrontend(rng, in_ch, cfg.visual_widths, cfg.se_reduction, cfg.dropout)
        self.encoder = BiGru(rng, self.frontend.out_dim, cfg.hidden_size, cfg.gru_layers)
        self.head = ClassifierHead(rng, cfg.backend_dim, cfg.num_classes, cfg.dropout)

    def forward(self, frames, training=False, rng=None):
        feats = self.frontend(frames, training, rng)
        enc = self.encoder(feats)
        logits = self.head(enc.sequence_vector, training, rng)
        return logits, enc
