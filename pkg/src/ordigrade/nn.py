"""Small numpy CNN with a shared encoder, three task heads and a linear fusion.

Tensors are ``float64`` arrays in NCHW layout. Every layer implements
``forward(x, train, rng) -> (y, cache)`` and ``backward(dy, cache) -> (dx, grads)``
with hand-derived gradients.

Parameters are addressed by flat names ``"<block>.<layer index>.<W|b>"`` and
``"fusion.w"`` / ``"fusion.b"``; blocks are ``encoder``, ``cls``, ``reg``,
``ord`` and ``fusion``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .losses import N_GRADES, sigmoid, softmax

BLOCKS = ("encoder", "cls", "reg", "ord", "fusion")
HEADS = ("cls", "reg", "ord")
HEAD_WIDTH = {"cls": N_GRADES, "reg": 1, "ord": N_GRADES}
REG_MAX = float(np.nextafter(4.5, 0.0))
ORD_MAX = float(N_GRADES - 1)


# -- layer specs -----------------------------------------------------------

def dense(n_in, n_out):
    return {"kind": "dense", "in": int(n_in), "out": int(n_out)}


def conv3x3(in_ch, out_ch, stride=1):
    return {"kind": "conv3x3", "in_ch": int(in_ch), "out_ch": int(out_ch), "stride": int(stride)}


def relu():
    return {"kind": "relu"}


def global_avg_pool():
    return {"kind": "global_avg_pool"}


def dropout(p):
    return {"kind": "dropout", "p": float(p)}


def flatten():
    return {"kind": "flatten"}


def default_encoder_specs(in_ch=3):
    return [conv3x3(in_ch, 8, 2), relu(), conv3x3(8, 16, 2), relu(),
            global_avg_pool(), dense(16, 32), relu()]


def default_head_specs():
    """Layers placed before each head's final dense projection."""
    return [dropout(0.3)]


def he_init(spec, seed):
    """He-normal weights ``N(0, 2 / fan_in)`` and zero biases for a parametric layer spec."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    kind = spec["kind"]
    if kind == "dense":
        fan_in, shape = spec["in"], (spec["in"], spec["out"])
        n_out = spec["out"]
    elif kind == "conv3x3":
        fan_in, shape = spec["in_ch"] * 9, (spec["out_ch"], spec["in_ch"], 3, 3)
        n_out = spec["out_ch"]
    else:
        raise ValueError(f"layer kind {kind!r} has no trainable parameters")
    return {"W": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), "b": np.zeros(n_out)}


# -- layers ----------------------------------------------------------------

class Layer:
    params: dict

    def __init__(self, spec):
        self.spec = dict(spec)
        self.params = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return in_shape

    def check_input(self, shape):
        pass


class Dense(Layer):
    def check_input(self, shape):
        if len(shape) != 1 or shape[0] != self.spec["in"]:
            raise ValueError(f"dense expects ({self.spec['in']},) features, got {tuple(shape)}")

    def output_shape(self, in_shape):
        return (self.spec["out"],)

    def forward(self, x, train=False, rng=None):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dy, x):
        grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.params["W"].T, grads


class Conv3x3(Layer):
    """3x3 convolution, zero padding 1, im2col formulation."""

    def check_input(self, shape):
        if len(shape) != 3 or shape[0] != self.spec["in_ch"]:
            raise ValueError(f"conv3x3 expects {self.spec['in_ch']} input channels, got shape {tuple(shape)}")

    def output_shape(self, in_shape):
        s = self.spec["stride"]
        _, h, w = in_shape
        return (self.spec["out_ch"], (h - 1) // s + 1, (w - 1) // s + 1)

    def forward(self, x, train=False, rng=None):
        s = self.spec["stride"]
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::s, ::s]
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9)
        wmat = self.params["W"].reshape(self.spec["out_ch"], c * 9)
        y = cols @ wmat.T + self.params["b"]
        y = y.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, x.shape)

    def backward(self, dy, cache):
        cols, (n, c, h, w) = cache
        s = self.spec["stride"]
        out_ch = self.spec["out_ch"]
        ho, wo = dy.shape[2], dy.shape[3]
        d = dy.transpose(0, 2, 3, 1).reshape(-1, out_ch)
        wmat = self.params["W"].reshape(out_ch, c * 9)
        grads = {"W": (d.T @ cols).reshape(self.params["W"].shape), "b": d.sum(axis=0)}
        dcols = (d @ wmat).reshape(n, ho, wo, c, 3, 3)
        dxp = np.zeros((n, c, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1], grads


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, {}


class GlobalAvgPool(Layer):
    def check_input(self, shape):
        if len(shape) != 3:
            raise ValueError(f"global_avg_pool expects (C, H, W), got {tuple(shape)}")

    def output_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x, train=False, rng=None):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, shape):
        n, c, h, w = shape
        return np.broadcast_to(dy[:, :, None, None] / (h * w), shape).copy(), {}


class Flatten(Layer):
    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), {}


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - p)`` at train time."""

    def __init__(self, spec):
        super().__init__(spec)
        if not 0.0 <= spec["p"] < 1.0:
            raise ValueError("dropout p must lie in [0, 1)")

    def forward(self, x, train=False, rng=None):
        p = self.spec["p"]
        if not train or p == 0.0:
            return x, None
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
        return x * mask, mask

    def backward(self, dy, mask):
        return (dy if mask is None else dy * mask), {}


LAYER_TYPES = {
    "dense": Dense,
    "conv3x3": Conv3x3,
    "relu": ReLU,
    "global_avg_pool": GlobalAvgPool,
    "flatten": Flatten,
    "dropout": Dropout,
}


def build_layer(spec, rng=None):
    try:
        cls = LAYER_TYPES[spec["kind"]]
    except KeyError:
        raise ValueError(f"unknown layer kind {spec.get('kind')!r}") from None
    layer = cls(spec)
    if spec["kind"] in ("dense", "conv3x3"):
        layer.params = he_init(spec, rng if rng is not None else 0)
    return layer


def _run_stack(layers, x, train, rng, block):
    caches = []
    for idx, layer in enumerate(layers):
        try:
            layer.check_input(x.shape[1:])
        except ValueError as exc:
            raise ValueError(f"{block} layer {idx}: {exc}") from None
        x, cache = layer.forward(x, train, rng)
        caches.append(cache)
    return x, caches


def _back_stack(layers, caches, dy, block, grads, need_dx=True):
    for idx in range(len(layers) - 1, -1, -1):
        layer = layers[idx]
        if idx == 0 and not need_dx and not layer.params:
            break
        dy, g = layer.backward(dy, caches[idx])
        for key, val in g.items():
            grads[f"{block}.{idx}.{key}"] = val
    return dy


# -- model -----------------------------------------------------------------

@dataclass
class HeadOutputs:
    """Per-sample outputs for a batch of ``n`` images."""

    cls_logits: np.ndarray   # (n, 5)
    cls_probs: np.ndarray    # (n, 5)
    cls_scalar: np.ndarray   # (n,) expected grade
    reg_raw: np.ndarray      # (n,) unclamped
    reg_scalar: np.ndarray   # (n,) clamped to [0, 4.5)
    ord_logits: np.ndarray   # (n, 5)
    ord_sigmoids: np.ndarray  # (n, 5)
    ord_scalar: np.ndarray   # (n,) clamp(sum(sigmoid) - 1, 0, 4)
    fused: np.ndarray        # (n,)

    def head_scalars(self) -> np.ndarray:
        return np.stack([self.cls_scalar, self.reg_scalar, self.ord_scalar], axis=1)


class ForwardCache:
    def __init__(self, model, mode, x_shape, enc, heads, feats, outputs):
        self.model_id = id(model)
        self.mode = mode
        self.x_shape = x_shape
        self.enc = enc
        self.heads = heads
        self.feats = feats
        self.outputs = outputs
        self.used = False


class ThreeHeadModel:
    """Shared encoder feeding classification, regression and ordinal heads.

    The fused output is ``w . (cls_scalar, reg_scalar, ord_scalar) + b``; the
    fusion starts at ``w = (1/3, 1/3, 1/3)``, ``b = 0`` and is frozen until
    post-training.
    """

    def __init__(self, input_shape, encoder_specs=None, head_specs=None, seed=0, meta=None):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.encoder_specs = [dict(s) for s in (encoder_specs or default_encoder_specs(self.input_shape[0]))]
        self.head_specs = [dict(s) for s in (default_head_specs() if head_specs is None else head_specs)]
        self.meta = dict(meta or {})
        rng = np.random.default_rng(seed)
        self.encoder = [build_layer(s, rng) for s in self.encoder_specs]
        shape = self.input_shape
        for idx, layer in enumerate(self.encoder):
            try:
                layer.check_input(shape)
            except ValueError as exc:
                raise ValueError(f"encoder layer {idx}: {exc}") from None
            shape = layer.output_shape(shape)
        if len(shape) != 1:
            raise ValueError(f"encoder must end in a feature vector, got shape {shape}")
        self.feature_dim = shape[0]
        self.heads = {name: self._build_head(name, rng) for name in HEADS}
        self.fusion_w = np.full(3, 1.0 / 3.0)
        self.fusion_b = np.zeros(1)
        self.frozen = {b: False for b in BLOCKS}
        self.frozen["fusion"] = True
        # fixed per-channel input standardisation, identity until fitted
        self.input_mean = np.zeros(self.input_shape[0])
        self.input_std = np.ones(self.input_shape[0])
        self._dropout_rng = np.random.default_rng([int(seed), 1])

    def _head_layer_specs(self, name):
        return self.head_specs + [dense(self.feature_dim, HEAD_WIDTH[name])]

    def _build_head(self, name, rng):
        specs = self._head_layer_specs(name)
        shape = (self.feature_dim,)
        layers = []
        for idx, s in enumerate(specs):
            layer = build_layer(s, rng)
            try:
                layer.check_input(shape)
            except ValueError as exc:
                raise ValueError(f"{name} head layer {idx}: {exc}") from None
            shape = layer.output_shape(shape)
            layers.append(layer)
        return layers

    def blocks(self):
        out = {"encoder": self.encoder}
        out.update(self.heads)
        return out

    # parameters ----------------------------------------------------------

    def parameters(self, block=None) -> dict:
        """Flat name -> array view of the model parameters (arrays are live, not copies)."""
        out = {}
        for bname, layers in self.blocks().items():
            if block not in (None, bname):
                continue
            for idx, layer in enumerate(layers):
                for key, arr in layer.params.items():
                    out[f"{bname}.{idx}.{key}"] = arr
        if block in (None, "fusion"):
            out["fusion.w"] = self.fusion_w
            out["fusion.b"] = self.fusion_b
        return out

    def load_parameters(self, values: dict):
        live = self.parameters()
        for name, arr in values.items():
            if name not in live:
                raise KeyError(f"unknown parameter {name!r}")
            if live[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}")
            live[name][...] = arr

    def snapshot(self, block=None) -> dict:
        return {k: v.copy() for k, v in self.parameters(block).items()}

    def block_hash(self, block=None) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.parameters(block).items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "ThreeHeadModel":
        return copy.deepcopy(self)

    def set_input_norm(self, mean, std):
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        std = np.asarray(std, dtype=np.float64).reshape(-1)
        if mean.shape != self.input_mean.shape or std.shape != self.input_std.shape:
            raise ValueError(f"input norm needs {self.input_shape[0]} channel values")
        if np.any(std <= 0) or not np.all(np.isfinite(mean)):
            raise ValueError("input norm std must be positive and mean finite")
        self.input_mean, self.input_std = mean.copy(), std.copy()
        return self

    def fit_input_norm(self, images):
        """Set the input standardisation from per-channel statistics of ``images`` (n, C, H, W)."""
        images = np.asarray(images, dtype=np.float64)
        return self.set_input_norm(images.mean(axis=(0, 2, 3)), np.maximum(images.std(axis=(0, 2, 3)), 1e-6))

    # freezing ------------------------------------------------------------

    def set_frozen(self, block, frozen=True):
        if block not in BLOCKS:
            raise KeyError(f"unknown block {block!r}; expected one of {BLOCKS}")
        self.frozen[block] = bool(frozen)
        return self

    def freeze_all_but(self, *keep):
        for b in BLOCKS:
            self.set_frozen(b, b not in keep)
        return self

    def reinit_heads(self, seed):
        """Fresh He-initialised heads; encoder and fusion are left untouched."""
        rng = np.random.default_rng(seed)
        self.heads = {name: self._build_head(name, rng) for name in HEADS}
        return self

    # forward / backward --------------------------------------------------

    def forward(self, x, mode="eval", rng=None):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"encoder layer 0: expected batch of shape (n, {self.input_shape}), got {x.shape}")
        x = (x - self.input_mean[:, None, None]) / self.input_std[:, None, None]
        train = mode == "train"
        if train and rng is None:
            rng = self._dropout_rng
        feats, enc_cache = _run_stack(self.encoder, x, train, rng, "encoder")
        raw, head_caches = {}, {}
        for name in HEADS:
            raw[name], head_caches[name] = _run_stack(self.heads[name], feats, train, rng, name)
        cls_probs = softmax(raw["cls"])
        grades = np.arange(cls_probs.shape[1])
        cls_scalar = cls_probs @ grades
        reg_raw = raw["reg"][:, 0]
        reg_scalar = np.clip(reg_raw, 0.0, REG_MAX)
        ord_sig = sigmoid(raw["ord"])
        ord_scalar = np.clip(ord_sig.sum(axis=1) - 1.0, 0.0, ORD_MAX)
        fused = np.stack([cls_scalar, reg_scalar, ord_scalar], axis=1) @ self.fusion_w + self.fusion_b[0]
        out = HeadOutputs(raw["cls"], cls_probs, cls_scalar, reg_raw, reg_scalar,
                          raw["ord"], ord_sig, ord_scalar, fused)
        return out, ForwardCache(self, mode, x.shape, enc_cache, head_caches, feats, out)

    def backward(self, cache, out_grads) -> dict:
        """Parameter gradients for every unfrozen block.

        ``out_grads`` may carry ``"cls"`` (n, 5), ``"reg"`` (n,), ``"ord"`` (n, 5)
        gradients w.r.t. raw head scores and ``"fused"`` (n,) w.r.t. the fused
        output; missing entries count as zero.
        """
        if not isinstance(cache, ForwardCache):
            raise ValueError("backward needs the cache returned by forward")
        if cache.model_id != id(self):
            raise ValueError("forward cache belongs to a different model")
        if cache.used:
            raise ValueError("stale forward cache: backward already ran on it")
        cache.used = True
        out = cache.outputs
        n = out.cls_logits.shape[0]
        d_raw = {
            "cls": np.zeros_like(out.cls_logits),
            "reg": np.zeros((n, 1)),
            "ord": np.zeros_like(out.ord_logits),
        }
        if out_grads.get("cls") is not None:
            d_raw["cls"] += out_grads["cls"]
        if out_grads.get("reg") is not None:
            d_raw["reg"][:, 0] += np.asarray(out_grads["reg"]).reshape(n)
        if out_grads.get("ord") is not None:
            d_raw["ord"] += out_grads["ord"]
        grads = {}
        d_fused = out_grads.get("fused")
        if d_fused is not None:
            d_fused = np.asarray(d_fused, dtype=np.float64).reshape(n)
            if not self.frozen["fusion"]:
                grads["fusion.w"] = out.head_scalars().T @ d_fused
                grads["fusion.b"] = np.array([d_fused.sum()])
            d_cls, d_reg, d_ord = (d_fused[:, None] * self.fusion_w).T
            p = out.cls_probs
            grade_idx = np.arange(p.shape[1])
            d_raw["cls"] += p * (grade_idx - out.cls_scalar[:, None]) * d_cls[:, None]
            inside = (out.reg_raw >= 0.0) & (out.reg_raw <= REG_MAX)
            d_raw["reg"][:, 0] += d_reg * inside
            s = out.ord_sigmoids
            total = s.sum(axis=1) - 1.0
            inside = (total >= 0.0) & (total <= ORD_MAX)
            d_raw["ord"] += s * (1.0 - s) * (d_ord * inside)[:, None]

        enc_live = not self.frozen["encoder"]
        d_feat = np.zeros_like(cache.feats) if enc_live else None
        for name in HEADS:
            if self.frozen[name] and not enc_live:
                continue
            head_grads = {}
            d = _back_stack(self.heads[name], cache.heads[name], d_raw[name], name, head_grads,
                            need_dx=enc_live)
            if not self.frozen[name]:
                grads.update(head_grads)
            if enc_live:
                d_feat += d
        if enc_live:
            _back_stack(self.encoder, cache.enc, d_feat, "encoder", grads, need_dx=False)
        return grads

    # serialization -------------------------------------------------------

    def save(self, path, dtype="<f8"):
        save_checkpoint(self, path, dtype)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


def forward(model, batch, mode="eval", rng=None):
    return model.forward(batch, mode, rng)


def backward(model, cache, out_grads):
    return model.backward(cache, out_grads)


def set_frozen(model, block, frozen=True):
    return model.set_frozen(block, frozen)


def reinit_heads(model, seed):
    """Copy of ``model`` with the encoder kept and all three heads re-initialised."""
    return model.copy().reinit_heads(seed)


# -- checkpoint format -------------------------------------------------------
#
# MAGIC (8 bytes) | version u32 LE | header length u64 LE | JSON header | payload
# Tensors are raw little-endian float64 or float32 at the offsets the header
# lists, relative to the start of the payload.

MAGIC = b"ORDGCKPT"
FORMAT_VERSION = 1


def save_checkpoint(model: ThreeHeadModel, path, dtype="<f8"):
    if dtype not in ("<f8", "<f4"):
        raise ValueError("checkpoint dtype must be '<f8' or '<f4'")
    tensors, chunks, offset = [], [], 0
    for name, arr in model.parameters().items():
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        tensors.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "encoder_specs": model.encoder_specs,
        "head_specs": model.head_specs,
        "frozen": model.frozen,
        "meta": model.meta,
        "input_norm": {"mean": model.input_mean.tolist(), "std": model.input_std.tolist()},
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for data in chunks:
            fh.write(data)


def load_checkpoint(path) -> ThreeHeadModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    payload = memoryview(raw)[20 + hlen:]
    model = ThreeHeadModel(header["input_shape"], header["encoder_specs"], header["head_specs"],
                           meta=header["meta"])
    values = {}
    for t in header["tensors"]:
        buf = payload[t["offset"]:t["offset"] + t["nbytes"]]
        values[t["name"]] = np.frombuffer(buf, dtype=t["dtype"]).astype(np.float64).reshape(t["shape"])
    model.load_parameters(values)
    norm = header.get("input_norm")
    if norm is not None:
        model.set_input_norm(norm["mean"], norm["std"])
    for block, flag in header["frozen"].items():
        model.set_frozen(block, flag)
    return model
