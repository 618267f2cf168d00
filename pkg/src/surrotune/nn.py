"""Surrogate and parameter-learner networks, Adam, and model bundles."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import rng as rngmod

MAGIC = b"MDL1"
_HALF = ad.Tensor(-0.5)  # inputs live in [0, 1]; the nets see them centred


class ModelFormatError(ValueError):
    pass


class _Conv:
    __slots__ = ("name", "kernel", "bias")

    def __init__(self, name: str, k: int, cin: int, cout: int, rng: np.random.Generator):
        s = math.sqrt(1.0 / (k * k * cin))
        self.name = name
        self.kernel = ad.Tensor(rng.uniform(-s, s, (k, k, cin, cout)), requires_grad=True, name=f"{name}.kernel")
        self.bias = ad.Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.conv2d(x, self.kernel, self.bias)


class _Net:
    kind = ""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rng = rngmod.make_rng(self.seed, rngmod.INIT)
        self.layers: list = []

    def _conv(self, name, k, cin, cout) -> _Conv:
        layer = _Conv(name, k, cin, cout, self._rng)
        self.layers.append(layer)
        return layer

    def parameters(self) -> list:
        out = []
        for layer in self.layers:
            out += [layer.kernel, layer.bias]
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def descriptor(self) -> dict:
        raise NotImplementedError

    def _check_input(self, x: ad.Tensor, channels: int, what: str):
        h, w, c = x.shape
        if h % 4 or w % 4:
            raise ValueError(f"{what}: spatial extents must be divisible by 4, got {h}x{w}")
        if c != channels:
            raise ValueError(f"{what}: expected {channels} channels, got {c}")


class SurrogateNet(_Net):
    """Encoder-decoder that predicts the black-box output from (image, parameter planes).

    The parameter planes are concatenated with the input and, mean-pooled to
    the matching resolution, with the input of every deeper encoder stage.
    Decoder stages merge encoder features additively.  The head sees the raw
    image again and predicts a correction in logit space, so the output is
    sigmoid(logit(x) + head); an untrained net starts close to the identity.
    """

    kind = "surrogate"

    def __init__(self, in_channels: int = 3, n_params: int = 5, widths: Sequence[int] = (32, 64, 128), seed: int = 0):
        super().__init__(seed)
        self.in_channels, self.n_params, self.widths = int(in_channels), int(n_params), tuple(int(w) for w in widths)
        c, p, ws = self.in_channels, self.n_params, self.widths
        self.enc = [self._conv(f"enc{i}", 3, (c if i == 0 else ws[i - 1]) + p, w) for i, w in enumerate(ws)]
        self.lift = []
        self.dec = []
        for i in range(len(ws) - 1, 0, -1):
            self.lift.append(self._conv(f"lift{i}", 1, ws[i], ws[i - 1]))
            self.dec.append(self._conv(f"dec{i - 1}", 3, ws[i - 1], ws[i - 1]))
        self.head = self._conv("head", 3, ws[0] + c, c)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "in_channels": self.in_channels, "n_params": self.n_params,
                "widths": list(self.widths), "seed": self.seed}

    def __call__(self, image: ad.Tensor, planes: ad.Tensor) -> ad.Tensor:
        self._check_input(image, self.in_channels, "surrogate image")
        if planes.shape != image.shape[:2] + (self.n_params,):
            raise ValueError(f"surrogate planes: expected {image.shape[:2] + (self.n_params,)}, got {planes.shape}")
        feats = []
        x = ad.add(image, _HALF)
        planes = ad.add(planes, _HALF)
        for i, conv in enumerate(self.enc):
            if i:
                x = ad.downsample2(x)
                planes = ad.downsample2(planes)
            x = ad.relu(conv(ad.concat_channels(x, planes)))
            feats.append(x)
        for lift, dec, skip in zip(self.lift, self.dec, reversed(feats[:-1])):
            x = ad.relu(dec(ad.add(ad.upsample2(lift(x)), skip)))
        base = ad.logit(image)
        return ad.sigmoid(ad.add(self.head(ad.concat_channels(x, ad.add(image, _HALF))), base))


class ParamLearnerNet(_Net):
    """Image -> per-pixel parameter layer in (0, 1)^P."""

    kind = "param_learner"

    def __init__(self, in_channels: int = 3, n_params: int = 5, widths: Sequence[int] = (32, 64), seed: int = 0):
        super().__init__(seed)
        self.in_channels, self.n_params, self.widths = int(in_channels), int(n_params), tuple(int(w) for w in widths)
        ws = self.widths
        self.enc = [self._conv(f"enc{i}", 3, self.in_channels if i == 0 else ws[i - 1], w) for i, w in enumerate(ws)]
        self.lift, self.dec = [], []
        for i in range(len(ws) - 1, 0, -1):
            self.lift.append(self._conv(f"lift{i}", 1, ws[i], ws[i - 1]))
            self.dec.append(self._conv(f"dec{i - 1}", 3, ws[i - 1], ws[i - 1]))
        self.head = self._conv("head", 1, ws[0], self.n_params)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "in_channels": self.in_channels, "n_params": self.n_params,
                "widths": list(self.widths), "seed": self.seed}

    def __call__(self, image: ad.Tensor) -> ad.Tensor:
        self._check_input(image, self.in_channels, "param learner image")
        feats = []
        x = ad.add(image, _HALF)
        for i, conv in enumerate(self.enc):
            if i:
                x = ad.downsample2(x)
            x = ad.relu(conv(x))
            feats.append(x)
        for lift, dec, skip in zip(self.lift, self.dec, reversed(feats[:-1])):
            x = ad.relu(dec(ad.add(ad.upsample2(lift(x)), skip)))
        return ad.sigmoid(self.head(x))


def surrogate_forward(net: SurrogateNet, image, planes) -> ad.Tensor:
    return net(_as_tensor(image), _as_tensor(planes))


def param_learner_forward(net: ParamLearnerNet, image) -> ad.Tensor:
    return net(_as_tensor(image))


def _as_tensor(x) -> ad.Tensor:
    return x if isinstance(x, ad.Tensor) else ad.Tensor(x)


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[ad.Tensor]) -> None:
    """One bias-corrected Adam update in place; gradients are left untouched."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"missing grad for parameter {p.name or p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("parameter list changed between Adam steps")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.data = (p.data - step).astype(p.data.dtype)


# -- bundles ------------------------------------------------------------------

def build_model(descriptor: dict):
    kinds = {SurrogateNet.kind: SurrogateNet, ParamLearnerNet.kind: ParamLearnerNet}
    try:
        cls = kinds[descriptor["kind"]]
        return cls(descriptor["in_channels"], descriptor["n_params"], descriptor["widths"], descriptor["seed"])
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"architecture mismatch: bad descriptor ({exc})") from None


def save_model(net: _Net, path) -> None:
    params = net.parameters()
    header = dict(net.descriptor(), tensors=[[p.name, list(p.shape)] for p in params])
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for p in params:
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_model(path, expect: Optional[dict] = None):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ModelFormatError("bad magic")
    if len(blob) < 8:
        raise ModelFormatError("truncated payload")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    if len(blob) < 8 + hlen:
        raise ModelFormatError("truncated payload")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ModelFormatError("corrupt header") from None
    tensors = header.pop("tensors", None)
    if expect is not None and any(header.get(k) != v for k, v in expect.items()):
        raise ModelFormatError(f"architecture mismatch: expected {expect}, file has {header}")
    net = build_model(header)
    params = net.parameters()
    if tensors != [[p.name, list(p.shape)] for p in params]:
        raise ModelFormatError("architecture mismatch: tensor layout differs from descriptor")
    off = 8 + hlen
    for p in params:
        n = p.data.size
        if len(blob) < off + 4 * n:
            raise ModelFormatError("truncated payload")
        p.data = np.frombuffer(blob, "<f4", count=n, offset=off).reshape(p.shape).astype(np.float32)
        off += 4 * n
    if off != len(blob):
        raise ModelFormatError("trailing bytes after payload")
    return net
