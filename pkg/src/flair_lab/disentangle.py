"""Content/style encoders, the decoder, and the transformation model built on them.

``transform(x_src, x_ref)`` decodes the content of ``x_src`` combined with
the style of ``x_ref``. The invariance loss asks a transformed instance to
reproduce its content source when the style source comes from the same
domain but the other class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import ContractError, DimensionError


class MLP:
    """Two-layer perceptron: tanh hidden layer, linear output."""

    def __init__(self, sizes, rng, name="mlp"):
        self.sizes = tuple(sizes)
        self.name = name
        self.layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = nk.param(rng.uniform(-bound, bound, size=(fan_in, fan_out)), f"{name}.W{i}")
            b = nk.param(np.zeros(fan_out), f"{name}.b{i}")
            self.layers.append((w, b))

    def params(self):
        return [t for layer in self.layers for t in layer]

    def __call__(self, x):
        h = x if isinstance(x, nk.Node) else nk.const(x)
        if h.shape[-1] != self.sizes[0]:
            raise DimensionError(f"{self.name}: expected input dim {self.sizes[0]}, got shape {h.shape}")
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = nk.add(nk.matmul(h, w), b)
            if i < last:
                h = nk.tanh(h)
        return h

    def numpy(self, x):
        """Forward pass on plain arrays without recording a graph."""
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.sizes[0]:
            raise DimensionError(f"{self.name}: expected input dim {self.sizes[0]}, got shape {h.shape}")
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.value + b.value
            if i < last:
                h = np.tanh(h)
        return h


@dataclass
class EncoderParams:
    content: MLP
    style: MLP | None
    decoder: MLP | None

    @classmethod
    def init(cls, d=16, content_dim=8, style_dim=4, hidden=32, rng=None, with_transform=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        content = MLP((d, hidden, content_dim), rng, "content")
        if not with_transform:
            return cls(content, None, None)
        style = MLP((d, hidden, style_dim), rng, "style")
        decoder = MLP((content_dim + style_dim, hidden, d), rng, "decoder")
        return cls(content, style, decoder)

    @property
    def has_transform(self):
        return self.style is not None

    def params(self):
        out = list(self.content.params())
        if self.has_transform:
            out += self.style.params() + self.decoder.params()
        return out


def encode_content(x, enc):
    return enc.content(x)


def encode_style(x, enc):
    return enc.style(x)


def transform(x_src, x_style_ref, enc):
    """Decode content of ``x_src`` with the style of ``x_style_ref``."""
    if not enc.has_transform:
        raise ContractError("transformation model disabled for this encoder set")
    src = x_src if isinstance(x_src, nk.Node) else nk.const(x_src)
    ref = x_style_ref if isinstance(x_style_ref, nk.Node) else nk.const(x_style_ref)
    if src.shape != ref.shape:
        raise DimensionError(f"transform: shapes {src.shape} and {ref.shape} do not conform")
    return enc.decoder(nk.concat([enc.content(src), enc.style(ref)], axis=-1))


def transform_from_codes(content, x_style_ref, enc):
    """Same as :func:`transform` when the source content is already encoded."""
    return enc.decoder(nk.concat([content, enc.style(x_style_ref)], axis=-1))


INV_PAIRS = ((0, 1), (2, 3))
"""(content source, style source) quartet columns compared by the invariance loss."""


def r_inv(batch, enc, content=None):
    """Mean over quartets of |r1 - T(r1, r2)|_1 + |r3 - T(r3, r4)|_1.

    ``content`` may pass the four encoded quartet columns (a list of nodes)
    so a training step can share the encoder graph with the other losses.
    """
    x = batch.x
    terms = []
    for src, ref in INV_PAIRS:
        if content is None:
            out = transform(x[:, src], x[:, ref], enc)
        else:
            out = transform_from_codes(content[src], x[:, ref], enc)
        terms.append(nk.l1_distance(nk.const(x[:, src]), out))
    return nk.mean(nk.add(terms[0], terms[1]))


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_HEADER = "# flair-lab checkpoint v1"


def save_tensors(named, path):
    """Text checkpoint.

    After the header line, each tensor takes two lines: ``name shape`` (shape
    as comma-separated ints, ``-`` for a scalar) then its row-major values
    in ``repr`` form. Tensors appear in the order given.
    """
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_HEADER + "\n")
        for name, arr in named:
            arr = np.asarray(arr, dtype=np.float64)
            shape = ",".join(str(s) for s in arr.shape) or "-"
            fh.write(f"{name} {shape}\n")
            fh.write(" ".join(repr(float(v)) for v in arr.ravel()) + "\n")


def load_tensors(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ContractError(f"{path}: not a flair-lab checkpoint")
    out = {}
    for i in range(1, len(lines), 2):
        name, shape = lines[i].split(" ")
        dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        vals = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        out[name] = vals.reshape(dims)
    return out


def encoder_tensors(enc):
    return [(p.name, p.value) for p in enc.params()]
