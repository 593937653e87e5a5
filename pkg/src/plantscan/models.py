"""Model assembly: architectures, summaries, and serialization.

The three classifier kinds share one contract: ``forward`` maps a batch of
images (B, H, W, Cin) to class probabilities (B, K), and ``backward``
takes the gradient with respect to the pre-softmax logits (the training
loss fuses softmax with cross-entropy) and fills parameter gradients.

Model files use the PPDM container: magic ``PPDM``, little-endian u32
version (currently 1), little-endian u64 JSON header byte length, a UTF-8
JSON header holding the ModelSpec, the class names, and an ordered tensor
directory of {name, shape}, then each tensor's raw little-endian float32
data in directory order with no padding.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .seeding import make_rng
from .tensor import softmax

MAGIC = b"PPDM"
FORMAT_VERSION = 1
MODEL_KINDS = ("cnn", "vit", "hybrid")
DEFAULT_CLASS_NAMES = ("BIT", "Hydro", "Natural Gas", "Solar")


class ModelFormatError(Exception):
    """Malformed model file."""


class BadMagicError(ModelFormatError):
    """File does not start with the PPDM magic bytes."""


class VersionMismatchError(ModelFormatError):
    """File declares a format version this code does not read."""


class TruncatedDataError(ModelFormatError):
    """File ends before the declared header or tensor data is complete."""


class ParamCountMismatchError(ModelFormatError):
    """Header tensor directory disagrees with the architecture it declares."""


@dataclass
class ModelSpec:
    """Declarative architecture description.

    ``channels`` counts image bands only; with ``mask_channel`` the model
    consumes one extra input channel carrying the rasterized spatial mask.
    """

    kind: str = "cnn"
    height: int = 256
    width: int = 256
    channels: int = 3
    num_classes: int = 4
    class_names: list[str] = field(default_factory=lambda: list(DEFAULT_CLASS_NAMES))
    mask_channel: bool = False
    conv_filters: list[int] = field(default_factory=lambda: [16, 32, 64])
    dense_units: int = 256
    patch_size: int = 16
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    mlp_hidden: int = 128

    def __post_init__(self):
        self.class_names = [str(n) for n in self.class_names]
        self.conv_filters = [int(f) for f in self.conv_filters]
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind '{self.kind}', expected one of {MODEL_KINDS}")
        if self.num_classes != len(self.class_names):
            raise ValueError(
                f"num_classes={self.num_classes} but {len(self.class_names)} class names")
        if min(self.height, self.width, self.channels, self.num_classes) < 1:
            raise ValueError("image dims, channels, and num_classes must be positive")

    @property
    def input_channels(self) -> int:
        return self.channels + (1 if self.mask_channel else 0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown ModelSpec fields: {', '.join(unknown)}")
        return cls(**data)


class Model:
    """A materialized architecture: ordered layers plus their parameters."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self._named: list[tuple[str, L.Layer]] = []

    def _register(self, name: str, layer: L.Layer) -> L.Layer:
        self._named.append((name, layer))
        return layer

    def layer(self, name: str) -> L.Layer:
        return dict(self._named)[name]

    def params(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{ln}/{pn}", p) for ln, lay in self._named for pn, p in lay.params()]

    def grads(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{ln}/{pn}", g) for ln, lay in self._named for pn, g in lay.grads()]

    def zero_grads(self) -> None:
        for _, lay in self._named:
            lay.zero_grads()

    def param_count(self) -> int:
        return sum(p.size for _, p in self.params())

    def check_input(self, x: np.ndarray) -> None:
        s = self.spec
        want = (s.height, s.width, s.input_channels)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ValueError(f"expected input (B, {want[0]}, {want[1]}, {want[2]}), "
                             f"got {x.shape}")

    def forward_logits(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Backpropagates a gradient w.r.t. the pre-softmax logits."""
        raise NotImplementedError

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return softmax(self.forward_logits(x, train), axis=-1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x), axis=-1)

    def rows(self) -> list[tuple[str, tuple, int]]:
        """Per-layer summary rows: (display name, output shape, param count)."""
        return []


def _run_chain(chain, x, train):
    for lay in chain:
        x = lay.forward(x, train)
    return x


def _run_chain_backward(chain, dy):
    for lay in reversed(chain):
        dy = lay.backward(dy)
    return dy


class CnnModel(Model):
    """Convolutional stack: (Conv+ReLU+MaxPool) x k, Flatten, Dense+ReLU, Dense."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        if spec.kind != "cnn":
            raise ValueError(f"CnnModel requires kind 'cnn', got '{spec.kind}'")
        super().__init__(spec)
        divisor = 2 ** len(spec.conv_filters)
        if spec.height % divisor or spec.width % divisor:
            raise ValueError(f"input {spec.height}x{spec.width} not divisible by {divisor}")
        rng = make_rng(seed)
        chain: list[L.Layer] = []
        cin = spec.input_channels
        for i, f in enumerate(spec.conv_filters, start=1):
            conv = self._register(f"conv2d_{i}", L.Conv2D(cin, f, 3, rng=rng))
            chain += [conv, L.ReLULayer(), L.MaxPool2D()]
            cin = f
        chain.append(L.Flatten())
        flat = (spec.height // divisor) * (spec.width // divisor) * cin
        d1 = self._register("dense_1", L.Dense(flat, spec.dense_units, rng=rng))
        chain += [d1, L.ReLULayer()]
        chain.append(self._register("dense_2",
                                    L.Dense(spec.dense_units, spec.num_classes, rng=rng)))
        self._chain = chain

    def forward_logits(self, x, train=False):
        self.check_input(x)
        return _run_chain(self._chain, x, train)

    def backward(self, dlogits):
        return _run_chain_backward(self._chain, dlogits)

    def rows(self):
        s = self.spec
        by_name = dict(self._named)
        h, w = s.height, s.width
        out = []
        for i, f in enumerate(s.conv_filters, start=1):
            out.append((f"conv2d_{i} (Conv2D)", (h, w, f),
                        by_name[f"conv2d_{i}"].param_count()))
            h, w = h // 2, w // 2
            out.append((f"max_pooling2d_{i} (MaxPooling2D)", (h, w, f), 0))
        out.append(("flatten_1 (Flatten)", (h * w * s.conv_filters[-1],), 0))
        out.append(("dense_1 (Dense)", (s.dense_units,), by_name["dense_1"].param_count()))
        out.append(("dense_2 (Dense)", (s.num_classes,), by_name["dense_2"].param_count()))
        return out


class VitModel(Model):
    """Patch embedding, pre-norm transformer blocks, final norm, CLS head."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        if spec.kind != "vit":
            raise ValueError(f"VitModel requires kind 'vit', got '{spec.kind}'")
        super().__init__(spec)
        rng = make_rng(seed)
        pe = self._register("patch_embedding_1",
                            L.PatchEmbedding(spec.height, spec.width, spec.input_channels,
                                             spec.patch_size, spec.embed_dim, rng=rng))
        chain: list[L.Layer] = [pe]
        for i in range(1, spec.depth + 1):
            chain.append(self._register(
                f"transformer_block_{i}",
                L.TransformerBlock(spec.embed_dim, spec.num_heads, spec.mlp_hidden, rng=rng)))
        chain.append(self._register("layer_norm_1", L.LayerNorm(spec.embed_dim)))
        chain.append(L.SelectToken(0))
        chain.append(self._register("dense_1",
                                    L.Dense(spec.embed_dim, spec.num_classes, rng=rng)))
        self._chain = chain
        self._tokens = pe.num_patches + 1

    def forward_logits(self, x, train=False):
        self.check_input(x)
        return _run_chain(self._chain, x, train)

    def backward(self, dlogits):
        return _run_chain_backward(self._chain, dlogits)

    def rows(self):
        s = self.spec
        by_name = dict(self._named)
        t, d = self._tokens, s.embed_dim
        out = [("patch_embedding_1 (PatchEmbedding)", (t, d),
                by_name["patch_embedding_1"].param_count())]
        for i in range(1, s.depth + 1):
            out.append((f"transformer_block_{i} (TransformerBlock)", (t, d),
                        by_name[f"transformer_block_{i}"].param_count()))
        out.append(("layer_norm_1 (LayerNorm)", (t, d),
                    by_name["layer_norm_1"].param_count()))
        out.append(("cls_token_1 (SelectToken)", (d,), 0))
        out.append(("dense_1 (Dense)", (s.num_classes,), by_name["dense_1"].param_count()))
        return out


class HybridModel(Model):
    """CNN feature branch and ViT CLS branch fused by a linear head.

    Both branches consume the same input batch; the CNN branch runs up to
    its dense feature vector, the ViT branch up to its final-norm CLS
    embedding, and the concatenation feeds one Dense classifier.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0):
        if spec.kind != "hybrid":
            raise ValueError(f"HybridModel requires kind 'hybrid', got '{spec.kind}'")
        super().__init__(spec)
        divisor = 2 ** len(spec.conv_filters)
        if spec.height % divisor or spec.width % divisor:
            raise ValueError(f"input {spec.height}x{spec.width} not divisible by {divisor}")
        rng = make_rng(seed)
        cin = spec.input_channels

        cnn: list[L.Layer] = []
        c = cin
        for i, f in enumerate(spec.conv_filters, start=1):
            conv = self._register(f"conv2d_{i}", L.Conv2D(c, f, 3, rng=rng))
            cnn += [conv, L.ReLULayer(), L.MaxPool2D()]
            c = f
        cnn.append(L.Flatten())
        flat = (spec.height // divisor) * (spec.width // divisor) * c
        d1 = self._register("dense_1", L.Dense(flat, spec.dense_units, rng=rng))
        cnn += [d1, L.ReLULayer()]
        self._cnn_chain = cnn

        vit: list[L.Layer] = [self._register(
            "patch_embedding_1",
            L.PatchEmbedding(spec.height, spec.width, cin,
                             spec.patch_size, spec.embed_dim, rng=rng))]
        for i in range(1, spec.depth + 1):
            vit.append(self._register(
                f"transformer_block_{i}",
                L.TransformerBlock(spec.embed_dim, spec.num_heads, spec.mlp_hidden, rng=rng)))
        vit.append(self._register("layer_norm_1", L.LayerNorm(spec.embed_dim)))
        vit.append(L.SelectToken(0))
        self._vit_chain = vit
        self._tokens = vit[0].num_patches + 1

        self._fusion = self._register(
            "dense_2", L.Dense(spec.dense_units + spec.embed_dim, spec.num_classes, rng=rng))

    def forward_logits(self, x, train=False):
        self.check_input(x)
        feat_cnn = _run_chain(self._cnn_chain, x, train)
        feat_vit = _run_chain(self._vit_chain, x, train)
        fused = np.concatenate([feat_cnn, feat_vit], axis=1)
        return self._fusion.forward(fused, train)

    def backward(self, dlogits):
        dfused = self._fusion.backward(dlogits)
        cut = self.spec.dense_units
        dx_cnn = _run_chain_backward(self._cnn_chain, dfused[:, :cut])
        dx_vit = _run_chain_backward(self._vit_chain, dfused[:, cut:])
        return dx_cnn + dx_vit

    def rows(self):
        s = self.spec
        by_name = dict(self._named)
        h, w = s.height, s.width
        out = []
        for i, f in enumerate(s.conv_filters, start=1):
            out.append((f"conv2d_{i} (Conv2D)", (h, w, f),
                        by_name[f"conv2d_{i}"].param_count()))
            h, w = h // 2, w // 2
            out.append((f"max_pooling2d_{i} (MaxPooling2D)", (h, w, f), 0))
        out.append(("flatten_1 (Flatten)", (h * w * s.conv_filters[-1],), 0))
        out.append(("dense_1 (Dense)", (s.dense_units,), by_name["dense_1"].param_count()))
        t, d = self._tokens, s.embed_dim
        out.append(("patch_embedding_1 (PatchEmbedding)", (t, d),
                    by_name["patch_embedding_1"].param_count()))
        for i in range(1, s.depth + 1):
            out.append((f"transformer_block_{i} (TransformerBlock)", (t, d),
                        by_name[f"transformer_block_{i}"].param_count()))
        out.append(("layer_norm_1 (LayerNorm)", (t, d),
                    by_name["layer_norm_1"].param_count()))
        out.append(("cls_token_1 (SelectToken)", (d,), 0))
        out.append(("concatenate_1 (Concatenate)", (s.dense_units + d,), 0))
        out.append(("dense_2 (Dense)", (s.num_classes,), self._fusion.param_count()))
        return out


def build_cnn(spec: ModelSpec, seed: int = 0) -> CnnModel:
    return CnnModel(spec, seed)


def build_vit(spec: ModelSpec, seed: int = 0) -> VitModel:
    return VitModel(spec, seed)


def build_hybrid(spec: ModelSpec, seed: int = 0) -> HybridModel:
    return HybridModel(spec, seed)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    builders = {"cnn": CnnModel, "vit": VitModel, "hybrid": HybridModel}
    return builders[spec.kind](spec, seed)


def _shape_cell(dims) -> str:
    return "(None, " + ",".join(str(int(d)) for d in dims) + ")"


def summarize(model: Model) -> str:
    """Text table with one row per layer: Layer (type) / Output Shape / Param #."""
    header = ("Layer (type)", "Output Shape", "Param #")
    cells = [(name, _shape_cell(shape), f"{count:,}")
             for name, shape, count in model.rows()]
    widths = [max([len(h)] + [len(c[i]) for c in cells]) + 2
              for i, h in enumerate(header)]
    rule = "=" * (sum(widths))

    def fmt(row):
        return "".join(col.ljust(w) for col, w in zip(row, widths)).rstrip()

    lines = [fmt(header), rule]
    lines += [fmt(c) for c in cells]
    lines.append(rule)
    lines.append(f"Total params: {model.param_count():,}")
    return "\n".join(lines)


def save_model(model: Model, path) -> None:
    named = model.params()
    header = {
        "spec": model.spec.to_dict(),
        "class_names": list(model.spec.class_names),
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in named],
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, p in named:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not a PPDM model file (bad magic)")
    if len(buf) < 16:
        raise TruncatedDataError("file ends inside the fixed header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"unsupported format version {version}, this build reads {FORMAT_VERSION}")
    (hlen,) = struct.unpack_from("<Q", buf, 8)
    off = 16
    if len(buf) < off + hlen:
        raise TruncatedDataError("JSON header truncated")
    try:
        header = json.loads(buf[off:off + hlen].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        described = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"unreadable model header: {e}") from e
    off += hlen
    if header.get("class_names") != spec.class_names:
        raise ModelFormatError("header class_names disagree with the embedded ModelSpec")

    model = build_model(spec, seed=0)
    expected = model.params()
    if len(described) != len(expected):
        raise ParamCountMismatchError(
            f"header lists {len(described)} tensors, architecture has {len(expected)}")
    for entry, (name, p) in zip(described, expected):
        if entry.get("name") != name or tuple(entry.get("shape", ())) != p.shape:
            raise ParamCountMismatchError(
                f"header tensor {entry.get('name')} {entry.get('shape')} does not match "
                f"architecture tensor {name} {list(p.shape)}")
        nbytes = p.size * 4
        if len(buf) < off + nbytes:
            raise TruncatedDataError(f"tensor data truncated at '{name}'")
        data = np.frombuffer(buf, dtype="<f4", count=p.size, offset=off).reshape(p.shape)
        np.copyto(p, data)
        off += nbytes
    if off != len(buf):
        raise ModelFormatError(f"{len(buf) - off} trailing bytes after tensor data")
    return model
