"""Joint image/text embedding providers.

Two providers are available:

* :class:`ToyProvider` -- a deterministic stand-in for a CLIP-like model.  Its
  "last convolutional feature" is a bank of RBF colour detectors evaluated on
  ``grid_stride`` x ``grid_stride`` pixel cells, and its value/output
  projections are two 1x1 convolutions whose composition maps each canonical
  class colour onto that class's text vector.
* :class:`PrecomputedProvider` -- reads externally computed features from a
  directory of ``IMRSEG-TENSOR`` files (see :func:`write_precomputed`).

Both expose ``activations`` (the conv feature), ``project`` (the positionwise
value+output remapping) and ``score`` (cosine between the pooled image
embedding and a text vector), which is everything Grad-CAM and the dense
cosine path need.
"""

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CapabilityError, ConfigError, ShapeError, UnknownClassError
from .tensorio import read_tensor, write_tensor

PLACEHOLDER = "[class]"
DEFAULT_TEMPLATE = "a photo of a [class]"

TOY_CLASSES = (
    "circle", "square", "triangle", "cross", "ring", "diamond",
    "star", "hexagon", "ellipse", "bar", "crescent", "frame",
)


def canonical_color(index, n_classes=len(TOY_CLASSES)):
    """RGB in [0, 1] for class ``index``; hues are evenly spaced."""
    return np.array(colorsys.hsv_to_rgb(index / n_classes, 0.9, 0.95), dtype=np.float32)


@dataclass(frozen=True)
class ProviderSpec:
    kind: str = "toy"
    d_emb: int = 16
    seed: int = 0
    conv_feature_channels: int = 32
    grid_stride: int = 4
    rbf_width: float = 0.2
    noise_scale: float = 0.02
    path: str = ""

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class TextEmbedding:
    vector: torch.Tensor
    prompt: str


@dataclass
class DenseFeatureMap:
    tensor: torch.Tensor          # (h, w, D)
    source_resolution: tuple


@dataclass
class GlobalEmbedding:
    vector: torch.Tensor


def make_prompt(class_label, template=DEFAULT_TEMPLATE):
    if template.count(PLACEHOLDER) != 1:
        raise ConfigError(f"template must contain exactly one {PLACEHOLDER!r}: {template!r}")
    return template.replace(PLACEHOLDER, class_label)


def image_to_tensor(image, channels=3):
    """(H, W, C) array-like in [0, 1] -> float64 torch tensor (C, H, W)."""
    t = torch.as_tensor(np.asarray(image), dtype=torch.float64)
    if t.ndim != 3 or t.shape[-1] != channels:
        raise ShapeError(f"expected an (H, W, {channels}) image, got shape {tuple(t.shape)}")
    return t.permute(2, 0, 1).contiguous()


class ToyProvider:
    """Seeded colour-detector provider.

    Construction order of the random stream matters and is part of the
    contract: the class codebook is the *first* draw,
    ``default_rng(seed).standard_normal((n_classes, d_emb))``, rows
    unit-normalised.
    """

    differentiable = True

    def __init__(self, spec=ProviderSpec(), classes=TOY_CLASSES):
        if spec.kind != "toy":
            raise ConfigError(f"ToyProvider cannot build kind {spec.kind!r}")
        n_cls, d, c = len(classes), spec.d_emb, spec.conv_feature_channels
        if d <= n_cls:
            raise ConfigError(f"d_emb={d} must exceed the number of classes ({n_cls})")
        if c <= n_cls:
            raise ConfigError(f"conv_feature_channels={c} must exceed the number of classes")
        self.spec = spec
        self.classes = tuple(classes)
        self.d_emb = d
        rng = np.random.default_rng(spec.seed)

        codebook = rng.standard_normal((n_cls, d))
        codebook /= np.linalg.norm(codebook, axis=1, keepdims=True)

        # non-class detectors respond to greys and desaturated tints
        n_extra = c - n_cls
        grey = rng.uniform(0.05, 0.95, size=(n_extra, 1))
        tint = 0.15 * (rng.uniform(size=(n_extra, 3)) - 0.5)
        extra_anchors = np.clip(grey + tint, 0.0, 1.0)
        anchors = np.concatenate(
            [np.stack([canonical_color(i, n_cls) for i in range(n_cls)]), extra_anchors])

        # embed non-class detectors in the orthogonal complement of the codebook
        _, _, vt = np.linalg.svd(codebook)
        complement = vt[n_cls:]
        extra_cols = complement.T @ rng.standard_normal((d - n_cls, n_extra))
        extra_cols /= np.linalg.norm(extra_cols, axis=0, keepdims=True)
        mixing = np.concatenate([codebook.T, extra_cols], axis=1)
        mixing = mixing + spec.noise_scale * rng.standard_normal(mixing.shape)

        # factor mixing = c o v with v a random orthogonal 1x1 conv plus bias
        v_w, _ = np.linalg.qr(rng.standard_normal((c, c)))
        v_b = 0.1 * rng.standard_normal(c)
        c_w = mixing @ v_w.T
        c_b = -c_w @ v_b

        as_t = lambda a: torch.as_tensor(a, dtype=torch.float64)
        self.codebook = as_t(codebook)
        self.anchors = as_t(anchors)
        self.v_weight, self.v_bias = as_t(v_w), as_t(v_b)
        self.c_weight, self.c_bias = as_t(c_w), as_t(c_b)

    def class_index(self, label):
        try:
            return self.classes.index(label)
        except ValueError:
            raise UnknownClassError(f"unknown class {label!r}; known: {', '.join(self.classes)}") from None

    def text_vector(self, class_label):
        return self.codebook[self.class_index(class_label)].clone()

    def grid_size(self, height, width):
        s = self.spec.grid_stride
        return -(-height // s), -(-width // s)

    def activations(self, image):
        """RBF colour-detector responses on the feature grid, (C, h, w)."""
        x = image_to_tensor(image)
        cells = F.adaptive_avg_pool2d(x[None], self.grid_size(*x.shape[1:]))[0]
        diff = cells[None] - self.anchors[:, :, None, None]
        return torch.exp(-(diff ** 2).sum(1) / (2 * self.spec.rbf_width ** 2))

    def project(self, act):
        """Positionwise value then output projection: (C, h, w) -> (D, h, w)."""
        return _project(act, self.v_weight, self.v_bias, self.c_weight, self.c_bias)

    def pooled(self, act):
        return self.project(act).mean(dim=(1, 2))

    def score(self, act, text_vector):
        return F.cosine_similarity(self.pooled(act), text_vector, dim=0)


def _project(act, v_w, v_b, c_w, c_b):
    u = torch.einsum("oc,chw->ohw", v_w, act) + v_b[:, None, None]
    return torch.einsum("dc,chw->dhw", c_w, u) + c_b[:, None, None]


class PrecomputedProvider:
    """Features produced elsewhere, looked up by image id.

    ``manifest.json`` layout::

        {"d_emb": 1024,
         "images": {"<image id>": "<file>"},        # (h, w, C) tensors
         "texts": {"<class label>": "<file>"},      # (D,) tensors
         "projection": {"v_weight": f, "v_bias": f, "c_weight": f, "c_bias": f}}

    ``projection`` is optional.  Without it the image tensors are taken to be
    the already remapped dense maps (C == D) and Grad-CAM is unavailable.
    """

    def __init__(self, root):
        self.root = Path(root)
        with open(self.root / "manifest.json") as fh:
            self.manifest = json.load(fh)
        self.d_emb = int(self.manifest["d_emb"])
        self.classes = tuple(self.manifest["texts"])
        proj = self.manifest.get("projection")
        self.differentiable = proj is not None
        if proj:
            load = lambda k: torch.as_tensor(read_tensor(self.root / proj[k]), dtype=torch.float64)
            self.v_weight, self.v_bias = load("v_weight"), load("v_bias")
            self.c_weight, self.c_bias = load("c_weight"), load("c_bias")
            if self.c_weight.shape[0] != self.d_emb:
                raise ConfigError("projection output width disagrees with d_emb")
        self.spec = ProviderSpec(kind="precomputed-import", d_emb=self.d_emb, path=str(self.root))

    def text_vector(self, class_label):
        try:
            rel = self.manifest["texts"][class_label]
        except KeyError:
            raise UnknownClassError(f"no text embedding for {class_label!r}") from None
        vec = torch.as_tensor(read_tensor(self.root / rel), dtype=torch.float64).reshape(-1)
        if vec.numel() != self.d_emb:
            raise ShapeError(f"text embedding for {class_label!r} has {vec.numel()} != {self.d_emb} entries")
        return vec

    def activations(self, image_id):
        try:
            rel = self.manifest["images"][image_id]
        except (KeyError, TypeError):
            raise ShapeError(f"precomputed provider takes a known image id, got {image_id!r}") from None
        arr = torch.as_tensor(read_tensor(self.root / rel), dtype=torch.float64)
        if arr.ndim != 3:
            raise ShapeError(f"{rel}: expected (h, w, C) features, got {tuple(arr.shape)}")
        return arr.permute(2, 0, 1).contiguous()

    def project(self, act):
        if not self.differentiable:
            if act.shape[0] != self.d_emb:
                raise ShapeError(f"dense map has {act.shape[0]} channels, expected {self.d_emb}")
            return act
        return _project(act, self.v_weight, self.v_bias, self.c_weight, self.c_bias)

    def pooled(self, act):
        return self.project(act).mean(dim=(1, 2))

    def score(self, act, text_vector):
        if not self.differentiable:
            raise CapabilityError("precomputed features without projection weights cannot be differentiated")
        return F.cosine_similarity(self.pooled(act), text_vector, dim=0)


def write_precomputed(root, d_emb, images, texts, projection=None):
    """Write a precomputed-feature directory.

    ``images`` maps id -> (h, w, C) array, ``texts`` maps label -> (D,) array,
    ``projection`` optionally maps v_weight/v_bias/c_weight/c_bias -> arrays.
    """
    root = Path(root)
    for sub in ("images", "texts", "projection"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    manifest = {"d_emb": int(d_emb), "images": {}, "texts": {}}
    for key, arr in images.items():
        rel = f"images/{key}.imrt"
        write_tensor(root / rel, arr)
        manifest["images"][key] = rel
    for key, arr in texts.items():
        rel = f"texts/{key}.imrt"
        write_tensor(root / rel, arr)
        manifest["texts"][key] = rel
    if projection is not None:
        manifest["projection"] = {}
        for key, arr in projection.items():
            rel = f"projection/{key}.imrt"
            write_tensor(root / rel, arr)
            manifest["projection"][key] = rel
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return root


def build_provider(spec):
    if spec.kind == "toy":
        return ToyProvider(spec)
    if spec.kind == "precomputed-import":
        return PrecomputedProvider(spec.path)
    raise ConfigError(f"unknown provider kind {spec.kind!r}")


def encode_text(provider, class_label, template=DEFAULT_TEMPLATE):
    prompt = make_prompt(class_label, template)
    return TextEmbedding(vector=provider.text_vector(class_label), prompt=prompt)


def _resolution(image):
    if isinstance(image, str):
        return None
    shape = np.shape(image)
    return (int(shape[0]), int(shape[1]))


def encode_image_dense(provider, image):
    dense = provider.project(provider.activations(image))
    return DenseFeatureMap(tensor=dense.permute(1, 2, 0).contiguous(),
                           source_resolution=_resolution(image))


def encode_image_global(provider, image):
    return GlobalEmbedding(vector=provider.pooled(provider.activations(image)))
