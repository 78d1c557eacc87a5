"""Fixed differentiable encoders, a toy base classifier and the embedding cache.

Images are NHWC arrays with pixels in [0, 1]. An :class:`Encoder` wraps a
torch module mapping images to ``embed_dim``-vectors; once frozen its
parameters never change and it is safe to share between threads.
"""
import copy
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import CONTRASTIVE_POLICY, AugmentPolicy, augment
from .errors import CorruptionError, FormatError, InvalidInputError, StateError, TrainingDivergedError
from .heads import LinearHead


class ConvBackbone(nn.Module):
    """3x3 conv blocks (all but the first strided) with global average pooling.

    With ``multiscale`` the pooled outputs of every block are concatenated,
    so the embedding keeps low-level texture statistics alongside the
    deeper features.
    """

    def __init__(self, in_channels=3, widths=(32, 64, 128), embed_dim=None, batch_norm=True, multiscale=True,
                 local_contrast=True):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.in_channels = in_channels
        self.local_contrast = local_contrast
        prev = in_channels * (2 if local_contrast else 1)
        for i, width in enumerate(widths):
            layers = [nn.Conv2d(prev, width, 3, stride=1 if i == 0 else 2, padding=1, bias=not batch_norm)]
            if batch_norm:
                layers.append(nn.BatchNorm2d(width))
            layers.append(nn.ReLU())
            self.blocks.append(nn.Sequential(*layers))
            prev = width
        self.multiscale = multiscale
        pooled = sum(widths) if multiscale else prev
        self.proj = nn.Linear(pooled, embed_dim) if embed_dim and embed_dim != pooled else None
        self.embed_dim = embed_dim or pooled

    def forward(self, x):
        if self.local_contrast:
            x = torch.cat([x, x - F.avg_pool2d(x, 3, stride=1, padding=1, count_include_pad=False)], dim=1)
        pooled = []
        for block in self.blocks:
            x = block(x)
            if self.multiscale:
                pooled.append(x.mean(dim=(2, 3)))
        h = torch.cat(pooled, dim=1) if self.multiscale else x.mean(dim=(2, 3))
        return self.proj(h) if self.proj is not None else h


class LinearBackbone(nn.Module):
    """``phi(x) = A vec(x) + c``; used for analytic checks."""

    def __init__(self, in_features, embed_dim, bias=True):
        super().__init__()
        self.linear = nn.Linear(in_features, embed_dim, bias=bias)
        self.embed_dim = embed_dim

    def forward(self, x):
        return self.linear(x.reshape(x.shape[0], -1))


class Encoder:
    """A mapping from NHWC images of ``input_shape`` (H, W, C) to R^embed_dim."""

    def __init__(self, module, input_shape, embed_dim=None, frozen=False, resize=False):
        self.module = module
        self.input_shape = tuple(int(s) for s in input_shape)
        self.embed_dim = int(embed_dim if embed_dim is not None else module.embed_dim)
        self.frozen = False
        self.resize = resize
        self.history = []
        if frozen:
            self.freeze()

    @property
    def dtype(self):
        return next(self.module.parameters()).dtype

    def freeze(self):
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def to(self, dtype):
        """Copy with parameters cast to ``dtype`` (float64 for gradient checks)."""
        other = copy.copy(self)
        other.module = copy.deepcopy(self.module).to(dtype)
        return other

    def __call__(self, x):
        """Differentiable forward pass on an NHWC tensor."""
        return self.module(x.permute(0, 3, 1, 2))

    def prepare(self, images):
        """Validate a batch (or single image) and return an NHWC tensor in the encoder dtype."""
        x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
        x = x.to(self.dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4:
            raise InvalidInputError(f"expected an image or a batch of images, got shape {tuple(x.shape)}")
        if tuple(x.shape[1:]) != self.input_shape:
            if not self.resize or x.shape[3] != self.input_shape[2]:
                raise InvalidInputError(f"image shape {tuple(x.shape[1:])} does not match encoder input {self.input_shape}")
            h, w = self.input_shape[:2]
            x = F.interpolate(x.permute(0, 3, 1, 2), size=(h, w), mode="bilinear",
                              align_corners=False).permute(0, 2, 3, 1)
        if x.numel() and (x.min() < -1e-6 or x.max() > 1 + 1e-6):
            raise InvalidInputError("pixel values must lie in [0, 1]")
        return x, single


def embed(encoder, images, batch_size=256):
    """Embeddings as a numpy array: ``(d,)`` for one image, ``(n, d)`` for a batch."""
    x, single = encoder.prepare(images)
    outs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            outs.append(encoder(x[start:start + batch_size]))
    if outs:
        e = torch.cat(outs).numpy()
    else:
        e = np.zeros((0, encoder.embed_dim), dtype=torch.empty(0, dtype=encoder.dtype).numpy().dtype)
    return e[0] if single else e


def embed_vjp(encoder, images, cotangent):
    """Gradient of ``<cotangent, phi(x)>`` with respect to ``x`` (same shape as ``images``)."""
    if not encoder.frozen:
        raise StateError("embed_vjp requires a frozen encoder")
    x, single = encoder.prepare(images)
    v = torch.as_tensor(np.asarray(cotangent), dtype=encoder.dtype)
    if v.shape[-1] != encoder.embed_dim:
        raise InvalidInputError(f"cotangent length {v.shape[-1]} does not match embed_dim {encoder.embed_dim}")
    if v.ndim == 1:
        v = v.expand(x.shape[0], -1)
    x = x.detach().requires_grad_(True)
    out = encoder(x)
    (grad,) = torch.autograd.grad(out, x, grad_outputs=v)
    g = grad.numpy()
    return g[0] if single else g


@dataclass
class ContrastiveConfig:
    temperature: float = 0.5
    batch_size: int = 128
    epochs: int = 20
    projection_dim: int = 64
    seed: int = 0
    lr: float = 1e-3
    widths: tuple = (32, 64, 128)
    embed_dim: int = 128
    augmentation: AugmentPolicy = field(default_factory=lambda: CONTRASTIVE_POLICY)

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidInputError("temperature must be positive")
        if self.projection_dim < 1 or self.embed_dim < 1:
            raise InvalidInputError("projection_dim and embed_dim must be positive")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be non-negative")


@dataclass
class SupervisedConfig:
    batch_size: int = 128
    epochs: int = 15
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.0
    widths: tuple = (32, 64, 128)
    embed_dim: int = 128


def nt_xent_loss(z1, z2, temperature):
    """Normalized temperature-scaled cross-entropy over two views.

    Row ``i`` of ``z1`` and ``z2`` are views of the same sample; each of the
    2N views must pick its partner among the other 2N - 1 views.
    """
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    n = z1.shape[0]
    sim = z @ z.T / temperature
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(sim, targets)


def _check_dataset(images):
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise InvalidInputError("dataset must be a non-empty NHWC image batch")
    return images


def train_contrastive_encoder(images, config=ContrastiveConfig()):
    """Train a conv backbone with a projection head under NT-Xent; return it frozen.

    The projection head is only used during training. Per-epoch mean losses
    are kept in ``encoder.history``.
    """
    images = _check_dataset(images)
    rng = np.random.default_rng(config.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        backbone = ConvBackbone(images.shape[3], config.widths, config.embed_dim)
        head = nn.Sequential(nn.Linear(backbone.embed_dim, backbone.embed_dim), nn.ReLU(),
                             nn.Linear(backbone.embed_dim, config.projection_dim))
    encoder = Encoder(backbone, images.shape[1:])
    params = list(backbone.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    data = torch.as_tensor(images, dtype=torch.float32)
    n = data.shape[0]
    backbone.train()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            batch = data[idx]
            v1 = augment(batch, config.augmentation, rng)
            v2 = augment(batch, config.augmentation, rng)
            loss = nt_xent_loss(head(encoder(v1)), head(encoder(v2)), config.temperature)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"contrastive loss is {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        encoder.history.append(total / max(count, 1))
    return encoder.freeze()


class BaseClassifier:
    """Encoder followed by a linear head over class logits."""

    def __init__(self, encoder, head):
        if head.embed_dim != encoder.embed_dim:
            raise InvalidInputError("head dimension does not match encoder embed_dim")
        self.encoder = encoder
        self.head = head
        self.history = []
        self._cache = None

    @property
    def num_classes(self):
        return self.head.num_classes

    def _torch_head(self, dtype):
        if self._cache is None or self._cache[0].dtype != dtype:
            self._cache = (torch.as_tensor(self.head.W, dtype=dtype), torch.as_tensor(self.head.b, dtype=dtype))
        return self._cache

    def logits(self, x):
        """Differentiable class logits for an NHWC tensor."""
        W, b = self._torch_head(x.dtype)
        return self.encoder(x) @ W.T + b

    def predict(self, images, batch_size=256):
        x, single = self.encoder.prepare(images)
        preds = []
        with torch.no_grad():
            for start in range(0, x.shape[0], batch_size):
                preds.append(self.logits(x[start:start + batch_size]).argmax(dim=1))
        out = torch.cat(preds).numpy() if preds else np.zeros(0, np.int64)
        return int(out[0]) if single else out

    def to(self, dtype):
        return BaseClassifier(self.encoder.to(dtype), self.head)


def train_supervised_encoder(images, labels, config=SupervisedConfig()):
    """Train encoder and linear head end-to-end with cross-entropy; return both frozen."""
    images = _check_dataset(images)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (images.shape[0],):
        raise InvalidInputError("labels must align with the dataset")
    classes = np.unique(labels)
    if classes.size < 2:
        raise InvalidInputError("supervised training needs at least two classes")
    k = int(classes.max()) + 1
    rng = np.random.default_rng(config.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        backbone = ConvBackbone(images.shape[3], config.widths, config.embed_dim)
        linear = nn.Linear(backbone.embed_dim, k)
    encoder = Encoder(backbone, images.shape[1:])
    opt = torch.optim.Adam(list(backbone.parameters()) + list(linear.parameters()),
                           lr=config.lr, weight_decay=config.weight_decay)
    data = torch.as_tensor(images, dtype=torch.float32)
    targets = torch.as_tensor(labels)
    history = []
    backbone.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(labels))
        total = 0.0
        for start in range(0, len(labels), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = F.cross_entropy(linear(encoder(data[idx])), targets[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"supervised loss is {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(labels))
    encoder.freeze()
    head = LinearHead(linear.weight.detach().double().numpy(), linear.bias.detach().double().numpy(), lam=0.0)
    clf = BaseClassifier(encoder, head)
    clf.history = history
    return clf


# ---------------------------------------------------------------------------
# persistence

MAGIC = b"SCEB"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


def save_embeddings(path, ids, matrix):
    """Write ids and an n x d float32 matrix in the SCEB format."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise InvalidInputError("embedding matrix must be 2-D")
    ids = [str(i) for i in ids]
    if len(ids) != matrix.shape[0]:
        raise InvalidInputError(f"{len(ids)} ids for {matrix.shape[0]} rows")
    n, d = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, d, n))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
        for i in ids:
            raw = i.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def load_embeddings(path):
    """Inverse of :func:`save_embeddings`; returns ``(ids, float32 matrix)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        if not MAGIC.startswith(buf[:4]):
            raise FormatError("not an embedding cache (bad magic)")
        raise CorruptionError("truncated header")
    magic, version, d, n = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError("not an embedding cache (bad magic)")
    if version != VERSION:
        raise FormatError(f"unsupported cache version {version}")
    offset = _HEADER.size
    nbytes = n * d * 4
    if len(buf) < offset + nbytes:
        raise CorruptionError("truncated embedding matrix")
    matrix = np.frombuffer(buf, dtype="<f4", count=n * d, offset=offset).reshape(n, d).astype(np.float32)
    offset += nbytes
    ids = []
    for _ in range(n):
        if len(buf) < offset + 4:
            raise CorruptionError("truncated id table")
        (length,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if len(buf) < offset + length:
            raise CorruptionError("truncated id string")
        try:
            ids.append(buf[offset:offset + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CorruptionError(f"invalid id string: {exc}") from exc
        offset += length
    if offset != len(buf):
        raise CorruptionError("trailing bytes after id table")
    return ids, matrix


def _module_spec(module):
    if isinstance(module, ConvBackbone):
        convs = [block[0] for block in module.blocks]
        return {"type": "conv", "in_channels": module.in_channels, "local_contrast": module.local_contrast,
                "widths": [c.out_channels for c in convs], "embed_dim": module.embed_dim,
                "batch_norm": isinstance(module.blocks[0][1], nn.BatchNorm2d), "multiscale": module.multiscale}
    if isinstance(module, LinearBackbone):
        return {"type": "linear", "in_features": module.linear.in_features, "embed_dim": module.embed_dim,
                "bias": module.linear.bias is not None}
    raise InvalidInputError(f"cannot serialize module of type {type(module).__name__}")


def _build_module(spec):
    spec = dict(spec)
    kind = spec.pop("type")
    if kind == "conv":
        return ConvBackbone(spec["in_channels"], tuple(spec["widths"]), spec["embed_dim"], spec["batch_norm"],
                            spec["multiscale"], spec["local_contrast"])
    if kind == "linear":
        return LinearBackbone(spec["in_features"], spec["embed_dim"], spec["bias"])
    raise FormatError(f"unknown encoder type {kind!r}")


def save_encoder(path, encoder, head=None):
    """Persist an encoder (and optionally a classifier head) with ``torch.save``."""
    state = {
        "format": "simcat-encoder",
        "spec": _module_spec(encoder.module),
        "input_shape": list(encoder.input_shape),
        "state_dict": encoder.module.state_dict(),
        "history": list(encoder.history),
        "head": head.to_dict() if head is not None else None,
    }
    torch.save(state, path)


def load_encoder(path):
    """Load an encoder saved by :func:`save_encoder`; returns ``(encoder, head_or_None)``."""
    try:
        state = torch.load(path, weights_only=True)
    except Exception as exc:
        raise FormatError(f"cannot read encoder file {path}: {exc}") from exc
    if not isinstance(state, dict) or state.get("format") != "simcat-encoder":
        raise FormatError(f"{path} is not a simcat encoder file")
    module = _build_module(state["spec"])
    # keep the stored precision (float64 encoders are used for gradient checks)
    dtypes = [t.dtype for t in state["state_dict"].values() if torch.is_floating_point(t)]
    if dtypes:
        module = module.to(dtypes[0])
    module.load_state_dict(state["state_dict"])
    encoder = Encoder(module, state["input_shape"], frozen=True)
    encoder.history = list(state["history"])
    head = LinearHead.from_dict(state["head"]) if state["head"] is not None else None
    return encoder, head


def config_dict(config):
    d = asdict(config)
    if "augmentation" in d:
        d["augmentation"] = config.augmentation.to_dict()
    return d
