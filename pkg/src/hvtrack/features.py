"""Feature extractors, the small encoder-decoder network, Adam, and weight files.

Feature maps are arrays of shape (F, H, W). Extractors zero the feature
vectors of invalid template pixels.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ShapeMismatch, WeightTopologyMismatch
from .imaging import gaussian_blur, to_gray

WEIGHT_MAGIC = b"HVCW"
WEIGHT_FORMAT_VERSION = 1
NETWORK_VERSION = 1


def _as_image_mask(template, mask=None):
    if hasattr(template, "image"):
        img, mask = template.image, template.mask
    else:
        img = template
    img = to_gray(img)
    if mask is None:
        mask = np.ones(img.shape)
    return img, np.asarray(mask, dtype=float)


class IntensityExtractor:
    normalized = False
    channels = 1

    def __call__(self, image, mask):
        return (image * mask)[None]


class FilterBankExtractor:
    """Band-pass intensity, x/y gradients and two oriented second-derivative filters.

    Purely convolutional (interior pixels are translation-equivariant) and
    per-pixel L2-normalized.
    """

    normalized = True

    def __init__(self, sigmas=(1.0, 2.0), eps=1e-4):
        self.sigmas = tuple(sigmas)
        self.eps = eps
        self.channels = 5 * len(self.sigmas)

    def __call__(self, image, mask):
        img = image * mask
        chans = []
        for s in self.sigmas:
            sm = gaussian_blur(img, s)
            dog = sm - gaussian_blur(img, 2.0 * s)
            gy, gx = np.gradient(sm)
            gyy, gyx = np.gradient(gy)
            gxy, gxx = np.gradient(gx)
            chans += [dog, s * gx, s * gy, s * s * (gxx - gyy), s * s * (gxy + gyx)]
        f = np.stack(chans)
        f = f / np.sqrt((f * f).sum(axis=0, keepdims=True) + self.eps ** 2)
        return f * mask[None]


@dataclass
class Topology:
    in_ch: int = 1
    c1: int = 8
    c2: int = 16
    c3: int = 16
    out: int = 8
    leak: float = 0.1

    def as_vector(self):
        return np.array([self.in_ch, self.c1, self.c2, self.c3, self.out, self.leak * 1000.0])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float).ravel()
        if v.size != 6:
            raise WeightTopologyMismatch(f"topology descriptor has {v.size} entries, expected 6")
        return cls(int(round(v[0])), int(round(v[1])), int(round(v[2])), int(round(v[3])),
                   int(round(v[4])), float(v[5]) / 1000.0)

    def shapes(self):
        t = self
        return {
            "enc0a.w": (t.c1, t.in_ch, 3, 3), "enc0a.g": (t.c1,), "enc0a.b": (t.c1,),
            "enc0b.w": (t.c1, t.c1, 3, 3), "enc0b.g": (t.c1,), "enc0b.b": (t.c1,),
            "enc1.w": (t.c2, t.c1, 3, 3), "enc1.g": (t.c2,), "enc1.b": (t.c2,),
            "enc2.w": (t.c3, t.c2, 3, 3), "enc2.g": (t.c3,), "enc2.b": (t.c3,),
            "dec1.w": (t.c2, t.c3 + t.c2, 3, 3), "dec1.g": (t.c2,), "dec1.b": (t.c2,),
            "dec0.w": (t.c1, t.c2 + t.c1, 3, 3), "dec0.g": (t.c1,), "dec0.b": (t.c1,),
            "out.w": (t.out, t.c1, 3, 3), "out.b": (t.out,),
        }


@dataclass
class ConvNetWeights:
    topology: Topology
    params: dict
    version: int = NETWORK_VERSION

    def validate(self):
        expected = self.topology.shapes()
        missing = set(expected) - set(self.params)
        if missing:
            raise WeightTopologyMismatch(f"missing tensors: {sorted(missing)}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise WeightTopologyMismatch(
                    f"{name}: shape {tuple(self.params[name].shape)} != {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise WeightTopologyMismatch(f"{name}: non-finite values")
        return self

    def astype(self, dtype):
        return ConvNetWeights(self.topology, {k: v.astype(dtype) for k, v in self.params.items()},
                              self.version)


def init_convnet(topology=None, seed=0):
    """He-initialised kernels, unit scales, zero shifts."""
    topology = topology or Topology()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in topology.shapes().items():
        if name.endswith(".w"):
            fan_in = shape[1] * 9
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".g"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return ConvNetWeights(topology, params)


def standardize_input(image, mask):
    """Zero-mean, unit-variance over valid pixels; invalid pixels stay zero."""
    m = mask > 0.5
    if not np.any(m):
        return np.zeros_like(image)
    vals = image[m]
    out = (image - vals.mean()) / (vals.std() + 0.05)
    return out * mask


def convnet_forward(weights, x, normalize=True):
    """Forward pass on x of shape (in_ch, H, W); returns (features, cache)."""
    p = weights.params
    leak = weights.topology.leak
    if x.shape[0] != weights.topology.in_ch:
        raise ShapeMismatch(f"input has {x.shape[0]} channels, network expects {weights.topology.in_ch}")
    caches = {}

    def block(name, inp):
        y, c_conv = nn.conv3x3(inp, p[name + ".w"])
        y, c_aff = nn.affine(y, p[name + ".g"], p[name + ".b"])
        y, c_act = nn.leaky_relu(y, leak)
        caches[name] = (c_conv, c_aff, c_act)
        return y

    a = block("enc0a", x)
    s0 = block("enc0b", a)
    p1, caches["pool1"] = nn.avgpool2(s0)
    s1 = block("enc1", p1)
    p2, caches["pool2"] = nn.avgpool2(s1)
    bott = block("enc2", p2)
    u1, caches["up1"] = nn.upsample2(bott, s1.shape[1:])
    d1 = block("dec1", np.concatenate([u1, s1]))
    u0, caches["up0"] = nn.upsample2(d1, s0.shape[1:])
    d0 = block("dec0", np.concatenate([u0, s0]))
    o, caches["out"] = nn.conv3x3(d0, p["out.w"], p["out.b"])
    if normalize:
        o, caches["norm"] = nn.l2_normalize(o)
    caches["split"] = (bott.shape[0], s1.shape[0], d1.shape[0], s0.shape[0])
    return o, caches


def convnet_backward(weights, caches, upstream):
    """Exact reverse-mode gradients; returns (weight_grads, input_grad)."""
    grads = {}

    def block_back(name, d):
        c_conv, c_aff, c_act = caches[name]
        d = nn.leaky_relu_backward(d, c_act)
        d, grads[name + ".g"], grads[name + ".b"] = nn.affine_backward(d, c_aff)
        d, grads[name + ".w"], _ = nn.conv3x3_backward(d, c_conv)
        return d

    n_bott, n_s1, n_d1, n_s0 = caches["split"]
    d = upstream
    if "norm" in caches:
        d = nn.l2_normalize_backward(d, caches["norm"])
    d, grads["out.w"], grads["out.b"] = nn.conv3x3_backward(d, caches["out"])
    d = block_back("dec0", d)
    du0, ds0 = d[:n_d1], d[n_d1:]
    d = block_back("dec1", nn.upsample2_backward(du0, caches["up0"]))
    du1, ds1 = d[:n_bott], d[n_bott:]
    d = block_back("enc2", nn.upsample2_backward(du1, caches["up1"]))
    ds1 = ds1 + nn.avgpool2_backward(d, caches["pool2"])
    d = block_back("enc1", ds1)
    ds0 = ds0 + nn.avgpool2_backward(d, caches["pool1"])
    d = block_back("enc0b", ds0)
    dx = block_back("enc0a", d)
    return grads, dx


class ConvNetExtractor:
    normalized = True

    def __init__(self, weights, dtype=np.float32):
        self.weights = weights.validate().astype(dtype)
        self.dtype = dtype
        self.channels = weights.topology.out

    def __call__(self, image, mask):
        x = standardize_input(image, mask)[None].astype(self.dtype)
        f, _ = convnet_forward(self.weights, x)
        return (f * mask[None]).astype(float)


def extract(template, extractor, mask=None):
    """Feature map (F, H, W) of a Template (or a bare image plus mask)."""
    img, mask = _as_image_mask(template, mask)
    return extractor(img, mask)


def make_extractor(kind, weights=None):
    if kind == "intensity":
        return IntensityExtractor()
    if kind == "filterbank":
        return FilterBankExtractor()
    if kind == "convnet":
        if weights is None:
            raise WeightTopologyMismatch("convnet extractor needs weights")
        return ConvNetExtractor(weights)
    raise ValueError(f"unknown extractor {kind!r}")


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 0.1
    decay_every: int = 5


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def learning_rate(cfg, epoch):
    """Step schedule: lr * decay_factor ** (epoch // decay_every)."""
    return cfg.lr * cfg.decay_factor ** (epoch // cfg.decay_every)


def adam_step(params, grads, state, cfg, epoch=0):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    t = state.t + 1
    lr = learning_rate(cfg, epoch)
    new_params, m_new, v_new = {}, {}, {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = w
            continue
        if g.shape != w.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs weight {w.shape}")
        m = state.m.get(name, np.zeros_like(w))
        v = state.v.get(name, np.zeros_like(w))
        if m.shape != w.shape:
            raise ShapeMismatch(f"{name}: optimizer state {m.shape} vs weight {w.shape}")
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** t)
        vhat = v / (1 - cfg.beta2 ** t)
        new_params[name] = w - lr * mhat / (np.sqrt(vhat) + cfg.eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


def save_tensors(path, tensors):
    """Write named tensors in the HVCW little-endian f32 container."""
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<II", WEIGHT_FORMAT_VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_tensors(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != WEIGHT_MAGIC:
        raise WeightTopologyMismatch(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != WEIGHT_FORMAT_VERSION:
        raise WeightTopologyMismatch(f"{path}: unsupported format version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).astype(float).reshape(dims)
        off += 4 * size
    return out


def convnet_to_tensors(weights, prefix="features."):
    t = {prefix + k: v for k, v in weights.params.items()}
    t[prefix + "meta.topology"] = weights.topology.as_vector()
    t[prefix + "meta.version"] = np.array([weights.version], dtype=float)
    return t


def convnet_from_tensors(tensors, prefix="features."):
    key = prefix + "meta.topology"
    if key not in tensors:
        raise WeightTopologyMismatch("weight file has no feature-network topology descriptor")
    topo = Topology.from_vector(tensors[key])
    params = {k[len(prefix):]: v for k, v in tensors.items()
              if k.startswith(prefix) and not k[len(prefix):].startswith("meta.")}
    version = int(tensors.get(prefix + "meta.version", [NETWORK_VERSION])[0])
    return ConvNetWeights(topo, params, version).validate()
