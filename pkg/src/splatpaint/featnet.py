"""Fixed convolutional feature extractor laid out like VGG-16's feature
stack (3x3 convs, relus, 2x2 max pools).  Weights come from a binary file
or a seeded orthogonal fallback and never train; what the package needs is
the forward activations at chosen layer indices and the gradient of those
activations with respect to the input image."""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ValidationError

# channel plan of the flattened feature sequence; "M" is a 2x2 stride-2 pool
CHANNEL_PLAN = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
                512, 512, 512, "M", 512, 512, 512, "M")

INPUT_MEAN = np.array([0.485, 0.456, 0.406], np.float32)
INPUT_STD = np.array([0.229, 0.224, 0.225], np.float32)

KERNEL = 3
ORTHOGONAL_GAIN = np.sqrt(2.0)

MAGIC = b"FNET"
VERSION = 1


def layer_sequence():
    """Flattened (kind, ...) list: ("conv", out_ch, in_ch) | ("relu",) |
    ("pool",).  Indexing into this list is the layer indexing every public
    operation uses."""
    seq = []
    in_ch = 3
    for entry in CHANNEL_PLAN:
        if entry == "M":
            seq.append(("pool",))
        else:
            seq.append(("conv", entry, in_ch))
            seq.append(("relu",))
            in_ch = entry
    return seq


def conv_plan():
    """(out_ch, in_ch) per conv layer, in sequence order."""
    return [(s[1], s[2]) for s in layer_sequence() if s[0] == "conv"]


@dataclass
class FeatureExtractor:
    """Conv weights (out,in,kh,kw) and biases in sequence order, frozen."""

    weights: list
    biases: list

    def __post_init__(self):
        plan = conv_plan()
        if len(self.weights) != len(plan):
            raise ValidationError(
                f"expected {len(plan)} conv layers, got {len(self.weights)}")
        for i, (w, b, (out_ch, in_ch)) in enumerate(
                zip(self.weights, self.biases, plan)):
            if w.shape != (out_ch, in_ch, KERNEL, KERNEL):
                raise ValidationError(
                    f"conv {i}: weight shape {w.shape} does not match plan "
                    f"{(out_ch, in_ch, KERNEL, KERNEL)}")
            if b.shape != (out_ch,):
                raise ValidationError(
                    f"conv {i}: bias shape {b.shape}, want {(out_ch,)}")
            w.flags.writeable = False
            b.flags.writeable = False


@dataclass
class FeatureStack:
    """Activations captured at requested layer indices, shallowest first."""

    layers: list                 # (layer index, H_l x W_l x C_l array)
    source_size: tuple           # (H, W) of the image they came from

    def get(self, index):
        for i, act in self.layers:
            if i == index:
                return act
        raise KeyError(index)


def _orthogonal(rng, rows, cols):
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # unique decomposition, stable across BLAS
    if rows < cols:
        q = q.T
    return (ORTHOGONAL_GAIN * q[:rows, :cols]).astype(np.float32)


def random_extractor(seed: int = 0) -> FeatureExtractor:
    """Hermetic stand-in for pretrained weights: per-layer orthogonal
    matrices (relu-friendly gain), zero biases, fully determined by seed."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for out_ch, in_ch in conv_plan():
        w = _orthogonal(rng, out_ch, in_ch * KERNEL * KERNEL)
        weights.append(w.reshape(out_ch, in_ch, KERNEL, KERNEL))
        biases.append(np.zeros(out_ch, np.float32))
    return FeatureExtractor(weights, biases)


def save_weights(extractor: FeatureExtractor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(extractor.weights)))
        for w, b in zip(extractor.weights, extractor.biases):
            fh.write(struct.pack("<IIII", *w.shape))
            fh.write(np.ascontiguousarray(w, "<f4").tobytes())
            fh.write(np.ascontiguousarray(b, "<f4").tobytes())


def load_weights(path) -> FeatureExtractor:
    """Read an extractor, validating every declared tensor shape against
    the channel plan before touching the payload."""
    plan = conv_plan()
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if count != len(plan):
        raise DataError(f"{path}: {count} conv layers, plan has {len(plan)}")
    off = 12
    weights, biases = [], []
    for i, (out_ch, in_ch) in enumerate(plan):
        if off + 16 > len(raw):
            raise DataError(f"{path}: truncated at layer {i}")
        dims = struct.unpack_from("<IIII", raw, off)
        off += 16
        if dims != (out_ch, in_ch, KERNEL, KERNEL):
            raise DataError(
                f"{path}: layer {i} declares shape {dims}, plan requires "
                f"{(out_ch, in_ch, KERNEL, KERNEL)}")
        n_w = out_ch * in_ch * KERNEL * KERNEL
        if off + 4 * (n_w + out_ch) > len(raw):
            raise DataError(f"{path}: truncated payload at layer {i}")
        w = np.frombuffer(raw, "<f4", n_w, off).reshape(dims)
        off += 4 * n_w
        b = np.frombuffer(raw, "<f4", out_ch, off)
        off += 4 * out_ch
        weights.append(w.astype(np.float32))
        biases.append(b.astype(np.float32))
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes")
    return FeatureExtractor(weights, biases)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(H,W,C) -> (H*W, C*9) patch matrix under zero padding 1."""
    h, w, c = x.shape
    padded = np.zeros((h + 2, w + 2, c), x.dtype)
    padded[1:-1, 1:-1] = x
    cols = np.empty((h, w, c, KERNEL * KERNEL), x.dtype)
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            cols[:, :, :, dy * KERNEL + dx] = padded[dy:dy + h, dx:dx + w]
    return cols.reshape(h * w, c * KERNEL * KERNEL)


def _col2im(cols: np.ndarray, h, w, c) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back to pixels."""
    cols = cols.reshape(h, w, c, KERNEL * KERNEL)
    padded = np.zeros((h + 2, w + 2, c), cols.dtype)
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            padded[dy:dy + h, dx:dx + w] += cols[:, :, :, dy * KERNEL + dx]
    return padded[1:-1, 1:-1]


def _conv_forward(x, weight, bias):
    h, w, _ = x.shape
    out_ch = weight.shape[0]
    # patch channel order is (c, ky, kx); mirror it in the weight matrix
    wmat = weight.transpose(1, 2, 3, 0).reshape(-1, out_ch)
    return (_im2col(x) @ wmat + bias).reshape(h, w, out_ch)


def _conv_backward_input(grad_out, weight):
    h, w, out_ch = grad_out.shape
    in_ch = weight.shape[1]
    wmat = weight.transpose(1, 2, 3, 0).reshape(-1, out_ch)
    cols = grad_out.reshape(h * w, out_ch) @ wmat.T
    return _col2im(cols, h, w, in_ch)


def _pool_forward(x):
    h, w, c = x.shape
    hh, ww = h // 2, w // 2
    view = x[:hh * 2, :ww * 2].reshape(hh, 2, ww, 2, c).transpose(0, 2, 4, 1, 3)
    flat = view.reshape(hh, ww, c, 4)
    arg = flat.argmax(axis=3)
    return np.take_along_axis(flat, arg[..., None], axis=3)[..., 0], arg


def _pool_backward(grad_out, arg, in_shape):
    hh, ww, c = grad_out.shape
    flat = np.zeros((hh, ww, c, 4), grad_out.dtype)
    np.put_along_axis(flat, arg[..., None], grad_out[..., None], axis=3)
    h, w = in_shape[:2]
    grad = np.zeros(in_shape, grad_out.dtype)
    grad[:hh * 2, :ww * 2] = (flat.reshape(hh, ww, c, 2, 2)
                              .transpose(0, 3, 1, 4, 2)
                              .reshape(hh * 2, ww * 2, c))
    return grad


def _check_request(image, layer_indices):
    seq = layer_sequence()
    if not layer_indices:
        raise ValidationError("no layer indices requested")
    idx = sorted(set(int(i) for i in layer_indices))
    if idx[0] < 0 or idx[-1] >= len(seq):
        raise ValidationError(
            f"layer index out of range 0..{len(seq) - 1}: {idx}")
    pools = sum(1 for s in seq[:idx[-1] + 1] if s[0] == "pool")
    need = 2 ** pools
    h, w = image.shape[:2]
    if min(h, w) < need:
        raise ValidationError(
            f"image {h}x{w} too small for layer {idx[-1]}; "
            f"needs at least {need}x{need}")
    return seq, idx


def _normalize(image):
    x = np.asarray(image)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValidationError(f"expected HxWx3 image, got {x.shape}")
    if x.dtype != np.float64:  # keep float64 inputs exact for gradient work
        x = x.astype(np.float32)
    return (x - INPUT_MEAN) / INPUT_STD


def extract(extractor: FeatureExtractor, image: np.ndarray,
            layer_indices) -> FeatureStack:
    """Push the normalized image through the sequence, capturing the
    activation at every requested index; stops at the deepest one."""
    seq, idx = _check_request(image, layer_indices)
    x = _normalize(image)
    captured = {}
    conv_i = 0
    for li, spec in enumerate(seq):
        if li > idx[-1]:
            break
        if spec[0] == "conv":
            x = _conv_forward(x, extractor.weights[conv_i],
                              extractor.biases[conv_i])
            conv_i += 1
        elif spec[0] == "relu":
            x = np.maximum(x, 0.0)
        else:
            x, _ = _pool_forward(x)
        if li in idx:
            captured[li] = x
    return FeatureStack(layers=[(i, captured[i]) for i in idx],
                        source_size=image.shape[:2])


def extract_backward(extractor: FeatureExtractor, image: np.ndarray,
                     layer_indices, upstream_grads) -> np.ndarray:
    """d(sum_l <upstream_l, activation_l>)/d(image): replay the forward
    pass caching relu masks and pool routing, then walk the sequence
    backwards, injecting each requested layer's upstream where it was
    captured."""
    seq, idx = _check_request(image, layer_indices)
    order = [int(i) for i in layer_indices]
    if sorted(set(order)) != idx or len(order) != len(idx):
        raise ValidationError("layer_indices must be unique")
    if len(upstream_grads) != len(order):
        raise ValidationError("one upstream gradient per requested layer")
    upstream = {i: np.asarray(g) for i, g in zip(order, upstream_grads)}

    x = _normalize(image)
    tape = []  # (kind, payload) per executed layer
    conv_i = 0
    for li, spec in enumerate(seq):
        if li > idx[-1]:
            break
        if spec[0] == "conv":
            x = _conv_forward(x, extractor.weights[conv_i],
                              extractor.biases[conv_i])
            tape.append(("conv", conv_i))
            conv_i += 1
        elif spec[0] == "relu":
            x = np.maximum(x, 0.0)
            tape.append(("relu", x > 0.0))
        else:
            shape = x.shape
            x, arg = _pool_forward(x)
            tape.append(("pool", (arg, shape)))
        if li in upstream and upstream[li].shape != x.shape:
            raise ValidationError(
                f"upstream for layer {li} has shape {upstream[li].shape}, "
                f"activation is {x.shape}")

    grad = np.zeros_like(x)
    for li in range(len(tape) - 1, -1, -1):
        if li in upstream:
            grad = grad + upstream[li]
        kind, payload = tape[li]
        if kind == "conv":
            grad = _conv_backward_input(grad, extractor.weights[payload])
        elif kind == "relu":
            grad = grad * payload
        else:
            arg, shape = payload
            grad = _pool_backward(grad, arg, shape)
    return grad / INPUT_STD


def receptive_field_size(extractor: FeatureExtractor, layer_index: int) -> int:
    """How many input pixels (along one axis) influence one activation at
    the given layer: rf accumulates (k-1)*jump per layer, jump doubles at
    each pool."""
    seq = layer_sequence()
    if not 0 <= layer_index < len(seq):
        raise ValidationError(f"layer index {layer_index} out of range")
    rf, jump = 1, 1
    for spec in seq[:layer_index + 1]:
        if spec[0] == "conv":
            rf += (KERNEL - 1) * jump
        elif spec[0] == "pool":
            rf += jump
            jump *= 2
    return rf
