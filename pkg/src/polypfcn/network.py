"""Layer graphs, forward/backward execution and the FCN transformations.

A network is a ``NetworkSpec`` (pure description, JSON-serializable) plus a
flat ``params`` dict mapping ``"<layer>.<tensor>"`` names to arrays.  Batch
norm running moments live in the same dict but are never handed to the
optimizer.
"""
import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ops
from .errors import ConversionError, DimensionError, ConfigurationError

KINDS = ("conv", "relu", "maxpool", "batchnorm", "gap", "fc", "logits", "score", "deconv", "residual")
PARAM_KINDS = ("conv", "fc", "logits", "score")
BUFFERS = ("running_mean", "running_var")


@dataclass
class LayerSpec:
    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    lr_mult: float = 1.0
    bias_lr_mult: float = 2.0
    ceil_mode: bool = True
    body: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")

    def to_dict(self):
        d = asdict(self)
        d["body"] = [b.to_dict() for b in self.body]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["body"] = [cls.from_dict(b) for b in d.get("body", [])]
        return cls(**d)


@dataclass
class NetworkSpec:
    layers: list
    in_channels: int = 3
    name: str = "net"
    variant: str = "plain"
    scale: int = 8
    width: int = 8
    fcn: bool = False

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [layer.to_dict() for layer in self.layers]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["layers"] = [LayerSpec.from_dict(x) for x in d["layers"]]
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def walk(self):
        """All layers in execution order, residual bodies expanded after their block."""
        def rec(layers):
            for layer in layers:
                yield layer
                yield from rec(layer.body)
        return list(rec(self.layers))

    def downsample_factor(self):
        f = 1
        for layer in self.walk():
            if layer.kind in ("conv", "maxpool"):
                f *= layer.stride
        return f

    def param_shapes(self):
        shapes = {}
        for layer in self.walk():
            if layer.kind in PARAM_KINDS:
                shapes[f"{layer.name}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
                shapes[f"{layer.name}.bias"] = (layer.out_channels,)
            elif layer.kind == "deconv":
                shapes[f"{layer.name}.weight"] = (layer.in_channels, layer.out_channels, layer.kernel, layer.kernel)
            elif layer.kind == "batchnorm":
                for t in ("gamma", "beta") + BUFFERS:
                    shapes[f"{layer.name}.{t}"] = (layer.in_channels,)
        return shapes

    def lr_mults(self):
        """Learning-rate multiplier for every trainable tensor (buffers excluded)."""
        mults = {}
        for layer in self.walk():
            if layer.kind in PARAM_KINDS:
                mults[f"{layer.name}.weight"] = layer.lr_mult
                mults[f"{layer.name}.bias"] = layer.bias_lr_mult
            elif layer.kind == "deconv":
                mults[f"{layer.name}.weight"] = layer.lr_mult
            elif layer.kind == "batchnorm":
                mults[f"{layer.name}.gamma"] = layer.lr_mult
                mults[f"{layer.name}.beta"] = layer.lr_mult
        return mults

    def trainable(self):
        return [name for name, m in self.lr_mults().items() if m > 0]


def init_params(spec, rng, dtype=np.float64):
    """He-normal convolutions, zero biases, zero scoring layer, bilinear deconv, identity batch norm."""
    params = {}
    for layer in spec.walk():
        n = layer.name
        if layer.kind in ("conv", "fc", "logits"):
            fan_in = layer.in_channels * layer.kernel ** 2
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            params[f"{n}.weight"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape).astype(dtype)
            params[f"{n}.bias"] = np.zeros(layer.out_channels, dtype)
        elif layer.kind == "score":
            params[f"{n}.weight"] = np.zeros((layer.out_channels, layer.in_channels, 1, 1), dtype)
            params[f"{n}.bias"] = np.zeros(layer.out_channels, dtype)
        elif layer.kind == "deconv":
            params[f"{n}.weight"] = _deconv_init(layer, dtype)
        elif layer.kind == "batchnorm":
            _bn_identity(params, layer, dtype)
    return params


def _deconv_init(layer, dtype):
    if layer.in_channels != layer.out_channels:
        raise ConfigurationError("bilinear deconv init needs equal input and output channels")
    return ops.bilinear_kernel(layer.kernel, layer.in_channels).astype(dtype)


def _bn_identity(params, layer, dtype):
    c = layer.in_channels
    params[f"{layer.name}.gamma"] = np.ones(c, dtype)
    params[f"{layer.name}.beta"] = np.zeros(c, dtype)
    params[f"{layer.name}.running_mean"] = np.zeros(c, dtype)
    params[f"{layer.name}.running_var"] = np.ones(c, dtype)


def bn_state(params, name):
    """Batch norm state whose arrays alias ``params`` (running moments update in place)."""
    return ops.BatchNormState(
        params[f"{name}.gamma"], params[f"{name}.beta"],
        params[f"{name}.running_mean"], params[f"{name}.running_var"],
    )


# --- execution -------------------------------------------------------------


@dataclass
class Record:
    layer: LayerSpec
    x: np.ndarray
    out: np.ndarray
    cache: object = None


@dataclass
class Trace:
    """Everything a backward pass needs: one record per executed layer."""

    records: list
    input_shape: tuple
    mode: str

    @property
    def output(self):
        return self.records[-1].out if self.records else None

    @property
    def activations(self):
        """Input followed by each top-level layer's output."""
        if not self.records:
            return []
        return [self.records[0].x] + [r.out for r in self.records]


def _layer_forward(layer, params, x, mode, in_shape):
    n = layer.name
    if layer.kind in PARAM_KINDS:
        if x.shape[1] != layer.in_channels:
            raise DimensionError(f"{n}: channel axis has {x.shape[1]}, layer expects {layer.in_channels}")
        return ops.conv2d_forward(x, params[f"{n}.weight"], params[f"{n}.bias"], layer.stride, layer.padding), None
    if layer.kind == "relu":
        return ops.relu(x), None
    if layer.kind == "maxpool":
        out, argmax = ops.maxpool(x, layer.kernel, layer.stride, layer.ceil_mode)
        return out, argmax
    if layer.kind == "batchnorm":
        return ops.batchnorm(x, bn_state(params, n), mode)
    if layer.kind == "gap":
        return x.mean(axis=(2, 3), keepdims=True), None
    if layer.kind == "deconv":
        full = ops.conv2d_transpose(x, params[f"{n}.weight"], layer.stride)
        h, w = in_shape[2:]
        top = (full.shape[2] - h) // 2
        left = (full.shape[3] - w) // 2
        if top < 0 or left < 0:
            raise DimensionError(f"{n}: upsampled map {full.shape[2:]} smaller than input {(h, w)}")
        return np.ascontiguousarray(full[:, :, top:top + h, left:left + w]), (full.shape, top, left)
    if layer.kind == "residual":
        out, records = _run(layer.body, params, x, mode, in_shape)
        return x + out, records
    raise ConfigurationError(f"unhandled layer kind {layer.kind}")


def _run(layers, params, x, mode, in_shape):
    records = []
    for layer in layers:
        out, cache = _layer_forward(layer, params, x, mode, in_shape)
        records.append(Record(layer, x, out, cache))
        x = out
    return x, records


def forward(spec, params, x, mode="infer"):
    """Run the network on a (N, C, H, W) batch; returns a ``Trace``.

    ``trace.output`` is the final activation; for an FCN it is the
    (N, 2, H, W) score map.
    """
    x = ops.check_tensor(x)
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"channel axis: input has {x.shape[1]} channels, network expects {spec.in_channels}")
    _, records = _run(spec.layers, params, x, mode, x.shape)
    return Trace(records, x.shape, mode)


def _layer_backward(rec, params, dout, grads):
    layer, n = rec.layer, rec.layer.name
    if layer.kind in PARAM_KINDS:
        dx, dw, db = ops.conv2d_backward(dout, rec.x, params[f"{n}.weight"], layer.stride, layer.padding)
        grads[f"{n}.weight"] = dw
        grads[f"{n}.bias"] = db
        return dx
    if layer.kind == "relu":
        return ops.relu_backward(dout, rec.x)
    if layer.kind == "maxpool":
        return ops.maxpool_backward(dout, rec.cache, rec.x.shape)
    if layer.kind == "batchnorm":
        dx, dgamma, dbeta = ops.batchnorm_backward(dout, rec.cache)
        grads[f"{n}.gamma"] = dgamma
        grads[f"{n}.beta"] = dbeta
        return dx
    if layer.kind == "gap":
        h, w = rec.x.shape[2:]
        return np.broadcast_to(dout / (h * w), rec.x.shape).copy()
    if layer.kind == "deconv":
        full_shape, top, left = rec.cache
        dfull = np.zeros(full_shape, dout.dtype)
        dfull[:, :, top:top + dout.shape[2], left:left + dout.shape[3]] = dout
        dx, dw = ops.conv2d_transpose_backward(dfull, rec.x, params[f"{n}.weight"], layer.stride)
        grads[f"{n}.weight"] = dw
        return dx
    if layer.kind == "residual":
        return dout + _backward_records(rec.cache, params, dout, grads)
    raise ConfigurationError(f"unhandled layer kind {layer.kind}")


def _backward_records(records, params, dout, grads):
    for rec in reversed(records):
        dout = _layer_backward(rec, params, dout, grads)
    return dout


def backward(spec, params, trace, dout, return_input_grad=False):
    """Back-propagate ``dout`` (gradient w.r.t. ``trace.output``).

    Returns a dict with one gradient per trainable tensor, shape-identical to
    the parameter (and the input gradient as a second value if requested).
    """
    grads = {}
    dx = _backward_records(trace.records, params, dout, grads)
    grads = {k: grads[k] for k in spec.lr_mults()}
    if return_input_grad:
        return grads, dx
    return grads


def output_shape(spec, input_shape):
    """Shape of the final activation, computed from the layer arithmetic alone."""
    n, c, h, w = input_shape
    for layer in spec.layers:
        if layer.kind in PARAM_KINDS:
            c = layer.out_channels
            h = ops.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
            w = ops.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
        elif layer.kind == "maxpool":
            h = ops.pool_output_size(h, layer.kernel, layer.stride, layer.ceil_mode)
            w = ops.pool_output_size(w, layer.kernel, layer.stride, layer.ceil_mode)
        elif layer.kind == "gap":
            h = w = 1
        elif layer.kind == "deconv":
            c = layer.out_channels
            full_h = (h - 1) * layer.stride + layer.kernel
            full_w = (w - 1) * layer.stride + layer.kernel
            if full_h < input_shape[2] or full_w < input_shape[3]:
                raise DimensionError(f"{layer.name}: upsampled map {(full_h, full_w)} smaller than input")
            h, w = input_shape[2:]
    return (n, c, h, w)


# --- structural transformations ----------------------------------------------


def fcn_convert(spec, params, learnable_deconv=True):
    """Turn a classifier into a fully convolutional 2-class segmenter.

    The global-average layer is dropped, hidden fully connected layers become
    1x1 convolutions with the same width (weights copied bit-exactly), the
    classification head is replaced by a zero-initialized 2-channel 1x1
    scoring layer with 10x learning rate, and a bilinear-initialized
    transpose convolution with stride equal to the cumulative downsampling
    and kernel twice that stride upsamples back to input resolution.
    Returns (fcn_spec, fcn_params).
    """
    if spec.fcn or any(layer.kind in ("score", "deconv") for layer in spec.walk()):
        raise ConversionError(f"{spec.name} is already fully convolutional")
    if not any(layer.kind in ("gap", "fc", "logits") for layer in spec.layers):
        raise ConversionError(f"{spec.name} has no fully connected layers to convert")

    new_params = {k: np.array(v, copy=True) for k, v in params.items()}
    layers = []
    for layer in spec.layers:
        if layer.kind == "gap":
            continue
        if layer.kind == "fc":
            layers.append(replace(layer, kind="conv", kernel=1, stride=1, padding=0))
        elif layer.kind == "logits":
            del new_params[f"{layer.name}.weight"], new_params[f"{layer.name}.bias"]
        else:
            layers.append(copy.deepcopy(layer))
    head = _last_channels(layers, spec.in_channels)
    stride = spec.downsample_factor()
    score = LayerSpec("score", "score", head, 2, kernel=1, lr_mult=10.0, bias_lr_mult=20.0)
    deconv = LayerSpec("deconv", "upscore", 2, 2, kernel=2 * stride, stride=stride,
                       lr_mult=1.0 if learnable_deconv else 0.0)
    layers += [score, deconv]
    dtype = next(iter(params.values())).dtype if params else np.float64
    new_params["score.weight"] = np.zeros((2, head, 1, 1), dtype)
    new_params["score.bias"] = np.zeros(2, dtype)
    new_params["upscore.weight"] = _deconv_init(deconv, dtype)
    out = replace(spec, layers=layers, fcn=True, name=f"fcn-{spec.name}")
    return out, new_params


def _last_channels(layers, in_channels):
    c = in_channels
    for layer in layers:
        if layer.kind in PARAM_KINDS or layer.kind == "deconv":
            c = layer.out_channels
    return c


def add_batchnorm(spec, params):
    """Insert an identity-initialized batch norm between every convolution and the activation that follows it."""
    new_params = {k: np.array(v, copy=True) for k, v in params.items()}
    dtype = next(iter(params.values())).dtype if params else np.float64

    def rec(layers):
        out = []
        for i, layer in enumerate(layers):
            if layer.kind == "batchnorm":
                raise ConversionError(f"{spec.name} already has batch normalization")
            layer = replace(layer, body=rec(layer.body)) if layer.body else copy.deepcopy(layer)
            out.append(layer)
            nxt = layers[i + 1] if i + 1 < len(layers) else None
            if layer.kind in ("conv", "fc") and nxt is not None and nxt.kind == "relu":
                bn = LayerSpec("batchnorm", f"{layer.name}_bn", layer.out_channels, layer.out_channels)
                _bn_identity(new_params, bn, dtype)
                out.append(bn)
        return out

    return replace(spec, layers=rec(spec.layers), variant="bn", name=f"bn-{spec.name}"), new_params


def rgbd_extend(spec, params):
    """Give the first convolution a fourth (depth) input channel.

    The new filter slice is the mean of the three colour slices and the
    layer's learning rate is raised tenfold.
    """
    if spec.in_channels != 3:
        raise ConversionError(f"rgbd_extend needs a 3-channel network, got {spec.in_channels}")
    new_params = {k: np.array(v, copy=True) for k, v in params.items()}
    layers = copy.deepcopy(spec.layers)
    first = next(layer for layer in _flat(layers) if layer.kind in PARAM_KINDS)
    w = params[f"{first.name}.weight"]
    new_params[f"{first.name}.weight"] = np.concatenate([w, w.mean(axis=1, keepdims=True)], axis=1)
    first.in_channels = 4
    first.lr_mult = 10.0
    first.bias_lr_mult = 20.0
    return replace(spec, layers=layers, in_channels=4, name=f"d-{spec.name}"), new_params


def _flat(layers):
    for layer in layers:
        yield layer
        yield from _flat(layer.body)


# --- miniature architecture family -------------------------------------------


def mini_classifier(variant="alex", scale=8, width=8, in_channels=3, fc_width=None, num_classes=10):
    """Scale-parameterized classifier; ``scale`` is the cumulative downsampling (a power of 2).

    alex: one conv per pooling stage plus an extra conv in the last stage
    (4 convs at scale 8), first conv 5x5.  vgg: two 3x3 convs per stage
    (6 at scale 8).  residual: conv + identity-skip block per stage.
    All convolutions use same-padding; each stage ends in a 2x2 ceil-mode
    max pool.  The head is global average pool, a hidden fully connected
    layer and a classification layer.
    """
    stages = int(round(math.log2(scale)))
    if stages < 1 or 2 ** stages != scale:
        raise ConfigurationError(f"scale must be a power of two >= 2, got {scale}")
    if variant not in ("alex", "vgg", "residual"):
        raise ConfigurationError(f"unknown variant {variant!r}")
    layers = []
    c_in = in_channels
    k = 0

    def conv(c_out, kernel=3):
        nonlocal c_in, k
        k += 1
        layers.append(LayerSpec("conv", f"conv{k}", c_in, c_out, kernel=kernel, padding=kernel // 2))
        layers.append(LayerSpec("relu", f"relu{k}"))
        c_in = c_out

    for s in range(stages):
        c_out = width * 2 ** min(s, 2)
        if variant == "alex":
            conv(c_out, 5 if s == 0 else 3)
            if s == stages - 1:
                conv(c_out)
        elif variant == "vgg":
            conv(c_out)
            conv(c_out)
        else:
            conv(c_out)
            body = [
                LayerSpec("conv", f"res{s + 1}a", c_in, c_in, kernel=3, padding=1),
                LayerSpec("relu", f"res{s + 1}a_relu"),
                LayerSpec("conv", f"res{s + 1}b", c_in, c_in, kernel=3, padding=1),
            ]
            layers.append(LayerSpec("residual", f"res{s + 1}", c_in, c_in, body=body))
            layers.append(LayerSpec("relu", f"res{s + 1}_relu"))
        layers.append(LayerSpec("maxpool", f"pool{s + 1}", kernel=2, stride=2))

    fc_width = fc_width or 4 * c_in
    layers += [
        LayerSpec("gap", "gap"),
        LayerSpec("fc", "fc1", c_in, fc_width),
        LayerSpec("relu", "fc1_relu"),
        LayerSpec("logits", "classifier", fc_width, num_classes),
    ]
    return NetworkSpec(layers, in_channels, f"mini-{variant}", "residual" if variant == "residual" else "plain",
                       scale, width)


def mini_fcn(variant="alex", scale=8, width=8, in_channels=3, batchnorm=False, rng=None,
             dtype=np.float64, learnable_deconv=True, fc_width=None):
    """Classifier -> random init -> FCN conversion (-> batch norm insertion)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = mini_classifier(variant, scale, width, in_channels, fc_width=fc_width)
    params = init_params(spec, rng, dtype)
    spec, params = fcn_convert(spec, params, learnable_deconv)
    if batchnorm:
        spec, params = add_batchnorm(spec, params)
    return spec, params
