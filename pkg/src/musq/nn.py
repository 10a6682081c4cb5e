"""From-scratch neural networks for per-frame state regression.

Architectures come from a compact token language ("c-16 p-2x2 fc-1024 fc-3");
layers are valid-padding stride-1 convolutions, non-overlapping max pools,
and fully connected layers, rectifier on every hidden layer and a linear
3-unit output. Training is online SGD (batch size one) with classical
momentum, inverted dropout on the top fully connected layers, MSE loss, and
patience-based early stopping on a validation set. Activation maximization
synthesizes inputs by gradient ascent with L2 decay.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadUnitError, CorruptDatasetError, EmptyDataError,
                     NotADatasetError, ParseError, ShapeError)

CHECKPOINT_MAGIC = b"MUSN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple                      # ("conv", n) | ("pool", h, w) | ("fc", n)
    input_shape: tuple                 # (h, w, channels)
    input_kernel: tuple = (3, 3)
    hidden_kernel: tuple = (3, 3)

    def arch_string(self):
        toks = []
        for layer in self.layers:
            if layer[0] == "conv":
                toks.append(f"c-{layer[1]}")
            elif layer[0] == "pool":
                toks.append(f"p-{layer[1]}x{layer[2]}")
            else:
                toks.append(f"fc-{layer[1]}")
        return " ".join(toks)


def parse_architecture(text, input_shape, input_kernel=(3, 3),
                       hidden_kernel=(3, 3), depth_multiplier=False):
    """Parse "c-<n> p-<h>x<w> fc-<n>" tokens into an ArchitectureSpec.

    depth_multiplier inserts a second conv of the same width after each
    listed conv (the doubled-depth variants of the wider models).
    """
    tokens = text.split()
    if not tokens:
        raise ParseError("empty architecture string")
    layers = []
    for pos, tok in enumerate(tokens):
        if tok.startswith("c-"):
            try:
                n = int(tok[2:])
            except ValueError:
                raise ParseError(f"bad token {tok!r} at position {pos}") \
                    from None
            if n < 1:
                raise ParseError(f"zero-width conv at position {pos}")
            layers.append(("conv", n))
            if depth_multiplier:
                layers.append(("conv", n))
        elif tok.startswith("p-"):
            parts = tok[2:].split("x")
            if len(parts) != 2:
                raise ParseError(f"bad token {tok!r} at position {pos}")
            try:
                ph, pw = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"bad token {tok!r} at position {pos}") \
                    from None
            if ph < 1 or pw < 1:
                raise ParseError(f"bad pool size at position {pos}")
            layers.append(("pool", ph, pw))
        elif tok.startswith("fc-"):
            try:
                n = int(tok[3:])
            except ValueError:
                raise ParseError(f"bad token {tok!r} at position {pos}") \
                    from None
            if n < 1:
                raise ParseError(f"zero-width fc at position {pos}")
            layers.append(("fc", n))
        else:
            raise ParseError(f"unknown token {tok!r} at position {pos}")
    return ArchitectureSpec(layers=tuple(layers),
                            input_shape=tuple(input_shape),
                            input_kernel=tuple(input_kernel),
                            hidden_kernel=tuple(hidden_kernel))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    momentum: float = 0.95
    dropout_p: float = 0.5
    dropout_layers: int = 0      # fully connected layers, counted from output
    eval_interval: int = 10000
    eval_samples: int = 0        # 0 = full validation set each evaluation
    patience: int = 5
    max_updates: int = 2_500_000

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout probability must be in [0, 1)")
        if self.dropout_layers not in (0, 1, 2, 3):
            raise ValueError("dropout_layers must be 0..3")


class ConvLayer:
    """Valid-padding stride-1 cross-correlation, rectifier handled outside."""

    kind = "conv"

    def __init__(self, kh, kw, cin, cout):
        self.kh, self.kw, self.cin, self.cout = kh, kw, cin, cout
        self.w = np.zeros((kh, kw, cin, cout))
        self.b = np.zeros(cout)
        self.vw = np.zeros_like(self.w)
        self.vb = np.zeros_like(self.b)

    def fan_in(self):
        return self.kh * self.kw * self.cin

    def out_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.cin:
            raise ShapeError(f"conv expects {self.cin} channels, got {c}")
        oh, ow = h - self.kh + 1, w - self.kw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv kernel {self.kh}x{self.kw} exceeds "
                             f"input {h}x{w}")
        return (oh, ow, self.cout)

    def forward(self, x):
        oh, ow, _ = self.out_shape(x.shape)
        cols = np.lib.stride_tricks.sliding_window_view(
            x, (self.kh, self.kw), axis=(0, 1))      # (oh, ow, c, kh, kw)
        cols = cols.transpose(0, 1, 3, 4, 2).reshape(oh * ow, -1)
        wmat = self.w.reshape(-1, self.cout)
        out = (cols @ wmat + self.b).reshape(oh, ow, self.cout)
        return out, (x.shape, cols)

    def backward(self, cache, dy, need_dx=True):
        x_shape, cols = cache
        oh, ow, _ = dy.shape
        dy_flat = dy.reshape(-1, self.cout)
        dw = (cols.T @ dy_flat).reshape(self.w.shape)
        db = dy_flat.sum(axis=0)
        if not need_dx:
            return (dw, db), None
        dcols = (dy_flat @ self.w.reshape(-1, self.cout).T) \
            .reshape(oh, ow, self.kh, self.kw, self.cin)
        dx = np.zeros(x_shape)
        for di in range(self.kh):
            for dj in range(self.kw):
                dx[di:di + oh, dj:dj + ow, :] += dcols[:, :, di, dj, :]
        return (dw, db), dx


class MaxPoolLayer:
    """Non-overlapping max pooling; odd remainders are floor-cropped."""

    kind = "pool"

    def __init__(self, ph, pw):
        self.ph, self.pw = ph, pw
        self.w = None
        self.b = None

    def out_shape(self, in_shape):
        h, w, c = in_shape
        oh, ow = h // self.ph, w // self.pw
        if oh < 1 or ow < 1:
            raise ShapeError(f"pool {self.ph}x{self.pw} exceeds input "
                             f"{h}x{w}")
        return (oh, ow, c)

    def forward(self, x):
        h, w, c = x.shape
        oh, ow, _ = self.out_shape(x.shape)
        cropped = x[:oh * self.ph, :ow * self.pw, :]
        win = cropped.reshape(oh, self.ph, ow, self.pw, c) \
            .transpose(0, 2, 4, 1, 3).reshape(oh, ow, c, self.ph * self.pw)
        idx = win.argmax(axis=3)
        out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
        return out, (x.shape, idx)

    def backward(self, cache, dy):
        in_shape, idx = cache
        oh, ow, c = dy.shape
        scattered = np.zeros((oh, ow, c, self.ph * self.pw))
        np.put_along_axis(scattered, idx[..., None], dy[..., None], axis=3)
        dx = np.zeros(in_shape)
        dx[:oh * self.ph, :ow * self.pw, :] = scattered \
            .reshape(oh, ow, c, self.ph, self.pw) \
            .transpose(0, 3, 1, 4, 2) \
            .reshape(oh * self.ph, ow * self.pw, c)
        return None, dx


class FCLayer:
    kind = "fc"

    def __init__(self, n_in, n_out):
        self.n_in, self.n_out = n_in, n_out
        self.w = np.zeros((n_in, n_out))
        self.b = np.zeros(n_out)
        self.vw = np.zeros_like(self.w)
        self.vb = np.zeros_like(self.b)

    def fan_in(self):
        return self.n_in

    def out_shape(self, in_shape):
        n = int(np.prod(in_shape))
        if n != self.n_in:
            raise ShapeError(f"fc expects {self.n_in} inputs, got {n}")
        return (self.n_out,)

    def forward(self, x):
        flat = x.reshape(-1)
        if flat.shape[0] != self.n_in:
            raise ShapeError(f"fc expects {self.n_in} inputs, "
                             f"got {flat.shape[0]}")
        return flat @ self.w + self.b, (x.shape, flat)

    def backward(self, cache, dy):
        in_shape, flat = cache
        dw = np.outer(flat, dy)
        dx = (self.w @ dy).reshape(in_shape)
        return (dw, dy.copy()), dx


@dataclass
class NormConstants:
    """Affine normalization applied to inputs and undone on predictions."""

    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    input_std: np.ndarray = field(default_factory=lambda: np.ones(1))
    target_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    target_std: np.ndarray = field(default_factory=lambda: np.ones(3))


class NetworkModel:
    """ArchitectureSpec plus instantiated layers and training state."""

    def __init__(self, spec, layers, norm=None):
        self.spec = spec
        self.layers = layers
        self.norm = norm if norm is not None else NormConstants()

    def parameters(self):
        return [layer for layer in self.layers if layer.w is not None]

    def snapshot(self):
        return [(layer.w.copy(), layer.b.copy())
                for layer in self.parameters()]

    def restore(self, snap):
        for layer, (w, b) in zip(self.parameters(), snap):
            layer.w[...] = w
            layer.b[...] = b

    def dropout_mask_layers(self, dropout_layers):
        """Indices of layers whose *input* gets a dropout mask.

        Counted over fully connected layers from the output inward; if the
        requested depth exceeds the fc count the deepest masked input is the
        topmost conv/pool output (which is the first fc layer's input).
        """
        fc_idx = [i for i, l in enumerate(self.layers) if l.kind == "fc"]
        return set(fc_idx[len(fc_idx) - min(dropout_layers, len(fc_idx)):])


def build_network(spec):
    h, w, c = spec.input_shape
    shape = (h, w, c)
    layers = []
    seen_conv = False
    for layer in spec.layers:
        if layer[0] == "conv":
            kh, kw = spec.hidden_kernel if seen_conv else spec.input_kernel
            seen_conv = True
            lyr = ConvLayer(kh, kw, shape[2], layer[1])
        elif layer[0] == "pool":
            lyr = MaxPoolLayer(layer[1], layer[2])
        else:
            lyr = FCLayer(int(np.prod(shape)), layer[1])
        shape = lyr.out_shape(shape)
        layers.append(lyr)
    return NetworkModel(spec, layers)


def initialize_network(spec, rng):
    """Gaussian weights with var(w) = 1/fan_in; biases exactly zero."""
    model = build_network(spec)
    for layer in model.parameters():
        std = (1.0 / layer.fan_in()) ** 0.5
        layer.w[...] = rng.normal(size=layer.w.shape, scale=std)
        layer.b[...] = 0.0
    return model


def forward(model, x, mode="infer", rng=None, dropout_layers=0,
            dropout_p=0.5):
    """Full forward pass; returns (output, cache).

    Hidden layers are rectified; the final layer is linear. In train mode an
    inverted-dropout mask is applied to the input of each of the top
    `dropout_layers` fully connected layers.
    """
    x = np.asarray(x, float)
    if x.shape != tuple(model.spec.input_shape):
        raise ShapeError(f"input {x.shape} does not match spec "
                         f"{model.spec.input_shape}")
    masked = model.dropout_mask_layers(dropout_layers) \
        if mode == "train" and dropout_layers > 0 else set()
    if masked and rng is None:
        raise ValueError("train-mode dropout requires an rng")

    caches = []
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        mask = None
        if i in masked:
            keep = 1.0 - dropout_p
            mask = (rng.uniform(size=x.shape) < keep) / keep
            x = x * mask
        out, cache = layer.forward(x)
        relu_mask = None
        if i != last and layer.kind != "pool":
            relu_mask = out > 0
            out = out * relu_mask
        caches.append((cache, relu_mask, mask, out))
        x = out
    return x, caches


def mse_loss(output, target):
    diff = output - target
    return float((diff * diff).mean())


def backward(model, caches, output, target, need_dinput=False):
    """Gradients of mean-squared error w.r.t. every weight and bias.

    Returns ([(dw, db) or None per layer], dinput); dinput is None unless
    requested, since the input gradient of the first layer is only needed
    for input synthesis, never for SGD.
    """
    dy = 2.0 * (output - np.asarray(target, float)) / output.size
    grads, dy = _backprop(model, caches, dy, len(model.layers) - 1,
                          need_dinput=need_dinput)
    return grads, dy


def _backprop(model, caches, dy, from_layer, need_dinput=True):
    grads = [None] * len(model.layers)
    for i in range(from_layer, -1, -1):
        layer = model.layers[i]
        cache, relu_mask, drop_mask, _ = caches[i]
        if relu_mask is not None:
            dy = dy * relu_mask
        if i == 0 and not need_dinput and layer.kind == "conv":
            g, dy = layer.backward(cache, dy, need_dx=False)
        else:
            g, dy = layer.backward(cache, dy)
        grads[i] = g
        if drop_mask is not None and dy is not None:
            dy = dy * drop_mask
    return grads, dy


def sgd_update(model, grads, lr, momentum):
    """Classical momentum: v <- m*v - lr*g; w <- w + v."""
    for layer, g in zip(model.layers, grads):
        if g is None or layer.w is None:
            continue
        dw, db = g
        layer.vw *= momentum
        layer.vw -= lr * dw
        layer.w += layer.vw
        layer.vb *= momentum
        layer.vb -= lr * db
        layer.b += layer.vb


class EarlyStopper:
    """Stop once `patience` consecutive evaluations fail to beat the best."""

    def __init__(self, patience=5):
        self.patience = patience
        self.best_loss = np.inf
        self.best_index = -1
        self.since_best = 0
        self.count = 0

    def observe(self, loss):
        """Record one evaluation; returns True when training should stop."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_index = self.count
            self.since_best = 0
        else:
            self.since_best += 1
        self.count += 1
        return self.since_best >= self.patience


def evaluate_mse(model, data, indices=None):
    if indices is None:
        indices = range(len(data))
    total = 0.0
    count = 0
    for i in indices:
        x, t = data[int(i)]
        y, _ = forward(model, x, mode="infer")
        total += mse_loss(y, t)
        count += 1
    return total / count


def train_early_stopping(model, train_data, val_data, cfg, rng):
    """Online SGD with periodic validation and patience-based stopping.

    Data objects expose __len__ and __getitem__ -> (input, target), already
    normalized with training-set statistics. Returns (model restored to the
    best evaluation, history list of (updates_done, val_mse)).
    """
    cfg.validate()
    if len(train_data) == 0 or len(val_data) == 0:
        raise EmptyDataError("train and validation sets must be non-empty")

    stopper = EarlyStopper(cfg.patience)
    if cfg.eval_samples and cfg.eval_samples < len(val_data):
        # fixed, evenly spaced validation subset so evaluations stay
        # comparable across the run
        val_idx = np.linspace(0, len(val_data) - 1,
                              cfg.eval_samples).round().astype(int)
    else:
        val_idx = None
    history = []
    best_snap = model.snapshot()
    updates = 0
    stop = False
    while not stop:
        order = rng.permutation(len(train_data))
        for idx in order:
            x, t = train_data[int(idx)]
            y, caches = forward(model, x, mode="train", rng=rng,
                                dropout_layers=cfg.dropout_layers,
                                dropout_p=cfg.dropout_p)
            grads, _ = backward(model, caches, y, t)
            sgd_update(model, grads, cfg.learning_rate, cfg.momentum)
            updates += 1
            if updates % cfg.eval_interval == 0:
                val = evaluate_mse(model, val_data, val_idx)
                history.append((updates, val))
                improved = val < stopper.best_loss
                if stopper.observe(val):
                    stop = True
                if improved:
                    best_snap = model.snapshot()
                if stop:
                    break
            if updates >= cfg.max_updates:
                stop = True
                break
    model.restore(best_snap)
    return model, history


def predict(model, x):
    """De-normalized 3-vector prediction for a raw (un-normalized) input."""
    norm = model.norm
    xn = (np.asarray(x, float) - norm.input_mean) / norm.input_std
    y, _ = forward(model, xn, mode="infer")
    return y * norm.target_std + norm.target_mean


def _unit_indicator(shape, unit):
    ind = np.zeros(shape)
    if len(shape) == 1:
        if not isinstance(unit, (int, np.integer)) \
                or not 0 <= unit < shape[0]:
            raise BadUnitError(f"unit {unit!r} invalid for output {shape}")
        ind[unit] = 1.0
    elif isinstance(unit, tuple) and len(unit) == 2 and unit[0] == "map":
        f = unit[1]
        if not 0 <= f < shape[2]:
            raise BadUnitError(f"filter {f} out of range")
        ind[:, :, f] = 1.0
    elif isinstance(unit, tuple) and len(unit) == 3:
        i, j, f = unit
        if not (0 <= i < shape[0] and 0 <= j < shape[1]
                and 0 <= f < shape[2]):
            raise BadUnitError(f"site {unit} out of range")
        ind[i, j, f] = 1.0
    else:
        raise BadUnitError(f"unit selector {unit!r} invalid for {shape}")
    return ind


def maximize_activation(model, layer_index, unit, rng, iters=100, rate=0.5,
                        l2=0.05):
    """Gradient-ascent input synthesis for a chosen unit.

    The input starts as standard Gaussian noise; each iteration the
    indicator of the selected unit(s) is backpropagated to the input as the
    error vector, so the ascent climbs exactly the chosen activation, and
    the input is updated as x <- x + rate*grad - l2*x. Dropout is disabled.
    Unit selectors: int output index, (i, j, f) single conv site, or
    ("map", f) for every spatial site of filter f.
    """
    if not 0 <= layer_index < len(model.layers):
        raise BadUnitError(f"layer {layer_index} out of range")
    x = rng.normal(size=model.spec.input_shape)
    history = []
    for _ in range(iters):
        _, caches = forward(model, x, mode="infer")
        act = caches[layer_index][3]
        ind = _unit_indicator(act.shape, unit)
        history.append(float((act * ind).sum()))
        _, dx = _backprop(model, caches, ind, layer_index)
        x = x + rate * dx - l2 * x
    return x, history


# ---------------------------------------------------------------------------
# checkpoint format (MUSN)

def _write_array(f, arr):
    arr = np.asarray(arr, float)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(buf, pos):
    if pos + 4 > len(buf):
        raise CorruptDatasetError("truncated checkpoint")
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = []
    for _ in range(ndim):
        if pos + 4 > len(buf):
            raise CorruptDatasetError("truncated checkpoint")
        (d,) = struct.unpack_from("<I", buf, pos)
        shape.append(d)
        pos += 4
    count = int(np.prod(shape)) if shape else 1
    end = pos + 8 * count
    if end > len(buf):
        raise CorruptDatasetError("truncated checkpoint")
    arr = np.frombuffer(buf[pos:end], dtype="<f8").reshape(shape)
    return arr.copy(), end


def save_checkpoint(model, path):
    spec = model.spec
    header = "\n".join([
        f"arch={spec.arch_string()}",
        f"input={spec.input_shape[0]},{spec.input_shape[1]},"
        f"{spec.input_shape[2]}",
        f"input_kernel={spec.input_kernel[0]},{spec.input_kernel[1]}",
        f"hidden_kernel={spec.hidden_kernel[0]},{spec.hidden_kernel[1]}",
    ]).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for arr in (model.norm.input_mean, model.norm.input_std,
                    model.norm.target_mean, model.norm.target_std):
            _write_array(f, arr)
        for layer in model.parameters():
            _write_array(f, layer.w)
            _write_array(f, layer.b)


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise NotADatasetError(f"bad checkpoint magic {buf[:4]!r}")
    if len(buf) < 12:
        raise CorruptDatasetError("truncated checkpoint")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CorruptDatasetError(f"unsupported checkpoint version {version}")
    if 12 + hlen > len(buf):
        raise CorruptDatasetError("truncated checkpoint header")
    header = dict(line.split("=", 1)
                  for line in buf[12:12 + hlen].decode().splitlines())
    input_shape = tuple(int(v) for v in header["input"].split(","))
    spec = parse_architecture(
        header["arch"], input_shape,
        input_kernel=tuple(int(v) for v in header["input_kernel"].split(",")),
        hidden_kernel=tuple(int(v)
                            for v in header["hidden_kernel"].split(",")))
    model = build_network(spec)
    pos = 12 + hlen
    norm = []
    for _ in range(4):
        arr, pos = _read_array(buf, pos)
        norm.append(arr)
    model.norm = NormConstants(*norm)
    for layer in model.parameters():
        w, pos = _read_array(buf, pos)
        b, pos = _read_array(buf, pos)
        if w.shape != layer.w.shape or b.shape != layer.b.shape:
            raise CorruptDatasetError("checkpoint parameter shape mismatch")
        layer.w[...] = w
        layer.b[...] = b
    if pos != len(buf):
        raise CorruptDatasetError("trailing bytes in checkpoint")
    return model
