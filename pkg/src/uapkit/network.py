"""Minimal differentiable image classifier on float64 numpy arrays.

Supports dense, conv2d (valid padding), relu, maxpool2d, flatten and a final
softmax head. Forward passes, class-weighted cross-entropy loss, exact
analytic input gradients (reported in pixel units) and seeded mini-batch SGD
training are provided. Inference and gradient calls never mutate the network,
so they are safe to run concurrently; training mutates weights in place.

Pixel-domain inputs (default [0, 255]) are rescaled to [0, 1] before the
first layer; input gradients are mapped back to pixel units by the chain
rule.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .seeding import stream_rng

# Probability floor applied before the log in the loss. Keeps the loss finite
# on confident mispredictions; the gradient of the floored branch is zero.
PROB_FLOOR = 1e-12

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2d", "flatten", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """Architecture-level description of one layer (no weights)."""

    kind: str
    units: int = 0          # dense
    filters: int = 0        # conv2d
    kernel_size: int = 0    # conv2d / maxpool2d
    stride: int = 1         # conv2d / maxpool2d


def dense(units):
    return LayerSpec("dense", units=int(units))


def conv2d(filters, kernel_size, stride=1):
    return LayerSpec("conv2d", filters=int(filters), kernel_size=int(kernel_size),
                     stride=int(stride))


def relu():
    return LayerSpec("relu")


def maxpool2d(pool_size, stride=None):
    stride = pool_size if stride is None else stride
    return LayerSpec("maxpool2d", kernel_size=int(pool_size), stride=int(stride))


def flatten():
    return LayerSpec("flatten")


def softmax():
    return LayerSpec("softmax")


def _shape_err(index, spec, msg):
    return ValueError(f"layer {index} ({spec.kind}): {msg}")


class _Dense:
    def __init__(self, spec, in_shape, index, rng):
        if len(in_shape) != 1:
            raise _shape_err(index, spec, f"expects a flat input, got shape {in_shape}; "
                                          "insert a flatten layer")
        n_in, n_out = in_shape[0], spec.units
        if n_out < 1:
            raise _shape_err(index, spec, "needs at least one unit")
        self.spec = spec
        self.out_shape = (n_out,)
        # He initialization; biases start at zero.
        self.W = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        self.b = np.zeros(n_out)

    def forward(self, x):
        return x @ self.W + self.b, x

    def backward(self, dy, x, train):
        dx = dy @ self.W.T
        if not train:
            return dx, None
        return dx, (x.T @ dy, dy.sum(axis=0))

    def apply_grads(self, grads, lr):
        dW, db = grads
        self.W -= lr * dW
        self.b -= lr * db

    def params(self):
        return [self.W, self.b]


class _Conv2D:
    """Valid-padding 2-D convolution over (N, H, W, C) batches."""

    def __init__(self, spec, in_shape, index, rng):
        if len(in_shape) != 3:
            raise _shape_err(index, spec, f"expects an HxWxC input, got shape {in_shape}")
        h, w, c_in = in_shape
        k, s = spec.kernel_size, spec.stride
        if k < 1 or s < 1 or spec.filters < 1:
            raise _shape_err(index, spec, "kernel size, stride and filters must be >= 1")
        if k > h or k > w:
            raise _shape_err(index, spec, f"kernel {k}x{k} larger than input {h}x{w}")
        self.spec = spec
        self.out_shape = ((h - k) // s + 1, (w - k) // s + 1, spec.filters)
        fan_in = k * k * c_in
        self.W = rng.standard_normal((k, k, c_in, spec.filters)) * np.sqrt(2.0 / fan_in)
        self.b = np.zeros(spec.filters)

    def _window_matrix(self, x):
        # (N, oh, ow, C, k, k) windows flattened to rows of (C * k * k)
        k, s = self.spec.kernel_size, self.spec.stride
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        n, oh, ow = win.shape[:3]
        return win.reshape(n * oh * ow, -1), (n, oh, ow)

    def forward(self, x):
        c_in, c_out = self.W.shape[2], self.W.shape[3]
        k = self.spec.kernel_size
        win_mat, (n, oh, ow) = self._window_matrix(x)
        # weight rows ordered (channel, row, col) to match the window layout
        w_mat = self.W.transpose(2, 0, 1, 3).reshape(c_in * k * k, c_out)
        y = (win_mat @ w_mat + self.b).reshape(n, oh, ow, c_out)
        return y, (x, win_mat)

    def backward(self, dy, cache, train):
        x, win_mat = cache
        k, s = self.spec.kernel_size, self.spec.stride
        c_in, c_out = self.W.shape[2], self.W.shape[3]
        n, oh, ow, _ = dy.shape

        # One matmul spreads dy over every kernel tap; the taps then
        # scatter-add onto their input positions.
        dy_mat = dy.reshape(n * oh * ow, c_out)
        w_all = self.W.transpose(3, 0, 1, 2).reshape(c_out, k * k * c_in)
        taps = (dy_mat @ w_all).reshape(n, oh, ow, k, k, c_in)
        dx = np.zeros_like(x)
        for i in range(k):
            for j in range(k):
                dx[:, i:i + (oh - 1) * s + 1:s,
                   j:j + (ow - 1) * s + 1:s, :] += taps[:, :, :, i, j, :]
        if not train:
            return dx, None
        dW = (win_mat.T @ dy_mat).reshape(c_in, k, k, c_out).transpose(1, 2, 0, 3)
        return dx, (dW, dy_mat.sum(axis=0))

    def apply_grads(self, grads, lr):
        dW, db = grads
        self.W -= lr * dW
        self.b -= lr * db

    def params(self):
        return [self.W, self.b]


class _ReLU:
    def __init__(self, spec, in_shape, index, rng):
        self.spec = spec
        self.out_shape = in_shape

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, dy, x, train):
        # Subgradient 0 at the kink.
        return dy * (x > 0.0), None

    def apply_grads(self, grads, lr):
        pass

    def params(self):
        return []


class _MaxPool2D:
    def __init__(self, spec, in_shape, index, rng):
        if len(in_shape) != 3:
            raise _shape_err(index, spec, f"expects an HxWxC input, got shape {in_shape}")
        h, w, c = in_shape
        p, s = spec.kernel_size, spec.stride
        if p < 1 or s < 1:
            raise _shape_err(index, spec, "pool size and stride must be >= 1")
        if p > h or p > w:
            raise _shape_err(index, spec, f"pool {p}x{p} larger than input {h}x{w}")
        self.spec = spec
        self.out_shape = ((h - p) // s + 1, (w - p) // s + 1, c)

    def forward(self, x):
        p, s = self.spec.kernel_size, self.spec.stride
        win = sliding_window_view(x, (p, p), axis=(1, 2))[:, ::s, ::s]
        return win.max(axis=(4, 5)), x

    def backward(self, dy, x, train):
        p, s = self.spec.kernel_size, self.spec.stride
        n, oh, ow, c = dy.shape
        win = sliding_window_view(x, (p, p), axis=(1, 2))[:, ::s, ::s]
        # Flatten each window; argmax takes the first maximum in row-major
        # (row, col) order, which fixes the tie rule deterministically.
        flat = win.reshape(n * oh * ow * c, p * p)
        routed = np.zeros_like(flat)
        routed[np.arange(flat.shape[0]), flat.argmax(axis=1)] = dy.ravel()
        routed = routed.reshape(n, oh, ow, c, p, p)
        dx = np.zeros_like(x)
        if s == p:
            # Non-overlapping windows tile the input; undo by reshaping.
            dx[:, :oh * p, :ow * p, :] = routed.transpose(
                0, 1, 4, 2, 5, 3).reshape(n, oh * p, ow * p, c)
        else:
            for i in range(p):
                for j in range(p):
                    dx[:, i:i + (oh - 1) * s + 1:s,
                       j:j + (ow - 1) * s + 1:s, :] += routed[:, :, :, :, i, j]
        return dx, None

    def apply_grads(self, grads, lr):
        pass

    def params(self):
        return []


class _Flatten:
    def __init__(self, spec, in_shape, index, rng):
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), None

    def backward(self, dy, cache, train):
        return dy.reshape(dy.shape[0], *self.in_shape), None

    def apply_grads(self, grads, lr):
        pass

    def params(self):
        return []


class _Softmax:
    def __init__(self, spec, in_shape, index, rng):
        if len(in_shape) != 1:
            raise _shape_err(index, spec, f"expects a flat input, got shape {in_shape}")
        self.spec = spec
        self.out_shape = in_shape

    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)
        return y, y

    def backward(self, dy, y, train):
        # Generic Jacobian-vector product; the loss path uses the fused
        # cross-entropy formula in Network instead.
        inner = (dy * y).sum(axis=1, keepdims=True)
        return y * (dy - inner), None

    def apply_grads(self, grads, lr):
        pass

    def params(self):
        return []


_LAYER_CLASSES = {
    "dense": _Dense,
    "conv2d": _Conv2D,
    "relu": _ReLU,
    "maxpool2d": _MaxPool2D,
    "flatten": _Flatten,
    "softmax": _Softmax,
}


class Network:
    """Layered classifier with a softmax head and class-weighted CE loss.

    Parameters
    ----------
    layer_specs : sequence of LayerSpec
        Architecture, built via the ``dense``/``conv2d``/... constructors.
        The final layer must be ``softmax``.
    input_shape : tuple of int
        Shape of a single input image, e.g. ``(28, 28, 1)``.
    pixel_domain : (low, high)
        Closed pixel interval of valid inputs, default ``(0, 255)``.
    class_weights : array of K positive reals, optional
        Per-class loss weights; defaults to all ones.
    seed : int
        Seeds weight initialization (stream "weight-init").
    """

    def __init__(self, layer_specs, input_shape, pixel_domain=(0.0, 255.0),
                 class_weights=None, seed=0):
        layer_specs = list(layer_specs)
        if not layer_specs:
            raise ValueError("network needs at least one layer")
        for i, spec in enumerate(layer_specs):
            if spec.kind not in LAYER_KINDS:
                raise _shape_err(i, spec, "unknown layer kind")
            if spec.kind == "softmax" and i != len(layer_specs) - 1:
                raise _shape_err(i, spec, "softmax is only supported as the final layer")
        if layer_specs[-1].kind != "softmax":
            raise ValueError(f"layer {len(layer_specs) - 1} ({layer_specs[-1].kind}): "
                             "final layer must be softmax")

        lo, hi = float(pixel_domain[0]), float(pixel_domain[1])
        if not hi > lo:
            raise ValueError(f"pixel domain [{lo}, {hi}] is empty")
        self.input_shape = tuple(int(d) for d in input_shape)
        self.pixel_domain = (lo, hi)
        self._scale = 1.0 / (hi - lo)

        rng = stream_rng(seed, "weight-init")
        self.layers = []
        shape = self.input_shape
        for i, spec in enumerate(layer_specs):
            layer = _LAYER_CLASSES[spec.kind](spec, shape, i, rng)
            self.layers.append(layer)
            shape = layer.out_shape
        if len(shape) != 1:
            raise ValueError(f"network output has shape {shape}, expected a class vector")
        self.num_classes = shape[0]

        if class_weights is None:
            class_weights = np.ones(self.num_classes)
        class_weights = np.asarray(class_weights, dtype=float)
        if class_weights.shape != (self.num_classes,) or not np.all(class_weights > 0):
            raise ValueError(f"class_weights must be {self.num_classes} positive reals")
        self.class_weights = class_weights

    # ------------------------------------------------------------------ shapes

    @property
    def layer_specs(self):
        return [layer.spec for layer in self.layers]

    def num_params(self):
        return sum(p.size for layer in self.layers for p in layer.params())

    def _check_batch(self, images):
        if images.shape[1:] != self.input_shape:
            raise ValueError(f"input: image shape {images.shape[1:]} does not match "
                             f"network input shape {self.input_shape}")

    # ----------------------------------------------------------------- forward

    def _forward_batch(self, images, keep_caches):
        self._check_batch(images)
        a = (images - self.pixel_domain[0]) * self._scale
        caches = [] if keep_caches else None
        for layer in self.layers:
            a, cache = layer.forward(a)
            if keep_caches:
                caches.append(cache)
        return a, caches

    def forward_batch(self, images):
        """Softmax probabilities for a batch, shape (N, K).

        Large batches are processed in fixed-size chunks to bound the memory
        of intermediate activations; results are unaffected.
        """
        images = np.asarray(images, dtype=float)
        chunk = 512
        if len(images) <= chunk:
            return self._forward_batch(images, False)[0]
        return np.concatenate([self._forward_batch(images[i:i + chunk], False)[0]
                               for i in range(0, len(images), chunk)])

    def forward(self, image):
        """Softmax probabilities for a single image, shape (K,)."""
        return self.forward_batch(np.asarray(image, dtype=float)[None])[0]

    def predict_batch(self, images):
        """Predicted class indices for a batch; ties go to the lowest index."""
        return np.argmax(self.forward_batch(images), axis=1)

    def predict(self, image):
        return int(np.argmax(self.forward(image)))

    # -------------------------------------------------------------------- loss

    def _check_labels(self, labels):
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"label out of range [0, {self.num_classes - 1}]: "
                             f"{labels[(labels < 0) | (labels >= self.num_classes)][0]}")
        return labels.astype(np.intp)

    def loss_batch(self, images, labels):
        """Per-sample class-weighted cross-entropy, shape (N,)."""
        labels = self._check_labels(labels)
        probs = self.forward_batch(images)
        p_y = probs[np.arange(len(labels)), labels]
        return -self.class_weights[labels] * np.log(np.maximum(p_y, PROB_FLOOR))

    def loss(self, image, label):
        return float(self.loss_batch(np.asarray(image, dtype=float)[None], [label])[0])

    # --------------------------------------------------------------- gradients

    def _loss_delta(self, probs, labels):
        """Gradient of the summed loss w.r.t. the softmax input (logits).

        For -w_y log p_y the logit gradient is w_y (p - onehot_y); where the
        probability floor is engaged the loss is locally constant and the
        gradient is zero.
        """
        n = probs.shape[0]
        delta = probs.copy()
        delta[np.arange(n), labels] -= 1.0
        delta *= self.class_weights[labels][:, None]
        delta[probs[np.arange(n), labels] < PROB_FLOOR] = 0.0
        return delta

    def _backward_batch(self, delta, caches, train):
        grads = []
        for layer, cache in zip(reversed(self.layers[:-1]), reversed(caches[:-1])):
            delta, g = layer.backward(delta, cache, train)
            grads.append(g)
        grads.reverse()
        # Chain rule through the input rescaling, back to pixel units.
        return delta * self._scale, grads

    def input_gradient_batch(self, images, labels):
        """Exact gradient of the loss w.r.t. pixels, one row per image."""
        images = np.asarray(images, dtype=float)
        labels = self._check_labels(labels)
        probs, caches = self._forward_batch(images, True)
        delta = self._loss_delta(probs, labels)
        dx, _ = self._backward_batch(delta, caches, False)
        return dx

    def input_gradient(self, image, label):
        return self.input_gradient_batch(np.asarray(image, dtype=float)[None], [label])[0]

    # ---------------------------------------------------------------- training

    def train(self, data, epochs, lr, batch_size=32, seed=0):
        """Mini-batch SGD on the class-weighted cross-entropy.

        The shuffle order is drawn from stream "train-shuffle" of `seed`, so
        repeated runs from identical weights give bit-identical results.
        Returns the network itself (weights updated in place).
        """
        images = np.asarray(data.images, dtype=float)
        labels = self._check_labels(data.labels)
        if len(images) == 0:
            raise ValueError("training dataset is empty")
        if len(images) != len(labels):
            raise ValueError(f"got {len(images)} images but {len(labels)} labels")
        if epochs < 0 or lr <= 0 or batch_size < 1:
            raise ValueError("epochs must be >= 0, lr > 0, batch_size >= 1")

        rng = stream_rng(seed, "train-shuffle")
        n = len(images)
        for epoch in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                sel = order[start:start + batch_size]
                xb, yb = images[sel], labels[sel]
                probs, caches = self._forward_batch(xb, True)
                p_y = probs[np.arange(len(sel)), yb]
                batch_loss = float(np.mean(-self.class_weights[yb]
                                           * np.log(np.maximum(p_y, PROB_FLOOR))))
                if not np.isfinite(batch_loss):
                    raise FloatingPointError(
                        f"non-finite loss {batch_loss} at epoch {epoch}, "
                        f"batch starting at {start}; training aborted")
                delta = self._loss_delta(probs, yb) / len(sel)
                _, grads = self._backward_batch(delta, caches, True)
                for layer, g in zip(self.layers[:-1], grads):
                    if g is not None:
                        layer.apply_grads(g, lr)
        return self


def inverse_frequency_weights(labels, num_classes):
    """Class weights proportional to N / (K * count_c); rarer classes weigh more."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes).astype(float)
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"class {missing} has no samples; cannot weight by frequency")
    return len(labels) / (num_classes * counts)
