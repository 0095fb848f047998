#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Regenerates everything under fixtures/.

Source digits come from the `mnist` npm package (v1.1.0, MIT), which bundles
10,000 MNIST digits as JSON arrays of 784 floats each:

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 tools/fixtures/make_fixtures.py --digits package/src/digits --out fixtures

Outputs
    mnist/t1k-images.idx3, mnist/t1k-labels.idx1   1,000 held-out test digits
    lenet/lenet.{json,bin}                         trained on the other 9,000
    stack20/stack20_bn.{json,bin}                  20 x (conv 3x3 -> batchnorm -> relu)
    stack20/stack20_nobn.{json,bin}                20 x (conv 3x3 -> relu)
    convtypes/convtypes.{json,bin}                 conventional and depthwise branches
    residual/residual.{json,bin}                   two-branch residual block with batchnorm

After regenerating, refreeze the golden numbers in tests/goldens.hpp.
"""

import argparse
import json
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

SEED = 20240611


def load_digits(digits_dir):
    images, labels = [], []
    for d in range(10):
        data = json.loads((Path(digits_dir) / f"{d}.json").read_text())["data"]
        arr = np.asarray(data, dtype=np.float64).reshape(-1, 28 * 28)
        images.append(np.rint(arr * 255.0).clip(0, 255).astype(np.uint8))
        labels.append(np.full(len(arr), d, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(SEED).permutation(len(images))
    return images[order], labels[order]


def write_idx(out_dir, images, labels, stem):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{stem}-images.idx3", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        f.write(images.tobytes())
    with open(out_dir / f"{stem}-labels.idx1", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.tobytes())


class Manifest:
    """Builds a version-1 manifest and its single blob file."""

    def __init__(self, name, input_shape, input_name="data"):
        self.name = name
        self.input = {"name": input_name, "shape": list(input_shape)}
        self.nodes = []
        self.outputs = []
        self.blob = bytearray()

    def _blob(self, values):
        arr = np.ascontiguousarray(np.asarray(values, dtype="<f4").ravel())
        ref = {"file": f"{self.name}.bin", "offset": len(self.blob), "length": arr.nbytes, "count": int(arr.size)}
        self.blob += arr.tobytes()
        return ref

    def conv(self, name, src, weights, bias=None, stride=1, pad=0, groups=1, multiplier=None):
        oc, icg, kh, kw = weights.shape
        node = {"name": name, "type": "conv", "inputs": [src], "output": name,
                "params": {"out_channels": oc, "in_channels": icg * groups, "kernel": [kh, kw],
                           "stride": stride, "pad": pad, "groups": groups},
                "blobs": {"weights": self._blob(weights)}}
        if bias is not None:
            node["blobs"]["bias"] = self._blob(bias)
        if multiplier:
            node["multiplier"] = multiplier
        self.nodes.append(node)
        return name

    def fc(self, name, src, weights, bias=None):
        out_f, in_f = weights.shape
        node = {"name": name, "type": "fc", "inputs": [src], "output": name,
                "params": {"out_features": out_f, "in_features": in_f},
                "blobs": {"weights": self._blob(weights)}}
        if bias is not None:
            node["blobs"]["bias"] = self._blob(bias)
        self.nodes.append(node)
        return name

    def batchnorm(self, name, src, mean, var, scale, shift, eps=1e-5):
        self.nodes.append({"name": name, "type": "batchnorm", "inputs": [src], "output": name,
                           "params": {"channels": len(mean), "epsilon": eps, "placement": "before_activation"},
                           "blobs": {"mean": self._blob(mean), "variance": self._blob(var),
                                     "scale": self._blob(scale), "shift": self._blob(shift)}})
        return name

    def simple(self, name, kind, inputs, params=None):
        node = {"name": name, "type": kind, "inputs": list(inputs), "output": name}
        if params:
            node["params"] = params
        self.nodes.append(node)
        return name

    def write(self, out_dir):
        out_dir.mkdir(parents=True, exist_ok=True)
        doc = {"version": "1", "name": self.name, "input": self.input, "outputs": self.outputs, "nodes": self.nodes}
        (out_dir / f"{self.name}.json").write_text(json.dumps(doc, indent=2) + "\n")
        (out_dir / f"{self.name}.bin").write_bytes(bytes(self.blob))


def as_batch(images):
    return torch.from_numpy(images.reshape(-1, 1, 28, 28).astype(np.float32) / 255.0)


# LeNet ------------------------------------------------------------------------

def train_lenet(train_x, train_y):
    torch.manual_seed(SEED)
    conv1 = torch.nn.Conv2d(1, 6, 5)
    conv2 = torch.nn.Conv2d(6, 16, 5)
    fc1 = torch.nn.Linear(256, 120)
    fc2 = torch.nn.Linear(120, 10)
    params = [p for m in (conv1, conv2, fc1, fc2) for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=2e-3)

    def forward(x):
        x = F.max_pool2d(conv1(x), 2)
        x = F.max_pool2d(conv2(x), 2)
        return fc2(F.relu(fc1(x.flatten(1))))

    x = as_batch(train_x)
    y = torch.from_numpy(train_y.astype(np.int64))
    gen = torch.Generator().manual_seed(SEED)
    for _ in range(8):
        perm = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), 64):
            idx = perm[i:i + 64]
            opt.zero_grad()
            F.cross_entropy(forward(x[idx]), y[idx]).backward()
            opt.step()
    return conv1, conv2, fc1, fc2, forward


def make_lenet(out, train_x, train_y, test_x, test_y):
    conv1, conv2, fc1, fc2, forward = train_lenet(train_x, train_y)
    with torch.no_grad():
        acc = (forward(as_batch(test_x)).argmax(1).numpy() == test_y).mean()
    print(f"lenet float32 test accuracy {acc:.4f}")
    m = Manifest("lenet", (1, 28, 28))
    t = lambda p: p.detach().numpy()
    h = m.conv("conv1", "data", t(conv1.weight), t(conv1.bias))
    h = m.simple("pool1", "maxpool", [h], {"kernel": 2, "stride": 2})
    h = m.conv("conv2", h, t(conv2.weight), t(conv2.bias))
    h = m.simple("pool2", "maxpool", [h], {"kernel": 2, "stride": 2})
    h = m.fc("fc1", h, t(fc1.weight), t(fc1.bias))
    h = m.simple("relu1", "relu", [h])
    m.outputs = [m.fc("fc2", h, t(fc2.weight), t(fc2.bias))]
    m.write(out / "lenet")


# 20-layer stack ---------------------------------------------------------------

def positive_mean_weights(rng, shape):
    """Mostly positive weights with log-uniform magnitudes over four octaves.

    Log-uniform magnitudes give the operand mantissa statistics of random
    characterization once products are weighted by size.
    """
    fan_in = shape[1] * shape[2] * shape[3]
    mag = np.exp2(rng.uniform(-4.0, 0.0, size=shape))
    sign = np.where(rng.uniform(size=shape) < 0.85, 1.0, -1.0)
    return sign * mag * (4.0 / fan_in)


def pow2_gain(mean):
    """Power-of-two factor bringing `mean` close to 1 without touching mantissas."""
    return float(np.exp2(-np.round(np.log2(mean))))


def make_stack(out, calib_x):
    rng = np.random.default_rng(SEED + 20)
    x = as_batch(calib_x).double()
    bn = Manifest("stack20_bn", (1, 28, 28))
    plain = Manifest("stack20_nobn", (1, 28, 28))
    h_bn = h_plain = "data"
    a_bn = a_plain = x
    channels = 8
    for layer in range(1, 21):
        cin = 1 if layer == 1 else channels
        w = positive_mean_weights(rng, (channels, cin, 3, 3))

        # Without batch norm each layer is rescaled so its mean output stays near 1.
        z = F.conv2d(a_plain, torch.from_numpy(w), padding=1)
        w_plain = w * pow2_gain(z.relu().mean().item())
        h_plain = plain.conv(f"conv{layer}", h_plain, w_plain, pad=1)
        h_plain = plain.simple(f"relu{layer}", "relu", [h_plain])
        a_plain = F.conv2d(a_plain, torch.from_numpy(w_plain), padding=1).relu()

        # With batch norm: statistics from calibration data; scale and shift
        # chosen so the layer acts as a positive per-channel gain.
        z = F.conv2d(a_bn, torch.from_numpy(w), padding=1)
        mean = z.mean((0, 2, 3)).numpy()
        var = z.var((0, 2, 3), unbiased=False).numpy()
        gain = np.array([pow2_gain(max(v, 1e-3)) for v in z.relu().mean((0, 2, 3)).numpy()])
        scale = np.sqrt(var + 1e-5) * gain
        shift = gain * mean + rng.normal(0.0, 0.005, size=channels)
        h_bn = bn.conv(f"conv{layer}", h_bn, w, pad=1)
        h_bn = bn.batchnorm(f"bn{layer}", h_bn, mean, var, scale, shift)
        h_bn = bn.simple(f"relu{layer}", "relu", [h_bn])
        y = (z - torch.from_numpy(mean)[None, :, None, None]) / torch.from_numpy(np.sqrt(var + 1e-5))[None, :, None, None]
        a_bn = (y * torch.from_numpy(scale)[None, :, None, None] + torch.from_numpy(shift)[None, :, None, None]).relu()
    bn.outputs = [h_bn]
    plain.outputs = [h_plain]
    bn.write(out / "stack20")
    plain.write(out / "stack20")


# Conventional vs depthwise ----------------------------------------------------

def make_convtypes(out):
    rng = np.random.default_rng(SEED + 30)
    m = Manifest("convtypes", (1, 28, 28))
    w0 = rng.normal(0.0, 0.5, size=(64, 1, 3, 3))
    b0 = rng.normal(0.1, 0.05, size=64)
    h = m.conv("conv0", "data", w0, b0, pad=1, multiplier="exact")
    h = m.simple("relu0", "relu", [h])
    conv = m.conv("conventional", h, positive_mean_weights(rng, (64, 64, 3, 3)), pad=1)
    dw = m.conv("depthwise", h, positive_mean_weights(rng, (64, 1, 3, 3)), pad=1, groups=64)
    m.outputs = [conv, dw]
    m.write(out / "convtypes")


# Residual ---------------------------------------------------------------------

def make_residual(out, calib_x):
    rng = np.random.default_rng(SEED + 40)
    m = Manifest("residual", (1, 28, 28))
    a = {"data": as_batch(calib_x).double()}

    def conv_bn(name, src, cin, cout):
        w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))
        z = F.conv2d(a[src], torch.from_numpy(w), padding=1)
        mean = z.mean((0, 2, 3)).numpy()
        var = z.var((0, 2, 3), unbiased=False).numpy()
        scale = rng.uniform(0.5, 1.5, size=cout)
        shift = rng.normal(0.0, 0.1, size=cout)
        c = m.conv(f"{name}_conv", src, w, pad=1)
        b = m.batchnorm(f"{name}_bn", c, mean, var, scale, shift)
        t = lambda v: torch.from_numpy(v)[None, :, None, None]
        a[b] = (z - t(mean)) / t(np.sqrt(var + 1e-5)) * t(scale) + t(shift)
        return b

    stem = conv_bn("stem", "data", 1, 8)
    r = m.simple("stem_relu", "relu", [stem])
    a[r] = a[stem].relu()
    b1 = conv_bn("branch1", r, 8, 8)
    r1 = m.simple("branch1_relu", "relu", [b1])
    a[r1] = a[b1].relu()
    b2 = conv_bn("branch2", r1, 8, 8)
    s = m.simple("sum", "add", [b2, r])
    r2 = m.simple("sum_relu", "relu", [s])
    p = m.simple("pool", "avgpool", [r2], {"global": True})
    m.outputs = [m.fc("fc", p, rng.normal(0.0, 0.3, size=(10, 8)), rng.normal(0.0, 0.1, size=10))]
    m.write(out / "residual")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--digits", required=True, help="directory holding 0.json .. 9.json")
    ap.add_argument("--out", default="fixtures")
    args = ap.parse_args()
    torch.set_num_threads(1)
    out = Path(args.out)

    images, labels = load_digits(args.digits)
    test_x, test_y = images[:1000], labels[:1000]
    train_x, train_y = images[1000:], labels[1000:]
    write_idx(out / "mnist", test_x, test_y, "t1k")
    make_lenet(out, train_x, train_y, test_x, test_y)
    make_stack(out, train_x[:64])
    make_convtypes(out)
    make_residual(out, train_x[:64])


if __name__ == "__main__":
    main()
