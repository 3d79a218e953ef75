#!/usr/bin/env python3
"""Builds the bundled test fixture: a small trained VGG-style network and
synthetic image sets in the nnspec formats.

ID data are oriented gratings, one orientation per class. near_ood uses the
orientations halfway between classes; far_ood is uniform pixel noise.

    python3 tests/fixtures/make_fixture.py [--out tests/fixtures]
"""

import argparse
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

SIZE = 16
CLASSES = 10


def write_spt(path, array):
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"SPT1")
        f.write(struct.pack("<II", 1, a.ndim))
        for d in a.shape:
            f.write(struct.pack("<Q", d))
        f.write(a.tobytes())


def write_spd(path, images, labels=None):
    n, h, w, c = images.shape
    with open(path, "wb") as f:
        f.write(b"SPD1")
        f.write(struct.pack("<IIIIIB", 1, n, h, w, c, 0 if labels is None else 1))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())
        if labels is not None:
            f.write(np.asarray(labels, dtype="<u2").tobytes())


def gratings(rng, angles):
    n = len(angles)
    yy, xx = np.meshgrid(np.arange(SIZE), np.arange(SIZE), indexing="ij")
    freq = rng.uniform(1.5, 3.0, n) * 2 * math.pi / SIZE
    phase = rng.uniform(0, 2 * math.pi, n)
    tint = rng.uniform(0.6, 1.0, (n, 3))
    u = np.cos(angles)[:, None, None] * xx + np.sin(angles)[:, None, None] * yy
    wave = np.sin(freq[:, None, None] * u + phase[:, None, None])
    img = 128 + 90 * wave[..., None] * tint[:, None, None, :]
    img += rng.normal(0, 12, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def id_set(rng, n):
    labels = np.arange(n) % CLASSES
    rng.shuffle(labels)
    angles = labels * math.pi / CLASSES + rng.normal(0, 0.03, n)
    return gratings(rng, angles), labels


def near_ood(rng, n):
    k = rng.integers(0, CLASSES, n)
    return gratings(rng, (k + 0.5) * math.pi / CLASSES)


def far_ood(rng, n):
    return rng.integers(0, 256, (n, SIZE, SIZE, 3), dtype=np.uint8)


class TinyVgg(nn.Module):
    def __init__(self):
        super().__init__()
        chans = [3, 8, 16, 32, 32]
        pools = [False, True, True, True]
        feats = []
        for i in range(4):
            feats += [nn.Conv2d(chans[i], chans[i + 1], 3, padding=1, bias=False),
                      nn.BatchNorm2d(chans[i + 1]), nn.ReLU()]
            if pools[i]:
                feats.append(nn.MaxPool2d(2, 2))
        self.features = nn.Sequential(*feats)
        self.classifier = nn.Sequential(
            nn.Flatten(), nn.Linear(128, 64), nn.ReLU(), nn.Linear(64, 32), nn.ReLU(),
            nn.Linear(32, CLASSES))

    def forward(self, x):
        return self.classifier(self.features(x))


def export(model, out_dir, mean, std):
    out_dir.mkdir(parents=True, exist_ok=True)
    layers = []

    def blob(layer_id, name, t):
        rel = f"{layer_id}.{name}.spt"
        write_spt(out_dir / rel, t.detach().cpu().numpy())
        return rel

    conv_i = 0
    for m in model.features:
        if isinstance(m, nn.Conv2d):
            conv_i += 1
            lid = f"conv{conv_i}"
            layers.append({"id": lid, "kind": "conv2d", "in_ch": m.in_channels,
                           "out_ch": m.out_channels, "kh": m.kernel_size[0],
                           "kw": m.kernel_size[1], "stride": m.stride[0], "pad": m.padding[0],
                           "weights": {"weight": blob(lid, "weight", m.weight)}})
        elif isinstance(m, nn.BatchNorm2d):
            lid = f"bn{conv_i}"
            layers.append({"id": lid, "kind": "batchnorm", "channels": m.num_features,
                           "epsilon": m.eps,
                           "weights": {"gamma": blob(lid, "gamma", m.weight),
                                       "beta": blob(lid, "beta", m.bias),
                                       "running_mean": blob(lid, "running_mean", m.running_mean),
                                       "running_var": blob(lid, "running_var", m.running_var)}})
        elif isinstance(m, nn.ReLU):
            layers.append({"id": f"relu{conv_i}", "kind": "relu"})
        elif isinstance(m, nn.MaxPool2d):
            layers.append({"id": f"pool{conv_i}", "kind": "maxpool", "k": 2, "stride": 2})
    fc_i = 0
    for m in model.classifier:
        if isinstance(m, nn.Flatten):
            layers.append({"id": "flatten", "kind": "flatten"})
        elif isinstance(m, nn.Linear):
            fc_i += 1
            lid = f"fc{fc_i}"
            layers.append({"id": lid, "kind": "linear", "in_dim": m.in_features,
                           "out_dim": m.out_features,
                           "weights": {"weight": blob(lid, "weight", m.weight),
                                       "bias": blob(lid, "bias", m.bias)}})
        elif isinstance(m, nn.ReLU):
            layers.append({"id": f"fc_relu{fc_i}", "kind": "relu"})
    manifest = {"format": "nnspec-manifest", "version": 1, "name": "tiny_vgg",
                "input": {"channels": 3, "height": SIZE, "width": SIZE},
                "class_count": CLASSES,
                "normalization": {"scale": 1.0 / 255.0, "mean": mean, "std": std},
                "layers": layers}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def to_input(images, mean, std):
    x = torch.from_numpy(images.astype(np.float32) / 255.0).permute(0, 3, 1, 2)
    return (x - torch.tensor(mean).view(1, 3, 1, 1)) / torch.tensor(std).view(1, 3, 1, 1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent))
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    torch.manual_seed(args.seed)

    train_x, train_y = id_set(rng, 2000)
    test_x, test_y = id_set(rng, 1000)
    data = out / "data"
    data.mkdir(parents=True, exist_ok=True)
    write_spd(data / "train.spd", train_x, train_y)
    write_spd(data / "id_test.spd", test_x, test_y)
    write_spd(data / "near_ood.spd", near_ood(rng, 1000))
    write_spd(data / "far_ood.spd", far_ood(rng, 1000))
    # Second draw from the training distribution, for same-distribution checks.
    hold_x, hold_y = id_set(rng, 1000)
    write_spd(data / "id_holdout.spd", hold_x, hold_y)

    flat = train_x.reshape(-1, 3).astype(np.float64) / 255.0
    mean = [round(float(v), 6) for v in flat.mean(0)]
    std = [round(float(v), 6) for v in flat.std(0)]

    model = TinyVgg()
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    xs, ys = to_input(train_x, mean, std), torch.from_numpy(train_y.astype(np.int64))
    for epoch in range(15):
        model.train()
        perm = torch.randperm(len(xs))
        for i in range(0, len(xs), 64):
            idx = perm[i:i + 64]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(model(xs[idx]), ys[idx])
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        logits = model(to_input(test_x, mean, std))
    acc = (logits.argmax(1).numpy() == test_y).mean()
    print(f"test accuracy {acc:.3f}")

    export(model, out / "tiny_vgg", mean, std)
    write_spt(out / "tiny_vgg" / "probe_logits.spt", logits[:32].numpy())


if __name__ == "__main__":
    main()
