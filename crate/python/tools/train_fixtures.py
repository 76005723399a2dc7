"""Train the small fixture networks and write them as SNNF models.

Offline tooling: produces the files under crates/core/fixtures/ that the Rust
test suites load. Uses the 8x8 handwritten digits set bundled with
scikit-learn (10 classes, no download required).

    python python/tools/train_fixtures.py [--out crates/core/fixtures]
"""

import argparse
import json
import os
import struct

import numpy as np
import torch
import torch.nn as nn
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split

FORMAT_VERSION = 1


def write_blob(path, entries):
    """entries: list of (name, np.ndarray float32)."""
    with open(path, "wb") as f:
        f.write(b"SNNF")
        f.write(struct.pack("<II", FORMAT_VERSION, len(entries)))
        for name, arr in entries:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", 0, arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def write_dataset(path, x):
    x = np.ascontiguousarray(x, dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"SNND")
        f.write(struct.pack("<BB", 0, x.ndim))
        for d in x.shape:
            f.write(struct.pack("<I", d))
        f.write(x.tobytes())


def write_labels(path, y):
    y = np.ascontiguousarray(y, dtype="<u4")
    with open(path, "wb") as f:
        f.write(b"SNNL")
        f.write(struct.pack("<I", len(y)))
        f.write(y.tobytes())


class ConvNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 16, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(16)
        self.pool = nn.MaxPool2d(2)
        self.conv2 = nn.Conv2d(16, 16, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(16)
        self.conv3 = nn.Conv2d(16, 16, 3, padding=1)
        self.bn3 = nn.BatchNorm2d(16)
        self.fc1 = nn.Linear(256, 64)
        self.fc2 = nn.Linear(64, 10)

    def forward(self, x):
        x = self.pool(torch.relu(self.bn1(self.conv1(x))))
        y = torch.relu(self.bn2(self.conv2(x)))
        y = self.bn3(self.conv3(y))
        x = torch.relu(x + y)
        x = torch.relu(self.fc1(x.flatten(1)))
        return self.fc2(x)

    def export(self):
        def conv(name, m):
            return {
                "kind": "conv2d",
                "in_channels": m.in_channels,
                "out_channels": m.out_channels,
                "kernel": list(m.kernel_size),
                "stride": list(m.stride),
                "padding": list(m.padding),
                "weight": f"{name}.weight",
                "bias": f"{name}.bias",
            }

        def bn(name, m):
            return {
                "kind": "batch_norm",
                "channels": m.num_features,
                "eps": m.eps,
                "gamma": f"{name}.weight",
                "beta": f"{name}.bias",
                "mean": f"{name}.running_mean",
                "var": f"{name}.running_var",
            }

        def dense(name, m):
            return {
                "kind": "dense",
                "in_features": m.in_features,
                "out_features": m.out_features,
                "weight": f"{name}.weight",
                "bias": f"{name}.bias",
            }

        layers = [
            conv("conv1", self.conv1),          # 0
            bn("bn1", self.bn1),                # 1
            {"kind": "activation"},             # 2
            {"kind": "max_pool", "kernel": [2, 2], "stride": [2, 2]},  # 3
            conv("conv2", self.conv2),          # 4
            bn("bn2", self.bn2),                # 5
            {"kind": "activation"},             # 6
            conv("conv3", self.conv3),          # 7
            bn("bn3", self.bn3),                # 8
            {"kind": "residual_add", "source": 3},  # 9
            {"kind": "activation"},             # 10
            {"kind": "flatten"},                # 11
            dense("fc1", self.fc1),             # 12
            {"kind": "activation"},             # 13
            dense("fc2", self.fc2),             # 14
        ]
        return layers


class Mlp(nn.Module):
    def __init__(self):
        super().__init__()
        self.fc1 = nn.Linear(64, 64)
        self.fc2 = nn.Linear(64, 32)
        self.fc3 = nn.Linear(32, 10)

    def forward(self, x):
        x = x.flatten(1)
        x = torch.relu(self.fc1(x))
        x = torch.relu(self.fc2(x))
        return self.fc3(x)

    def export(self):
        def dense(name, m):
            return {
                "kind": "dense",
                "in_features": m.in_features,
                "out_features": m.out_features,
                "weight": f"{name}.weight",
                "bias": f"{name}.bias",
            }

        return [
            {"kind": "flatten"},
            dense("fc1", self.fc1),
            {"kind": "activation"},
            dense("fc2", self.fc2),
            {"kind": "activation"},
            dense("fc3", self.fc3),
        ]


def train(model, xtr, ytr, epochs, seed):
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=3e-3, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
    loss_fn = nn.CrossEntropyLoss()
    n = xtr.shape[0]
    g = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        model.train()
        perm = torch.randperm(n, generator=g)
        for i in range(0, n, 64):
            idx = perm[i : i + 64]
            opt.zero_grad()
            loss = loss_fn(model(xtr[idx]), ytr[idx])
            loss.backward()
            opt.step()
        sched.step()
    model.eval()


def accuracy(model, x, y):
    with torch.no_grad():
        return (model(x).argmax(1) == y).float().mean().item()


def save_model(model, input_shape, out_dir, stem):
    entries = [(k, v.detach().cpu().numpy()) for k, v in model.state_dict().items()
               if not k.endswith("num_batches_tracked")]
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": input_shape,
        "activation_mode": "relu",
        "layers": model.export(),
    }
    write_blob(os.path.join(out_dir, f"{stem}.snnf"), entries)
    with open(os.path.join(out_dir, f"{stem}.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="crates/core/fixtures")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    torch.set_num_threads(1)

    digits = load_digits()
    x = (digits.images / 16.0).astype(np.float32)[:, None, :, :]
    y = digits.target.astype(np.int64)
    xtr, xte, ytr, yte = train_test_split(x, y, test_size=0.2, random_state=args.seed, stratify=y)

    write_dataset(os.path.join(args.out, "digits_train.snnd"), xtr)
    write_labels(os.path.join(args.out, "digits_train.labels"), ytr)
    write_dataset(os.path.join(args.out, "digits_test.snnd"), xte)
    write_labels(os.path.join(args.out, "digits_test.labels"), yte)

    xtr_t, ytr_t = torch.from_numpy(xtr), torch.from_numpy(ytr)
    xte_t, yte_t = torch.from_numpy(xte), torch.from_numpy(yte)

    for stem, model, epochs in (("mlp", Mlp(), 60), ("convnet", ConvNet(), 40)):
        torch.manual_seed(args.seed)
        model.__init__()
        train(model, xtr_t, ytr_t, epochs, args.seed)
        print(f"{stem}: train acc {accuracy(model, xtr_t, ytr_t):.4f} "
              f"test acc {accuracy(model, xte_t, yte_t):.4f}")
        save_model(model, [1, 8, 8], args.out, stem)


if __name__ == "__main__":
    main()
