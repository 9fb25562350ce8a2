"""1-D AlexNet-style CNN for tri-axial acceleration windows."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from ..errors import DivergenceError, FitError, FormatError

log = logging.getLogger(__name__)

MAGIC = b"CSCNN1\x00\x00"


def normalize_window(w: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-axis standardisation; near-constant axes are only centred."""
    w = np.asarray(w, dtype=np.float64)
    mean = w.mean(axis=-1, keepdims=True)
    std = w.std(axis=-1, keepdims=True)
    return (w - mean) / np.where(std < eps, 1.0, std)


@dataclass
class CnnConfig:
    in_channels: int = 3
    length: int = 60
    channels: tuple = (16, 48, 96, 64, 64)
    hidden: tuple = (256, 256)
    dropout: float = 0.5


class AccelCnn(nn.Module):
    """Five conv layers (kernel 5, then 3), max-pool after layers 1, 2 and 5, two hidden
    affine layers and a scalar logit."""

    def __init__(self, cfg: CnnConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or CnnConfig()
        c = cfg.channels
        self.features = nn.Sequential(
            nn.Conv1d(cfg.in_channels, c[0], 5, padding=1), nn.ReLU(),
            nn.MaxPool1d(3, 2),
            nn.Conv1d(c[0], c[1], 3, padding=1), nn.ReLU(),
            nn.MaxPool1d(3, 2),
            nn.Conv1d(c[1], c[2], 3, padding=1), nn.ReLU(),
            nn.Conv1d(c[2], c[3], 3, padding=1), nn.ReLU(),
            nn.Conv1d(c[3], c[4], 3, padding=1), nn.ReLU(),
            nn.MaxPool1d(3, 2),
        )
        with torch.no_grad():
            n_flat = self.features(torch.zeros(1, cfg.in_channels, cfg.length)).numel()
        self.classifier = nn.Sequential(
            nn.Dropout(cfg.dropout), nn.Linear(n_flat, cfg.hidden[0]), nn.ReLU(),
            nn.Dropout(cfg.dropout), nn.Linear(cfg.hidden[0], cfg.hidden[1]), nn.ReLU(),
            nn.Linear(cfg.hidden[1], 1),
        )

    def forward(self, x):
        return self.classifier(torch.flatten(self.features(x), 1)).squeeze(-1)

    @property
    def output_layer(self) -> nn.Linear:
        return self.classifier[-1]


def cnn_forward(model: AccelCnn, windows: np.ndarray) -> np.ndarray:
    """Eval-mode logits for normalised windows of shape (3, T) or (n, 3, T)."""
    x = np.asarray(windows)
    single = x.ndim == 2
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(np.atleast_3d(x[None] if single else x), dtype=dtype))
    out = out.numpy().astype(np.float64)
    return out[0] if single else out


def cnn_predict_proba(model: AccelCnn, windows: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-cnn_forward(model, windows)))


def _auc(scores, labels) -> float:
    from ..evaluation import roc_auc
    return roc_auc(scores, labels)


def cnn_train(train_x: np.ndarray, train_y, val_x: np.ndarray | None = None, val_y=None,
              seed: int = 0, lr: float = 1e-3, batch_size: int = 64, max_epochs: int = 100,
              patience: int = 10, cfg: CnnConfig | None = None) -> AccelCnn:
    """Adam + binary cross-entropy, early-stopped on validation AUC (best epoch kept)."""
    train_y = np.asarray(train_y, dtype=np.float64)
    if len(np.unique(train_y)) < 2:
        raise FitError("CNN training needs both classes")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    cfg = cfg or CnnConfig(length=train_x.shape[-1])
    model = AccelCnn(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999))
    loss_fn = nn.BCEWithLogitsLoss()
    xt = torch.as_tensor(np.asarray(train_x), dtype=torch.float32)
    yt = torch.as_tensor(train_y, dtype=torch.float32)
    use_val = val_x is not None and val_y is not None and len(np.unique(val_y)) == 2
    best_auc, best_state, stale = -np.inf, None, 0
    for epoch in range(max_epochs):
        model.train()
        order = torch.as_tensor(rng.permutation(len(xt)))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            opt.zero_grad()
            loss = loss_fn(model(xt[idx]), yt[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {s // batch_size}: "
                                      f"{loss.item()} (lr={lr})")
            loss.backward()
            opt.step()
        if not use_val:
            continue
        auc = _auc(cnn_forward(model, val_x), val_y)
        if auc > best_auc:
            best_auc, stale = auc, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model


def save_cnn(path, model: AccelCnn, meta: dict | None = None) -> None:
    """Versioned header (JSON) followed by little-endian f32 tensors."""
    tensors, offset, blobs = [], 0, []
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    cfg = asdict(model.cfg)
    header = json.dumps({"version": 1, "config": cfg, "tensors": tensors, "meta": meta or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def _read_header(data: bytes, path) -> dict:
    if data[:8] != MAGIC:
        raise FormatError(path, 0, "bad magic; not a CNN model file")
    if len(data) < 12:
        raise FormatError(path, 8, "truncated header length")
    (hlen,) = struct.unpack_from("<I", data, 8)
    try:
        return json.loads(data[12:12 + hlen])
    except ValueError:
        raise FormatError(path, 12, "unreadable header") from None


def read_cnn_meta(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) == 12 and head[:8] == MAGIC:
            head += fh.read(struct.unpack_from("<I", head, 8)[0])
    return _read_header(head, path).get("meta", {})


def load_cnn(path) -> AccelCnn:
    with open(path, "rb") as fh:
        data = fh.read()
    header = _read_header(data, path)
    hlen = struct.unpack_from("<I", data, 8)[0]
    cfg = header["config"]
    model = AccelCnn(CnnConfig(cfg["in_channels"], cfg["length"], tuple(cfg["channels"]),
                               tuple(cfg["hidden"]), cfg["dropout"]))
    base = 12 + hlen
    state = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        start = base + t["offset"]
        if start + 4 * n > len(data):
            raise FormatError(path, start, f"tensor {t['name']} truncated")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=start).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return model
