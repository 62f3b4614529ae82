"""Quantization-aware training loop, its configuration and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from ..packing import save_packed
from ..quantize import SIGNED_BINARY, VARIANTS, density
from ..tensor import save_tensor
from .data import load_dataset, random_crop_flip
from .ede import T_MAX, T_MIN, ede_schedule
from .layers import FULL_PRECISION, to_rsck
from .models import build_model, quant_layers

log = logging.getLogger(__name__)


def _parse_bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "on", "yes"):
        return True
    if s in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_floats(v):
    if isinstance(v, (list, tuple)):
        return tuple(float(x) for x in v)
    return tuple(float(x) for x in str(v).split(",") if x.strip())


def _parse_opt_int(v):
    if v is None or str(v).strip().lower() in ("", "none"):
        return None
    return int(v)


@dataclass
class TrainConfig:
    model: str = "cnn4"
    dataset: str = "digits"
    data_dir: str | None = None
    scheme: str = SIGNED_BINARY
    p: float = 0.5
    delta_coeff: float = 0.05
    ede: bool = True
    t_min: float = T_MIN
    t_max: float = T_MAX
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.01
    # learning rate is multiplied by lr_gamma at each of these fractions of the run
    lr_milestones: tuple = (150 / 350, 200 / 350, 320 / 350)
    lr_gamma: float = 0.1
    weight_decay: float = 0.0
    c_tile: int | None = None
    multiplier: int = 1
    nonlinearity: str = "prelu"
    width: int = 16
    augment: bool = False
    seed: int = 0
    threads: int = 1
    out_dir: str | None = None

    _parsers = {
        "p": float, "delta_coeff": float, "t_min": float, "t_max": float, "lr": float,
        "lr_gamma": float, "weight_decay": float, "epochs": int, "batch_size": int,
        "multiplier": int, "width": int, "seed": int, "threads": int,
        "ede": _parse_bool, "augment": _parse_bool, "lr_milestones": _parse_floats,
        "c_tile": _parse_opt_int,
    }

    def __post_init__(self):
        for f in fields(self):
            if f.name in self._parsers and getattr(self, f.name) is not None:
                setattr(self, f.name, self._parsers[f.name](getattr(self, f.name)))
        if self.scheme not in VARIANTS + (FULL_PRECISION,):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        for name in ("data_dir", "out_dir"):
            if getattr(self, name) in ("", "none", "None"):
                setattr(self, name, None)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        """Read ``key = value`` lines (``#`` comments); ``overrides`` win."""
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            values[key.strip().replace("-", "_")] = value.strip()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(d["lr_milestones"])
        return d

    def to_text(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    epoch: int
    total_epochs: int
    seed: int

    def latent(self) -> dict:
        return {name: to_rsck(m.weight) for name, m in quant_layers(self.model)}

    def region_maps(self) -> dict:
        return {name: m.region_map for name, m in quant_layers(self.model)
                if m.region_map is not None}


@dataclass
class TrainResult:
    state: TrainState
    config: TrainConfig
    metrics: list = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1]["test_top1"]

    def quantized_layers(self) -> dict:
        return {name: m.export() for name, m in quant_layers(self.state.model)
                if m.variant != FULL_PRECISION}


def seed_everything(seed: int, threads: int = 1):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def evaluate(model, x, y, batch_size=512) -> tuple[float, float]:
    model.eval()
    loss_sum, correct = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            xb = torch.from_numpy(x[i : i + batch_size])
            yb = torch.from_numpy(y[i : i + batch_size])
            out = model(xb)
            loss_sum += float(F.cross_entropy(out, yb, reduction="sum"))
            correct += int((out.argmax(1) == yb).sum())
    return loss_sum / len(x), correct / len(x)


def _model_density(model) -> float | None:
    layers = [m for _, m in quant_layers(model) if m.variant != FULL_PRECISION]
    if not layers:
        return None
    nnz = total = 0
    for m in layers:
        q = m.export()
        nnz += density(q) * q.values.size
        total += q.values.size
    return nnz / total


def _region_digest(model) -> str:
    h = hashlib.sha256()
    for name, m in quant_layers(model):
        if m.region_map is not None:
            h.update(name.encode())
            h.update(m.region_map.digest().encode())
    return h.hexdigest()[:16]


METRIC_FIELDS = ("epoch", "loss", "train_top1", "test_loss", "test_top1", "lr", "t", "k",
                 "density", "region_digest")


def train(config: TrainConfig, data=None, metrics_path=None) -> TrainResult:
    """Train ``config.model`` on ``config.dataset``.

    ``data`` may carry preloaded ``(x_train, y_train, x_test, y_test)``.
    The error-decay schedule advances once per epoch; Delta is recomputed
    from the latent weights on every forward pass and latent weights are
    clamped to [-1, 1] after every optimizer step.
    """
    seed_everything(config.seed, config.threads)
    if data is None:
        data = load_dataset(config.dataset, config.data_dir, config.seed)
    xtr, ytr, xte, yte = data
    n_classes = int(max(ytr.max(), yte.max())) + 1
    extra = {"width": config.width} if config.model == "cnn4" else {}
    model = build_model(
        config.model, xtr.shape[1], n_classes, config.nonlinearity, config.scheme,
        config.delta_coeff, config.p, config.c_tile, config.multiplier, config.seed, **extra,
    )
    qlayers = [m for _, m in quant_layers(model)]
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    milestones = sorted({max(1, round(f * config.epochs)) for f in config.lr_milestones})
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones, config.lr_gamma)
    rng = np.random.default_rng(config.seed)
    state = TrainState(model, opt, 0, config.epochs, config.seed)
    result = TrainResult(state, config)
    if metrics_path is not None:
        _write_metrics_header(metrics_path, config)

    for epoch in range(config.epochs):
        t, k = ede_schedule(epoch, config.epochs, config.t_min, config.t_max)
        for m in qlayers:
            m.ede_on = config.ede
            m.schedule = (t, k)
        model.train()
        order = rng.permutation(len(xtr))
        loss_sum, correct = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            xb = xtr[idx]
            if config.augment:
                xb = random_crop_flip(xb, rng)
            xb = torch.from_numpy(np.ascontiguousarray(xb))
            yb = torch.from_numpy(ytr[idx])
            out = model(xb)
            loss = F.cross_entropy(out, yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for m in qlayers:
                m.clamp_()
            loss_sum += loss.item() * len(idx)
            correct += int((out.argmax(1) == yb).sum())
        lr = opt.param_groups[0]["lr"]
        sched.step()
        test_loss, test_top1 = evaluate(model, xte, yte)
        dens = _model_density(model)
        row = {
            "epoch": epoch + 1,
            "loss": loss_sum / len(xtr),
            "train_top1": correct / len(xtr),
            "test_loss": test_loss,
            "test_top1": test_top1,
            "lr": lr,
            "t": t,
            "k": k,
            "density": dens if dens is not None else "",
            "region_digest": _region_digest(model),
        }
        result.metrics.append(row)
        state.epoch = epoch + 1
        if metrics_path is not None:
            _append_metrics(metrics_path, row)
        log.info("epoch %d loss %.4f test_top1 %.4f", epoch + 1, row["loss"], test_top1)
    return result


def _write_metrics_header(path, config):
    with open(path, "w") as fh:
        for line in config.to_text().splitlines():
            fh.write(f"# {line}\n")
        fh.write(",".join(METRIC_FIELDS) + "\n")


def _append_metrics(path, row):
    def fmt(v):
        return repr(v) if isinstance(v, float) else str(v)

    with open(path, "a") as fh:
        fh.write(",".join(fmt(row[f]) for f in METRIC_FIELDS) + "\n")


def read_metrics(path) -> tuple[dict, list[dict]]:
    """Parse a metrics CSV back into (config dict, rows)."""
    config, rows, header = {}, [], None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            config[k] = v
        elif header is None:
            header = line.split(",")
        elif line:
            rows.append(dict(zip(header, line.split(","))))
    return config, rows


def save_checkpoint(result: TrainResult, out_dir) -> Path:
    """Write latent weights (``.t4``), packed layers (``.plum``, when the
    layer is packable) and ``meta.json`` describing both."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": result.config.as_dict(), "epoch": result.state.epoch, "layers": []}
    for name, m in quant_layers(result.state.model):
        entry = {"name": name, "variant": m.variant, "latent": f"{name}.t4"}
        save_tensor(out / entry["latent"], to_rsck(m.weight))
        if m.variant == SIGNED_BINARY and m.region_map.per_filter:
            entry["packed"] = f"{name}.plum"
            save_packed(out / entry["packed"], m.export())
        if m.region_map is not None:
            entry["region_digest"] = m.region_map.digest()
        entry["delta"] = m.export().delta if m.variant != FULL_PRECISION else None
        meta["layers"].append(entry)
    torch.save(result.state.model.state_dict(), out / "model.pt")
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    return out
