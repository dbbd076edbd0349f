"""Training, evaluation, checkpoints and run manifests."""

from __future__ import annotations

import csv
import json
import logging
import subprocess
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ops, snapshot
from .data import (CLASS_NAMES, IGNORE, NUM_CLASSES, DatasetSpec, Scan, SceneConfig, check_disjoint,
                   dataset)
from .losses import LossConfig, class_frequencies, class_weights, label_pyramid, multi_layer_loss
from .metrics import MetricsCSV, SegMetrics, write_summary
from .network import Network, NetworkConfig, build_network
from .nn import SGD
from .projection import ProjectionConfig, restore_labels
from .tensor import default_dtype, no_grad

log = logging.getLogger(__name__)

ALL_CLASS_NAMES = {IGNORE: "ignore", **CLASS_NAMES}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: DatasetSpec = field(default_factory=lambda: DatasetSpec(count=40, base_seed=0))
    val: DatasetSpec = field(default_factory=lambda: DatasetSpec(count=10, base_seed=1000))
    epochs: int = 30
    batch_size: int = 2
    lr: float = 0.01
    warmup_epochs: float = 1.0
    lr_after_warmup: str = "constant"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        if isinstance(self.loss, dict):
            loss = dict(self.loss)
            if "stage_weights" in loss:
                loss["stage_weights"] = tuple(loss["stage_weights"])
            self.loss = LossConfig(**loss)
        for name in ("train", "val"):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, DatasetSpec(**getattr(self, name)))
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.lr_after_warmup != "constant":
            raise ValueError("only a constant learning rate after warm-up is supported")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.network.num_classes != self.loss.num_classes:
            raise ValueError("network and loss disagree on the number of classes")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp from lr/10 to lr over the warm-up, then constant."""
    warm = int(round(cfg.warmup_epochs * steps_per_epoch))
    if step >= warm or warm == 0:
        return cfg.lr
    lo = cfg.lr / 10
    return lo + (cfg.lr - lo) * step / warm


# -- run manifest ---------------------------------------------------------------

def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


@dataclass
class RunManifest:
    command: str
    output_dir: str
    config_paths: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    git_describe: str = field(default_factory=git_describe)
    timings: dict = field(default_factory=dict)
    status: str = "running"
    extra: dict = field(default_factory=dict)

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    def write(self) -> Path:
        out = Path(self.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


# -- data preparation -------------------------------------------------------------

@dataclass
class Prepared:
    """A scan split turned into arrays the training loop can batch."""

    scans: list[Scan]
    features: np.ndarray       # (N, 5, h, w)
    masks: np.ndarray          # (N, h, w)
    labels: np.ndarray         # (N, h, w)
    pyramids: list[list[np.ndarray]]

    def batch(self, idx):
        idx = np.asarray(idx)
        pyr = [np.stack([self.pyramids[i][level] for i in idx]) for level in range(5)]
        return self.features[idx], self.masks[idx], self.labels[idx], pyr


def prepare(scans: list[Scan], num_classes: int, ignore_class: int | None) -> Prepared:
    if not scans:
        raise ValueError("empty split")
    features = np.concatenate([s.image.features for s in scans])
    masks = np.stack([s.image.mask for s in scans])
    if any(s.image.label_map is None for s in scans):
        raise ValueError("training and evaluation need labelled scans")
    labels = np.stack([s.image.label_map for s in scans])
    pyramids = [label_pyramid(lab, num_classes=num_classes, ignore_class=ignore_class)
                for lab in labels]
    return Prepared(scans, features, masks, labels, pyramids)


def input_statistics(prepared: Prepared) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std over masked training pixels."""
    vals = prepared.features.transpose(1, 0, 2, 3)[:, prepared.masks]
    std = vals.std(axis=1)
    std[std == 0] = 1.0
    return tuple(float(v) for v in vals.mean(axis=1)), tuple(float(v) for v in std)


# -- evaluation ---------------------------------------------------------------------

def predict(net: Network, features, masks, batch_size: int = 2,
            ignore_class: int | None = IGNORE) -> np.ndarray:
    """Class ids per pixel; the ignore class is never predicted."""
    net.eval()
    preds = []
    with no_grad():
        for start in range(0, len(features), batch_size):
            sl = slice(start, start + batch_size)
            _, final = net.forward(features[sl], masks[sl], heads=False)
            logits = final.data.copy()
            if ignore_class is not None:
                logits[:, ignore_class] = -np.inf
            preds.append(logits.argmax(axis=1))
    return np.concatenate(preds)


def evaluate(net: Network, prepared: Prepared, ignore_class: int | None = IGNORE,
             batch_size: int = 2) -> tuple[SegMetrics, np.ndarray]:
    """Metrics over masked pixels of the projected images."""
    pred = predict(net, prepared.features, prepared.masks, batch_size, ignore_class)
    m = SegMetrics.empty(net.cfg.num_classes, ignore_class)
    m.update(pred[prepared.masks], prepared.labels[prepared.masks])
    return m, pred


# -- checkpoints ---------------------------------------------------------------------

def save_checkpoint(net: Network, directory, meta: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    net.cfg.save(d / "network.json")
    snapshot.save_state(d / "weights.bin", d / "weights.json", net.state_dict())
    (d / "meta.json").write_text(json.dumps(meta or {}, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory) -> tuple[Network, dict]:
    d = Path(directory)
    if not (d / "network.json").exists():
        raise FileNotFoundError(f"{d} is not a checkpoint directory")
    cfg = NetworkConfig.load(d / "network.json")
    net = build_network(cfg)
    net.load_state_dict(snapshot.load_state(d / "weights.bin", d / "weights.json"))
    meta_path = d / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return net.eval(), meta


# -- training -------------------------------------------------------------------------

def _dump_batch(out: Path, step: int, idx, feats, masks, labels) -> Path:
    path = out / f"nan_batch_step{step}.npz"
    np.savez(path, scan_index=np.asarray(idx), features=feats, masks=masks, labels=labels)
    return path


def train(cfg: TrainConfig, out_dir, manifest: RunManifest | None = None) -> dict:
    """Train, logging per-epoch loss and validation metrics; keeps the best-val checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = manifest or RunManifest(command="train", output_dir=str(out))
    manifest.seeds.update(train=cfg.seed, train_scans=list(cfg.train.seeds) if
                          cfg.train.source == "synthetic" else cfg.train.sequences,
                          val_scans=list(cfg.val.seeds) if cfg.val.source == "synthetic"
                          else cfg.val.sequences)
    check_disjoint(cfg.train, cfg.val)
    dtype = np.float64 if cfg.dtype == "float64" else np.float32
    ignore = cfg.loss.ignore_class
    C = cfg.loss.num_classes
    if C != NUM_CLASSES:
        log.warning("training with %d classes; the synthetic data has %d", C, NUM_CLASSES)

    with manifest.phase("data"):
        train_set = prepare(dataset(cfg.train), C, ignore)
        val_set = prepare(dataset(cfg.val), C, ignore)
    freqs = class_frequencies(list(train_set.labels), C, ignore)
    weights = class_weights(freqs, cfg.loss.epsilon)
    mean, std = input_statistics(train_set)
    net_cfg = NetworkConfig.from_dict({**cfg.network.to_dict(), "feature_mean": mean,
                                       "feature_std": std,
                                       "input_hw": tuple(train_set.features.shape[2:])})
    cfg.save(out / "config.json")

    train_log = out / "train_log.csv"
    with open(train_log, "w", newline="") as fh:
        csv.writer(fh).writerow(["epoch", "loss", "lr_end"])
    metrics_csv = MetricsCSV(out / "metrics.csv", ALL_CLASS_NAMES, ignore)

    rng = np.random.default_rng(cfg.seed)
    best = {"epoch": -1, "miou": -np.inf}
    n = len(train_set.scans)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    step = 0
    with default_dtype(dtype):
        net = build_network(net_cfg, seed=int(rng.integers(2 ** 63)))
        opt = SGD(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
        for epoch in range(1, cfg.epochs + 1):
            net.train()
            order = rng.permutation(n)
            losses = []
            with manifest.phase("train"):
                for start in range(0, n, cfg.batch_size):
                    idx = order[start:start + cfg.batch_size]
                    feats, masks, labels, pyr = train_set.batch(idx)
                    opt.lr = lr_at(step, steps_per_epoch, cfg)
                    stages, _ = net.forward(feats, masks, heads=any(cfg.loss.stage_weights[1:]))
                    loss = multi_layer_loss([s.head_logits for s in stages], pyr, weights, cfg.loss)
                    value = loss.item()
                    if not np.isfinite(value):
                        dump = _dump_batch(out, step, idx, feats, masks, labels)
                        manifest.status = "diverged"
                        manifest.extra["nan_dump"] = str(dump)
                        manifest.write()
                        raise TrainingDiverged(
                            f"non-finite loss {value} at epoch {epoch} step {step} "
                            f"(scans {[train_set.scans[i].name for i in idx]}); batch saved to {dump}")
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    losses.append(value)
                    step += 1
            with open(train_log, "a", newline="") as fh:
                csv.writer(fh).writerow([epoch, repr(float(np.mean(losses))), repr(opt.lr)])
            with manifest.phase("eval"):
                val_metrics, _ = evaluate(net, val_set, ignore, cfg.batch_size)
            metrics_csv.append(epoch, "val", val_metrics)
            log.info("epoch %d loss %.4f val mIoU %.4f", epoch, np.mean(losses), val_metrics.miou)
            if val_metrics.miou > best["miou"]:
                best = {"epoch": epoch, "miou": val_metrics.miou,
                        "accuracy": val_metrics.accuracy}
                save_checkpoint(net, out / "checkpoint",
                                {"epoch": epoch, "val": val_metrics.to_dict(ALL_CLASS_NAMES),
                                 "class_names": ALL_CLASS_NAMES, "ignore_class": ignore})
    summary = {"best_epoch": best["epoch"], "best_val_miou": best["miou"],
               "best_val_accuracy": best.get("accuracy"), "final_train_loss": float(np.mean(losses)),
               "class_frequencies": freqs.tolist(), "class_weights": weights.tolist(),
               "parameters": net.num_parameters()}
    write_summary(out / "summary.json", summary)
    return summary


def eval_checkpoint(checkpoint, spec: DatasetSpec, out_dir=None, batch_size: int = 2) -> dict:
    """Evaluate a checkpoint on a split; optionally write per-point restored predictions."""
    net, meta = load_checkpoint(checkpoint)
    if net.cfg.num_classes != NUM_CLASSES:
        raise ValueError(f"checkpoint predicts {net.cfg.num_classes} classes but the data "
                         f"has {NUM_CLASSES}")
    ignore = meta.get("ignore_class", IGNORE)
    scans = dataset(spec)
    prepared = prepare(scans, net.cfg.num_classes, ignore)
    metrics, pred = evaluate(net, prepared, ignore, batch_size)
    report = metrics.to_dict(ALL_CLASS_NAMES)
    report["scans"] = len(scans)
    if out_dir is not None:
        out = Path(out_dir)
        pdir = out / "predictions"
        pdir.mkdir(parents=True, exist_ok=True)
        proj = _projection_of(spec, prepared)
        point_metrics = SegMetrics.empty(net.cfg.num_classes, ignore)
        for scan, p2d in zip(scans, pred):
            per_point = restore_labels(p2d, scan.cloud, proj)
            per_point.astype("<u4").tofile(pdir / (scan.name.replace("/", "_") + ".label"))
            if scan.cloud.labels is not None:
                point_metrics.update(per_point, scan.cloud.labels)
        report["points"] = {"miou": point_metrics.miou, "accuracy": point_metrics.accuracy}
        write_summary(out / "eval.json", report)
    return report


def _projection_of(spec: DatasetSpec, prepared: Prepared) -> ProjectionConfig:
    if spec.source == "synthetic":
        return SceneConfig(**spec.scene).projection()
    h, w = prepared.features.shape[2:]
    return ProjectionConfig(h=h, w=w)
