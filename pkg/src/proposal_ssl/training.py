"""Training loop: Adam, cosine schedule with warmup, checkpoints, metrics."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import DropoutConfig, random_augment_params, sample_views
from .autodiff import concat as t_concat
from .model import Model, ModelConfig
from .objectives import (LossWeights, ics_loss, ipd_loss, sinkhorn_assign,
                         total_loss)
from .pointcloud import GroundFilterConfig, PointCloud, load_point_cloud, remove_ground
from .proposals import generate_paired_proposals

__all__ = [
    "ConfigError",
    "TrainConfig",
    "TrainState",
    "parse_config",
    "load_train_config",
    "cosine_lr",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "pretrain",
]

CHECKPOINT_MAGIC = b"PSSLCKPT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


def parse_config(path) -> dict[str, str]:
    """Flat `key = value` file with `#` comments."""
    out: dict[str, str] = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class TrainConfig:
    dataset_dir: str = ""
    epochs: int = 36
    batch_frames: int = 2
    max_lr: float = 0.003
    warmup_epochs: int = 5
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 200
    # view sampling
    total_sample: int = 100_000
    shared_sample: int = 20_000
    # proposals
    num_proposals: int = 2048
    proposal_radius: float = 1.0
    proposal_k: int = 16
    # model
    backbone_widths: tuple = (64, 128)
    neighborhood_k: int = 8
    attention_mode: str = "linear_norm"
    embed_dim: int = 128
    cluster_count: int = 128
    # losses
    tau: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 3
    # ground removal
    ground_mode: str = "z_threshold"
    z_cut: float = 0.15
    ransac_iters: int = 100
    ransac_inlier_dist: float = 0.05

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup_epochs must be less than epochs")
        if self.max_lr <= 0:
            raise ConfigError("max_lr must be positive")

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(self.backbone_widths, self.neighborhood_k,
                           self.attention_mode, self.embed_dim, self.cluster_count)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.tau)

    @property
    def ground_filter(self) -> GroundFilterConfig:
        return GroundFilterConfig(self.ground_mode, self.z_cut,
                                  self.ransac_iters, self.ransac_inlier_dist)


_INT_KEYS = {"epochs", "batch_frames", "warmup_epochs", "seed", "checkpoint_every",
             "total_sample", "shared_sample", "num_proposals", "proposal_k",
             "neighborhood_k", "embed_dim", "cluster_count", "sinkhorn_iters",
             "ransac_iters"}
_FLOAT_KEYS = {"max_lr", "adam_eps", "proposal_radius", "tau", "alpha", "beta",
               "sinkhorn_eps", "z_cut", "ransac_inlier_dist"}
_STR_KEYS = {"dataset_dir", "attention_mode", "ground_mode"}


def load_train_config(path, overrides: dict | None = None) -> TrainConfig:
    raw = parse_config(path)
    if overrides:
        raw.update({k: str(v) for k, v in overrides.items()})
    kwargs: dict = {}
    for key, value in raw.items():
        if key in _INT_KEYS:
            kwargs[key] = int(value)
        elif key in _FLOAT_KEYS:
            kwargs[key] = float(value)
        elif key in _STR_KEYS:
            kwargs[key] = value
        elif key == "backbone_widths":
            kwargs[key] = tuple(int(v) for v in value.split(",") if v.strip())
        elif key == "adam_betas":
            b1, b2 = (float(v) for v in value.split(","))
            kwargs[key] = (b1, b2)
        # unknown keys are allowed (scene-generation settings share the file)
    return TrainConfig(**kwargs)


def cosine_lr(step: int, total_steps: int, warmup_steps: int, max_lr: float) -> float:
    """Linear warmup to max_lr, then half-cosine decay to 0."""
    if step > total_steps:
        raise ValueError("step beyond total_steps")
    if warmup_steps > 0 and step < warmup_steps:
        return max_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return max_lr
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return max_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


class TrainState:
    """Model parameters plus Adam moments and the global step counter."""

    def __init__(self, model: Model, betas=(0.9, 0.999), eps: float = 1e-8):
        self.model = model
        self.betas = betas
        self.eps = eps
        self.step = 0
        self.m = {n: np.zeros_like(t.data) for n, t in model.params.trainable_items()}
        self.v = {n: np.zeros_like(t.data) for n, t in model.params.trainable_items()}


def adam_step(state: TrainState, grads: dict[str, np.ndarray], lr: float) -> None:
    """Standard bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    t = state.step
    for name, g in grads.items():
        p = state.model.params[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ----------------------------------------------------------------------
# checkpoint container: magic, version, length-prefixed JSON header,
# then raw little-endian float64 buffers in header order


def save_checkpoint(state: TrainState, cfg: TrainConfig, path) -> None:
    model = state.model
    entries = []
    buffers = []

    def add(name, arr):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        buffers.append(arr.tobytes())

    for name, t in sorted(model.params.items()):
        add(f"param/{name}", t.data)
    for name in sorted(state.m):
        add(f"adam_m/{name}", state.m[name])
        add(f"adam_v/{name}", state.v[name])
    add("bn/running_mean", model.bn_state.running_mean)
    add("bn/running_var", model.bn_state.running_var)

    header = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "model": {
            "backbone_widths": list(cfg.backbone_widths),
            "neighborhood_k": cfg.neighborhood_k,
            "attention_mode": cfg.attention_mode,
            "embed_dim": cfg.embed_dim,
            "cluster_count": cfg.cluster_count,
        },
        "entries": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for buf in buffers:
            fh.write(buf)


def load_checkpoint(path) -> tuple[Model, dict, dict, int]:
    """Returns (model, adam_m, adam_v, step); moments empty if absent."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        mc = header["model"]
        model = Model(ModelConfig(tuple(mc["backbone_widths"]), mc["neighborhood_k"],
                                  mc["attention_mode"], mc["embed_dim"],
                                  mc["cluster_count"]))
        adam_m: dict = {}
        adam_v: dict = {}
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
            kind, name = entry["name"].split("/", 1)
            if kind == "param":
                model.params[name].data[...] = arr
            elif kind == "adam_m":
                adam_m[name] = arr
            elif kind == "adam_v":
                adam_v[name] = arr
            elif kind == "bn":
                setattr(model.bn_state, name, arr)
    return model, adam_m, adam_v, header["step"]


# ----------------------------------------------------------------------
# pre-training loop


def _frame_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, *tags]))


def load_dataset(dataset_dir) -> list[PointCloud]:
    paths = sorted(Path(dataset_dir).glob("*.bin"))
    if not paths:
        raise ConfigError(f"no .bin frames found in dataset_dir {dataset_dir!r}")
    return [load_point_cloud(p) for p in paths]


def build_batch(frames: list[PointCloud], cfg: TrainConfig,
                rng: np.random.Generator):
    """Views, correspondence, and paired proposals for a batch of frames."""
    batch = []
    drop = DropoutConfig(cfg.total_sample, cfg.shared_sample)
    for pc in frames:
        filtered = remove_ground(pc, cfg.ground_filter)
        p1 = random_augment_params(rng)
        p2 = random_augment_params(rng)
        x1, x2, m = sample_views(filtered, drop, p1, p2, rng=rng)
        n = min(cfg.num_proposals, len(m))
        ps1, ps2 = generate_paired_proposals(filtered, x1, x2, m, n,
                                             cfg.proposal_radius, cfg.proposal_k)
        batch.append((x1, x2, ps1, ps2))
    return batch


def train_step(state: TrainState, batch, cfg: TrainConfig) -> dict:
    """One forward/backward/Adam update over a prepared batch."""
    model = state.model
    y1_parts, y2_parts = [], []
    for x1, x2, ps1, ps2 in batch:
        y1_parts.append(model.encode_view(x1, ps1))
        y2_parts.append(model.encode_view(x2, ps2))
    y1 = y1_parts[0] if len(y1_parts) == 1 else t_concat(y1_parts, axis=0)
    y2 = y2_parts[0] if len(y2_parts) == 1 else t_concat(y2_parts, axis=0)
    n = y1.shape[0]

    # joint BN statistics and joint Sinkhorn over both views
    y_all = t_concat([y1, y2], axis=0)
    z_all = model.project(y_all, mode="train")
    z1 = z_all.gather(np.arange(n))
    z2 = z_all.gather(np.arange(n, 2 * n))
    q_all = model.predict(z_all)
    q_hat = sinkhorn_assign(q_all.stop_gradient().data,
                            cfg.sinkhorn_eps, cfg.sinkhorn_iters)
    q1 = q_all.gather(np.arange(n))
    q2 = q_all.gather(np.arange(n, 2 * n))

    w = cfg.loss_weights
    l_ipd = ipd_loss(z1, z2, w.tau)
    l_ics = ics_loss(q1, q2, q_hat[:n], q_hat[n:])
    loss = total_loss(l_ipd, l_ics, w)

    model.params.zero_grad()
    loss.backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for name, t in model.params.trainable_items()}

    sims = z1.data @ z2.data.T
    pos_cos = float(np.mean(np.diag(sims)))
    neg_cos = float((sims.sum() - np.trace(sims)) / (n * n - n)) if n > 1 else 0.0
    usage = q_hat.mean(axis=0)
    usage = usage[usage > 0]
    cluster_entropy = float(-(usage * np.log(usage)).sum())

    return {
        "grads": grads,
        "loss_ipd": float(l_ipd.data),
        "loss_ics": float(l_ics.data),
        "loss_total": float(loss.data),
        "pos_cos": pos_cos,
        "neg_cos": neg_cos,
        "cluster_entropy": cluster_entropy,
    }


def pretrain(cfg: TrainConfig, out_dir, resume: str | None = None) -> Path:
    """Run the full loop; returns the final checkpoint path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = load_dataset(cfg.dataset_dir)

    model = Model(cfg.model_config, seed=cfg.seed)
    state = TrainState(model, cfg.adam_betas, cfg.adam_eps)
    if resume:
        model, adam_m, adam_v, step = load_checkpoint(resume)
        state = TrainState(model, cfg.adam_betas, cfg.adam_eps)
        state.m.update(adam_m)
        state.v.update(adam_v)
        state.step = step

    steps_per_epoch = max(1, len(frames) // cfg.batch_frames)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume else "w"
    final_path = out_dir / "checkpoint_final.bin"
    with open(metrics_path, mode) as metrics_fh:
        while state.step < total_steps:
            epoch = state.step // steps_per_epoch
            idx_in_epoch = state.step % steps_per_epoch
            order = _frame_rng(cfg.seed, 1, epoch).permutation(len(frames))
            sel = order[idx_in_epoch * cfg.batch_frames:
                        (idx_in_epoch + 1) * cfg.batch_frames]
            rng = _frame_rng(cfg.seed, 2, state.step)
            batch = build_batch([frames[i] for i in sel], cfg, rng)

            lr = cosine_lr(state.step, total_steps, warmup_steps, cfg.max_lr)
            result = train_step(state, batch, cfg)
            if not np.isfinite(result["loss_total"]):
                raise FloatingPointError(
                    f"NaN loss at step {state.step}; last checkpoint retained")
            adam_step(state, result.pop("grads"), lr)

            record = {"step": state.step, "lr": lr, **result}
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")

            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state, cfg, out_dir / f"checkpoint_{state.step:07d}.bin")
    save_checkpoint(state, cfg, final_path)
    return final_path
