"""Joint optimization: the combined objective, Adam with warmup + cosine
decay, gradient clipping, teacher/codebook orchestration, and binary
checkpointing with bit-exact resume.

Update order within a step is fixed: teacher forward (no grad), student
forward, decoder forward, backward, clip, Adam, teacher EMA, codebook
update, step counter.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import encoder as enc
from . import quantize as qz
from .autodiff import Tensor
from .model import JointModel, ModelConfig
from .sampler import should_drop_condition
from .transformer import BlockConfig

PHASES = ("pretrain", "finetune-tts", "finetune-tokenize")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 2000
    warmup_steps: int = 100
    peak_lr: float = 2e-4
    lambda_dec: float = 0.25
    batch_size: int = 8
    clip_norm: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-6
    crop_len: int = 100
    phase: str = "pretrain"
    finetune_scope: str = "decoder"
    cond_dropout: float = 0.2
    prompt_frac: tuple = (0.7, 1.0)

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("warmup must be shorter than the total step budget")
        if self.lambda_dec < 0:
            raise ValueError(f"decoder loss weight must be >= 0, got {self.lambda_dec}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip norm must be positive, got {self.clip_norm}")
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.finetune_scope not in ("decoder", "full"):
            raise ValueError(f"finetune scope must be 'decoder' or 'full'")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to zero at the end."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span
    return float(cfg.peak_lr * 0.5 * (1.0 + np.cos(np.pi * progress)))


def adam_update(data, grad, m, v, t, lr, beta1, beta2, eps) -> None:
    """Standard bias-corrected Adam, in place; t is the 1-based step."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_by_global_norm(grads: dict, clip: float):
    """Scale all gradients by min(1, clip / ||g||); returns the pre-clip norm."""
    total = 0.0
    for name in grads:
        g = grads[name]
        total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > clip:
        scale = clip / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


@dataclass
class TrainerState:
    model: JointModel
    cfg: TrainConfig
    trainable: dict
    m: dict
    v: dict
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def create(cls, model: JointModel, cfg: TrainConfig, rng=None) -> "TrainerState":
        scope = "full" if cfg.phase == "pretrain" else cfg.finetune_scope
        trainable = model.trainable(scope)
        m = {k: np.zeros_like(t.data) for k, t in trainable.items()}
        v = {k: np.zeros_like(t.data) for k, t in trainable.items()}
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        return cls(model=model, cfg=cfg, trainable=trainable, m=m, v=v, rng=rng)


def _pretrain_losses(state: TrainerState, item):
    """Per-item forward for the joint objective; returns losses and the
    masked teacher embeddings/labels needed for the codebook update."""
    model = state.model
    x = item.features
    L = x.shape[0]
    teacher_outs = model.teacher_layers(x)
    targets = model.target_layers(teacher_outs)
    labels = enc.teacher_labels(targets, model.codebooks)
    student = model.student_layers(x, mask=item.mask)
    enc_loss = enc.encoder_loss(student[-1], model.heads(), labels, item.mask)
    t = dec.sample_time(state.rng, "uniform")
    x0 = state.rng.standard_normal((L, model.cfg.d_x)).astype(model.cfg.dtype)
    fs = dec.ot_path(x0, np.asarray(x, dtype=model.cfg.dtype), t, model.cfg.sigma_min)
    v_pred = dec.decoder_forward(
        Tensor(fs.phi.astype(model.cfg.dtype)), t, model.condition(student), model.params, model.cfg.decoder
    )
    dec_loss = dec.cfm_loss(v_pred, fs, item.mask)
    idx = item.mask.indices
    code_batch = [(z[idx], y[idx]) for z, y in zip(targets, labels)]
    return enc_loss, dec_loss, code_batch


def _finetune_losses(state: TrainerState, item):
    """Per-item decoder loss for the conditional fine-tuning phases."""
    model = state.model
    cfg = state.cfg
    x = item.features
    L = x.shape[0]
    frozen = cfg.finetune_scope == "decoder"
    if frozen:
        with ad.no_grad():
            layers = model.student_layers(x)
        layers = [Tensor(z.data) for z in layers]
    else:
        layers = model.student_layers(x)

    dropped = False
    if cfg.phase == "finetune-tts":
        z_full = model.condition(layers)
        null_row = model.params["ft.null_cond"]
        frac = state.rng.uniform(*cfg.prompt_frac)
        m_len = min(L, max(1, int(round(frac * L))))
        start = int(state.rng.integers(0, L - m_len + 1))
        indicator = np.zeros((L, 1), dtype=model.cfg.dtype)
        indicator[start : start + m_len] = 1.0
        drop = should_drop_condition(state.rng, cfg.cond_dropout)
        dropped = drop
        null_rows = ad.reshape(null_row, (1, model.cfg.encoder.d)) * Tensor(
            np.ones((L, 1), dtype=model.cfg.dtype)
        )
        if drop:
            condition = null_rows
        else:
            condition = z_full * Tensor(1.0 - indicator) + null_rows * Tensor(indicator)
            condition = condition + ad.take_rows(model.params["ft.phone_emb"], item.phones)
        loss_mask = enc.MaskSpec(
            indices=np.arange(start, start + m_len),
            starts=np.array([start]),
            prob=frac,
            span=m_len,
        )
    else:  # finetune-tokenize
        layers_np = [z.data for z in layers]
        sem_layer = int(model.extras["tok.layer"])
        sem_model = model.extras["tok.semantic"]
        sem_tokens = sem_model.assign(layers_np[sem_layer])
        q_rows = Tensor(sem_model.centroids[sem_tokens].astype(model.cfg.dtype))
        condition = ad.matmul(q_rows, model.params[f"cond.w{sem_layer}"])
        res_model = model.extras.get("tok.residual")
        if res_model is not None:
            cond_np = [model.params[f"cond.w{j}"].data for j in range(len(layers_np))]
            rest = qz.residual_sum(layers_np, cond_np, sem_layer)
            res_tokens = res_model.assign(rest)
            condition = condition + Tensor(res_model.centroids[res_tokens].astype(model.cfg.dtype))
        loss_mask = enc.MaskSpec(
            indices=np.arange(L), starts=np.array([0]), prob=1.0, span=L
        )

    t = dec.sample_time(state.rng, "logit-normal")
    x0 = state.rng.standard_normal((L, model.cfg.d_x)).astype(model.cfg.dtype)
    fs = dec.ot_path(x0, np.asarray(x, dtype=model.cfg.dtype), t, model.cfg.sigma_min)
    v_pred = dec.decoder_forward(
        Tensor(fs.phi.astype(model.cfg.dtype)), t, condition, model.params, model.cfg.decoder
    )
    return dec.cfm_loss(v_pred, fs, loss_mask), dropped


def train_step(state: TrainerState, batch) -> dict:
    """One optimization step over a batch; returns the metric row."""
    model = state.model
    cfg = state.cfg
    enc_vals, dec_vals = [], []
    total = None
    dropped = 0
    code_batches = [[] for _ in model.codebooks]
    for i in range(batch.size):
        item = batch.item(i)
        if cfg.phase == "pretrain":
            enc_loss, dec_loss, code_batch = _pretrain_losses(state, item)
            item_total = enc_loss + dec_loss * cfg.lambda_dec
            enc_vals.append(enc_loss.item())
            for k, pair in enumerate(code_batch):
                code_batches[k].append(pair)
        else:
            dec_loss, item_dropped = _finetune_losses(state, item)
            item_total = dec_loss
            enc_vals.append(0.0)
            dropped += int(item_dropped)
        dec_vals.append(dec_loss.item())
        total = item_total if total is None else total + item_total
    total = total * (1.0 / batch.size)

    lr = lr_at(state.step, cfg)
    if not np.isfinite(total.item()):
        raise TrainingDiverged(
            f"non-finite loss at step {state.step}: total={total.item()}, lr={lr}, "
            f"encoder={np.mean(enc_vals)}, decoder={np.mean(dec_vals)}"
        )
    grads_by_tensor = ad.backward(total, leaves=state.trainable.values())
    grads = {name: grads_by_tensor[t] for name, t in state.trainable.items()}
    grad_norm = clip_by_global_norm(grads, cfg.clip_norm)
    if not np.isfinite(grad_norm):
        raise TrainingDiverged(f"non-finite gradient norm at step {state.step}, lr={lr}")
    t_adam = state.step + 1
    for name, param in state.trainable.items():
        adam_update(
            param.data, grads[name], state.m[name], state.v[name],
            t_adam, lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
        )

    row = {
        "step": state.step,
        "lr": lr,
        "loss_total": total.item(),
        "loss_encoder": float(np.mean(enc_vals)),
        "loss_decoder": float(np.mean(dec_vals)),
        "grad_norm": grad_norm,
        "drop_frac": dropped / batch.size,
    }
    if cfg.phase == "pretrain":
        enc.ema_update(model.teacher, model.params, state.step)
        for k, cb in enumerate(model.codebooks):
            pts = np.concatenate([p for p, _ in code_batches[k]])
            labs = np.concatenate([y for _, y in code_batches[k]])
            cb.update(pts, labs)
            row[f"ppl_cb{k}"] = cb.perplexity(labs)
    else:
        for k in range(model.cfg.n_targets):
            row[f"ppl_cb{k}"] = 0.0
    state.step += 1
    return row


def train(state: TrainerState, corpus, steps: int, on_step=None) -> list:
    """Run ``steps`` optimization steps, drawing batches from the corpus."""
    from .data import make_batch

    rows = []
    for _ in range(steps):
        batch = make_batch(
            corpus,
            state.cfg.batch_size,
            state.cfg.crop_len,
            state.model.cfg.mask_prob,
            state.model.cfg.mask_span,
            state.rng,
        )
        row = train_step(state, batch)
        rows.append(row)
        if on_step is not None:
            on_step(row)
    return rows


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"FDCKPT01"
CKPT_VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def arch_hash(config: dict) -> bytes:
    """Hash of the architecture-determining part of a run config."""
    subset = {
        "model": config.get("model", {}),
        "d_x": config.get("data", {}).get("d_x"),
        "n_phones": config.get("data", {}).get("n_phones"),
    }
    return hashlib.sha256(json.dumps(subset, sort_keys=True).encode()).digest()


@dataclass
class Checkpoint:
    arrays: dict
    step: int
    rng_state: dict
    config: dict
    arch: bytes


def save_checkpoint(path, arrays: dict, step: int, rng_state, config: dict) -> None:
    """Write the named-array container atomically (temp file then rename)."""
    tmp = str(path) + ".tmp"
    cfg_blob = json.dumps(config, sort_keys=True).encode()
    rng_blob = json.dumps(rng_state, default=int).encode()
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(arch_hash(config))
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<Q", step))
        f.write(struct.pack("<I", len(rng_blob)))
        f.write(rng_blob)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(_DTYPES[code]).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {version} unsupported (expected {CKPT_VERSION})"
            )
        arch = f.read(32)
        (cfg_len,) = struct.unpack("<I", f.read(4))
        config = json.loads(f.read(cfg_len).decode())
        (step,) = struct.unpack("<Q", f.read(8))
        (rng_len,) = struct.unpack("<I", f.read(4))
        rng_state = json.loads(f.read(rng_len).decode())
        (n,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(n):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            code, ndim = struct.unpack("<BB", f.read(2))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            dtype = np.dtype(_DTYPES[code])
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()
    if arch_hash(config) != arch:
        raise CheckpointError(f"{path}: stored architecture hash does not match its config")
    return Checkpoint(arrays=arrays, step=step, rng_state=rng_state, config=config, arch=arch)


def state_arrays(state: TrainerState) -> dict:
    """Everything a resume needs, as named arrays."""
    model = state.model
    arrays = {name: t.data for name, t in model.params.items()}
    for name, t in model.teacher.params.items():
        arrays[f"teacher.{name}"] = t.data
    for k, cb in enumerate(model.codebooks):
        arrays[f"codebook{k}.sums"] = cb.sums
        arrays[f"codebook{k}.counts"] = cb.counts
    for name in state.m:
        arrays[f"opt.m.{name}"] = state.m[name]
        arrays[f"opt.v.{name}"] = state.v[name]
    if model.norm_mean is not None:
        arrays["norm.mean"] = model.norm_mean
        arrays["norm.std"] = model.norm_std
    if "tok.semantic" in model.extras:
        arrays["tok.semantic.centroids"] = model.extras["tok.semantic"].centroids
        arrays["tok.layer"] = np.array([model.extras["tok.layer"]], dtype=np.int64)
        res = model.extras.get("tok.residual")
        if res is not None:
            arrays["tok.residual.centroids"] = res.centroids
    return arrays


def config_dict(mcfg: ModelConfig, extra: dict | None = None) -> dict:
    """Minimal run-config dict for a model (library use; the CLI builds the
    full resolved config).  Round-trips through model_config_from_dict."""
    out = {
        "model": {
            "d": mcfg.encoder.d,
            "heads": mcfg.encoder.heads,
            "ffn": mcfg.encoder.ffn,
            "encoder_layers": mcfg.encoder.layers,
            "decoder_layers": mcfg.decoder.layers,
            "conv_kernel": mcfg.encoder.conv_kernel,
            "conv_groups": mcfg.encoder.conv_groups,
            "vocab": mcfg.vocab,
            "n_targets": mcfg.n_targets,
            "code_decay": mcfg.code_decay,
            "teacher_start": mcfg.teacher_start,
            "teacher_end": mcfg.teacher_end,
            "teacher_ramp": mcfg.teacher_ramp,
            "mask_prob": mcfg.mask_prob,
            "mask_span": mcfg.mask_span,
            "sigma_min": mcfg.sigma_min,
            "precision": mcfg.precision,
        },
        "data": {"d_x": mcfg.d_x, "n_phones": mcfg.n_phones},
    }
    if extra:
        out.update(extra)
    return out


def model_config_from_dict(mc: dict, d_x: int, n_phones: int) -> ModelConfig:
    return ModelConfig(
        d_x=d_x,
        encoder=BlockConfig(
            d=mc["d"], heads=mc["heads"], ffn=mc["ffn"], layers=mc["encoder_layers"],
            conv_kernel=mc["conv_kernel"], conv_groups=mc["conv_groups"],
        ),
        decoder=BlockConfig(
            d=mc["d"], heads=mc["heads"], ffn=mc["ffn"], layers=mc["decoder_layers"],
            use_unet_skips=True,
        ),
        vocab=mc["vocab"],
        n_targets=mc["n_targets"],
        code_decay=mc["code_decay"],
        teacher_start=mc["teacher_start"],
        teacher_end=mc["teacher_end"],
        teacher_ramp=mc["teacher_ramp"],
        mask_prob=mc["mask_prob"],
        mask_span=mc["mask_span"],
        sigma_min=mc["sigma_min"],
        n_phones=n_phones,
        precision=mc["precision"],
    )


def restore_model(ckpt: Checkpoint) -> JointModel:
    """Rebuild a model skeleton from the stored config and load its arrays."""
    cfgd = ckpt.config
    mcfg = model_config_from_dict(
        cfgd["model"], cfgd["data"]["d_x"], cfgd["data"]["n_phones"]
    )
    model = JointModel.create(mcfg, np.random.default_rng(0))
    if any(k.startswith("ft.") for k in ckpt.arrays):
        model.add_conditioning_params(np.random.default_rng(0))
    for name, tensor in model.params.items():
        if name not in ckpt.arrays:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        tensor.data = ckpt.arrays[name].astype(mcfg.dtype)
    for name, tensor in model.teacher.params.items():
        tensor.data = ckpt.arrays[f"teacher.{name}"].astype(mcfg.dtype)
    for k, cb in enumerate(model.codebooks):
        cb.sums = ckpt.arrays[f"codebook{k}.sums"].astype(mcfg.dtype)
        cb.counts = ckpt.arrays[f"codebook{k}.counts"].astype(mcfg.dtype)
        cb.codes = cb.sums / cb.counts[:, None]
    if "norm.mean" in ckpt.arrays:
        model.norm_mean = ckpt.arrays["norm.mean"]
        model.norm_std = ckpt.arrays["norm.std"]
    if "tok.semantic.centroids" in ckpt.arrays:
        model.extras["tok.semantic"] = qz.KMeansModel(ckpt.arrays["tok.semantic.centroids"])
        model.extras["tok.layer"] = int(ckpt.arrays["tok.layer"][0])
        if "tok.residual.centroids" in ckpt.arrays:
            model.extras["tok.residual"] = qz.KMeansModel(ckpt.arrays["tok.residual.centroids"])
    return model


def restore_training(ckpt: Checkpoint, cfg: TrainConfig) -> TrainerState:
    """Resume exactly: model arrays, optimizer moments, step and RNG stream."""
    model = restore_model(ckpt)
    state = TrainerState.create(model, cfg)
    for name in state.m:
        key_m, key_v = f"opt.m.{name}", f"opt.v.{name}"
        if key_m in ckpt.arrays:
            state.m[name] = ckpt.arrays[key_m].astype(model.cfg.dtype)
            state.v[name] = ckpt.arrays[key_v].astype(model.cfg.dtype)
    state.step = ckpt.step
    bg = np.random.PCG64()
    bg.state = ckpt.rng_state
    state.rng = np.random.Generator(bg)
    return state
